use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use stn_icnn::data::{derive_seed, synth_face, write_sample, write_split, write_truth, Split, SynthSpec};
use stn_icnn::par;

use crate::manifest::Manifest;
use crate::Failure;

#[derive(Args, Debug, Clone)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 250)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas `HxW`.
    #[arg(long, default_value = "176x192")]
    pub size: String,
    /// How many of the samples (the last ones) go to the test split; the
    /// rest form the training split. Default: a fifth.
    #[arg(long)]
    pub test: Option<usize>,
    /// Window of the crop targets recorded in the sidecar.
    #[arg(long, default_value_t = 81)]
    pub window: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Failure::Usage(format!("size must look like 176x192, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

pub fn sample_id(i: usize) -> String {
    format!("synth_{i:05}")
}

pub fn run(a: &GenSynthArgs) -> Result<()> {
    crate::init_threads(a.threads)?;
    let (h, w) = parse_size(&a.size)?;
    let test = a.test.unwrap_or(a.count / 5);
    if a.count == 0 || test > a.count {
        return Err(Failure::Usage(format!("cannot take {test} test samples out of {}", a.count)).into());
    }
    let mut m = Manifest::new("gen-synth");
    m.set("out", a.out.display())
        .set("count", a.count)
        .set("seed", a.seed)
        .set("size", format!("{h}x{w}"))
        .set("test", test)
        .set("window", a.window);
    m.write(&a.out)?;

    let faces = par::map_indexed(a.count, |i| {
        let spec = SynthSpec::random(derive_seed(a.seed, "synth", i as u64), h, w)?;
        synth_face(sample_id(i), &spec, (a.window, a.window))
    });
    let faces = faces
        .into_iter()
        .collect::<stn_icnn::Result<Vec<_>>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    for f in &faces {
        write_sample(&a.out, &f.sample).with_context(|| format!("writing {}", f.sample.id))?;
    }
    let ids: Vec<String> = faces.iter().map(|f| f.sample.id.clone()).collect();
    let (train, held) = ids.split_at(a.count - test);
    write_split(&a.out, Split::Train, train)?;
    write_split(&a.out, Split::Tuning, &[])?;
    write_split(&a.out, Split::Test, held)?;
    let truths: Vec<_> = faces.into_iter().map(|f| f.truth).collect();
    write_truth(&a.out, &truths)?;
    println!("wrote {} samples ({} train, {} test) to {}", a.count, train.len(), held.len(), a.out.display());
    Ok(())
}
