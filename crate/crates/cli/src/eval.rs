use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use stn_icnn::data::{load_helen, preprocess, LabelMap, Preprocessed, Split};
use stn_icnn::labels::CLASS_NAMES;
use stn_icnn::metrics::{F1Counts, F1Report};
use stn_icnn::pipeline::{final_counts, unpad, PredictOptions};
use stn_icnn::train::{Checkpoint, TrainState};

use crate::manifest::Manifest;
use crate::Failure;

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Complete checkpoint (coarse, localization and fine networks).
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Write one grayscale class-index PNG per image here.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Table row plus per-class precision, recall and F1.
pub fn render_report(name: &str, r: &F1Report) -> String {
    let mut s = r.table(name);
    s.push('\n');
    let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
    for (i, c) in r.counts.classes.iter().enumerate() {
        let _ = writeln!(s, "{:<12} {:>9.4} {:>9.4} {:>9.4}", CLASS_NAMES[i + 1], c.precision(), c.recall(), c.f1());
    }
    let o = &r.overall;
    let _ = writeln!(s, "{:<12} {:>9.4} {:>9.4} {:>9.4}", "overall", o.precision(), o.recall(), o.f1());
    s
}

fn ground_truth(pre: &Preprocessed) -> LabelMap {
    unpad(&pre.padded_labels, pre.pad, pre.original)
}

fn write_labels(dir: &Path, id: &str, m: &LabelMap) -> Result<()> {
    let path = dir.join(format!("{id}.png"));
    image::GrayImage::from_raw(m.width() as u32, m.height() as u32, m.data().to_vec())
        .expect("buffer matches size")
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn run(a: &EvalArgs) -> Result<()> {
    crate::init_threads(a.threads)?;
    let split = Split::parse(&a.split).ok_or_else(|| Failure::Usage(format!("unknown split {:?}", a.split)))?;
    let dir = match a.report.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut m = Manifest::new("eval");
    m.set("data", a.data.display())
        .set("split", &a.split)
        .set("report", a.report.display())
        .set("oracle", a.oracle);
    if let Some(c) = &a.ckpt {
        m.set("ckpt", c.display());
    }
    m.write(&dir)?;

    let samples = load_helen(&a.data, split)?;
    if samples.is_empty() {
        return Err(Failure::Data(format!("split {} of {} is empty", a.split, a.data.display())).into());
    }
    let pres = samples.iter().map(preprocess).collect::<stn_icnn::Result<Vec<_>>>()?;
    let (name, labels, counts) = if a.oracle {
        let labels: Vec<LabelMap> = pres.iter().map(ground_truth).collect();
        let mut c = F1Counts::default();
        for l in &labels {
            c.add(l, l)?;
        }
        ("oracle", labels, c)
    } else {
        let path = a.ckpt.as_ref().expect("clap requires --ckpt without --oracle");
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let state = TrainState::from_checkpoint(&ckpt)?;
        if !state.trained.iter().all(|&t| t) {
            return Err(Failure::Data(format!(
                "incomplete checkpoint set in {}: coarse, localization and fine networks must all be trained",
                path.display()
            ))
            .into());
        }
        let preds = state.models.predict_all(&pres, &PredictOptions::default())?;
        let c = final_counts(&preds, &pres)?;
        ("stn-icnn", preds.into_iter().map(|p| p.labels).collect(), c)
    };
    if let Some(out) = &a.labels_out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        for (pre, l) in pres.iter().zip(&labels) {
            write_labels(out, &pre.id, l)?;
        }
    }
    let text = render_report(name, &counts.report());
    fs::write(&a.report, &text).with_context(|| format!("writing {}", a.report.display()))?;
    print!("{text}");
    Ok(())
}
