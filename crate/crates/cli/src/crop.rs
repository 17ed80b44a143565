use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use stn_icnn::data::{load_helen, preprocess, read_truth, Preprocessed, Split, SynthTruth, TRUTH_FILE};
use stn_icnn::labels::Part;
use stn_icnn::metrics::argmax_channels;
use stn_icnn::pipeline::{center_error, occlude, ModelSet};
use stn_icnn::stn::{baseline_crop, crop_with_rows, BaselineCrop, RoughFrame, ThetaForm, ThetaRow};
use stn_icnn::tensor::Tensor;
use stn_icnn::train::{theta_targets_with, Checkpoint, TrainState};

use crate::manifest::Manifest;
use crate::Failure;

#[derive(Args, Debug, Clone)]
pub struct CropArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained model; without it (or with --theta-hat) windows come from
    /// the exact crop targets of the padded labels.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 81)]
    pub window: usize,
    /// Permit even windows, which cannot be centred on a pixel.
    #[arg(long)]
    pub allow_even: bool,
    /// Part whose channels are zeroed in the rough map, or `none`.
    #[arg(long, default_value = "none")]
    pub occlude: String,
    /// Drive the transformer with exact targets instead of the model.
    #[arg(long)]
    pub theta_hat: bool,
    /// Use the literal `w/W` target form instead of the corner-aligned one.
    #[arg(long)]
    pub literal: bool,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Side-by-side images are written for this many samples.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// One (sample, part) comparison.
#[derive(Clone, Debug)]
pub struct PartRow {
    pub id: String,
    pub part: Part,
    /// `None` when the baseline found no pixels of the part.
    pub max_abs_diff: Option<f64>,
    /// Transformer window centre vs the sidecar centre, padded pixels.
    pub center_error: Option<f64>,
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

fn to_rgb8(patch: &Tensor<f32>, out: &mut image::RgbImage, x0: u32) {
    let (h, w) = (patch.shape()[1], patch.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| (patch.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.put_pixel(x0 + x as u32, y as u32, image::Rgb(px));
        }
    }
}

fn save_pair(dir: &Path, id: &str, part: Part, base: Option<&Tensor<f32>>, stn: &Tensor<f32>) -> Result<()> {
    let (h, w) = (stn.shape()[1] as u32, stn.shape()[2] as u32);
    let mut img = image::RgbImage::new(2 * w + 2, h);
    if let Some(b) = base {
        to_rgb8(b, &mut img, 0);
    }
    to_rgb8(stn, &mut img, w + 2);
    let path = dir.join(format!("{id}_{}.png", part.name()));
    img.save(&path).with_context(|| format!("writing {}", path.display()))
}

fn compare_one(
    pre: &Preprocessed,
    models: Option<&ModelSet<f32>>,
    a: &CropArgs,
    occluded: Option<Part>,
    truth: Option<&SynthTruth>,
) -> Result<(Vec<PartRow>, Vec<(Part, Option<Tensor<f32>>, Tensor<f32>)>)> {
    let window = (a.window, a.window);
    let s = pre.padded_size();
    let classes: Vec<&[u8]> = Part::ALL.iter().map(|p| p.classes()).collect();
    let (base, rows) = match models {
        Some(m) if !a.theta_hat => {
            let mut rough = m.rough_map(&pre.resized)?;
            if let Some(p) = occluded {
                occlude(&mut rough, p);
            }
            let labels = argmax_channels(&rough);
            let base = baseline_crop(labels.data(), labels.width(), &classes, &pre.rough_frame(), &pre.padded, window)?;
            (base, m.locate(&rough)?)
        }
        _ => {
            let mut labels = pre.padded_labels.clone();
            if let Some(p) = occluded {
                for l in labels.data_mut().iter_mut().filter(|l| p.classes().contains(l)) {
                    *l = 0;
                }
            }
            let base = baseline_crop(labels.data(), s, &classes, &RoughFrame::IDENTITY, &pre.padded, window)?;
            let form = if a.literal { ThetaForm::Literal } else { ThetaForm::CornerAligned };
            let rows: Vec<ThetaRow> = theta_targets_with(pre, window, form)
                .into_iter()
                .map(|r| r.unwrap_or(ThetaRow::IDENTITY))
                .collect();
            (base, rows)
        }
    };
    let stn = crop_with_rows(&pre.padded, &rows, window)?;
    let mut out = Vec::with_capacity(Part::ALL.len());
    let mut patches = Vec::with_capacity(Part::ALL.len());
    for (part, (b, st)) in Part::ALL.iter().zip(base.into_iter().zip(stn)) {
        let center = truth.map(|t| center_error(rows[part.index()], t.centers[part.index()], s));
        let (diff, bp) = match b {
            BaselineCrop::Patch { patch, .. } => (Some(max_abs_diff(&patch, &st)), Some(patch)),
            BaselineCrop::Missing => (None, None),
        };
        out.push(PartRow {
            id: pre.id.clone(),
            part: *part,
            max_abs_diff: diff,
            center_error: center,
        });
        patches.push((*part, bp, st));
    }
    Ok((out, patches))
}

pub fn summarize(rows: &[PartRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let diff = r.max_abs_diff.map_or("missing".to_string(), |d| format!("{d:.8}"));
        let ce = r.center_error.map_or("na".to_string(), |c| format!("{c:.4}"));
        let _ = writeln!(s, "{} {} max_abs_diff {diff} center_error {ce}", r.id, r.part.name());
    }
    let diffs: Vec<f64> = rows.iter().filter_map(|r| r.max_abs_diff).collect();
    let missing = rows.len() - diffs.len();
    let max = diffs.iter().copied().fold(0.0, f64::max);
    let above = diffs.iter().filter(|&&d| d > 1e-3).count();
    let ces: Vec<f64> = rows.iter().filter_map(|r| r.center_error).collect();
    let _ = writeln!(
        s,
        "summary parts {} missing {missing} max_abs_diff {max:.8} above_1e-3 {above}",
        rows.len()
    );
    if !ces.is_empty() {
        let mean = ces.iter().sum::<f64>() / ces.len() as f64;
        let worst = ces.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(s, "summary center_error mean {mean:.4} max {worst:.4}");
    }
    s
}

pub fn run(a: &CropArgs) -> Result<()> {
    crate::init_threads(a.threads)?;
    if a.window % 2 == 0 && !a.allow_even {
        return Err(Failure::Usage(format!(
            "window {} is even: it has no centre pixel, so crops shift by half a pixel; pass --allow-even to compare anyway",
            a.window
        ))
        .into());
    }
    if a.window < 3 {
        return Err(Failure::Usage("window must be at least 3".into()).into());
    }
    let occluded = match a.occlude.as_str() {
        "none" => None,
        p => Some(Part::parse(p).ok_or_else(|| Failure::Usage(format!("unknown part {p:?}")))?),
    };
    let split = Split::parse(&a.split).ok_or_else(|| Failure::Usage(format!("unknown split {:?}", a.split)))?;
    let mut m = Manifest::new("crop-compare");
    m.set("data", a.data.display())
        .set("window", a.window)
        .set("allow_even", a.allow_even)
        .set("occlude", &a.occlude)
        .set("theta_hat", a.theta_hat)
        .set("literal", a.literal)
        .set("split", &a.split)
        .set("out", a.out.display());
    if let Some(c) = &a.ckpt {
        m.set("ckpt", c.display());
    }
    m.write(&a.out)?;

    let state = match &a.ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Some(TrainState::from_checkpoint(&ckpt)?)
        }
        None => None,
    };
    let truth = if a.data.join(TRUTH_FILE).exists() { Some(read_truth(&a.data)?) } else { None };
    let samples = load_helen(&a.data, split)?;
    let pres = samples.iter().map(preprocess).collect::<stn_icnn::Result<Vec<_>>>()?;
    let results = stn_icnn::par::map_indexed(pres.len(), |i| {
        let t = truth.as_ref().and_then(|t| t.get(&pres[i].id));
        compare_one(&pres[i], state.as_ref().map(|s| &s.models), a, occluded, t).map_err(|e| e.to_string())
    });
    let mut rows = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (r, patches) = r.map_err(|e| Failure::Data(format!("{}: {e}", pres[i].id)))?;
        if i < a.images {
            for (part, b, st) in &patches {
                save_pair(&a.out, &pres[i].id, *part, b.as_ref(), st)?;
            }
        }
        rows.extend(r);
    }
    let text = summarize(&rows);
    let path = a.out.join("summary.txt");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", text.lines().filter(|l| l.starts_with("summary")).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}
