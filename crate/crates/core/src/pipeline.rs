//! The full labeling pipeline: coarse labels, part windows, fine labels,
//! remapping and assembly.

use crate::data::{LabelMap, Preprocessed, COARSE_SIZE};
use crate::icnn::{IcnnConfig, IcnnModel};
use crate::labels::{Part, PartKind, NUM_CLASSES, NUM_PARTS};
use crate::metrics::{argmax_channels, assemble_scores, F1Counts, PartMap};
use crate::nn::Forward;
use crate::par;
use crate::stn::{crop_parts, crop_with_rows, remap_parts, LocNet, LocNetConfig, ThetaRow};
use crate::tensor::{BnUpdate, Element, Graph, Mode, Tensor, Var};
use crate::{Error, Result};

/// What the localization network sees of the coarse output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoughEncoding {
    /// Raw coarse scores.
    Scores,
    /// Per-pixel channel softmax: zeroing a channel then means "absent".
    Softmax,
}

impl RoughEncoding {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scores" => Some(RoughEncoding::Scores),
            "softmax" => Some(RoughEncoding::Softmax),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RoughEncoding::Scores => "scores",
            RoughEncoding::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub coarse: IcnnConfig,
    pub loc: LocNetConfig,
    /// Indexed by [`PartKind::index`].
    pub fine: [IcnnConfig; 4],
    /// Crop window `(h, w)`; must match the fine input size.
    pub window: (usize, usize),
    pub encoding: RoughEncoding,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coarse: IcnnConfig::coarse(),
            loc: LocNetConfig::default(),
            fine: PartKind::ALL.map(|k| IcnnConfig::fine(k.channels())),
            window: (81, 81),
            encoding: RoughEncoding::Softmax,
        }
    }
}

impl PipelineConfig {
    /// Narrow networks for single-core synthetic runs.
    pub fn desk() -> Self {
        let coarse = IcnnConfig {
            widths: [16, 16, 16, 16],
            rounds: 1,
            ..IcnnConfig::coarse()
        };
        let fine = PartKind::ALL.map(|k| IcnnConfig {
            widths: [8, 8, 8, 8],
            rounds: 1,
            ..IcnnConfig::fine(k.channels())
        });
        PipelineConfig {
            coarse,
            loc: LocNetConfig {
                widths: [8, 8, 16, 16, 16, 16, 32, 32],
                init_scale: 0.42,
                ..LocNetConfig::default()
            },
            fine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.loc.validate()?;
        let c = &self.coarse;
        if c.in_channels != 3 || c.out_channels != NUM_CLASSES || c.input_size != COARSE_SIZE {
            return Err(Error::Config("coarse network must map 3x128x128 to 9 channels".into()));
        }
        if self.loc.in_channels != NUM_CLASSES || self.loc.input_size != COARSE_SIZE || self.loc.parts != NUM_PARTS {
            return Err(Error::Config("locnet must read 9x128x128 and emit 6 parts".into()));
        }
        if self.window.0 != self.window.1 || self.window.0 < 8 {
            return Err(Error::Config(format!("window {:?} must be square and at least 8", self.window)));
        }
        for kind in PartKind::ALL {
            let f = &self.fine[kind.index()];
            f.validate()?;
            if f.in_channels != 3 || f.out_channels != kind.channels() || f.input_size != self.window.0 {
                return Err(Error::Config(format!(
                    "{} network must map 3x{w}x{w} to {} channels",
                    kind.name(),
                    kind.channels(),
                    w = self.window.0
                )));
            }
        }
        Ok(())
    }
}

/// Coarse network, localization network and one fine network per part kind.
#[derive(Clone, Debug)]
pub struct ModelSet<T> {
    pub config: PipelineConfig,
    pub coarse: IcnnModel<T>,
    pub loc: LocNet<T>,
    pub fine: Vec<IcnnModel<T>>,
}

/// Graph leaves of every model's parameters.
pub struct Bound {
    pub coarse: Vec<Var>,
    pub loc: Vec<Var>,
    pub fine: Vec<Vec<Var>>,
}

/// Batchnorm statistics observed by a train-mode pass, per model.
#[derive(Default)]
pub struct BnStats<T> {
    pub coarse: Vec<BnUpdate<T>>,
    pub loc: Vec<BnUpdate<T>>,
    pub fine: Vec<Vec<BnUpdate<T>>>,
}

/// Which models a pass runs in train mode and differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub coarse: bool,
    pub loc: bool,
    pub fine: bool,
}

impl<T: Element> ModelSet<T> {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let coarse = IcnnModel::new(config.coarse.clone(), seed)?;
        let loc = LocNet::new(config.loc.clone(), seed.wrapping_add(1))?;
        let fine = PartKind::ALL
            .iter()
            .map(|k| IcnnModel::new(config.fine[k.index()].clone(), seed.wrapping_add(2 + k.index() as u64)))
            .collect::<Result<_>>()?;
        Ok(ModelSet {
            config,
            coarse,
            loc,
            fine,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, t: Trainable) -> Bound {
        Bound {
            coarse: self.coarse.store.bind(g, t.coarse),
            loc: self.loc.store.bind(g, t.loc),
            fine: self.fine.iter().map(|m| m.store.bind(g, t.fine)).collect(),
        }
    }

    /// Coarse scores `[B, 9, 128, 128]`.
    pub fn coarse_forward(&self, g: &mut Graph<T>, bound: &Bound, mode: Mode, x: Var, bn: &mut Vec<BnUpdate<T>>) -> Result<Var> {
        let mut f = Forward::new(g, &bound.coarse, mode);
        let z = self.coarse.forward(&mut f, x)?;
        bn.append(&mut f.bn_updates);
        Ok(z)
    }

    pub fn encode_rough(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        match self.config.encoding {
            RoughEncoding::Scores => Ok(z),
            RoughEncoding::Softmax => g.softmax_channels(z),
        }
    }

    /// Constrained theta `[B, 6, 2, 3]` from an encoded rough map.
    pub fn loc_forward(&self, g: &mut Graph<T>, bound: &Bound, mode: Mode, rough: Var, bn: &mut Vec<BnUpdate<T>>) -> Result<Var> {
        let mut f = Forward::new(g, &bound.loc, mode);
        let theta = self.loc.forward(&mut f, rough)?;
        bn.append(&mut f.bn_updates);
        Ok(theta)
    }

    /// Crops every part of every sample; returns, per part kind, the stacked
    /// patches `[parts * B, 3, h, w]` ordered part-major.
    pub fn crop_by_kind(&self, g: &mut Graph<T>, padded: &[Tensor<T>], theta: Var) -> Result<Vec<Var>> {
        let mut per_sample = Vec::with_capacity(padded.len());
        for (b, img) in padded.iter().enumerate() {
            let s = img.shape();
            let x = g.constant(img.clone().reshape(vec![1, s[0], s[1], s[2]])?);
            let th = g.narrow(theta, 0, b, 1)?;
            per_sample.push(crop_parts(g, x, th, self.config.window)?);
        }
        let crops = g.concat(&per_sample, 0)?;
        let (bsz, (h, w)) = (padded.len(), self.config.window);
        PartKind::ALL
            .iter()
            .map(|kind| {
                let parts = kind
                    .parts()
                    .iter()
                    .map(|p| {
                        let c = g.narrow(crops, 1, p.index(), 1)?;
                        g.reshape(c, vec![bsz, 3, h, w])
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&parts, 0)
            })
            .collect()
    }

    /// Fine scores for one kind's stacked patches.
    pub fn fine_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        kind: PartKind,
        mode: Mode,
        patches: Var,
        bn: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let mut f = Forward::new(g, &bound.fine[kind.index()], mode);
        let y = self.fine[kind.index()].forward(&mut f, patches)?;
        bn.append(&mut f.bn_updates);
        Ok(y)
    }

    /// Eval-mode encoded rough map `[9, 128, 128]` of one resized image.
    pub fn rough_map(&self, resized: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::NONE);
        let mut sink = Vec::new();
        let x = g.constant(resized.cast::<T>().reshape(vec![1, 3, COARSE_SIZE, COARSE_SIZE])?);
        let z = self.coarse_forward(&mut g, &bound, Mode::Eval, x, &mut sink)?;
        let rough = g.value(z).cast::<f32>().reshape(vec![NUM_CLASSES, COARSE_SIZE, COARSE_SIZE])?;
        Ok(match self.config.encoding {
            RoughEncoding::Scores => rough,
            RoughEncoding::Softmax => softmax_rows(&rough),
        })
    }

    /// Eval-mode theta rows from an encoded rough map.
    pub fn locate(&self, rough: &Tensor<f32>) -> Result<Vec<ThetaRow>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::NONE);
        let mut sink = Vec::new();
        let r = g.constant(rough.cast::<T>().reshape(vec![1, NUM_CLASSES, COARSE_SIZE, COARSE_SIZE])?);
        let theta = self.loc_forward(&mut g, &bound, Mode::Eval, r, &mut sink)?;
        Ok(ThetaRow::batch_from_tensor(g.value(theta))?.remove(0))
    }

    /// Labels one preprocessed sample in eval mode.
    pub fn predict(&self, pre: &Preprocessed, opts: &PredictOptions) -> Result<Prediction> {
        let mut rough = self.rough_map(&pre.resized)?;
        if let Some(part) = opts.occlude {
            occlude(&mut rough, part);
        }
        let rough_labels = argmax_channels(&rough);
        let rows = match &opts.theta {
            Some(rows) => rows.clone(),
            None => self.locate(&rough)?,
        };
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::NONE);
        let mut sink = Vec::new();
        let s = pre.padded_size();
        let patches = crop_with_rows(&pre.padded, &rows, self.config.window)?;
        let mut parts = Vec::with_capacity(NUM_PARTS);
        let mut scores = Vec::with_capacity(NUM_PARTS);
        for part in Part::ALL {
            let kind = part.kind();
            let (h, w) = self.config.window;
            let p = g.constant(patches[part.index()].cast::<T>().reshape(vec![1, 3, h, w])?);
            let y = self.fine_forward(&mut g, &bound, kind, Mode::Eval, p, &mut sink)?;
            scores.push(g.value(y).cast::<f32>().reshape(vec![kind.channels(), h, w])?);
        }
        for (part, map) in Part::ALL.iter().zip(remap_parts(&scores, &rows, (s, s))?) {
            parts.push(PartMap {
                part: *part,
                scores: map,
            });
        }
        let padded_labels = argmax_channels(&assemble_scores(&parts, (s, s))?);
        let labels = unpad(&padded_labels, pre.pad, pre.original);
        Ok(Prediction {
            rough,
            rough_labels,
            theta: rows,
            patch_scores: scores,
            padded_labels,
            labels,
        })
    }

    /// Predictions for many samples, in input order.
    pub fn predict_all(&self, pres: &[Preprocessed], opts: &PredictOptions) -> Result<Vec<Prediction>> {
        par::map_indexed(pres.len(), |i| self.predict(&pres[i], opts)).into_iter().collect()
    }
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        coarse: false,
        loc: false,
        fine: false,
    };
}

#[derive(Clone, Debug, Default)]
pub struct PredictOptions {
    /// Zero this part's channels in the encoded rough map before localization.
    pub occlude: Option<Part>,
    /// Use these rows instead of the localization network.
    pub theta: Option<Vec<ThetaRow>>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Encoded rough map `[9, 128, 128]` as the localization network saw it.
    pub rough: Tensor<f32>,
    pub rough_labels: LabelMap,
    pub theta: Vec<ThetaRow>,
    /// Fine scores per part `[C_i, h, w]`.
    pub patch_scores: Vec<Tensor<f32>>,
    pub padded_labels: LabelMap,
    /// Labels in the original frame.
    pub labels: LabelMap,
}

/// Zeroes the channels of `part` in a `[9, H, W]` map.
pub fn occlude(rough: &mut Tensor<f32>, part: Part) {
    let plane = rough.shape()[1] * rough.shape()[2];
    for &c in part.classes() {
        rough.data_mut()[c as usize * plane..(c as usize + 1) * plane].fill(0.0);
    }
}

fn softmax_rows(x: &Tensor<f32>) -> Tensor<f32> {
    let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..plane {
        let m = (0..c).map(|k| d[k * plane + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (d[k * plane + i] - m).exp();
            d[k * plane + i] = e;
            sum += e;
        }
        for k in 0..c {
            d[k * plane + i] /= sum;
        }
    }
    out
}

/// Cuts the original `(H, W)` region out of a padded label map.
pub fn unpad(m: &LabelMap, (top, left): (usize, usize), (h, w): (usize, usize)) -> LabelMap {
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| m.get(x + left, y + top)).collect();
    LabelMap::new(h, w, data).expect("positive size")
}

/// Binary fine targets of one sample under `rows`: per part, `[C_i, h, w]`
/// with the part's classes bilinearly cropped from the padded labels,
/// thresholded at 0.5, and channel 0 set where no class is.
pub fn fine_targets(pre: &Preprocessed, rows: &[ThetaRow], window: (usize, usize)) -> Result<Vec<Tensor<f32>>> {
    let s = pre.padded_size();
    let plane = window.0 * window.1;
    Part::ALL
        .iter()
        .map(|&part| {
            let classes = part.classes();
            let mut planes = Vec::with_capacity(classes.len() * s * s);
            for &c in classes {
                planes.extend(pre.padded_labels.data().iter().map(|&l| if l == c { 1.0f32 } else { 0.0 }));
            }
            let src = Tensor::from_vec(vec![classes.len(), s, s], planes)?;
            let fg = crop_with_rows(&src, &rows[part.index()..=part.index()], window)?.remove(0);
            let mut out = vec![0.0f32; (classes.len() + 1) * plane];
            for i in 0..plane {
                let mut any = false;
                for k in 0..classes.len() {
                    if fg.data()[k * plane + i] >= 0.5 {
                        out[(k + 1) * plane + i] = 1.0;
                        any = true;
                    }
                }
                if !any {
                    out[i] = 1.0;
                }
            }
            Tensor::from_vec(vec![classes.len() + 1, window.0, window.1], out)
        })
        .collect()
}

/// Pixel distance between a row's window centre and `truth` in an `s x s` frame.
pub fn center_error(row: ThetaRow, truth: (f64, f64), s: usize) -> f64 {
    let (x, y) = row.center_px(s, s);
    ((x - truth.0).powi(2) + (y - truth.1).powi(2)).sqrt()
}

/// F1 counts of final labels against the working-class ground truth.
pub fn final_counts(preds: &[Prediction], pres: &[Preprocessed]) -> Result<F1Counts> {
    let mut c = F1Counts::default();
    for (p, pre) in preds.iter().zip(pres) {
        let gt = unpad(&pre.padded_labels, pre.pad, pre.original);
        c.add(&p.labels, &gt)?;
    }
    Ok(c)
}

/// F1 counts of the coarse argmax against the resized labels.
pub fn coarse_counts(preds: &[Prediction], pres: &[Preprocessed]) -> Result<F1Counts> {
    let roughs: Vec<&Tensor<f32>> = preds.iter().map(|p| &p.rough).collect();
    coarse_counts_from(&roughs, pres)
}

/// As [`coarse_counts`], from bare rough maps.
pub fn coarse_counts_from<R: std::borrow::Borrow<Tensor<f32>>>(roughs: &[R], pres: &[Preprocessed]) -> Result<F1Counts> {
    let mut c = F1Counts::default();
    for (r, pre) in roughs.iter().zip(pres) {
        c.add(&argmax_channels(r.borrow()), &pre.resized_labels)?;
    }
    Ok(c)
}
