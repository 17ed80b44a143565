//! Training criteria, label assembly and F1 evaluation.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::labels::{Part, NUM_CLASSES};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

/// Mean sigmoid cross-entropy of raw scores against binary targets.
pub fn bce_mean<T: Element>(scores: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if scores.shape() != target.shape() {
        return Err(Error::shape("bce", format!("{:?} vs {:?}", scores.shape(), target.shape())));
    }
    let sum: f64 = scores
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &t)| {
            let (x, t) = (x.as_f64(), t.as_f64());
            x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Mean of `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("smooth_l1", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).as_f64().abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Coarse criterion: mean BCE over all label channels.
pub fn coarse_loss<T: Element>(g: &mut Graph<T>, scores: Var, target: &Tensor<T>) -> Result<Var> {
    g.bce_with_logits(scores, target)
}

/// Mean over parts of each part's mean BCE. `groups` pairs stacked
/// predictions with targets and the number of parts stacked in each.
pub fn system_loss<T: Element>(g: &mut Graph<T>, groups: &[(Var, &Tensor<T>, usize)]) -> Result<Var> {
    let total: usize = groups.iter().map(|(_, _, n)| n).sum();
    if groups.is_empty() || total == 0 {
        return Err(Error::Config("system loss over no parts".into()));
    }
    let mut acc: Option<Var> = None;
    for &(pred, target, n) in groups {
        let l = g.bce_with_logits(pred, target)?;
        let l = g.scale(l, n as f64 / total as f64);
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// A part's fine scores remapped onto the full canvas: channel 0 is the
/// part background, channel `k` scores `part.classes()[k - 1]`.
#[derive(Clone, Debug)]
pub struct PartMap {
    pub part: Part,
    pub scores: Tensor<f32>,
}

/// Global score canvas `[9, H, W]`: background fixed at 0, class channels
/// start at -inf and take the maximum of every contributing part score.
pub fn assemble_scores(parts: &[PartMap], (h, w): (usize, usize)) -> Result<Tensor<f32>> {
    let plane = h * w;
    let mut canvas = vec![f32::NEG_INFINITY; NUM_CLASSES * plane];
    canvas[..plane].fill(0.0);
    for pm in parts {
        let classes = pm.part.classes();
        if pm.scores.shape() != [classes.len() + 1, h, w] {
            return Err(Error::shape(
                "assemble",
                format!("{} scores {:?} on a {h}x{w} canvas", pm.part.name(), pm.scores.shape()),
            ));
        }
        for (k, &class) in classes.iter().enumerate() {
            let src = &pm.scores.data()[(k + 1) * plane..(k + 2) * plane];
            let dst = &mut canvas[class as usize * plane..(class as usize + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = d.max(s);
            }
        }
    }
    Tensor::from_vec(vec![NUM_CLASSES, h, w], canvas)
}

/// Label map of the assembled canvas: channel softmax then argmax, which
/// reduces to the first maximal score per pixel.
pub fn assemble_final(parts: &[PartMap], canvas: (usize, usize)) -> Result<LabelMap> {
    let scores = assemble_scores(parts, canvas)?;
    Ok(argmax_channels(&scores))
}

/// Per-pixel argmax over the channels of `[C, H, W]` (first maximum wins).
pub fn argmax_channels<T: Element>(scores: &Tensor<T>) -> LabelMap {
    let (c, h, w) = match scores.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("argmax over {s:?}"),
    };
    let plane = h * w;
    let d = scores.data();
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + i] > d[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels).expect("positive size")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

const EYES: &[u8] = &[3, 4];
const BROWS: &[u8] = &[1, 2];
const MOUTH: &[u8] = &[6, 7, 8];

/// Pixel counts accumulated over any number of image pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct F1Counts {
    /// Indexed by class - 1.
    pub classes: [Counts; NUM_CLASSES - 1],
    pub eyes: Counts,
    pub brows: Counts,
    pub mouth: Counts,
}

impl F1Counts {
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(
                "f1",
                format!("{}x{} vs {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
            ));
        }
        let group = |set: &[u8], p: u8, g: u8, c: &mut Counts| match (set.contains(&p), set.contains(&g)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                if p != 0 {
                    self.classes[p as usize - 1].tp += 1;
                }
            } else {
                if p != 0 {
                    self.classes[p as usize - 1].fp += 1;
                }
                if g != 0 {
                    self.classes[g as usize - 1].fn_ += 1;
                }
            }
            group(EYES, p, g, &mut self.eyes);
            group(BROWS, p, g, &mut self.brows);
            group(MOUTH, p, g, &mut self.mouth);
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &F1Counts) {
        for (a, b) in self.classes.iter_mut().zip(&o.classes) {
            a.add(*b);
        }
        self.eyes.add(o.eyes);
        self.brows.add(o.brows);
        self.mouth.add(o.mouth);
    }

    pub fn report(&self) -> F1Report {
        let mut overall = Counts::default();
        for c in &self.classes {
            overall.add(*c);
        }
        F1Report {
            counts: self.clone(),
            overall,
        }
    }
}

/// Per-class and merged F1 scores; `overall` pools the counts of the eight
/// part classes.
#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub counts: F1Counts,
    pub overall: Counts,
}

pub const TABLE_COLUMNS: [&str; 8] = ["eyes", "brows", "nose", "I-mouth", "U-lip", "L-lip", "mouth", "overall"];

impl F1Report {
    /// F1 of working class `class` (1..=8).
    pub fn class_f1(&self, class: u8) -> f64 {
        self.counts.classes[class as usize - 1].f1()
    }

    /// Scores in [`TABLE_COLUMNS`] order.
    pub fn columns(&self) -> [f64; 8] {
        let c = &self.counts;
        [
            c.eyes.f1(),
            c.brows.f1(),
            self.class_f1(5),
            self.class_f1(7),
            self.class_f1(6),
            self.class_f1(8),
            c.mouth.f1(),
            self.overall.f1(),
        ]
    }

    /// Two-line table: header, then `row` with three-decimal scores.
    pub fn table(&self, row: &str) -> String {
        let mut s = format!("{:<12}", "model");
        for c in TABLE_COLUMNS {
            let _ = write!(s, " {c:>8}");
        }
        let _ = write!(s, "\n{row:<12}");
        for v in self.columns() {
            let _ = write!(s, " {v:>8.3}");
        }
        s.push('\n');
        s
    }
}

pub fn f1_scores(pred: &LabelMap, gt: &LabelMap) -> Result<F1Report> {
    let mut c = F1Counts::default();
    c.add(pred, gt)?;
    Ok(c.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_thirds() {
        let c = Counts { tp: 2, fp: 1, fn_: 1 };
        assert_eq!(c.precision(), 2.0 / 3.0);
        assert_eq!(c.f1(), 2.0 / 3.0);
    }

    #[test]
    fn merged_eyes_ignore_side_confusion() {
        let gt = LabelMap::new(1, 2, vec![3, 4]).unwrap();
        let pred = LabelMap::new(1, 2, vec![4, 3]).unwrap();
        let r = f1_scores(&pred, &gt).unwrap();
        assert_eq!(r.counts.eyes.f1(), 1.0);
        assert_eq!(r.class_f1(3), 0.0);
    }

    #[test]
    fn table_layout() {
        let m = LabelMap::new(1, 3, vec![1, 5, 7]).unwrap();
        let t = f1_scores(&m, &m).unwrap().table("ours");
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines[0].split_whitespace().skip(1).collect::<Vec<_>>(), TABLE_COLUMNS);
        assert_eq!(lines[1].split_whitespace().last(), Some("1.000"));
    }
}
