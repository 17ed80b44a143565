//! Synthetic faces: filled ellipses with integer centres, so that every part
//! mask is point-symmetric and its pixel centroid is exactly the centre.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{preprocess, LabelMap, Sample};
use crate::labels::{Part, NUM_CATEGORIES, NUM_PARTS};
use crate::stn::{theta_ground_truth, ThetaForm, ThetaRow};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Sidecar with exact centres and crop parameters, in the dataset root.
pub const TRUTH_FILE: &str = "synth_truth.txt";

const BASE_HEIGHT: f64 = 176.0;

const PALETTE: [[u8; 3]; NUM_CATEGORIES] = [
    [20, 24, 30],
    [205, 160, 130],
    [200, 30, 30],
    [30, 170, 40],
    [30, 40, 200],
    [220, 210, 40],
    [190, 40, 190],
    [40, 200, 200],
    [250, 250, 250],
    [120, 110, 10],
    [70, 45, 25],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: i64,
    pub cy: i64,
    pub ax: f64,
    pub ay: f64,
}

impl Ellipse {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let (u, v) = ((x - self.cx) as f64 / self.ax, (y - self.cy) as f64 / self.ay);
        u * u + v * v <= 1.0
    }

    fn grown(&self, d: f64) -> Ellipse {
        Ellipse {
            ax: self.ax + d,
            ay: self.ay + d,
            ..*self
        }
    }
}

/// Layout of one synthetic face.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub face: Ellipse,
    pub hair: f64,
    /// In [`Part::ALL`] order.
    pub parts: [Ellipse; NUM_PARTS],
    /// Half height of the inner-mouth band.
    pub mouth_inner: i64,
    pub colors: [[u8; 3]; NUM_CATEGORIES],
}

impl SynthSpec {
    /// Draws a random layout for a `height x width` canvas.
    pub fn random(seed: u64, height: usize, width: usize) -> Result<SynthSpec> {
        if height.min(width) < 96 {
            return Err(Error::Synth(format!("canvas {height}x{width} below 96 pixels")));
        }
        let k = height.min(width) as f64 / BASE_HEIGHT;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // rounding on small canvases can close the gaps between parts; redraw
        // from the same stream until the layout is valid
        let mut last = None;
        for _ in 0..64 {
            let mut ri = |lo: i64, hi: i64| (rng.random_range(lo..=hi) as f64 * k).round() as i64;
            let cx = width as i64 / 2 + ri(-8, 8);
            let cy = height as i64 / 2 + ri(-6, 6);
            let face = Ellipse {
                cx,
                cy,
                ax: ri(64, 70) as f64,
                ay: ri(74, 80) as f64,
            };
            let half_sep = ri(29, 32);
            let eye_y = cy - ri(11, 13);
            let eye = |x: i64, dx: i64, dy: i64, ax: i64, ay: i64| Ellipse {
                cx: x + dx,
                cy: eye_y + dy,
                ax: ax as f64,
                ay: ay as f64,
            };
            let l_eye = eye(cx - half_sep, ri(-1, 1), ri(-1, 1), ri(10, 13), ri(5, 7));
            let r_eye = eye(cx + half_sep, ri(-1, 1), ri(-1, 1), ri(10, 13), ri(5, 7));
            let brow = |e: &Ellipse, dx: i64, lift: i64, ax: i64, ay: i64| Ellipse {
                cx: e.cx + dx,
                cy: e.cy - lift,
                ax: ax as f64,
                ay: ay as f64,
            };
            let l_brow = brow(&l_eye, ri(-1, 1), ri(17, 20), ri(12, 15), ri(4, 5));
            let r_brow = brow(&r_eye, ri(-1, 1), ri(17, 20), ri(12, 15), ri(4, 5));
            let nose = Ellipse {
                cx: cx + ri(-1, 1),
                cy: cy + ri(10, 14),
                ax: ri(5, 7) as f64,
                ay: ri(8, 11) as f64,
            };
            let mouth = Ellipse {
                cx: cx + ri(-1, 1),
                cy: nose.cy + ri(26, 30),
                ax: ri(18, 22) as f64,
                ay: ri(8, 11) as f64,
            };
            let mouth_inner = ri(1, 3).max(1);
            let hair = ri(6, 10) as f64;
            let mut colors = PALETTE;
            for c in colors.iter_mut().flatten() {
                *c = (i32::from(*c) + rng.random_range(-12..=12)).clamp(0, 255) as u8;
            }
            let spec = SynthSpec {
                seed,
                height,
                width,
                face,
                hair,
                parts: [l_brow, r_brow, l_eye, r_eye, nose, mouth],
                mouth_inner,
                colors,
            };
            match spec.validate() {
                Ok(()) => return Ok(spec),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// Parts must lie inside the face, keep a 2-pixel gap from each other,
    /// and the mouth must have room for three bands.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height as i64, self.width as i64);
        if self.mouth_inner < 1 || self.parts[Part::Mouth.index()].ay < (self.mouth_inner + 2) as f64 {
            return Err(Error::Synth("mouth too thin for three bands".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.ax < 1.0 || p.ay < 1.0 {
                return Err(Error::Synth(format!("{} has degenerate axes", Part::ALL[i].name())));
            }
            let (x0, x1) = (p.cx - p.ax as i64 - 1, p.cx + p.ax as i64 + 1);
            let (y0, y1) = (p.cy - p.ay as i64 - 1, p.cy + p.ay as i64 + 1);
            if x0 < 0 || y0 < 0 || x1 >= w || y1 >= h {
                return Err(Error::Synth(format!("{} leaves the canvas", Part::ALL[i].name())));
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if p.contains(x, y) && !self.face.contains(x, y) {
                        return Err(Error::Synth(format!("{} leaves the face", Part::ALL[i].name())));
                    }
                }
            }
        }
        for i in 0..NUM_PARTS {
            for j in i + 1..NUM_PARTS {
                let (a, b) = (self.parts[i].grown(1.0), self.parts[j].grown(1.0));
                let x0 = (a.cx - a.ax as i64).max(b.cx - b.ax as i64);
                let x1 = (a.cx + a.ax as i64).min(b.cx + b.ax as i64);
                let y0 = (a.cy - a.ay as i64).max(b.cy - b.ay as i64);
                let y1 = (a.cy + a.ay as i64).min(b.cy + b.ay as i64);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if a.contains(x, y) && b.contains(x, y) {
                            return Err(Error::Synth(format!(
                                "{} overlaps {}",
                                Part::ALL[i].name(),
                                Part::ALL[j].name()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Category index map of the rendered face.
    pub fn render_labels(&self) -> LabelMap {
        let (h, w) = (self.height, self.width);
        let hair = self.face.grown(self.hair);
        let mut data = vec![0u8; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut cat = 0u8;
                if self.face.contains(x, y) {
                    cat = 1;
                } else if hair.contains(x, y) && y < self.face.cy {
                    cat = 10;
                }
                for (i, p) in self.parts.iter().enumerate() {
                    if p.contains(x, y) {
                        cat = match Part::ALL[i] {
                            Part::Mouth => {
                                let dy = y - p.cy;
                                if dy < -self.mouth_inner {
                                    7
                                } else if dy > self.mouth_inner {
                                    9
                                } else {
                                    8
                                }
                            }
                            part => part.classes()[0] + 1,
                        };
                    }
                }
                data[y as usize * w + x as usize] = cat;
            }
        }
        LabelMap::new(h, w, data).expect("positive canvas")
    }
}

/// A rendered face with its exact crop targets in the padded frame.
#[derive(Clone, Debug)]
pub struct SynthFace {
    pub sample: Sample,
    pub truth: SynthTruth,
}

/// Exact per-part centres and crop parameters for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub id: String,
    pub window: (usize, usize),
    /// Side of the padded frame.
    pub padded: usize,
    /// Padded-frame `(x, y)` in [`Part::ALL`] order.
    pub centers: [(f64, f64); NUM_PARTS],
    pub theta: [ThetaRow; NUM_PARTS],
}

pub fn synth_face(id: impl Into<String>, spec: &SynthSpec, window: (usize, usize)) -> Result<SynthFace> {
    spec.validate()?;
    let id = id.into();
    let labels = spec.render_labels();
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, &cat) in labels.data().iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(spec.colors[cat as usize][c]) / 255.0;
        }
    }
    let sample = Sample::new(id.clone(), Tensor::from_vec(vec![3, h, w], data)?, labels)?;
    let pre = preprocess(&sample)?;
    let s = pre.padded_size();
    let (top, left) = pre.pad;
    let mut centers = [(0.0, 0.0); NUM_PARTS];
    let mut theta = [ThetaRow::IDENTITY; NUM_PARTS];
    for part in Part::ALL {
        let e = spec.parts[part.index()];
        let c = ((e.cx as usize + left) as f64, (e.cy as usize + top) as f64);
        let row = theta_ground_truth(&pre.part_mask(part), s, s, window, ThetaForm::CornerAligned, part.name())?;
        let got = row.center_px(s, s);
        if (got.0 - c.0).abs() > 0.5 || (got.1 - c.1).abs() > 0.5 {
            return Err(Error::Synth(format!("{} centroid {got:?} differs from centre {c:?}", part.name())));
        }
        centers[part.index()] = c;
        theta[part.index()] = row;
    }
    Ok(SynthFace {
        sample,
        truth: SynthTruth {
            id,
            window,
            padded: s,
            centers,
            theta,
        },
    })
}

/// One line per (sample, part): `id part cx cy sx tx sy ty wh ww padded`.
pub fn write_truth(root: &Path, truths: &[SynthTruth]) -> Result<()> {
    let mut text = String::new();
    for t in truths {
        for part in Part::ALL {
            let (cx, cy) = t.centers[part.index()];
            let r = t.theta[part.index()];
            text.push_str(&format!(
                "{} {} {cx} {cy} {} {} {} {} {} {} {}\n",
                t.id,
                part.name(),
                r.sx,
                r.tx,
                r.sy,
                r.ty,
                t.window.0,
                t.window.1,
                t.padded
            ));
        }
    }
    let path = root.join(TRUTH_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_truth(root: &Path) -> Result<BTreeMap<String, SynthTruth>> {
    let path = root.join(TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: BTreeMap<String, SynthTruth> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |detail: &str| Error::Data {
            id: format!("{TRUTH_FILE}:{}", n + 1),
            detail: detail.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 11 {
            return Err(bad("expected 11 fields"));
        }
        let part = Part::parse(f[1]).ok_or_else(|| bad("unknown part"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let (window, padded) = ((int(f[8])?, int(f[9])?), int(f[10])?);
        let entry = out.entry(f[0].to_string()).or_insert_with(|| SynthTruth {
            id: f[0].to_string(),
            window,
            padded,
            centers: [(0.0, 0.0); NUM_PARTS],
            theta: [ThetaRow::IDENTITY; NUM_PARTS],
        });
        entry.centers[part.index()] = (num(f[2])?, num(f[3])?);
        entry.theta[part.index()] = ThetaRow {
            sx: num(f[4])?,
            tx: num(f[5])?,
            sy: num(f[6])?,
            ty: num(f[7])?,
        };
    }
    Ok(out)
}
