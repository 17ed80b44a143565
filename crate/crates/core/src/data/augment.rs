use rand::seq::index::sample as choose;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::Result;

/// Standard deviation of the additive noise, in units of the `[0, 1]` range.
pub const NOISE_SIGMA: f64 = 0.02;

/// One applied augmentation with its drawn parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    /// Degrees, counter-clockwise, about the image centre.
    Rotate(f64),
    /// Pixels.
    Shift { dx: f64, dy: f64 },
    /// Zoom factor about the image centre.
    Scale(f64),
    /// Gaussian noise on the image only.
    Noise { sigma: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub sample: Sample,
    /// Ops in application order; output `i` carries `i` of them.
    pub ops: Vec<AugOp>,
}

/// Expands one sample into five: output `i` applies `i` distinct operations
/// drawn without replacement from rotation, shift, scale and noise.
pub fn augment(sample: &Sample, seed: u64) -> Result<Vec<Augmented>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sample.height() as f64, sample.width() as f64);
    (0..5)
        .map(|i| {
            let mut kinds = choose(&mut rng, 4, i).into_vec();
            kinds.sort_unstable();
            let ops: Vec<AugOp> = kinds
                .into_iter()
                .map(|k| match k {
                    0 => AugOp::Rotate(rng.random_range(-15.0..=15.0)),
                    1 => AugOp::Shift {
                        dx: rng.random_range(-0.2..=0.2) * w,
                        dy: rng.random_range(-0.2..=0.2) * h,
                    },
                    2 => AugOp::Scale(rng.random_range(0.2..=1.2)),
                    _ => AugOp::Noise {
                        sigma: NOISE_SIGMA,
                        seed: rng.random(),
                    },
                })
                .collect();
            Ok(Augmented {
                sample: apply(sample, &ops, i)?,
                ops,
            })
        })
        .collect()
}

fn apply(sample: &Sample, ops: &[AugOp], index: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // output -> source: undo shift, then scale, then rotation
    let (mut angle, mut zoom, mut shift) = (0.0f64, 1.0f64, (0.0, 0.0));
    let mut noise = None;
    for op in ops {
        match *op {
            AugOp::Rotate(deg) => angle = deg.to_radians(),
            AugOp::Shift { dx, dy } => shift = (dx, dy),
            AugOp::Scale(s) => zoom = s,
            AugOp::Noise { sigma, seed } => noise = Some((sigma, seed)),
        }
    }
    let geometric = angle != 0.0 || zoom != 1.0 || shift != (0.0, 0.0);
    let (sin, cos) = angle.sin_cos();
    let source = |x: usize, y: usize| {
        let u = (x as f64 - cx - shift.0) / zoom;
        let v = (y as f64 - cy - shift.1) / zoom;
        (cos * u + sin * v + cx, -sin * u + cos * v + cy)
    };

    let mut image = sample.image.clone();
    // warped labels stay one index per pixel, hence one-hot
    let mut labels = sample.labels.clone();
    if geometric {
        let src = sample.image.data();
        let plane = h * w;
        let out = image.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = source(x, y);
                for c in 0..3 {
                    out[c * plane + y * w + x] = bilinear(&src[c * plane..(c + 1) * plane], h, w, sx, sy);
                }
                let (nx, ny) = (sx.round(), sy.round());
                labels.data_mut()[y * w + x] = if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    sample.labels.get(nx as usize, ny as usize)
                } else {
                    0
                };
            }
        }
    }
    if let Some((sigma, seed)) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).expect("positive sigma");
        for v in image.data_mut() {
            *v = (*v + d.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    let mut out = Sample::new(format!("{}_aug{index}", sample.id), image, labels)?;
    out.split = sample.split;
    Ok(out)
}

fn bilinear(p: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            p[yi as usize * w + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bot = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}
