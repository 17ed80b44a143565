use super::{LabelMap, Sample};
use crate::labels::{Part, NUM_CLASSES};
use crate::stn::RoughFrame;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Side of the coarse network input.
pub const COARSE_SIZE: usize = 128;

/// A sample prepared for both pipeline stages: the aspect-distorting resize
/// for the coarse network and the centred zero-pad for cropping.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub id: String,
    /// `[3, 128, 128]`.
    pub resized: Tensor<f32>,
    /// `[3, S, S]`, `S = max(H, W)`.
    pub padded: Tensor<f32>,
    /// Working classes at 128x128.
    pub resized_labels: LabelMap,
    /// Working classes at SxS.
    pub padded_labels: LabelMap,
    /// `(top, left)` offset of the original inside the padded frame.
    pub pad: (usize, usize),
    /// Original `(H, W)`.
    pub original: (usize, usize),
}

impl Preprocessed {
    pub fn padded_size(&self) -> usize {
        self.padded_labels.width()
    }

    /// Maps coarse 128x128 pixel centres into the padded frame.
    pub fn rough_frame(&self) -> RoughFrame {
        let (h, w) = self.original;
        RoughFrame {
            scale_x: w as f64 / COARSE_SIZE as f64,
            scale_y: h as f64 / COARSE_SIZE as f64,
            offset_x: self.pad.1 as f64,
            offset_y: self.pad.0 as f64,
        }
    }

    /// Coarse targets `[9, 128, 128]`.
    pub fn resized_one_hot(&self) -> Tensor<f32> {
        self.resized_labels.one_hot(NUM_CLASSES)
    }

    /// Padded targets `[9, S, S]`.
    pub fn padded_one_hot(&self) -> Tensor<f32> {
        self.padded_labels.one_hot(NUM_CLASSES)
    }

    pub fn part_mask(&self, part: Part) -> Vec<bool> {
        self.padded_labels.mask_of(part.classes())
    }
}

/// Bilinear resize of `[C, H, W]` with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("resize", format!("{s:?}"))),
    };
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let p = &src[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], out)
}

/// Nearest-neighbour resize of a label map (stays a valid index map).
pub fn resize_nearest(m: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let (h, w) = (m.height(), m.width());
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let data = (0..out_h)
        .flat_map(|y| {
            let sy = pick(y, h, out_h);
            (0..out_w).map(move |x| m.get(pick(x, w, out_w), sy))
        })
        .collect();
    LabelMap::new(out_h, out_w, data).expect("positive size")
}

pub fn preprocess(sample: &Sample) -> Result<Preprocessed> {
    let (h, w) = (sample.height(), sample.width());
    if h < 16 || w < 16 {
        return Err(Error::Data {
            id: sample.id.clone(),
            detail: format!("image {h}x{w} is smaller than 16x16"),
        });
    }
    let classes = sample.class_labels();
    let s = h.max(w);
    let (top, left) = ((s - h) / 2, (s - w) / 2);
    let mut padded = vec![0.0f32; 3 * s * s];
    let src = sample.image.data();
    for c in 0..3 {
        for y in 0..h {
            let d = (c * s + y + top) * s + left;
            padded[d..d + w].copy_from_slice(&src[(c * h + y) * w..(c * h + y + 1) * w]);
        }
    }
    let mut padded_labels = LabelMap::filled(s, s, 0);
    for y in 0..h {
        let d = (y + top) * s + left;
        padded_labels.data_mut()[d..d + w].copy_from_slice(&classes.data()[y * w..(y + 1) * w]);
    }
    Ok(Preprocessed {
        id: sample.id.clone(),
        resized: resize_bilinear(&sample.image, COARSE_SIZE, COARSE_SIZE)?,
        padded: Tensor::from_vec(vec![3, s, s], padded)?,
        resized_labels: resize_nearest(&classes, COARSE_SIZE, COARSE_SIZE),
        padded_labels,
        pad: (top, left),
        original: (h, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let img = Tensor::from_vec(vec![3, h, w], (0..3 * h * w).map(|i| (i % 251) as f32 / 251.0).collect()).unwrap();
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| (i % 11) as u8).collect()).unwrap();
        Sample::new("s", img, labels).unwrap()
    }

    #[test]
    fn pads_wide_image_vertically() {
        let p = preprocess(&sample(300, 400)).unwrap();
        assert_eq!(p.resized.shape(), &[3, 128, 128]);
        assert_eq!(p.padded.shape(), &[3, 400, 400]);
        assert_eq!(p.pad, (50, 0));
        assert!(p.padded.data()[..50 * 400].iter().all(|&v| v == 0.0));
        assert!(p.padded.data()[350 * 400..400 * 400].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_padding_puts_extra_pixel_bottom_right() {
        let p = preprocess(&sample(41, 40)).unwrap();
        assert_eq!(p.pad, (0, 0));
        let p = preprocess(&sample(40, 43)).unwrap();
        assert_eq!(p.pad, (1, 0));
    }

    #[test]
    fn square_input_is_not_padded() {
        let s = sample(64, 64);
        let p = preprocess(&s).unwrap();
        assert_eq!(p.padded.data(), s.image.data());
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(preprocess(&sample(15, 40)).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let s = sample(20, 30);
        assert_eq!(resize_bilinear(&s.image, 20, 30).unwrap(), s.image);
        let c = Tensor::full(vec![1, 7, 9], 0.25f32);
        assert!(resize_bilinear(&c, 13, 4).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
