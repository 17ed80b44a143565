use super::centroid;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Affine map from rough-label pixel centres to padded-image pixels:
/// `padded = (rough + 0.5) * scale - 0.5 + offset` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoughFrame {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl RoughFrame {
    pub const IDENTITY: RoughFrame = RoughFrame {
        scale_x: 1.0,
        scale_y: 1.0,
        offset_x: 0.0,
        offset_y: 0.0,
    };

    pub fn to_padded(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + 0.5) * self.scale_x - 0.5 + self.offset_x,
            (y + 0.5) * self.scale_y - 0.5 + self.offset_y,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineCrop<T> {
    Patch { center: (i64, i64), patch: Tensor<T> },
    /// The part has no pixels in the rough labels.
    Missing,
}

impl<T> BaselineCrop<T> {
    pub fn is_missing(&self) -> bool {
        matches!(self, BaselineCrop::Missing)
    }
}

/// Integer `(h, w)` window of `image: [C,H,W]` whose top-left corner is
/// `center - (size-1)/2` (odd sizes are centred; even ones lean one pixel
/// up-left of centre). Pixels outside the image are zero.
pub fn integer_window<T: Element>(image: &Tensor<T>, center: (i64, i64), (wh, ww): (usize, usize)) -> Result<Tensor<T>> {
    let s = image.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h as i64, *w as i64),
        _ => return Err(Error::shape("integer_window", format!("{s:?}"))),
    };
    let x0 = center.0 - (ww as i64 - 1) / 2 - i64::from(ww % 2 == 0);
    let y0 = center.1 - (wh as i64 - 1) / 2 - i64::from(wh % 2 == 0);
    let src = image.data();
    let mut out = vec![T::zero(); c * wh * ww];
    for ci in 0..c {
        for y in 0..wh as i64 {
            let sy = y0 + y;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..ww as i64 {
                let sx = x0 + x;
                if sx >= 0 && sx < w {
                    out[(ci * wh + y as usize) * ww + x as usize] = src[(ci * h as usize + sy as usize) * w as usize + sx as usize];
                }
            }
        }
    }
    Tensor::from_vec(vec![c, wh, ww], out)
}

/// Non-differentiable cropper: per part, the rounded centroid of the part's
/// classes in the `rough` index map (mapped into the padded frame) centres
/// an integer window cut from `image: [C,H,W]`.
pub fn baseline_crop<T: Element>(
    rough: &[u8],
    rough_width: usize,
    part_classes: &[&[u8]],
    frame: &RoughFrame,
    image: &Tensor<T>,
    window: (usize, usize),
) -> Result<Vec<BaselineCrop<T>>> {
    part_classes
        .iter()
        .map(|classes| {
            let mask: Vec<bool> = rough.iter().map(|c| classes.contains(c)).collect();
            match centroid(&mask, rough_width) {
                None => Ok(BaselineCrop::Missing),
                Some((x, y)) => {
                    let (px, py) = frame.to_padded(x, y);
                    let center = (px.round() as i64, py.round() as i64);
                    Ok(BaselineCrop::Patch {
                        center,
                        patch: integer_window(image, center, window)?,
                    })
                }
            }
        })
        .collect()
}
