use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// One part's constrained affine parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaRow {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

/// Which closed form [`theta_ground_truth`] emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ThetaForm {
    /// `s = (w-1)/(W-1)`, `t = 2x/(W-1) - 1`: an odd window around an
    /// integer centroid samples exactly on pixel centres.
    #[default]
    CornerAligned,
    /// `s = w/W`, `t = 2x/W - 1`; off by O(1/W) from the corner-aligned form.
    Literal,
}

impl ThetaRow {
    pub const IDENTITY: ThetaRow = ThetaRow {
        sx: 1.0,
        tx: 0.0,
        sy: 1.0,
        ty: 0.0,
    };

    /// Row-major `[s_x, 0, t_x, 0, s_y, t_y]`.
    pub fn to_array(self) -> [f64; 6] {
        [self.sx, 0.0, self.tx, 0.0, self.sy, self.ty]
    }

    /// Reads a row from 6 values; the off-diagonal entries must be zero.
    pub fn from_slice<T: Element>(v: &[T]) -> Result<Self> {
        if v.len() != 6 || v[1] != T::zero() || v[3] != T::zero() {
            return Err(Error::shape("theta", "expected [[s_x,0,t_x],[0,s_y,t_y]]"));
        }
        Ok(ThetaRow {
            sx: v[0].as_f64(),
            tx: v[2].as_f64(),
            sy: v[4].as_f64(),
            ty: v[5].as_f64(),
        })
    }

    /// Rows of a `[B, N, 2, 3]` tensor, grouped per batch item.
    pub fn batch_from_tensor<T: Element>(t: &Tensor<T>) -> Result<Vec<Vec<ThetaRow>>> {
        match t.shape() {
            [b, n, 2, 3] => (0..*b)
                .map(|bi| {
                    (0..*n)
                        .map(|pi| ThetaRow::from_slice(&t.data()[(bi * n + pi) * 6..(bi * n + pi + 1) * 6]))
                        .collect()
                })
                .collect(),
            s => Err(Error::shape("theta", format!("expected [B,N,2,3], got {s:?}"))),
        }
    }

    pub fn to_tensor<T: Element>(rows: &[Vec<ThetaRow>]) -> Result<Tensor<T>> {
        let b = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let data = rows
            .iter()
            .flat_map(|r| r.iter().flat_map(|row| row.to_array()))
            .map(T::from_f64)
            .collect();
        Tensor::from_vec(vec![b, n, 2, 3], data)
    }

    /// Inverse map: `s' = 1/s`, `t' = -t/s` per axis.
    pub fn inverse(self) -> Result<ThetaRow> {
        if self.sx == 0.0 || self.sy == 0.0 {
            return Err(Error::SingularTheta(0));
        }
        Ok(ThetaRow {
            sx: 1.0 / self.sx,
            tx: -self.tx / self.sx,
            sy: 1.0 / self.sy,
            ty: -self.ty / self.sy,
        })
    }

    /// Window centre in pixel coordinates of a `height x width` source.
    pub fn center_px(self, height: usize, width: usize) -> (f64, f64) {
        (
            (self.tx + 1.0) * 0.5 * (width as f64 - 1.0),
            (self.ty + 1.0) * 0.5 * (height as f64 - 1.0),
        )
    }
}

/// Mean `(x, y)` of the set pixels of a row-major `height x width` mask.
pub fn centroid(mask: &[bool], width: usize) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % width) as f64;
        sy += (i / width) as f64;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Crop parameters that centre a `window = (h, w)` box on the rounded
/// centroid of `mask` (`height x width`, the padded frame).
pub fn theta_ground_truth(
    mask: &[bool],
    height: usize,
    width: usize,
    window: (usize, usize),
    form: ThetaForm,
    part: &str,
) -> Result<ThetaRow> {
    if mask.len() != height * width {
        return Err(Error::shape("theta_ground_truth", "mask size"));
    }
    let (cx, cy) = centroid(mask, width).ok_or_else(|| Error::EmptyMask(part.to_string()))?;
    Ok(theta_for_center(cx.round(), cy.round(), height, width, window, form))
}

/// Crop parameters for a window centred on pixel `(cx, cy)`.
pub fn theta_for_center(
    cx: f64,
    cy: f64,
    height: usize,
    width: usize,
    (wh, ww): (usize, usize),
    form: ThetaForm,
) -> ThetaRow {
    let (h, w) = (height as f64, width as f64);
    match form {
        ThetaForm::CornerAligned => ThetaRow {
            sx: (ww as f64 - 1.0) / (w - 1.0),
            tx: 2.0 * cx / (w - 1.0) - 1.0,
            sy: (wh as f64 - 1.0) / (h - 1.0),
            ty: 2.0 * cy / (h - 1.0) - 1.0,
        },
        ThetaForm::Literal => ThetaRow {
            sx: ww as f64 / w,
            tx: -1.0 + 2.0 * cx / w,
            sy: wh as f64 / h,
            ty: -1.0 + 2.0 * cy / h,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mask(h: usize, w: usize, x: usize, y: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        m[y * w + x] = true;
        m
    }

    #[test]
    fn literal_form_values() {
        let m = point_mask(512, 512, 256, 256);
        let t = theta_ground_truth(&m, 512, 512, (81, 81), ThetaForm::Literal, "p").unwrap();
        assert!((t.sx - 0.158203125).abs() < 1e-12);
        assert_eq!(t.tx, 0.0);
        assert_eq!(t.ty, 0.0);
    }

    #[test]
    fn corner_aligned_values() {
        let m = point_mask(512, 512, 256, 256);
        let t = theta_ground_truth(&m, 512, 512, (81, 81), ThetaForm::CornerAligned, "p").unwrap();
        assert!((t.sx - 0.156556).abs() < 1e-6);
        assert!((t.tx - 0.001957).abs() < 1e-6);
    }

    #[test]
    fn top_left_anchor() {
        let m = point_mask(100, 120, 0, 0);
        let t = theta_ground_truth(&m, 100, 120, (9, 9), ThetaForm::CornerAligned, "p").unwrap();
        assert_eq!((t.tx, t.ty), (-1.0, -1.0));
    }

    #[test]
    fn empty_mask_errors() {
        let m = vec![false; 16];
        assert!(matches!(
            theta_ground_truth(&m, 4, 4, (3, 3), ThetaForm::CornerAligned, "nose"),
            Err(Error::EmptyMask(p)) if p == "nose"
        ));
    }

    #[test]
    fn inverse_algebra() {
        let t = ThetaRow { sx: 0.5, tx: 0.25, sy: 0.5, ty: 0.25 };
        let i = t.inverse().unwrap();
        assert_eq!((i.sx, i.tx), (2.0, -0.5));
        assert_eq!(ThetaRow::IDENTITY.inverse().unwrap(), ThetaRow::IDENTITY);
        let z = ThetaRow { sx: 0.0, ..t };
        assert!(z.inverse().is_err());
    }
}
