use super::ThetaRow;
use crate::tensor::kernels::{affine_grid_forward, grid_sample_forward};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

/// Sampling grid `[1, h, w, 2]` of one theta row.
pub fn affine_grid<T: Element>(row: ThetaRow, (h, w): (usize, usize)) -> Result<Tensor<T>> {
    let theta = Tensor::from_vec(vec![1, 2, 3], row.to_array().map(T::from_f64).to_vec())?;
    affine_grid_forward(&theta, h, w)
}

/// Differentiable crop of every part: `image: [B,C,H,W]`, `theta: [B,N,2,3]`
/// → `[B,N,C,h,w]`.
pub fn crop_parts<T: Element>(g: &mut Graph<T>, image: Var, theta: Var, (h, w): (usize, usize)) -> Result<Var> {
    let is = g.shape(image).to_vec();
    let ts = g.shape(theta).to_vec();
    let (b, n) = match (&is[..], &ts[..]) {
        ([b, _, _, _], [tb, n, 2, 3]) if b == tb => (*b, *n),
        _ => return Err(Error::shape("crop_parts", format!("image {is:?} theta {ts:?}"))),
    };
    let c = is[1];
    let mut crops = Vec::with_capacity(n);
    for p in 0..n {
        let row = g.narrow(theta, 1, p, 1)?;
        let row = g.reshape(row, vec![b, 2, 3])?;
        let grid = g.affine_grid(row, h, w)?;
        let patch = g.grid_sample(image, grid)?;
        crops.push(g.reshape(patch, vec![b, 1, c, h, w])?);
    }
    g.concat(&crops, 1)
}

/// Crops `image: [C,H,W]` once per row, outside any graph.
pub fn crop_with_rows<T: Element>(image: &Tensor<T>, rows: &[ThetaRow], window: (usize, usize)) -> Result<Vec<Tensor<T>>> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("crop_with_rows", format!("{s:?}")));
    }
    let batched = image.clone().reshape(vec![1, s[0], s[1], s[2]])?;
    rows.iter()
        .map(|&r| {
            let grid = affine_grid(r, window)?;
            grid_sample_forward(&batched, &grid)?.reshape(vec![s[0], window.0, window.1])
        })
        .collect()
}

/// Places each `[C,h,w]` patch back onto a `canvas` through the inverse of
/// its row; canvas pixels outside the window read zero.
pub fn remap_parts<T: Element>(patches: &[Tensor<T>], rows: &[ThetaRow], canvas: (usize, usize)) -> Result<Vec<Tensor<T>>> {
    if patches.len() != rows.len() {
        return Err(Error::shape("remap_parts", "one row per patch"));
    }
    patches
        .iter()
        .zip(rows)
        .enumerate()
        .map(|(i, (patch, row))| {
            let s = patch.shape().to_vec();
            if s.len() != 3 {
                return Err(Error::shape("remap_parts", format!("{s:?}")));
            }
            let inv = row.inverse().map_err(|_| Error::SingularTheta(i))?;
            let grid = affine_grid(inv, canvas)?;
            let src = patch.clone().reshape(vec![1, s[0], s[1], s[2]])?;
            grid_sample_forward(&src, &grid)?.reshape(vec![s[0], canvas.0, canvas.1])
        })
        .collect()
}
