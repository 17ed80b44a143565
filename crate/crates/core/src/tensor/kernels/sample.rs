//! Corner-aligned bilinear sampling: normalized -1 is pixel index 0 and +1 is
//! the last index. Samples outside the image read zero.

use crate::par;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Normalized coordinate of pixel `i` along an axis of `n` pixels.
pub fn normalized_coord<T: Element>(i: usize, n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        T::from_f64(-1.0) + T::from_f64(2.0) * T::from_f64(i as f64) / T::from_f64((n - 1) as f64)
    }
}

/// Maps a normalized coordinate to a pixel position. Positions within a few
/// ulps of an integer are snapped onto it so that integer-aligned grids
/// reproduce pixels exactly despite rounding in the affine map.
#[inline]
fn to_pixel<T: Element>(g: T, n: usize, snap: T) -> T {
    let half = T::from_f64(0.5);
    let p = (g + T::one()) * half * T::from_f64(n.saturating_sub(1) as f64);
    let r = p.round();
    if (p - r).abs() <= snap {
        r
    } else {
        p
    }
}

fn snap_tolerance<T: Element>(h: usize, w: usize) -> T {
    T::epsilon() * T::from_f64(64.0 * h.max(w) as f64)
}

struct Corner {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn check<T: Element>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("grid_sample")?;
    let (gb, gh, gw, two) = grid.dims4("grid_sample")?;
    if two != 2 || gb != b {
        return Err(Error::shape(
            "grid_sample",
            format!("input {:?} grid {:?}", x.shape(), grid.shape()),
        ));
    }
    Ok((b, c, h, w, gh, gw))
}

#[inline]
fn at<T: Element>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

pub fn grid_sample_forward<T: Element>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w, gh, gw) = check(x, grid)?;
    let snap = snap_tolerance::<T>(h, w);
    let xs = x.data();
    let gs = grid.data();
    let mut out = vec![T::zero(); b * c * gh * gw];
    par::for_each_chunk_mut(&mut out, c * gh * gw, |bi, o| {
        for p in 0..gh * gw {
            let gi = (bi * gh * gw + p) * 2;
            let px = to_pixel(gs[gi], w, snap);
            let py = to_pixel(gs[gi + 1], h, snap);
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0.as_f64() as isize, y0.as_f64() as isize);
            for ci in 0..c {
                let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let v00 = at(plane, h, w, y0, x0);
                let v01 = at(plane, h, w, y0, x0 + 1);
                let v10 = at(plane, h, w, y0 + 1, x0);
                let v11 = at(plane, h, w, y0 + 1, x0 + 1);
                let top = v00 * (T::one() - fx) + v01 * fx;
                let bot = v10 * (T::one() - fx) + v11 * fx;
                o[ci * gh * gw + p] = top * (T::one() - fy) + bot * fy;
            }
        }
    });
    Tensor::from_vec(vec![b, c, gh, gw], out)
}

/// Returns `(d_input, d_grid)` for the requested outputs.
pub fn grid_sample_backward<T: Element>(
    x: &Tensor<T>,
    grid: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_grid: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (_, c, h, w, gh, gw) = check(x, grid)?;
    let snap = snap_tolerance::<T>(h, w);
    let xs = x.data();
    let gs = grid.data();
    let go = grad_out.data();
    let half = T::from_f64(0.5);
    let sx = T::from_f64(w.saturating_sub(1) as f64) * half;
    let sy = T::from_f64(h.saturating_sub(1) as f64) * half;

    let corner = |bi: usize, p: usize| {
        let gi = (bi * gh * gw + p) * 2;
        let px = to_pixel(gs[gi], w, snap);
        let py = to_pixel(gs[gi + 1], h, snap);
        let (x0, y0) = (px.floor(), py.floor());
        Corner {
            x0: x0.as_f64() as isize,
            y0: y0.as_f64() as isize,
            fx: (px - x0).as_f64(),
            fy: (py - y0).as_f64(),
        }
    };

    let d_input = need_input.then(|| {
        let mut dx = vec![T::zero(); xs.len()];
        par::for_each_chunk_mut(&mut dx, c * h * w, |bi, d| {
            for p in 0..gh * gw {
                let k = corner(bi, p);
                let (fx, fy) = (T::from_f64(k.fx), T::from_f64(k.fy));
                let weights = [
                    (0, 0, (T::one() - fx) * (T::one() - fy)),
                    (0, 1, fx * (T::one() - fy)),
                    (1, 0, (T::one() - fx) * fy),
                    (1, 1, fx * fy),
                ];
                for ci in 0..c {
                    let g = go[(bi * c + ci) * gh * gw + p];
                    for &(dy, dxx, wt) in &weights {
                        let (yy, xx) = (k.y0 + dy, k.x0 + dxx);
                        if xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize {
                            let i = ci * h * w + yy as usize * w + xx as usize;
                            d[i] = d[i] + g * wt;
                        }
                    }
                }
            }
        });
        Tensor::from_vec(x.shape().to_vec(), dx).expect("shape")
    });

    let d_grid = need_grid.then(|| {
        let mut dg = vec![T::zero(); gs.len()];
        par::for_each_chunk_mut(&mut dg, gh * gw * 2, |bi, d| {
            for p in 0..gh * gw {
                let k = corner(bi, p);
                let (fx, fy) = (T::from_f64(k.fx), T::from_f64(k.fy));
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for ci in 0..c {
                    let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let g = go[(bi * c + ci) * gh * gw + p];
                    let v00 = at(plane, h, w, k.y0, k.x0);
                    let v01 = at(plane, h, w, k.y0, k.x0 + 1);
                    let v10 = at(plane, h, w, k.y0 + 1, k.x0);
                    let v11 = at(plane, h, w, k.y0 + 1, k.x0 + 1);
                    gx = gx + g * ((v01 - v00) * (T::one() - fy) + (v11 - v10) * fy);
                    gy = gy + g * ((v10 - v00) * (T::one() - fx) + (v11 - v01) * fx);
                }
                d[p * 2] = gx * sx;
                d[p * 2 + 1] = gy * sy;
            }
        });
        Tensor::from_vec(grid.shape().to_vec(), dg).expect("shape")
    });

    Ok((d_input, d_grid))
}

/// Sampling grid `[B, out_h, out_w, 2]` for `theta: [B, 2, 3]`; each target
/// pixel's corner-aligned normalized `(x, y, 1)` is mapped through theta.
pub fn affine_grid_forward<T: Element>(
    theta: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let b = match theta.shape() {
        [b, 2, 3] => *b,
        s => return Err(Error::shape("affine_grid", format!("theta {s:?}"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("affine_grid", "empty output"));
    }
    let th = theta.data();
    let xt: Vec<T> = (0..out_w).map(|j| normalized_coord(j, out_w)).collect();
    let yt: Vec<T> = (0..out_h).map(|i| normalized_coord(i, out_h)).collect();
    let mut out = Vec::with_capacity(b * out_h * out_w * 2);
    for bi in 0..b {
        let t = &th[bi * 6..bi * 6 + 6];
        for &y in &yt {
            for &x in &xt {
                out.push(t[0] * x + t[1] * y + t[2]);
                out.push(t[3] * x + t[4] * y + t[5]);
            }
        }
    }
    Tensor::from_vec(vec![b, out_h, out_w, 2], out)
}

pub fn affine_grid_backward<T: Element>(grad_grid: &Tensor<T>) -> Tensor<T> {
    let s = grad_grid.shape();
    let (b, out_h, out_w) = (s[0], s[1], s[2]);
    let xt: Vec<T> = (0..out_w).map(|j| normalized_coord(j, out_w)).collect();
    let yt: Vec<T> = (0..out_h).map(|i| normalized_coord(i, out_h)).collect();
    let g = grad_grid.data();
    let mut d = vec![T::zero(); b * 6];
    for bi in 0..b {
        let dt = &mut d[bi * 6..bi * 6 + 6];
        for (i, &y) in yt.iter().enumerate() {
            for (j, &x) in xt.iter().enumerate() {
                let k = ((bi * out_h + i) * out_w + j) * 2;
                let (gx, gy) = (g[k], g[k + 1]);
                dt[0] = dt[0] + gx * x;
                dt[1] = dt[1] + gx * y;
                dt[2] = dt[2] + gx;
                dt[3] = dt[3] + gy * x;
                dt[4] = dt[4] + gy * y;
                dt[5] = dt[5] + gy;
            }
        }
    }
    Tensor::from_vec(vec![b, 2, 3], d).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapping_only_near_integers() {
        let snap = snap_tolerance::<f64>(100, 100);
        assert_eq!(to_pixel(1.0 - 1e-15, 101, snap), 100.0);
        let p = to_pixel(0.0101, 101, snap);
        assert!((p - 50.505).abs() < 1e-9);
    }

    #[test]
    fn grid_rank_checked() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 4, 4]);
        let g = Tensor::<f32>::zeros(vec![1, 2, 2, 3]);
        assert!(grid_sample_forward(&x, &g).is_err());
    }
}
