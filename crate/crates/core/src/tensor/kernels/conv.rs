use crate::par;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

// 3x3 kernel, stride 1, zero padding 1.
const K: usize = 3;

fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[((ci * K + ky) * K + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[((ci * K + ky) * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("conv2d")?;
    let (f, wc, kh, kw) = weight.dims4("conv2d")?;
    if wc != c || kh != K || kw != K {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [f] {
            return Err(Error::shape("conv2d", format!("bias {:?}", bias.shape())));
        }
    }
    Ok((b, c, h, w, f))
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, c, h, w, f) = check(x, weight, bias)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("conv2d input"));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); b * f * hw];
    let xs = x.data();
    par::for_each_chunk_mut(&mut out, f * hw, |bi, o| {
        let mut col = vec![T::zero(); c * K * K * hw];
        im2col(&xs[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut col);
        if let Some(bias) = bias {
            for (fi, &bv) in bias.data().iter().enumerate() {
                o[fi * hw..(fi + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(f, c * K * K, hw, weight.data(), false, &col, false, beta, o);
    });
    Tensor::from_vec(vec![b, f, h, w], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a 3x3/s1/p1 convolution. Per-sample weight gradients are
/// reduced in batch order so the result does not depend on scheduling.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (b, c, h, w, f) = check(x, weight, None)?;
    let hw = h * w;
    let ck = c * K * K;
    let go = grad_out.data();
    let xs = x.data();

    let input = if need[0] {
        let mut dx = vec![T::zero(); b * c * hw];
        par::for_each_chunk_mut(&mut dx, c * hw, |bi, d| {
            let mut dcol = vec![T::zero(); ck * hw];
            T::gemm(
                ck,
                f,
                hw,
                weight.data(),
                true,
                &go[bi * f * hw..(bi + 1) * f * hw],
                false,
                T::zero(),
                &mut dcol,
            );
            col2im(&dcol, c, h, w, d);
        });
        Some(Tensor::from_vec(x.shape().to_vec(), dx)?)
    } else {
        None
    };

    let weight_grad = if need[1] {
        let partials = par::map_indexed(b, |bi| {
            let mut col = vec![T::zero(); ck * hw];
            im2col(&xs[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut col);
            let mut dw = vec![T::zero(); f * ck];
            T::gemm(
                f,
                hw,
                ck,
                &go[bi * f * hw..(bi + 1) * f * hw],
                false,
                &col,
                true,
                T::zero(),
                &mut dw,
            );
            dw
        });
        let mut dw = vec![T::zero(); f * ck];
        for p in partials {
            for (a, v) in dw.iter_mut().zip(p) {
                *a = *a + v;
            }
        }
        Some(Tensor::from_vec(weight.shape().to_vec(), dw)?)
    } else {
        None
    };

    let bias = if need[2] {
        let mut db = vec![T::zero(); f];
        for bi in 0..b {
            for (fi, d) in db.iter_mut().enumerate() {
                let s: T = go[(bi * f + fi) * hw..(bi * f + fi + 1) * hw]
                    .iter()
                    .copied()
                    .sum();
                *d = *d + s;
            }
        }
        Some(Tensor::from_vec(vec![f], db)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight: weight_grad,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, wd) = x.dims4("t").unwrap();
        let f = w.shape()[0];
        let mut out = Tensor::zeros(vec![b, f, h, wd]);
        for bi in 0..b {
            for fi in 0..f {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = bias.data()[fi];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * c + ci) * h + sy as usize) * wd + sx as usize]
                                        * w.data()[((fi * c + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * f + fi) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_vec(
            vec![2, 3, 5, 4],
            (0..120).map(|i| ((i * 37 % 17) as f64) * 0.1 - 0.8).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            vec![2, 3, 3, 3],
            (0..54).map(|i| ((i * 13 % 11) as f64) * 0.05 - 0.25).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.3, -0.1]).unwrap();
        let got = conv2d_forward(&x, &w, Some(&b)).unwrap();
        let want = naive(&x, &w, &b);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_wrong_kernel_and_nonfinite() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None).is_err());
        let mut bad = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        bad.data_mut()[3] = f32::NAN;
        assert!(matches!(
            conv2d_forward(&bad, &w, None),
            Err(Error::NonFinite(_))
        ));
    }
}
