use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// 2x2/s2 max pooling. With `ceil` an odd extent keeps a partial last
/// window; otherwise odd extents are rejected. Returns the output and the
/// flat input index each output element was taken from (first maximum in
/// row-major window order).
pub fn maxpool2d_forward<T: Element>(
    x: &Tensor<T>,
    ceil: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4("maxpool2d")?;
    if !ceil && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::shape(
            "maxpool2d",
            format!("odd extent {h}x{w} without ceil mode"),
        ));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let i = base + y * w + xx;
                            if xs[i] > xs[best] {
                                best = i;
                            }
                        }
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(vec![b, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// 3x3/s2 average pooling with zero padding 1; the divisor is always 9.
pub fn avgpool2d_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("avgpool2d")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let ninth = T::one() / T::from_f64(9.0);
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let p = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..3 {
                    let y = (2 * oy + ky) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = (2 * ox + kx) as isize - 1;
                        if xx >= 0 && xx < w as isize {
                            acc = acc + p[y as usize * w + xx as usize];
                        }
                    }
                }
                out.push(acc * ninth);
            }
        }
    }
    Tensor::from_vec(vec![b, c, oh, ow], out)
}

pub fn avgpool2d_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let planes = input_shape[0] * input_shape[1];
    let ninth = T::one() / T::from_f64(9.0);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    let go = grad_out.data();
    for plane in 0..planes {
        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[(plane * oh + oy) * ow + ox] * ninth;
                for ky in 0..3 {
                    let y = (2 * oy + ky) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = (2 * ox + kx) as isize - 1;
                        if xx >= 0 && xx < w as isize {
                            let i = y as usize * w + xx as usize;
                            dp[i] = dp[i] + g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by `factor`, keeping the top-left
/// `out_h x out_w` region of the replicated map.
pub fn upsample_nearest_forward<T: Element>(
    x: &Tensor<T>,
    factor: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("upsample_nearest")?;
    if factor < 1 {
        return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
    }
    if out_h == 0 || out_w == 0 || out_h > h * factor || out_w > w * factor {
        return Err(Error::shape(
            "upsample_nearest",
            format!("target {out_h}x{out_w} from {h}x{w} by {factor}"),
        ));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in 0..b * c {
        let p = &xs[plane * h * w..(plane + 1) * h * w];
        for y in 0..out_h {
            let row = &p[(y / factor) * w..(y / factor + 1) * w];
            out.extend((0..out_w).map(|x| row[x / factor]));
        }
    }
    Tensor::from_vec(vec![b, c, out_h, out_w], out)
}

pub fn upsample_nearest_backward<T: Element>(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    let go = grad_out.data();
    for plane in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let i = plane * h * w + (y / factor) * w + x / factor;
                d[i] = d[i] + go[(plane * oh + y) * ow + x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_ceil_keeps_partial_window() {
        let x = Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let (y, _) = maxpool2d_forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
        assert!(maxpool2d_forward(&x, false).is_err());
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f32; 4]).unwrap();
        let (_, arg) = maxpool2d_forward(&x, false).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn upsample_crop() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest_forward(&x, 2, 3, 3).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]);
        assert!(upsample_nearest_forward(&x, 0, 1, 1).is_err());
        assert!(upsample_nearest_forward(&x, 2, 5, 4).is_err());
    }
}
