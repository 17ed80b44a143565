use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Values the training-mode backward pass needs.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn check<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("{c} channels, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    Ok((b, c, h * w))
}

pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (b, c, hw) = check(x, gamma, beta)?;
    let n = b * hw;
    if n < 2 {
        return Err(Error::shape(
            "batchnorm2d",
            "train mode needs at least 2 values per channel",
        ));
    }
    let nf = T::from_f64(n as f64);
    let xs = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s = s + xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum();
        }
        let m = s / nf;
        let mut v = T::zero();
        for bi in 0..b {
            for &val in &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                v = v + (val - m) * (val - m);
            }
        }
        mean[ci] = m;
        var[ci] = v / nf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let (g, be) = (gamma.data()[ci], beta.data()[ci]);
            for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                let xh = (xs[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), out)?,
        BnSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Element>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad_out.shape();
    let (b, c) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let nf = T::from_f64((b * hw) as f64);
    let go = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                dbeta[ci] = dbeta[ci] + go[i];
                dgamma[ci] = dgamma[ci] + go[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); go.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = gamma.data()[ci] * saved.inv_std[ci] / nf;
            for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                dx[i] = k * (nf * go[i] - dbeta[ci] - saved.xhat[i] * dgamma[ci]);
            }
        }
    }
    (
        Tensor::from_vec(shape.to_vec(), dx).expect("shape"),
        Tensor::from_vec(vec![c], dgamma).expect("shape"),
        Tensor::from_vec(vec![c], dbeta).expect("shape"),
    )
}

/// Eval-mode normalization with fixed statistics; returns the output and the
/// per-channel inverse standard deviations.
pub fn batchnorm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, hw) = check(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape("batchnorm2d", "running statistics length"));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = gamma.data()[ci] * inv_std[ci];
            let off = beta.data()[ci] - mean[ci] * k;
            for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                out[i] = xs[i] * k + off;
            }
        }
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, inv_std))
}
