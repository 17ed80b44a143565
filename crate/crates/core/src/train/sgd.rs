use std::collections::BTreeMap;

use crate::tensor::{Element, LrGroup, ParamStore, Tensor};
use crate::{Error, Result};

/// SGD with momentum: `v <- mu v + g`, `w <- w - lr(group) v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub lr_new: f64,
    pub lr_pretrained: f64,
    /// Velocity per `prefix + parameter name`.
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, lr_new: f64, lr_pretrained: f64) -> Self {
        Sgd {
            momentum,
            lr_new,
            lr_pretrained,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter of `store` from its gradient, then
    /// clears the gradients.
    pub fn step(&mut self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mu = T::from_f64(self.momentum);
        for p in store.iter_mut().filter(|p| p.requires_grad) {
            let g = p.grad.as_ref().ok_or_else(|| Error::MissingGradient(format!("{prefix}{}", p.name)))?;
            let lr = T::from_f64(match p.group {
                LrGroup::New => self.lr_new,
                LrGroup::Pretrained => self.lr_pretrained,
            });
            let v = self
                .velocity
                .entry(format!("{prefix}{}", p.name))
                .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + gi;
                *w = *w - lr * *vi;
            }
        }
        for p in store.iter_mut() {
            p.grad = None;
        }
        Ok(())
    }
}
