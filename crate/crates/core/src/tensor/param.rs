use std::collections::HashMap;

use super::{Element, Gradients, Graph, Tensor, Var, BN_MOMENTUM};
use crate::{Error, Result};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    /// Trained from scratch in the current phase.
    New,
    /// Loaded from an earlier phase; trained with the lower rate.
    Pretrained,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// `false` for batchnorm running statistics and other buffers.
    pub requires_grad: bool,
    pub group: LrGroup,
}

/// Batch statistics observed by one batchnorm layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_index: usize,
    pub var_index: usize,
    pub count_index: usize,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// Values per channel the statistics were computed over.
    pub n: usize,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad,
            group: LrGroup::New,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.requires_grad).map(|p| p.value.len()).sum()
    }

    pub fn set_group(&mut self, group: LrGroup) {
        for p in &mut self.params {
            p.group = group;
        }
    }

    /// Places every parameter on `g` as a leaf. Trainable parameters get
    /// gradients only when `trainable` is set.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable && p.requires_grad))
            .collect()
    }

    /// Adds the gradients of the bound leaves into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &Gradients<T>) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if !p.requires_grad {
                continue;
            }
            if let Some(gv) = grads.get(v) {
                match &mut p.grad {
                    Some(existing) => existing.add_assign(gv)?,
                    slot => *slot = Some(gv.clone()),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Folds batch statistics into the running estimates (momentum 0.1,
    /// unbiased variance).
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64(BN_MOMENTUM);
        for u in updates {
            let unbias = T::from_f64(u.n as f64 / (u.n.max(2) - 1) as f64);
            {
                let rm = self.params[u.mean_index].value.data_mut();
                for (r, &b) in rm.iter_mut().zip(&u.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            {
                let rv = self.params[u.var_index].value.data_mut();
                for (r, &b) in rv.iter_mut().zip(&u.var) {
                    let b = b * unbias;
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            let c = &mut self.params[u.count_index].value.data_mut()[0];
            *c = *c + T::one();
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                    group: p.group,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
