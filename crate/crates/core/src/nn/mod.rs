//! Layer blocks shared by the interlinked CNN and the localization network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{BnUpdate, Element, Graph, Mode, ParamStore, Tensor, Var, BN_EPS};
use crate::{Error, Result};

/// State threaded through one forward pass: the graph, the model's bound
/// parameters, and the batchnorm statistics a train-mode pass observed.
pub struct Forward<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a [Var],
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Element> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a [Var], mode: Mode) -> Self {
        Forward {
            graph,
            params,
            mode,
            bn_updates: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub tracked: usize,
    name: String,
}

/// 3x3/s1/p1 convolution, optionally followed by batchnorm and ReLU. A bias
/// is only created without batchnorm, which would cancel it.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
}

/// Registers layers into a store under sequential names (`conv0`, `bn0`,
/// `conv1`, ..., `fc0`), drawing He-normal weights from a seeded stream.
pub struct LayerBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    convs: usize,
    denses: usize,
}

impl<'a, T: Element> LayerBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        LayerBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            convs: 0,
            denses: 0,
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect()
    }

    pub fn conv(&mut self, in_c: usize, out_c: usize, bn_relu: bool) -> Result<ConvBlock> {
        if in_c == 0 || out_c == 0 {
            return Err(Error::Config(format!("conv with {in_c} -> {out_c} channels")));
        }
        let i = self.convs;
        self.convs += 1;
        let fan_in = in_c * 9;
        let w = self.normal(out_c * fan_in, (2.0 / fan_in as f64).sqrt());
        let weight = self.store.add(format!("conv{i}.weight"), Tensor::from_vec(vec![out_c, in_c, 3, 3], w)?, true)?;
        let bias = if bn_relu {
            None
        } else {
            Some(self.store.add(format!("conv{i}.bias"), Tensor::zeros(vec![out_c]), true)?)
        };
        let bn = if bn_relu {
            let name = format!("bn{i}");
            Some(BatchNorm {
                gamma: self.store.add(format!("{name}.gamma"), Tensor::full(vec![out_c], T::one()), true)?,
                beta: self.store.add(format!("{name}.beta"), Tensor::zeros(vec![out_c]), true)?,
                running_mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(vec![out_c]), false)?,
                running_var: self.store.add(format!("{name}.running_var"), Tensor::full(vec![out_c], T::one()), false)?,
                tracked: self.store.add(format!("{name}.tracked"), Tensor::zeros(vec![1]), false)?,
                name,
            })
        } else {
            None
        };
        Ok(ConvBlock { weight, bias, bn })
    }

    /// Dense layer with weights scaled by `gain / sqrt(fan_in)`.
    pub fn dense(&mut self, in_f: usize, out_f: usize, gain: f64, bias: Vec<T>) -> Result<Dense> {
        if bias.len() != out_f {
            return Err(Error::Config("dense bias length".into()));
        }
        let i = self.denses;
        self.denses += 1;
        let w = self.normal(in_f * out_f, gain / (in_f as f64).sqrt());
        Ok(Dense {
            weight: self.store.add(format!("fc{i}.weight"), Tensor::from_vec(vec![out_f, in_f], w)?, true)?,
            bias: self.store.add(format!("fc{i}.bias"), Tensor::from_vec(vec![out_f], bias)?, true)?,
        })
    }
}

impl ConvBlock {
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let p = f.params;
        let y = f.graph.conv2d(x, p[self.weight], self.bias.map(|b| p[b]))?;
        let Some(bn) = &self.bn else { return Ok(y) };
        let y = match f.mode {
            Mode::Train => {
                let s = f.graph.shape(y);
                let n = s[0] * s[2] * s[3];
                let (v, mean, var) = f.graph.batchnorm_train(y, p[bn.gamma], p[bn.beta], BN_EPS)?;
                f.bn_updates.push(BnUpdate {
                    mean_index: bn.running_mean,
                    var_index: bn.running_var,
                    count_index: bn.tracked,
                    mean,
                    var,
                    n,
                });
                v
            }
            Mode::Eval => {
                if f.graph.value(p[bn.tracked]).data()[0] <= T::zero() {
                    return Err(Error::Uninitialized(bn.name.clone()));
                }
                let mean = f.graph.value(p[bn.running_mean]).data().to_vec();
                let var = f.graph.value(p[bn.running_var]).data().to_vec();
                f.graph.batchnorm_eval(y, p[bn.gamma], p[bn.beta], &mean, &var, BN_EPS)?
            }
        };
        Ok(f.graph.relu(y))
    }
}

impl Dense {
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        f.graph.linear(x, f.params[self.weight], f.params[self.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_before_statistics_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let block = LayerBuilder::new(&mut store, 1).conv(1, 2, true).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let mut f = Forward::new(&mut g, &p, Mode::Eval);
        assert!(matches!(block.forward(&mut f, x), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn names_are_sequential() {
        let mut store = ParamStore::<f32>::new();
        let mut b = LayerBuilder::new(&mut store, 1);
        b.conv(1, 2, true).unwrap();
        b.conv(2, 2, false).unwrap();
        b.dense(4, 2, 1.0, vec![0.0; 2]).unwrap();
        let names: Vec<_> = store.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "conv0.weight");
        assert!(names.contains(&"conv1.bias"));
        assert!(!names.contains(&"conv0.bias"));
        assert!(!names.contains(&"bn1.gamma"));
        assert_eq!(names.last(), Some(&"fc0.bias"));
    }
}
