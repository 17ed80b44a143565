//! Interlinked CNN: four fully convolutional branches at scales 1, 1/2, 1/4
//! and 1/8 that exchange features between neighbouring scales after every
//! round, then fuse at full resolution.

use crate::nn::{ConvBlock, Forward, LayerBuilder};
use crate::tensor::{Element, Graph, Mode, ParamStore, Var};
use crate::{Error, Result};

pub const BRANCHES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IcnnConfig {
    pub in_channels: usize,
    /// Label channels `L`.
    pub out_channels: usize,
    /// Channel width of each branch, full scale first.
    pub widths: [usize; BRANCHES],
    /// Number of interlink exchanges; each branch has `rounds + 1` conv layers.
    pub rounds: usize,
    pub input_size: usize,
    /// Ablation switch: without it the branches never exchange features.
    pub interlink: bool,
}

impl IcnnConfig {
    pub fn coarse() -> Self {
        IcnnConfig {
            in_channels: 3,
            out_channels: 9,
            widths: [24, 32, 40, 48],
            rounds: 3,
            input_size: 128,
            interlink: true,
        }
    }

    pub fn fine(out_channels: usize) -> Self {
        IcnnConfig {
            out_channels,
            input_size: 81,
            ..Self::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("icnn needs at least one interlink round".into()));
        }
        if self.out_channels < 2 {
            return Err(Error::Config("icnn needs at least two label channels".into()));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("icnn channel counts must be positive".into()));
        }
        if self.input_size < 8 {
            return Err(Error::Config(format!("icnn input size {} < 8", self.input_size)));
        }
        Ok(())
    }

    /// Spatial extent of each branch (ceil halving).
    pub fn branch_sizes(&self) -> [usize; BRANCHES] {
        let mut s = [self.input_size; BRANCHES];
        for b in 1..BRANCHES {
            s[b] = s[b - 1].div_ceil(2);
        }
        s
    }

    fn interlinked_width(&self, b: usize) -> usize {
        let mut w = self.widths[b];
        if self.interlink {
            if b + 1 < BRANCHES {
                w += self.widths[b + 1];
            }
            if b > 0 {
                w += self.widths[b - 1];
            }
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct IcnnModel<T> {
    pub config: IcnnConfig,
    pub store: ParamStore<T>,
    /// `branch[r][b]`: conv block of round `r` on branch `b`.
    branch: Vec<[ConvBlock; BRANCHES]>,
    fuse: ConvBlock,
    head: ConvBlock,
}

impl<T: Element> IcnnModel<T> {
    /// He-normal weights, zero biases, unit batchnorm scale; deterministic in `seed`.
    pub fn new(config: IcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut lb = LayerBuilder::new(&mut store, seed);
        let mut branch = Vec::with_capacity(config.rounds + 1);
        for r in 0..=config.rounds {
            let mut row = Vec::with_capacity(BRANCHES);
            for b in 0..BRANCHES {
                let in_c = if r == 0 {
                    config.in_channels
                } else {
                    config.interlinked_width(b)
                };
                row.push(lb.conv(in_c, config.widths[b], true)?);
            }
            branch.push(row.try_into().expect("four branches"));
        }
        let fused: usize = config.widths.iter().sum();
        let fuse = lb.conv(fused, config.widths[0], true)?;
        let head = lb.conv(config.widths[0], config.out_channels, false)?;
        Ok(IcnnModel {
            config,
            store,
            branch,
            fuse,
            head,
        })
    }

    /// Raw per-pixel label scores `[B, L, S, S]` for `image: [B, C, S, S]`.
    pub fn forward(&self, f: &mut Forward<'_, T>, image: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = f.graph.shape(image).to_vec();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(Error::shape(
                "icnn_forward",
                format!("expected [B,{},{},{}], got {s:?}", cfg.in_channels, cfg.input_size, cfg.input_size),
            ));
        }
        let sizes = cfg.branch_sizes();
        let mut cur = [image; BRANCHES];
        for b in 1..BRANCHES {
            cur[b] = f.graph.maxpool2d(cur[b - 1], true)?;
        }
        for r in 0..=cfg.rounds {
            let mut feats = [image; BRANCHES];
            for b in 0..BRANCHES {
                feats[b] = self.branch[r][b].forward(f, cur[b])?;
            }
            if r == cfg.rounds || !cfg.interlink {
                cur = feats;
                continue;
            }
            for b in 0..BRANCHES {
                let mut parts = vec![feats[b]];
                if b + 1 < BRANCHES {
                    parts.push(f.graph.upsample_nearest_to(feats[b + 1], 2, sizes[b], sizes[b])?);
                }
                if b > 0 {
                    parts.push(f.graph.maxpool2d(feats[b - 1], true)?);
                }
                cur[b] = f.graph.concat(&parts, 1)?;
            }
        }
        let mut parts = vec![cur[0]];
        for (b, &v) in cur.iter().enumerate().skip(1) {
            parts.push(f.graph.upsample_nearest_to(v, 1 << b, sizes[0], sizes[0])?);
        }
        let fused = f.graph.concat(&parts, 1)?;
        let h = self.fuse.forward(f, fused)?;
        self.head.forward(f, h)
    }

    /// Convenience: eval-mode scores on a fresh graph.
    pub fn predict(&self, image: crate::tensor::Tensor<T>) -> Result<crate::tensor::Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(image);
        let mut f = Forward::new(&mut g, &p, Mode::Eval);
        let y = self.forward(&mut f, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small(size: usize) -> IcnnConfig {
        IcnnConfig {
            in_channels: 3,
            out_channels: 2,
            widths: [2, 3, 4, 5],
            rounds: 1,
            input_size: size,
            interlink: true,
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        // round 0: 3->2, 3->3, 3->4, 3->5, weights plus bn affine: 58+87+116+145
        // round 1 (interlinked inputs 5, 9, 12, 9): 94+249+440+415
        // fuse 14->2: 256, head 2->2 with bias, no bn: 38
        let m = IcnnModel::<f32>::new(small(16), 0).unwrap();
        assert_eq!(m.store.trainable_count(), 1898);
    }

    #[test]
    fn deterministic_init() {
        let a = IcnnModel::<f32>::new(small(16), 7).unwrap();
        let b = IcnnModel::<f32>::new(small(16), 7).unwrap();
        let c = IcnnModel::<f32>::new(small(16), 8).unwrap();
        for ((p, q), r) in a.store.iter().zip(b.store.iter()).zip(c.store.iter()) {
            assert_eq!(p.value, q.value);
            if p.name == "conv0.weight" {
                assert_ne!(p.value, r.value);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(16);
        c.rounds = 0;
        assert!(IcnnModel::<f32>::new(c, 0).is_err());
        let mut c = small(16);
        c.out_channels = 1;
        assert!(IcnnModel::<f32>::new(c, 0).is_err());
    }

    #[test]
    fn odd_sizes_keep_extent() {
        let m = IcnnModel::<f32>::new(small(21), 0).unwrap();
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, false);
        let x = g.constant(Tensor::full(vec![2, 3, 21, 21], 0.5));
        let mut f = Forward::new(&mut g, &p, Mode::Train);
        let y = m.forward(&mut f, x).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 21, 21]);
    }
}
