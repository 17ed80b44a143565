use crate::labels::{NUM_CLASSES, NUM_PARTS};
use crate::nn::{ConvBlock, Dense, Forward, LayerBuilder};
use crate::tensor::{Element, ParamStore, Var};
use crate::{Error, Result};

/// Localization network: eight conv+bn+relu layers with a 3x3/s2 average
/// pool after every second one, then a linear layer to `parts * 4` raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct LocNetConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub widths: [usize; 8],
    pub parts: usize,
    /// Initial window scale the output bias encodes.
    pub init_scale: f64,
}

impl Default for LocNetConfig {
    fn default() -> Self {
        LocNetConfig {
            in_channels: NUM_CLASSES,
            input_size: 128,
            widths: [16, 16, 32, 32, 64, 64, 96, 96],
            parts: NUM_PARTS,
            init_scale: 0.5,
        }
    }
}

impl LocNetConfig {
    fn pooled_size(&self) -> usize {
        (0..4).fold(self.input_size, |s, _| s.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.in_channels == 0 || self.parts == 0 || self.input_size == 0 {
            return Err(Error::Config("locnet sizes must be positive".into()));
        }
        if self.init_scale <= 0.0 {
            return Err(Error::Config("locnet init_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LocNet<T> {
    pub config: LocNetConfig,
    pub store: ParamStore<T>,
    convs: Vec<ConvBlock>,
    fc: Dense,
}

impl<T: Element> LocNet<T> {
    pub fn new(config: LocNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut lb = LayerBuilder::new(&mut store, seed);
        let mut convs = Vec::with_capacity(8);
        let mut in_c = config.in_channels;
        for &w in &config.widths {
            convs.push(lb.conv(in_c, w, true)?);
            in_c = w;
        }
        let flat = in_c * config.pooled_size().pow(2);
        // softplus^-1 of the initial scale; translations start centred
        let raw_s = config.init_scale.exp_m1().ln();
        let bias = (0..config.parts)
            .flat_map(|_| [raw_s, 0.0, raw_s, 0.0])
            .map(T::from_f64)
            .collect();
        let fc = lb.dense(flat, config.parts * 4, 0.1, bias)?;
        Ok(LocNet {
            config,
            store,
            convs,
            fc,
        })
    }

    /// Raw `(s_x, t_x, s_y, t_y)` per part: `[B, N, 4]`.
    pub fn forward_raw(&self, f: &mut Forward<'_, T>, rough: Var) -> Result<Var> {
        let c = &self.config;
        let s = f.graph.shape(rough).to_vec();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::shape(
                "locnet_forward",
                format!("expected [B,{},{},{}], got {s:?}", c.in_channels, c.input_size, c.input_size),
            ));
        }
        let mut x = rough;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(f, x)?;
            if i % 2 == 1 {
                x = f.graph.avgpool2d(x)?;
            }
        }
        let n: usize = f.graph.shape(x)[1..].iter().product();
        let flat = f.graph.reshape(x, vec![s[0], n])?;
        let raw = self.fc.forward(f, flat)?;
        f.graph.reshape(raw, vec![s[0], c.parts, 4])
    }

    /// Constrained theta `[B, N, 2, 3]`.
    pub fn forward(&self, f: &mut Forward<'_, T>, rough: Var) -> Result<Var> {
        let raw = self.forward_raw(f, rough)?;
        f.graph.constrain_theta(raw)
    }
}
