//! Three-phase schedule: coarse pre-training, localization pre-training on
//! frozen coarse outputs, then joint training through the cropper.

mod checkpoint;
mod sgd;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use sgd::Sgd;

use crate::data::{augment, derive_seed, preprocess, Preprocessed, Sample};
use crate::icnn::IcnnConfig;
use crate::labels::{Part, PartKind, NUM_PARTS};
use crate::metrics::{coarse_loss, system_loss, F1Counts};
use crate::par;
use crate::pipeline::{
    coarse_counts_from, final_counts, fine_targets, occlude, Bound, BnStats, ModelSet, PipelineConfig, PredictOptions,
    RoughEncoding, Trainable,
};
use crate::stn::{theta_ground_truth, LocNetConfig, ThetaForm, ThetaRow};
use crate::tensor::{Element, Graph, LrGroup, Mode, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Coarse,
    Locnet,
    EndToEnd,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Coarse => "coarse",
            Phase::Locnet => "locnet",
            Phase::EndToEnd => "e2e",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "coarse" => Some(Phase::Coarse),
            "locnet" | "loc" => Some(Phase::Locnet),
            "e2e" => Some(Phase::EndToEnd),
            _ => None,
        }
    }

    fn code(self) -> f32 {
        match self {
            Phase::Coarse => 0.0,
            Phase::Locnet => 1.0,
            Phase::EndToEnd => 2.0,
        }
    }

    fn from_code(c: f32) -> Result<Phase> {
        match c as u32 {
            0 => Ok(Phase::Coarse),
            1 => Ok(Phase::Locnet),
            2 => Ok(Phase::EndToEnd),
            _ => Err(Error::CorruptCheckpoint(format!("unknown phase code {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_new: f64,
    pub lr_pretrained: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Expand every training image into its five augmented variants.
    pub augment: bool,
    /// Chance, per sample and step, of zeroing one random part's channels in
    /// the rough input while pre-training the localization network.
    pub loc_occlusion_prob: f64,
    /// Joint phase only: train the fine networks on fixed windows.
    pub freeze_stn: bool,
    /// Held-out F1 every this many epochs (0: never).
    pub eval_every: usize,
    /// Window the fine targets are cropped from in the joint phase.
    pub targets: TargetWindow,
}

/// Where the joint phase crops each part's label target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetWindow {
    /// The window currently predicted by the localization network, so the
    /// target stays aligned with the image crop.
    Predicted,
    /// The exact window around the labelled part.
    Truth,
}

impl TargetWindow {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "truth" => Some(TargetWindow::Truth),
            "predicted" => Some(TargetWindow::Predicted),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetWindow::Truth => "truth",
            TargetWindow::Predicted => "predicted",
        }
    }
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        let (epochs, lr_new, lr_pretrained) = match phase {
            Phase::Coarse => (20, 0.2, 0.2),
            Phase::Locnet => (30, 0.01, 0.01),
            Phase::EndToEnd => (20, 0.2, 1e-5),
        };
        TrainConfig {
            phase,
            epochs,
            batch_size: 8,
            lr_new,
            lr_pretrained,
            momentum: 0.9,
            seed: 0,
            augment: false,
            loc_occlusion_prob: 0.25,
            freeze_stn: false,
            eval_every: 0,
            targets: TargetWindow::Predicted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_new > 0.0 && self.lr_pretrained > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_pretrained > self.lr_new {
            return Err(Error::Config(format!(
                "pretrained learning rate {} exceeds new learning rate {}",
                self.lr_pretrained, self.lr_new
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.loc_occlusion_prob) {
            return Err(Error::Config("occlusion probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// One epoch's log record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean batch loss.
    pub loss: f64,
    pub f1: Option<f64>,
    /// Held-out mean window-centre error in padded pixels (locnet phase).
    pub center_error: Option<f64>,
    /// Mean gradient norm per model group (coarse, loc, fine) in this epoch.
    pub grad_norms: [f64; 3],
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} phase {} loss {:.8}", self.epoch, self.phase.name(), self.loss)?;
        if let Some(v) = self.f1 {
            write!(f, " f1 {v:.6}")?;
        }
        if let Some(v) = self.center_error {
            write!(f, " center_error {v:.4}")?;
        }
        Ok(())
    }
}

/// Models, optimizer state and schedule position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub models: ModelSet<f32>,
    pub opt: Sgd<f32>,
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
    /// Which of coarse, loc and fine have been trained.
    pub trained: [bool; 3],
    pub seed: u64,
}

fn prefix_fine(kind: PartKind) -> String {
    format!("fine.{}/", kind.name())
}

fn icnn_to_values(c: &IcnnConfig) -> Vec<f32> {
    let mut v = vec![c.in_channels as f32, c.out_channels as f32];
    v.extend(c.widths.iter().map(|&w| w as f32));
    v.extend([c.rounds as f32, c.input_size as f32, if c.interlink { 1.0 } else { 0.0 }]);
    v
}

fn icnn_from_values(t: &Tensor<f32>) -> Result<IcnnConfig> {
    let v = t.data();
    if v.len() != 9 {
        return Err(Error::CorruptCheckpoint("icnn config length".into()));
    }
    Ok(IcnnConfig {
        in_channels: v[0] as usize,
        out_channels: v[1] as usize,
        widths: [v[2] as usize, v[3] as usize, v[4] as usize, v[5] as usize],
        rounds: v[6] as usize,
        input_size: v[7] as usize,
        interlink: v[8] != 0.0,
    })
}

impl TrainState {
    pub fn new(config: PipelineConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let models = ModelSet::new(config, train.seed)?;
        let mut s = TrainState {
            models,
            opt: Sgd::new(train.momentum, train.lr_new, train.lr_pretrained),
            phase: train.phase,
            epoch: 0,
            trained: [false; 3],
            seed: train.seed,
        };
        s.begin(train)?;
        Ok(s)
    }

    /// Moves to `train.phase`. Continuing the same phase keeps the epoch
    /// counter and velocities; a new phase resets both and checks that its
    /// prerequisites were trained.
    pub fn begin(&mut self, train: &TrainConfig) -> Result<()> {
        train.validate()?;
        let same = train.phase == self.phase && self.epoch > 0;
        match train.phase {
            Phase::Coarse => {}
            Phase::Locnet if !self.trained[0] => return Err(Error::Config("coarse checkpoint required".into())),
            Phase::EndToEnd if !(self.trained[0] && self.trained[1]) => {
                return Err(Error::Config("coarse and locnet checkpoints required".into()))
            }
            _ => {}
        }
        if !same {
            self.phase = train.phase;
            self.epoch = 0;
            self.opt.velocity.clear();
        }
        self.seed = train.seed;
        self.opt.momentum = train.momentum;
        self.opt.lr_new = train.lr_new;
        self.opt.lr_pretrained = train.lr_pretrained;
        let pre = if train.phase == Phase::EndToEnd {
            LrGroup::Pretrained
        } else {
            LrGroup::New
        };
        self.models.coarse.store.set_group(pre);
        self.models.loc.store.set_group(pre);
        for f in &mut self.models.fine {
            f.store.set_group(LrGroup::New);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let m = &self.models;
        let cfg = &m.config;
        let mut c = Checkpoint::new();
        c.insert_values("config/coarse", &icnn_to_values(&cfg.coarse));
        let l = &cfg.loc;
        let mut lv = vec![l.in_channels as f32, l.input_size as f32];
        lv.extend(l.widths.iter().map(|&w| w as f32));
        lv.extend([l.parts as f32, l.init_scale as f32]);
        c.insert_values("config/loc", &lv);
        for kind in PartKind::ALL {
            c.insert_values(format!("config/fine.{}", kind.name()), &icnn_to_values(&cfg.fine[kind.index()]));
        }
        c.insert_values("config/window", &[cfg.window.0 as f32, cfg.window.1 as f32]);
        c.insert_values("config/encoding", &[if cfg.encoding == RoughEncoding::Softmax { 1.0 } else { 0.0 }]);
        c.insert_values("meta/phase", &[self.phase.code()]);
        c.insert_values("meta/epoch", &[self.epoch as f32]);
        c.insert_u64("meta/seed", self.seed);
        c.insert_values("meta/trained", &self.trained.map(|t| if t { 1.0 } else { 0.0 }));
        c.insert_store("coarse/", &m.coarse.store);
        c.insert_store("loc/", &m.loc.store);
        for kind in PartKind::ALL {
            c.insert_store(&prefix_fine(kind), &m.fine[kind.index()].store);
        }
        for (name, v) in &self.opt.velocity {
            c.insert(format!("velocity/{name}"), v.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let lv = c.require("config/loc")?.data().to_vec();
        if lv.len() != 12 {
            return Err(Error::CorruptCheckpoint("locnet config length".into()));
        }
        let loc = LocNetConfig {
            in_channels: lv[0] as usize,
            input_size: lv[1] as usize,
            widths: std::array::from_fn(|i| lv[2 + i] as usize),
            parts: lv[10] as usize,
            init_scale: f64::from(lv[11]),
        };
        let fine = PartKind::ALL
            .iter()
            .map(|k| icnn_from_values(c.require(&format!("config/fine.{}", k.name()))?))
            .collect::<Result<Vec<_>>>()?;
        let w = c.require("config/window")?.data();
        if w.len() != 2 {
            return Err(Error::CorruptCheckpoint("window length".into()));
        }
        let config = PipelineConfig {
            coarse: icnn_from_values(c.require("config/coarse")?)?,
            loc,
            fine: fine.try_into().expect("four kinds"),
            window: (w[0] as usize, w[1] as usize),
            encoding: if c.require("config/encoding")?.data()[0] != 0.0 {
                RoughEncoding::Softmax
            } else {
                RoughEncoding::Scores
            },
        };
        let seed = c.get_u64("meta/seed")?;
        let mut models = ModelSet::new(config, seed)?;
        c.load_store("coarse/", &mut models.coarse.store)?;
        c.load_store("loc/", &mut models.loc.store)?;
        for kind in PartKind::ALL {
            c.load_store(&prefix_fine(kind), &mut models.fine[kind.index()].store)?;
        }
        let trained = c.require("meta/trained")?.data();
        if trained.len() != 3 {
            return Err(Error::CorruptCheckpoint("trained flags".into()));
        }
        let mut opt = Sgd::new(0.9, 0.01, 0.01);
        for (name, t) in c.entries() {
            if let Some(rest) = name.strip_prefix("velocity/") {
                opt.velocity.insert(rest.to_string(), t.clone());
            }
        }
        Ok(TrainState {
            models,
            opt,
            phase: Phase::from_code(c.require("meta/phase")?.data()[0])?,
            epoch: c.require("meta/epoch")?.data()[0] as usize,
            trained: [trained[0] != 0.0, trained[1] != 0.0, trained[2] != 0.0],
            seed,
        })
    }
}

/// Preprocesses a training set, optionally expanded by augmentation with
/// per-sample seeds.
pub fn prepare(samples: &[Sample], augment_data: bool, seed: u64) -> Result<Vec<Preprocessed>> {
    let per = par::map_indexed(samples.len(), |i| -> Result<Vec<Preprocessed>> {
        let s = &samples[i];
        if augment_data {
            augment(s, derive_seed(seed, &s.id, 0))?.iter().map(|a| preprocess(&a.sample)).collect()
        } else {
            Ok(vec![preprocess(s)?])
        }
    });
    Ok(per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64)));
    order
}

fn stack<T: Element>(items: impl Iterator<Item = Tensor<f32>>) -> Result<Tensor<T>> {
    let v: Vec<Tensor<T>> = items.map(|t| t.cast()).collect();
    Tensor::stack(&v)
}

fn grad_norm<T: Element>(store: &crate::tensor::ParamStore<T>) -> f64 {
    store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Exact crop rows of every part (`None` when a part is absent).
pub fn theta_targets(pre: &Preprocessed, window: (usize, usize)) -> Vec<Option<ThetaRow>> {
    theta_targets_with(pre, window, ThetaForm::CornerAligned)
}

pub fn theta_targets_with(pre: &Preprocessed, window: (usize, usize), form: ThetaForm) -> Vec<Option<ThetaRow>> {
    let s = pre.padded_size();
    Part::ALL
        .iter()
        .map(|&p| theta_ground_truth(&pre.part_mask(p), s, s, window, form, p.name()).ok())
        .collect()
}

/// Called after every epoch with its record and the updated state, e.g. to
/// append a log line and write a checkpoint.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochLog, &TrainState) -> Result<()>;

fn finish_epoch(
    state: &mut TrainState,
    epoch: usize,
    losses: &[f64],
    (f1, center_error): (Option<f64>, Option<f64>),
    norms: [f64; 3],
    log: Observer<'_>,
) -> Result<EpochLog> {
    state.epoch = epoch;
    let n = losses.len().max(1) as f64;
    let rec = EpochLog {
        epoch,
        phase: state.phase,
        loss: losses.iter().sum::<f64>() / n,
        f1,
        center_error,
        grad_norms: norms.map(|v| v / n),
    };
    log(&rec, state)?;
    Ok(rec)
}

fn due(cfg: &TrainConfig, epoch: usize) -> bool {
    cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)
}

/// Fits the coarse network to the resized labels.
pub fn pretrain_coarse(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &[Preprocessed],
    eval: Option<&[Preprocessed]>,
    log: Observer<'_>,
) -> Result<Vec<EpochLog>> {
    expect_phase(state, cfg, Phase::Coarse, train)?;
    let mut out = Vec::new();
    for epoch in state.epoch + 1..=cfg.epochs {
        let mut losses = Vec::new();
        let mut norms = [0.0; 3];
        for chunk in shuffled(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let x = stack::<f32>(chunk.iter().map(|&i| train[i].resized.clone()))?;
            let t = stack::<f32>(chunk.iter().map(|&i| train[i].resized_one_hot()))?;
            let mut g = Graph::new();
            let m = &mut state.models;
            let bound = m.bind(&mut g, Trainable { coarse: true, ..Trainable::NONE });
            let mut bn = Vec::new();
            let xv = g.constant(x);
            let z = m.coarse_forward(&mut g, &bound, Mode::Train, xv, &mut bn)?;
            let loss = coarse_loss(&mut g, z, &t)?;
            losses.push(g.value(loss).data()[0].as_f64());
            let grads = g.backward(loss)?;
            m.coarse.store.accumulate_grads(&bound.coarse, &grads)?;
            norms[0] += grad_norm(&m.coarse.store);
            state.opt.step("coarse/", &mut m.coarse.store)?;
            m.coarse.store.apply_bn_updates(&bn);
        }
        state.trained[0] = true;
        let f1 = match eval {
            Some(ev) if due(cfg, epoch) => Some(coarse_f1(&state.models, ev)?.report().overall.f1()),
            _ => None,
        };
        out.push(finish_epoch(state, epoch, &losses, (f1, None), norms, log)?);
    }
    Ok(out)
}

/// Pixel F1 counts of the coarse argmax at 128x128.
pub fn coarse_f1(models: &ModelSet<f32>, eval: &[Preprocessed]) -> Result<F1Counts> {
    let roughs = par::map_indexed(eval.len(), |i| models.rough_map(&eval[i].resized));
    let roughs = roughs.into_iter().collect::<Result<Vec<_>>>()?;
    coarse_counts_from(&roughs, eval)
}

fn expect_phase(state: &TrainState, cfg: &TrainConfig, phase: Phase, train: &[Preprocessed]) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != phase || state.phase != phase {
        return Err(Error::Config(format!(
            "state is in phase {}, config {}, expected {}",
            state.phase.name(),
            cfg.phase.name(),
            phase.name()
        )));
    }
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    Ok(())
}

/// Fits the localization network to exact crop rows, reading the frozen
/// coarse network's encoded output.
pub fn pretrain_locnet(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &[Preprocessed],
    eval: Option<&[Preprocessed]>,
    log: Observer<'_>,
) -> Result<Vec<EpochLog>> {
    expect_phase(state, cfg, Phase::Locnet, train)?;
    let window = state.models.config.window;
    let roughs = par::map_indexed(train.len(), |i| state.models.rough_map(&train[i].resized));
    let roughs = roughs.into_iter().collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<Option<ThetaRow>>> = train.iter().map(|p| theta_targets(p, window)).collect();
    let mut out = Vec::new();
    for epoch in state.epoch + 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "occlude", epoch as u64));
        let mut losses = Vec::new();
        let mut norms = [0.0; 3];
        for chunk in shuffled(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let inputs = chunk.iter().map(|&i| {
                let mut r = roughs[i].clone();
                if rng.random_bool(cfg.loc_occlusion_prob) {
                    occlude(&mut r, Part::ALL[rng.random_range(0..NUM_PARTS)]);
                }
                r
            });
            let x = stack::<f32>(inputs.collect::<Vec<_>>().into_iter())?;
            let mut g = Graph::new();
            let m = &mut state.models;
            let bound = m.bind(&mut g, Trainable { loc: true, ..Trainable::NONE });
            let mut bn = Vec::new();
            let xv = g.constant(x);
            let theta = m.loc_forward(&mut g, &bound, Mode::Train, xv, &mut bn)?;
            // absent parts copy the prediction and so contribute nothing
            let mut target = g.value(theta).clone();
            for (b, &i) in chunk.iter().enumerate() {
                for (p, row) in targets[i].iter().enumerate() {
                    if let Some(row) = row {
                        let at = (b * NUM_PARTS + p) * 6;
                        target.data_mut()[at..at + 6].copy_from_slice(&row.to_array().map(|v| v as f32));
                    }
                }
            }
            let loss = g.smooth_l1(theta, &target)?;
            losses.push(g.value(loss).data()[0].as_f64());
            let grads = g.backward(loss)?;
            m.loc.store.accumulate_grads(&bound.loc, &grads)?;
            norms[1] += grad_norm(&m.loc.store);
            state.opt.step("loc/", &mut m.loc.store)?;
            m.loc.store.apply_bn_updates(&bn);
        }
        state.trained[1] = true;
        let err = match eval {
            Some(ev) if due(cfg, epoch) => Some(mean_center_error(&state.models, ev, None)?),
            _ => None,
        };
        out.push(finish_epoch(state, epoch, &losses, (None, err), norms, log)?);
    }
    Ok(out)
}

/// Mean window-centre error in padded pixels over every present part.
pub fn mean_center_error(models: &ModelSet<f32>, eval: &[Preprocessed], occluded: Option<Part>) -> Result<f64> {
    let window = models.config.window;
    let errs = par::map_indexed(eval.len(), |i| -> Result<Vec<f64>> {
        let pre = &eval[i];
        let mut rough = models.rough_map(&pre.resized)?;
        if let Some(p) = occluded {
            occlude(&mut rough, p);
        }
        let rows = models.locate(&rough)?;
        let s = pre.padded_size();
        Ok(theta_targets(pre, window)
            .iter()
            .zip(&rows)
            .filter_map(|(t, r)| t.map(|t| crate::pipeline::center_error(*r, t.center_px(s, s), s)))
            .collect())
    });
    let all: Vec<f64> = errs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    Ok(all.iter().sum::<f64>() / all.len().max(1) as f64)
}

/// Scalar joint objective of one batch. With `fixed_rows` the windows are
/// constants and the coarse and localization networks are not run. Label
/// targets are always constants, cropped at the windows chosen by `targets`.
pub fn e2e_objective<T: Element>(
    models: &ModelSet<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    batch: &[&Preprocessed],
    fixed_rows: Option<&[Vec<ThetaRow>]>,
    targets: TargetWindow,
    bn: &mut BnStats<T>,
) -> Result<Var> {
    let theta = match fixed_rows {
        Some(rows) => g.constant(ThetaRow::to_tensor(rows)?),
        None => {
            let x = g.constant(stack(batch.iter().map(|p| p.resized.clone()))?);
            // pretrained networks keep their running batchnorm statistics so
            // training windows match the ones used at inference
            let z = models.coarse_forward(g, bound, Mode::Eval, x, &mut bn.coarse)?;
            let rough = models.encode_rough(g, z)?;
            models.loc_forward(g, bound, Mode::Eval, rough, &mut bn.loc)?
        }
    };
    let rows = ThetaRow::batch_from_tensor(g.value(theta))?;
    let window = models.config.window;
    let padded: Vec<Tensor<T>> = batch.iter().map(|p| p.padded.cast()).collect();
    let crops = models.crop_by_kind(g, &padded, theta)?;
    let targets: Vec<Vec<Tensor<f32>>> = batch
        .iter()
        .zip(&rows)
        .map(|(p, r)| match targets {
            TargetWindow::Predicted => fine_targets(p, r, window),
            TargetWindow::Truth => {
                let truth: Vec<ThetaRow> =
                    theta_targets(p, window).into_iter().zip(r).map(|(t, &r)| t.unwrap_or(r)).collect();
                fine_targets(p, &truth, window)
            }
        })
        .collect::<Result<_>>()?;
    bn.fine.resize_with(PartKind::ALL.len(), Vec::new);
    let mut stacked = Vec::new();
    for kind in PartKind::ALL {
        let parts = kind.parts();
        let t: Tensor<T> = stack(parts.iter().flat_map(|p| targets.iter().map(move |ts| ts[p.index()].clone())))?;
        let y = models.fine_forward(g, bound, kind, Mode::Train, crops[kind.index()], &mut bn.fine[kind.index()])?;
        stacked.push((y, t, parts.len()));
    }
    let groups: Vec<(Var, &Tensor<T>, usize)> = stacked.iter().map(|(y, t, n)| (*y, t, *n)).collect();
    system_loss(g, &groups)
}

/// Joint training of every network through the differentiable cropper, or
/// of the fine networks alone on fixed windows when `freeze_stn` is set.
pub fn train_end_to_end(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &[Preprocessed],
    eval: Option<&[Preprocessed]>,
    log: Observer<'_>,
) -> Result<Vec<EpochLog>> {
    expect_phase(state, cfg, Phase::EndToEnd, train)?;
    let fixed: Option<Vec<Vec<ThetaRow>>> = if cfg.freeze_stn {
        let rows = par::map_indexed(train.len(), |i| {
            let m = &state.models;
            m.rough_map(&train[i].resized).and_then(|r| m.locate(&r))
        });
        Some(rows.into_iter().collect::<Result<_>>()?)
    } else {
        None
    };
    let mut out = Vec::new();
    for epoch in state.epoch + 1..=cfg.epochs {
        let mut losses = Vec::new();
        let mut norms = [0.0; 3];
        for chunk in shuffled(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let batch: Vec<&Preprocessed> = chunk.iter().map(|&i| &train[i]).collect();
            let rows: Option<Vec<Vec<ThetaRow>>> = fixed.as_ref().map(|f| chunk.iter().map(|&i| f[i].clone()).collect());
            let mut g = Graph::new();
            let m = &mut state.models;
            let joint = !cfg.freeze_stn;
            let bound = m.bind(&mut g, Trainable { coarse: joint, loc: joint, fine: true });
            let mut bn = BnStats::default();
            let loss = e2e_objective(m, &mut g, &bound, &batch, rows.as_deref(), cfg.targets, &mut bn)?;
            losses.push(g.value(loss).data()[0].as_f64());
            let grads = g.backward(loss)?;
            for kind in PartKind::ALL {
                let f = &mut m.fine[kind.index()];
                f.store.accumulate_grads(&bound.fine[kind.index()], &grads)?;
                norms[2] += grad_norm(&f.store);
                state.opt.step(&prefix_fine(kind), &mut f.store)?;
                f.store.apply_bn_updates(&bn.fine[kind.index()]);
            }
            if joint {
                m.coarse.store.accumulate_grads(&bound.coarse, &grads)?;
                norms[0] += grad_norm(&m.coarse.store);
                state.opt.step("coarse/", &mut m.coarse.store)?;
                m.loc.store.accumulate_grads(&bound.loc, &grads)?;
                norms[1] += grad_norm(&m.loc.store);
                state.opt.step("loc/", &mut m.loc.store)?;
            }
        }
        state.trained[2] = true;
        let f1 = match eval {
            Some(ev) if due(cfg, epoch) => Some(evaluate(&state.models, ev)?.report().overall.f1()),
            _ => None,
        };
        out.push(finish_epoch(state, epoch, &losses, (f1, None), norms, log)?);
    }
    Ok(out)
}

/// Full-pipeline F1 counts on the original frames.
pub fn evaluate(models: &ModelSet<f32>, eval: &[Preprocessed]) -> Result<F1Counts> {
    let preds = models.predict_all(eval, &PredictOptions::default())?;
    final_counts(&preds, eval)
}
