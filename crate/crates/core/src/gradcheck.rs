//! Central finite-difference verification of analytic gradients (64-bit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::icnn::{IcnnConfig, IcnnModel};
use crate::labels::NUM_CLASSES;
use crate::nn::Forward;
use crate::stn::{crop_parts, LocNet, LocNetConfig};
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::{Error, Result};

/// Worst disagreement found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Finite-difference checker. Relative error per element is
/// `|a - n| / (|a| + |n| + 1e-12)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    step: f64,
    only: Option<Vec<bool>>,
    max_per_input: Option<usize>,
    corrupt: f64,
}

impl GradCheck {
    pub fn new(step: f64) -> Self {
        GradCheck {
            step,
            only: None,
            max_per_input: None,
            corrupt: 1.0,
        }
    }

    /// Restrict checking to the inputs flagged `true`.
    pub fn only(mut self, mask: Vec<bool>) -> Self {
        self.only = Some(mask);
        self
    }

    /// Check at most `n` evenly strided elements per input.
    pub fn sample(mut self, n: usize) -> Self {
        self.max_per_input = Some(n.max(1));
        self
    }

    /// Test hook: scale the analytic gradient before comparing.
    pub fn corrupt(mut self, factor: f64) -> Self {
        self.corrupt = factor;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        if !(1e-6..=1e-4).contains(&self.step) {
            return Err(Error::Config(format!("finite-difference step {} outside [1e-6, 1e-4]", self.step)));
        }
        let checked_input = |i: usize| self.only.as_ref().is_none_or(|m| m.get(i).copied().unwrap_or(false));

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.leaf(t.clone(), checked_input(i))).collect();
        let root = f(&mut g, &vars)?;
        let grads = g.backward(root)?;

        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let root = f(&mut g, &vars)?;
            let v = g.value(root);
            if v.len() != 1 {
                return Err(Error::NonScalarRoot(v.shape().to_vec()));
            }
            Ok(v.data()[0])
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            checked: 0,
        };
        let mut work = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            if !checked_input(i) {
                continue;
            }
            let n = input.len();
            let stride = self.max_per_input.map_or(1, |m| n.div_ceil(m).max(1));
            for j in (0..n).step_by(stride) {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let up = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let down = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]) * self.corrupt;
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_input = i;
                    report.worst_index = j;
                }
            }
        }
        Ok(report)
    }
}

/// `grad_check(f, inputs, step)` with every element of every input checked.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(step).run(f, inputs).map(|r| r.max_rel_error)
}

/// Seeded standard-normal tensor.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| d.sample(&mut rng)).collect()).expect("shape")
}

/// Seeded uniform tensor on `[lo, hi)`.
pub fn randu(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Uniform::new(lo, hi).expect("range");
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| d.sample(&mut rng)).collect()).expect("shape")
}

/// Scalar objective `sum(w * y)` with fixed random weights, so that no
/// gradient vanishes by symmetry (as `sum(batchnorm(x))` would).
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), seed ^ 0x5eed);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Which group of checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Stn,
    Losses,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "tensor" => Ok(Suite::Tensor),
            "stn" => Ok(Suite::Stn),
            "losses" => Ok(Suite::Losses),
            _ => Err(Error::Config(format!("unknown suite {s}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub op: &'static str,
    pub max_rel_error: f64,
    pub bound: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.bound
    }
}

type CheckFn = fn(&GradCheck) -> Result<GradCheckReport>;

struct Case {
    suite: &'static str,
    op: &'static str,
    bound: f64,
    run: CheckFn,
}

const STEP: f64 = 1e-5;

fn cases() -> Vec<Case> {
    vec![
        Case { suite: "tensor", op: "linear", bound: 1e-8, run: check_linear },
        Case { suite: "tensor", op: "conv2d", bound: 1e-6, run: check_conv },
        Case { suite: "tensor", op: "conv2d_relu_chain", bound: 1e-6, run: check_conv_relu },
        Case { suite: "tensor", op: "maxpool2d", bound: 1e-6, run: check_maxpool },
        Case { suite: "tensor", op: "avgpool2d", bound: 1e-6, run: check_avgpool },
        Case { suite: "tensor", op: "upsample_nearest", bound: 1e-6, run: check_upsample },
        Case { suite: "tensor", op: "batchnorm2d", bound: 1e-5, run: check_batchnorm },
        Case { suite: "tensor", op: "sigmoid_tanh_softplus", bound: 1e-6, run: check_pointwise },
        Case { suite: "tensor", op: "softmax_channels", bound: 1e-6, run: check_softmax },
        Case { suite: "tensor", op: "concat_narrow", bound: 1e-6, run: check_concat },
        Case { suite: "tensor", op: "grid_sample", bound: 1e-5, run: check_grid_sample },
        Case { suite: "tensor", op: "icnn_forward", bound: 1e-4, run: check_icnn },
        Case { suite: "stn", op: "constrain_theta", bound: 1e-6, run: check_constrain },
        Case { suite: "stn", op: "crop_parts", bound: 1e-4, run: check_crop },
        Case { suite: "stn", op: "locnet_crop", bound: 1e-4, run: check_locnet_crop },
        Case { suite: "losses", op: "bce_with_logits", bound: 1e-8, run: check_bce },
        Case { suite: "losses", op: "smooth_l1", bound: 1e-8, run: check_smooth_l1 },
    ]
}

/// Runs the selected suite. `corrupt` names an op whose analytic gradient is
/// deliberately scaled by 1.01 (harness self-test).
pub fn run_suite(suite: Suite, corrupt: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for case in cases() {
        let selected = match suite {
            Suite::All => true,
            Suite::Tensor => case.suite == "tensor",
            Suite::Stn => case.suite == "stn",
            Suite::Losses => case.suite == "losses",
        };
        if !selected {
            continue;
        }
        let mut gc = GradCheck::new(STEP);
        if corrupt == Some(case.op) {
            gc = gc.corrupt(1.01);
        }
        let r = (case.run)(&gc)?;
        out.push(CheckOutcome {
            suite: case.suite,
            op: case.op,
            max_rel_error: r.max_rel_error,
            bound: case.bound,
        });
    }
    Ok(out)
}

pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

fn check_linear(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[3, 5], 1), randn(&[4, 5], 2), randn(&[4], 3)];
    gc.run(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, 4)
        },
        &inputs,
    )
}

fn check_conv(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 3, 8, 8], 10), randn(&[4, 3, 3, 3], 11), randn(&[4], 12)];
    gc.run(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 13)
        },
        &inputs,
    )
}

fn check_conv_relu(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[1, 2, 6, 6], 20), randn(&[3, 2, 3, 3], 21), randn(&[3], 22)];
    gc.run(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            let y = g.relu(y);
            Ok(g.sum(y))
        },
        &inputs,
    )
}

fn check_maxpool(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 2, 6, 5], 30)];
    gc.run(
        |g, v| {
            let y = g.maxpool2d(v[0], true)?;
            weighted_sum(g, y, 31)
        },
        &inputs,
    )
}

fn check_avgpool(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 2, 7, 6], 40)];
    gc.run(
        |g, v| {
            let y = g.avgpool2d(v[0])?;
            weighted_sum(g, y, 41)
        },
        &inputs,
    )
}

fn check_upsample(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[1, 2, 3, 3], 50)];
    gc.run(
        |g, v| {
            let y = g.upsample_nearest_to(v[0], 3, 8, 7)?;
            weighted_sum(g, y, 51)
        },
        &inputs,
    )
}

fn check_batchnorm(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[3, 2, 4, 4], 60), randu(&[2], 0.5, 1.5, 61), randn(&[2], 62)];
    gc.run(
        |g, v| {
            let (y, _, _) = g.batchnorm_train(v[0], v[1], v[2], crate::tensor::BN_EPS)?;
            weighted_sum(g, y, 63)
        },
        &inputs,
    )
}

fn check_pointwise(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 7], 70)];
    gc.run(
        |g, v| {
            let a = g.sigmoid(v[0]);
            let b = g.tanh(v[0]);
            let c = g.softplus(v[0]);
            let ab = g.mul(a, b)?;
            let y = g.add(ab, c)?;
            weighted_sum(g, y, 71)
        },
        &inputs,
    )
}

fn check_softmax(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 4, 3, 3], 80)];
    gc.run(
        |g, v| {
            let y = g.softmax_channels(v[0])?;
            weighted_sum(g, y, 81)
        },
        &inputs,
    )
}

fn check_concat(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 3, 4], 90), randn(&[2, 2, 4], 91)];
    gc.run(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let n = g.narrow(c, 1, 1, 3)?;
            let s = g.scale(n, 1.5);
            weighted_sum(g, s, 92)
        },
        &inputs,
    )
}

/// Grid at half-integer source pixels, away from the bilinear kinks.
fn half_integer_grid(b: usize, h: usize, w: usize, src_h: usize, src_w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ux = Uniform::new(0, src_w - 1).expect("range");
    let uy = Uniform::new(0, src_h - 1).expect("range");
    let mut data = Vec::with_capacity(b * h * w * 2);
    for _ in 0..b * h * w {
        let px = ux.sample(&mut rng) as f64 + 0.5;
        let py = uy.sample(&mut rng) as f64 + 0.5;
        data.push(px / (src_w - 1) as f64 * 2.0 - 1.0);
        data.push(py / (src_h - 1) as f64 * 2.0 - 1.0);
    }
    Tensor::from_vec(vec![b, h, w, 2], data).expect("shape")
}

fn check_grid_sample(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 2, 6, 7], 100), half_integer_grid(2, 4, 5, 6, 7, 101)];
    gc.run(
        |g, v| {
            let y = g.grid_sample(v[0], v[1])?;
            weighted_sum(g, y, 102)
        },
        &inputs,
    )
}

fn check_icnn(gc: &GradCheck) -> Result<GradCheckReport> {
    let cfg = IcnnConfig {
        in_channels: 2,
        out_channels: 2,
        widths: [2, 2, 2, 2],
        rounds: 1,
        input_size: 9,
        interlink: true,
    };
    let model = IcnnModel::<f64>::new(cfg, 5)?;
    let mut inputs: Vec<Tensor<f64>> = model.store.iter().map(|p| p.value.clone()).collect();
    let n = inputs.len();
    inputs.push(randn(&[2, 2, 9, 9], 110));
    let mask = (0..=n).map(|i| i == n || model.store.get(i).requires_grad).collect();
    gc.clone().only(mask).sample(24).run(
        |g, v| {
            let mut f = Forward::new(g, &v[..n], Mode::Train);
            let y = model.forward(&mut f, v[n])?;
            weighted_sum(g, y, 111)
        },
        &inputs,
    )
}

fn check_constrain(gc: &GradCheck) -> Result<GradCheckReport> {
    let inputs = [randn(&[2, 3, 4], 120)];
    gc.run(
        |g, v| {
            let y = g.constrain_theta(v[0])?;
            weighted_sum(g, y, 121)
        },
        &inputs,
    )
}

/// Smooth test image so that bilinear kinks are small.
fn smooth_image(c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut d = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64 / w as f64, y as f64 / h as f64);
                d.push((3.0 * xf + ci as f64).sin() * (2.0 * yf + 0.5).cos() + 0.3 * xf * yf);
            }
        }
    }
    Tensor::from_vec(vec![1, c, h, w], d).expect("shape")
}

fn check_crop(gc: &GradCheck) -> Result<GradCheckReport> {
    // theta chosen so that every sample lands between pixel centres
    let theta = Tensor::from_vec(
        vec![1, 2, 2, 3],
        vec![0.31, 0.0, 0.113, 0.0, 0.27, -0.071, 0.23, 0.0, -0.217, 0.0, 0.29, 0.183],
    )?;
    let inputs = [smooth_image(2, 17, 19), theta];
    gc.run(
        |g, v| {
            let y = crop_parts(g, v[0], v[1], (5, 5))?;
            weighted_sum(g, y, 131)
        },
        &inputs,
    )
}

fn check_locnet_crop(gc: &GradCheck) -> Result<GradCheckReport> {
    let cfg = LocNetConfig {
        in_channels: NUM_CLASSES,
        input_size: 16,
        widths: [3, 3, 4, 4, 4, 4, 5, 5],
        parts: 2,
        init_scale: 0.3,
    };
    let loc = LocNet::<f64>::new(cfg, 9)?;
    let mut inputs: Vec<Tensor<f64>> = loc.store.iter().map(|p| p.value.clone()).collect();
    let n = inputs.len();
    inputs.push(randn(&[2, NUM_CLASSES, 16, 16], 140));
    let image = smooth_image(3, 23, 23);
    let image = Tensor::stack(&[image.clone().reshape(vec![3, 23, 23])?, image.reshape(vec![3, 23, 23])?])?;
    inputs.push(image);
    let mask = (0..n + 2).map(|i| i < n && loc.store.get(i).requires_grad || i == n).collect();
    gc.clone().only(mask).sample(16).run(
        |g, v| {
            let mut f = Forward::new(g, &v[..n], Mode::Train);
            let theta = loc.forward(&mut f, v[n])?;
            let y = crop_parts(g, v[n + 1], theta, (7, 7))?;
            weighted_sum(g, y, 141)
        },
        &inputs,
    )
}

fn check_bce(gc: &GradCheck) -> Result<GradCheckReport> {
    let target = randu(&[3, 5], 0.0, 1.0, 151).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let inputs = [randn(&[3, 5], 150).map(|v| 3.0 * v)];
    gc.run(|g, v| g.bce_with_logits(v[0], &target), &inputs)
}

fn check_smooth_l1(gc: &GradCheck) -> Result<GradCheckReport> {
    // differences stay clear of the kinks at 0 and +-1
    let target = Tensor::from_vec(vec![6], vec![0.0; 6])?;
    let inputs = [Tensor::from_vec(vec![6], vec![0.3, -0.6, 1.7, -2.4, 0.05, 0.9])?];
    gc.run(|g, v| g.smooth_l1(v[0], &target), &inputs)
}
