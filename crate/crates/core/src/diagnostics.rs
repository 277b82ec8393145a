//! Self-checks behind the `check` command: finite-difference gradients,
//! solver convergence orders and spot checks of core invariants.

use std::fmt;

use crate::checkpoint::CheckpointBlob;
use crate::data::{encode_ppm, gen_batch, grid_rgb};
use crate::denoiser::{BoundParams, Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::flow::{fm_loss, fm_loss_velocity, logit, sample_time, DiffusionBatch, TimeSamplerConfig};
use crate::perception::{total_loss, ExtractorConfig, Extractors, GlobalNetConfig, PerceptualConfig, RepaInputs};
use crate::rng::{Purpose, Stream};
use crate::sampler::{integrate, timeshift_grid, FnField, Solver};
use crate::tensor::gradcheck::GradChecker;
use crate::tensor::{Graph, OpKind, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<CheckOutcome>) -> Self {
        r.unwrap_or_else(|e| Self::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = Stream::new(seed, Purpose::Diagnostic, 0, 0);
    Tensor::from_fn(shape, |_| s.normal())
}

fn rand_pos(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = Stream::new(seed, Purpose::Diagnostic, 0, 0);
    Tensor::from_fn(shape, |_| s.uniform_range(0.5, 2.0))
}

/// Contract the output with fixed random weights so every element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

/// One randomized input set per differentiable op.
pub fn op_cases() -> Vec<(OpKind, Vec<Tensor<f64>>)> {
    vec![
        (OpKind::Add, vec![randn(&[2, 3, 4], 1), randn(&[3, 1], 2)]),
        (OpKind::Sub, vec![randn(&[2, 3, 4], 3), randn(&[4], 4)]),
        (OpKind::Mul, vec![randn(&[2, 3, 4], 5), randn(&[2, 1, 4], 6)]),
        (OpKind::Div, vec![randn(&[3, 4], 7), rand_pos(&[3, 4], 8)]),
        (OpKind::Neg, vec![randn(&[5], 9)]),
        (OpKind::Silu, vec![randn(&[7], 10)]),
        (OpKind::GeluTanh, vec![randn(&[7], 11)]),
        (OpKind::Sigmoid, vec![randn(&[7], 12)]),
        (OpKind::Exp, vec![randn(&[7], 13)]),
        (OpKind::Log, vec![rand_pos(&[7], 14)]),
        (OpKind::Sqrt, vec![rand_pos(&[7], 15)]),
        (OpKind::Square, vec![randn(&[7], 16)]),
        (OpKind::Tanh, vec![randn(&[7], 17)]),
        (OpKind::ClampMin, vec![randn(&[9], 18)]),
        (OpKind::Affine, vec![randn(&[6], 19)]),
        (OpKind::Sum, vec![randn(&[2, 3, 4], 20)]),
        (OpKind::Mean, vec![randn(&[2, 3, 4], 21)]),
        (OpKind::Softmax, vec![randn(&[3, 5, 2], 22)]),
        (OpKind::MatMul, vec![randn(&[2, 3, 4], 23), randn(&[4, 5], 24)]),
        (OpKind::Bmm, vec![randn(&[2, 3, 4], 25), randn(&[2, 5, 4], 26)]),
        (OpKind::Conv2d, vec![randn(&[2, 2, 5, 4], 27), randn(&[3, 2, 3, 3], 28)]),
        (OpKind::Reshape, vec![randn(&[2, 6], 29)]),
        (OpKind::Permute, vec![randn(&[2, 3, 4], 30)]),
        (OpKind::SelectRows, vec![randn(&[4, 3], 31)]),
    ]
}

/// Apply `kind` to its case inputs and reduce to a scalar.
pub fn apply_op(kind: OpKind, g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let y = match kind {
        OpKind::Add => g.add(v[0], v[1])?,
        OpKind::Sub => g.sub(v[0], v[1])?,
        OpKind::Mul => g.mul(v[0], v[1])?,
        OpKind::Div => g.div(v[0], v[1])?,
        OpKind::Neg => g.neg(v[0]),
        OpKind::Silu => g.silu(v[0]),
        OpKind::GeluTanh => g.gelu_tanh(v[0]),
        OpKind::Sigmoid => g.sigmoid(v[0]),
        OpKind::Exp => g.exp(v[0]),
        OpKind::Log => g.log(v[0]),
        OpKind::Sqrt => g.sqrt(v[0]),
        OpKind::Square => g.square(v[0]),
        OpKind::Tanh => g.tanh(v[0]),
        OpKind::ClampMin => g.clamp_min(v[0], 0.05),
        OpKind::Affine => g.affine(v[0], -1.7, 0.3),
        OpKind::Sum => g.sum(v[0], &[0, 2], false)?,
        OpKind::Mean => g.mean(v[0], &[1], true)?,
        OpKind::Softmax => g.softmax(v[0], 1)?,
        OpKind::MatMul => g.matmul(v[0], v[1])?,
        OpKind::Bmm => g.bmm(v[0], v[1], true)?,
        OpKind::Conv2d => g.conv2d(v[0], v[1], 2)?,
        OpKind::Reshape => g.reshape(v[0], &[3, 4])?,
        OpKind::Permute => g.permute(v[0], &[2, 0, 1])?,
        OpKind::SelectRows => g.select_rows(v[0], &[3, 1, 1])?,
        OpKind::Leaf => v[0],
    };
    weighted_sum(g, y, 99)
}

pub const OP_TOLERANCE: f64 = 1e-5;
pub const OBJECTIVE_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of every op; `fault` distorts one backward rule.
pub fn op_gradient_checks(fault: Option<OpKind>) -> Vec<CheckOutcome> {
    let checker = GradChecker {
        fault,
        ..GradChecker::default()
    };
    op_cases()
        .into_iter()
        .map(|(kind, inputs)| {
            let name = format!("grad {kind}");
            CheckOutcome::from_result(
                &name,
                checker.check(|g, v| apply_op(kind, g, v), &inputs).map(|r| {
                    CheckOutcome::new(
                        name.clone(),
                        r.max_rel_error < OP_TOLERANCE,
                        format!("max rel error {:.2e}", r.max_rel_error),
                    )
                }),
            )
        })
        .collect()
}

/// The toy-width setup used for the full-objective gradient check.
pub struct ObjectiveProbe {
    pub model: Denoiser<f64>,
    pub extractors: Extractors,
    pub batch: DiffusionBatch<f64>,
    pub labels: Vec<usize>,
    pub perceptual: PerceptualConfig,
}

impl ObjectiveProbe {
    /// Randomized parameters (including the zero-initialized head) and a batch
    /// with times on both sides of the gate.
    pub fn new(seed: u64) -> Result<Self> {
        let model_cfg = DenoiserConfig {
            width: 8,
            depth: 2,
            heads: 2,
            repa_dim: 8,
            ..DenoiserConfig::default()
        };
        let mut model = Denoiser::<f64>::new(model_cfg, seed)?;
        let names: Vec<String> = model.params().keys().cloned().collect();
        for (i, n) in names.iter().enumerate() {
            let shape = model.params()[n].shape().to_vec();
            let offset = if n.ends_with("gain") { 1.0 } else { 0.0 };
            model.set_param(n, randn(&shape, seed ^ (1000 + i as u64)).map(|v| 0.3 * v + offset))?;
        }
        let ext_cfg = ExtractorConfig {
            local_widths: vec![4, 4, 4],
            global: GlobalNetConfig {
                dim: 8,
                ..GlobalNetConfig::default()
            },
        };
        let extractors = Extractors::new(seed, &ext_cfg)?;
        let (x, labels) = gen_batch(seed, &[0, 5, 10]);
        let eps = randn(x.shape(), seed ^ 77);
        let batch = DiffusionBatch::new(x.cast(), eps, vec![0.2, 0.55, 0.97], crate::flow::DEFAULT_DENOM_CLIP)?;
        let perceptual = PerceptualConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            repa_weight: 1.0,
            ..PerceptualConfig::default()
        };
        Ok(Self {
            model,
            extractors,
            batch,
            labels,
            perceptual,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.model.params().keys().cloned().collect()
    }

    /// Total objective with the parameters bound to `vars` (in name order).
    pub fn objective(&self, g: &mut Graph<f64>, vars: &[Var]) -> Result<Var> {
        let names = self.names();
        let p = BoundParams::from_pairs(names.iter().map(String::as_str).zip(vars.iter().copied()));
        let x_t = g.constant(self.batch.x_t.clone());
        let out = self.model.forward_graph(g, &p, x_t, &self.batch.t, &self.labels)?;
        let repa = RepaInputs {
            hidden: out.hidden,
            proj: p.get("repa_proj"),
        };
        let (loss, _) = total_loss(
            g,
            out.x_pred,
            Some(repa),
            &self.batch,
            &self.extractors,
            &self.perceptual,
        )?;
        Ok(loss)
    }
}

/// Finite-difference check of the complete training objective with respect to every denoiser parameter.
pub fn objective_gradient_check(fault: Option<OpKind>) -> CheckOutcome {
    let name = "grad full objective";
    let run = || -> Result<CheckOutcome> {
        let probe = ObjectiveProbe::new(11)?;
        let inputs: Vec<Tensor<f64>> = probe.model.params().values().cloned().collect();
        let checker = GradChecker {
            fault,
            ..GradChecker::default()
        };
        let r = checker.check(|g, v| probe.objective(g, v), &inputs)?;
        let worst = &probe.names()[r.worst.0];
        Ok(CheckOutcome::new(
            name,
            r.max_rel_error < OBJECTIVE_TOLERANCE,
            format!(
                "max rel error {:.2e} over {} entries (worst in {worst})",
                r.max_rel_error, r.entries
            ),
        ))
    };
    CheckOutcome::from_result(name, run())
}

/// Error at `t = 1` of `solver` with `n` steps on `dx/dt = −x`, `x(0) = 1`,
/// measured against a 10⁵-step Heun reference.
pub fn decay_error(solver: Solver, n: usize) -> Result<f64> {
    let solve = |solver: Solver, n: usize| -> Result<f64> {
        let grid = timeshift_grid(n, 1.0)?;
        let x0 = Tensor::from_f64(&[1], &[1.0])?;
        let mut field = FnField(|x: &Tensor<f64>, _t: f64| x.map(|v| -v));
        Ok(integrate(&mut field, x0, &grid, solver)?.item())
    };
    let reference = solve(Solver::Heun, 100_000)?;
    Ok((solve(solver, n)? - reference).abs())
}

/// `log₂(e(n) / e(2n))`.
pub fn convergence_order(solver: Solver, n: usize) -> Result<f64> {
    Ok((decay_error(solver, n)? / decay_error(solver, 2 * n)?).log2())
}

pub fn expected_order(solver: Solver) -> f64 {
    match solver {
        Solver::Euler => 1.0,
        Solver::Heun | Solver::Adams2 => 2.0,
    }
}

pub fn solver_order_checks() -> Vec<CheckOutcome> {
    [Solver::Euler, Solver::Heun, Solver::Adams2]
        .into_iter()
        .map(|s| {
            let name = format!("order {s}");
            CheckOutcome::from_result(
                &name,
                convergence_order(s, 16).map(|p| {
                    let want = expected_order(s);
                    CheckOutcome::new(
                        name.clone(),
                        (p - want).abs() <= 0.4,
                        format!("{p:.3} (expected {want}±0.4)"),
                    )
                }),
            )
        })
        .collect()
}

/// Quick versions of the flow, gating, serialization and image invariants.
pub fn invariant_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    // Exact only while the clip is inactive, t <= 1 - clip.
    out.push(CheckOutcome::from_result(
        "velocity/x loss identity",
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..10 {
                let x = randn(&[4, 3, 4, 4], 500 + i);
                let eps = randn(&[4, 3, 4, 4], 600 + i);
                let mut s = Stream::new(700 + i, Purpose::Diagnostic, 0, 0);
                let t: Vec<f64> = (0..4)
                    .map(|_| s.uniform_range(0.0, 1.0 - crate::flow::DEFAULT_DENOM_CLIP))
                    .collect();
                let batch = DiffusionBatch::new(x, eps, t, crate::flow::DEFAULT_DENOM_CLIP)?;
                let mut g = Graph::new();
                let pred = g.constant(randn(&[4, 3, 4, 4], 800 + i));
                let a = fm_loss(&mut g, pred, &batch)?;
                let b = fm_loss_velocity(&mut g, pred, &batch)?;
                worst = worst.max((g.value(a).item() - g.value(b).item()).abs());
            }
            Ok(CheckOutcome::new(
                "velocity/x loss identity",
                worst < 1e-6,
                format!("max gap {worst:.2e}"),
            ))
        })(),
    ));

    out.push(CheckOutcome::from_result(
        "noise gate",
        (|| {
            let probe = ObjectiveProbe::new(3)?;
            let batch = DiffusionBatch::new(
                probe.batch.x.clone(),
                probe.batch.eps.clone(),
                vec![0.05, 0.1, 0.29],
                crate::flow::DEFAULT_DENOM_CLIP,
            )?;
            let pred = randn(batch.x.shape(), 9);
            let grad = |full: bool| -> Result<Tensor<f64>> {
                let mut g = Graph::new();
                let p = g.param(pred.clone());
                let loss = if full {
                    total_loss(&mut g, p, None, &batch, &probe.extractors, &PerceptualConfig::default())?.0
                } else {
                    fm_loss(&mut g, p, &batch)?
                };
                g.backward(loss)?;
                Ok(g.grad(p).expect("prediction gradient"))
            };
            let same = grad(true)? == grad(false)?;
            Ok(CheckOutcome::new(
                "noise gate",
                same,
                "gated-off gradient equals flow-matching gradient",
            ))
        })(),
    ));

    out.push(CheckOutcome::from_result(
        "checkpoint round trip",
        (|| {
            let mut blob = CheckpointBlob::new();
            blob.insert_tensor("a", &randn(&[3, 2], 1));
            blob.insert_tensor("b", &randn(&[4], 2).cast::<f32>());
            blob.insert_u64("c", &[u64::MAX, 7]);
            let back = CheckpointBlob::from_bytes(&blob.to_bytes()?)?;
            Ok(CheckOutcome::new("checkpoint round trip", back == blob, "bitwise"))
        })(),
    ));

    out.push(CheckOutcome::from_result(
        "ppm endpoints",
        (|| {
            let img = Tensor::<f32>::from_f64(&[1, 3, 1, 3], &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0])?;
            let (w, h, rgb) = grid_rgb(&img, 1)?;
            let ppm = encode_ppm(w, h, &rgb);
            let body = &ppm[ppm.len() - 9..];
            let ok = body == [0, 0, 0, 128, 128, 128, 255, 255, 255];
            Ok(CheckOutcome::new("ppm endpoints", ok, format!("{body:?}")))
        })(),
    ));

    out.push(CheckOutcome::from_result(
        "logit-normal moments",
        (|| {
            let cfg = TimeSamplerConfig::default();
            let t = sample_time(100_000, &cfg, &mut Stream::new(5, Purpose::Diagnostic, 0, 0))?;
            let z: Vec<f64> = t.iter().map(|&v| logit(v)).collect();
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            let ok = (mean - cfg.mu).abs() < 0.01 && (std - cfg.sigma).abs() < 0.01;
            Ok(CheckOutcome::new(
                "logit-normal moments",
                ok,
                format!("mean {mean:.4}, std {std:.4}"),
            ))
        })(),
    ));
    out
}

/// Every suite in order. `fault` distorts one op's backward rule in the gradient suites.
pub fn run_all(fault: Option<OpKind>) -> Vec<CheckOutcome> {
    let mut out = op_gradient_checks(fault);
    out.push(objective_gradient_check(fault));
    out.extend(solver_order_checks());
    out.extend(invariant_checks());
    out
}
