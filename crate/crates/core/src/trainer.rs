//! Training loop: objective, AdamW, EMA, gradient clipping, metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::CheckpointBlob;
use crate::data::BatchIter;
use crate::denoiser::{BoundParams, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::flow::{sample_time, DiffusionBatch, TimeSamplerConfig, DEFAULT_DENOM_CLIP};
use crate::perception::{total_loss, ExtractorConfig, Extractors, LossBreakdown, PerceptualConfig, RepaInputs};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub type ParamMap<S> = BTreeMap<String, Tensor<S>>;

// ---- optimizer --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: ParamMap<S>,
    pub v: ParamMap<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(cfg: AdamWConfig, params: &ParamMap<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected AdamW step with decoupled weight decay.
pub fn adamw_update<S: Scalar>(
    params: &mut ParamMap<S>,
    grads: &ParamMap<S>,
    state: &mut OptimizerState<S>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name:?}")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no optimizer moment for {name:?}")))?;
        for other in [g.shape(), m.shape(), state.v[name].shape()] {
            if other != p.shape() {
                return Err(Error::dim("adamw_update", p.shape(), other));
            }
        }
    }
    state.step += 1;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
    let (ob1, ob2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));
    let (lr, eps, decay) = (
        S::from_f64(c.lr),
        S::from_f64(c.eps),
        S::from_f64(c.lr * c.weight_decay),
    );
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + ob1 * g[i];
            v[i] = b2 * v[i] + ob2 * g[i] * g[i];
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            *w = *w - decay * *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global ℓ2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut ParamMap<S>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

// ---- EMA --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<S> {
    pub decay: f64,
    pub shadow: ParamMap<S>,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(decay: f64, params: &ParamMap<S>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update<S: Scalar>(ema: &mut EmaState<S>, params: &ParamMap<S>) -> Result<()> {
    let (d, od) = (S::from_f64(ema.decay), S::from_f64(1.0 - ema.decay));
    for (name, p) in params {
        let s = ema
            .shadow
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("EMA has no shadow for {name:?}")))?;
        if s.shape() != p.shape() {
            return Err(Error::dim("ema_update", s.shape(), p.shape()));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + od * b;
        }
    }
    Ok(())
}

// ---- objective --------------------------------------------------------------

/// A built objective: the loss node, its parts and the parameter handles.
pub struct Objective {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub params: BoundParams,
}

/// Forward the denoiser on `batch` with `labels` and build the combined objective.
pub fn build_objective<S: Scalar>(
    g: &mut Graph<S>,
    model: &Denoiser<S>,
    ext: &Extractors,
    batch: &DiffusionBatch<S>,
    labels: &[usize],
    pcfg: &PerceptualConfig,
) -> Result<Objective> {
    let params = model.bind(g, true);
    let x_t = g.constant(batch.x_t.clone());
    let out = model.forward_graph(g, &params, x_t, &batch.t, labels)?;
    let repa = RepaInputs {
        hidden: out.hidden,
        proj: params.get("repa_proj"),
    };
    let (loss, breakdown) = total_loss(g, out.x_pred, Some(repa), batch, ext, pcfg)?;
    Ok(Objective {
        loss,
        breakdown,
        params,
    })
}

/// Gradients of every parameter after `backward` (zeros where unreachable).
pub fn collect_grads<S: Scalar>(g: &Graph<S>, model: &Denoiser<S>, params: &BoundParams) -> ParamMap<S> {
    params
        .iter()
        .map(|(name, v)| {
            let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(model.params()[name].shape()));
            (name.to_string(), grad)
        })
        .collect()
}

// ---- training loop ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset_seed: u64,
    pub extractor_seed: u64,
    pub batch_size: usize,
    pub epoch_size: u64,
    pub adamw: AdamWConfig,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub denom_clip: f64,
    pub time: TimeSamplerConfig,
    pub perceptual: PerceptualConfig,
    pub model: DenoiserConfig,
    pub extractors: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_seed: 0,
            extractor_seed: 1,
            batch_size: 32,
            epoch_size: 8192,
            adamw: AdamWConfig::default(),
            ema_decay: 0.9999,
            grad_clip: 1.0,
            denom_clip: DEFAULT_DENOM_CLIP,
            time: TimeSamplerConfig::default(),
            perceptual: PerceptualConfig::default(),
            model: DenoiserConfig::default(),
            extractors: ExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.perceptual.validate()?;
        self.time.validate()?;
        if self.batch_size == 0 || self.epoch_size == 0 {
            return Err(Error::Config("batch_size and epoch_size must be >= 1".into()));
        }
        if !(self.adamw.lr > 0.0) || !(0.0..1.0).contains(&self.adamw.beta1) || !(0.0..1.0).contains(&self.adamw.beta2)
        {
            return Err(Error::Config("AdamW needs lr > 0 and betas in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.denom_clip > 0.0) {
            return Err(Error::Config("denom_clip must be positive".into()));
        }
        let g = &self.extractors.global;
        let m = &self.model;
        if g.image_size != m.image_size || g.channels != m.channels {
            return Err(Error::Config("extractor and denoiser image geometry differ".into()));
        }
        if g.num_patches() != m.num_tokens() || g.dim != m.repa_dim {
            return Err(Error::Config(format!(
                "alignment needs matching token grids ({} vs {}) and widths ({} vs {})",
                g.num_patches(),
                m.num_tokens(),
                g.dim,
                m.repa_dim
            )));
        }
        Ok(())
    }
}

/// Diagnostics of one completed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_fm,loss_lpips,loss_pdino,loss_repa,grad_norm,gate_fraction";

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.total, l.fm, l.lpips, l.pdino, l.repa, self.grad_norm, l.gate_fraction
        )
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Denoiser<f32>,
    pub opt: OptimizerState<f32>,
    pub ema: EmaState<f32>,
    pub extractors: Extractors,
    /// Number of completed steps.
    pub step: u64,
    batches: BatchIter,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::<f32>::new(cfg.model, cfg.seed)?;
        let extractors = Extractors::new(cfg.extractor_seed, &cfg.extractors)?;
        let opt = OptimizerState::new(cfg.adamw, model.params());
        let ema = EmaState::new(cfg.ema_decay, model.params())?;
        let batches = BatchIter::new(cfg.dataset_seed, cfg.seed, cfg.batch_size, cfg.epoch_size)?;
        Ok(Self {
            cfg,
            model,
            opt,
            ema,
            extractors,
            step: 0,
            batches,
        })
    }

    /// EMA weights as a standalone model.
    pub fn ema_model(&self) -> Result<Denoiser<f32>> {
        let mut m = self.model.clone();
        for (k, v) in &self.ema.shadow {
            m.set_param(k, v.clone())?;
        }
        Ok(m)
    }

    /// The inputs of step `step`: clean batch, noise, times and (possibly dropped) labels.
    pub fn step_inputs(&self, step: u64) -> Result<(DiffusionBatch<f32>, Vec<usize>)> {
        let cfg = &self.cfg;
        let (x, mut labels) = self.batches.batch(step);
        let t = sample_time(
            cfg.batch_size,
            &cfg.time,
            &mut Stream::new(cfg.seed, Purpose::Time, step, 0),
        )?;
        let mut noise = Stream::new(cfg.seed, Purpose::Noise, step, 0);
        let eps = Tensor::from_fn(x.shape(), |_| noise.normal() as f32);
        let mut drop = Stream::new(cfg.seed, Purpose::LabelDrop, step, 0);
        for c in labels.iter_mut() {
            if drop.bernoulli(cfg.model.class_drop_prob) {
                *c = cfg.model.null_class();
            }
        }
        Ok((DiffusionBatch::new(x, eps, t, cfg.denom_clip)?, labels))
    }

    /// One optimization step. Nothing is modified if the loss is not finite.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let (batch, labels) = self.step_inputs(step)?;
        let mut g = Graph::new();
        let obj = build_objective(
            &mut g,
            &self.model,
            &self.extractors,
            &batch,
            &labels,
            &self.cfg.perceptual,
        )?;
        if !obj.breakdown.is_finite() {
            return Err(Error::NonFinite {
                step,
                breakdown: obj.breakdown.to_string(),
            });
        }
        g.backward(obj.loss)?;
        let mut grads = collect_grads(&g, &self.model, &obj.params);
        drop(g);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                breakdown: format!("{} grad_norm={grad_norm}", obj.breakdown),
            });
        }
        adamw_update(self.model.params_mut(), &grads, &mut self.opt)?;
        ema_update(&mut self.ema, self.model.params())?;
        self.step += 1;
        Ok(StepReport {
            step,
            loss: obj.breakdown,
            grad_norm,
        })
    }

    /// Run until `total_steps` steps are complete, calling `on_step` after each.
    pub fn run(
        &mut self,
        total_steps: u64,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < total_steps {
            let r = self.train_step()?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> CheckpointBlob {
        let mut blob = CheckpointBlob::new();
        blob.extend_prefixed("model.", self.model.to_blob());
        blob.extend_prefixed("extractor.", self.extractors.to_blob());
        for (prefix, map) in [
            ("ema.", &self.ema.shadow),
            ("opt.m.", &self.opt.m),
            ("opt.v.", &self.opt.v),
        ] {
            for (k, v) in map {
                blob.insert_tensor(format!("{prefix}{k}"), v);
            }
        }
        blob.insert_u64("opt.step", &[self.opt.step]);
        blob.insert_u64("train.step", &[self.step]);
        blob.insert_u64("train.seed", &[self.cfg.seed]);
        blob
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_blob().save(path)
    }

    /// Restore a trainer for `cfg` from a checkpoint; on any error no state is returned.
    pub fn from_blob(cfg: TrainConfig, blob: &CheckpointBlob) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let saved_seed = blob.u64("train.seed")?;
        if saved_seed != t.cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {saved_seed}, config has {}",
                t.cfg.seed
            )));
        }
        t.model.load_blob(&blob.with_prefix("model."))?;
        t.extractors.load_blob(&blob.with_prefix("extractor."))?;
        let load_map = |prefix: &str, like: &ParamMap<f32>| -> Result<ParamMap<f32>> {
            let sub = blob.with_prefix(prefix);
            like.iter()
                .map(|(k, v)| {
                    let x = sub.tensor::<f32>(k)?;
                    if x.shape() != v.shape() {
                        return Err(Error::dim("load checkpoint", x.shape(), v.shape()));
                    }
                    Ok((k.clone(), x))
                })
                .collect()
        };
        t.ema.shadow = load_map("ema.", t.model.params())?;
        t.opt.m = load_map("opt.m.", t.model.params())?;
        t.opt.v = load_map("opt.v.", t.model.params())?;
        t.opt.step = blob.u64("opt.step")?;
        t.step = blob.u64("train.step")?;
        Ok(t)
    }

    pub fn load(cfg: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_blob(cfg, &CheckpointBlob::load(path)?)
    }

    /// Checkpoint holding only the EMA weights under `model.`, for sampling and evaluation.
    pub fn ema_blob(&self) -> Result<CheckpointBlob> {
        let mut blob = CheckpointBlob::new();
        blob.extend_prefixed("model.", self.ema_model()?.to_blob());
        blob.extend_prefixed("extractor.", self.extractors.to_blob());
        blob.insert_u64("train.step", &[self.step]);
        Ok(blob)
    }
}

/// Load a denoiser stored under `model.` in a checkpoint file.
pub fn load_model(cfg: DenoiserConfig, path: impl AsRef<Path>) -> Result<Denoiser<f32>> {
    let blob = CheckpointBlob::load(path)?;
    let mut m = Denoiser::<f32>::new(cfg, 0)?;
    m.load_blob(&blob.with_prefix("model."))?;
    Ok(m)
}

/// Appends step rows to a metrics CSV file.
pub struct MetricsWriter {
    file: std::io::BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Create `path`, or reopen it for appending when resuming (`append`).
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let exists = path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            file: std::io::BufWriter::new(file),
            path,
        };
        if !(append && exists) {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        self.line(&r.csv_row())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_map(v: f32) -> ParamMap<f32> {
        [("w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn adam_first_step() {
        let mut p = scalar_map(0.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        adamw_update(&mut p, &scalar_map(1.0), &mut st).unwrap();
        assert!((p["w"].item() as f64 + 1e-4).abs() < 1e-9);

        let mut p = scalar_map(0.5);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        adamw_update(&mut p, &scalar_map(0.0), &mut st).unwrap();
        assert_eq!(p["w"].item(), 0.5);

        let bad: ParamMap<f32> = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(matches!(
            adamw_update(&mut p, &bad, &mut st),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn ema_examples() {
        let mut e = EmaState::new(0.9999, &scalar_map(0.0)).unwrap();
        ema_update(&mut e, &scalar_map(1.0)).unwrap();
        assert!((e.shadow["w"].item() as f64 - 1e-4).abs() < 1e-9);

        let mut e = EmaState::<f64>::new(0.9, &[("w".to_string(), Tensor::scalar(0.0))].into_iter().collect()).unwrap();
        let p: ParamMap<f64> = [("w".to_string(), Tensor::scalar(2.0))].into_iter().collect();
        for k in 1..=20 {
            ema_update(&mut e, &p).unwrap();
            assert!(((2.0 - e.shadow["w"].item()) - 0.9f64.powi(k) * 2.0).abs() < 1e-12);
        }

        let mut e = EmaState::new(0.0, &scalar_map(0.0)).unwrap();
        ema_update(&mut e, &scalar_map(3.0)).unwrap();
        assert_eq!(e.shadow["w"].item(), 3.0);
        assert!(EmaState::new(1.0, &scalar_map(0.0)).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g: ParamMap<f64> = [
            ("a".to_string(), Tensor::from_f64(&[2], &[1.2, 0.0]).unwrap()),
            ("b".to_string(), Tensor::from_f64(&[1], &[1.6]).unwrap()),
        ]
        .into_iter()
        .collect();
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 2.0).abs() < 1e-12);
        assert_eq!(g["a"].data(), &[0.6, 0.0]);
        assert!((g["b"].item() - 0.8).abs() < 1e-12);

        let before = g.clone();
        let n = clip_grad_norm(&mut g, 2.0);
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(g, before);
    }
}
