//! Forward process, time sampling and the flow-matching objective.
//!
//! Time runs from `t = 0` (pure noise) to `t = 1` (clean image):
//! `x_t = t·x + (1 − t)·ε`, with ground-truth velocity `v = x − ε`.
//! The network predicts the clean image; velocities are recovered by
//! `(x_pred − x_t) / max(1 − t, clip)`.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Floor applied to `1 − t` wherever it appears as a denominator.
pub const DEFAULT_DENOM_CLIP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSamplerKind {
    LogitNormal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSamplerConfig {
    pub kind: TimeSamplerKind,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        Self {
            kind: TimeSamplerKind::LogitNormal,
            mu: -0.8,
            sigma: 0.8,
        }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!(
                "time sampler needs finite mu and sigma > 0 (got mu={}, sigma={})",
                self.mu, self.sigma
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

/// Draw `n` training times.
pub fn sample_time(n: usize, cfg: &TimeSamplerConfig, rng: &mut Stream) -> Result<Vec<f64>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Contract("sample_time needs n >= 1".into()));
    }
    Ok((0..n)
        .map(|_| match cfg.kind {
            TimeSamplerKind::LogitNormal => sigmoid(cfg.mu + cfg.sigma * rng.normal()),
            TimeSamplerKind::Uniform => rng.uniform_open(),
        })
        .collect())
}

fn per_sample<S: Scalar>(x: &Tensor<S>, t: &[f64], op: &'static str) -> Result<usize> {
    let b = *x.shape().first().ok_or_else(|| Error::dim(op, x.shape(), &[t.len()]))?;
    if b != t.len() {
        return Err(Error::dim(op, x.shape(), &[t.len()]));
    }
    Ok(x.numel() / b.max(1))
}

/// `t·x + (1 − t)·ε`, with one `t` per leading-axis sample.
pub fn interpolate<S: Scalar>(x: &Tensor<S>, eps: &Tensor<S>, t: &[f64]) -> Result<Tensor<S>> {
    if x.shape() != eps.shape() {
        return Err(Error::dim("interpolate", x.shape(), eps.shape()));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Contract(format!("interpolate: t={bad} outside [0, 1]")));
    }
    let chunk = per_sample(x, t, "interpolate")?;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ti = t[i / chunk];
        let e = eps.data()[i];
        *v = if ti == 1.0 {
            *v
        } else if ti == 0.0 {
            e
        } else {
            S::from_f64(ti) * *v + S::from_f64(1.0 - ti) * e
        };
    }
    Ok(out)
}

/// Ground-truth velocity `x − ε`.
pub fn gt_velocity<S: Scalar>(x: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    x.zip_map(eps, |a, b| a - b)
}

/// Per-sample denominators `max(1 − t, clip)`.
pub fn denominators(t: &[f64], clip: f64) -> Vec<f64> {
    t.iter().map(|t| (1.0 - t).max(clip)).collect()
}

/// Convert an x-prediction to a velocity: `(x_pred − x_t) / max(1 − t, clip)`.
pub fn x_to_v<S: Scalar>(x_pred: &Tensor<S>, x_t: &Tensor<S>, t: &[f64], denom_clip: f64) -> Result<Tensor<S>> {
    if !(denom_clip > 0.0) {
        return Err(Error::Contract(format!(
            "denominator clip must be positive, got {denom_clip}"
        )));
    }
    if x_pred.shape() != x_t.shape() {
        return Err(Error::dim("x_to_v", x_pred.shape(), x_t.shape()));
    }
    let chunk = per_sample(x_pred, t, "x_to_v")?;
    let den = denominators(t, denom_clip);
    let mut out = x_pred.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - x_t.data()[i]) / S::from_f64(den[i / chunk]);
    }
    Ok(out)
}

/// Noise implied by an x-prediction, `(x_t − t·x_pred) / max(1 − t, clip)`. Diagnostic only.
pub fn x_to_eps<S: Scalar>(x_pred: &Tensor<S>, x_t: &Tensor<S>, t: &[f64], denom_clip: f64) -> Result<Tensor<S>> {
    if x_pred.shape() != x_t.shape() {
        return Err(Error::dim("x_to_eps", x_pred.shape(), x_t.shape()));
    }
    let chunk = per_sample(x_pred, t, "x_to_eps")?;
    let den = denominators(t, denom_clip);
    let mut out = x_t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = i / chunk;
        *v = (*v - S::from_f64(t[k]) * x_pred.data()[i]) / S::from_f64(den[k]);
    }
    Ok(out)
}

/// Everything one training step needs about the forward process.
#[derive(Debug, Clone)]
pub struct DiffusionBatch<S> {
    pub x: Tensor<S>,
    pub eps: Tensor<S>,
    pub t: Vec<f64>,
    pub x_t: Tensor<S>,
    pub v: Tensor<S>,
    pub denom_clip: f64,
}

impl<S: Scalar> DiffusionBatch<S> {
    pub fn new(x: Tensor<S>, eps: Tensor<S>, t: Vec<f64>, denom_clip: f64) -> Result<Self> {
        if !(denom_clip > 0.0) {
            return Err(Error::Contract(format!(
                "denominator clip must be positive, got {denom_clip}"
            )));
        }
        let x_t = interpolate(&x, &eps, &t)?;
        let v = gt_velocity(&x, &eps)?;
        Ok(Self {
            x,
            eps,
            t,
            x_t,
            v,
            denom_clip,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.t.len()
    }

    /// `[B, 1, 1, ...]` tensor of `max(1 − t, clip)`, broadcastable against images.
    pub fn denominator_tensor(&self) -> Tensor<S> {
        let mut shape = vec![1; self.x.rank()];
        shape[0] = self.t.len();
        let den = denominators(&self.t, self.denom_clip);
        Tensor::from_f64(&shape, &den).expect("one denominator per sample")
    }
}

fn check_pred<S: Scalar>(g: &Graph<S>, x_pred: Var, batch: &DiffusionBatch<S>) -> Result<()> {
    if g.shape(x_pred) != batch.x.shape() {
        return Err(Error::dim("fm_loss", g.shape(x_pred), batch.x.shape()));
    }
    Ok(())
}

/// Flow-matching loss in x-form: `mean ((x_pred − x) / max(1 − t, clip))²`.
pub fn fm_loss<S: Scalar>(g: &mut Graph<S>, x_pred: Var, batch: &DiffusionBatch<S>) -> Result<Var> {
    check_pred(g, x_pred, batch)?;
    let x = g.constant(batch.x.clone());
    let den = g.constant(batch.denominator_tensor());
    let diff = g.sub(x_pred, x)?;
    let scaled = g.div(diff, den)?;
    let sq = g.square(scaled);
    Ok(g.mean_all(sq))
}

/// The same objective in velocity form: `mean ‖x_to_v(x_pred) − v‖²`.
pub fn fm_loss_velocity<S: Scalar>(g: &mut Graph<S>, x_pred: Var, batch: &DiffusionBatch<S>) -> Result<Var> {
    check_pred(g, x_pred, batch)?;
    let x_t = g.constant(batch.x_t.clone());
    let v = g.constant(batch.v.clone());
    let den = g.constant(batch.denominator_tensor());
    let num = g.sub(x_pred, x_t)?;
    let v_pred = g.div(num, den)?;
    let diff = g.sub(v_pred, v)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn img(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 1, vals.len()], vals).unwrap()
    }

    #[test]
    fn sample_time_examples() {
        let mut s = Stream::new(0, Purpose::Time, 0, 0);
        let zero_sigma_like = TimeSamplerConfig {
            mu: 0.0,
            sigma: 1e-300,
            ..Default::default()
        };
        let t = sample_time(3, &zero_sigma_like, &mut s).unwrap();
        assert!(t.iter().all(|&t| (t - 0.5).abs() < 1e-12));
        let at_mu = TimeSamplerConfig {
            sigma: 1e-300,
            ..Default::default()
        };
        let t = sample_time(1, &at_mu, &mut s).unwrap();
        assert!((t[0] - 0.310_025_518_872_388).abs() < 1e-12, "{}", t[0]);
    }

    #[test]
    fn sample_time_rejects_bad_sigma() {
        let mut s = Stream::new(0, Purpose::Time, 0, 0);
        let cfg = TimeSamplerConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(matches!(sample_time(4, &cfg, &mut s), Err(Error::Config(_))));
    }

    #[test]
    fn interpolate_examples() {
        let x = img(&[2.0, -1.0]);
        let e = img(&[0.0, 0.5]);
        assert_eq!(interpolate(&x, &e, &[1.0]).unwrap(), x);
        assert_eq!(interpolate(&x, &e, &[0.0]).unwrap(), e);
        assert_eq!(interpolate(&x, &e, &[0.5]).unwrap().data()[0], 1.0);
        assert!(matches!(interpolate(&x, &e, &[1.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn velocity_examples() {
        let x = img(&[1.0, 0.3]);
        let e = img(&[-1.0, 0.3]);
        let v = gt_velocity(&x, &e).unwrap();
        assert_eq!(v.data(), &[2.0, 0.0]);
        let back = v.zip_map(&e, |a, b| a + b).unwrap();
        assert_eq!(back, x);
        assert!(gt_velocity(&x, &img(&[1.0])).is_err());
    }

    #[test]
    fn x_to_v_examples() {
        let xp = img(&[0.7]);
        let xt = img(&[0.2]);
        assert_eq!(x_to_v(&xp, &xt, &[0.0], 0.05).unwrap().data()[0], 0.7 - 0.2);
        let v = x_to_v(&img(&[0.1]), &img(&[0.0]), &[0.99], 0.05).unwrap();
        assert!((v.data()[0] - 2.0).abs() < 1e-12);
        let v = x_to_v(&xt, &xt, &[0.4], 0.05).unwrap();
        assert_eq!(v.data()[0], 0.0);
        assert!(x_to_v(&xp, &xt, &[0.4], 0.0).is_err());
    }

    #[test]
    fn eps_diagnostic_inverts_interpolation() {
        let x = img(&[0.4, -0.2]);
        let e = img(&[1.1, 0.3]);
        let xt = interpolate(&x, &e, &[0.3]).unwrap();
        let rec = x_to_eps(&x, &xt, &[0.3], 0.05).unwrap();
        assert!(rec.max_abs_diff(&e) < 1e-12);
    }

    #[test]
    fn fm_loss_examples() {
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let eps = Tensor::zeros(&[1, 1, 2, 2]);
        let batch = DiffusionBatch::new(x.clone(), eps, vec![0.5], DEFAULT_DENOM_CLIP).unwrap();

        let mut g = Graph::<f64>::new();
        let xp = g.constant(x.clone());
        let l = fm_loss(&mut g, xp, &batch).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let shifted = x.map(|v| v + 0.1);
        let xp = g.constant(shifted);
        let l = fm_loss(&mut g, xp, &batch).unwrap();
        assert!((g.value(l).item() - 0.04).abs() < 1e-12);

        let bad = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(matches!(fm_loss(&mut g, bad, &batch), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_invariants() {
        let mut s = Stream::new(3, Purpose::Noise, 0, 0);
        let x = Tensor::<f32>::from_fn(&[2, 3, 4, 4], |_| s.uniform_range(-1.0, 1.0) as f32);
        let eps = Tensor::<f32>::from_fn(&[2, 3, 4, 4], |_| s.normal() as f32);
        let b = DiffusionBatch::new(x.clone(), eps.clone(), vec![0.25, 0.8], DEFAULT_DENOM_CLIP).unwrap();
        for i in 0..x.numel() {
            let t = if i < 48 { 0.25 } else { 0.8 };
            let expect = t * x.data()[i] as f64 + (1.0 - t) * eps.data()[i] as f64;
            assert!((b.x_t.data()[i] as f64 - expect).abs() < 1e-6);
            assert_eq!(b.v.data()[i], x.data()[i] - eps.data()[i]);
        }
        assert_eq!(b.denom_clip, 0.05);
    }
}
