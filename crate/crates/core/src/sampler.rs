//! Deterministic ODE integration from noise (`t = 0`) to image (`t = 1`).

use std::fmt;
use std::str::FromStr;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::flow::{x_to_v, DEFAULT_DENOM_CLIP};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Heun,
    Adams2,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
            Solver::Adams2 => "adams2",
        }
    }

    /// Model evaluations for an `n`-step trajectory without guidance.
    pub fn evaluations(self, n: usize) -> usize {
        match self {
            Solver::Heun => 2 * n - 1,
            Solver::Euler | Solver::Adams2 => n,
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            "adams2" => Ok(Solver::Adams2),
            other => Err(Error::Config(format!("unknown solver {other:?} (euler, heun, adams2)"))),
        }
    }
}

/// Which end of the trajectory the timeshift compresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftOrientation {
    /// `t = s·u / (1 + (s−1)·u)`: large early steps, fine steps near the clean end.
    Clean,
    /// The mirror image `1 − shift(1 − u)`: fine steps near the noise end.
    Noise,
}

impl FromStr for ShiftOrientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ShiftOrientation::Clean),
            "noise" => Ok(ShiftOrientation::Noise),
            other => Err(Error::Config(format!(
                "unknown shift orientation {other:?} (clean, noise)"
            ))),
        }
    }
}

impl fmt::Display for ShiftOrientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftOrientation::Clean => "clean",
            ShiftOrientation::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub timeshift: f64,
    pub shift_orientation: ShiftOrientation,
    pub cfg_scale: f64,
    pub cfg_interval: (f64, f64),
    pub denom_clip: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Euler,
            steps: 50,
            timeshift: 1.0,
            shift_orientation: ShiftOrientation::Clean,
            cfg_scale: 1.0,
            cfg_interval: (0.1, 0.9),
            denom_clip: DEFAULT_DENOM_CLIP,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || (self.solver == Solver::Adams2 && self.steps < 2) {
            return bad(format!("{} needs more steps than {}", self.solver, self.steps));
        }
        if !(self.timeshift >= 1.0 && self.timeshift.is_finite()) {
            return bad(format!("timeshift must be >= 1, got {}", self.timeshift));
        }
        if !(self.cfg_scale >= 1.0 && self.cfg_scale.is_finite()) {
            return bad(format!("cfg_scale must be >= 1, got {}", self.cfg_scale));
        }
        let (lo, hi) = self.cfg_interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("cfg interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"));
        }
        if !(self.denom_clip > 0.0) {
            return bad(format!("denom_clip must be positive, got {}", self.denom_clip));
        }
        Ok(())
    }

    /// Whether the null-class branch is needed at time `t`.
    pub fn guidance_active(&self, t: f64) -> bool {
        self.cfg_scale > 1.0 && self.cfg_interval.0 <= t && t <= self.cfg_interval.1
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        let g = timeshift_grid(self.steps, self.timeshift)?;
        Ok(match self.shift_orientation {
            ShiftOrientation::Clean => g,
            ShiftOrientation::Noise => g.iter().rev().map(|t| 1.0 - t).collect(),
        })
    }
}

/// `t_i = s·u_i / (1 + (s−1)·u_i)` with `u_i = i/N`.
pub fn timeshift_grid(n: usize, s: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("timeshift grid needs at least one step".into()));
    }
    if !(s >= 1.0) {
        return Err(Error::Config(format!("timeshift must be >= 1, got {s}")));
    }
    Ok((0..=n)
        .map(|i| {
            if i == n {
                return 1.0;
            }
            let u = i as f64 / n as f64;
            s * u / (1.0 + (s - 1.0) * u)
        })
        .collect())
}

/// Classifier-free guidance in velocity space, active only inside the interval.
pub fn guided_velocity<S: Scalar>(
    v_cond: &Tensor<S>,
    v_uncond: &Tensor<S>,
    t: f64,
    cfg: &SamplerConfig,
) -> Result<Tensor<S>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::dim("guided_velocity", v_cond.shape(), v_uncond.shape()));
    }
    if !cfg.guidance_active(t) {
        return Ok(v_cond.clone());
    }
    let w = S::from_f64(cfg.cfg_scale);
    v_uncond.zip_map(v_cond, |u, c| u + w * (c - u))
}

/// A time-dependent vector field `dx/dt = v(x, t)`.
pub trait VelocityField<S: Scalar> {
    fn velocity(&mut self, x: &Tensor<S>, t: f64) -> Result<Tensor<S>>;
}

/// Wraps a closure as a field.
pub struct FnField<F>(pub F);

impl<S: Scalar, F: FnMut(&Tensor<S>, f64) -> Tensor<S>> VelocityField<S> for FnField<F> {
    fn velocity(&mut self, x: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        Ok((self.0)(x, t))
    }
}

/// Denoiser-induced field with guidance; counts forward passes.
pub struct ModelField<'a, S> {
    pub model: &'a Denoiser<S>,
    pub classes: &'a [usize],
    pub cfg: &'a SamplerConfig,
    pub evaluations: usize,
}

impl<'a, S: Scalar> ModelField<'a, S> {
    pub fn new(model: &'a Denoiser<S>, classes: &'a [usize], cfg: &'a SamplerConfig) -> Self {
        Self {
            model,
            classes,
            cfg,
            evaluations: 0,
        }
    }
}

impl<S: Scalar> VelocityField<S> for ModelField<'_, S> {
    fn velocity(&mut self, x: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        let (v, evals) = velocity_at(self.model, x, t, self.classes, self.cfg)?;
        self.evaluations += evals;
        Ok(v)
    }
}

/// Guided velocity of the model at `(x, t)` and the number of forward passes used.
pub fn velocity_at<S: Scalar>(
    model: &Denoiser<S>,
    x: &Tensor<S>,
    t: f64,
    classes: &[usize],
    cfg: &SamplerConfig,
) -> Result<(Tensor<S>, usize)> {
    let ts = vec![t; classes.len()];
    let x_cond = model.predict(x, &ts, classes)?;
    let v_cond = x_to_v(&x_cond, x, &ts, cfg.denom_clip)?;
    if !cfg.guidance_active(t) {
        return Ok((v_cond, 1));
    }
    let null = vec![model.config().null_class(); classes.len()];
    let x_uncond = model.predict(x, &ts, &null)?;
    let v_uncond = x_to_v(&x_uncond, x, &ts, cfg.denom_clip)?;
    Ok((guided_velocity(&v_cond, &v_uncond, t, cfg)?, 2))
}

pub fn euler_step<S: Scalar>(x: &Tensor<S>, v: &Tensor<S>, h: f64) -> Result<Tensor<S>> {
    let h = S::from_f64(h);
    x.zip_map(v, |x, v| x + h * v)
}

/// One Heun step from `t` to `t_next`. With `predictor_only` the corrector
/// evaluation is skipped and the step reduces to Euler.
pub fn heun_step<S: Scalar, F: VelocityField<S>>(
    field: &mut F,
    x: &Tensor<S>,
    t: f64,
    t_next: f64,
    predictor_only: bool,
) -> Result<Tensor<S>> {
    let h = t_next - t;
    let v = field.velocity(x, t)?;
    let pred = euler_step(x, &v, h)?;
    if predictor_only {
        return Ok(pred);
    }
    let v_next = field.velocity(&pred, t_next)?;
    let half = S::from_f64(h / 2.0);
    let mut out = x.clone();
    for ((o, a), b) in out.data_mut().iter_mut().zip(v.data()).zip(v_next.data()) {
        *o += half * (*a + *b);
    }
    Ok(out)
}

/// Variable-step two-step Adams–Bashforth.
pub fn adams2_step<S: Scalar>(
    x: &Tensor<S>,
    v_n: &Tensor<S>,
    v_prev: &Tensor<S>,
    h_n: f64,
    h_prev: f64,
) -> Result<Tensor<S>> {
    if !(h_prev > 0.0) {
        return Err(Error::Contract(format!(
            "adams2 needs a positive previous step, got {h_prev}"
        )));
    }
    if v_n.shape() != v_prev.shape() || x.shape() != v_n.shape() {
        return Err(Error::dim("adams2_step", v_n.shape(), v_prev.shape()));
    }
    let r = h_n / (2.0 * h_prev);
    let (a, b) = (S::from_f64(h_n * (1.0 + r)), S::from_f64(h_n * r));
    let mut out = x.clone();
    for ((o, vn), vp) in out.data_mut().iter_mut().zip(v_n.data()).zip(v_prev.data()) {
        *o += a * *vn - b * *vp;
    }
    Ok(out)
}

/// Integrate `field` along `grid` (ascending times) from `x0`.
pub fn integrate<S: Scalar, F: VelocityField<S>>(
    field: &mut F,
    x0: Tensor<S>,
    grid: &[f64],
    solver: Solver,
) -> Result<Tensor<S>> {
    if grid.len() < 2 {
        return Err(Error::Contract("integration grid needs at least two points".into()));
    }
    let n = grid.len() - 1;
    let mut x = x0;
    let mut prev: Option<(Tensor<S>, f64)> = None;
    for i in 0..n {
        let (t, t_next) = (grid[i], grid[i + 1]);
        let h = t_next - t;
        x = match solver {
            Solver::Euler => {
                let v = field.velocity(&x, t)?;
                euler_step(&x, &v, h)?
            }
            Solver::Heun => heun_step(field, &x, t, t_next, i + 1 == n)?,
            Solver::Adams2 => {
                let v = field.velocity(&x, t)?;
                let next = match &prev {
                    None => euler_step(&x, &v, h)?,
                    Some((v_prev, h_prev)) => adams2_step(&x, &v, v_prev, h, *h_prev)?,
                };
                prev = Some((v, h));
                next
            }
        };
    }
    Ok(x)
}

/// Images drawn in one forward batch during [`sample`]. Results do not depend on it.
const SAMPLE_CHUNK: usize = 128;

/// Starting noise for image `index` of a sampling run.
pub fn initial_noise<S: Scalar>(seed: u64, index: u64, shape: &[usize]) -> Tensor<S> {
    let mut rng = Stream::new(seed, Purpose::SampleNoise, 0, index);
    Tensor::from_fn(shape, |_| S::from_f64(rng.normal()))
}

/// Outcome of [`sample`].
#[derive(Debug, Clone)]
pub struct Samples<S> {
    /// `[n, C, H, W]`, clamped to `[−1, 1]`.
    pub images: Tensor<S>,
    /// Total denoiser forward passes over all chunks.
    pub evaluations: usize,
}

/// Generate one image per entry of `classes`, starting from per-image seeded noise.
pub fn sample<S: Scalar>(model: &Denoiser<S>, classes: &[usize], cfg: &SamplerConfig, seed: u64) -> Result<Samples<S>> {
    sample_threaded(model, classes, cfg, seed, 1)
}

/// [`sample`] spread over `threads` workers; the output is identical for any thread count.
pub fn sample_threaded<S: Scalar>(
    model: &Denoiser<S>,
    classes: &[usize],
    cfg: &SamplerConfig,
    seed: u64,
    threads: usize,
) -> Result<Samples<S>> {
    cfg.validate()?;
    let mc = model.config();
    let img_shape = [mc.channels, mc.image_size, mc.image_size];
    let grid = cfg.grid()?;
    let chunks: Vec<&[usize]> = classes.chunks(SAMPLE_CHUNK).collect();
    let run_chunk = |ci: usize| -> Result<(Vec<S>, usize)> {
        let chunk = chunks[ci];
        let base = (ci * SAMPLE_CHUNK) as u64;
        let per = img_shape.iter().product::<usize>();
        let mut x0 = Vec::with_capacity(chunk.len() * per);
        for i in 0..chunk.len() {
            x0.extend_from_slice(initial_noise::<S>(seed, base + i as u64, &img_shape).data());
        }
        let x0 = Tensor::new(&[chunk.len(), img_shape[0], img_shape[1], img_shape[2]], x0)?;
        let mut field = ModelField::new(model, chunk, cfg);
        let x = integrate(&mut field, x0, &grid, cfg.solver)?;
        let clamped = x.data().iter().map(|&v| v.max(-S::one()).min(S::one())).collect();
        Ok((clamped, field.evaluations))
    };
    let workers = threads.clamp(1, chunks.len().max(1));
    let mut results: Vec<Option<Result<(Vec<S>, usize)>>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (ci, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_chunk(ci));
        }
    } else {
        let run_chunk = &run_chunk;
        let n_chunks = chunks.len();
        let done: Vec<Vec<(usize, Result<(Vec<S>, usize)>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..n_chunks)
                            .step_by(workers)
                            .map(|ci| (ci, run_chunk(ci)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampling worker panicked"))
                .collect()
        });
        for (ci, r) in done.into_iter().flatten() {
            results[ci] = Some(r);
        }
    }
    let mut data = Vec::with_capacity(classes.len() * img_shape.iter().product::<usize>());
    let mut evaluations = 0;
    for r in results {
        let (d, e) = r.expect("every chunk ran")?;
        data.extend(d);
        evaluations += e;
    }
    Ok(Samples {
        images: Tensor::new(&[classes.len(), img_shape[0], img_shape[1], img_shape[2]], data)?,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    fn decay() -> FnField<impl FnMut(&Tensor<f64>, f64) -> Tensor<f64>> {
        FnField(|x: &Tensor<f64>, _t: f64| x.map(|v| -v))
    }

    fn solve(solver: Solver, n: usize) -> f64 {
        let grid = timeshift_grid(n, 1.0).unwrap();
        integrate(&mut decay(), scalar(1.0), &grid, solver).unwrap().item()
    }

    fn order(solver: Solver, n: usize) -> f64 {
        let reference = solve(Solver::Heun, 100_000);
        assert!((reference - (-1f64).exp()).abs() < 1e-9);
        let e1 = (solve(solver, n) - reference).abs();
        let e2 = (solve(solver, 2 * n) - reference).abs();
        (e1 / e2).log2()
    }

    #[test]
    fn timeshift_examples() {
        let g = timeshift_grid(4, 1.0).unwrap();
        assert_eq!(g, [0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = timeshift_grid(2, 2.0).unwrap();
        assert!((g[1] - 2.0 / 3.0).abs() < 1e-12);
        for (n, s) in [(1, 3.0), (7, 1.5), (25, 3.0)] {
            let g = timeshift_grid(n, s).unwrap();
            assert_eq!((g[0], g[n]), (0.0, 1.0));
            assert!(g.windows(2).all(|w| w[1] > w[0]));
        }
        assert!(matches!(timeshift_grid(4, 0.5), Err(Error::Config(_))));
        let cfg = SamplerConfig {
            steps: 4,
            timeshift: 2.0,
            shift_orientation: ShiftOrientation::Noise,
            ..Default::default()
        };
        let g = cfg.grid().unwrap();
        assert_eq!((g[0], g[4]), (0.0, 1.0));
        assert!(g[1] < 0.25);
    }

    #[test]
    fn guidance_examples() {
        let c = scalar(2.0);
        let u = scalar(1.0);
        let mut cfg = SamplerConfig::default();
        assert_eq!(guided_velocity(&c, &u, 0.5, &cfg).unwrap(), c);
        cfg.cfg_scale = 2.25;
        assert_eq!(guided_velocity(&c, &u, 0.05, &cfg).unwrap(), c);
        assert_eq!(guided_velocity(&c, &u, 0.95, &cfg).unwrap(), c);
        assert_eq!(guided_velocity(&c, &u, 0.5, &cfg).unwrap().item(), 3.25);
        assert!(cfg.guidance_active(0.1) && cfg.guidance_active(0.9));
    }

    #[test]
    fn step_examples() {
        let x = scalar(0.3);
        assert_eq!(euler_step(&x, &scalar(0.0), 0.1).unwrap(), x);
        let mut constant = FnField(|x: &Tensor<f64>, _| x.map(|_| 2.0));
        let exact = integrate(&mut constant, scalar(1.0), &[0.0, 0.5], Solver::Euler).unwrap();
        assert_eq!(exact.item(), 2.0);
        let heun = heun_step(&mut constant, &scalar(1.0), 0.0, 0.5, false).unwrap();
        assert_eq!(heun, exact);

        let ab = adams2_step(&x, &scalar(1.0), &scalar(3.0), 0.2, 0.2).unwrap();
        assert!((ab.item() - (0.3 + 0.2 * (1.5 - 1.5))).abs() < 1e-15);
        let ab = adams2_step(&x, &scalar(2.0), &scalar(2.0), 0.1, 0.3).unwrap();
        assert!((ab.item() - 0.5).abs() < 1e-15);
        assert!(matches!(
            adams2_step(&x, &scalar(1.0), &scalar(1.0), 0.1, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn euler_is_first_order() {
        let reference = solve(Solver::Heun, 100_000);
        let e100 = (solve(Solver::Euler, 100) - reference).abs();
        let e200 = (solve(Solver::Euler, 200) - reference).abs();
        let ratio = e100 / e200;
        assert!((1.7..=2.3).contains(&ratio), "{ratio}");
        assert!((order(Solver::Euler, 100) - 1.0).abs() < 0.4);
    }

    #[test]
    fn heun_and_adams_are_second_order() {
        for solver in [Solver::Heun, Solver::Adams2] {
            let p = order(solver, 50);
            assert!((p - 2.0).abs() < 0.4, "{solver}: {p}");
            let ratio = 2f64.powf(p);
            assert!((3.2..=4.8).contains(&ratio), "{solver}: {ratio}");
        }
    }

    #[test]
    fn evaluation_counts() {
        for solver in [Solver::Euler, Solver::Heun, Solver::Adams2] {
            let mut count = 0;
            let mut field = FnField(|x: &Tensor<f64>, _| {
                count += 1;
                x.clone()
            });
            integrate(&mut field, scalar(1.0), &timeshift_grid(10, 1.0).unwrap(), solver).unwrap();
            assert_eq!(count, solver.evaluations(10), "{solver}");
        }
    }

    fn toward(target: Tensor<f64>, clip: f64) -> FnField<impl FnMut(&Tensor<f64>, f64) -> Tensor<f64>> {
        FnField(move |x: &Tensor<f64>, t: f64| x_to_v(&target, x, &[t], clip).unwrap())
    }

    #[test]
    fn constant_prediction_reaches_target() {
        let mut rng = Stream::new(1, Purpose::Diagnostic, 0, 0);
        let target = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.uniform_range(-1.0, 1.0));
        let noise = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.normal());
        let grid = timeshift_grid(100, 1.0).unwrap();

        // With the clip no larger than the step, the last step lands on the target.
        let out = integrate(&mut toward(target.clone(), 0.01), noise.clone(), &grid, Solver::Euler).unwrap();
        assert!(out.max_abs_diff(&target) < 0.01);

        // With the default clip the last five steps contract the gap by 0.8 each
        // from 0.04·(target − noise): residual 0.016384·(target − noise).
        let out = integrate(&mut toward(target.clone(), 0.05), noise.clone(), &grid, Solver::Euler).unwrap();
        for ((o, x), e) in out.data().iter().zip(target.data()).zip(noise.data()) {
            assert!((x - o - 0.016384 * (x - e)).abs() < 1e-9);
        }
    }

    #[test]
    fn parses_solver_names() {
        assert_eq!("heun".parse::<Solver>().unwrap(), Solver::Heun);
        assert!(matches!("rk4".parse::<Solver>(), Err(Error::Config(_))));
    }
}
