//! Frozen feature extractors, perceptual losses, noise gating and the
//! combined training objective.
//!
//! Two seeded, never-trained networks stand in for pretrained encoders:
//! [`LocalFeatureNet`] is a strided conv pyramid whose channel-normalized
//! activations feed the multi-level feature loss, and [`GlobalFeatureNet`]
//! is a patch-token encoder whose per-patch features feed the cosine loss
//! and the representation-alignment target.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::checkpoint::CheckpointBlob;
use crate::denoiser::patchify_var;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, DiffusionBatch};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const NORM_EPS_SQ: f64 = 1e-24;
const COS_EPS: f64 = 1e-8;

fn gaussian(shape: &[usize], std: f64, rng: &mut Stream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| std * rng.normal())
}

fn hash_tensor(h: &mut DefaultHasher, t: &Tensor<f64>) {
    t.shape().hash(h);
    t.data().iter().for_each(|v| v.to_bits().hash(h));
}

// ---- local conv pyramid -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    kernel: Tensor<f64>,
    bias: Tensor<f64>,
}

/// Strided 3×3 conv pyramid with SiLU activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureNet {
    in_channels: usize,
    stages: Vec<ConvStage>,
}

impl LocalFeatureNet {
    pub fn new(seed: u64, in_channels: usize, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || in_channels == 0 {
            return Err(Error::Config(format!("invalid local feature widths {widths:?}")));
        }
        let mut rng = Stream::new(seed, Purpose::ExtractorInit, 0, 0);
        let mut c_in = in_channels;
        let stages = widths
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (9 * c_in) as f64).sqrt();
                let stage = ConvStage {
                    kernel: gaussian(&[c_out, c_in, 3, 3], std, &mut rng),
                    bias: gaussian(&[c_out, 1, 1], 0.1, &mut rng),
                };
                c_in = c_out;
                stage
            })
            .collect();
        Ok(Self { in_channels, stages })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.kernel.shape()[0]).collect()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::dim("local_features", shape, &[0, self.in_channels, 0, 0]));
        };
        if c != self.in_channels {
            return Err(Error::dim("local_features", shape, &[0, self.in_channels, h, w]));
        }
        let div = 1usize << self.stages.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by {div} for a {}-stage pyramid",
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Raw activations of every stage, `[B, C_l, H/2^l, W/2^l]`.
    pub fn features<S: Scalar>(&self, g: &mut Graph<S>, img: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(img))?;
        let mut x = img;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let k = g.constant(s.kernel.cast());
            let b = g.constant(s.bias.cast());
            let y = g.conv2d(x, k, 2)?;
            let y = g.add(y, b)?;
            x = g.silu(y);
            out.push(x);
        }
        Ok(out)
    }

    /// Stage activations with every spatial channel vector scaled to unit length.
    pub fn normalized_features<S: Scalar>(&self, g: &mut Graph<S>, img: Var) -> Result<Vec<Var>> {
        self.features(g, img)?
            .into_iter()
            .map(|f| unit_channels(g, f))
            .collect()
    }

    fn hash_into(&self, h: &mut DefaultHasher) {
        for s in &self.stages {
            hash_tensor(h, &s.kernel);
            hash_tensor(h, &s.bias);
        }
    }

    fn to_blob(&self) -> CheckpointBlob {
        let mut blob = CheckpointBlob::new();
        for (i, s) in self.stages.iter().enumerate() {
            blob.insert_tensor(format!("stage{i}.kernel"), &s.kernel);
            blob.insert_tensor(format!("stage{i}.bias"), &s.bias);
        }
        blob
    }

    fn load_blob(&mut self, blob: &CheckpointBlob) -> Result<()> {
        let mut stages = self.stages.clone();
        for (i, s) in stages.iter_mut().enumerate() {
            s.kernel = load_same_shape(blob, &format!("stage{i}.kernel"), &s.kernel)?;
            s.bias = load_same_shape(blob, &format!("stage{i}.bias"), &s.bias)?;
        }
        self.stages = stages;
        Ok(())
    }
}

fn load_same_shape(blob: &CheckpointBlob, name: &str, like: &Tensor<f64>) -> Result<Tensor<f64>> {
    let t = blob.tensor::<f64>(name)?;
    if t.shape() != like.shape() {
        return Err(Error::dim("load extractor", t.shape(), like.shape()));
    }
    Ok(t)
}

/// `f / sqrt(Σ_c f² + ε)` over axis 1 of `[B, C, H, W]`.
pub fn unit_channels<S: Scalar>(g: &mut Graph<S>, f: Var) -> Result<Var> {
    let sq = g.square(f);
    let s = g.sum(sq, &[1], true)?;
    let s = g.affine(s, 1.0, NORM_EPS_SQ);
    let n = g.sqrt(s);
    g.div(f, n)
}

// ---- global patch encoder ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub stages: usize,
    /// When false the net is patch-local: each output row depends only on its own patch.
    pub token_mixing: bool,
}

impl Default for GlobalNetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 4,
            dim: 32,
            stages: 2,
            token_mixing: true,
        }
    }
}

impl GlobalNetConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MixStage {
    /// `[P, P]`, applied as `h ← h + gelu(M·h)` along the token axis.
    mix_t: Tensor<f64>,
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
}

/// Patch embedding followed by token-mixing residual stages.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeatureNet {
    cfg: GlobalNetConfig,
    embed_w: Tensor<f64>,
    embed_b: Tensor<f64>,
    stages: Vec<MixStage>,
}

impl GlobalFeatureNet {
    pub fn new(seed: u64, cfg: GlobalNetConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.image_size % cfg.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                cfg.image_size, cfg.patch
            )));
        }
        if cfg.dim == 0 || cfg.channels == 0 {
            return Err(Error::Config("global feature net needs dim, channels >= 1".into()));
        }
        let mut rng = Stream::new(seed, Purpose::ExtractorInit, 1, 0);
        let k = cfg.patch * cfg.patch * cfg.channels;
        let (d, p) = (cfg.dim, cfg.num_patches());
        let embed_w = gaussian(&[k, d], (1.0 / k as f64).sqrt(), &mut rng);
        let embed_b = gaussian(&[d], 0.1, &mut rng);
        let stages = (0..cfg.stages)
            .map(|_| MixStage {
                mix_t: gaussian(&[p, p], (1.0 / p as f64).sqrt(), &mut rng),
                w1: gaussian(&[d, 2 * d], (1.0 / d as f64).sqrt(), &mut rng),
                b1: gaussian(&[2 * d], 0.1, &mut rng),
                w2: gaussian(&[2 * d, d], (0.5 / d as f64).sqrt(), &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            embed_w,
            embed_b,
            stages,
        })
    }

    pub fn config(&self) -> &GlobalNetConfig {
        &self.cfg
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.num_patches()
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Index of the deepest available layer (0 is the patch embedding).
    pub fn last_layer(&self) -> usize {
        self.stages.len()
    }

    /// Per-patch features `[B, P, D]` after `layer` mixing stages.
    pub fn features<S: Scalar>(&self, g: &mut Graph<S>, img: Var, layer: usize) -> Result<Var> {
        if layer > self.stages.len() {
            return Err(Error::Config(format!(
                "global feature layer {layer} out of range 0..={}",
                self.stages.len()
            )));
        }
        let c = &self.cfg;
        match *g.shape(img) {
            [_, ch, h, w] if ch == c.channels && h == c.image_size && w == c.image_size => {}
            [_, _, h, w] if h % c.patch != 0 || w % c.patch != 0 => {
                return Err(Error::Config(format!(
                    "image {h}x{w} is not divisible by patch size {}",
                    c.patch
                )));
            }
            _ => {
                return Err(Error::dim(
                    "global_features",
                    g.shape(img),
                    &[0, c.channels, c.image_size, c.image_size],
                ))
            }
        }
        let tokens = patchify_var(g, img, c.patch)?;
        let w = g.constant(self.embed_w.cast());
        let b = g.constant(self.embed_b.cast());
        let h = g.matmul(tokens, w)?;
        let mut h = g.add(h, b)?;
        for s in &self.stages[..layer] {
            if c.token_mixing {
                let m = g.constant(s.mix_t.cast());
                let ht = g.permute(h, &[0, 2, 1])?;
                let mixed = g.matmul(ht, m)?;
                let mixed = g.gelu_tanh(mixed);
                let mixed = g.permute(mixed, &[0, 2, 1])?;
                h = g.add(h, mixed)?;
            }
            let w1 = g.constant(s.w1.cast());
            let b1 = g.constant(s.b1.cast());
            let w2 = g.constant(s.w2.cast());
            let u = g.matmul(h, w1)?;
            let u = g.add(u, b1)?;
            let u = g.gelu_tanh(u);
            let u = g.matmul(u, w2)?;
            h = g.add(h, u)?;
        }
        Ok(h)
    }

    /// Features of a batch without recording gradients, `[B, P, D]`.
    pub fn eval_features<S: Scalar>(&self, img: &Tensor<S>, layer: usize) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let f = self.features(&mut g, x, layer)?;
        Ok(g.value(f).clone())
    }

    fn hash_into(&self, h: &mut DefaultHasher) {
        hash_tensor(h, &self.embed_w);
        hash_tensor(h, &self.embed_b);
        for s in &self.stages {
            for t in [&s.mix_t, &s.w1, &s.b1, &s.w2] {
                hash_tensor(h, t);
            }
        }
    }

    fn to_blob(&self) -> CheckpointBlob {
        let mut blob = CheckpointBlob::new();
        blob.insert_tensor("embed.w", &self.embed_w);
        blob.insert_tensor("embed.b", &self.embed_b);
        for (i, s) in self.stages.iter().enumerate() {
            blob.insert_tensor(format!("stage{i}.mix"), &s.mix_t);
            blob.insert_tensor(format!("stage{i}.w1"), &s.w1);
            blob.insert_tensor(format!("stage{i}.b1"), &s.b1);
            blob.insert_tensor(format!("stage{i}.w2"), &s.w2);
        }
        blob
    }

    fn load_blob(&mut self, blob: &CheckpointBlob) -> Result<()> {
        let embed_w = load_same_shape(blob, "embed.w", &self.embed_w)?;
        let embed_b = load_same_shape(blob, "embed.b", &self.embed_b)?;
        let mut stages = self.stages.clone();
        for (i, s) in stages.iter_mut().enumerate() {
            s.mix_t = load_same_shape(blob, &format!("stage{i}.mix"), &s.mix_t)?;
            s.w1 = load_same_shape(blob, &format!("stage{i}.w1"), &s.w1)?;
            s.b1 = load_same_shape(blob, &format!("stage{i}.b1"), &s.b1)?;
            s.w2 = load_same_shape(blob, &format!("stage{i}.w2"), &s.w2)?;
        }
        self.embed_w = embed_w;
        self.embed_b = embed_b;
        self.stages = stages;
        Ok(())
    }
}

// ---- extractor pair ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub local_widths: Vec<usize>,
    pub global: GlobalNetConfig,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            local_widths: vec![8, 16, 32],
            global: GlobalNetConfig::default(),
        }
    }
}

/// The frozen networks used by the training losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractors {
    pub local: LocalFeatureNet,
    pub global: GlobalFeatureNet,
}

impl Extractors {
    pub fn new(seed: u64, cfg: &ExtractorConfig) -> Result<Self> {
        Ok(Self {
            local: LocalFeatureNet::new(seed, cfg.global.channels, &cfg.local_widths)?,
            global: GlobalFeatureNet::new(seed, cfg.global)?,
        })
    }

    /// Hash of every frozen weight bit.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.local.hash_into(&mut h);
        self.global.hash_into(&mut h);
        h.finish()
    }

    pub fn to_blob(&self) -> CheckpointBlob {
        let mut blob = CheckpointBlob::new();
        blob.extend_prefixed("local.", self.local.to_blob());
        blob.extend_prefixed("global.", self.global.to_blob());
        blob
    }

    /// Replace the weights with those in `blob`. Shapes must match; on error nothing changes.
    pub fn load_blob(&mut self, blob: &CheckpointBlob) -> Result<()> {
        let mut next = self.clone();
        next.local.load_blob(&blob.with_prefix("local."))?;
        next.global.load_blob(&blob.with_prefix("global."))?;
        *self = next;
        Ok(())
    }
}

// ---- losses -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gate_threshold: f64,
    pub repa_weight: f64,
    /// Per-stage channel weights; `None` means uniform `1/C_l`.
    pub layer_weights: Option<Vec<Vec<f64>>>,
    /// Global feature layer for the patch cosine loss; `None` means the last.
    pub global_layer: Option<usize>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.01,
            gate_threshold: 0.3,
            repa_weight: 0.5,
            layer_weights: None,
            global_layer: None,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("repa_weight", self.repa_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::Config(format!(
                "gate_threshold must lie in [0, 1], got {}",
                self.gate_threshold
            )));
        }
        if let Some(ws) = &self.layer_weights {
            if ws.iter().flatten().any(|w| !(*w >= 0.0)) {
                return Err(Error::Config("layer weights must be nonnegative".into()));
            }
        }
        Ok(())
    }

    fn weights_for(&self, widths: &[usize]) -> Result<Vec<Vec<f64>>> {
        match &self.layer_weights {
            None => Ok(widths.iter().map(|&c| vec![1.0 / c as f64; c]).collect()),
            Some(ws) => {
                let got: Vec<usize> = ws.iter().map(Vec::len).collect();
                if got != widths {
                    return Err(Error::dim("layer_weights", &got, widths));
                }
                Ok(ws.clone())
            }
        }
    }
}

/// Perceptual losses apply to a sample only in the low-noise regime `t ≥ τ`.
pub fn gate(t: f64, tau: f64) -> bool {
    t >= tau
}

/// Per-sample `Σ_l mean_spatial ‖w_l ⊙ (a_l − b_l)‖²` over already normalized stage maps.
pub fn feature_distance<S: Scalar>(g: &mut Graph<S>, a: &[Var], b: &[Var], weights: &[Vec<f64>]) -> Result<Var> {
    if a.len() != b.len() || a.len() != weights.len() {
        return Err(Error::dim("feature_distance", &[a.len(), b.len()], &[weights.len()]));
    }
    let mut total: Option<Var> = None;
    for ((&fa, &fb), w) in a.iter().zip(b).zip(weights) {
        let c = g.shape(fa).get(1).copied().unwrap_or(0);
        if w.len() != c {
            return Err(Error::dim("feature_distance", g.shape(fa), &[0, w.len()]));
        }
        let wt = g.constant(Tensor::from_f64(&[c, 1, 1], w)?);
        let d = g.sub(fa, fb)?;
        let d = g.mul(d, wt)?;
        let d = g.square(d);
        let d = g.sum(d, &[1], false)?;
        let d = g.mean(d, &[1, 2], false)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Contract("feature_distance needs at least one stage".into()))
}

/// Per-sample multi-level feature loss, `[B]`. `b` is treated as a detached target.
pub fn lpips_per_sample<S: Scalar>(
    g: &mut Graph<S>,
    net: &LocalFeatureNet,
    a: Var,
    b: &Tensor<S>,
    cfg: &PerceptualConfig,
) -> Result<Var> {
    if g.shape(a) != b.shape() {
        return Err(Error::dim("lpips_loss", g.shape(a), b.shape()));
    }
    let weights = cfg.weights_for(&net.widths())?;
    let fa = net.normalized_features(g, a)?;
    let bv = g.constant(b.clone());
    let fb = net.normalized_features(g, bv)?;
    feature_distance(g, &fa, &fb, &weights)
}

/// Batch-mean multi-level feature loss.
pub fn lpips_loss<S: Scalar>(
    g: &mut Graph<S>,
    net: &LocalFeatureNet,
    a: Var,
    b: &Tensor<S>,
    cfg: &PerceptualConfig,
) -> Result<Var> {
    let per = lpips_per_sample(g, net, a, b, cfg)?;
    Ok(g.mean_all(per))
}

/// Per-sample mean over rows of `1 − cos(a_p, b_p)` for `[B, P, D]` inputs, `[B]`.
pub fn cosine_dissimilarity<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 3 {
        return Err(Error::dim("cosine_dissimilarity", g.shape(a), g.shape(b)));
    }
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab, &[2], false)?;
    let na = row_norm(g, a)?;
    let nb = row_norm(g, b)?;
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    let dis = g.affine(cos, -1.0, 1.0);
    g.mean(dis, &[1], false)
}

fn row_norm<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let s = g.sum(sq, &[2], false)?;
    let s = g.affine(s, 1.0, NORM_EPS_SQ);
    let n = g.sqrt(s);
    Ok(g.affine(n, 1.0, COS_EPS))
}

fn global_layer(net: &GlobalFeatureNet, cfg: &PerceptualConfig) -> usize {
    cfg.global_layer.unwrap_or_else(|| net.last_layer())
}

/// Per-sample patch cosine loss, `[B]`. `b` is a detached target.
pub fn pdino_per_sample<S: Scalar>(
    g: &mut Graph<S>,
    net: &GlobalFeatureNet,
    a: Var,
    b: &Tensor<S>,
    cfg: &PerceptualConfig,
) -> Result<Var> {
    if g.shape(a) != b.shape() {
        return Err(Error::dim("pdino_loss", g.shape(a), b.shape()));
    }
    let layer = global_layer(net, cfg);
    let fa = net.features(g, a, layer)?;
    let bv = g.constant(b.clone());
    let fb = net.features(g, bv, layer)?;
    cosine_dissimilarity(g, fa, fb)
}

/// Batch-mean patch cosine loss, in `[0, 2]`.
pub fn pdino_loss<S: Scalar>(
    g: &mut Graph<S>,
    net: &GlobalFeatureNet,
    a: Var,
    b: &Tensor<S>,
    cfg: &PerceptualConfig,
) -> Result<Var> {
    let per = pdino_per_sample(g, net, a, b, cfg)?;
    Ok(g.mean_all(per))
}

/// Alignment of projected denoiser tokens `[B, P, d]` with frozen clean-image
/// features `[B, P, D]`; batch mean of per-patch `1 − cos`.
pub fn repa_loss<S: Scalar>(g: &mut Graph<S>, hidden: Var, proj: Var, target: &Tensor<S>) -> Result<Var> {
    let (hs, ts) = (g.shape(hidden).to_vec(), target.shape());
    if hs.len() != 3 || ts.len() != 3 || hs[0] != ts[0] || hs[1] != ts[1] {
        return Err(Error::dim("repa_loss", &hs, ts));
    }
    let z = g.matmul(hidden, proj)?;
    let t = g.constant(target.clone());
    let per = cosine_dissimilarity(g, z, t)?;
    Ok(g.mean_all(per))
}

/// Per-term scalars of one objective evaluation, each recorded before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub fm: f64,
    /// Batch mean of `gate · L_LPIPS` (gated-off samples count as zero).
    pub lpips: f64,
    /// Batch mean of `gate · L_PDINO`.
    pub pdino: f64,
    pub repa: f64,
    pub total: f64,
    pub gate_fraction: f64,
}

impl LossBreakdown {
    /// `fm + λ₁·lpips + λ₂·pdino + w_repa·repa`.
    pub fn combine(fm: f64, lpips: f64, pdino: f64, repa: f64, cfg: &PerceptualConfig) -> f64 {
        fm + cfg.lambda1 * lpips + cfg.lambda2 * pdino + cfg.repa_weight * repa
    }

    pub fn recombined(&self, cfg: &PerceptualConfig) -> f64 {
        Self::combine(self.fm, self.lpips, self.pdino, self.repa, cfg)
    }

    pub fn is_finite(&self) -> bool {
        [self.fm, self.lpips, self.pdino, self.repa, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={} fm={} lpips={} pdino={} repa={} gate_fraction={}",
            self.total, self.fm, self.lpips, self.pdino, self.repa, self.gate_fraction
        )
    }
}

/// Denoiser tokens and the learned projection used by the alignment term.
#[derive(Debug, Clone, Copy)]
pub struct RepaInputs {
    pub hidden: Var,
    pub proj: Var,
}

/// Combined objective for one batch. Perceptual terms see only gated-on
/// samples, are summed and divided by the full batch size; when no sample
/// is gated on they are not built at all.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    x_pred: Var,
    repa: Option<RepaInputs>,
    batch: &DiffusionBatch<S>,
    ext: &Extractors,
    cfg: &PerceptualConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let n = batch.batch_size();
    let fm = fm_loss(g, x_pred, batch)?;
    let mut out = LossBreakdown {
        fm: g.value(fm).item().as_f64(),
        ..Default::default()
    };
    let mut total = fm;

    let on: Vec<usize> = (0..n).filter(|&i| gate(batch.t[i], cfg.gate_threshold)).collect();
    out.gate_fraction = on.len() as f64 / n as f64;
    let active = !on.is_empty() && (cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0);
    if active {
        let pred = if on.len() == n {
            x_pred
        } else {
            g.select_rows(x_pred, &on)?
        };
        let target = if on.len() == n {
            batch.x.clone()
        } else {
            batch.x.select_rows(&on)?
        };
        let inv_n = 1.0 / n as f64;
        if cfg.lambda1 > 0.0 {
            let per = lpips_per_sample(g, &ext.local, pred, &target, cfg)?;
            let l = g.sum_all(per);
            let l = g.scale(l, inv_n);
            out.lpips = g.value(l).item().as_f64();
            let w = g.scale(l, cfg.lambda1);
            total = g.add(total, w)?;
        }
        if cfg.lambda2 > 0.0 {
            let per = pdino_per_sample(g, &ext.global, pred, &target, cfg)?;
            let l = g.sum_all(per);
            let l = g.scale(l, inv_n);
            out.pdino = g.value(l).item().as_f64();
            let w = g.scale(l, cfg.lambda2);
            total = g.add(total, w)?;
        }
    }

    if let Some(r) = repa.filter(|_| cfg.repa_weight > 0.0) {
        let target = ext.global.eval_features(&batch.x, ext.global.last_layer())?;
        let l = repa_loss(g, r.hidden, r.proj, &target)?;
        out.repa = g.value(l).item().as_f64();
        let w = g.scale(l, cfg.repa_weight);
        total = g.add(total, w)?;
    }

    out.total = g.value(total).item().as_f64();
    Ok((total, out))
}
