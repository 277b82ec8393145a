//! Conditional x-prediction transformer.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::checkpoint::CheckpointBlob;
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};

fn patch_grid(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let &[b, c, h, w] = shape else {
        return Err(Error::dim("patchify", shape, &[0, 0, 0, 0]));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    Ok((b, c, h / p, w / p, p))
}

/// `[B, C, H, W]` → `[B, P, p·p·C]`, tokens in row-major grid order.
pub fn patchify<S: Scalar>(img: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (b, c, gh, gw, p) = patch_grid(img.shape(), p)?;
    img.clone()
        .reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape(&[b, gh * gw, p * p * c])
}

/// Inverse of [`patchify`] for an `h × w` image with `c` channels.
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let b = unpatch_batch(tokens.shape(), p, c, h, w)?;
    tokens
        .clone()
        .reshape(&[b, h / p, w / p, p, p, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape(&[b, c, h, w])
}

fn unpatch_batch(shape: &[usize], p: usize, c: usize, h: usize, w: usize) -> Result<usize> {
    patch_grid(&[1, c, h, w], p)?;
    match *shape {
        [b, n, k] if n == (h / p) * (w / p) && k == p * p * c => Ok(b),
        _ => Err(Error::dim("unpatchify", shape, &[(h / p) * (w / p), p * p * c])),
    }
}

/// Graph version of [`patchify`].
pub fn patchify_var<S: Scalar>(g: &mut Graph<S>, img: Var, p: usize) -> Result<Var> {
    let (b, c, gh, gw, p) = patch_grid(g.shape(img), p)?;
    let x = g.reshape(img, &[b, c, gh, p, gw, p])?;
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(x, &[b, gh * gw, p * p * c])
}

/// Graph version of [`unpatchify`].
pub fn unpatchify_var<S: Scalar>(g: &mut Graph<S>, tokens: Var, p: usize, c: usize, h: usize, w: usize) -> Result<Var> {
    let b = unpatch_batch(g.shape(tokens), p, c, h, w)?;
    let x = g.reshape(tokens, &[b, h / p, w / p, p, p, c])?;
    let x = g.permute(x, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(x, &[b, c, h, w])
}

// ---- configuration ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Block whose output feeds the alignment loss; `None` means `depth / 2`.
    pub repa_tap: Option<usize>,
    /// Output width of the alignment projection (the frozen global feature width).
    pub repa_dim: usize,
    pub class_drop_prob: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 4,
            width: 64,
            depth: 4,
            heads: 4,
            num_classes: 8,
            repa_tap: None,
            repa_dim: 32,
            class_drop_prob: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.head_dim() % 4 != 0 {
            return bad(format!(
                "head dim {} must be divisible by 4 for 2-D rotary embedding",
                self.head_dim()
            ));
        }
        if self.depth == 0 || self.repa_tap() >= self.depth {
            return bad(format!("repa tap {} must be < depth {}", self.repa_tap(), self.depth));
        }
        if self.num_classes == 0 || self.channels == 0 || self.repa_dim == 0 {
            return bad("num_classes, channels and repa_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return bad(format!("class_drop_prob {} outside [0, 1]", self.class_drop_prob));
        }
        Ok(())
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn repa_tap(&self) -> usize {
        self.repa_tap.unwrap_or(self.depth / 2)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// SwiGLU hidden width: `8·d/3` rounded up to a multiple of 8.
    pub fn ffn_dim(&self) -> usize {
        (8 * self.width).div_ceil(3).div_ceil(8) * 8
    }

    /// Name and shape of every trainable tensor, in lexicographic order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, k, f) = (self.width, self.token_dim(), self.ffn_dim());
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("class_embed".into(), vec![self.num_classes + 1, d]),
            ("final_norm.gain".into(), vec![d]),
            ("head.b".into(), vec![k]),
            ("head.w".into(), vec![d, k]),
            ("patch_embed.b".into(), vec![d]),
            ("patch_embed.w".into(), vec![k, d]),
            ("repa_proj".into(), vec![d, self.repa_dim]),
            ("time.b1".into(), vec![d]),
            ("time.b2".into(), vec![d]),
            ("time.w1".into(), vec![d, d]),
            ("time.w2".into(), vec![d, d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            v.extend([
                (p("attn.out"), vec![d, d]),
                (p("attn.qkv"), vec![d, 3 * d]),
                (p("attn_norm.gain"), vec![d]),
                (p("ffn.down"), vec![f, d]),
                (p("ffn.gate"), vec![d, f]),
                (p("ffn.up"), vec![d, f]),
                (p("ffn_norm.gain"), vec![d]),
            ]);
        }
        v.sort();
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

// ---- model --------------------------------------------------------------------

const INIT_STD: f64 = 0.02;
const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;
const TIME_MAX_FREQ: f64 = 10_000.0;

/// Trainable parameters keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    cfg: DenoiserConfig,
    params: BTreeMap<String, Tensor<S>>,
}

/// Graph handles of every parameter for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind `names[i]` to `vars[i]`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// `[B, C, H, W]` clean-image prediction.
    pub x_pred: Var,
    /// `[B, P, d]` tokens after the tap block.
    pub hidden: Var,
    /// Per-block attention probabilities `[B·heads, P, P]`.
    pub attention: Vec<Var>,
}

impl<S: Scalar> Denoiser<S> {
    /// Fresh model: normal(0, 0.02) weights, unit norm gains, zero biases and a zero output head.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = cfg
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let t = if name.ends_with("gain") {
                    Tensor::full(&shape, S::one())
                } else if name.starts_with("head.") || is_bias(&name) {
                    Tensor::zeros(&shape)
                } else {
                    let mut rng = Stream::new(seed, Purpose::ParamInit, 0, i as u64);
                    Tensor::from_fn(&shape, |_| S::from_f64(INIT_STD * rng.normal()))
                };
                (name, t)
            })
            .collect();
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    /// Replace one parameter tensor; shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", value.shape(), slot.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Mutable access for optimizers. Callers must keep every shape unchanged.
    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            cfg: self.cfg,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Order-sensitive hash of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (k, v) in &self.params {
            k.hash(&mut h);
            v.shape().hash(&mut h);
            v.data().iter().for_each(|x| x.as_f64().to_bits().hash(&mut h));
        }
        h.finish()
    }

    /// Put every parameter on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    pub fn to_blob(&self) -> CheckpointBlob {
        let mut blob = CheckpointBlob::new();
        for (k, v) in &self.params {
            blob.insert_tensor(k.clone(), v);
        }
        blob
    }

    /// Load every parameter from `blob`; nothing changes on error.
    pub fn load_blob(&mut self, blob: &CheckpointBlob) -> Result<()> {
        let mut next = self.params.clone();
        for (k, v) in next.iter_mut() {
            let t = blob.tensor::<S>(k)?;
            if t.shape() != v.shape() {
                return Err(Error::dim("load denoiser", t.shape(), v.shape()));
            }
            *v = t;
        }
        self.params = next;
        Ok(())
    }

    /// Conditioning vectors `[B, d]` for times `t` and classes `c` (`c == K` is the null class).
    pub fn time_class_embed(&self, g: &mut Graph<S>, p: &BoundParams, t: &[f64], c: &[usize]) -> Result<Var> {
        let (d, k) = (self.cfg.width, self.cfg.num_classes);
        if t.len() != c.len() {
            return Err(Error::dim("time_class_embed", &[t.len()], &[c.len()]));
        }
        if let Some(bad) = c.iter().find(|&&c| c > k) {
            return Err(Error::Contract(format!("class {bad} outside [0, {k}]")));
        }
        let b = t.len();
        let emb = Tensor::from_f64(&[b, d], &sinusoidal(t, d))?;
        let emb = g.constant(emb);
        let h = g.matmul(emb, p.get("time.w1"))?;
        let h = g.add(h, p.get("time.b1"))?;
        let h = g.silu(h);
        let h = g.matmul(h, p.get("time.w2"))?;
        let h = g.add(h, p.get("time.b2"))?;
        let mut onehot = vec![0.0; b * (k + 1)];
        for (i, &ci) in c.iter().enumerate() {
            onehot[i * (k + 1) + ci] = 1.0;
        }
        let onehot = g.constant(Tensor::from_f64(&[b, k + 1], &onehot)?);
        let cls = g.matmul(onehot, p.get("class_embed"))?;
        g.add(h, cls)
    }

    /// Apply 2-D rotary position embedding to `[N, P, d_h]` queries or keys.
    pub fn rope2d(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let p = self.cfg.num_tokens();
        match *g.shape(x) {
            [_, n, h] if n == p && h == dh => {}
            _ => return Err(Error::dim("rope2d", g.shape(x), &[0, p, dh])),
        }
        let (cos, sin, swap) = rope_tables(self.cfg.grid(), dh);
        let cos = g.constant(cos.cast());
        let sin = g.constant(sin.cast());
        let swap = g.constant(swap.cast());
        let a = g.mul(x, cos)?;
        let r = g.matmul(x, swap)?;
        let b = g.mul(r, sin)?;
        g.add(a, b)
    }

    /// Full forward pass on the tape.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        p: &BoundParams,
        x_t: Var,
        t: &[f64],
        c: &[usize],
    ) -> Result<DenoiserOutput> {
        let cfg = &self.cfg;
        let expect = [t.len(), cfg.channels, cfg.image_size, cfg.image_size];
        if g.shape(x_t) != expect {
            return Err(Error::dim("denoiser forward", g.shape(x_t), &expect));
        }
        let (b, n, d) = (t.len(), cfg.num_tokens(), cfg.width);
        let tokens = patchify_var(g, x_t, cfg.patch)?;
        let h = g.matmul(tokens, p.get("patch_embed.w"))?;
        let h = g.add(h, p.get("patch_embed.b"))?;
        let cond = self.time_class_embed(g, p, t, c)?;
        let cond = g.reshape(cond, &[b, 1, d])?;
        let mut h = g.add(h, cond)?;

        let mut hidden = None;
        let mut attention = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = |s: &str| format!("blocks.{i}.{s}");
            let a = rms_norm(g, h, p.get(&name("attn_norm.gain")))?;
            let (a, probs) = self.attention(g, a, p.get(&name("attn.qkv")), p.get(&name("attn.out")), b)?;
            attention.push(probs);
            h = g.add(h, a)?;
            let f = rms_norm(g, h, p.get(&name("ffn_norm.gain")))?;
            let gate = g.matmul(f, p.get(&name("ffn.gate")))?;
            let gate = g.silu(gate);
            let up = g.matmul(f, p.get(&name("ffn.up")))?;
            let f = g.mul(gate, up)?;
            let f = g.matmul(f, p.get(&name("ffn.down")))?;
            h = g.add(h, f)?;
            if i == cfg.repa_tap() {
                hidden = Some(h);
            }
        }
        let h = rms_norm(g, h, p.get("final_norm.gain"))?;
        let out = g.matmul(h, p.get("head.w"))?;
        let out = g.add(out, p.get("head.b"))?;
        debug_assert_eq!(g.shape(out), [b, n, cfg.token_dim()]);
        let x_pred = unpatchify_var(g, out, cfg.patch, cfg.channels, cfg.image_size, cfg.image_size)?;
        Ok(DenoiserOutput {
            x_pred,
            hidden: hidden.expect("tap index validated against depth"),
            attention,
        })
    }

    fn attention(&self, g: &mut Graph<S>, x: Var, w_qkv: Var, w_out: Var, b: usize) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let (n, d, nh, dh) = (cfg.num_tokens(), cfg.width, cfg.heads, cfg.head_dim());
        let qkv = g.matmul(x, w_qkv)?;
        let qkv = g.reshape(qkv, &[b, n, 3, nh, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let split = |i: usize, g: &mut Graph<S>| -> Result<Var> {
            let part = g.select_rows(qkv, &[i])?;
            g.reshape(part, &[b * nh, n, dh])
        };
        let q = split(0, g)?;
        let k = split(1, g)?;
        let v = split(2, g)?;
        let q = self.rope2d(g, q)?;
        let k = self.rope2d(g, k)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores, 2)?;
        let o = g.bmm(probs, v, false)?;
        let o = g.reshape(o, &[b, nh, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, d])?;
        Ok((g.matmul(o, w_out)?, probs))
    }

    /// Inference forward without gradients; returns the clean-image prediction.
    pub fn predict(&self, x_t: &Tensor<S>, t: &[f64], c: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let out = self.forward_graph(&mut g, &p, x, t, c)?;
        Ok(g.value(out.x_pred).clone())
    }

    /// Conditional and null-class predictions for the same inputs.
    pub fn predict_cfg_pair(&self, x_t: &Tensor<S>, t: &[f64], c: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let null = vec![self.cfg.null_class(); c.len()];
        Ok((self.predict(x_t, t, c)?, self.predict(x_t, t, &null)?))
    }
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|leaf| leaf.starts_with('b') && leaf[1..].chars().all(|c| c.is_ascii_digit()))
}

/// `x / sqrt(mean(x², last) + 1e-6) · gain`.
pub fn rms_norm<S: Scalar>(g: &mut Graph<S>, x: Var, gain: Var) -> Result<Var> {
    let n = rms_normalize(g, x)?;
    g.mul(n, gain)
}

/// RMS normalization over the last axis without the gain.
pub fn rms_normalize<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let last = g
        .shape(x)
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::dim("rms_norm", &[], &[1]))?;
    let sq = g.square(x);
    let ms = g.mean(sq, &[last], true)?;
    let ms = g.affine(ms, 1.0, RMS_EPS);
    let r = g.sqrt(ms);
    g.div(x, r)
}

/// `[sin(t·f_k)…, cos(t·f_k)…]` with `width/2` frequencies geometric in `[1, 10⁴]`.
pub fn sinusoidal(t: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half > 1 {
                TIME_MAX_FREQ.powf(k as f64 / (half - 1) as f64)
            } else {
                1.0
            }
        })
        .collect();
    let mut out = vec![0.0; t.len() * width];
    for (i, &ti) in t.iter().enumerate() {
        let row = &mut out[i * width..(i + 1) * width];
        for (k, f) in freqs.iter().enumerate() {
            row[k] = (ti * f).sin();
            row[half + k] = (ti * f).cos();
        }
    }
    out
}

/// Cosine and sine tables `[P, d_h]` plus the pair-rotation matrix `[d_h, d_h]`.
///
/// Dimensions `[0, d_h/2)` rotate with the token row, `[d_h/2, d_h)` with the column.
pub fn rope_tables(grid: usize, dh: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let half = dh / 2;
    let pairs = half / 2;
    let n = grid * grid;
    let mut cos = vec![0.0; n * dh];
    let mut sin = vec![0.0; n * dh];
    for tok in 0..n {
        let pos = [(tok / grid) as f64, (tok % grid) as f64];
        for (axis, &coord) in pos.iter().enumerate() {
            for k in 0..pairs {
                let theta = coord * ROPE_BASE.powf(-(k as f64) / pairs as f64);
                for j in [2 * k, 2 * k + 1] {
                    let at = tok * dh + axis * half + j;
                    cos[at] = theta.cos();
                    sin[at] = theta.sin();
                }
            }
        }
    }
    let mut swap = vec![0.0; dh * dh];
    for k in 0..dh / 2 {
        swap[(2 * k + 1) * dh + 2 * k] = -1.0;
        swap[(2 * k) * dh + 2 * k + 1] = 1.0;
    }
    (
        Tensor::new(&[n, dh], cos).expect("table size"),
        Tensor::new(&[n, dh], sin).expect("table size"),
        Tensor::new(&[dh, dh], swap).expect("table size"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradChecker;

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut s = Stream::new(seed, Purpose::Diagnostic, 0, 0);
        Tensor::from_fn(shape, |_| s.normal())
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch: 4,
            width: 8,
            depth: 1,
            heads: 2,
            num_classes: 3,
            repa_dim: 4,
            ..Default::default()
        }
    }

    fn randomized(cfg: DenoiserConfig, seed: u64) -> Denoiser<f64> {
        let mut m = Denoiser::<f64>::new(cfg, seed).unwrap();
        let names: Vec<String> = m.params().keys().cloned().collect();
        for (i, n) in names.iter().enumerate() {
            let shape = m.param(n).unwrap().shape().to_vec();
            let t = random(100 + i as u64, &shape).map(|v| 0.3 * v + if n.ends_with("gain") { 1.0 } else { 0.0 });
            m.set_param(n, t).unwrap();
        }
        m
    }

    #[test]
    fn patchify_round_trip_and_shapes() {
        let img = random(1, &[2, 3, 16, 16]).cast::<f32>();
        let tok = patchify(&img, 4).unwrap();
        assert_eq!(tok.shape(), &[2, 16, 48]);
        assert_eq!(unpatchify(&tok, 4, 3, 16, 16).unwrap(), img);
        let flat = Tensor::<f32>::full(&[1, 3, 16, 16], 0.25);
        assert!(patchify(&flat, 4).unwrap().data().iter().all(|&v| v == 0.25));
        assert!(matches!(patchify(&img, 5), Err(Error::Config(_))));

        let mut g = Graph::<f32>::new();
        let x = g.constant(img.clone());
        let tv = patchify_var(&mut g, x, 4).unwrap();
        assert_eq!(g.value(tv), &tok);
    }

    #[test]
    fn parameter_count_is_exact() {
        let cfg = DenoiserConfig::default();
        assert_eq!(cfg.ffn_dim(), 176);
        let (d, k, f) = (64, 48, 176);
        let block = d * 3 * d + d * d + 3 * d * f + 2 * d;
        let expect = (8 + 1) * d + d + (d * k + k) + (k * d + d) + d * 32 + 2 * (d * d + d) + 4 * block;
        assert_eq!(cfg.param_count(), expect);
        assert_eq!(Denoiser::<f32>::new(cfg, 0).unwrap().param_count(), expect);
        assert_eq!(expect, 218_480);
    }

    #[test]
    fn config_validation() {
        let bad = DenoiserConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DenoiserConfig {
            width: 24,
            heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig {
            repa_tap: Some(4),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rms_norm_has_unit_rms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(2, &[2, 5, 16]).map(|v| 3.0 * v));
        let n = rms_normalize(&mut g, x).unwrap();
        for row in g.value(n).data().chunks(16) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_properties() {
        let m = Denoiser::<f64>::new(DenoiserConfig::default(), 0).unwrap();
        let (p, dh) = (16, 16);
        let mut g = Graph::<f64>::new();
        let xv = random(3, &[2, p, dh]);
        let x = g.constant(xv.clone());
        let r = m.rope2d(&mut g, x).unwrap();
        let rv = g.value(r);
        assert_eq!(&rv.data()[..dh], &xv.data()[..dh]);
        for (a, b) in rv.data().chunks(dh).zip(xv.data().chunks(dh)) {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((na - nb).abs() < 1e-5);
        }

        // q at token i, k at token j: the score depends only on the grid offset.
        let q = random(4, &[dh]);
        let k = random(5, &[dh]);
        let score = |qi: usize, kj: usize| {
            let mut qs = Tensor::<f64>::zeros(&[1, p, dh]);
            let mut ks = Tensor::<f64>::zeros(&[1, p, dh]);
            qs.data_mut()[qi * dh..(qi + 1) * dh].copy_from_slice(q.data());
            ks.data_mut()[kj * dh..(kj + 1) * dh].copy_from_slice(k.data());
            let mut g = Graph::<f64>::new();
            let (qv, kv) = (g.constant(qs), g.constant(ks));
            let (rq, rk) = (m.rope2d(&mut g, qv).unwrap(), m.rope2d(&mut g, kv).unwrap());
            let a = &g.value(rq).data()[qi * dh..(qi + 1) * dh];
            let b = &g.value(rk).data()[kj * dh..(kj + 1) * dh];
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        };
        // (0,0)->(1,2) and (2,1)->(3,3) share the offset (+1,+2).
        assert!((score(0, 6) - score(9, 15)).abs() < 1e-12);
        assert!((score(0, 6) - score(0, 9)).abs() > 1e-6);
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = Denoiser::<f32>::new(DenoiserConfig::default(), 7).unwrap();
        let x = random(6, &[2, 3, 16, 16]).cast::<f32>();
        let out = m.predict(&x, &[0.2, 0.7], &[1, 8]).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = randomized(DenoiserConfig::default(), 1);
        let mut g = Graph::<f64>::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(random(7, &[2, 3, 16, 16]));
        let out = m.forward_graph(&mut g, &p, x, &[0.3, 0.9], &[0, 2]).unwrap();
        assert_eq!(g.shape(out.hidden), &[2, 16, 64]);
        for &a in &out.attention {
            for row in g.value(a).data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conditioning_embedding() {
        let m = randomized(DenoiserConfig::default(), 2);
        let embed = |t: f64, c: usize| {
            let mut g = Graph::<f64>::new();
            let p = m.bind(&mut g, false);
            let e = m.time_class_embed(&mut g, &p, &[t], &[c]).unwrap();
            g.value(e).clone()
        };
        assert_eq!(embed(0.4, 3), embed(0.4, 3));
        assert_ne!(embed(0.4, 8), embed(0.4, 0));
        assert_ne!(embed(0.0, 1), embed(1.0, 1));
        let s0 = sinusoidal(&[0.0], 64);
        let s1 = sinusoidal(&[1.0], 64);
        assert_ne!(s0, s1);

        let mut g = Graph::<f64>::new();
        let p = m.bind(&mut g, false);
        assert!(matches!(
            m.time_class_embed(&mut g, &p, &[0.5], &[9]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cfg_pair_with_null_class_is_identical() {
        let m = randomized(DenoiserConfig::default(), 3).cast::<f32>();
        let x = random(8, &[1, 3, 16, 16]).cast::<f32>();
        let (c, u) = m.predict_cfg_pair(&x, &[0.5], &[8]).unwrap();
        assert_eq!(c, u);
        let (c, u) = m.predict_cfg_pair(&x, &[0.5], &[2]).unwrap();
        assert_eq!(c.shape(), u.shape());
        assert_ne!(c, u);
    }

    #[test]
    fn forward_passes_finite_differences() {
        let cfg = tiny();
        let m = randomized(cfg, 4);
        let names: Vec<String> = m.params().keys().cloned().collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.param(n).unwrap().clone()).collect();
        let x_t = random(9, &[2, 3, 8, 8]);
        let report = GradChecker::default()
            .check(
                |g, vars| {
                    let p = BoundParams {
                        vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
                    };
                    let x = g.constant(x_t.clone());
                    let out = m.forward_graph(g, &p, x, &[0.3, 0.8], &[1, 3])?;
                    let h = g.mean_all(out.hidden);
                    let y = g.mean_all(out.x_pred);
                    g.add(y, h)
                },
                &inputs,
            )
            .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?} at {}", names[report.worst.0]);
    }
}
