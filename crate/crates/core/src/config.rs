//! Flat `key = value` run configuration shared by every command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{TimeSamplerConfig, TimeSamplerKind};
use crate::metrics::EvalConfig;
use crate::perception::{ExtractorConfig, GlobalNetConfig, PerceptualConfig};
use crate::sampler::{SamplerConfig, ShiftOrientation, Solver};
use crate::trainer::{AdamWConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnobKind {
    Float,
    Int,
    Seed,
    Bool,
    Text,
    /// A fixed set of words.
    Choice(&'static [&'static str]),
    /// Comma-separated positive integers.
    IntList,
    /// A non-negative integer or `auto`.
    IntOrAuto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Knob {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: KnobKind,
    pub help: &'static str,
    /// Omitted from `--help` and from rendered config files.
    pub hidden: bool,
}

const fn knob(key: &'static str, default: &'static str, kind: KnobKind, help: &'static str) -> Knob {
    Knob {
        key,
        default,
        kind,
        help,
        hidden: false,
    }
}

use KnobKind::*;

/// Every recognised key with its default.
pub const KNOBS: &[Knob] = &[
    knob(
        "seed",
        "0",
        Seed,
        "training seed (falls back to PIXELGEN_SEED when unset)",
    ),
    knob("dataset_seed", "0", Seed, "procedural dataset seed"),
    knob("extractor_seed", "1", Seed, "seed of the frozen loss feature networks"),
    knob("batch_size", "32", Int, "images per training step"),
    knob(
        "epoch_size",
        "8192",
        Int,
        "size of the virtual epoch batches are drawn from",
    ),
    knob("train_steps", "2000", Int, "number of optimizer steps"),
    knob("lr", "1e-4", Float, "AdamW learning rate"),
    knob("beta1", "0.9", Float, "AdamW first-moment decay"),
    knob("beta2", "0.999", Float, "AdamW second-moment decay"),
    knob("adam_eps", "1e-8", Float, "AdamW epsilon"),
    knob("weight_decay", "0", Float, "decoupled weight decay"),
    knob("ema_decay", "0.9999", Float, "EMA decay of the sampling weights"),
    knob("grad_clip", "1.0", Float, "global gradient-norm ceiling (0 disables)"),
    knob(
        "time_sampler",
        "logit_normal",
        Choice(&["logit_normal", "uniform"]),
        "training time distribution",
    ),
    knob("time_mu", "-0.8", Float, "logit-normal location"),
    knob("time_sigma", "0.8", Float, "logit-normal scale"),
    knob(
        "denom_clip",
        "0.05",
        Float,
        "floor on 1 - t when converting predictions to velocity",
    ),
    knob("lambda1", "0.1", Float, "weight of the local multi-layer feature loss"),
    knob("lambda2", "0.01", Float, "weight of the global patch-cosine loss"),
    knob(
        "gate_threshold",
        "0.3",
        Float,
        "perceptual losses apply only where t >= this",
    ),
    knob(
        "repa_weight",
        "0.5",
        Float,
        "weight of the representation-alignment loss",
    ),
    knob(
        "global_layer",
        "auto",
        IntOrAuto,
        "global feature layer for the cosine loss (auto = last)",
    ),
    knob("width", "64", Int, "denoiser hidden width"),
    knob("depth", "4", Int, "denoiser blocks"),
    knob("heads", "4", Int, "attention heads"),
    knob("patch", "4", Int, "denoiser patch size"),
    knob(
        "repa_tap",
        "auto",
        IntOrAuto,
        "block whose output feeds the alignment loss (auto = depth/2)",
    ),
    knob(
        "class_drop",
        "0.1",
        Float,
        "probability a training label is replaced by the null class",
    ),
    knob(
        "local_widths",
        "8,16,32",
        IntList,
        "channel widths of the local feature network",
    ),
    knob("global_dim", "32", Int, "global feature width"),
    knob(
        "global_stages",
        "2",
        Int,
        "token-mixing stages of the global feature network",
    ),
    knob("solver", "heun", Choice(&["euler", "heun", "adams2"]), "ODE solver"),
    knob("steps", "50", Int, "solver steps"),
    knob("timeshift", "1.0", Float, "timeshift factor (1 = uniform grid)"),
    knob(
        "shift_orientation",
        "clean",
        Choice(&["clean", "noise"]),
        "end of the trajectory the shift densifies",
    ),
    knob("cfg_scale", "1.0", Float, "classifier-free guidance scale (1 = off)"),
    knob("cfg_interval_lo", "0.1", Float, "guidance applies for t >= this"),
    knob("cfg_interval_hi", "0.9", Float, "guidance applies for t <= this"),
    knob("sample_seed", "7", Seed, "noise seed for sample grids"),
    knob("sample_count", "16", Int, "images in a sample grid"),
    knob("sample_columns", "4", Int, "columns of a sample grid"),
    knob(
        "sample_every",
        "500",
        Int,
        "write a sample grid every N steps (0 = only at the end)",
    ),
    knob(
        "checkpoint_every",
        "500",
        Int,
        "save a checkpoint every N steps (0 = only at the end)",
    ),
    knob("png", "false", Bool, "also write PNG copies of image grids"),
    knob("eval_n", "1024", Int, "images per side for evaluation"),
    knob("eval_k", "3", Int, "neighbour rank for precision/recall"),
    knob(
        "eval_seed",
        "2024",
        Seed,
        "seed of evaluation noise and real-image choice",
    ),
    knob(
        "eval_feature_seed",
        "59297",
        Seed,
        "seed of the evaluation feature network",
    ),
    knob(
        "threads",
        "1",
        Int,
        "worker threads for sampling (results do not depend on it)",
    ),
    knob("out_dir", "runs/default", Text, "directory for all outputs"),
    knob(
        "checkpoint",
        "",
        Text,
        "checkpoint to sample or evaluate (default out_dir/ema.ckpt)",
    ),
    knob(
        "output",
        "",
        Text,
        "image grid written by sample (default out_dir/samples.ppm)",
    ),
    knob("resume", "false", Bool, "continue training from out_dir/final.ckpt"),
    Knob {
        key: "fault_op",
        default: "",
        kind: Text,
        help: "distort the backward rule of this op during check",
        hidden: true,
    },
];

pub fn find_knob(key: &str) -> Option<&'static Knob> {
    KNOBS.iter().find(|k| k.key == key)
}

fn check_value(knob: &Knob, value: &str) -> std::result::Result<(), String> {
    let ok = match knob.kind {
        Float => value.parse::<f64>().map(|v| v.is_finite()).unwrap_or(false),
        Int => value.parse::<usize>().is_ok(),
        Seed => value.parse::<u64>().is_ok(),
        Bool => matches!(value, "true" | "false"),
        Text => true,
        Choice(opts) => opts.contains(&value),
        IntList => !value.is_empty() && value.split(',').all(|p| p.trim().parse::<usize>().is_ok_and(|v| v > 0)),
        IntOrAuto => value == "auto" || value.parse::<usize>().is_ok(),
    };
    if ok {
        return Ok(());
    }
    let want = match knob.kind {
        Float => "a finite number".to_string(),
        Int => "a non-negative integer".to_string(),
        Seed => "an unsigned 64-bit integer".to_string(),
        Bool => "true or false".to_string(),
        Text => unreachable!(),
        Choice(opts) => format!("one of {}", opts.join(", ")),
        IntList => "comma-separated positive integers".to_string(),
        IntOrAuto => "a non-negative integer or auto".to_string(),
    };
    Err(format!("{} expects {want}, got {value:?}", knob.key))
}

/// Resolved knob values. Keys not set explicitly take their defaults.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set one key, rejecting unknown keys and malformed values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let knob = find_knob(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let value = value.trim();
        check_value(knob, value).map_err(Error::Config)?;
        self.values.insert(knob.key, value.to_string());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Parse `key = value` lines; `#` starts a comment. Errors name `origin` and the line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.merge_text(text, origin)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if find_knob(key).is_none() {
                return Err(at(format!("unknown key {key:?}")));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply `--key value` style overrides, given as pairs.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("--{k}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        let knob = find_knob(key).unwrap_or_else(|| panic!("no knob named {key:?}"));
        self.values.get(knob.key).map(String::as_str).unwrap_or(knob.default)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated on set")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    fn auto(&self, key: &str) -> Option<usize> {
        match self.raw(key) {
            "auto" => None,
            v => Some(v.parse().expect("validated on set")),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    /// Every visible knob with its resolved value, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KNOBS.iter().filter(|k| !k.hidden) {
            writeln!(out, "{} = {}", k.key, self.raw(k.key)).expect("write to string");
        }
        out
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut model = crate::denoiser::DenoiserConfig {
            patch: self.usize("patch"),
            width: self.usize("width"),
            depth: self.usize("depth"),
            heads: self.usize("heads"),
            repa_tap: self.auto("repa_tap"),
            class_drop_prob: self.f64("class_drop"),
            ..Default::default()
        };
        model.repa_dim = self.usize("global_dim");
        let global = GlobalNetConfig {
            patch: model.patch,
            dim: self.usize("global_dim"),
            stages: self.usize("global_stages"),
            ..GlobalNetConfig::default()
        };
        let local_widths = self
            .raw("local_widths")
            .split(',')
            .map(|p| p.trim().parse().expect("validated on set"))
            .collect();
        let cfg = TrainConfig {
            seed: self.u64("seed"),
            dataset_seed: self.u64("dataset_seed"),
            extractor_seed: self.u64("extractor_seed"),
            batch_size: self.usize("batch_size"),
            epoch_size: self.u64("epoch_size"),
            adamw: AdamWConfig {
                lr: self.f64("lr"),
                beta1: self.f64("beta1"),
                beta2: self.f64("beta2"),
                eps: self.f64("adam_eps"),
                weight_decay: self.f64("weight_decay"),
            },
            ema_decay: self.f64("ema_decay"),
            grad_clip: self.f64("grad_clip"),
            denom_clip: self.f64("denom_clip"),
            time: TimeSamplerConfig {
                kind: match self.raw("time_sampler") {
                    "uniform" => TimeSamplerKind::Uniform,
                    _ => TimeSamplerKind::LogitNormal,
                },
                mu: self.f64("time_mu"),
                sigma: self.f64("time_sigma"),
            },
            perceptual: PerceptualConfig {
                lambda1: self.f64("lambda1"),
                lambda2: self.f64("lambda2"),
                gate_threshold: self.f64("gate_threshold"),
                repa_weight: self.f64("repa_weight"),
                layer_weights: None,
                global_layer: self.auto("global_layer"),
            },
            model,
            extractors: ExtractorConfig { local_widths, global },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            solver: self.raw("solver").parse::<Solver>()?,
            steps: self.usize("steps"),
            timeshift: self.f64("timeshift"),
            shift_orientation: self.raw("shift_orientation").parse::<ShiftOrientation>()?,
            cfg_scale: self.f64("cfg_scale"),
            cfg_interval: (self.f64("cfg_interval_lo"), self.f64("cfg_interval_hi")),
            denom_clip: self.f64("denom_clip"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            n: self.usize("eval_n"),
            k: self.usize("eval_k"),
            eval_seed: self.u64("eval_seed"),
            feature_seed: self.u64("eval_feature_seed"),
            dataset_seed: self.u64("dataset_seed"),
            threads: self.usize("threads").max(1),
        };
        if cfg.k == 0 || cfg.k >= cfg.n {
            return Err(Error::Config(format!(
                "eval_k must satisfy 1 <= k < eval_n (k={}, n={})",
                cfg.k, cfg.n
            )));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let c = RunConfig::new();
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.sampler_config().unwrap().solver, Solver::Heun);
        assert_eq!(c.eval_config().unwrap().n, 1024);
        for k in KNOBS {
            check_value(k, k.default).unwrap_or_else(|e| panic!("default of {}: {e}", k.key));
        }
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let err = RunConfig::parse("# header\nlambda1 = 0.2\n\nlambda3 = 1\n", "x.conf").unwrap_err();
        assert!(err.to_string().contains("x.conf:4"), "{err}");
        let err = RunConfig::parse("steps = many", "y.conf").unwrap_err();
        assert!(err.to_string().contains("y.conf:1"), "{err}");
        let err = RunConfig::parse("steps 5", "z.conf").unwrap_err();
        assert!(err.to_string().contains("z.conf:1"), "{err}");
    }

    #[test]
    fn overrides_win_and_values_round_trip() {
        let mut c = RunConfig::parse("lambda1 = 0.2 # trailing\nsolver = euler\n", "f").unwrap();
        c.apply_overrides([("lambda1", "0.3"), ("cfg_scale", "2.25")]).unwrap();
        assert_eq!(c.f64("lambda1"), 0.3);
        assert_eq!(c.raw("solver"), "euler");
        let again = RunConfig::parse(&c.render(), "rendered").unwrap();
        for k in KNOBS.iter().filter(|k| !k.hidden) {
            assert_eq!(again.raw(k.key), c.raw(k.key), "{}", k.key);
        }
        assert!(c.apply_overrides([("nope", "1")]).is_err());
    }

    #[test]
    fn every_visible_knob_round_trips_through_file_and_override() {
        for k in KNOBS.iter().filter(|k| !k.hidden) {
            let from_file = RunConfig::parse(&format!("{} = {}", k.key, k.default), "f").unwrap();
            let mut from_flag = RunConfig::new();
            from_flag.apply_overrides([(k.key, k.default)]).unwrap();
            assert_eq!(from_file, from_flag);
            assert_eq!(from_file.raw(k.key), k.default);
        }
    }
}
