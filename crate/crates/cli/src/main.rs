use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use log::info;

use pixelgen::config::{RunConfig, KNOBS};
use pixelgen::data::{write_image_grid, NUM_CLASSES};
use pixelgen::diagnostics;
use pixelgen::metrics::{evaluate, REPORT_HEADER};
use pixelgen::sampler::sample_threaded;
use pixelgen::tensor::OpKind;
use pixelgen::trainer::{load_model, MetricsWriter, Trainer};
use pixelgen::Error;

#[derive(Parser)]
#[command(
    name = "pixelgen",
    version,
    about = "Pixel-space flow-matching diffusion on procedural shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for sampling and evaluation (same as `--threads` knob)
    #[arg(long)]
    threads: Option<usize>,
    /// Knob overrides: `--key value` or `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser; writes final.ckpt, ema.ckpt, metrics.csv and sample grids
    #[command(after_help = knob_help())]
    Train(Common),
    /// Draw an image grid from a checkpoint
    #[command(after_help = knob_help())]
    Sample(Common),
    /// Score a checkpoint with feature-Fréchet distance and precision/recall
    #[command(after_help = knob_help())]
    Eval(Common),
    /// Run the gradient, solver and invariant self-checks
    #[command(after_help = knob_help())]
    Check(Common),
}

fn knob_help() -> String {
    let mut s = String::from("Knobs (set in the config file or as --key value):\n");
    for k in KNOBS.iter().filter(|k| !k.hidden) {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        s.push_str(&format!("  {:<20} {} [default: {}]\n", k.key, k.help, default));
    }
    s
}

/// Failure categories mapped to exit codes.
enum Failure {
    User(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::User(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Failure::User(format!("expected --key, got {a:?}")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::User(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(),
    };
    let overrides = parse_overrides(&common.overrides)?;
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Some(t) = common.threads {
        cfg.set("threads", &t.to_string())?;
    }
    if !cfg.is_set("seed") {
        if let Ok(env_seed) = std::env::var("PIXELGEN_SEED") {
            cfg.set("seed", &env_seed)
                .map_err(|e| Failure::User(format!("PIXELGEN_SEED: {e}")))?;
        }
    }
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::User(format!("{}: {e}", path.display()))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    match cfg.raw("checkpoint") {
        "" => cfg.out_dir().join("ema.ckpt"),
        p => PathBuf::from(p),
    }
}

fn grid_classes(n: usize) -> Vec<usize> {
    (0..n).map(|i| i % NUM_CLASSES).collect()
}

fn write_samples(trainer: &Trainer, cfg: &RunConfig, path: &Path) -> CmdResult {
    let sampler = cfg.sampler_config()?;
    let model = trainer.ema_model()?;
    let classes = grid_classes(cfg.usize("sample_count"));
    let s = sample_threaded(
        &model,
        &classes,
        &sampler,
        cfg.u64("sample_seed"),
        cfg.usize("threads").max(1),
    )?;
    write_image_grid(&s.images, path, cfg.usize("sample_columns").max(1), cfg.bool("png"))?;
    Ok(())
}

fn save_all(trainer: &Trainer, out: &Path) -> CmdResult {
    trainer.save(out.join("final.ckpt"))?;
    trainer.ema_blob()?.save(out.join("ema.ckpt"))?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let train_cfg = cfg.train_config()?;
    cfg.sampler_config()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let resume = cfg.bool("resume");
    let mut trainer = if resume {
        Trainer::load(train_cfg, out.join("final.ckpt"))?
    } else {
        Trainer::new(train_cfg)?
    };
    fs::write(out.join("config.conf"), cfg.render()).map_err(|e| io_err(&out, e))?;
    let mut metrics = MetricsWriter::open(out.join("metrics.csv"), resume)?;
    let total = cfg.u64("train_steps");
    let ckpt_every = cfg.u64("checkpoint_every");
    let sample_every = cfg.u64("sample_every");
    info!(
        "training {} parameters for {total} steps from step {} into {}",
        trainer.model.param_count(),
        trainer.step,
        out.display()
    );
    let result = trainer.run(total, |t, r| {
        metrics.record(r)?;
        let done = t.step;
        if done % 100 == 0 {
            info!("step {done}: {}", r.loss);
        }
        let mut fail = None;
        if ckpt_every > 0 && done % ckpt_every == 0 && done < total {
            metrics.flush()?;
            if let Err(Failure::User(m) | Failure::Numeric(m)) = save_all(t, &out) {
                fail = Some(m);
            }
        }
        if sample_every > 0 && done % sample_every == 0 && done < total {
            if let Err(Failure::User(m) | Failure::Numeric(m)) =
                write_samples(t, cfg, &out.join(format!("samples_{done}.ppm")))
            {
                fail = Some(m);
            }
        }
        match fail {
            Some(m) => Err(Error::State(m)),
            None => Ok(()),
        }
    });
    metrics.flush()?;
    result?;
    save_all(&trainer, &out)?;
    write_samples(&trainer, cfg, &out.join(format!("samples_{}.ppm", trainer.step)))?;
    println!("trained to step {}; outputs in {}", trainer.step, out.display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig) -> CmdResult {
    let train_cfg = cfg.train_config()?;
    let sampler = cfg.sampler_config()?;
    let model = load_model(train_cfg.model, checkpoint_path(cfg))?;
    let classes = grid_classes(cfg.usize("sample_count"));
    let s = sample_threaded(
        &model,
        &classes,
        &sampler,
        cfg.u64("sample_seed"),
        cfg.usize("threads").max(1),
    )?;
    let path = match cfg.raw("output") {
        "" => cfg.out_dir().join("samples.ppm"),
        p => PathBuf::from(p),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_image_grid(&s.images, &path, cfg.usize("sample_columns").max(1), cfg.bool("png"))?;
    println!(
        "wrote {} images ({} solver, {} model evaluations) to {}",
        classes.len(),
        sampler.solver,
        s.evaluations,
        path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> CmdResult {
    let train_cfg = cfg.train_config()?;
    let sampler = cfg.sampler_config()?;
    let eval_cfg = cfg.eval_config()?;
    let model = load_model(train_cfg.model, checkpoint_path(cfg))?;
    let report = evaluate(&model, &sampler, &eval_cfg)?;
    if !report.is_finite() {
        return Err(Failure::Numeric(format!("non-finite metrics: {}", report.csv_row())));
    }
    println!("{report}");
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let path = out.join("eval.csv");
    fs::write(&path, format!("{REPORT_HEADER}\n{}\n", report.csv_row())).map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn cmd_check(cfg: &RunConfig) -> CmdResult {
    let fault = match cfg.raw("fault_op") {
        "" => None,
        name => Some(OpKind::from_str(name)?),
    };
    println!("running self-checks in 64-bit precision");
    let outcomes = diagnostics::run_all(fault);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "{} check(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig) -> CmdResult) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Sample(c) => (c, cmd_sample),
        Command::Eval(c) => (c, cmd_eval),
        Command::Check(c) => (c, cmd_check),
    };
    match resolve(common).and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
