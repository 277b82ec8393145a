use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--train_steps",
    "6",
    "--batch_size",
    "4",
    "--width",
    "16",
    "--depth",
    "2",
    "--heads",
    "2",
    "--checkpoint_every",
    "3",
    "--sample_every",
    "3",
    "--sample_count",
    "4",
    "--steps",
    "4",
    "--sample_columns",
    "2",
];

fn pixelgen(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pixelgen"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("PIXELGEN_SEED");
    if let Some(s) = env_seed {
        cmd.env("PIXELGEN_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn train(out: &Path, extra: &[&str], env_seed: Option<&str>) -> Output {
    let mut args = vec!["train", "--out_dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    pixelgen(&args, env_seed)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_emits_artifacts_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train(&a, &[], None));
    for f in [
        "final.ckpt",
        "ema.ckpt",
        "metrics.csv",
        "samples_3.ppm",
        "samples_6.ppm",
        "config.conf",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let csv = String::from_utf8(read(a.join("metrics.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("step,loss_total,loss_fm,loss_lpips,loss_pdino,loss_repa,grad_norm,gate_fraction\n"));
    ok(&train(&b, &[], None));
    assert_eq!(read(a.join("metrics.csv")), read(b.join("metrics.csv")));
    assert_eq!(read(a.join("final.ckpt")), read(b.join("final.ckpt")));
    assert!(read(a.join("samples_6.ppm")).starts_with(b"P6\n34 34\n255\n"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(&train(&full, &[], None));
    ok(&train(&split, &["--train_steps", "3"], None));
    ok(&train(&split, &["--resume", "true"], None));
    assert_eq!(read(full.join("metrics.csv")), read(split.join("metrics.csv")));
    assert_eq!(read(full.join("final.ckpt")), read(split.join("final.ckpt")));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&train(&p("env"), &["--train_steps", "2"], Some("5")));
    ok(&train(&p("flag"), &["--train_steps", "2", "--seed", "5"], Some("9")));
    ok(&train(&p("other"), &["--train_steps", "2"], Some("6")));
    assert_eq!(read(p("env").join("metrics.csv")), read(p("flag").join("metrics.csv")));
    assert_ne!(read(p("env").join("metrics.csv")), read(p("other").join("metrics.csv")));
}

#[test]
fn baseline_flags_disable_auxiliary_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("base");
    ok(&train(
        &out,
        &[
            "--lambda1",
            "0",
            "--lambda2",
            "0",
            "--repa_weight",
            "0",
            "--train_steps",
            "2",
        ],
        None,
    ));
    let csv = String::from_utf8(read(out.join("metrics.csv"))).unwrap();
    for row in csv.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1], f[2], "total equals flow-matching loss");
        assert_eq!(&f[3..6], &["0", "0", "0"]);
    }
}

#[test]
fn sample_and_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train(&run, &["--train_steps", "3"], None));
    let run_s = run.to_str().unwrap();
    let grid = |name: &str, extra: &[&str]| {
        let out = run.join(name);
        let mut args = vec![
            "sample",
            "--out_dir",
            run_s,
            "--width",
            "16",
            "--depth",
            "2",
            "--heads",
            "2",
            "--steps",
            "4",
            "--sample_count",
            "4",
            "--sample_columns",
            "2",
            "--output",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        ok(&pixelgen(&args, None));
        read(out)
    };
    let plain = grid("plain.ppm", &["--cfg_scale", "1.0"]);
    let guided = grid("guided.ppm", &["--cfg_scale", "2.25"]);
    assert_eq!(plain.len(), guided.len());
    assert_ne!(plain, guided);
    assert_eq!(
        grid("heun.ppm", &["--solver", "heun"]),
        grid("heun2.ppm", &["--solver", "heun"])
    );
    grid("adams.ppm", &["--solver", "adams2", "--timeshift", "3.0"]);

    let eval = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--out_dir",
            run_s,
            "--width",
            "16",
            "--depth",
            "2",
            "--heads",
            "2",
            "--steps",
            "3",
            "--eval_n",
            "24",
        ];
        args.extend_from_slice(extra);
        let o = pixelgen(&args, None);
        ok(&o);
        (o.stdout, read(run.join("eval.csv")))
    };
    let (text, csv) = eval(&[]);
    assert!(String::from_utf8(text).unwrap().contains("frechet"));
    assert!(csv.starts_with(b"frechet,precision,recall,n_real,n_gen,k\n"));
    assert_eq!(eval(&["--threads", "3"]).1, csv);
}

#[test]
fn threads_do_not_change_samples() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train(&run, &["--train_steps", "1"], None));
    let grid = |threads: &str| {
        let out = run.join(format!("t{threads}.ppm"));
        ok(&pixelgen(
            &[
                "sample",
                "--out_dir",
                run.to_str().unwrap(),
                "--width",
                "16",
                "--depth",
                "2",
                "--heads",
                "2",
                "--steps",
                "2",
                "--solver",
                "euler",
                "--sample_count",
                "300",
                "--sample_columns",
                "20",
                "--threads",
                threads,
                "--output",
                out.to_str().unwrap(),
            ],
            None,
        ));
        read(out)
    };
    assert_eq!(grid("1"), grid("3"));
}

#[test]
fn user_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "lambda1 = 0.1\n# fine\nlamda2 = 0.01\n").unwrap();
    let o = pixelgen(&["train", "--config", conf.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.conf:3") && err.contains("lamda2"), "{err}");

    let missing = dir.path().join("none.ckpt");
    let o = pixelgen(&["sample", "--checkpoint", missing.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let o = pixelgen(&["train", "--solver", "rk4"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(
        &dir.path().join("nan"),
        &["--lr", "1e30", "--grad_clip", "0", "--train_steps", "6"],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn check_passes_and_names_a_corrupted_op() {
    let o = pixelgen(&["check"], None);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("64-bit") && text.contains("all "), "{text}");
    let o = pixelgen(&["check", "--fault_op", "gelu_tanh"], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grad gelu_tanh"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.conf", "toy.conf"] {
        pixelgen::config::RunConfig::load(root.join(name))
            .and_then(|c| c.train_config().map(|_| ()))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
