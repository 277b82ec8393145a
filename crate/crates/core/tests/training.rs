use pixelgen::checkpoint::CheckpointBlob;
use pixelgen::error::Error;
use pixelgen::trainer::{MetricsWriter, TrainConfig, Trainer};

fn small(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        batch_size: 8,
        ..TrainConfig::default()
    };
    c.model.width = 32;
    c.model.depth = 2;
    c.model.heads = 2;
    c
}

#[test]
fn fresh_runs_repeat_exactly() {
    let mut a = Trainer::new(small(3)).unwrap();
    let mut b = Trainer::new(small(3)).unwrap();
    for _ in 0..50 {
        let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
        assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
        assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
    }
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn loss_falls_on_a_tiny_dataset() {
    let mut wins = 0;
    for seed in 0..3 {
        let mut c = small(seed);
        c.epoch_size = 8;
        c.adamw.lr = 1e-3;
        let mut t = Trainer::new(c).unwrap();
        let losses: Vec<f64> = (0..200).map(|_| t.train_step().unwrap().loss.total).collect();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        if tail < head {
            wins += 1;
        }
    }
    assert!(wins >= 2, "loss fell in only {wins} of 3 seeds");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut full = Trainer::new(small(5)).unwrap();
    let mut first = Trainer::new(small(5)).unwrap();
    let mut tail = Vec::new();
    for i in 0..100 {
        let r = full.train_step().unwrap();
        if i < 50 {
            first.train_step().unwrap();
        } else {
            tail.push(r.loss.total);
        }
    }
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(small(5), &path).unwrap();
    assert_eq!(resumed.step, 50);
    for want in tail {
        assert_eq!(resumed.train_step().unwrap().loss.total.to_bits(), want.to_bits());
    }
    assert_eq!(resumed.model.params(), full.model.params());
    assert_eq!(resumed.ema.shadow, full.ema.shadow);
    assert_eq!(resumed.opt, full.opt);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let mut t = Trainer::new(small(1)).unwrap();
    t.train_step().unwrap();
    t.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Trainer::load(small(1), &path), Err(Error::Format { .. })));
    assert!(matches!(
        Trainer::load(small(2), dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn seed_mismatch_is_rejected() {
    let t = Trainer::new(small(1)).unwrap();
    let blob = CheckpointBlob::from_bytes(&t.to_blob().to_bytes().unwrap()).unwrap();
    assert!(matches!(Trainer::from_blob(small(2), &blob), Err(Error::Config(_))));
}

#[test]
fn baseline_objective_is_plain_flow_matching() {
    let mut c = small(0);
    c.perceptual.lambda1 = 0.0;
    c.perceptual.lambda2 = 0.0;
    c.perceptual.repa_weight = 0.0;
    let mut t = Trainer::new(c).unwrap();
    for _ in 0..3 {
        let r = t.train_step().unwrap();
        assert_eq!(r.loss.total, r.loss.fm);
        assert_eq!((r.loss.lpips, r.loss.pdino, r.loss.repa), (0.0, 0.0, 0.0));
    }
}

#[test]
fn breakdown_recombines_and_extractors_stay_frozen() {
    let mut t = Trainer::new(small(4)).unwrap();
    let sum = t.extractors.checksum();
    for _ in 0..5 {
        let r = t.train_step().unwrap();
        assert!((r.loss.recombined(&t.cfg.perceptual) - r.loss.total).abs() < 1e-6);
    }
    assert_eq!(t.extractors.checksum(), sum);
}

#[test]
fn metrics_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut t = Trainer::new(small(0)).unwrap();
    let mut w = MetricsWriter::open(&path, false).unwrap();
    t.run(3, |_, r| w.record(r)).unwrap();
    w.flush().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], pixelgen::trainer::METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,"));
    assert_eq!(lines[1].split(',').count(), 8);
}
