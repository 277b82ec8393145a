use pixelgen::data::NUM_CLASSES;
use pixelgen::metrics::*;
use pixelgen::perception::{GlobalFeatureNet, GlobalNetConfig};
use pixelgen::sampler::{SamplerConfig, Solver};
use pixelgen::trainer::{TrainConfig, Trainer};

#[test]
fn disjoint_real_halves_agree() {
    let cfg = EvalConfig {
        k: 5,
        ..EvalConfig::default()
    };
    let (a, _) = real_images(&cfg, 1024, 0);
    let (b, _) = real_images(&cfg, 1024, 1);
    let r = compare_images(&a, &b, &cfg).unwrap();
    assert!(r.frechet < 0.05, "{r}");
    assert!(r.precision >= 0.95 && r.recall >= 0.95, "{r}");
    assert!(r.is_finite());
}

#[test]
fn identical_sets_score_perfectly() {
    let cfg = EvalConfig::default();
    let (a, _) = real_images(&cfg, 256, 0);
    let r = compare_images(&a, &a, &cfg).unwrap();
    assert_eq!((r.precision, r.recall), (1.0, 1.0));
    assert!(r.frechet < 1e-6);
}

#[test]
fn classes_are_separable_in_feature_space() {
    let cfg = EvalConfig::default();
    let net = GlobalFeatureNet::new(cfg.feature_seed, GlobalNetConfig::default()).unwrap();
    let (train, train_y) = real_images(&cfg, 800, 0);
    let (test, test_y) = real_images(&cfg, 400, 1);
    let (ft, fq) = (
        pooled_features(&net, &train).unwrap(),
        pooled_features(&net, &test).unwrap(),
    );
    let dim = ft[0].len();
    let mut centroids = vec![vec![0.0; dim]; NUM_CLASSES];
    let mut counts = vec![0usize; NUM_CLASSES];
    for (f, &y) in ft.iter().zip(&train_y) {
        counts[y] += 1;
        centroids[y].iter_mut().zip(f).for_each(|(c, x)| *c += x);
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let correct = fq
        .iter()
        .zip(&test_y)
        .filter(|(f, &y)| {
            (0..NUM_CLASSES).min_by(|&a, &b| dist(f, &centroids[a]).total_cmp(&dist(f, &centroids[b]))) == Some(y)
        })
        .count();
    let acc = correct as f64 / fq.len() as f64;
    assert!(acc >= 0.5, "nearest-centroid accuracy {acc}");
}

#[test]
fn smoke_training_beats_an_untrained_model() {
    let eval = EvalConfig {
        n: 256,
        ..EvalConfig::default()
    };
    let sampler = SamplerConfig {
        solver: Solver::Euler,
        steps: 20,
        ..SamplerConfig::default()
    };
    let mut wins = 0;
    for seed in 0..3 {
        let mut cfg = TrainConfig {
            seed,
            batch_size: 16,
            ema_decay: 0.0,
            ..TrainConfig::default()
        };
        cfg.adamw.lr = 2e-3;
        cfg.model.width = 32;
        cfg.model.depth = 2;
        cfg.model.heads = 2;
        let mut t = Trainer::new(cfg).unwrap();
        let before = evaluate(&t.model, &sampler, &eval).unwrap();
        t.run(300, |_, _| Ok(())).unwrap();
        let after = evaluate(&t.model, &sampler, &eval).unwrap();
        assert_eq!(after, evaluate(&t.model, &sampler, &eval).unwrap());
        if after.frechet < before.frechet {
            wins += 1;
        }
    }
    assert!(wins >= 2, "trained model better in only {wins} of 3 seeds");
}
