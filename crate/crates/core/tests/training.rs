use ndarray::{arr2, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subkg_core::fixtures::random_triples;
use subkg_core::nn::Parameter;
use subkg_core::train::{lr_at, sample_negatives, AdamW};
use subkg_core::vocab::{build_vocabulary, select_anchors, DEFAULT_MAX_HOPS};
use subkg_core::{Checkpoint, Dataset, Error, RunConfig, Side, Trainer, TrainConfig, Triple, Vocabulary};

fn small_config() -> RunConfig {
    let mut c = RunConfig::parse(
        "d_a = 32\nd_n = 8\nk_anchors = 3\nm_neighbors = 2\nheads = 2\nff_mult = 2\n\
         batch_size = 64\nneg_size = 16\nmax_steps = 2000\nlr = 0.005\n\
         valid_interval = 500\ncheckpoint_interval = 500\nlog_interval = 100\nvalid_protocol = full\n",
    )
    .unwrap();
    c.train.seed = 3;
    c
}

fn toy(valid: usize) -> (Dataset, Vocabulary) {
    let all = random_triples(50, 4, 400 + valid, 17);
    let ds = Dataset::from_splits(50, 4, all[..400].to_vec(), all[400..].to_vec(), Vec::new()).unwrap();
    let anchors = select_anchors(&ds.graph, 5).unwrap();
    let vocab = build_vocabulary(&ds.graph, &anchors, 3, 2, DEFAULT_MAX_HOPS).unwrap();
    (ds, vocab)
}

#[test]
fn schedule_matches_step_decay() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 5e-4);
    assert!((lr_at(250_000, &cfg) - 5e-5).abs() < 1e-18);
    assert!((lr_at(500_000, &cfg) - 5e-5).abs() < 1e-18);
}

#[test]
fn adamw_converges_on_quadratic() {
    let target = arr2(&[[0.5, -1.5, 2.0, 0.0]]);
    let mut p = Parameter::new("theta", Array2::<f64>::zeros((1, 4)));
    let mut opt = AdamW::new(&[&p], 0.9, 0.999, 1e-8, 0.0);
    for _ in 0..100 {
        p.zero_grad();
        p.grad = (&p.value - &target) * 2.0;
        opt.step(&mut [&mut p], 0.08).unwrap();
    }
    let dist = (&p.value - &target).mapv(|x| x * x).sum().sqrt();
    assert!(dist < 1e-2, "{dist}");
}

#[test]
fn adamw_matches_scalar_reference() {
    let (lr, b1, b2, eps, wd) = (0.03, 0.8, 0.99, 1e-6, 0.1);
    let mut p = Parameter::new("w", arr2(&[[1.0f64, -2.0, 0.25]]));
    let mut opt = AdamW::new(&[&p], b1, b2, eps, wd);
    let mut theta = [1.0f64, -2.0, 0.25];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for t in 1..=30 {
        let grad: Vec<f64> = theta.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.3).collect();
        p.zero_grad();
        p.grad = Array2::from_shape_vec((1, 3), grad.clone()).unwrap();
        opt.step(&mut [&mut p], lr).unwrap();
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] = theta[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..3 {
            assert!((p.value[[0, i]] - theta[i]).abs() < 1e-12, "step {t}");
        }
    }
}

#[test]
fn negatives_are_uniform() {
    let n = 100;
    let positives = vec![Triple::new(3, 0, 7); 15_625];
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let neg = sample_negatives(&positives, 64, n, &mut rng);
    assert_eq!(neg.ids.len(), 1_000_000);
    let mut counts = vec![0f64; n];
    for &e in &neg.ids {
        counts[e as usize] += 1.0;
    }
    let expected = neg.ids.len() as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // 99 degrees of freedom, upper 1% point.
    assert!(chi2 < 134.642, "chi2 = {chi2}");

    let heads = neg.sides.iter().filter(|&&s| s == Side::Head).count() as f64;
    let half = positives.len() as f64 / 2.0;
    assert!((heads - half).abs() < 3.0 * (positives.len() as f64 * 0.25).sqrt() + 1.0, "{heads}");

    let one = sample_negatives(&positives[..4], 8, 1, &mut rng);
    assert!(one.ids.iter().all(|&e| e == 0));
}

#[test]
fn loss_trends_down() {
    let (ds, vocab) = toy(0);
    let mut t = Trainer::new(&ds, &vocab, small_config()).unwrap();
    let losses: Vec<f64> = (0..2000).map(|_| t.train_step().unwrap() as f64).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    let smooth = |end: usize| losses[end - 100..end].iter().sum::<f64>() / 100.0;
    let marks: Vec<f64> = [500, 1000, 1500, 2000].iter().map(|&e| smooth(e)).collect();
    assert!(marks.windows(2).all(|w| w[1] <= w[0]), "{marks:?}");
    assert!(marks[3] < smooth(100), "{marks:?} vs start {}", smooth(100));
}

#[test]
fn resume_reproduces_losses() {
    let (ds, vocab) = toy(0);
    let mut straight = Trainer::new(&ds, &vocab, small_config()).unwrap();
    let reference: Vec<f32> = (0..25).map(|_| straight.train_step().unwrap()).collect();

    let mut first = Trainer::new(&ds, &vocab, small_config()).unwrap();
    for _ in 0..15 {
        first.train_step().unwrap();
    }
    let bytes = first.checkpoint().encode();
    drop(first);
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ds, &vocab, &ckpt).unwrap();
    assert_eq!(resumed.step, 15);
    let tail: Vec<f32> = (0..10).map(|_| resumed.train_step().unwrap()).collect();
    assert_eq!(tail, reference[15..]);
}

#[test]
fn run_writes_artifacts() {
    let (ds, vocab) = toy(30);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.max_steps = 60;
    cfg.train.valid_interval = 30;
    cfg.train.checkpoint_interval = 30;
    cfg.train.log_interval = 20;
    let mut t = Trainer::new(&ds, &vocab, cfg).unwrap();
    let summary = t.run(60, Some(dir.path())).unwrap();
    assert_eq!(summary.steps, 60);
    assert!(summary.best_valid_mrr.is_some());

    let echo = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert_eq!(RunConfig::parse(&echo).unwrap(), cfg);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,valid_mrr");
    let steps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["20", "30", "40", "60"]);
    assert!(lines[2].split(',').nth(3).is_some_and(|m| !m.is_empty()));

    let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.step, 60);
    assert_eq!(last.config, cfg);
    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.best_valid_mrr, summary.best_valid_mrr);

    let model = last.model().unwrap();
    let ids: Vec<u32> = (0..50).collect();
    let a = model.representations(&vocab, &ids, 16).unwrap();
    let b = t.model.representations(&vocab, &ids, 50).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_other_graph() {
    let (ds, vocab) = toy(0);
    let t = Trainer::new(&ds, &vocab, small_config()).unwrap();
    let ckpt = t.checkpoint();
    let other = Dataset::from_splits(50, 4, random_triples(50, 4, 400, 99), Vec::new(), Vec::new()).unwrap();
    assert!(matches!(ckpt.check_graph(&other), Err(Error::ChecksumMismatch { .. })));
}

#[test]
fn nonfinite_loss_dumps_diagnostics() {
    let (ds, vocab) = toy(0);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&ds, &vocab, small_config()).unwrap();
    t.model.relations.value.fill(f32::NAN);
    let err = t.run(10, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump = std::fs::read_to_string(dir.path().join("nonfinite_step_0.txt")).unwrap();
    assert!(dump.contains("relations"), "{dump}");
}

#[test]
fn star_preset_stays_finite_for_10k_steps() {
    let ds = subkg_core::fixtures::star_dataset();
    let mut cfg = RunConfig::preset("star").unwrap();
    cfg.train.max_steps = 10_000;
    let anchors = select_anchors(&ds.graph, cfg.anchor_count(6)).unwrap();
    let vocab = build_vocabulary(&ds.graph, &anchors, cfg.k_anchors, cfg.m_neighbors, DEFAULT_MAX_HOPS).unwrap();
    let mut t = Trainer::new(&ds, &vocab, cfg).unwrap();
    for _ in 0..10_000 {
        assert!(t.train_step().unwrap().is_finite(), "step {}", t.step);
    }
    assert!(t.model.params().iter().all(|p| p.value.iter().all(|x| x.is_finite())));
}
