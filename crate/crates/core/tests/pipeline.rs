use std::fs;
use std::path::Path;

use buildiff::datagen::{build_dataset, DatasetConfig};
use buildiff::denoiser::{Denoiser, DenoiserConfig};
use buildiff::diffusion::{sample_upsampled, Condition, NoisePredictor, SampleOptions};
use buildiff::pipeline::{
    diffusion_loss, files, read_meta, run_training, Preset, RunOptions, Stage, StepDraws, StepLog, TrainConfig,
    TrainSample,
};
use buildiff::Error;
use buildiff_tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::preset(Preset::Toy);
    for (k, v) in [
        ("steps", "12"),
        ("upsampler_steps", "8"),
        ("beta_1", "0.01"),
        ("beta_T", "0.3"),
        ("K", "16"),
        ("N", "40"),
        ("d", "8"),
        ("batch", "4"),
        ("epochs_ae", "1"),
        ("epochs_base", "3"),
        ("epochs_upsampler", "2"),
        ("image_size", "16"),
        ("seed", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn tiny_data(dir: &Path) {
    build_dataset(
        dir,
        &DatasetConfig {
            train: 10,
            test: 4,
            points: 64,
            resolution: 16,
            seed: 9,
            ..DatasetConfig::default()
        },
    )
    .unwrap();
}

fn logs(dir: &Path, stage: Stage) -> Vec<StepLog> {
    fs::read_to_string(files::log(dir, stage))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn diffusion_stages_need_the_autoencoder() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_data(&data);
    let err = run_training(&data, &root.path().join("ckpt"), &tiny_config(), Stage::Base, &RunOptions::default(), |_| {})
        .unwrap_err();
    match err {
        Error::MissingStage { required, .. } => assert_eq!(required, "autoencoder"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn logs_satisfy_loss_identity_and_skip_rule() {
    let root = tempfile::tempdir().unwrap();
    let (data, ckpt) = (root.path().join("data"), root.path().join("ckpt"));
    tiny_data(&data);
    let c = tiny_config();
    run_training(&data, &ckpt, &c, Stage::Autoencoder, &RunOptions::default(), |_| {}).unwrap();
    run_training(&data, &ckpt, &c, Stage::Base, &RunOptions::default(), |_| {}).unwrap();
    let entries = logs(&ckpt, Stage::Base);
    assert_eq!(entries.len(), 3 * 3);
    for s in &entries {
        assert!((s.l_theta - (s.l_eps + c.rho * s.l_reg)).abs() <= 1e-12);
        let active = s.lambda.iter().filter(|l| **l > 0.0).count();
        assert_eq!(s.nn_queries, 2 * c.k * active);
        for (t, l) in s.t.iter().zip(&s.lambda) {
            assert!((1..=c.steps).contains(t));
            assert_eq!(*l == 0.0, 4 * t > 3 * c.steps);
        }
        if active == 0 {
            assert_eq!(s.l_reg, 0.0);
        }
    }
    let meta = read_meta(&ckpt, Stage::Base).unwrap();
    assert!(meta.complete);
    assert_eq!(meta.config, c);
    assert_eq!(meta.steps_done, 9);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_data(&data);
    let c = tiny_config();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for dir in [&a, &b] {
        run_training(&data, dir, &c, Stage::Autoencoder, &RunOptions::default(), |_| {}).unwrap();
    }
    run_training(&data, &a, &c, Stage::Base, &RunOptions::default(), |_| {}).unwrap();
    let pause = RunOptions {
        resume: false,
        stop_after: Some(1),
    };
    run_training(&data, &b, &c, Stage::Base, &pause, |_| {}).unwrap();
    assert!(!read_meta(&b, Stage::Base).unwrap().complete);
    let resume = RunOptions {
        resume: true,
        stop_after: None,
    };
    run_training(&data, &b, &c, Stage::Base, &resume, |_| {}).unwrap();
    let (la, lb) = (logs(&a, Stage::Base), logs(&b, Stage::Base));
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(x.l_theta.to_bits(), y.l_theta.to_bits(), "step {}", x.step);
    }
    assert_eq!(
        fs::read(files::params(&a, Stage::Base)).unwrap(),
        fs::read(files::params(&b, Stage::Base)).unwrap()
    );
}

#[test]
fn resume_rejects_changed_config() {
    let root = tempfile::tempdir().unwrap();
    let (data, ckpt) = (root.path().join("data"), root.path().join("ckpt"));
    tiny_data(&data);
    let c = tiny_config();
    run_training(&data, &ckpt, &c, Stage::Autoencoder, &RunOptions::default(), |_| {}).unwrap();
    let pause = RunOptions {
        resume: false,
        stop_after: Some(1),
    };
    run_training(&data, &ckpt, &c, Stage::Base, &pause, |_| {}).unwrap();
    let mut other = c.clone();
    other.rho = 0.5;
    let resume = RunOptions {
        resume: true,
        stop_after: None,
    };
    assert!(run_training(&data, &ckpt, &other, Stage::Base, &resume, |_| {}).is_err());
}

fn mini_model() -> Denoiser {
    let cfg = DenoiserConfig {
        d: 8,
        point_hidden: 8,
        point_out: 8,
        dec_hidden: 8,
        dec_hidden2: 8,
    };
    let mut m = Denoiser::new(cfg, 1).unwrap();
    // Give the zero-initialised output layer some weight.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in ["dec.w3", "dec.b3"] {
        let t = m.params.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
    }
    m
}

fn cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rand::Rng::random_range(&mut rng, -1.0..1.0),
                rand::Rng::random_range(&mut rng, -1.0..1.0),
                rand::Rng::random_range(&mut rng, -1.0..1.0),
            ]
        })
        .collect()
}

fn loss_of(model: &Denoiser, batch: &[TrainSample], draws: &StepDraws, pinned: usize, steps: usize) -> f64 {
    let schedule = buildiff::schedule::NoiseSchedule::linear(steps, 0.01, 0.3, Default::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    diffusion_loss(model, &mut tape, &bound, batch, draws, pinned, &schedule, 0.001).unwrap().l_theta
}

#[test]
fn dropped_samples_ignore_their_embedding() {
    let model = mini_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut draws = StepDraws::sample(&mut rng, 1, 8, 10, 0.0);
    let sample = |z: f64| {
        vec![TrainSample {
            x0: cloud(5, 8),
            embedding: vec![z; 8],
        }]
    };
    assert_ne!(loss_of(&model, &sample(0.3), &draws, 0, 10), loss_of(&model, &sample(-0.7), &draws, 0, 10));
    draws.dropped = vec![true];
    assert_eq!(loss_of(&model, &sample(0.3), &draws, 0, 10), loss_of(&model, &sample(-0.7), &draws, 0, 10));
}

#[test]
fn upsampler_noise_loss_covers_only_free_positions() {
    let model = mini_model();
    let (n, k, steps) = (12, 5, 10);
    let schedule = buildiff::schedule::NoiseSchedule::linear(steps, 0.01, 0.3, Default::default()).unwrap();
    let batch = vec![TrainSample {
        x0: cloud(8, n),
        embedding: vec![0.1; 8],
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draws = StepDraws::sample(&mut rng, 1, n, steps, 0.0);
    draws.ts = vec![steps];

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let parts = diffusion_loss(&model, &mut tape, &bound, &batch, &draws, k, &schedule, 0.001).unwrap();

    // Independent recomputation over the N - K free positions.
    let mut xt = buildiff::diffusion::forward_noise(&batch[0].x0, steps, &draws.eps[0], &schedule).unwrap();
    xt[..k].copy_from_slice(&batch[0].x0[..k]);
    let eps_hat = model
        .predict(&[&xt], steps, &[Condition::Embedding(&batch[0].embedding)])
        .unwrap()
        .remove(0);
    let mut sq = 0.0;
    for i in k..n {
        for c in 0..3 {
            sq += (eps_hat[i][c] - draws.eps[0][i][c]).powi(2);
        }
    }
    let expected = sq / ((n - k) * 3) as f64;
    assert!((parts.l_eps - expected).abs() < 1e-12, "{} vs {expected}", parts.l_eps);

    // Noise drawn for pinned positions never reaches the loss.
    let mut other = draws.clone();
    for p in &mut other.eps[0][..k] {
        *p = [9.0, -9.0, 9.0];
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let again = diffusion_loss(&model, &mut tape, &bound, &batch, &other, k, &schedule, 0.001).unwrap();
    assert_eq!(again.l_eps, parts.l_eps);
}

#[test]
fn upsampler_stage_trains_and_keeps_prefix() {
    let root = tempfile::tempdir().unwrap();
    let (data, ckpt) = (root.path().join("data"), root.path().join("ckpt"));
    tiny_data(&data);
    let c = tiny_config();
    run_training(&data, &ckpt, &c, Stage::Autoencoder, &RunOptions::default(), |_| {}).unwrap();
    run_training(&data, &ckpt, &c, Stage::Upsampler, &RunOptions::default(), |_| {}).unwrap();
    let (model, cfg) = buildiff::pipeline::load_denoiser(&ckpt, Stage::Upsampler).unwrap();
    let low = cloud(1, cfg.k);
    let (x, _) = sample_upsampled(
        &model,
        &[0.0; 8],
        &low,
        cfg.n,
        &cfg.upsampler_schedule().unwrap(),
        &SampleOptions::default(),
    )
    .unwrap();
    assert_eq!(x.len(), cfg.n);
    assert_eq!(&x[..cfg.k], &low[..]);
}

#[test]
fn toy_base_loss_drops_over_500_steps() {
    let root = tempfile::tempdir().unwrap();
    let (data, ckpt) = (root.path().join("data"), root.path().join("ckpt"));
    build_dataset(
        &data,
        &DatasetConfig {
            seed: 4,
            ..DatasetConfig::default()
        },
    )
    .unwrap();
    let mut c = TrainConfig::preset(Preset::Toy);
    c.epochs_ae = 2;
    c.epochs_base = 20;
    run_training(&data, &ckpt, &c, Stage::Autoencoder, &RunOptions::default(), |_| {}).unwrap();
    run_training(&data, &ckpt, &c, Stage::Base, &RunOptions::default(), |_| {}).unwrap();
    let l: Vec<f64> = logs(&ckpt, Stage::Base).iter().map(|s| s.l_eps).collect();
    assert_eq!(l.len(), 500);
    let head = l[..100].iter().sum::<f64>() / 100.0;
    let tail = l[400..].iter().sum::<f64>() / 100.0;
    assert!(tail <= 0.8 * head, "running mean {head} -> {tail}");
}

#[test]
fn checkpoint_interval_and_lock() {
    let root = tempfile::tempdir().unwrap();
    let (data, ckpt) = (root.path().join("data"), root.path().join("ckpt"));
    tiny_data(&data);
    let mut c = tiny_config();
    c.checkpoint_every = 1;
    run_training(&data, &ckpt, &c, Stage::Autoencoder, &RunOptions::default(), |_| {}).unwrap();
    let mut epochs_seen = Vec::new();
    run_training(&data, &ckpt, &c, Stage::Base, &RunOptions::default(), |p| {
        if let buildiff::pipeline::Progress::Step(s) = p {
            epochs_seen.push(s.epoch);
        }
    })
    .unwrap();
    epochs_seen.dedup();
    assert_eq!(epochs_seen, vec![0, 1, 2]);
    assert!(!ckpt.join(files::LOCK).exists());
    let _held = buildiff::pipeline::TrainingLock::acquire(&ckpt).unwrap();
    assert!(matches!(
        run_training(&data, &ckpt, &c, Stage::Base, &RunOptions::default(), |_| {}),
        Err(Error::Locked(_))
    ));
}
