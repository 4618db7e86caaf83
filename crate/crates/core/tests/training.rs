use bridgekit::net::{load_checkpoint, predict_batch, save_checkpoint, ArchSpec, Checkpoint, RegressorParams};
use bridgekit::problems::{worker_rng, ProblemSpec};
use bridgekit::train::{train_new, BridgeMode, TrainConfig, Trainer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_arch() -> ArchSpec {
    ArchSpec {
        hidden: 24,
        depth: 2,
        time_dim: 8,
        ..ArchSpec::default()
    }
}

#[test]
fn identity_data_is_learned_within_500_steps() {
    let problem = ProblemSpec::Identity { dim: 2 }.build().unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch: 64,
        bridge_mode: BridgeMode::Ode,
        ..TrainConfig::default()
    };
    let out = train_new(&cfg, problem.source()).unwrap();
    let last = *out.losses.last().unwrap();
    assert!(last < 1e-4, "final loss {last}");
    assert!(out.losses[0] > 100.0 * last);
}

fn fresh(cfg: &TrainConfig, state_dim: usize) -> RegressorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    RegressorParams::init(cfg.net_config(state_dim, 0).unwrap(), &mut rng).unwrap()
}

#[test]
fn resumed_run_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let problem = ProblemSpec::default().build().unwrap();
    let path = dir.path().join("mid.ckpt");
    let full_cfg = TrainConfig {
        arch: small_arch(),
        steps: 40,
        batch: 16,
        seed: 4,
        ..TrainConfig::default()
    };

    let mut straight = Trainer::new(full_cfg.clone(), fresh(&full_cfg, 2)).unwrap();
    let straight_history = straight.run(problem.source()).unwrap();

    let first_cfg = TrainConfig {
        steps: 25,
        checkpoint_path: Some(path.clone()),
        ..full_cfg.clone()
    };
    let mut first = Trainer::new(first_cfg, fresh(&full_cfg, 2)).unwrap();
    let mut history = first.run(problem.source()).unwrap();
    drop(first);

    let mut resumed = Trainer::resume(full_cfg, load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.step_count(), 25);
    history.extend(resumed.run(problem.source()).unwrap());

    assert_eq!(history.len(), straight_history.len());
    for (a, b) in history.iter().zip(&straight_history) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits(), "step {}", a.0);
    }
    for (a, b) in resumed.params().tensors().iter().zip(straight.params().tensors()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn saved_network_predicts_identically_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let problem = ProblemSpec::Deblur {
        side: 4,
        taps: vec![0.25, 0.5, 0.25],
        noise_std: 0.01,
        condition_stride: Some(2),
    }
    .build()
    .unwrap();
    let cfg = TrainConfig {
        arch: ArchSpec {
            double_forward: true,
            ..small_arch()
        },
        steps: 10,
        batch: 8,
        ..TrainConfig::default()
    };
    let params = train_new(&cfg, problem.source()).unwrap().params;
    let path = dir.path().join("net.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            params: params.clone(),
            training: None,
        },
    )
    .unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.training.is_none());

    let batch = problem.source().sample_pairs(&mut worker_rng(5, 0), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let times: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
    let cond = batch.condition.as_ref().map(|c| c.view());
    let a = predict_batch(&params, batch.y1.view(), cond, &times).unwrap();
    let b = predict_batch(&back.params, batch.y1.view(), cond, &times).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_finite_data_aborts_with_step_and_hash() {
    struct Broken;
    impl bridgekit::problems::PairSource for Broken {
        fn state_dim(&self) -> usize {
            2
        }
        fn cond_dim(&self) -> usize {
            0
        }
        fn sample_pairs(
            &self,
            rng: &mut dyn rand::RngCore,
            n: usize,
        ) -> bridgekit::Result<bridgekit::problems::PairBatch> {
            let mut x0 = Array2::from_shape_simple_fn((n, 2), || rng.sample::<f64, _>(StandardNormal));
            x0[[0, 0]] = f64::NAN;
            Ok(bridgekit::problems::PairBatch {
                y1: x0.clone(),
                x0,
                condition: None,
            })
        }
    }
    let cfg = TrainConfig {
        arch: small_arch(),
        steps: 3,
        batch: 4,
        ..TrainConfig::default()
    };
    let hash = |r| match r {
        Err(bridgekit::Error::NonFiniteLoss { step, inputs_hash }) => {
            assert_eq!(step, 0);
            inputs_hash
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    };
    let a = hash(train_new(&cfg, &Broken).map(|_| ()));
    let b = hash(train_new(&cfg, &Broken).map(|_| ()));
    assert_eq!(a, b);
}
