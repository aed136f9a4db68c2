mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sedloss::losses::LossSpec;
use sedloss::model::{init_params, read_checkpoint, write_checkpoint};
use sedloss::trainer::{dataset_loss, model_dims, train, TrainConfig, INIT_SEED_OFFSET};

use common::separable_toy;

fn toy_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_clips: 2,
        hidden: 8,
        window_radius: 0,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_lowers_loss_on_separable_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ds = separable_toy(&mut rng, 8, 40);
    for loss in [
        LossSpec::Bce,
        LossSpec::afl(0.0625, 1.0),
        LossSpec::fbtl(0.6, 0.4, 0.001),
    ] {
        let cfg = toy_cfg().with_loss(loss);
        let init = init_params(cfg.seed + INIT_SEED_OFFSET, model_dims(&cfg, &ds)).unwrap();
        let before = dataset_loss(&init, &ds, &loss).unwrap();
        let run = train(&cfg, &ds, &ds).unwrap();
        let after = dataset_loss(&run.final_params, &ds, &loss).unwrap();
        assert!(after < before, "{loss}: {after} !< {before}");
    }
}

#[test]
fn small_full_batch_bce_step_does_not_increase_loss() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ds = separable_toy(&mut rng, 3, 10);
        let cfg = TrainConfig {
            batch_clips: 3,
            learning_rate: 1e-4,
            seed,
            ..toy_cfg()
        };
        let init = init_params(seed + INIT_SEED_OFFSET, model_dims(&cfg, &ds)).unwrap();
        let before = dataset_loss(&init, &ds, &LossSpec::Bce).unwrap();
        let run = train(&cfg, &ds, &ds).unwrap();
        let after = dataset_loss(&run.final_params, &ds, &LossSpec::Bce).unwrap();
        assert!(after <= before, "seed {seed}: {after} > {before}");
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = separable_toy(&mut rng, 6, 30);
    let cfg = TrainConfig {
        epochs: 3,
        ..toy_cfg().with_loss(LossSpec::ifl(1.0))
    };
    let a = train(&cfg, &ds, &ds).unwrap();
    let b = train(&cfg, &ds, &ds).unwrap();
    assert_eq!(a, b);
    let c = train(&cfg.with_seed(1), &ds, &ds).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn trained_parameters_survive_a_checkpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ds = separable_toy(&mut rng, 4, 20);
    let run = train(&toy_cfg(), &ds, &ds).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&run.final_params, &mut buf).unwrap();
    assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), run.final_params);
}
