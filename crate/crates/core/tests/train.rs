mod common;

use common::random_vec;
use mamba_home::gradcheck::{check_inputs, GradcheckConfig};
use mamba_home::io::load_checkpoint;
use mamba_home::metrics::LabelVolume;
use mamba_home::network::{Network, NetworkConfig};
use mamba_home::train::{
    batch_loss, dead_parameters, dice_ce_loss, synth_volumes, train_loop, CheckpointPlan, TrainConfig,
};
use mamba_home::{Error, ParamStore, Tape, Tensor};

fn short(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 2,
        epochs: 100,
        max_steps: Some(steps),
        seed,
        ..Default::default()
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let labels: Vec<u8> = random_vec(64, 3).iter().map(|v| (*v > 0.2) as u8).collect();
    let target = LabelVolume::new([4, 4, 4], labels).unwrap();
    let logits = Tensor::new([1, 2, 4, 4, 4], random_vec(128, 4)).unwrap();
    let report = check_inputs(&[logits], &GradcheckConfig::default(), |_, v| dice_ce_loss(v[0], &[&target])).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
    assert_eq!(report.probes.len(), 128);
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let data = synth_volumes(1, 1, [8, 8, 8], 3).unwrap();
    let mut store = ParamStore::new(0);
    let net = Network::new(&mut store, NetworkConfig::tiny()).unwrap();
    let before = store.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 1,
        epochs: 5,
        ..Default::default()
    };
    let history = train_loop(&net, &mut store, &data, &cfg, None, |_| {}).unwrap();
    let losses = history.losses();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
    for id in store.ids() {
        assert_eq!(store.get(id), before.get(id));
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = synth_volumes(2, 3, [8, 8, 8], 3).unwrap();
    let run = |seed| {
        let mut store = ParamStore::new(seed);
        let net = Network::new(&mut store, NetworkConfig::tiny()).unwrap();
        let h = train_loop(&net, &mut store, &data, &short(seed, 4), None, |_| {}).unwrap();
        (h, store)
    };
    let (h1, s1) = run(5);
    let (h2, s2) = run(5);
    assert_eq!(h1, h2);
    for id in s1.ids() {
        assert_eq!(s1.get(id), s2.get(id));
    }
    let (h3, _) = run(6);
    assert_ne!(h1.losses(), h3.losses());
    assert!(h1.losses().iter().all(|l| l.is_finite()));
}

#[test]
fn every_parameter_receives_gradient() {
    let data = synth_volumes(4, 2, [16, 16, 16], 3).unwrap();
    let mut store = ParamStore::new(8);
    let net = Network::new(&mut store, NetworkConfig::tiny()).unwrap();
    let tape = Tape::new();
    let (loss, _) = batch_loss(&tape, &net, &store, &[&data[0], &data[1]]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let dead = dead_parameters(&store, &grads);
    assert!(dead.is_empty(), "{dead:?}");
    assert!(store.ids().any(|id| store.name(id).ends_with(".slots")));
    assert!(store.ids().any(|id| store.name(id).contains(".expert2.")));
}

#[test]
fn checkpoints_are_written_and_restorable() {
    let dir = std::env::temp_dir().join(format!("mamba-home-train-{}", std::process::id()));
    let path = dir.join("run.json");
    let data = synth_volumes(3, 2, [8, 8, 8], 3).unwrap();
    let mut store = ParamStore::new(1);
    let net = Network::new(&mut store, NetworkConfig::tiny()).unwrap();
    let plan = CheckpointPlan {
        path: &path,
        every: Some(2),
    };
    let history = train_loop(&net, &mut store, &data, &short(1, 3), Some(plan), |_| {}).unwrap();
    assert_eq!(history.steps.len(), 3);
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.manifest.step, 3);
    assert_eq!(ck.manifest.network, NetworkConfig::tiny());
    let mut fresh = ParamStore::new(99);
    Network::new(&mut fresh, NetworkConfig::tiny()).unwrap();
    ck.restore(&mut fresh).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id), fresh.get(id));
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn non_finite_input_aborts_with_the_step() {
    let mut data = synth_volumes(3, 1, [8, 8, 8], 3).unwrap();
    data[0].image.data_mut()[17] = f64::NAN;
    let mut store = ParamStore::new(1);
    let net = Network::new(&mut store, NetworkConfig::tiny()).unwrap();
    let err = train_loop(&net, &mut store, &data, &short(0, 2), None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0 }), "{err}");
}

#[test]
fn invalid_train_config_is_rejected() {
    let data = synth_volumes(3, 1, [8, 8, 8], 3).unwrap();
    let mut store = ParamStore::new(1);
    let net = Network::new(&mut store, NetworkConfig::tiny()).unwrap();
    for cfg in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { lr: f64::NAN, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
    ] {
        assert!(matches!(train_loop(&net, &mut store, &data, &cfg, None, |_| {}), Err(Error::Config(_))));
    }
}
