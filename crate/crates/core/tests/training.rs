use ctn_core::fusion::{CtnConfig, FusionConfig};
use ctn_core::swin3d::SwinConfig;
use ctn_core::train::{fit, load_checkpoint, load_model, predict_mask, Dataset, Sample, TrainConfig};
use ctn_core::unet3d::UnetConfig;
use ctn_core::volio::{generate_phantom, PhantomSpec};

fn tiny_model(n: usize) -> CtnConfig {
    CtnConfig {
        unet: UnetConfig {
            stage_channels: [4, 8, 12, 16],
            ..UnetConfig::default()
        },
        swin: SwinConfig {
            patch_size: [2; 3],
            stage_channels: [4, 8, 16, 32],
            stage_depths: [2, 2, 2, 2],
            num_heads: [1, 1, 2, 2],
            ..SwinConfig::default()
        },
        fusion: FusionConfig {
            enabled_stages: vec![1, 2],
            ..FusionConfig::default()
        },
        input_size: [n; 3],
    }
}

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        grid_size: 20,
        aorta_radius_range: (3.0, 3.0),
        coronary_radius_range: (1.0, 1.5),
        branch_depth: 2,
        ..PhantomSpec::default()
    }
}

fn dataset(n: usize, count: u64) -> Dataset {
    let train = (0..count)
        .map(|seed| {
            let (v, l) = generate_phantom(&small_spec(seed)).unwrap();
            Sample::new(format!("p{seed}"), &v, &l, [n; 3]).unwrap()
        })
        .collect();
    Dataset { train, val: vec![] }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 1e-3,
        lr_decay_every: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn step_count_follows_batch_size() {
    let data = dataset(16, 4);
    let cfg = TrainConfig {
        batch_size: 2,
        ..train_cfg(2)
    };
    let out = fit(&tiny_model(16), &cfg, &data, None, None, &mut |_| {}).unwrap();
    assert_eq!(out.steps.len(), 4);
    assert_eq!(out.epochs.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4]);
    assert_eq!(out.state.optimizer.t, 4);
    assert!(out.steps.iter().all(|s| s.loss.is_finite()));
}

#[test]
fn same_seed_same_parameters() {
    let data = dataset(16, 2);
    let a = fit(&tiny_model(16), &train_cfg(2), &data, None, None, &mut |_| {}).unwrap();
    let b = fit(&tiny_model(16), &train_cfg(2), &data, None, None, &mut |_| {}).unwrap();
    assert_eq!(a.state, b.state);
    let other = TrainConfig { seed: 8, ..train_cfg(2) };
    let c = fit(&tiny_model(16), &other, &data, None, None, &mut |_| {}).unwrap();
    assert_ne!(a.state.params, c.state.params);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(16, 2);
    let model = tiny_model(16);
    let full = fit(&model, &train_cfg(4), &data, None, None, &mut |_| {}).unwrap();

    fit(&model, &train_cfg(2), &data, Some(dir.path()), None, &mut |_| {}).unwrap();
    let (saved, state) = load_checkpoint(&dir.path().join("last")).unwrap();
    assert_eq!(saved.model, model);
    assert_eq!(state.epoch, 2);
    let resumed = fit(&model, &train_cfg(4), &data, Some(dir.path()), Some(state), &mut |_| {}).unwrap();
    assert_eq!(resumed.state, full.state);

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "step").count(), 8);
    assert_eq!(kinds.iter().filter(|k| *k == "epoch").count(), 4);
}

#[test]
fn resume_rejects_other_architecture() {
    let data = dataset(16, 1);
    let state = fit(&tiny_model(16), &train_cfg(1), &data, None, None, &mut |_| {}).unwrap().state;
    let mut other = tiny_model(16);
    other.fusion.enabled_stages = vec![1, 2, 3];
    assert!(fit(&other, &train_cfg(2), &data, None, Some(state), &mut |_| {}).is_err());
}

#[test]
fn predictions_return_to_input_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(16, 1);
    let model = tiny_model(16);
    fit(&model, &train_cfg(1), &data, Some(dir.path()), None, &mut |_| {}).unwrap();
    let (cfg, params) = load_model(&dir.path().join("best")).unwrap();
    assert_eq!(cfg, model);
    let spec = PhantomSpec {
        grid_size: 24,
        spacing: [0.7, 0.8, 0.9],
        ..small_spec(3)
    };
    let (volume, _) = generate_phantom(&spec).unwrap();
    let net = {
        let mut s = ctn_core::params::ParamStore::new();
        ctn_core::fusion::Ctn::new(&cfg, &mut s, 0).unwrap()
    };
    let mask = predict_mask(&net, &params, &volume).unwrap();
    assert_eq!(mask.shape(), [24; 3]);
    assert_eq!(mask.spacing, [0.7, 0.8, 0.9]);
    assert!(mask.data().iter().all(|&v| v <= 2));
}

#[test]
fn empty_train_split_is_an_error() {
    let data = Dataset { train: vec![], val: vec![] };
    assert!(fit(&tiny_model(16), &train_cfg(1), &data, None, None, &mut |_| {}).is_err());
}

#[test]
fn predict_resizes_80_to_64_and_back() {
    let cfg = tiny_model(64);
    let mut params = ctn_core::params::ParamStore::new();
    let net = ctn_core::fusion::Ctn::new(&cfg, &mut params, 0).unwrap();
    let (volume, _) = generate_phantom(&PhantomSpec {
        grid_size: 80,
        ..small_spec(9)
    })
    .unwrap();
    let a = predict_mask(&net, &params, &volume).unwrap();
    let b = predict_mask(&net, &params, &volume).unwrap();
    assert_eq!(a.shape(), [80; 3]);
    assert_eq!(a.data(), b.data());

    // A head that is confident in background everywhere predicts an all-zero mask.
    let bias = params.get_mut("unet.head.bias").unwrap();
    bias.data_mut().copy_from_slice(&[1e6, -1e6, -1e6]);
    let z = predict_mask(&net, &params, &volume).unwrap();
    assert!(z.data().iter().all(|&v| v == 0));
}
