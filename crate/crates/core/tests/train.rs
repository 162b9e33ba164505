mod common;

use std::sync::Arc;

use common::*;
use tokentrack_core::checkpoint::Checkpoint;
use tokentrack_core::params::ParamGroup;
use tokentrack_core::train::{
    lr_schedule, optimizer_step, train, train_clip_step, AdamState, OptimConfig, TrainConfig, TrainSetup, TrainState,
};
use tokentrack_core::world::{gen_sequence, sample_clips, SamplerConfig, SyntheticSequence, WorldSpec};
use tokentrack_core::{Error, Model, ModelConfig, ParamStore, Variant};
use tokentrack_tensor::Tensor;

#[test]
fn lr_schedule_examples() {
    let cfg = OptimConfig::default();
    assert_eq!(lr_schedule(1, 150, &cfg), (4e-5, 4e-4));
    assert_eq!(lr_schedule(119, 150, &cfg), (4e-5, 4e-4));
    let (b, o) = lr_schedule(120, 150, &cfg);
    assert!((b - 4e-6).abs() < 1e-20 && (o - 4e-5).abs() < 1e-19);
    assert_eq!(cfg.decay_epoch(40), 32);
    assert_eq!(lr_schedule(31, 40, &cfg), (4e-5, 4e-4));
    assert!(lr_schedule(32, 40, &cfg).0 < 4e-5);
    assert_eq!(cfg.decay_epoch(1), 1);
}

#[test]
fn optimizer_config_is_validated() {
    let ok = OptimConfig::default();
    assert!(ok.validate(10).is_ok());
    assert!(OptimConfig {
        lr_backbone: 1e-3,
        ..ok.clone()
    }
    .validate(10)
    .is_err());
    assert!(OptimConfig {
        beta1: 1.0,
        ..ok.clone()
    }
    .validate(10)
    .is_err());
    assert!(ok.validate(0).is_err());
}

fn one_param(value: Vec<f64>, group: ParamGroup) -> ParamStore {
    let mut s = ParamStore::new();
    let n = value.len();
    s.add("p", group, Tensor::from_vec(vec![n], value));
    s
}

#[test]
fn adamw_zero_gradient_only_decays() {
    let cfg = OptimConfig::default();
    let mut store = one_param(vec![2.0, -1.0], ParamGroup::Other);
    let mut st = AdamState::new(&store);
    optimizer_step(&mut store, &[Tensor::zeros(vec![2])], &mut st, (0.1, 0.5), &cfg).unwrap();
    let p = store.get(store.find("p").unwrap()).data();
    assert!((p[0] - 2.0 * (1.0 - 0.5 * 1e-4)).abs() < 1e-15);
    assert!((p[1] + 1.0 * (1.0 - 0.5 * 1e-4)).abs() < 1e-15);
    assert_eq!(st.t, 1);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    // p² at p = 3: gradient 6, bias-corrected step is lr·g/(|g|+eps)
    let mut store = one_param(vec![3.0], ParamGroup::Backbone);
    let mut st = AdamState::new(&store);
    optimizer_step(
        &mut store,
        &[Tensor::from_vec(vec![1], vec![6.0])],
        &mut st,
        (0.01, 0.1),
        &cfg,
    )
    .unwrap();
    let p = store.get(store.find("p").unwrap()).data()[0];
    assert!((p - (3.0 - 0.01 * 6.0 / (6.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut store = one_param(vec![3.0, -2.0, 0.5], ParamGroup::Other);
    let id = store.find("p").unwrap();
    let mut st = AdamState::new(&store);
    for _ in 0..200 {
        let g: Vec<f64> = store.get(id).data().iter().map(|p| 2.0 * p).collect();
        optimizer_step(&mut store, &[Tensor::from_vec(vec![3], g)], &mut st, (0.01, 0.1), &cfg).unwrap();
    }
    let f: f64 = store.get(id).data().iter().map(|p| p * p).sum();
    assert!(f < 1e-2, "{f}");
}

#[test]
fn adamw_rejects_non_finite_gradients_without_touching_anything() {
    let cfg = OptimConfig::default();
    let mut store = one_param(vec![1.0, 2.0], ParamGroup::Other);
    let before = store.clone();
    let mut st = AdamState::new(&store);
    let err = optimizer_step(
        &mut store,
        &[Tensor::from_vec(vec![2], vec![0.5, f64::NAN])],
        &mut st,
        (0.1, 0.1),
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert_eq!(
        store.get(store.find("p").unwrap()),
        before.get(before.find("p").unwrap())
    );
    assert_eq!(st, AdamState::new(&store));
}

fn static_world(n: usize) -> Vec<SyntheticSequence> {
    (0..n)
        .map(|i| gen_sequence(&WorldSpec::static_target(96, 96, 12), i as u64).unwrap())
        .collect()
}

#[test]
fn clip_step_is_finite_and_reaches_the_track_seed() {
    let seqs = static_world(1);
    let cfg = toy_config(Variant::MambaCross, 3);
    let (model, store) = Model::init(&cfg, 0).unwrap();
    let sampler = SamplerConfig {
        clips: 1,
        frames: 3,
        ..Default::default()
    };
    let clip = sample_clips(&seqs, &sampler, 32, 64, 1).unwrap().clips.remove(0);
    let (lb, grads) = train_clip_step(&model, &store, &clip).unwrap();
    assert!(lb.is_finite() && lb.total > 0.0);
    assert_eq!(lb.total, lb.cls + 2.0 * lb.giou + 5.0 * lb.l1);
    let seed = store.find("track.seed").unwrap().index();
    assert!(grads[seed].data().iter().any(|&g| g != 0.0));
    assert!(grads.iter().all(Tensor::is_finite));
}

struct Run {
    store: ParamStore,
    state: TrainState,
    log: String,
}

fn run_training(
    cfg: &ModelConfig,
    seqs: &Arc<Vec<SyntheticSequence>>,
    train_cfg: &TrainConfig,
    optim: &OptimConfig,
    clips: usize,
    resume: Option<(ParamStore, TrainState)>,
) -> Run {
    let sampler = SamplerConfig {
        clips,
        frames: cfg.temporal.window,
        ..Default::default()
    };
    run_with(cfg, seqs, train_cfg, optim, &sampler, resume)
}

fn run_with(
    cfg: &ModelConfig,
    seqs: &Arc<Vec<SyntheticSequence>>,
    train_cfg: &TrainConfig,
    optim: &OptimConfig,
    sampler: &SamplerConfig,
    resume: Option<(ParamStore, TrainState)>,
) -> Run {
    let (model, fresh) = Model::init(cfg, 5).unwrap();
    let (mut store, mut state) = resume.unwrap_or_else(|| {
        let s = TrainState::new(&fresh);
        (fresh, s)
    });
    let setup = TrainSetup {
        sequences: Arc::clone(seqs),
        sampler,
        optim,
        train: train_cfg,
        seed: 17,
    };
    let mut log = Vec::new();
    train(&model, &mut store, &mut state, &setup, &mut log, &mut |_, _| Ok(())).unwrap();
    Run {
        store,
        state,
        log: String::from_utf8(log).unwrap(),
    }
}

fn fast_optim() -> OptimConfig {
    OptimConfig {
        lr_backbone: 1e-3,
        lr_other: 3e-3,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_and_resumes_exactly() {
    let seqs = Arc::new(static_world(2));
    let cfg = toy_config(Variant::SelfCross, 2);
    let tc = TrainConfig {
        epochs: 2,
        clips_per_epoch: 6,
        accumulation: 1,
    };
    let optim = fast_optim();
    let a = run_training(&cfg, &seqs, &tc, &optim, 2, None);
    let b = run_training(&cfg, &seqs, &tc, &optim, 2, None);
    assert_eq!(a.store, b.store);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.lines().count(), 6);
    assert_eq!(a.state.step, 6);

    // stop after the first epoch, round-trip through checkpoint bytes, resume
    let first = {
        let (model, mut store) = Model::init(&cfg, 5).unwrap();
        let mut state = TrainState::new(&store);
        let sampler = SamplerConfig {
            clips: 2,
            frames: 2,
            ..Default::default()
        };
        let setup = TrainSetup {
            sequences: Arc::clone(&seqs),
            sampler: &sampler,
            optim: &optim,
            train: &tc,
            seed: 17,
        };
        let mut saved = None;
        let stopped = train(&model, &mut store, &mut state, &setup, &mut Vec::new(), &mut |s, p| {
            saved = Some(Checkpoint::capture("", p, Some(s)).to_bytes());
            Err(Error::Contract("stop after the first epoch".into()))
        });
        assert!(stopped.is_err());
        saved.expect("first epoch finished")
    };
    let ck = Checkpoint::from_bytes(&first).unwrap();
    assert_eq!(ck.epoch, 1);
    let (_, mut store) = Model::init(&cfg, 99).unwrap();
    ck.restore_params(&mut store).unwrap();
    let state = ck.restore_state(&store).unwrap().unwrap();
    let resumed = run_training(&cfg, &seqs, &tc, &optim, 2, Some((store, state)));
    assert_eq!(resumed.store, a.store);
    assert_eq!(
        resumed.log,
        a.log.lines().skip(3).map(|l| format!("{l}\n")).collect::<String>()
    );
}

#[test]
fn training_log_has_one_line_per_step() {
    let seqs = Arc::new(static_world(1));
    let cfg = toy_config(Variant::MambaCross, 2);
    let tc = TrainConfig {
        epochs: 2,
        clips_per_epoch: 4,
        accumulation: 2,
    };
    let r = run_training(&cfg, &seqs, &tc, &fast_optim(), 1, None);
    let lines: Vec<&str> = r.log.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<f64> = l.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[0] as usize, i + 1);
        assert!((f[6] - (f[3] + 2.0 * f[4] + 5.0 * f[5])).abs() < 1e-12);
    }
    // decay starts at round(0.8·2) = 2
    assert!(lines[2].split_whitespace().nth(2).unwrap().parse::<f64>().unwrap() < 3e-3);
}

/// Each temporal variant should overfit a motionless target quickly.
#[test]
fn smoke_training_halves_the_loss() {
    let seqs = Arc::new(static_world(2));
    for variant in [Variant::MambaCross, Variant::SelfCross, Variant::SelfSelf] {
        let cfg = toy_config(variant, 2);
        let tc = TrainConfig {
            epochs: 1,
            clips_per_epoch: 200,
            accumulation: 1,
        };
        let optim = OptimConfig {
            lr_backbone: 3e-3,
            lr_other: 1e-2,
            decay_factor: 1.0,
            ..Default::default()
        };
        let sampler = SamplerConfig {
            clips: 1,
            frames: 2,
            center_jitter: 0.0,
            scale_jitter: (1.0, 1.0),
            brightness: 0.0,
            flip: false,
            ..Default::default()
        };
        let r = run_with(&cfg, &seqs, &tc, &optim, &sampler, None);
        let totals: Vec<f64> = r
            .log
            .lines()
            .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
            .collect();
        assert_eq!(totals.len(), 200);
        let tail: f64 = totals[190..].iter().sum::<f64>() / 10.0;
        assert!(tail <= 0.5 * totals[0], "{variant:?}: {} -> {tail}", totals[0]);
    }
}
