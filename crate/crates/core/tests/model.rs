mod common;

use common::*;
use tokentrack_core::backbone::Backbone;
use tokentrack_core::gradcheck::param_grad_check;
use tokentrack_core::head::{decode_box, guide, hamming_prior, CenterHead, HeadMaps};
use tokentrack_core::objectives::{
    box_loss_value, focal_loss, giou_loss, l1_loss, make_target_map, FOCAL_ALPHA, FOCAL_BETA,
};
use tokentrack_core::params::{Bound, Init, ParamStore};
use tokentrack_core::train::clip_loss;
use tokentrack_core::world::{sample_clips, SamplerConfig, WorldConfig};
use tokentrack_core::{iou, BBox, Mode, Model, Variant};
use tokentrack_tensor::{Coords, Graph, Tensor, DEFAULT_EPS};

fn tiny_world() -> Vec<tokentrack_core::world::SyntheticSequence> {
    WorldConfig {
        sequences: 2,
        frames: 12,
        width: 96,
        height: 96,
        target_min: 12.0,
        target_max: 16.0,
        occlusions: 0,
        ..Default::default()
    }
    .generate(3)
    .unwrap()
}

#[test]
fn backbone_gradients() {
    let cfg = toy_config(Variant::MambaCross, 2);
    let (model, mut store) = Model::init(&cfg, 1).unwrap();
    jitter_params(&mut store, 2, 0.02);
    let mut r = rng(5);
    let template = randn(&mut r, &[32 * 32, 3], 1.0);
    let search = randn(&mut r, &[64 * 64, 3], 1.0);
    let err = param_grad_check(
        &store,
        |b| {
            let t = b.g.constant(template.clone());
            let s = b.g.constant(search.clone());
            let tt = model.backbone.embed_template(b, t)?;
            let (track, x) = model.encode_frame(b, tt, s)?;
            let x = b.g.mul(x, x)?;
            let x = b.g.sum(x);
            let tr = b.g.sum(track.expect("track token"));
            Ok(b.g.add(x, tr)?)
        },
        DEFAULT_EPS,
        Coords::Strided(6),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn head_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let head = CenterHead::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        8,
        4,
        &Default::default(),
    );
    jitter_params(&mut store, 3, 0.05);
    assert_eq!(store.numel(), CenterHead::param_count(8, &Default::default()));
    let x = randn(&mut rng(4), &[16, 8], 1.0);
    let err = param_grad_check(
        &store,
        |b| {
            let xv = b.g.constant(x.clone());
            let h = head.forward(b, xv)?;
            let s = b.g.sum(h.score);
            let o = b.g.mul(h.offset, h.size)?;
            let o = b.g.sum(o);
            Ok(b.g.add(s, o)?)
        },
        DEFAULT_EPS,
        Coords::All,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn full_pipeline_gradients() {
    let seqs = tiny_world();
    let sampler = SamplerConfig {
        clips: 1,
        frames: 4,
        ..Default::default()
    };
    let clip = sample_clips(&seqs, &sampler, 32, 64, 9).unwrap().clips.remove(0);
    for (variant, token, temporal) in [
        (Variant::MambaCross, true, true),
        (Variant::SelfCross, true, true),
        (Variant::SelfSelf, true, true),
        (Variant::MambaCross, true, false),
        (Variant::MambaCross, false, false),
    ] {
        let mut cfg = toy_config(variant, 4);
        cfg.track_token = token;
        cfg.temporal_module = temporal;
        let (model, mut store) = Model::init(&cfg, 2).unwrap();
        jitter_params(&mut store, 7, 0.02);
        let err = param_grad_check(
            &store,
            |b| Ok(clip_loss(&model, b, &clip)?.total),
            DEFAULT_EPS,
            Coords::Strided(4),
        )
        .unwrap();
        assert!(err < 1e-4, "{:?}: {err}", cfg.mode());
    }
}

#[test]
fn track_token_sits_in_front_and_is_dropped_without_it() {
    let mut cfg = toy_config(Variant::MambaCross, 2);
    let (model, store) = Model::init(&cfg, 3).unwrap();
    let mut b = Bound::infer(&store);
    let t = b.g.constant(randn(&mut rng(1), &[32 * 32, 3], 1.0));
    let s = b.g.constant(randn(&mut rng(2), &[64 * 64, 3], 1.0));
    let tt = model.backbone.embed_template(&mut b, t).unwrap();
    let (track, search) = model.encode_frame(&mut b, tt, s).unwrap();
    assert_eq!(b.g.shape(track.unwrap()), &[1, 16]);
    assert_eq!(b.g.shape(search), &[16, 16]);

    cfg.track_token = false;
    cfg.temporal_module = false;
    assert_eq!(cfg.mode(), Mode::Baseline);
    let (model, store) = Model::init(&cfg, 3).unwrap();
    let mut b = Bound::infer(&store);
    let t = b.g.constant(randn(&mut rng(1), &[32 * 32, 3], 1.0));
    let s = b.g.constant(randn(&mut rng(2), &[64 * 64, 3], 1.0));
    let tt = model.backbone.embed_template(&mut b, t).unwrap();
    let (track, _) = model.encode_frame(&mut b, tt, s).unwrap();
    assert!(track.is_none());
    assert!(store
        .iter()
        .all(|(_, n, _)| !n.starts_with("temporal.") && !n.starts_with("track.") && n != "backbone.pos.track"));
}

#[test]
fn temporal_without_track_token_is_rejected() {
    let mut cfg = toy_config(Variant::MambaCross, 2);
    cfg.track_token = false;
    assert!(Model::init(&cfg, 0).is_err());
}

#[test]
fn image_tensor_standardizes() {
    let px = vec![0.485, 0.456, 0.406, 1.0, 1.0, 1.0];
    assert!(Backbone::image_tensor(&px, 1).is_err());
    let t = Backbone::image_tensor(&[0.485, 0.456, 0.406], 1).unwrap();
    assert!(t.data().iter().all(|v| v.abs() < 1e-15));
}

fn guide_values(x: &Tensor, track: &Tensor) -> (Tensor, Vec<f64>) {
    let store = ParamStore::new();
    let mut b = Bound::infer(&store);
    let xv = b.g.constant(x.clone());
    let tv = b.g.constant(track.clone());
    let (adj, s) = guide(&mut b, xv, tv).unwrap();
    (b.g.value(adj).clone(), b.g.value(s).data().to_vec())
}

#[test]
fn guidance_examples() {
    let x = Tensor::from_vec(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]);
    let (adj, s) = guide_values(&x, &Tensor::zeros(vec![1, 4]));
    assert_eq!(s, vec![0.5, 0.5]);
    let half: Vec<f64> = x.data().iter().map(|v| v * 0.5).collect();
    assert_eq!(adj.data(), &half[..]);

    // S = sigmoid(x·t/√D) with √D = 2
    let t = Tensor::from_vec(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]);
    let (_, s) = guide_values(&x, &t);
    assert!((s[0] - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    assert!((s[1] - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
}

#[test]
fn guidance_is_monotone_in_similarity() {
    let t = Tensor::from_vec(vec![1, 3], vec![0.3, -0.2, 0.9]);
    let rows: Vec<f64> = (0..5)
        .flat_map(|k| [0.3 * k as f64, -0.2 * k as f64, 0.9 * k as f64])
        .collect();
    let (_, s) = guide_values(&Tensor::from_vec(vec![5, 3], rows), &t);
    assert!(s.windows(2).all(|w| w[1] > w[0]));
    assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn guidance_rejects_mismatched_track() {
    let store = ParamStore::new();
    let mut b = Bound::infer(&store);
    let x = b.g.constant(Tensor::zeros(vec![2, 4]));
    let t = b.g.constant(Tensor::zeros(vec![1, 3]));
    assert!(guide(&mut b, x, t).is_err());
}

/// Loop form of the penalty-reduced focal loss.
fn focal_oracle(pred: &[f64], target: &[f64]) -> f64 {
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let mut pos = 0.0;
    let mut sum = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        if y == 1.0 {
            pos += 1.0;
            sum += (1.0 - p).powi(a) * p.ln();
        } else {
            sum += (1.0 - y).powi(b) * p.powi(a) * (1.0 - p).ln();
        }
    }
    -sum / f64::max(pos, 1.0)
}

#[test]
fn focal_loss_matches_loop() {
    for seed in 0..5 {
        let g = 6;
        let gt = BBox::new(0.2 + 0.1 * seed as f64, 0.55, 0.3, 0.2);
        let target = make_target_map(&gt, g).unwrap();
        let mut r = rng(seed);
        let pred: Vec<f64> = (0..g * g).map(|_| rand::Rng::gen_range(&mut r, 0.01..0.99)).collect();
        let mut graph = Graph::new();
        let p = graph.constant(Tensor::from_vec(vec![g * g, 1], pred.clone()));
        let (loss, clamped) = focal_loss(&mut graph, p, &target).unwrap();
        assert!(!clamped);
        let err = (graph.value(loss).item() - focal_oracle(&pred, &target.values)).abs();
        assert!(err < 1e-12, "{err}");
    }
}

#[test]
fn focal_loss_reports_clamping() {
    let target = make_target_map(&BBox::new(0.5, 0.5, 0.5, 0.5), 2).unwrap();
    let mut graph = Graph::new();
    let p = graph.constant(Tensor::from_vec(vec![4, 1], vec![0.0, 0.5, 0.5, 1.0]));
    let (loss, clamped) = focal_loss(&mut graph, p, &target).unwrap();
    assert!(clamped);
    assert!(graph.value(loss).item().is_finite());
}

#[test]
fn giou_examples_and_properties() {
    let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
    let touching = BBox::from_corners(1.0, 1.0, 2.0, 2.0);
    assert!((box_loss_value(&a, &touching, giou_loss).unwrap() - 1.5).abs() < 1e-12);
    assert!(box_loss_value(&a, &a, giou_loss).unwrap().abs() < 1e-15);
    let far = BBox::from_corners(100.0, 100.0, 101.0, 101.0);
    let v = box_loss_value(&a, &far, giou_loss).unwrap();
    assert!(v < 2.0 && v > 1.99);

    let mut r = rng(21);
    for _ in 0..200 {
        let mut b = || {
            BBox::new(
                rand::Rng::gen_range(&mut r, 0.0..1.0),
                rand::Rng::gen_range(&mut r, 0.0..1.0),
                rand::Rng::gen_range(&mut r, 0.05..0.5),
                rand::Rng::gen_range(&mut r, 0.05..0.5),
            )
        };
        let (p, t) = (b(), b());
        let l = box_loss_value(&p, &t, giou_loss).unwrap();
        assert!(l >= 1.0 - iou(&p, &t) - 1e-12);
        assert!((0.0..2.0).contains(&l));
        let shifted = box_loss_value(&p.translate(0.37, -0.21), &t.translate(0.37, -0.21), giou_loss).unwrap();
        assert!((l - shifted).abs() < 1e-12);
    }
}

#[test]
fn l1_example() {
    let p = BBox::new(0.5, 0.5, 0.2, 0.2);
    let t = BBox::new(0.55, 0.45, 0.2, 0.2);
    assert!((box_loss_value(&p, &t, l1_loss).unwrap() - 0.025).abs() < 1e-15);
}

fn peaked_maps(g: usize, seed: u64) -> HeadMaps {
    let mut r = rng(seed);
    let n = g * g;
    HeadMaps {
        grid: g,
        score: (0..n).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect(),
        offset: (0..2 * n).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect(),
        size: (0..2 * n).map(|_| rand::Rng::gen_range(&mut r, 0.05..1.0)).collect(),
    }
}

#[test]
fn decode_is_invariant_to_positive_scaling() {
    for seed in 0..10 {
        let m = peaked_maps(6, seed);
        let prior = hamming_prior(6).unwrap();
        for k in [1e-3, 0.5, 7.0, 1e6] {
            let mut scaled = m.clone();
            scaled.score.iter_mut().for_each(|v| *v *= k);
            assert_eq!(decode_box(&scaled, None).unwrap(), decode_box(&m, None).unwrap());
            assert_eq!(
                decode_box(&scaled, Some(&prior)).unwrap(),
                decode_box(&m, Some(&prior)).unwrap()
            );
        }
        let ones = vec![1.0; 36];
        assert_eq!(decode_box(&m, Some(&ones)).unwrap(), decode_box(&m, None).unwrap());
    }
}
