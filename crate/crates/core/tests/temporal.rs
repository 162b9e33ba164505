mod common;

use common::*;
use rand::Rng;
use tokentrack_core::gradcheck::param_grad_check;
use tokentrack_core::params::{Bound, Init, ParamGroup, ParamStore};
use tokentrack_core::temporal::{
    selective_scan, selective_scan_op, AttentionBlock, MambaBlock, MambaDims, TemporalConfig, TemporalModule,
    WindowBuffer,
};
use tokentrack_core::Variant;
use tokentrack_tensor::{grad_check, Coords, Tensor, DEFAULT_EPS};

struct ScanInputs {
    x: Tensor,
    dt: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
}

fn scan_inputs(seed: u64, len: usize, ch: usize, ns: usize) -> ScanInputs {
    let mut r = rng(seed);
    let dt = Tensor::from_vec(vec![len, ch], (0..len * ch).map(|_| r.gen_range(0.05..0.6)).collect());
    let a = Tensor::from_vec(vec![ch, ns], (0..ch * ns).map(|_| -r.gen_range(0.1..2.0)).collect());
    ScanInputs {
        x: randn(&mut r, &[len, ch], 1.0),
        dt,
        a,
        b: randn(&mut r, &[len, ns], 1.0),
        c: randn(&mut r, &[len, ns], 1.0),
        d: randn(&mut r, &[ch], 1.0),
    }
}

/// Direct transcription of the recurrence, one channel and state at a time.
fn naive_scan(s: &ScanInputs) -> Vec<f64> {
    let (len, ch) = s.x.rows_cols();
    let ns = s.a.rows_cols().1;
    let mut y = vec![0.0; len * ch];
    for e in 0..ch {
        for n in 0..ns {
            let mut h = 0.0;
            for t in 0..len {
                let delta = s.dt.at2(t, e);
                h = (delta * s.a.at2(e, n)).exp() * h + delta * s.b.at2(t, n) * s.x.at2(t, e);
                y[t * ch + e] += s.c.at2(t, n) * h;
            }
        }
        for t in 0..len {
            y[t * ch + e] += s.d.data()[e] * s.x.at2(t, e);
        }
    }
    y
}

#[test]
fn scan_matches_naive_recurrence() {
    for seed in 0..5 {
        let s = scan_inputs(seed, 9, 6, 5);
        let y = selective_scan(&s.x, &s.dt, &s.a, &s.b, &s.c, &s.d).unwrap();
        let expect = naive_scan(&s);
        let err = y
            .data()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn scan_rejects_nonpositive_step() {
    let mut s = scan_inputs(1, 3, 2, 2);
    s.dt.data_mut()[4] = 0.0;
    assert!(selective_scan(&s.x, &s.dt, &s.a, &s.b, &s.c, &s.d).is_err());
}

#[test]
fn scan_op_gradients() {
    for seed in 0..3 {
        let s = scan_inputs(seed, 5, 3, 4);
        let inputs = [s.x, s.dt, s.a, s.b, s.c, s.d];
        let err = grad_check(
            |g, v| {
                let y = selective_scan_op(g, v[0], v[1], v[2], v[3], v[4], v[5]).expect("valid scan inputs");
                let w = g.constant(Tensor::from_vec(
                    vec![5, 3],
                    (0..15).map(|i| (i as f64 * 0.37).sin()).collect(),
                ));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &inputs,
            DEFAULT_EPS,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

fn block(seed: u64, dim: usize, heads: usize, cross: bool) -> (ParamStore, AttentionBlock) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let blk = AttentionBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        "blk",
        ParamGroup::Other,
        dim,
        heads,
        2,
        cross,
    );
    jitter_params(&mut store, seed + 100, 0.1);
    (store, blk)
}

fn run_block(store: &ParamStore, blk: &AttentionBlock, q: &Tensor, kv: Option<&Tensor>) -> Tensor {
    let mut b = Bound::infer(store);
    let qv = b.g.constant(q.clone());
    let kvv = match kv {
        Some(t) => b.g.constant(t.clone()),
        None => qv,
    };
    let out = blk.forward(&mut b, qv, kvv).unwrap();
    b.g.value(out).clone()
}

#[test]
fn attention_matches_per_head_loop() {
    for seed in 0..3 {
        let (store, blk) = block(seed, 12, 3, false);
        let x = randn(&mut rng(seed + 7), &[5, 12], 1.0);
        let got = run_block(&store, &blk, &x, None);
        let expect = attention_block(&store, &blk, &rows(&x), &rows(&x));
        assert!(max_abs_diff(&rows(&got), &expect) < 1e-10);

        let (store, blk) = block(seed, 12, 4, true);
        let kv = randn(&mut rng(seed + 8), &[7, 12], 1.0);
        let got = run_block(&store, &blk, &x, Some(&kv));
        let expect = attention_block(&store, &blk, &rows(&x), &rows(&kv));
        assert!(max_abs_diff(&rows(&got), &expect) < 1e-10);
    }
}

#[test]
fn cross_attention_ignores_kv_order() {
    let (store, blk) = block(3, 8, 2, true);
    let q = randn(&mut rng(1), &[3, 8], 1.0);
    let kv = randn(&mut rng(2), &[6, 8], 1.0);
    let mut perm_rows = rows(&kv);
    perm_rows.rotate_left(2);
    perm_rows.swap(0, 3);
    let perm = Tensor::from_vec(vec![6, 8], perm_rows.concat());
    let a = run_block(&store, &blk, &q, Some(&kv));
    let b = run_block(&store, &blk, &q, Some(&perm));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn attention_block_gradients() {
    for cross in [false, true] {
        let (store, blk) = block(5, 8, 2, cross);
        let q = randn(&mut rng(3), &[3, 8], 1.0);
        let kv = randn(&mut rng(4), &[4, 8], 1.0);
        let err = param_grad_check(
            &store,
            |b| {
                let qv = b.g.constant(q.clone());
                let kvv = if cross { b.g.constant(kv.clone()) } else { qv };
                let y = blk.forward(b, qv, kvv)?;
                let y = b.g.mul(y, y)?;
                Ok(b.g.sum(y))
            },
            DEFAULT_EPS,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-4, "cross={cross}: {err}");
    }
}

fn mamba(seed: u64, dim: usize) -> (ParamStore, MambaBlock) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let m = MambaBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        "mamba",
        MambaDims::new(dim, 2, 4, 3),
    );
    jitter_params(&mut store, seed + 50, 0.05);
    (store, m)
}

fn run_mamba(store: &ParamStore, m: &MambaBlock, x: &Tensor) -> Tensor {
    let mut b = Bound::infer(store);
    let v = b.g.constant(x.clone());
    let y = m.forward(&mut b, v).unwrap();
    b.g.value(y).clone()
}

#[test]
fn mamba_is_causal_at_every_position() {
    let (len, dim) = (7, 8);
    for seed in 0..20 {
        let (store, m) = mamba(seed, dim);
        let x = randn(&mut rng(seed + 1000), &[len, dim], 1.0);
        let base = run_mamba(&store, &m, &x);
        for t in 0..len {
            let mut px = x.clone();
            for c in 0..dim {
                px.data_mut()[t * dim + c] += 0.5 + c as f64 * 0.1;
            }
            let out = run_mamba(&store, &m, &px);
            for s in 0..len {
                let same = (0..dim).all(|c| out.at2(s, c).to_bits() == base.at2(s, c).to_bits());
                if s < t {
                    assert!(same, "seed {seed}: row {s} changed after perturbing row {t}");
                } else if s == t {
                    assert!(!same, "seed {seed}: row {t} ignored its own input");
                }
            }
        }
    }
}

#[test]
fn mamba_gradients() {
    let (store, m) = mamba(2, 8);
    let x = randn(&mut rng(9), &[4, 8], 1.0);
    let err = param_grad_check(
        &store,
        |b| {
            let v = b.g.constant(x.clone());
            let y = m.forward(b, v)?;
            let y = b.g.mul(y, y)?;
            Ok(b.g.sum(y))
        },
        DEFAULT_EPS,
        Coords::All,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn temporal(seed: u64, variant: Variant) -> (ParamStore, TemporalModule) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let cfg = TemporalConfig {
        window: 4,
        num_heads: 2,
        mlp_ratio: 2,
        state_dim: 4,
        conv_width: 3,
        expand: 2,
    };
    let t = TemporalModule::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        variant,
        8,
        &cfg,
    );
    jitter_params(&mut store, seed + 10, 0.05);
    assert_eq!(store.numel(), TemporalModule::param_count(variant, 8, &cfg));
    (store, t)
}

fn run_temporal(store: &ParamStore, t: &TemporalModule, x: &Tensor) -> Tensor {
    let mut b = Bound::infer(store);
    let v = b.g.constant(x.clone());
    let y = t.forward(&mut b, v).unwrap();
    b.g.value(y).clone()
}

#[test]
fn temporal_variants_gradients() {
    for v in Variant::ALL {
        let (store, t) = temporal(4, v);
        let x = randn(&mut rng(11), &[4, 8], 1.0);
        let err = param_grad_check(
            &store,
            |b| {
                let xv = b.g.constant(x.clone());
                let y = t.forward(b, xv)?;
                let last = b.g.slice_rows(y, 3, 4)?;
                let sq = b.g.mul(last, last)?;
                Ok(b.g.sum(sq))
            },
            DEFAULT_EPS,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-4, "{v}: {err}");
    }
}

#[test]
fn temporal_output_depends_on_window_order() {
    let (store, t) = temporal(6, Variant::MambaCross);
    let x = randn(&mut rng(12), &[4, 8], 1.0);
    let mut r = rows(&x);
    r.swap(0, 2);
    let swapped = Tensor::from_vec(vec![4, 8], r.concat());
    let a = run_temporal(&store, &t, &x);
    let b = run_temporal(&store, &t, &swapped);
    let last = |m: &Tensor| m.data()[3 * 8..].to_vec();
    assert_ne!(last(&a), last(&b));
}

#[test]
fn no_state_leaks_between_calls() {
    let (store, t) = temporal(7, Variant::MambaCross);
    let x = randn(&mut rng(13), &[4, 8], 1.0);
    let other = randn(&mut rng(14), &[3, 8], 1.0);
    let fresh = run_temporal(&store, &t, &x);
    let _ = run_temporal(&store, &t, &other);
    let again = run_temporal(&store, &t, &x);
    assert_eq!(fresh, again);
}

#[test]
fn variants_wire_differently() {
    let x = randn(&mut rng(15), &[4, 8], 1.0);
    let outs: Vec<Tensor> = Variant::ALL
        .iter()
        .map(|&v| {
            let (store, t) = temporal(8, v);
            run_temporal(&store, &t, &x)
        })
        .collect();
    assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
    assert!(outs[1].max_abs_diff(&outs[2]) > 1e-6);
}

#[test]
fn self_variants_differ_only_in_cross_kv_source() {
    // SelfCross and SelfSelf have identical parameter sets; with the same
    // seed only the second layer's key/value source differs.
    let (s1, t1) = temporal(9, Variant::SelfCross);
    let (s2, t2) = temporal(9, Variant::SelfSelf);
    assert_eq!(s1, s2);
    let x = randn(&mut rng(16), &[3, 8], 1.0);
    let mut b = Bound::infer(&s1);
    let xv = b.g.constant(x.clone());
    let first = t1.first_layer(&mut b, xv).unwrap();
    let cross = t1.second.forward(&mut b, first, xv).unwrap();
    let self_kv = t2.second.forward(&mut b, first, first).unwrap();
    assert_eq!(b.g.value(cross), &run_temporal(&s1, &t1, &x));
    assert_eq!(b.g.value(self_kv), &run_temporal(&s2, &t2, &x));
}

#[test]
fn window_buffer_discipline() {
    let mut w = WindowBuffer::new(3);
    for t in 0..6 {
        w.push(Tensor::from_vec(vec![1, 2], vec![t as f64, 0.0])).unwrap();
        assert_eq!(w.len(), (t + 1).min(3));
    }
    let s = w.stacked().unwrap();
    assert_eq!(s.data(), &[3.0, 0.0, 4.0, 0.0, 5.0, 0.0]);
    assert!(w.push(Tensor::zeros(vec![1, 3])).is_err());
}
