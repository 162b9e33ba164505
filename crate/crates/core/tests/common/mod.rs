#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokentrack_core::backbone::BackboneConfig;
use tokentrack_core::head::HeadConfig;
use tokentrack_core::layers::{Linear, Norm, LN_EPS};
use tokentrack_core::temporal::{AttentionBlock, TemporalConfig};
use tokentrack_core::{ModelConfig, ParamStore, Variant};
use tokentrack_tensor::{gelu, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
    )
}

/// Toy model: D=16, two backbone blocks, 32/64 crops.
pub fn toy_config(variant: Variant, window: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            template_size: 32,
            search_size: 64,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            stem_dim: 4,
        },
        temporal: TemporalConfig {
            window,
            num_heads: 2,
            mlp_ratio: 2,
            state_dim: 4,
            conv_width: 3,
            expand: 2,
        },
        head: HeadConfig {
            channels: 4,
            score_bias_init: -2.19,
        },
        loss: Default::default(),
        variant,
        track_token: true,
        temporal_module: true,
    }
}

/// Perturbs every parameter so zero-initialized biases and unit gains do not
/// hide wiring mistakes.
pub fn jitter_params(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-1.0..1.0) * scale;
        }
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.get(l.w);
    let b = store.get(l.b);
    x.iter()
        .map(|row| {
            (0..l.d_out)
                .map(|j| b.data()[j] + (0..l.d_in).map(|i| row[i] * w.data()[i * l.d_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore, n: &Norm, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = store.get(n.gain).data();
    let b = store.get(n.bias).data();
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.rows_cols();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// Per-head, per-query loop version of `AttentionBlock::forward`.
pub fn attention_block(
    store: &ParamStore,
    blk: &AttentionBlock,
    q_in: &[Vec<f64>],
    kv_in: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let qn = layer_norm(store, &blk.ln_q, q_in);
    let kvn = layer_norm(store, blk.ln_kv.as_ref().unwrap_or(&blk.ln_q), kv_in);
    let q = linear(store, &blk.q, &qn);
    let k = linear(store, &blk.k, &kvn);
    let v = linear(store, &blk.v, &kvn);
    let dh = blk.dim / blk.heads;
    let mut heads = vec![vec![0.0; blk.dim]; q.len()];
    for h in 0..blk.heads {
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                heads[i][h * dh + c] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[h * dh + c]).sum();
            }
        }
    }
    let attn = linear(store, &blk.o, &heads);
    let x: Vec<Vec<f64>> = q_in
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let xn = layer_norm(store, &blk.ln_mlp, &x);
    let h: Vec<Vec<f64>> = linear(store, &blk.mlp.fc1, &xn)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let m = linear(store, &blk.mlp.fc2, &h);
    x.iter()
        .zip(&m)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
