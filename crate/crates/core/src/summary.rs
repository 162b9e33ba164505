//! Analytic parameter and multiply-accumulate counts per module.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::backbone::{BackboneConfig, STRIDE};
use crate::head::CenterHead;
use crate::layers::Linear;
use crate::model::{Mode, ModelConfig};
use crate::params::ParamStore;
use crate::temporal::{MambaDims, TemporalModule, Variant};

/// Counts for one module. `macs` is per tracked frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: &'static str,
    pub params: usize,
    pub macs: u64,
}

fn block_macs(tokens_q: u64, tokens_kv: u64, d: u64, mlp_ratio: u64) -> u64 {
    let proj = tokens_q * d * d * 2 + tokens_kv * d * d * 2;
    let attn = 2 * tokens_q * tokens_kv * d;
    let mlp = 2 * tokens_q * d * d * mlp_ratio;
    proj + attn + mlp
}

fn patch_embed_macs(cfg: &BackboneConfig, size: usize) -> u64 {
    let (c, d) = (cfg.stem_dim as u64, cfg.embed_dim as u64);
    let s1 = (size / 4).pow(2) as u64;
    let s2 = (size / STRIDE).pow(2) as u64;
    s1 * (48 * c + c * c) + s2 * 16 * c * d
}

/// Analytic counts for `cfg`. Template embedding is listed separately since
/// it runs once per sequence.
pub fn analytic_counts(cfg: &ModelConfig) -> Vec<ModuleCount> {
    let b = &cfg.backbone;
    let d = b.embed_dim;
    let tokens = (b.template_tokens() + b.search_tokens() + usize::from(cfg.track_token)) as u64;
    let mut out = vec![
        ModuleCount {
            module: "backbone.patch_embed (search)",
            params: b.patch_embed_params(),
            macs: patch_embed_macs(b, b.search_size),
        },
        ModuleCount {
            module: "backbone.patch_embed (template, once)",
            params: 0,
            macs: patch_embed_macs(b, b.template_size),
        },
        ModuleCount {
            module: "backbone.positional",
            params: b.positional_params(cfg.track_token),
            macs: 0,
        },
        ModuleCount {
            module: "backbone.blocks",
            params: b.depth * b.block_params(),
            macs: b.depth as u64 * block_macs(tokens, tokens, d as u64, b.mlp_ratio as u64),
        },
    ];
    if cfg.track_token {
        out.push(ModuleCount {
            module: "track.seed",
            params: d,
            macs: 0,
        });
    }
    if let Mode::Temporal(v) = cfg.mode() {
        let t = &cfg.temporal;
        let l = t.window as u64;
        let (du, r) = (d as u64, t.mlp_ratio as u64);
        let first = match v {
            Variant::MambaCross => {
                let m = MambaDims::new(d, t.expand, t.state_dim, t.conv_width);
                let (e, n, k, dr) = (
                    m.inner as u64,
                    m.state_dim as u64,
                    m.conv_width as u64,
                    m.dt_rank as u64,
                );
                l * (du * 2 * e + e * k + e * (dr + 2 * n) + dr * e + 3 * e * n + e * du)
            }
            _ => block_macs(l, l, du, r),
        };
        out.push(ModuleCount {
            module: "temporal",
            params: TemporalModule::param_count(v, d, t),
            macs: first + block_macs(l, l, du, r),
        });
    }
    let nx = b.search_tokens() as u64;
    if cfg.track_token {
        out.push(ModuleCount {
            module: "guidance",
            params: 0,
            macs: nx * d as u64,
        });
    }
    let ch = cfg.head.channels as u64;
    out.push(ModuleCount {
        module: "head",
        params: CenterHead::param_count(d, &cfg.head),
        macs: 3 * nx * 9 * d as u64 * ch + nx * ch * 5,
    });
    out
}

/// Parameter counts from the actual tensors, grouped like
/// [`analytic_counts`].
pub fn walked_counts(store: &ParamStore) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for (_, name, t) in store.iter() {
        let module = if name.starts_with("backbone.stem") {
            "backbone.patch_embed (search)"
        } else if name.starts_with("backbone.pos.") {
            "backbone.positional"
        } else if name.starts_with("backbone.block") {
            "backbone.blocks"
        } else if name.starts_with("track.") {
            "track.seed"
        } else if name.starts_with("temporal.") {
            "temporal"
        } else if name.starts_with("head.") {
            "head"
        } else {
            "other"
        };
        *out.entry(module).or_insert(0) += t.numel();
    }
    out
}

pub fn total_params(counts: &[ModuleCount]) -> usize {
    counts.iter().map(|c| c.params).sum()
}

/// Human-readable table for one configuration.
pub fn summary_table(title: &str, cfg: &ModelConfig) -> String {
    let counts = analytic_counts(cfg);
    let mut s = format!("# {title}\n");
    let _ = writeln!(s, "{:<40} {:>12} {:>16}", "module", "params", "MACs/frame");
    for c in &counts {
        let _ = writeln!(s, "{:<40} {:>12} {:>16}", c.module, c.params, c.macs);
    }
    let macs: u64 = counts
        .iter()
        .filter(|c| !c.module.ends_with("once)"))
        .map(|c| c.macs)
        .sum();
    let _ = writeln!(s, "{:<40} {:>12} {:>16}", "total", total_params(&counts), macs);
    s
}

/// `D_in·D_out + D_out`, exposed for the summary tests.
pub fn linear_params(d_in: usize, d_out: usize) -> usize {
    Linear::param_count(d_in, d_out)
}
