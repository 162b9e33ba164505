//! Temporal context over a sliding window of track tokens.
//!
//! Three two-layer variants over the window `T` (oldest first):
//!
//! | variant      | first layer          | second layer              |
//! |--------------|----------------------|---------------------------|
//! | `MambaCross` | `T′ = Mamba(T)`      | `Attn(Q=T′, K=V=T)`       |
//! | `SelfCross`  | `T′ = SelfAttn(T)`   | `Attn(Q=T′, K=V=T)`       |
//! | `SelfSelf`   | `T′ = SelfAttn(T)`   | `Attn(Q=T′, K=V=T′)`      |
//!
//! The second layer is always a cross-attention block (separate query and
//! key/value norms), including `SelfSelf` where it is fed the same tensor on
//! both sides.

pub mod attention;
pub mod mamba;
pub mod scan;
pub mod window;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tokentrack_tensor::Var;

pub use attention::AttentionBlock;
pub use mamba::{MambaBlock, MambaDims};
pub use scan::{selective_scan, selective_scan_op, SsmState};
pub use window::WindowBuffer;

use crate::error::{config_err, contract, Error, Result};
use crate::params::{Bound, Init, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    MambaCross,
    SelfCross,
    SelfSelf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MambaCross, Variant::SelfCross, Variant::SelfSelf];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MambaCross => "mamba-cross",
            Variant::SelfCross => "self-cross",
            Variant::SelfSelf => "self-self",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    /// Sliding window size `m`.
    pub window: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub expand: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            window: 8,
            num_heads: 4,
            mlp_ratio: 4,
            state_dim: 16,
            conv_width: 4,
            expand: 2,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.window == 0 {
            return config_err("temporal.window must be positive");
        }
        if self.num_heads == 0 || !dim.is_multiple_of(self.num_heads) {
            return config_err(format!(
                "embed dim {dim} not divisible by temporal.num_heads {}",
                self.num_heads
            ));
        }
        if self.state_dim == 0 || self.conv_width == 0 || self.expand == 0 || self.mlp_ratio == 0 {
            return config_err("temporal sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum FirstLayer {
    Mamba(MambaBlock),
    SelfAttn(AttentionBlock),
}

#[derive(Clone, Debug)]
pub struct TemporalModule {
    pub variant: Variant,
    pub first: FirstLayer,
    pub second: AttentionBlock,
}

impl TemporalModule {
    pub fn new(init: &mut Init, variant: Variant, dim: usize, cfg: &TemporalConfig) -> Self {
        let g = ParamGroup::Other;
        let first = match variant {
            Variant::MambaCross => FirstLayer::Mamba(MambaBlock::new(
                init,
                "temporal.mamba",
                MambaDims::new(dim, cfg.expand, cfg.state_dim, cfg.conv_width),
            )),
            Variant::SelfCross | Variant::SelfSelf => FirstLayer::SelfAttn(AttentionBlock::new(
                init,
                "temporal.self_attn",
                g,
                dim,
                cfg.num_heads,
                cfg.mlp_ratio,
                false,
            )),
        };
        let second = AttentionBlock::new(init, "temporal.cross_attn", g, dim, cfg.num_heads, cfg.mlp_ratio, true);
        Self { variant, first, second }
    }

    pub fn param_count(variant: Variant, dim: usize, cfg: &TemporalConfig) -> usize {
        let first = match variant {
            Variant::MambaCross => MambaDims::new(dim, cfg.expand, cfg.state_dim, cfg.conv_width).param_count(),
            _ => AttentionBlock::param_count(dim, cfg.mlp_ratio, false),
        };
        first + AttentionBlock::param_count(dim, cfg.mlp_ratio, true)
    }

    /// First layer only.
    pub fn first_layer(&self, b: &mut Bound, t: Var) -> Result<Var> {
        match &self.first {
            FirstLayer::Mamba(m) => m.forward(b, t),
            FirstLayer::SelfAttn(a) => Ok(a.forward(b, t, t)?),
        }
    }

    /// Maps the `L×D` window to `L×D` outputs; the last row is the
    /// context-aware token for the newest frame.
    pub fn forward(&self, b: &mut Bound, t: Var) -> Result<Var> {
        let shape = b.g.shape(t).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return contract(format!("temporal input must be a non-empty L×D window, got {shape:?}"));
        }
        let t1 = self.first_layer(b, t)?;
        let kv = match self.variant {
            Variant::MambaCross | Variant::SelfCross => t,
            Variant::SelfSelf => t1,
        };
        Ok(self.second.forward(b, t1, kv)?)
    }
}
