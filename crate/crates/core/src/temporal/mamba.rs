//! Residual selective-state-space block.
//!
//! `(x, z) = InProj(LN(T))`, `u = SiLU(conv(x))`,
//! `T′ = T + OutProj(SiLU(z) ⊙ scan(u; Δ(u), B(u), C(u)))`.
//!
//! The causal convolution and the scan only look backwards, so output row `t`
//! depends on input rows `≤ t` only.

use rand::Rng;
use tokentrack_tensor::{Tensor, Var};

use super::scan::selective_scan_op;
use crate::error::Result;
use crate::layers::{Linear, Norm};
use crate::params::{Bound, Init, ParamGroup, ParamId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaDims {
    pub dim: usize,
    pub inner: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
}

impl MambaDims {
    pub fn new(dim: usize, expand: usize, state_dim: usize, conv_width: usize) -> Self {
        Self {
            dim,
            inner: expand * dim,
            state_dim,
            conv_width,
            dt_rank: dim.div_ceil(16),
        }
    }

    pub fn param_count(&self) -> usize {
        let Self {
            dim,
            inner,
            state_dim,
            conv_width,
            dt_rank,
        } = *self;
        2 * dim
            + Linear::param_count(dim, 2 * inner)
            + conv_width * inner
            + inner
            + inner * (dt_rank + 2 * state_dim)
            + Linear::param_count(dt_rank, inner)
            + inner * state_dim
            + inner
            + Linear::param_count(inner, dim)
    }
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub dims: MambaDims,
    pub norm: Norm,
    pub in_proj: Linear,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    /// `inner → dt_rank + 2·state_dim`, no bias.
    pub x_proj: ParamId,
    pub dt_proj: Linear,
    /// `A = −exp(a_log)`, so A stays strictly negative.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
}

const DT_MIN: f64 = 0.01;
const DT_MAX: f64 = 0.1;

impl MambaBlock {
    pub fn new(init: &mut Init, name: &str, dims: MambaDims) -> Self {
        let g = ParamGroup::Other;
        let MambaDims {
            dim,
            inner,
            state_dim,
            conv_width,
            dt_rank,
        } = dims;
        let norm = Norm::new(init, &format!("{name}.norm"), g, dim);
        let in_proj = Linear::new(init, &format!("{name}.in_proj"), g, dim, 2 * inner);
        let conv_kernel = init.weight(&format!("{name}.conv.kernel"), g, conv_width, inner);
        let conv_bias = init.constant(&format!("{name}.conv.bias"), g, &[inner], 0.0);
        let x_proj = init.weight(&format!("{name}.x_proj"), g, inner, dt_rank + 2 * state_dim);
        let dt_w = init.weight(&format!("{name}.dt_proj.w"), g, dt_rank, inner);
        // bias = softplus⁻¹(Δ₀) with Δ₀ log-uniform in [DT_MIN, DT_MAX]
        let dt_bias: Vec<f64> = (0..inner)
            .map(|_| {
                let u: f64 = init.rng.gen();
                let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_b = init.tensor(&format!("{name}.dt_proj.b"), g, Tensor::from_vec(vec![inner], dt_bias));
        let a_init: Vec<f64> = (0..inner)
            .flat_map(|_| (1..=state_dim).map(|n| (n as f64).ln()))
            .collect();
        let a_log = init.tensor(
            &format!("{name}.a_log"),
            g,
            Tensor::from_vec(vec![inner, state_dim], a_init),
        );
        let d_skip = init.constant(&format!("{name}.d_skip"), g, &[inner], 1.0);
        let out_proj = Linear::new(init, &format!("{name}.out_proj"), g, inner, dim);
        Self {
            dims,
            norm,
            in_proj,
            conv_kernel,
            conv_bias,
            x_proj,
            dt_proj: Linear {
                w: dt_w,
                b: dt_b,
                d_in: dt_rank,
                d_out: inner,
            },
            a_log,
            d_skip,
            out_proj,
        }
    }

    pub fn forward(&self, b: &mut Bound, t: Var) -> Result<Var> {
        let MambaDims {
            inner,
            state_dim,
            dt_rank,
            ..
        } = self.dims;
        let h = self.norm.forward(b, t)?;
        let xz = self.in_proj.forward(b, h)?;
        let x = b.g.slice_cols(xz, 0, inner)?;
        let z = b.g.slice_cols(xz, inner, 2 * inner)?;
        let (k, kb) = (b.p(self.conv_kernel), b.p(self.conv_bias));
        let u = b.g.causal_conv1d(x, k)?;
        let u = b.g.add(u, kb)?;
        let u = b.g.silu(u);
        let xp = b.p(self.x_proj);
        let proj = b.g.matmul(u, xp)?;
        let dt_low = b.g.slice_cols(proj, 0, dt_rank)?;
        let bm = b.g.slice_cols(proj, dt_rank, dt_rank + state_dim)?;
        let cm = b.g.slice_cols(proj, dt_rank + state_dim, dt_rank + 2 * state_dim)?;
        let dt = self.dt_proj.forward(b, dt_low)?;
        let dt = b.g.softplus(dt);
        let a_log = b.p(self.a_log);
        let a = b.g.exp(a_log);
        let a = b.g.scale(a, -1.0);
        let d = b.p(self.d_skip);
        let y = selective_scan_op(&mut b.g, u, dt, a, bm, cm, d)?;
        let gate = b.g.silu(z);
        let y = b.g.mul(y, gate)?;
        let out = self.out_proj.forward(b, y)?;
        Ok(b.g.add(t, out)?)
    }
}
