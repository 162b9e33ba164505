//! Pre-norm multi-head attention block with an MLP sublayer.
//!
//! `out = q + Wo·MHA(LN_q(q), LN_kv(kv));  out = out + MLP(LN(out))`
//!
//! Self-attention blocks (`cross = false`) share one input norm for queries
//! and keys/values; cross-attention blocks normalize the two streams
//! separately. No masking and no positional terms, so the output is invariant
//! to permutations of the key/value rows.

use tokentrack_tensor::{Result, Tensor, Var};

use crate::layers::{Linear, Mlp, Norm};
use crate::params::{Bound, Init, ParamGroup};

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln_q: Norm,
    pub ln_kv: Option<Norm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_mlp: Norm,
    pub mlp: Mlp,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        cross: bool,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            ln_q: Norm::new(init, &format!("{name}.ln_q"), group, dim),
            ln_kv: cross.then(|| Norm::new(init, &format!("{name}.ln_kv"), group, dim)),
            q: Linear::new(init, &format!("{name}.q"), group, dim, dim),
            k: Linear::new(init, &format!("{name}.k"), group, dim, dim),
            v: Linear::new(init, &format!("{name}.v"), group, dim, dim),
            o: Linear::new(init, &format!("{name}.o"), group, dim, dim),
            ln_mlp: Norm::new(init, &format!("{name}.ln_mlp"), group, dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), group, dim, dim * mlp_ratio),
            dim,
            heads,
        }
    }

    pub fn param_count(dim: usize, mlp_ratio: usize, cross: bool) -> usize {
        let norms = if cross { 3 } else { 2 } * 2 * dim;
        4 * Linear::param_count(dim, dim)
            + norms
            + Linear::param_count(dim, dim * mlp_ratio)
            + Linear::param_count(dim * mlp_ratio, dim)
    }

    pub fn forward(&self, b: &mut Bound, q_in: Var, kv_in: Var) -> Result<Var> {
        Ok(self.forward_traced(b, q_in, kv_in, false)?.0)
    }

    /// Like [`forward`](Self::forward), optionally also returning the per-head
    /// attention weights (`Lq×Lk` each).
    pub fn forward_traced(&self, b: &mut Bound, q_in: Var, kv_in: Var, capture: bool) -> Result<(Var, Vec<Tensor>)> {
        let qn = self.ln_q.forward(b, q_in)?;
        let kvn = match (&self.ln_kv, q_in == kv_in) {
            (Some(ln), _) => ln.forward(b, kv_in)?,
            (None, true) => qn,
            (None, false) => self.ln_q.forward(b, kv_in)?,
        };
        let q = self.q.forward(b, qn)?;
        let k = self.k.forward(b, kvn)?;
        let v = self.v.forward(b, kvn)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::new();
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = b.g.slice_cols(q, lo, hi)?;
            let kh = b.g.slice_cols(k, lo, hi)?;
            let vh = b.g.slice_cols(v, lo, hi)?;
            let kt = b.g.transpose(kh)?;
            let s = b.g.matmul(qh, kt)?;
            let s = b.g.scale(s, scale);
            let a = b.g.softmax(s, 1)?;
            if capture {
                weights.push(b.g.value(a).clone());
            }
            outs.push(b.g.matmul(a, vh)?);
        }
        let heads = if outs.len() == 1 {
            outs[0]
        } else {
            b.g.concat_cols(&outs)?
        };
        let attn = self.o.forward(b, heads)?;
        let x = b.g.add(q_in, attn)?;
        let xn = self.ln_mlp.forward(b, x)?;
        let m = self.mlp.forward(b, xn)?;
        Ok((b.g.add(x, m)?, weights))
    }
}
