//! Selective scan: a data-dependent diagonal linear recurrence.
//!
//! ```text
//! h_t = exp(Δ_t ⊙ A) ⊙ h_{t−1} + (Δ_t B_t) x_t        h_0 = 0
//! y_t = C_t · h_t + D ⊙ x_t
//! ```
//!
//! Shapes: `x, Δ: L×E`, `A: E×N`, `B, C: L×N`, `D: E`, hidden state `E×N`.
//! The state starts from zero on every call; nothing carries over between
//! invocations.

use tokentrack_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{contract, Result};

/// Hidden state of the scan, one row per expanded channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub channels: usize,
    pub state_dim: usize,
    pub h: Vec<f64>,
}

impl SsmState {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        Self {
            channels,
            state_dim,
            h: vec![0.0; channels * state_dim],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    len: usize,
    ch: usize,
    ns: usize,
}

fn dims(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Dims> {
    let (len, ch) = x.rows_cols();
    let (ach, ns) = a.rows_cols();
    let ok = x.rank() == 2
        && dt.shape() == x.shape()
        && a.rank() == 2
        && ach == ch
        && b.shape() == [len, ns]
        && c.shape() == [len, ns]
        && d.numel() == ch;
    if !ok {
        return contract(format!(
            "selective_scan shapes x{:?} dt{:?} A{:?} B{:?} C{:?} D{:?}",
            x.shape(),
            dt.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        ));
    }
    if let Some(v) = dt.data().iter().find(|&&v| !(v > 0.0)) {
        return contract(format!("selective_scan requires Δ > 0, got {v}"));
    }
    Ok(Dims { len, ch, ns })
}

/// Sequential reference scan. Returns `y` and the hidden state after each step
/// (`L` snapshots of `E×N`).
fn run(x: &[f64], dt: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64], s: Dims) -> (Vec<f64>, Vec<f64>) {
    let Dims { len, ch, ns } = s;
    let mut state = SsmState::zeros(ch, ns);
    let mut states = Vec::with_capacity(len * ch * ns);
    let mut y = vec![0.0; len * ch];
    for t in 0..len {
        let bt = &b[t * ns..(t + 1) * ns];
        let ct = &c[t * ns..(t + 1) * ns];
        for e in 0..ch {
            let delta = dt[t * ch + e];
            let xv = x[t * ch + e];
            let h = &mut state.h[e * ns..(e + 1) * ns];
            let mut acc = 0.0;
            for n in 0..ns {
                h[n] = (delta * a[e * ns + n]).exp() * h[n] + delta * bt[n] * xv;
                acc += ct[n] * h[n];
            }
            y[t * ch + e] = acc + d[e] * xv;
        }
        states.extend_from_slice(&state.h);
    }
    (y, states)
}

/// Evaluate the scan on plain tensors.
pub fn selective_scan(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let s = dims(x, dt, a, b, c, d)?;
    let (y, _) = run(x.data(), dt.data(), a.data(), b.data(), c.data(), d.data(), s);
    Ok(Tensor::from_vec(vec![s.len, s.ch], y))
}

struct ScanOp {
    dims: Dims,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let Dims { len, ch, ns } = self.dims;
        let [x, dt, a, b, c, d] = [0, 1, 2, 3, 4, 5].map(|i| inputs[i].data());
        let (_, states) = run(x, dt, a, b, c, d, self.dims);
        let mut gx = vec![0.0; len * ch];
        let mut gdt = vec![0.0; len * ch];
        let mut ga = vec![0.0; ch * ns];
        let mut gb = vec![0.0; len * ns];
        let mut gc = vec![0.0; len * ns];
        let mut gd = vec![0.0; ch];
        // dL/dh_t, carried backwards through the recurrence
        let mut gh = vec![0.0; ch * ns];
        for t in (0..len).rev() {
            let h_t = &states[t * ch * ns..(t + 1) * ch * ns];
            for e in 0..ch {
                let g = gy[t * ch + e];
                let xv = x[t * ch + e];
                let delta = dt[t * ch + e];
                gd[e] += g * xv;
                gx[t * ch + e] += g * d[e];
                for n in 0..ns {
                    let j = e * ns + n;
                    gc[t * ns + n] += g * h_t[j];
                    gh[j] += g * c[t * ns + n];
                }
                for n in 0..ns {
                    let j = e * ns + n;
                    let h_prev = if t == 0 { 0.0 } else { states[(t - 1) * ch * ns + j] };
                    let decay = (delta * a[j]).exp();
                    let bn = b[t * ns + n];
                    let ghj = gh[j];
                    gdt[t * ch + e] += ghj * (a[j] * decay * h_prev + bn * xv);
                    ga[j] += ghj * delta * decay * h_prev;
                    gb[t * ns + n] += ghj * delta * xv;
                    gx[t * ch + e] += ghj * delta * bn;
                    gh[j] = ghj * decay;
                }
            }
        }
        vec![Some(gx), Some(gdt), Some(ga), Some(gb), Some(gc), Some(gd)]
    }
}

/// Differentiable scan over graph values.
pub fn selective_scan_op(g: &mut Graph, x: Var, dt: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let vals = [x, dt, a, b, c, d].map(|v| g.value(v));
    let s = dims(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])?;
    let (y, _) = run(
        vals[0].data(),
        vals[1].data(),
        vals[2].data(),
        vals[3].data(),
        vals[4].data(),
        vals[5].data(),
        s,
    );
    let out = Tensor::from_vec(vec![s.len, s.ch], y);
    Ok(g.custom(Box::new(ScanOp { dims: s }), &[x, dt, a, b, c, d], out))
}
