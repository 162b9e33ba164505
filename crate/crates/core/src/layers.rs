//! Small parameterized building blocks shared by the model parts.

use tokentrack_tensor::{Result, Var};

use crate::params::{Bound, Init, ParamGroup, ParamId};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Self {
        let w = init.weight(&format!("{name}.w"), group, d_in, d_out);
        let b = init.constant(&format!("{name}.b"), group, &[d_out], 0.0);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, b: &mut Bound, x: Var) -> Result<Var> {
        let (w, bias) = (b.p(self.w), b.p(self.b));
        b.g.linear(x, w, bias)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gain: init.constant(&format!("{name}.gain"), group, &[dim], 1.0),
            bias: init.constant(&format!("{name}.bias"), group, &[dim], 0.0),
        }
    }

    pub fn forward(&self, b: &mut Bound, x: Var) -> Result<Var> {
        let (g, bias) = (b.p(self.gain), b.p(self.bias));
        b.g.layer_norm(x, g, bias, LN_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, group: ParamGroup, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), group, dim, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), group, hidden, dim),
        }
    }

    pub fn forward(&self, b: &mut Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(b, x)?;
        let h = b.g.gelu(h);
        self.fc2.forward(b, h)
    }
}
