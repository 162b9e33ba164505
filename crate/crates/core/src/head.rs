//! Track-token guidance of the search features and the center-based head.

use serde::{Deserialize, Serialize};
use tokentrack_tensor::{Tensor, Var};

use crate::bbox::BBox;
use crate::error::{config_err, contract, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden channels of each branch.
    pub channels: usize,
    /// Initial score-branch bias; −2.19 ≈ logit(0.1).
    pub score_bias_init: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            score_bias_init: -2.19,
        }
    }
}

/// Per-token similarity scores to the track token, in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    pub scores: Vec<f64>,
}

/// `S_i = sigmoid(F_x[i] · track / √D)`, `F_x′[i] = S_i · F_x[i]`.
///
/// Returns the adjusted features and the `N×1` score column.
pub fn guide(b: &mut Bound, search: Var, track: Var) -> Result<(Var, Var)> {
    let (n, d) = b.g.value(search).rows_cols();
    let td = b.g.value(track).numel();
    if td != d || b.g.value(track).rows_cols().0 != 1 {
        return contract(format!(
            "track token shape {:?} does not match search dim {d}",
            b.g.shape(track)
        ));
    }
    let tt = b.g.transpose(track)?;
    let dots = b.g.matmul(search, tt)?;
    let dots = b.g.scale(dots, 1.0 / (d as f64).sqrt());
    let s = b.g.sigmoid(dots);
    debug_assert_eq!(b.g.shape(s), &[n, 1]);
    let adjusted = b.g.scale_rows(search, s)?;
    Ok((adjusted, s))
}

/// Score, offset, and size maps over the `G×G` search grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub grid: usize,
    /// `G×G`, row-major.
    pub score: Vec<f64>,
    /// `G×G×2`, (x, y) per cell, in `(0, 1)`.
    pub offset: Vec<f64>,
    /// `G×G×2`, (w, h) per cell, in `(0, 1)`.
    pub size: Vec<f64>,
}

/// Graph handles of the head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

impl HeadVars {
    pub fn maps(&self, b: &Bound, grid: usize) -> HeadMaps {
        HeadMaps {
            grid,
            score: b.g.value(self.score).data().to_vec(),
            offset: b.g.value(self.offset).data().to_vec(),
            size: b.g.value(self.size).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    conv: Linear,
    out: Linear,
}

impl Branch {
    fn new(init: &mut Init, name: &str, dim: usize, ch: usize, out: usize) -> Self {
        let g = ParamGroup::Other;
        Self {
            conv: Linear::new(init, &format!("{name}.conv3x3"), g, 9 * dim, ch),
            out: Linear::new(init, &format!("{name}.conv1x1"), g, ch, out),
        }
    }

    fn forward(&self, b: &mut Bound, x: Var, grid: usize) -> Result<Var> {
        let u = b.g.unfold2d(x, grid, grid, 3, 1, 1)?;
        let h = self.conv.forward(b, u)?;
        let h = b.g.gelu(h);
        let o = self.out.forward(b, h)?;
        Ok(b.g.sigmoid(o))
    }
}

/// Three branches of `3×3 conv → GELU → 1×1 conv → sigmoid` over the token grid.
#[derive(Clone, Debug)]
pub struct CenterHead {
    pub grid: usize,
    score: Branch,
    offset: Branch,
    size: Branch,
}

impl CenterHead {
    pub fn new(init: &mut Init, dim: usize, grid: usize, cfg: &HeadConfig) -> Self {
        let score = Branch::new(init, "head.score", dim, cfg.channels, 1);
        init.store.get_mut(score.out.b).data_mut()[0] = cfg.score_bias_init;
        Self {
            grid,
            score,
            offset: Branch::new(init, "head.offset", dim, cfg.channels, 2),
            size: Branch::new(init, "head.size", dim, cfg.channels, 2),
        }
    }

    pub fn param_count(dim: usize, cfg: &HeadConfig) -> usize {
        let branch = |out| Linear::param_count(9 * dim, cfg.channels) + Linear::param_count(cfg.channels, out);
        branch(1) + 2 * branch(2)
    }

    pub fn forward(&self, b: &mut Bound, features: Var) -> Result<HeadVars> {
        let n = b.g.value(features).rows_cols().0;
        if n != self.grid * self.grid {
            return config_err(format!("{n} search tokens do not form a {0}x{0} grid", self.grid));
        }
        Ok(HeadVars {
            score: self.score.forward(b, features, self.grid)?,
            offset: self.offset.forward(b, features, self.grid)?,
            size: self.size.forward(b, features, self.grid)?,
        })
    }
}

/// Side of the square grid holding `n` tokens.
pub fn grid_side(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return config_err(format!("{n} tokens are not a perfect square"));
    }
    Ok(g)
}

/// Separable Hamming window, `w[k] = 0.54 − 0.46·cos(2πk/(G−1))`, as a
/// row-major `G×G` map.
pub fn hamming_prior(grid: usize) -> Result<Vec<f64>> {
    if grid < 2 {
        return config_err(format!("Hamming prior needs G >= 2, got {grid}"));
    }
    let w: Vec<f64> = (0..grid)
        .map(|k| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (grid - 1) as f64).cos())
        .collect();
    Ok(w.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect())
}

/// Box at the argmax of `score ⊙ prior`; ties go to the smallest row-major
/// index.
pub fn decode_box(maps: &HeadMaps, prior: Option<&[f64]>) -> Result<BBox> {
    let g = maps.grid;
    let n = g * g;
    if maps.score.len() != n || maps.offset.len() != 2 * n || maps.size.len() != 2 * n {
        return contract("head maps do not match the grid");
    }
    if let Some(p) = prior {
        if p.len() != n || p.iter().any(|&v| !(v >= 0.0)) {
            return contract("prior must be a nonnegative G×G map");
        }
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..n {
        let v = maps.score[i] * prior.map_or(1.0, |p| p[i]);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    Ok(cell_box(maps, best))
}

/// Box read from the offset and size maps at `cell`.
pub fn cell_box(maps: &HeadMaps, cell: usize) -> BBox {
    let g = maps.grid as f64;
    let (row, col) = (cell / maps.grid, cell % maps.grid);
    BBox::new(
        (col as f64 + maps.offset[2 * cell]) / g,
        (row as f64 + maps.offset[2 * cell + 1]) / g,
        maps.size[2 * cell],
        maps.size[2 * cell + 1],
    )
}

/// Rescales score values to `[0, 1]` for visual dumps.
pub fn normalize_for_display(values: &[f64]) -> Tensor {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::from_vec(vec![values.len()], values.iter().map(|v| (v - lo) / span).collect())
}
