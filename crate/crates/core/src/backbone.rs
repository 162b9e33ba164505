//! Joint feature extraction over `[track | template | search]` tokens.
//!
//! Images enter through a two-stage patch embedding (4× then 4× downsampling,
//! with a pointwise mixing layer in between), giving one token per 16×16
//! pixel patch. Learned absolute position embeddings are added per part, then
//! `depth` pre-norm transformer blocks attend over the whole concatenation
//! with no masking.

use serde::{Deserialize, Serialize};
use tokentrack_tensor::{Tensor, Var};

use crate::error::{config_err, contract, Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamGroup, ParamId};
use crate::temporal::AttentionBlock;

/// Effective patch stride of the embedding stack, in pixels.
pub const STRIDE: usize = 16;
const STAGE: usize = 4;

/// Per-channel standardization applied to `[0, 1]` pixel values.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Template crop side in pixels (square).
    pub template_size: usize,
    /// Search crop side in pixels (square).
    pub search_size: usize,
    pub embed_dim: usize,
    /// Number of global attention blocks.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Channels after the first 4× stage.
    pub stem_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            template_size: 64,
            search_size: 128,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            stem_dim: 32,
        }
    }
}

impl BackboneConfig {
    /// Full-size configuration (128/256 crops, width 512, 12 blocks).
    pub fn full_scale() -> Self {
        Self {
            template_size: 128,
            search_size: 256,
            embed_dim: 512,
            depth: 12,
            num_heads: 8,
            mlp_ratio: 4,
            stem_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if v == 0 || v % STRIDE != 0 {
                return config_err(format!("backbone.{name} = {v} is not a positive multiple of {STRIDE}"));
            }
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return config_err(format!(
                "backbone.embed_dim {} not divisible by backbone.num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 || self.stem_dim == 0 {
            return config_err("backbone.mlp_ratio and backbone.stem_dim must be positive");
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / STRIDE).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / STRIDE).pow(2)
    }

    /// Side of the search token grid.
    pub fn grid(&self) -> usize {
        self.search_size / STRIDE
    }

    pub fn patch_embed_params(&self) -> usize {
        let c = self.stem_dim;
        Linear::param_count(STAGE * STAGE * 3, c)
            + Linear::param_count(c, c)
            + Linear::param_count(STAGE * STAGE * c, self.embed_dim)
    }

    pub fn block_params(&self) -> usize {
        AttentionBlock::param_count(self.embed_dim, self.mlp_ratio, false)
    }

    pub fn positional_params(&self, track_token: bool) -> usize {
        (usize::from(track_token) + self.template_tokens() + self.search_tokens()) * self.embed_dim
    }
}

/// Token sequence part, for position embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Track,
    Template,
    Search,
}

/// Backbone outputs split back into their parts.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub track: Option<Var>,
    pub template: Var,
    pub search: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem1: Linear,
    pub stem_mix: Linear,
    pub stem2: Linear,
    /// Position embedding of the track token; absent without one.
    pub pos_track: Option<ParamId>,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub blocks: Vec<AttentionBlock>,
    /// Learned seed used as the initial track token of every frame.
    pub track_seed: Option<ParamId>,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &BackboneConfig, track_token: bool) -> Self {
        let g = ParamGroup::Backbone;
        let (d, c) = (cfg.embed_dim, cfg.stem_dim);
        let stem1 = Linear::new(init, "backbone.stem1", g, STAGE * STAGE * 3, c);
        let stem_mix = Linear::new(init, "backbone.stem_mix", g, c, c);
        let stem2 = Linear::new(init, "backbone.stem2", g, STAGE * STAGE * c, d);
        let pos_track = track_token.then(|| init.uniform("backbone.pos.track", g, &[1, d], 0.02));
        let pos_template = init.uniform("backbone.pos.template", g, &[cfg.template_tokens(), d], 0.02);
        let pos_search = init.uniform("backbone.pos.search", g, &[cfg.search_tokens(), d], 0.02);
        let blocks = (0..cfg.depth)
            .map(|i| {
                AttentionBlock::new(
                    init,
                    &format!("backbone.block{i}"),
                    g,
                    d,
                    cfg.num_heads,
                    cfg.mlp_ratio,
                    false,
                )
            })
            .collect();
        let track_seed = track_token.then(|| init.constant("track.seed", ParamGroup::Other, &[1, d], 0.0));
        Self {
            cfg: cfg.clone(),
            stem1,
            stem_mix,
            stem2,
            pos_track,
            pos_template,
            pos_search,
            blocks,
            track_seed,
        }
    }

    /// `size×size×3` pixels in `[0, 1]` to an `(size²)×3` standardized tensor.
    pub fn image_tensor(pixels: &[f64], size: usize) -> Result<Tensor> {
        if pixels.len() != size * size * 3 {
            return contract(format!("image of {} values is not {size}x{size}x3", pixels.len()));
        }
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - PIXEL_MEAN[i % 3]) / PIXEL_STD[i % 3])
            .collect();
        Ok(Tensor::from_vec(vec![size * size, 3], data))
    }

    /// Image tensor `(size²)×3` to `(size/16)²×D` tokens in row-major order.
    pub fn patch_embed(&self, b: &mut Bound, image: Var, size: usize) -> Result<Var> {
        if size == 0 || !size.is_multiple_of(STRIDE) {
            return config_err(format!("image side {size} is not a multiple of {STRIDE}"));
        }
        let p1 = b.g.unfold2d(image, size, size, STAGE, STAGE, 0)?;
        let h = self.stem1.forward(b, p1)?;
        let h = b.g.gelu(h);
        let h = self.stem_mix.forward(b, h)?;
        let h = b.g.gelu(h);
        let s1 = size / STAGE;
        let p2 = b.g.unfold2d(h, s1, s1, STAGE, STAGE, 0)?;
        Ok(self.stem2.forward(b, p2)?)
    }

    /// Adds the learned position embedding of `part`. Apply exactly once.
    pub fn add_positional(&self, b: &mut Bound, tokens: Var, part: Part) -> Result<Var> {
        let id = match part {
            Part::Track => self
                .pos_track
                .ok_or_else(|| Error::Config("model has no track token".into()))?,
            Part::Template => self.pos_template,
            Part::Search => self.pos_search,
        };
        let pos = b.p(id);
        Ok(b.g.add(tokens, pos)?)
    }

    pub fn embed_template(&self, b: &mut Bound, image: Var) -> Result<Var> {
        let t = self.patch_embed(b, image, self.cfg.template_size)?;
        self.add_positional(b, t, Part::Template)
    }

    pub fn embed_search(&self, b: &mut Bound, image: Var) -> Result<Var> {
        let t = self.patch_embed(b, image, self.cfg.search_size)?;
        self.add_positional(b, t, Part::Search)
    }

    /// Initial track token for a frame: learned seed plus its position embedding.
    pub fn track_token(&self, b: &mut Bound) -> Result<Var> {
        let Some(id) = self.track_seed else {
            return config_err("model has no track token");
        };
        let seed = b.p(id);
        self.add_positional(b, seed, Part::Track)
    }

    /// Runs the attention blocks over `Concat(track, template, search)` and
    /// splits the result back by position. Without a track token only
    /// `[template | search]` is encoded.
    pub fn joint_encode(&self, b: &mut Bound, track: Option<Var>, template: Var, search: Var) -> Result<Encoded> {
        let nz = b.g.shape(template)[0];
        let nx = b.g.shape(search)[0];
        let nt = usize::from(track.is_some());
        let parts: Vec<Var> = track.into_iter().chain([template, search]).collect();
        let mut x = b.g.concat_rows(&parts)?;
        for block in &self.blocks {
            x = block.forward(b, x, x)?;
        }
        if self.blocks.is_empty() {
            return Ok(Encoded {
                track,
                template,
                search,
            });
        }
        let track_out = if nt == 1 { Some(b.g.slice_rows(x, 0, 1)?) } else { None };
        Ok(Encoded {
            track: track_out,
            template: b.g.slice_rows(x, nt, nt + nz)?,
            search: b.g.slice_rows(x, nt + nz, nt + nz + nx)?,
        })
    }
}
