//! The full tracker: backbone, optional temporal module, guidance, head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokentrack_tensor::Var;

use crate::backbone::{Backbone, BackboneConfig};
use crate::bbox::BBox;
use crate::error::{config_err, Result};
use crate::head::{guide, CenterHead, HeadConfig, HeadVars};
use crate::objectives::{focal_loss, giou_loss, l1_loss, make_target_map, BoxVars, LossWeights};
use crate::params::{Bound, Init, ParamStore};
use crate::temporal::{TemporalConfig, TemporalModule, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub temporal: TemporalConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub variant: Variant,
    /// Append a track token to the backbone input and use it for guidance.
    pub track_token: bool,
    /// Run the temporal module over the window of track tokens.
    pub temporal_module: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            temporal: TemporalConfig::default(),
            head: HeadConfig::default(),
            loss: LossWeights::default(),
            variant: Variant::MambaCross,
            track_token: true,
            temporal_module: true,
        }
    }
}

/// Which ablation row a configuration corresponds to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Backbone and head only.
    Baseline,
    /// Track token guides the head, no temporal context.
    TrackToken,
    Temporal(Variant),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.temporal.validate(self.backbone.embed_dim)?;
        self.loss.validate()?;
        if self.head.channels == 0 {
            return config_err("head.channels must be positive");
        }
        if self.temporal_module && !self.track_token {
            return config_err("the temporal module needs track tokens; disable both or neither");
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        match (self.track_token, self.temporal_module) {
            (false, _) => Mode::Baseline,
            (true, false) => Mode::TrackToken,
            (true, true) => Mode::Temporal(self.variant),
        }
    }
}

/// Per-frame forward outputs.
#[derive(Clone, Copy, Debug)]
pub struct FrameOutput {
    pub head: HeadVars,
    /// Post-backbone track token, to be pushed into the window.
    pub track: Option<Var>,
    /// Guidance scores `S` (`N_x×1`), when guidance ran.
    pub guidance: Option<Var>,
}

/// Loss terms of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameLoss {
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub temporal: Option<TemporalModule>,
    pub head: CenterHead,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = cfg.backbone.embed_dim;
        let backbone = Backbone::new(&mut init, &cfg.backbone, cfg.track_token);
        let temporal = match cfg.mode() {
            Mode::Temporal(v) => Some(TemporalModule::new(&mut init, v, d, &cfg.temporal)),
            _ => None,
        };
        let head = CenterHead::new(&mut init, d, cfg.backbone.grid(), &cfg.head);
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                temporal,
                head,
            },
            store,
        ))
    }

    pub fn grid(&self) -> usize {
        self.cfg.backbone.grid()
    }

    pub fn window(&self) -> usize {
        self.cfg.temporal.window
    }

    /// Joint encoding of one search image against pre-embedded template tokens.
    pub fn encode_frame(&self, b: &mut Bound, template_tokens: Var, search_image: Var) -> Result<(Option<Var>, Var)> {
        let search = self.backbone.embed_search(b, search_image)?;
        let track = if self.cfg.track_token {
            Some(self.backbone.track_token(b)?)
        } else {
            None
        };
        let enc = self.backbone.joint_encode(b, track, template_tokens, search)?;
        Ok((enc.track, enc.search))
    }

    /// Guidance and head for the newest frame. `window` holds the post-backbone
    /// track tokens, oldest first, ending with the current frame's.
    pub fn predict(&self, b: &mut Bound, search: Var, window: &[Var]) -> Result<(HeadVars, Option<Var>)> {
        let context = match (self.cfg.mode(), window.last()) {
            (Mode::Baseline, _) => None,
            (_, None) => return config_err("track-token modes need a non-empty window"),
            (Mode::TrackToken, Some(&last)) => Some(last),
            (Mode::Temporal(_), Some(_)) => {
                let t = if window.len() == 1 {
                    window[0]
                } else {
                    b.g.concat_rows(window)?
                };
                let out = self.temporal.as_ref().expect("temporal module").forward(b, t)?;
                let l = window.len();
                Some(b.g.slice_rows(out, l - 1, l)?)
            }
        };
        match context {
            Some(track) => {
                let (adjusted, s) = guide(b, search, track)?;
                Ok((self.head.forward(b, adjusted)?, Some(s)))
            }
            None => Ok((self.head.forward(b, search)?, None)),
        }
    }

    /// Classification and regression losses with the box read at the ground
    /// truth's peak cell.
    pub fn frame_loss(&self, b: &mut Bound, head: &HeadVars, gt: &BBox) -> Result<FrameLoss> {
        let g = self.grid();
        let target = make_target_map(gt, g)?;
        let (cls, clamped) = focal_loss(&mut b.g, head.score, &target)?;
        let cell = target.peak_index();
        let (row, col) = target.peak;
        let ox = b.g.select(head.offset, &[2 * cell])?;
        let oy = b.g.select(head.offset, &[2 * cell + 1])?;
        let w = b.g.select(head.size, &[2 * cell])?;
        let h = b.g.select(head.size, &[2 * cell + 1])?;
        let gf = g as f64;
        let cx = b.g.affine(ox, 1.0 / gf, col as f64 / gf);
        let cy = b.g.affine(oy, 1.0 / gf, row as f64 / gf);
        let pred: BoxVars = [cx, cy, w, h];
        Ok(FrameLoss {
            cls,
            giou: giou_loss(&mut b.g, &pred, gt)?,
            l1: l1_loss(&mut b.g, &pred, gt)?,
            clamped,
        })
    }
}
