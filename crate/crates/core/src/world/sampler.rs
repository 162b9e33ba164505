use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::{crop_region, resample, Crop, CropTransform};
use super::SyntheticSequence;
use crate::bbox::BBox;
use crate::error::{config_err, Error, Result};

/// Clip sampling and augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Clips per batch unit.
    pub clips: usize,
    /// Consecutive search frames per clip.
    pub frames: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Uniform center shift as a fraction of the search crop side.
    pub center_jitter: f64,
    /// Crop side multiplier range, sampled log-uniformly.
    pub scale_jitter: (f64, f64),
    /// Per-image brightness multiplier range `1 ± brightness`.
    pub brightness: f64,
    pub flip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            clips: 4,
            frames: 8,
            template_factor: 2.0,
            search_factor: 4.0,
            center_jitter: 0.1,
            scale_jitter: (0.8, 1.25),
            brightness: 0.2,
            flip: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 {
            return config_err("sampler needs at least one clip of one frame");
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return config_err("context factors must be positive");
        }
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && lo <= hi) || !(0.0..1.0).contains(&self.brightness) || !(self.center_jitter >= 0.0) {
            return config_err("invalid jitter ranges");
        }
        Ok(())
    }

    /// Image pairs per batch unit.
    pub fn pairs(&self) -> usize {
        self.clips * self.frames
    }
}

/// One template and `m` consecutive search crops from the same sequence.
#[derive(Clone, Debug)]
pub struct Clip {
    pub sequence: usize,
    /// Frame index of the first search crop.
    pub start: usize,
    pub template: Crop,
    pub search: Vec<Crop>,
    /// Ground truth in normalized search-crop coordinates.
    pub gt: Vec<BBox>,
    pub flipped: bool,
}

impl Clip {
    pub fn frame_indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.search.len()
    }
}

#[derive(Clone, Debug)]
pub struct ClipBatch {
    pub clips: Vec<Clip>,
}

impl ClipBatch {
    pub fn pairs(&self) -> usize {
        self.clips.iter().map(|c| c.search.len()).sum()
    }
}

fn brighten(crop: &mut Crop, k: f64) {
    for v in crop.pixels.iter_mut() {
        *v = (*v * k).clamp(0.0, 1.0);
    }
}

fn flip_box(b: &BBox) -> BBox {
    BBox::new(1.0 - b.cx, b.cy, b.w, b.h)
}

/// Samples `cfg.clips` clips of `cfg.frames` frames. The template always comes
/// from frame 0; search frames start at frame 1 or later.
pub fn sample_clips(
    sequences: &[SyntheticSequence],
    cfg: &SamplerConfig,
    template_size: usize,
    search_size: usize,
    seed: u64,
) -> Result<ClipBatch> {
    cfg.validate()?;
    let m = cfg.frames;
    let short = sequences.iter().filter(|s| s.len() <= m).count();
    if sequences.is_empty() || short > 0 {
        return Err(Error::Sampling(format!(
            "{short} of {} sequences are shorter than the {} frames a clip of {m} needs",
            sequences.len(),
            m + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ln_lo, ln_hi) = (cfg.scale_jitter.0.ln(), cfg.scale_jitter.1.ln());
    let mut clips = Vec::with_capacity(cfg.clips);
    for _ in 0..cfg.clips {
        let si = rng.gen_range(0..sequences.len());
        let seq = &sequences[si];
        let start = rng.gen_range(1..=seq.len() - m);
        let flipped = cfg.flip && rng.gen::<bool>();
        let mut template = crop_region(&seq.frames[0], &seq.gt[0], cfg.template_factor, template_size)?;
        brighten(&mut template, 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness));
        if flipped {
            template.flip_horizontal();
        }
        let mut search = Vec::with_capacity(m);
        let mut gt = Vec::with_capacity(m);
        for t in start..start + m {
            let b = seq.gt[t];
            let base = cfg.search_factor * (b.w * b.h).sqrt();
            let side = base
                * if ln_hi > ln_lo {
                    rng.gen_range(ln_lo..=ln_hi).exp()
                } else {
                    ln_lo.exp()
                };
            let dx = rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) * side;
            let dy = rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) * side;
            let tf = CropTransform {
                x0: b.cx + dx - 0.5 * side,
                y0: b.cy + dy - 0.5 * side,
                side,
            };
            let mut crop = resample(&seq.frames[t], tf, search_size);
            brighten(&mut crop, 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness));
            let mut g = tf.to_crop(&b);
            if flipped {
                crop.flip_horizontal();
                g = flip_box(&g);
            }
            search.push(crop);
            gt.push(g);
        }
        clips.push(Clip {
            sequence: si,
            start,
            template,
            search,
            gt,
            flipped,
        });
    }
    Ok(ClipBatch { clips })
}
