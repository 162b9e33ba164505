//! Deterministic synthetic videos: a colored shape moving over a noisy
//! background, with look-alike distractors, appearance drift, and full
//! occlusions. Plus cropping and the clip sampler used for training.

pub mod crop;
mod generate;
pub mod io;
pub mod sampler;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{config_err, Result};

pub use crop::{crop_region, Crop, CropTransform};
pub use generate::gen_sequence;
pub use sampler::{sample_clips, Clip, ClipBatch, SamplerConfig};

/// RGB frame, 8 bits per channel, row-major `(y, x, c)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n / 255.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: usize,
    pub len: usize,
}

impl Occlusion {
    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.len
    }

    /// First frame after the occluder leaves.
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Parameters of one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub shape: ShapeKind,
    /// Initial target width and height in pixels.
    pub target_size: (f64, f64),
    /// Initial target color as (hue, saturation, value), each in `[0, 1]`.
    pub target_hsv: (f64, f64, f64),
    /// Hue change per frame.
    pub hue_drift: f64,
    /// Standard deviation of the per-frame log-scale random walk.
    pub scale_drift: f64,
    /// Initial speed in pixels per frame.
    pub speed: f64,
    /// Standard deviation of the per-frame velocity change.
    pub accel_std: f64,
    pub max_speed: f64,
    pub distractors: usize,
    /// 1 means distractors share the target's color exactly.
    pub distractor_similarity: f64,
    pub occlusions: Vec<Occlusion>,
    /// Background texture amplitude in `[0, 1]` pixel units.
    pub noise: f64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.hue_drift,
            self.scale_drift,
            self.speed,
            self.accel_std,
            self.max_speed,
            self.distractor_similarity,
            self.noise,
            self.target_size.0,
            self.target_size.1,
        ];
        if rates.iter().any(|v| !v.is_finite()) {
            return config_err("world rates must be finite");
        }
        if self.width < 16 || self.height < 16 || self.num_frames == 0 {
            return config_err("world frames must be at least 16x16 and the sequence non-empty");
        }
        let (w, h) = self.target_size;
        if !(w >= 2.0 && h >= 2.0 && w < self.width as f64 && h < self.height as f64) {
            return config_err(format!("target size {w}x{h} does not fit the frame"));
        }
        if let Some(o) = self.occlusions.iter().find(|o| o.len == 0 || o.end() > self.num_frames) {
            return config_err(format!("occlusion {o:?} outside the sequence"));
        }
        Ok(())
    }

    /// Motionless, drift-free single-target world.
    pub fn static_target(width: usize, height: usize, num_frames: usize) -> Self {
        Self {
            width,
            height,
            num_frames,
            shape: ShapeKind::Rect,
            target_size: (width as f64 / 8.0, height as f64 / 8.0),
            target_hsv: (0.0, 0.8, 0.9),
            hue_drift: 0.0,
            scale_drift: 0.0,
            speed: 0.0,
            accel_std: 0.0,
            max_speed: 0.0,
            distractors: 0,
            distractor_similarity: 0.5,
            occlusions: vec![],
            noise: 0.1,
        }
    }
}

/// Per-frame annotation flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameEvents {
    pub visible: bool,
    pub occluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    /// Ground truth in frame pixels.
    pub gt: Vec<BBox>,
    pub events: Vec<FrameEvents>,
    /// Occlusion intervals, when known (generated sequences).
    pub occlusions: Vec<Occlusion>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Occlusion intervals recovered from the visibility flags.
    pub fn occlusion_intervals(&self) -> Vec<Occlusion> {
        let mut out = Vec::new();
        let mut start = None;
        for (t, e) in self.events.iter().enumerate() {
            match (e.visible, start) {
                (false, None) => start = Some(t),
                (true, Some(s)) => {
                    out.push(Occlusion { start: s, len: t - s });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(Occlusion {
                start: s,
                len: self.events.len() - s,
            });
        }
        out
    }
}

/// Distribution over sequences; expands to one [`WorldSpec`] per sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub target_min: f64,
    pub target_max: f64,
    pub speed_max: f64,
    pub accel_std: f64,
    pub max_speed: f64,
    /// Upper bound on the per-frame hue change magnitude.
    pub hue_drift: f64,
    pub scale_drift: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub similarity: f64,
    pub occlusions: usize,
    pub occlusion_min: usize,
    pub occlusion_max: usize,
    pub noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sequences: 30,
            frames: 120,
            width: 192,
            height: 192,
            target_min: 18.0,
            target_max: 30.0,
            speed_max: 4.0,
            accel_std: 0.6,
            max_speed: 6.0,
            hue_drift: 0.002,
            scale_drift: 0.01,
            distractors_min: 1,
            distractors_max: 3,
            similarity: 0.6,
            occlusions: 1,
            occlusion_min: 10,
            occlusion_max: 20,
            noise: 0.15,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames == 0 {
            return config_err("world.sequences and world.frames must be positive");
        }
        if !(self.target_min > 0.0 && self.target_min <= self.target_max) {
            return config_err("world.target_min must be positive and <= world.target_max");
        }
        if self.distractors_min > self.distractors_max {
            return config_err("world.distractors_min > world.distractors_max");
        }
        if self.occlusions > 0 {
            if self.occlusion_min == 0 || self.occlusion_min > self.occlusion_max {
                return config_err("world.occlusion_min must be in 1..=world.occlusion_max");
            }
            let need = self.occlusions * (self.occlusion_max + 10) + 10;
            if need > self.frames {
                return config_err(format!("{} occlusions need at least {need} frames", self.occlusions));
            }
        }
        Ok(())
    }

    /// Per-sequence specs, deterministic in `seed`.
    pub fn specs(&self, seed: u64) -> Result<Vec<WorldSpec>> {
        self.validate()?;
        (0..self.sequences)
            .map(|i| generate::sample_spec(self, sequence_seed(seed, i)))
            .collect()
    }

    /// Generates every sequence of the suite.
    pub fn generate(&self, seed: u64) -> Result<Vec<SyntheticSequence>> {
        self.specs(seed)?
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut s = gen_sequence(spec, sequence_seed(seed, i) ^ 0x5eed)?;
                s.name = format!("seq_{i:03}");
                Ok(s)
            })
            .collect()
    }
}

/// Independent seed for sequence `i` of a suite.
pub fn sequence_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}
