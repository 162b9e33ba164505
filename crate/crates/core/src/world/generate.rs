use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Frame, FrameEvents, Occlusion, ShapeKind, SyntheticSequence, WorldConfig, WorldSpec};
use crate::bbox::BBox;
use crate::error::Result;

/// Background lattice spacing in pixels.
const BG_CELL: usize = 12;
const OCCLUDER_MARGIN: f64 = 3.0;
/// Target size stays within a factor of two of its initial size.
const LOG_SCALE_LIMIT: f64 = std::f64::consts::LN_2;

pub(crate) fn sample_spec(cfg: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Diamond][rng.gen_range(0..3)];
    let side = |rng: &mut ChaCha8Rng| {
        if cfg.target_max > cfg.target_min {
            rng.gen_range(cfg.target_min..=cfg.target_max)
        } else {
            cfg.target_min
        }
    };
    let target_size = (side(&mut rng), side(&mut rng));
    let target_hsv = (rng.gen::<f64>(), rng.gen_range(0.6..1.0), rng.gen_range(0.7..1.0));
    let hue_drift = cfg.hue_drift * rng.gen_range(-1.0..=1.0);
    let speed = cfg.speed_max * rng.gen::<f64>();
    let distractors = rng.gen_range(cfg.distractors_min..=cfg.distractors_max);
    let mut occlusions = Vec::with_capacity(cfg.occlusions);
    // one interval per equal segment of the timeline, at least 10 frames apart
    if let Some(seg) = cfg.frames.saturating_sub(10).checked_div(cfg.occlusions) {
        for i in 0..cfg.occlusions {
            let len = rng.gen_range(cfg.occlusion_min..=cfg.occlusion_max);
            let lo = 10 + i * seg;
            let hi = lo + seg - len - 10;
            occlusions.push(Occlusion {
                start: rng.gen_range(lo..=hi),
                len,
            });
        }
    }
    let spec = WorldSpec {
        width: cfg.width,
        height: cfg.height,
        num_frames: cfg.frames,
        shape,
        target_size,
        target_hsv,
        hue_drift,
        scale_drift: cfg.scale_drift,
        speed,
        accel_std: cfg.accel_std,
        max_speed: cfg.max_speed.max(speed),
        distractors,
        distractor_similarity: cfg.similarity,
        occlusions,
        noise: cfg.noise,
    };
    spec.validate()?;
    Ok(spec)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Moving object state: center, size, velocity.
#[derive(Clone, Debug)]
struct Body {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Body {
    fn spawn(rng: &mut ChaCha8Rng, w: f64, h: f64, speed: f64, width: f64, height: f64) -> Self {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            cx: rng.gen_range(0.5 * w..=width - 0.5 * w),
            cy: rng.gen_range(0.5 * h..=height - 0.5 * h),
            w,
            h,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
        }
    }

    fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    /// Random acceleration, speed cap, move, and bounce off the borders.
    fn step(&mut self, accel: (f64, f64), max_speed: f64, width: f64, height: f64) {
        self.vx += accel.0;
        self.vy += accel.1;
        let speed = self.vx.hypot(self.vy);
        if speed > max_speed {
            let k = if max_speed > 0.0 { max_speed / speed } else { 0.0 };
            self.vx *= k;
            self.vy *= k;
        }
        self.cx += self.vx;
        self.cy += self.vy;
        self.keep_inside(width, height);
    }

    fn keep_inside(&mut self, width: f64, height: f64) {
        let (lo_x, hi_x) = (0.5 * self.w, width - 0.5 * self.w);
        if self.cx < lo_x {
            self.cx = lo_x;
            self.vx = self.vx.abs();
        } else if self.cx > hi_x {
            self.cx = hi_x;
            self.vx = -self.vx.abs();
        }
        let (lo_y, hi_y) = (0.5 * self.h, height - 0.5 * self.h);
        if self.cy < lo_y {
            self.cy = lo_y;
            self.vy = self.vy.abs();
        } else if self.cy > hi_y {
            self.cy = hi_y;
            self.vy = -self.vy.abs();
        }
    }
}

/// Coverage of pixel center `(px, py)` by `shape` inscribed in `b`, with a
/// darker rim so the outline is visible on any background.
fn shape_shade(shape: ShapeKind, b: &BBox, px: f64, py: f64) -> Option<f64> {
    let dx = (px - b.cx) / (0.5 * b.w);
    let dy = (py - b.cy) / (0.5 * b.h);
    let r = match shape {
        ShapeKind::Rect => dx.abs().max(dy.abs()),
        ShapeKind::Ellipse => (dx * dx + dy * dy).sqrt(),
        ShapeKind::Diamond => dx.abs() + dy.abs(),
    };
    match r {
        r if r > 1.0 => None,
        r if r > 0.78 => Some(0.55),
        r if r < 0.3 => Some(1.15),
        _ => Some(1.0),
    }
}

fn paint(buf: &mut [f64], width: usize, height: usize, shape: ShapeKind, b: &BBox, rgb: [f64; 3]) {
    let x0 = b.x1().floor().max(0.0) as usize;
    let y0 = b.y1().floor().max(0.0) as usize;
    let x1 = (b.x2().ceil().max(0.0) as usize).min(width);
    let y1 = (b.y2().ceil().max(0.0) as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            if let Some(shade) = shape_shade(shape, b, x as f64 + 0.5, y as f64 + 0.5) {
                let i = (y * width + x) * 3;
                for c in 0..3 {
                    buf[i + c] = (rgb[c] * shade).min(1.0);
                }
            }
        }
    }
}

fn fill_rect(buf: &mut [f64], width: usize, height: usize, b: &BBox, rgb: [f64; 3]) {
    let x0 = b.x1().floor().max(0.0) as usize;
    let y0 = b.y1().floor().max(0.0) as usize;
    let x1 = (b.x2().ceil().max(0.0) as usize).min(width);
    let y1 = (b.y2().ceil().max(0.0) as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = (y * width + x) * 3;
            buf[i..i + 3].copy_from_slice(&rgb);
        }
    }
}

/// Smooth value noise: a random lattice, bilinearly interpolated.
fn background(rng: &mut ChaCha8Rng, width: usize, height: usize, noise: f64) -> Vec<f64> {
    let base = hsv_to_rgb(rng.gen(), rng.gen_range(0.0..0.35), rng.gen_range(0.3..0.6));
    let gw = width / BG_CELL + 2;
    let gh = height / BG_CELL + 2;
    let lattice: Vec<[f64; 3]> = (0..gw * gh)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let mut buf = vec![0.0; width * height * 3];
    for y in 0..height {
        let fy = y as f64 / BG_CELL as f64;
        let (iy, ty) = (fy as usize, fy.fract());
        for x in 0..width {
            let fx = x as f64 / BG_CELL as f64;
            let (ix, tx) = (fx as usize, fx.fract());
            let at = |j: usize, i: usize| lattice[j * gw + i];
            let (a, b, c, d) = (at(iy, ix), at(iy, ix + 1), at(iy + 1, ix), at(iy + 1, ix + 1));
            for ch in 0..3 {
                let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                let n = top * (1.0 - ty) + bot * ty;
                buf[(y * width + x) * 3 + ch] = (base[ch] + noise * n).clamp(0.0, 1.0);
            }
        }
    }
    buf
}

fn quantize(buf: &[f64], width: usize, height: usize) -> Frame {
    Frame {
        width,
        height,
        pixels: buf.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    }
}

/// Renders one sequence. Deterministic in `(spec, seed)`.
pub fn gen_sequence(spec: &WorldSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    let accel = Normal::new(0.0, spec.accel_std.abs()).expect("finite std");
    let scale_walk = Normal::new(0.0, spec.scale_drift.abs()).expect("finite std");

    let bg = background(&mut rng, spec.width, spec.height, spec.noise);
    let (w0, h0) = spec.target_size;
    let mut target = Body::spawn(&mut rng, w0, h0, spec.speed, wf, hf);
    let mut distractors: Vec<(Body, f64)> = (0..spec.distractors)
        .map(|_| {
            let k = rng.gen_range(0.8..1.2);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let hue_offset = sign * (1.0 - spec.distractor_similarity) * 0.5;
            let speed = spec.speed * rng.gen_range(0.5..1.5);
            (Body::spawn(&mut rng, w0 * k, h0 * k, speed, wf, hf), hue_offset)
        })
        .collect();
    let dist_max_speed = spec.max_speed * 1.5;

    // Trajectories first: the occluder must cover the target's path.
    let mut log_scale = 0.0f64;
    let mut gt = Vec::with_capacity(spec.num_frames);
    let mut dist_boxes = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        if t > 0 {
            log_scale = (log_scale + scale_walk.sample(&mut rng)).clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
            let k = log_scale.exp();
            target.w = (w0 * k).min(0.5 * wf);
            target.h = (h0 * k).min(0.5 * hf);
            let a = (accel.sample(&mut rng), accel.sample(&mut rng));
            target.step(a, spec.max_speed, wf, hf);
            for (d, _) in distractors.iter_mut() {
                let a = (accel.sample(&mut rng), accel.sample(&mut rng));
                d.step(a, dist_max_speed, wf, hf);
            }
        }
        gt.push(target.bbox());
        dist_boxes.push(distractors.iter().map(|(d, _)| d.bbox()).collect::<Vec<_>>());
    }

    let occluders: Vec<(Occlusion, BBox, [f64; 3])> = spec
        .occlusions
        .iter()
        .map(|o| {
            let span = &gt[o.start..o.end()];
            let x1 = span.iter().map(BBox::x1).fold(f64::INFINITY, f64::min) - OCCLUDER_MARGIN;
            let y1 = span.iter().map(BBox::y1).fold(f64::INFINITY, f64::min) - OCCLUDER_MARGIN;
            let x2 = span.iter().map(BBox::x2).fold(f64::NEG_INFINITY, f64::max) + OCCLUDER_MARGIN;
            let y2 = span.iter().map(BBox::y2).fold(f64::NEG_INFINITY, f64::max) + OCCLUDER_MARGIN;
            let rect = BBox::from_corners(x1, y1, x2, y2).clip(wf, hf);
            let gray = rng.gen_range(0.1..0.9);
            let tint = hsv_to_rgb(rng.gen(), 0.15, gray);
            (*o, rect, tint)
        })
        .collect();

    let (h_t, s_t, v_t) = spec.target_hsv;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut events = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let hue = h_t + spec.hue_drift * t as f64;
        let mut buf = bg.clone();
        for ((_, offset), b) in distractors.iter().zip(&dist_boxes[t]) {
            paint(
                &mut buf,
                spec.width,
                spec.height,
                spec.shape,
                b,
                hsv_to_rgb(hue + offset, s_t, v_t),
            );
        }
        paint(
            &mut buf,
            spec.width,
            spec.height,
            spec.shape,
            &gt[t],
            hsv_to_rgb(hue, s_t, v_t),
        );
        let mut occluded = false;
        for (o, rect, rgb) in &occluders {
            if o.contains(t) {
                fill_rect(&mut buf, spec.width, spec.height, rect, *rgb);
                occluded = true;
            }
        }
        frames.push(quantize(&buf, spec.width, spec.height));
        events.push(FrameEvents {
            visible: !occluded,
            occluded,
        });
    }

    Ok(SyntheticSequence {
        name: String::from("seq"),
        frames,
        gt,
        events,
        occlusions: spec.occlusions.clone(),
    })
}
