use super::Frame;
use crate::bbox::BBox;
use crate::error::{contract, Result};

/// Square frame region `[x0, x0+side] × [y0, y0+side]` that a crop covers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropTransform {
    /// Frame-pixel box to normalized crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    /// Normalized crop box back to frame pixels.
    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

/// Resampled square crop with values in `[0, 1]`, row-major `(y, x, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub transform: CropTransform,
}

impl Crop {
    /// Mirror around the vertical axis.
    pub fn flip_horizontal(&mut self) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s / 2 {
                let a = (y * s + x) * 3;
                let b = (y * s + (s - 1 - x)) * 3;
                for c in 0..3 {
                    self.pixels.swap(a + c, b + c);
                }
            }
        }
    }
}

/// Square region centered on `b` with side `factor·√(w·h)`, bilinearly
/// resized to `out_size`. Samples outside the frame read the channel mean.
pub fn crop_region(frame: &Frame, b: &BBox, factor: f64, out_size: usize) -> Result<Crop> {
    if !(factor > 0.0) || out_size == 0 {
        return contract(format!(
            "crop needs factor > 0 and a positive size, got {factor}, {out_size}"
        ));
    }
    b.validate()?;
    let side = factor * (b.w * b.h).sqrt();
    let transform = CropTransform {
        x0: b.cx - 0.5 * side,
        y0: b.cy - 0.5 * side,
        side,
    };
    Ok(resample(frame, transform, out_size))
}

pub(crate) fn resample(frame: &Frame, transform: CropTransform, out_size: usize) -> Crop {
    let mean = frame.channel_mean();
    let (w, h) = (frame.width as isize, frame.height as isize);
    let step = transform.side / out_size as f64;
    let tap = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            mean[c]
        } else {
            f64::from(frame.pixels[((y * w + x) as usize) * 3 + c]) / 255.0
        }
    };
    let mut pixels = Vec::with_capacity(out_size * out_size * 3);
    for v in 0..out_size {
        // pixel-center convention: frame pixel i spans [i, i+1]
        let fy = transform.y0 + (v as f64 + 0.5) * step - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0 = y0 as isize;
        for u in 0..out_size {
            let fx = transform.x0 + (u as f64 + 0.5) * step - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0 = x0 as isize;
            for c in 0..3 {
                let top = tap(x0, y0, c) * (1.0 - tx) + tap(x0 + 1, y0, c) * tx;
                let bot = tap(x0, y0 + 1, c) * (1.0 - tx) + tap(x0 + 1, y0 + 1, c) * tx;
                pixels.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Crop {
        size: out_size,
        pixels,
        transform,
    }
}
