//! Tiny raster helpers for trace dumps.

use tokentrack_core::world::Frame;
use tokentrack_core::BBox;

/// One-pixel outline of `b`, clipped to the frame.
pub fn outline(frame: &mut Frame, b: &BBox, rgb: [u8; 3]) {
    let (w, h) = (frame.width as isize, frame.height as isize);
    let x1 = b.x1().round() as isize;
    let y1 = b.y1().round() as isize;
    let x2 = (b.x2().round() as isize - 1).max(x1);
    let y2 = (b.y2().round() as isize - 1).max(y1);
    let mut put = |x: isize, y: isize| {
        if x >= 0 && y >= 0 && x < w && y < h {
            let i = ((y * w + x) as usize) * 3;
            frame.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

/// Nearest-neighbour upscale of a row-major `g×g` map by `k`.
pub fn upscale(values: &[f64], g: usize, k: usize) -> Vec<f64> {
    let s = g * k;
    (0..s * s).map(|i| values[(i / s / k) * g + (i % s) / k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upscale_repeats_cells() {
        let v = upscale(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(
            v,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn outline_stays_inside() {
        let mut f = Frame::new(8, 8);
        outline(&mut f, &BBox::from_corners(-3.0, 2.0, 20.0, 5.0), [255, 0, 0]);
        assert_eq!(f.pixel(0, 2), [255, 0, 0]);
        assert_eq!(f.pixel(4, 4), [255, 0, 0]);
        assert_eq!(f.pixel(4, 3), [0, 0, 0]);
    }
}
