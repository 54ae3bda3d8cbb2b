use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::StyleTag;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformParams {
    /// Box-downsampling factor of the low resolution proxy.
    pub lowres_factor: u32,
    /// Edge threshold on the normalised Sobel magnitude, channels in `[0, 1]`.
    pub sketch_threshold: f64,
    /// Hue rotation applied after palette quantisation.
    pub art_hue_degrees: f64,
    /// The two per-channel levels of the 8-colour palette.
    pub art_levels: [u8; 2],
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            lowres_factor: 8,
            sketch_threshold: 0.1,
            art_hue_degrees: 60.0,
            art_levels: [48, 208],
        }
    }
}

pub fn style_transform(image: &RgbImage, tag: StyleTag, params: &TransformParams) -> Result<RgbImage> {
    match tag {
        StyleTag::Lowres => Ok(lowres(image, params.lowres_factor.max(1))),
        StyleTag::Sketch => Ok(sketch(image, params.sketch_threshold)),
        StyleTag::Art => Ok(art(image, params.art_levels, params.art_hue_degrees)),
        StyleTag::Text | StyleTag::Image => Err(Error::UnsupportedTransform(tag)),
    }
}

/// Box average over `factor x factor` blocks, nearest-neighbour back up.
fn lowres(image: &RgbImage, factor: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let bw = w.div_ceil(factor);
    let bh = h.div_ceil(factor);
    let mut blocks = vec![[0u8; 3]; (bw * bh) as usize];
    for by in 0..bh {
        for bx in 0..bw {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for y in by * factor..((by + 1) * factor).min(h) {
                for x in bx * factor..((bx + 1) * factor).min(w) {
                    let p = image.get_pixel(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
            // round half up
            blocks[(by * bw + bx) as usize] = sum.map(|s| ((s + n / 2) / n) as u8);
        }
    }
    RgbImage::from_fn(w, h, |x, y| Rgb(blocks[((y / factor) * bw + x / factor) as usize]))
}

/// Sobel gradient magnitude per channel (kernels scaled by 1/8, replicate
/// border), maximum over channels, thresholded: edges black on white.
fn sketch(image: &RgbImage, threshold: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let at = |x: i64, y: i64, c: usize| {
        let xc = x.clamp(0, w as i64 - 1) as u32;
        let yc = y.clamp(0, h as i64 - 1) as u32;
        image.get_pixel(xc, yc)[c] as f64 / 255.0
    };
    RgbImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let magnitude = (0..3)
            .map(|c| {
                let gx = (at(x + 1, y - 1, c) + 2.0 * at(x + 1, y, c) + at(x + 1, y + 1, c)
                    - at(x - 1, y - 1, c)
                    - 2.0 * at(x - 1, y, c)
                    - at(x - 1, y + 1, c))
                    / 8.0;
                let gy = (at(x - 1, y + 1, c) + 2.0 * at(x, y + 1, c) + at(x + 1, y + 1, c)
                    - at(x - 1, y - 1, c)
                    - 2.0 * at(x, y - 1, c)
                    - at(x + 1, y - 1, c))
                    / 8.0;
                (gx * gx + gy * gy).sqrt()
            })
            .fold(0.0, f64::max);
        if magnitude > threshold {
            Rgb([0, 0, 0])
        } else {
            Rgb([255, 255, 255])
        }
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Two levels per channel (8 colours), then a fixed hue rotation.
fn art(image: &RgbImage, levels: [u8; 2], hue_degrees: f64) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let q = p.0.map(|v| if v < 128 { levels[0] } else { levels[1] } as f64 / 255.0);
        let (h, s, v) = rgb_to_hsv(q[0], q[1], q[2]);
        let (r, g, b) = hsv_to_rgb(h + hue_degrees, s, v);
        *p = Rgb([r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(64, 64, Rgb(c))
    }

    #[test]
    fn lowres_keeps_constant_images() {
        let img = constant([12, 200, 77]);
        assert_eq!(style_transform(&img, StyleTag::Lowres, &TransformParams::default()).unwrap(), img);
    }

    #[test]
    fn lowres_averages_blocks() {
        let img = RgbImage::from_fn(16, 8, |x, _| if x < 4 { Rgb([0, 0, 0]) } else { Rgb([200, 100, 50]) });
        let out = style_transform(&img, StyleTag::Lowres, &TransformParams::default()).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [100, 50, 25]);
        assert_eq!(out.get_pixel(7, 7).0, [100, 50, 25]);
        assert_eq!(out.get_pixel(8, 0).0, [200, 100, 50]);
        assert_eq!(out.dimensions(), (16, 8));
    }

    #[test]
    fn sketch_of_constant_image_is_blank() {
        let out = style_transform(&constant([90, 10, 240]), StyleTag::Sketch, &TransformParams::default()).unwrap();
        assert!(out.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn sketch_marks_the_step_column_band() {
        // black for x < 20, white for x >= 20: Sobel responds at x = 19 and 20
        let img = RgbImage::from_fn(32, 16, |x, _| if x < 20 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let out = style_transform(&img, StyleTag::Sketch, &TransformParams::default()).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let edge = p.0 == [0, 0, 0];
            assert_eq!(edge, x == 19 || x == 20, "pixel ({x},{y})");
        }
    }

    #[test]
    fn sketch_sees_hue_edges() {
        // nearly equal luma on both sides
        let img = RgbImage::from_fn(16, 8, |x, _| if x < 8 { Rgb([200, 60, 60]) } else { Rgb([60, 128, 60]) });
        let out = style_transform(&img, StyleTag::Sketch, &TransformParams::default()).unwrap();
        assert_eq!(out.get_pixel(7, 4).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(2, 4).0, [255, 255, 255]);
    }

    #[test]
    fn art_uses_at_most_eight_colours() {
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]));
        let out = style_transform(&img, StyleTag::Art, &TransformParams::default()).unwrap();
        let mut colours: Vec<[u8; 3]> = out.pixels().map(|p| p.0).collect();
        colours.sort();
        colours.dedup();
        assert!(colours.len() <= 8, "{}", colours.len());
        assert_eq!(out.dimensions(), (64, 64));
    }

    #[test]
    fn art_rotates_hue() {
        // pure red quantises to (208, 48, 48); +60 degrees lands on yellow
        let out = style_transform(&constant([255, 0, 0]), StyleTag::Art, &TransformParams::default()).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [208, 208, 48]);
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(rgb.0, rgb.1, rgb.2);
            let back = hsv_to_rgb(h, s, v);
            assert!((back.0 - rgb.0).abs() < 1e-12 && (back.1 - rgb.1).abs() < 1e-12 && (back.2 - rgb.2).abs() < 1e-12);
        }
    }

    #[test]
    fn text_and_image_tags_are_unsupported() {
        let img = constant([0, 0, 0]);
        for tag in [StyleTag::Text, StyleTag::Image] {
            assert!(matches!(
                style_transform(&img, tag, &TransformParams::default()),
                Err(Error::UnsupportedTransform(t)) if t == tag
            ));
        }
    }
}
