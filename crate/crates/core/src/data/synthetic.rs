//! Procedural gallery: one coloured shape per image on a textured
//! background, plus its sketch, art and low resolution queries and a caption.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{style_transform, write_manifest, DataConfig, ManifestRecord, Split, StyleTag};
use crate::error::{Error, Result};
use crate::linalg::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("orange", [240, 140, 30]),
    ("yellow", [235, 215, 40]),
    ("green", [50, 170, 60]),
    ("cyan", [40, 200, 210]),
    ("blue", [40, 70, 210]),
    ("purple", [140, 50, 190]),
    ("pink", [240, 120, 180]),
];

/// Rotation in degrees; each pose also moves the shape toward one quadrant.
pub const POSES: [u16; 4] = [0, 90, 180, 270];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: String,
    pub pose: u16,
}

impl Attributes {
    pub fn caption(&self) -> String {
        format!("a {} {} rotated {} degrees", self.color, self.shape.name(), self.pose)
    }
}

/// Everything needed to render one gallery image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: usize,
    pub pose: usize,
    pub radius: f64,
    pub jitter: (f64, f64),
    pub background: [[f64; 3]; 2],
    pub gradient_angle: f64,
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub stripe_phase: f64,
    pub stripe_amp: f64,
}

impl Scene {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        // muted channels kept clear of mid-grey, so the art quantiser maps
        // flat background regions to flat colours instead of stripe noise
        let mut muted = || {
            [0; 3].map(|_: i32| {
                let v = rng.gen_range(0.2..0.4);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    1.0 - v
                }
            })
        };
        let background = [muted(), muted()];
        Self {
            shape: Shape::ALL[rng.gen_range(0..4)],
            color: rng.gen_range(0..PALETTE.len()),
            pose: rng.gen_range(0..POSES.len()),
            radius: rng.gen_range(0.26..0.34),
            jitter: (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)),
            background,
            gradient_angle: rng.gen_range(0.0..2.0 * PI),
            stripe_freq: rng.gen_range(2.0..6.0),
            stripe_angle: rng.gen_range(0.0..PI),
            stripe_phase: rng.gen_range(0.0..2.0 * PI),
            stripe_amp: rng.gen_range(0.04..0.08),
        }
    }

    pub fn attributes(&self) -> Attributes {
        Attributes {
            shape: self.shape,
            color: PALETTE[self.color].0.to_string(),
            pose: POSES[self.pose],
        }
    }
}

fn polygon(shape: Shape) -> Vec<(f64, f64)> {
    // vertices on the unit circle, angle 0 pointing up (negative y)
    let ring = |n: usize, offset: f64, radius: &dyn Fn(usize) -> f64| -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let a = offset + 2.0 * PI * i as f64 / n as f64;
                (radius(i) * a.sin(), -radius(i) * a.cos())
            })
            .collect()
    };
    match shape {
        Shape::Square => ring(4, PI / 4.0, &|_| 0.95),
        Shape::Triangle => ring(3, 0.0, &|_| 1.0),
        Shape::Star => ring(10, 0.0, &|i| if i % 2 == 0 { 1.0 } else { 0.45 }),
        Shape::Circle => Vec::new(),
    }
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn render_scene(scene: &Scene, size: u32) -> RgbImage {
    let s = size as f64;
    let quadrant = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)][scene.pose];
    let cx = 0.5 + 0.1 * quadrant.0 + scene.jitter.0;
    let cy = 0.5 + 0.1 * quadrant.1 + scene.jitter.1;
    let theta = (POSES[scene.pose] as f64).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let poly = polygon(scene.shape);
    let fg = PALETTE[scene.color].1.map(|c| c as f64 / 255.0);
    let (gs, gc) = scene.gradient_angle.sin_cos();
    let (ss, sc) = scene.stripe_angle.sin_cos();
    let sub = [0.25, 0.75];

    RgbImage::from_fn(size, size, |px, py| {
        let u = (px as f64 + 0.5) / s;
        let v = (py as f64 + 0.5) / s;
        let t = ((u - 0.5) * gc + (v - 0.5) * gs + 0.5).clamp(0.0, 1.0);
        let stripe = scene.stripe_amp * (2.0 * PI * scene.stripe_freq * (u * sc + v * ss) + scene.stripe_phase).sin();
        let bg: [f64; 3] =
            [0, 1, 2].map(|c| scene.background[0][c] * (1.0 - t) + scene.background[1][c] * t + stripe);
        let mut cover = 0.0;
        for oy in sub {
            for ox in sub {
                let dx = ((px as f64 + ox) / s - cx) / scene.radius;
                let dy = ((py as f64 + oy) / s - cy) / scene.radius;
                // rotate the sample into the shape frame
                let lx = dx * cos_t + dy * sin_t;
                let ly = -dx * sin_t + dy * cos_t;
                let hit = match scene.shape {
                    Shape::Circle => lx * lx + ly * ly <= 1.0,
                    _ => inside_polygon(&poly, lx, ly),
                };
                if hit {
                    cover += 0.25;
                }
            }
        }
        Rgb([0, 1, 2].map(|c| ((fg[c] * cover + bg[c] * (1.0 - cover)).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Renders `count` gallery images with their three visual queries, writes
/// them as PNG under `output_dir` and returns the manifest path.
pub fn generate_synthetic_gallery(count: usize, seed: u64, output_dir: &Path, config: &DataConfig) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    for sub in ["gallery", "sketch", "art", "lowres"] {
        fs::create_dir_all(output_dir.join(sub))?;
    }
    let mut rng = seeded_rng(seed, 100);
    let scenes: Vec<Scene> = (0..count).map(|_| Scene::sample(&mut rng)).collect();

    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let test_count = if count > 1 {
        ((count as f64 * config.test_fraction).round() as usize).clamp(0, count - 1)
    } else {
        0
    };
    let mut split = vec![Split::Train; count];
    for &i in &order[..test_count] {
        split[i] = Split::Test;
    }

    let width = count.saturating_sub(1).to_string().len().max(4);
    let mut records = Vec::with_capacity(4 * count);
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("g{i:0width$}");
        let image = render_scene(scene, config.image_size);
        let image_path = PathBuf::from(format!("gallery/{id}.png"));
        image.save(output_dir.join(&image_path))?;
        let attributes = scene.attributes();
        records.push(ManifestRecord {
            gallery_id: id.clone(),
            image_path: image_path.clone(),
            style: StyleTag::Text,
            query_path: None,
            text: Some(attributes.caption()),
            split: split[i],
            attributes: Some(attributes.clone()),
        });
        for style in StyleTag::VISUAL_QUERY_STYLES {
            let query = style_transform(&image, style, &config.transforms)?;
            let query_path = PathBuf::from(format!("{style}/{id}.png"));
            query.save(output_dir.join(&query_path))?;
            records.push(ManifestRecord {
                gallery_id: id.clone(),
                image_path: image_path.clone(),
                style,
                query_path: Some(query_path),
                text: None,
                split: split[i],
                attributes: Some(attributes.clone()),
            });
        }
    }
    let manifest = output_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_mentions_every_attribute() {
        let a = Attributes {
            shape: Shape::Star,
            color: "red".into(),
            pose: 90,
        };
        assert_eq!(a.caption(), "a red star rotated 90 degrees");
    }

    #[test]
    fn polygons_contain_their_centre() {
        for shape in [Shape::Square, Shape::Triangle, Shape::Star] {
            assert!(inside_polygon(&polygon(shape), 0.0, 0.05), "{shape:?}");
            assert!(!inside_polygon(&polygon(shape), 1.2, 1.2));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = seeded_rng(3, 0);
        let scene = Scene::sample(&mut rng);
        assert_eq!(render_scene(&scene, 64), render_scene(&scene, 64));
    }

    #[test]
    fn shape_pixels_take_the_palette_colour() {
        let mut rng = seeded_rng(5, 0);
        let mut scene = Scene::sample(&mut rng);
        scene.shape = Shape::Circle;
        scene.color = 5;
        scene.pose = 0;
        scene.jitter = (0.0, 0.0);
        let img = render_scene(&scene, 64);
        // centre of the circle sits at (0.4, 0.4) of the frame
        assert_eq!(img.get_pixel(25, 25).0, PALETTE[5].1);
    }

    #[test]
    fn zero_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_gallery(0, 1, dir.path(), &DataConfig::default()).is_err());
    }
}
