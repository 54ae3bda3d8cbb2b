//! Frozen feature extractors: the convolutional style extractor, the patch
//! stem plus transformer blocks of the retrieval encoder, and the text tower.

mod conv;
mod patch;
mod text;
mod transformer;

pub use conv::{ConvExtractor, ConvLayer};
pub use patch::PatchEmbed;
pub use text::{tokenize, TextEncoder, TextTrace, UNK_TOKEN};
pub use transformer::{Block, BlockCache, Transformer};

use image::RgbImage;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{norm, seeded_rng};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Input side `S`; images are resized to `S x S`.
    pub image_size: usize,
    pub patch_size: usize,
    /// Channels of the first two conv layers (the pool sits between them and the third).
    pub conv_channels: usize,
    /// Channels of the third conv layer, i.e. `C` of the style feature map.
    pub feature_channels: usize,
    /// Token dimension `d`, shared by image and text towers.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Average-pool factor applied to the conv feature map before it is cut
    /// into patch tokens.
    pub token_pool: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    /// Standardise each image by its own mean and deviation (over all
    /// pixels and channels) instead of `pixel_mean` / `pixel_std`.
    pub per_image_norm: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Single-core CPU scale.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            conv_channels: 8,
            feature_channels: 16,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
            token_pool: 2,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
            per_image_norm: true,
            seed: 0x5eed,
        }
    }

    /// Shapes of a VGG-16 style extractor feeding a ViT-L/16 encoder.
    pub fn paper_reference() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            conv_channels: 64,
            feature_channels: 128,
            width: 1024,
            depth: 24,
            heads: 16,
            mlp_hidden: 4096,
            token_pool: 2,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
            per_image_norm: false,
            seed: 0x5eed,
        }
    }

    pub fn patch_count(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Side of one patch token in pooled feature-map cells.
    pub fn token_cell(&self) -> usize {
        self.patch_size / (2 * self.token_pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size % 2 != 0 {
            return Err(Error::Config("image_size must be even".into()));
        }
        if self.token_pool == 0 || self.patch_size % (2 * self.token_pool) != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a multiple of twice token_pool {}",
                self.patch_size, self.token_pool
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_hidden == 0 || self.conv_channels == 0 || self.feature_channels == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("pixel_std entries must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial feature grid `H x W x C` produced by the conv extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub source_layer: String,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, source_layer: impl Into<String>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("feature map {h}x{w}x{c} has an empty axis")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature map contains non-finite entries".into()));
        }
        Ok(Self {
            data,
            source_layer: source_layer.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&self, factor: usize) -> Result<Array3<f64>> {
        let (h, w, c) = self.data.dim();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "feature map {h}x{w} is not divisible by pooling factor {factor}"
            )));
        }
        let mut pooled = Array3::<f64>::zeros((h / factor, w / factor, c));
        for ((y, x, ch), v) in self.data.indexed_iter() {
            pooled[[y / factor, x / factor, ch]] += v;
        }
        pooled /= (factor * factor) as f64;
        Ok(pooled)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    /// L2-normalises `vector`.
    pub fn unit(vector: Vec<f64>) -> Result<Self> {
        let n = norm(&vector);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateInput("cannot normalise a zero or non-finite vector".into()));
        }
        Ok(Self {
            vector: vector.into_iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn raw(vector: Vec<f64>) -> Self {
        Self {
            vector,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Class token followed by patch tokens, all of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub class_token: Array1<f64>,
    pub patch_tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn dim(&self) -> usize {
        self.class_token.len()
    }

    pub fn patch_count(&self) -> usize {
        self.patch_tokens.nrows()
    }
}

/// Resizes to `S x S` (if needed) and normalises per [`BackboneConfig::per_image_norm`].
pub fn preprocess(image: &RgbImage, config: &BackboneConfig) -> Array3<f64> {
    let s = config.image_size as u32;
    let resized;
    let img = if image.width() == s && image.height() == s {
        image
    } else {
        resized = image::imageops::resize(image, s, s, image::imageops::FilterType::Triangle);
        &resized
    };
    let n = config.image_size;
    let raw = Array3::from_shape_fn((n, n, 3), |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0);
    if config.per_image_norm {
        let mean = raw.mean().unwrap_or(0.0);
        let std = raw.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0).sqrt();
        // constant images map to zero rather than blowing up
        raw.mapv(|v| (v - mean) / std.max(1e-2))
    } else {
        Array3::from_shape_fn((n, n, 3), |(y, x, c)| (raw[[y, x, c]] - config.pixel_mean[c]) / config.pixel_std[c])
    }
}

/// All frozen parameters of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub conv: ConvExtractor,
    pub patch: PatchEmbed,
    pub transformer: Transformer,
}

impl Backbone {
    /// Deterministic random initialisation from `config.seed`.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut conv_rng = seeded_rng(config.seed, 1);
        let mut patch_rng = seeded_rng(config.seed, 2);
        let mut tf_rng = seeded_rng(config.seed, 3);
        Ok(Self {
            conv: ConvExtractor::new(&mut conv_rng, config.conv_channels, config.feature_channels),
            patch: PatchEmbed::new(
                &mut patch_rng,
                config.token_cell(),
                config.feature_channels,
                config.width,
                config.patch_count(),
            ),
            transformer: Transformer::new(&mut tf_rng, config.width, config.depth, config.heads, config.mlp_hidden),
            config,
        })
    }

    pub fn conv_features(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        let (h, w, c) = image.dim();
        if h != self.config.image_size || w != self.config.image_size || c != 3 {
            return Err(Error::InputShape(format!(
                "expected {s}x{s}x3 image, got {h}x{w}x{c}",
                s = self.config.image_size
            )));
        }
        self.conv.forward(image)
    }

    /// Patch tokens cut from the pooled conv feature map: each token covers
    /// one `patch_size x patch_size` region of the input image. The pooled
    /// map is divided by its RMS so token content has the same scale for
    /// every query style.
    pub fn patch_embed(&self, features: &FeatureMap) -> Result<TokenSequence> {
        let mut pooled = features.avg_pool(self.config.token_pool)?;
        let rms = pooled.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt();
        if rms > 1e-12 {
            pooled /= rms;
        }
        self.patch.forward(&pooled)
    }

    /// SHA-256 over the bincode encoding of every frozen parameter.
    pub fn checksum(&self) -> String {
        let bytes = bincode::serialize(self).expect("backbone serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}
