//! The complete retrieval model and its checkpoint format.

use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{preprocess, Backbone, Embedding, TextEncoder, TokenSequence};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::linalg::seeded_rng;
use crate::nn::Linear;
use crate::prompt_encoder::{PromptParams, PromptSet, PromptedEncoder};
use crate::style::{gram_matrix, style_feature, GramMatrix, StyleSpace, StyleVector};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FSRCKPT\0";

/// Parameters updated by training. Everything else is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub prompts: PromptParams,
    pub head: Linear,
    pub text: TextEncoder,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            prompts: self.prompts.zeros_like(),
            head: self.head.zeros_like(),
            text: self.text.zeros_like(),
        }
    }

    /// Blocks in a fixed order: prompts, head, text tower.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = self.prompts.blocks();
        out.push(self.head.weight.as_slice().expect("contiguous"));
        out.push(self.head.bias.as_slice().expect("contiguous"));
        out.push(self.text.embeddings.as_slice().expect("contiguous"));
        out.push(self.text.projection.weight.as_slice().expect("contiguous"));
        out.push(self.text.projection.bias.as_slice().expect("contiguous"));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.prompts.blocks_mut();
        out.push(self.head.weight.as_slice_mut().expect("contiguous"));
        out.push(self.head.bias.as_slice_mut().expect("contiguous"));
        out.push(self.text.embeddings.as_slice_mut().expect("contiguous"));
        out.push(self.text.projection.weight.as_slice_mut().expect("contiguous"));
        out.push(self.text.projection.bias.as_slice_mut().expect("contiguous"));
        out
    }

    /// Number of prompt blocks at the front of [`Trainable::blocks`].
    pub fn prompt_block_count(&self) -> usize {
        self.prompts.blocks().len()
    }
}

/// Frozen features of one image: encoder tokens and the Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub tokens: TokenSequence,
    pub gram: GramMatrix,
}

/// [`ImageFeatures`] plus the style vector under the model's style space.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub tokens: TokenSequence,
    pub gram: GramMatrix,
    pub style: StyleVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalModel {
    pub config: ExperimentConfig,
    pub backbone: Backbone,
    pub trainable: Trainable,
    pub style_space: Option<StyleSpace>,
}

impl RetrievalModel {
    /// Fresh model; the text vocabulary is built from `corpus`.
    pub fn new<'a>(
        config: ExperimentConfig,
        corpus: impl IntoIterator<Item = &'a str>,
        source_scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let mut rng = seeded_rng(config.train.seed, 300);
        let c = config.backbone.feature_channels;
        let prompts = PromptParams::new(
            &mut rng,
            config.prompt.clone(),
            config.backbone.depth,
            config.backbone.width,
            c * c,
            source_scale,
        )?;
        let head = Linear::xavier(&mut rng, config.backbone.width, config.backbone.width);
        let text = TextEncoder::new(&mut rng, corpus, config.backbone.width);
        Ok(Self {
            config,
            backbone,
            trainable: Trainable { prompts, head, text },
            style_space: None,
        })
    }

    pub fn encoder(&self) -> PromptedEncoder<'_> {
        PromptedEncoder::new(&self.backbone.transformer, &self.trainable.head)
    }

    pub fn style_space(&self) -> Result<&StyleSpace> {
        self.style_space
            .as_ref()
            .ok_or_else(|| Error::Config("model has no style space; run the first training pass".into()))
    }

    pub fn image_features(&self, image: &RgbImage) -> Result<ImageFeatures> {
        let x = preprocess(image, &self.config.backbone);
        let fmap = self.backbone.conv_features(&x)?;
        Ok(ImageFeatures {
            tokens: self.backbone.patch_embed(&fmap)?,
            gram: gram_matrix(&fmap, self.config.gram_downsample)?,
        })
    }

    pub fn attach_style(&self, features: ImageFeatures) -> Result<PreparedImage> {
        let style = style_feature(&features.gram, self.style_space()?)?;
        Ok(PreparedImage {
            tokens: features.tokens,
            gram: features.gram,
            style,
        })
    }

    pub fn prepare(&self, image: &RgbImage) -> Result<PreparedImage> {
        self.attach_style(self.image_features(image)?)
    }

    pub fn prompts_for(&self, prepared: &PreparedImage) -> Result<PromptSet> {
        self.trainable.prompts.init_prompts(&prepared.gram, &prepared.style)
    }

    pub fn embed_prepared(&self, prepared: &PreparedImage) -> Result<Embedding> {
        let prompts = self.prompts_for(prepared)?;
        Ok(self.encoder().encode_query(&prepared.tokens, &prompts)?.embedding)
    }

    /// Gram, style feature, prompts, encoder: the full image pipeline.
    pub fn embed_image(&self, image: &RgbImage) -> Result<Embedding> {
        self.embed_prepared(&self.prepare(image)?)
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        self.trainable.text.encode_text(text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub model: RetrievalModel,
}

impl Checkpoint {
    pub fn new(model: RetrievalModel, epoch: usize) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            epoch,
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(bincode::serialize(self)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let ckpt: Checkpoint = bincode::deserialize(&bytes[CHECKPOINT_MAGIC.len()..])?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// SHA-256 of the serialised checkpoint, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint_bytes(&self.to_bytes()?))
    }

    /// Writes atomically (temp file, then rename) and returns the fingerprint.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(fingerprint_bytes(&bytes))
    }

    /// Loads a checkpoint and returns it with its fingerprint.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path)?;
        let ckpt = Self::from_bytes(&bytes)?;
        Ok((ckpt, fingerprint_bytes(&bytes)))
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
