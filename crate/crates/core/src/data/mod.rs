//! Dataset manifests, synthetic gallery generation and the query style
//! transforms (sketch, art, low resolution).

mod manifest;
mod synthetic;
mod transforms;

pub use manifest::{load_manifest, write_manifest, ManifestRecord, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic_gallery, render_scene, Attributes, Scene, Shape, PALETTE, POSES};
pub use transforms::{style_transform, TransformParams};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleTag {
    Text,
    Sketch,
    Art,
    Lowres,
    Image,
}

impl StyleTag {
    pub const ALL: [StyleTag; 5] = [Self::Text, Self::Sketch, Self::Art, Self::Lowres, Self::Image];
    /// Styles the synthetic dataset provides a query for.
    pub const QUERY_STYLES: [StyleTag; 4] = [Self::Text, Self::Sketch, Self::Art, Self::Lowres];
    /// Non-text query styles produced by [`style_transform`].
    pub const VISUAL_QUERY_STYLES: [StyleTag; 3] = [Self::Sketch, Self::Art, Self::Lowres];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Sketch => "sketch",
            Self::Art => "art",
            Self::Lowres => "lowres",
            Self::Image => "image",
        }
    }

    pub fn is_text(self) -> bool {
        self == Self::Text
    }
}

impl fmt::Display for StyleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown style tag `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub image_size: u32,
    pub test_fraction: f64,
    pub transforms: TransformParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 200,
            image_size: 64,
            test_fraction: 0.2,
            transforms: TransformParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GalleryItem {
    pub gallery_id: String,
    pub image: RgbImage,
    pub attributes: Option<Attributes>,
}

/// Validated manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = load_manifest(manifest)?;
        Ok(Self {
            root: manifest_root(manifest),
            records,
        })
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    /// Unique gallery ids in order of first appearance.
    pub fn gallery_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.gallery_id.as_str()))
            .map(|r| r.gallery_id.clone())
            .collect()
    }

    pub fn split_of(&self, gallery_id: &str) -> Option<Split> {
        self.records.iter().find(|r| r.gallery_id == gallery_id).map(|r| r.split)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Gallery image path per id.
    pub fn gallery_paths(&self) -> BTreeMap<String, PathBuf> {
        self.records
            .iter()
            .map(|r| (r.gallery_id.clone(), self.resolve(&r.image_path)))
            .collect()
    }

    /// Decodes every gallery image; failures are collected and reported together.
    pub fn load_gallery(&self) -> Result<Vec<GalleryItem>> {
        let paths = self.gallery_paths();
        let mut items = Vec::new();
        let mut failed = Vec::new();
        for id in self.gallery_ids() {
            match image::open(&paths[&id]) {
                Ok(img) => items.push(GalleryItem {
                    attributes: self
                        .records
                        .iter()
                        .find(|r| r.gallery_id == id)
                        .and_then(|r| r.attributes.clone()),
                    gallery_id: id,
                    image: img.to_rgb8(),
                }),
                Err(_) => failed.push(id),
            }
        }
        if !failed.is_empty() {
            return Err(Error::ItemDecode(failed));
        }
        Ok(items)
    }

    pub fn load_query_image(&self, record: &ManifestRecord) -> Result<RgbImage> {
        let path = record
            .query_path
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{} query of {} has no image", record.style, record.gallery_id)))?;
        Ok(image::open(self.resolve(path))?.to_rgb8())
    }
}

pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}
