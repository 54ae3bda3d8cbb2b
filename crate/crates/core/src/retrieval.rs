//! Gallery index, cosine search, query fusion and recall evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::Embedding;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, GalleryItem, Split, StyleTag};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::model::RetrievalModel;

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 8] = b"FSRINDX\0";

/// Unit embeddings of every gallery image, tied to the checkpoint that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub format_version: u32,
    pub count: u64,
    pub dim: u64,
    pub model_fingerprint: String,
    pub ids: Vec<String>,
    /// Row-major `count x dim`.
    pub matrix: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub gallery_id: String,
    pub score: f64,
}

impl EmbeddingIndex {
    pub fn new(model_fingerprint: impl Into<String>, entries: Vec<(String, Embedding)>) -> Result<Self> {
        let dim = entries.first().map(|(_, e)| e.dim()).unwrap_or(0);
        let mut ids = Vec::with_capacity(entries.len());
        let mut matrix = Vec::with_capacity(entries.len() * dim);
        for (id, e) in entries {
            if e.dim() != dim {
                return Err(Error::Shape(format!("embedding of {id} has dimension {}, expected {dim}", e.dim())));
            }
            ids.push(id);
            matrix.extend(e.vector);
        }
        Ok(Self {
            format_version: INDEX_FORMAT_VERSION,
            count: ids.len() as u64,
            dim: dim as u64,
            model_fingerprint: model_fingerprint.into(),
            ids,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim as usize;
        &self.matrix[i * d..(i + 1) * d]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = INDEX_MAGIC.to_vec();
        out.extend(bincode::serialize(self)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < INDEX_MAGIC.len() || &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
            return Err(Error::Format("not an embedding index file".into()));
        }
        let index: EmbeddingIndex = bincode::deserialize(&bytes[INDEX_MAGIC.len()..])?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "index format version {} (expected {INDEX_FORMAT_VERSION})",
                index.format_version
            )));
        }
        if index.count as usize != index.ids.len() || index.matrix.len() != index.ids.len() * index.dim as usize {
            return Err(Error::Format("index header does not match its contents".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Top-`k` gallery items by cosine similarity; equal scores are ordered
    /// by ascending gallery id.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if query.dim() != self.dim as usize {
            return Err(Error::Shape(format!(
                "query has dimension {}, index has {}",
                query.dim(),
                self.dim
            )));
        }
        let qn = norm(&query.vector);
        if qn == 0.0 {
            return Err(Error::DegenerateInput("zero query embedding".into()));
        }
        let mut scored: Vec<(f64, &str)> = (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let rn = norm(row);
                let s = if rn == 0.0 { 0.0 } else { dot(row, &query.vector) / (rn * qn) };
                (s, self.ids[i].as_str())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, id)| SearchHit {
                gallery_id: id.to_string(),
                score,
            })
            .collect())
    }
}

/// Embeds every gallery image with the full prompted pipeline.
pub fn build_index(model: &RetrievalModel, gallery: &[GalleryItem], model_fingerprint: &str) -> Result<EmbeddingIndex> {
    let entries = gallery
        .iter()
        .map(|item| Ok((item.gallery_id.clone(), model.embed_image(&item.image)?)))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::new(model_fingerprint, entries)
}

/// Mean of the query embeddings, renormalised.
pub fn fuse_queries(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or(Error::EmptyQuery)?;
    let mut sum = vec![0.0; first.dim()];
    for e in embeddings {
        if e.dim() != sum.len() {
            return Err(Error::Shape("fused embeddings differ in dimension".into()));
        }
        for (s, v) in sum.iter_mut().zip(&e.vector) {
            *s += v;
        }
    }
    let n = embeddings.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    if norm(&sum) < 1e-12 {
        return Err(Error::DegenerateFusion);
    }
    Embedding::unit(sum)
}

/// One query in any style.
#[derive(Clone, Debug)]
pub enum QueryInput {
    Text(String),
    Image { style: StyleTag, image: RgbImage },
}

impl QueryInput {
    pub fn style(&self) -> StyleTag {
        match self {
            Self::Text(_) => StyleTag::Text,
            Self::Image { style, .. } => *style,
        }
    }
}

pub fn embed_query(model: &RetrievalModel, query: &QueryInput) -> Result<Embedding> {
    match query {
        QueryInput::Text(text) => model.embed_text(text),
        QueryInput::Image { image, .. } => model.embed_image(image),
    }
}

/// Embeds each query, fuses them when there are several, and searches.
/// Queries are fused in style order so the result does not depend on the
/// order they were supplied in, down to the last bit.
pub fn search_queries(model: &RetrievalModel, index: &EmbeddingIndex, queries: &[QueryInput], k: usize) -> Result<Vec<SearchHit>> {
    if queries.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let mut ordered: Vec<&QueryInput> = queries.iter().collect();
    ordered.sort_by_key(|q| q.style());
    let embeddings = ordered.into_iter().map(|q| embed_query(model, q)).collect::<Result<Vec<_>>>()?;
    let fused = if embeddings.len() == 1 {
        embeddings.into_iter().next().expect("one embedding")
    } else {
        fuse_queries(&embeddings)?
    };
    index.search(&fused, k)
}

/// Percentage of queries whose target is among the first `k` results.
pub fn recall_at_k(rankings: &[Vec<String>], targets: &[String], k: usize) -> Result<f64> {
    if rankings.len() != targets.len() {
        return Err(Error::Evaluation(format!(
            "{} rankings for {} targets",
            rankings.len(),
            targets.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Evaluation("no queries to evaluate".into()));
    }
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| r.iter().take(k).any(|id| id == *t))
        .count();
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Recall percentages for one query style or fused combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub model_fingerprint: String,
    pub gallery_size: usize,
    /// Keyed by query style.
    pub per_style: BTreeMap<String, RecallEntry>,
    /// Keyed by `+`-joined style combinations, e.g. `text+sketch`.
    pub fused: BTreeMap<String, RecallEntry>,
    pub config: ExperimentConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn r1(&self, key: &str) -> Option<f64> {
        self.per_style.get(key).or_else(|| self.fused.get(key)).map(|e| e.recall_at_1)
    }
}

fn entry(rankings: &[Vec<String>], targets: &[String]) -> Result<RecallEntry> {
    Ok(RecallEntry {
        queries: rankings.len(),
        recall_at_1: recall_at_k(rankings, targets, 1)?,
        recall_at_5: recall_at_k(rankings, targets, 5)?,
    })
}

/// Every combination of two or more styles, in canonical order.
pub fn style_combinations(styles: &[StyleTag]) -> Vec<Vec<StyleTag>> {
    let mut sorted = styles.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let mut out: Vec<Vec<StyleTag>> = (1u32..(1 << n))
        .filter(|mask| mask.count_ones() >= 2)
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| sorted[i]).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

pub fn combination_key(styles: &[StyleTag]) -> String {
    styles.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+")
}

/// Recall over the test split: each style on its own, then every fused
/// combination of the styles available for an item.
pub fn evaluate(model: &RetrievalModel, dataset: &Dataset, index: &EmbeddingIndex) -> Result<EvalReport> {
    if index.dim as usize != model.config.backbone.width {
        return Err(Error::Evaluation(format!(
            "index dimension {} does not match model width {}",
            index.dim, model.config.backbone.width
        )));
    }
    let ids: Vec<String> = index.ids.clone();
    let mut embedded: BTreeMap<String, BTreeMap<StyleTag, Embedding>> = BTreeMap::new();
    for r in dataset.records_in(Split::Test) {
        if index.position(&r.gallery_id).is_none() {
            return Err(Error::Evaluation(format!("test item {} is not in the index", r.gallery_id)));
        }
        let e = if r.style.is_text() {
            model.embed_text(r.text.as_deref().unwrap_or_default())?
        } else {
            model.embed_image(&dataset.load_query_image(r)?)?
        };
        embedded.entry(r.gallery_id.clone()).or_default().insert(r.style, e);
    }
    if embedded.is_empty() {
        return Err(Error::Evaluation("manifest has no test queries".into()));
    }
    let rank = |e: &Embedding| -> Result<Vec<String>> {
        Ok(index.search(e, 5.min(ids.len()))?.into_iter().map(|h| h.gallery_id).collect())
    };

    let mut styles: Vec<StyleTag> = embedded.values().flat_map(|m| m.keys().copied()).collect();
    styles.sort();
    styles.dedup();
    let mut per_style = BTreeMap::new();
    for &style in &styles {
        let (mut rankings, mut targets) = (Vec::new(), Vec::new());
        for (id, by_style) in &embedded {
            if let Some(e) = by_style.get(&style) {
                rankings.push(rank(e)?);
                targets.push(id.clone());
            }
        }
        per_style.insert(style.as_str().to_string(), entry(&rankings, &targets)?);
    }
    let mut fused = BTreeMap::new();
    for combo in style_combinations(&styles) {
        let (mut rankings, mut targets) = (Vec::new(), Vec::new());
        for (id, by_style) in &embedded {
            let parts: Option<Vec<Embedding>> = combo.iter().map(|s| by_style.get(s).cloned()).collect();
            if let Some(parts) = parts {
                rankings.push(rank(&fuse_queries(&parts)?)?);
                targets.push(id.clone());
            }
        }
        if !rankings.is_empty() {
            fused.insert(combination_key(&combo), entry(&rankings, &targets)?);
        }
    }
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        model_fingerprint: index.model_fingerprint.clone(),
        gallery_size: index.len(),
        per_style,
        fused,
        config: model.config.clone(),
    })
}
