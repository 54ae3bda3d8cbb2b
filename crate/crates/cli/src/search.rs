//! Query assembly and the response shape shared by `search` and `/search`.

use std::time::Instant;

use freestyle_core::data::StyleTag;
use freestyle_core::retrieval::{search_queries, EmbeddingIndex, QueryInput};
use freestyle_core::RetrievalModel;
use serde::{Deserialize, Serialize};

pub const RESPONSE_FORMAT_VERSION: u32 = 1;
pub const MAX_K: usize = 100;
pub const DEFAULT_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub rank: usize,
    pub gallery_id: String,
    pub score: f64,
    /// Service path of the gallery image.
    pub thumbnail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub search_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub format_version: u32,
    pub query_styles: Vec<StyleTag>,
    pub k: usize,
    pub results: Vec<RankedItem>,
    pub timing: Timing,
    pub fingerprint: String,
}

pub fn check_k(k: usize) -> Result<usize, String> {
    if (1..=MAX_K).contains(&k) {
        Ok(k)
    } else {
        Err(format!("k must be between 1 and {MAX_K}, got {k}"))
    }
}

pub fn run_search(
    model: &RetrievalModel,
    index: &EmbeddingIndex,
    queries: &[QueryInput],
    k: usize,
) -> freestyle_core::Result<SearchResponse> {
    let start = Instant::now();
    let hits = search_queries(model, index, queries, k)?;
    let mut styles: Vec<StyleTag> = queries.iter().map(QueryInput::style).collect();
    styles.sort();
    Ok(SearchResponse {
        format_version: RESPONSE_FORMAT_VERSION,
        query_styles: styles,
        k,
        results: hits
            .into_iter()
            .enumerate()
            .map(|(i, h)| RankedItem {
                rank: i + 1,
                thumbnail: format!("/gallery/{}", h.gallery_id),
                gallery_id: h.gallery_id,
                score: h.score,
            })
            .collect(),
        timing: Timing {
            search_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        fingerprint: index.model_fingerprint.clone(),
    })
}
