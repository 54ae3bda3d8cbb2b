//! HTTP retrieval service over an immutable model and index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use freestyle_core::data::{Dataset, StyleTag};
use freestyle_core::model::Checkpoint;
use freestyle_core::retrieval::{EmbeddingIndex, QueryInput};
use freestyle_core::{Error as CoreError, RetrievalModel};
use serde::Serialize;
use serde_json::json;

use crate::search::{check_k, run_search, DEFAULT_K};

pub const MAX_PART_BYTES: usize = 5 * 1024 * 1024;
const IMAGE_FIELDS: [StyleTag; 4] = [StyleTag::Sketch, StyleTag::Art, StyleTag::Lowres, StyleTag::Image];

pub struct ServiceState {
    pub model: RetrievalModel,
    pub index: EmbeddingIndex,
    pub fingerprint: String,
    pub gallery: BTreeMap<String, PathBuf>,
}

impl ServiceState {
    /// Loads the checkpoint and index and refuses an index built from a
    /// different checkpoint.
    pub fn load(checkpoint: &Path, index: &Path, manifest: &Path) -> anyhow::Result<Self> {
        let (ckpt, fingerprint) =
            Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
        let index = EmbeddingIndex::load(index).with_context(|| format!("loading index {}", index.display()))?;
        if index.model_fingerprint != fingerprint {
            bail!(
                "index was built from checkpoint {} but {} has fingerprint {fingerprint}",
                index.model_fingerprint,
                checkpoint.display()
            );
        }
        let dataset = Dataset::load(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
        Ok(Self {
            model: ckpt.model,
            index,
            fingerprint,
            gallery: dataset.gallery_paths(),
        })
    }
}

#[derive(Debug, Serialize)]
struct FieldError {
    field: String,
    message: String,
}

#[derive(Debug)]
enum ApiError {
    BadRequest(Vec<FieldError>),
    NotFound(String),
    Internal(String),
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        Self::BadRequest(vec![FieldError {
            field: field.to_string(),
            message: message.into(),
        }])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            Self::BadRequest(fields) => {
                (StatusCode::BAD_REQUEST, Json(json!({ "error": "invalid search request", "fields": fields }))).into_response()
            }
            Self::NotFound(message) => (StatusCode::NOT_FOUND, Json(json!({ "error": message }))).into_response(),
            Self::Internal(message) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": message }))).into_response(),
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/styles", get(styles))
        .route("/gallery/{id}", get(gallery))
        .route("/search", post(search))
        // every part is checked against MAX_PART_BYTES; this only bounds the whole body
        .layer(DefaultBodyLimit::max(8 * MAX_PART_BYTES))
        .with_state(state)
}

async fn health(State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    Json(json!({
        "status": "ok",
        "fingerprint": state.fingerprint,
        "gallery_size": state.index.len(),
    }))
}

async fn styles() -> impl IntoResponse {
    let all: Vec<&str> = StyleTag::ALL.iter().map(|s| s.as_str()).collect();
    Json(json!({ "styles": all }))
}

async fn gallery(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = state
        .gallery
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown gallery id `{id}`")))?;
    let bytes = tokio::fs::read(path)
        .await
        .map_err(|e| ApiError::Internal(format!("reading {}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Parses the multipart body into queries and `k`, collecting every problem.
async fn parse_search(mut multipart: Multipart) -> Result<(Vec<QueryInput>, usize), ApiError> {
    let mut queries = Vec::new();
    let mut k = DEFAULT_K;
    let mut problems = Vec::new();
    let mut seen = Vec::new();
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(ApiError::field("body", format!("malformed multipart body: {e}"))),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => {
                problems.push(FieldError {
                    field: name,
                    message: format!("could not read part: {e}"),
                });
                continue;
            }
        };
        let mut fail = |message: String| {
            problems.push(FieldError {
                field: name.clone(),
                message,
            })
        };
        if bytes.len() > MAX_PART_BYTES {
            fail(format!("part is {} bytes, limit is {MAX_PART_BYTES}", bytes.len()));
            continue;
        }
        if seen.contains(&name) {
            fail("field given more than once".into());
            continue;
        }
        seen.push(name.clone());
        match name.as_str() {
            "k" => match std::str::from_utf8(&bytes).ok().and_then(|s| s.trim().parse::<usize>().ok()) {
                Some(v) => match check_k(v) {
                    Ok(v) => k = v,
                    Err(m) => fail(m),
                },
                None => fail("k must be an integer".into()),
            },
            "text" => match std::str::from_utf8(&bytes) {
                Ok(t) if !t.trim().is_empty() => queries.push(QueryInput::Text(t.to_string())),
                Ok(_) => fail("text is empty".into()),
                Err(_) => fail("text is not valid UTF-8".into()),
            },
            other => match IMAGE_FIELDS.iter().find(|s| s.as_str() == other) {
                Some(&style) => match image::load_from_memory(&bytes) {
                    Ok(img) => queries.push(QueryInput::Image {
                        style,
                        image: img.to_rgb8(),
                    }),
                    Err(e) => fail(format!("not a decodable image: {e}")),
                },
                None => fail("unknown field; expected text, sketch, art, lowres, image or k".into()),
            },
        }
    }
    if queries.is_empty() && problems.is_empty() {
        problems.push(FieldError {
            field: "query".into(),
            message: "at least one of text, sketch, art, lowres or image is required".into(),
        });
    }
    if !problems.is_empty() {
        return Err(ApiError::BadRequest(problems));
    }
    Ok((queries, k))
}

async fn search(State(state): State<Arc<ServiceState>>, multipart: Multipart) -> Result<Response, ApiError> {
    let (queries, k) = parse_search(multipart).await?;
    let response = tokio::task::spawn_blocking(move || run_search(&state.model, &state.index, &queries, k))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    match response {
        Ok(r) => Ok(Json(r).into_response()),
        Err(e @ (CoreError::EmptyQuery | CoreError::DegenerateFusion | CoreError::DegenerateInput(_))) => {
            Err(ApiError::field("query", e.to_string()))
        }
        Err(e) => Err(ApiError::Internal(e.to_string())),
    }
}

pub async fn serve(state: ServiceState, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("serving {} gallery items on http://{}", state.index.len(), listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
