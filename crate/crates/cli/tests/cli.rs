use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use freestyle_cli::search::SearchResponse;
use freestyle_cli::service::{router, ServiceState};
use freestyle_core::data::{load_manifest, write_manifest, StyleTag};
use freestyle_core::model::Checkpoint;
use freestyle_core::retrieval::{embed_query, fuse_queries, EmbeddingIndex, QueryInput};
use http_body_util::BodyExt;
use tower::ServiceExt;

const MINIATURE: &str = r#"
gram_downsample = 2

[backbone]
image_size = 16
patch_size = 8
conv_channels = 4
feature_channels = 4
width = 8
depth = 2
heads = 2
mlp_hidden = 16

[prompt]
tokens_per_layer = 1

[train]
batch_size = 8
epochs = 2

[data]
image_size = 16
"#;

fn freestyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freestyle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = freestyle(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One trained miniature model shared by the tests in this file.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
    index: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("mini.toml");
        std::fs::write(&config, MINIATURE).unwrap();
        let data = root.join("data");
        let manifest = PathBuf::from(ok(&["gen-data", "--count", "12", "--seed", "3", "--config", s(&config), "--out", s(&data)]).trim());
        let checkpoint = root.join("model.ckpt");
        ok(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out", s(&checkpoint)]);
        let index = root.join("gallery.idx");
        ok(&["build-index", "--checkpoint", s(&checkpoint), "--manifest", s(&manifest), "--out", s(&index)]);
        Fixture {
            _dir: dir,
            root,
            manifest,
            config,
            checkpoint,
            index,
        }
    })
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ma = ok(&["gen-data", "--count", "20", "--seed", "7", "--out", s(&a)]);
    let mb = ok(&["gen-data", "--count", "20", "--seed", "7", "--out", s(&b)]);
    assert_eq!(
        std::fs::read(ma.trim()).unwrap(),
        std::fs::read(mb.trim()).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(freestyle(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(freestyle(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(freestyle(&["gen-data"]).status.code(), Some(2));
    assert_eq!(freestyle(&["train", "--out", "x.ckpt"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let out = freestyle(&["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn training_writes_a_metrics_log_and_checkpoint() {
    let f = fixture();
    let log = std::fs::read_to_string(f.checkpoint.with_extension("metrics.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(!lines.is_empty());
    for line in &lines {
        let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["epoch", "step", "loss", "lr"]);
    }
    assert!(lines.last().unwrap().starts_with("epoch=1 "));
    let (ckpt, _) = Checkpoint::load(&f.checkpoint).unwrap();
    assert_eq!(ckpt.epoch, 2);
    assert_eq!(ckpt.model.style_space.as_ref().unwrap().k, 4);
}

#[test]
fn build_style_space_writes_four_bases() {
    let f = fixture();
    let out = f.root.join("style.json");
    ok(&["build-style-space", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&out)]);
    let space = freestyle_core::style::StyleSpace::load(&out).unwrap();
    assert_eq!(space.k, 4);
    let (ckpt, _) = Checkpoint::load(&f.checkpoint).unwrap();
    assert_eq!(Some(&space), ckpt.model.style_space.as_ref());
}

#[test]
fn eval_prints_and_writes_the_same_report() {
    let f = fixture();
    let out = f.root.join("report.json");
    let printed = ok(&[
        "eval", "--checkpoint", s(&f.checkpoint), "--manifest", s(&f.manifest), "--index", s(&f.index), "--out", s(&out),
    ]);
    assert_eq!(printed, std::fs::read_to_string(&out).unwrap());
    let report: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert!(report["per_style"]["sketch"]["recall_at_1"].is_number());
    assert!(report["fused"]["text+sketch"]["recall_at_5"].is_number());
}

#[test]
fn eval_on_a_perfect_index_reports_full_recall() {
    let f = fixture();
    // every test query is its own gallery image, so each ranks first
    let records: Vec<_> = load_manifest(&f.manifest)
        .unwrap()
        .into_iter()
        .filter(|r| r.style == StyleTag::Sketch)
        .map(|mut r| {
            r.style = StyleTag::Image;
            r.query_path = Some(r.image_path.clone());
            r.split = freestyle_core::data::Split::Test;
            r
        })
        .collect();
    let perfect = f.manifest.with_file_name("perfect.jsonl");
    write_manifest(&perfect, &records).unwrap();
    let printed = ok(&["eval", "--checkpoint", s(&f.checkpoint), "--manifest", s(&perfect)]);
    let report: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(report["per_style"]["image"]["recall_at_1"].as_f64(), Some(100.0));
    assert_eq!(report["per_style"]["image"]["recall_at_5"].as_f64(), Some(100.0));
}

#[test]
fn export_writes_one_line_per_embedding() {
    let f = fixture();
    let out = f.root.join("embeddings.jsonl");
    ok(&["export-embeddings", "--checkpoint", s(&f.checkpoint), "--manifest", s(&f.manifest), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    // 12 gallery images plus 4 queries each
    assert_eq!(text.lines().count(), 12 * 5);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["embedding"].as_array().unwrap().len(), 8);
}

#[test]
fn search_rejects_out_of_range_k() {
    let f = fixture();
    let out = freestyle(&["search", "--checkpoint", s(&f.checkpoint), "--index", s(&f.index), "--text", "a red star", "-k", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

const BOUNDARY: &str = "freestyle-test-boundary";

enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, Vec<u8>),
}

fn multipart(parts: &[Part]) -> Request<Body> {
    let mut body = Vec::new();
    for part in parts {
        body.extend(format!("--{BOUNDARY}\r\n").as_bytes());
        match part {
            Part::Text(name, value) => {
                body.extend(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes());
            }
            Part::File(name, bytes) => {
                body.extend(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\nContent-Type: image/png\r\n\r\n")
                        .as_bytes(),
                );
                body.extend(bytes);
                body.extend(b"\r\n");
            }
        }
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::builder()
        .method("POST")
        .uri("/search")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::builder().uri(uri).body(Body::empty()).unwrap()
}

fn ids(response: &SearchResponse) -> Vec<String> {
    response.results.iter().map(|r| r.gallery_id.clone()).collect()
}

fn first_sketch(f: &Fixture) -> (String, PathBuf) {
    let r = load_manifest(&f.manifest)
        .unwrap()
        .into_iter()
        .find(|r| r.style == StyleTag::Sketch)
        .unwrap();
    (r.gallery_id, f.manifest.parent().unwrap().join(r.query_path.unwrap()))
}

#[tokio::test]
async fn service_matches_cli_and_offline_pipeline() {
    let f = fixture();
    let state = Arc::new(ServiceState::load(&f.checkpoint, &f.index, &f.manifest).unwrap());
    let app = router(state.clone());
    let (_, fingerprint) = Checkpoint::load(&f.checkpoint).unwrap();

    let (status, body) = call(app.clone(), get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let health: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["fingerprint"].as_str(), Some(fingerprint.as_str()));

    let (status, body) = call(app.clone(), get("/styles")).await;
    assert_eq!(status, StatusCode::OK);
    let styles: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(styles["styles"].as_array().unwrap().len(), 5);

    // text only: CLI and service agree
    let text = "a red circle rotated 0 degrees";
    let cli: SearchResponse = serde_json::from_str(&ok(&[
        "search", "--checkpoint", s(&f.checkpoint), "--index", s(&f.index), "--text", text, "-k", "10",
    ]))
    .unwrap();
    let (status, body) = call(app.clone(), multipart(&[Part::Text("text", text), Part::Text("k", "10")])).await;
    assert_eq!(status, StatusCode::OK);
    let served: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(ids(&served), ids(&cli));
    assert_eq!(served.results.len(), 10);
    assert_eq!(served.fingerprint, fingerprint);
    assert!(served.results.windows(2).all(|w| w[0].score >= w[1].score));

    // sketch + text: service equals fuse-then-search run offline, and the CLI
    let (_, sketch_path) = first_sketch(f);
    let sketch_bytes = std::fs::read(&sketch_path).unwrap();
    let (status, body) = call(
        app.clone(),
        multipart(&[Part::File("sketch", sketch_bytes.clone()), Part::Text("text", text), Part::Text("k", "5")]),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let served: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(served.query_styles, [StyleTag::Text, StyleTag::Sketch]);
    let model = &state.model;
    let index = EmbeddingIndex::load(&f.index).unwrap();
    let sketch = QueryInput::Image {
        style: StyleTag::Sketch,
        image: image::open(&sketch_path).unwrap().to_rgb8(),
    };
    let fused = fuse_queries(&[
        embed_query(model, &QueryInput::Text(text.into())).unwrap(),
        embed_query(model, &sketch).unwrap(),
    ])
    .unwrap();
    let offline: Vec<String> = index.search(&fused, 5).unwrap().into_iter().map(|h| h.gallery_id).collect();
    assert_eq!(ids(&served), offline);
    let cli: SearchResponse = serde_json::from_str(&ok(&[
        "search", "--checkpoint", s(&f.checkpoint), "--index", s(&f.index), "--text", text, "--sketch", s(&sketch_path), "-k", "5",
    ]))
    .unwrap();
    assert_eq!(ids(&cli), offline);

    // the same request twice gives the same ranking
    let (_, again) = call(
        app.clone(),
        multipart(&[Part::Text("text", text), Part::File("sketch", sketch_bytes), Part::Text("k", "5")]),
    )
    .await;
    let again: SearchResponse = serde_json::from_slice(&again).unwrap();
    assert_eq!(ids(&again), offline);
}

#[tokio::test]
async fn service_rejects_bad_requests_with_diagnostics() {
    let f = fixture();
    let app = router(Arc::new(ServiceState::load(&f.checkpoint, &f.index, &f.manifest).unwrap()));

    let (status, body) = call(app.clone(), multipart(&[])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["fields"][0]["field"], "query");

    let (status, body) = call(
        app.clone(),
        multipart(&[Part::Text("text", "a blue star"), Part::Text("k", "0"), Part::File("art", b"not a png".to_vec())]),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let fields: Vec<&str> = err["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["k", "art"]);

    let (status, _) = call(app.clone(), multipart(&[Part::Text("colour", "red")])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let big = vec![0u8; freestyle_cli::service::MAX_PART_BYTES + 1];
    let (status, body) = call(app.clone(), multipart(&[Part::File("sketch", big)])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("limit"));

    let garbled = Request::builder()
        .method("POST")
        .uri("/search")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from("garbage"))
        .unwrap();
    let (status, _) = call(app.clone(), garbled).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn gallery_serves_images_and_404s_unknown_ids() {
    let f = fixture();
    let app = router(Arc::new(ServiceState::load(&f.checkpoint, &f.index, &f.manifest).unwrap()));
    let (id, _) = first_sketch(f);
    let (status, body) = call(app.clone(), get(&format!("/gallery/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(image::load_from_memory(&body).unwrap().width(), 16);
    let (status, _) = call(app, get("/gallery/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn service_refuses_an_index_from_another_checkpoint() {
    let f = fixture();
    let other = f.root.join("other.ckpt");
    ok(&["train", "--manifest", s(&f.manifest), "--config", s(&f.config), "--seed", "42", "--out", s(&other)]);
    assert!(ServiceState::load(&other, &f.index, &f.manifest).is_err());
    let out = freestyle(&["search", "--checkpoint", s(&other), "--index", s(&f.index), "--text", "a red star"]);
    assert_eq!(out.status.code(), Some(1));
}
