use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use freestyle_core::data::{generate_synthetic_gallery, Dataset, Split, StyleTag};
use freestyle_core::model::Checkpoint;
use freestyle_core::retrieval::{build_index, evaluate, EmbeddingIndex, QueryInput};
use freestyle_core::training::{prepare_training, train_two_pass, TrainEvent};
use freestyle_core::ExperimentConfig;
use log::info;
use serde_json::json;

use crate::config::load_config;
use crate::search::{check_k, run_search, DEFAULT_K};

#[derive(Debug, Parser)]
#[command(name = "freestyle", version, about = "Style-diversified query-based image retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Seed for data generation and training; overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML experiment config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic gallery with sketch, art, low-res and text queries.
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Fit the style space on the training queries and write it as JSON.
    BuildStyleSpace,
    /// Run both training passes and write the checkpoint after every epoch.
    Train {
        /// Line-oriented metrics log; defaults to `<out>.metrics.log`.
        #[arg(long)]
        metrics_log: Option<PathBuf>,
    },
    /// Embed every gallery image of the manifest.
    BuildIndex,
    /// Recall@1/5 on the test split, per style and fused.
    Eval {
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Rank the gallery for one query or a fused multi-style query.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[arg(long)]
        art: Option<PathBuf>,
        #[arg(long)]
        lowres: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(short, long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Serve /health, /styles, /gallery/{id} and /search.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Write gallery and query embeddings as JSON lines.
    ExportEmbeddings,
}

/// A missing flag; reported like a clap usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn need<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| UsageError(format!("`{command}` requires {flag}")).into())
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut config = load_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        Ok(config)
    }

    fn dataset(&self, command: &str) -> Result<Dataset> {
        let path = need(&self.manifest, "--manifest", command)?;
        Dataset::load(path).with_context(|| format!("loading manifest {}", path.display()))
    }

    fn checkpoint(&self, command: &str) -> Result<(Checkpoint, String)> {
        let path = need(&self.checkpoint, "--checkpoint", command)?;
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_index(path: &Path, fingerprint: &str) -> Result<EmbeddingIndex> {
    let index = EmbeddingIndex::load(path).with_context(|| format!("loading index {}", path.display()))?;
    if index.model_fingerprint != fingerprint {
        return Err(anyhow!(
            "index {} was built from checkpoint {}, not {fingerprint}",
            path.display(),
            index.model_fingerprint
        ));
    }
    Ok(index)
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::GenData { count } => {
            let out = need(&c.out, "--out", "gen-data")?;
            let config = c.experiment()?;
            let manifest = generate_synthetic_gallery(count, c.seed.unwrap_or(0), out, &config.data)?;
            writeln!(stdout, "{}", manifest.display())?;
        }
        Command::BuildStyleSpace => {
            let out = need(&c.out, "--out", "build-style-space")?;
            let pass = prepare_training(&c.dataset("build-style-space")?, &c.experiment()?)?;
            let space = &pass.style_fit.space;
            space.save(out)?;
            writeln!(
                stdout,
                "k={} iterations={} inertia={:.6e} -> {}",
                space.k,
                space.fit_iterations,
                space.inertia,
                out.display()
            )?;
        }
        Command::Train { metrics_log } => {
            let out = need(&c.out, "--out", "train")?.to_path_buf();
            let dataset = c.dataset("train")?;
            let config = c.experiment()?;
            let log_path = metrics_log.unwrap_or_else(|| out.with_extension("metrics.log"));
            train(&dataset, &config, &out, &log_path, stdout)?;
        }
        Command::BuildIndex => {
            let out = need(&c.out, "--out", "build-index")?;
            let (ckpt, fp) = c.checkpoint("build-index")?;
            let gallery = c.dataset("build-index")?.load_gallery()?;
            let index = build_index(&ckpt.model, &gallery, &fp)?;
            index.save(out)?;
            writeln!(stdout, "{} items, dimension {} -> {}", index.len(), index.dim, out.display())?;
        }
        Command::Eval { index } => {
            let (ckpt, fp) = c.checkpoint("eval")?;
            let dataset = c.dataset("eval")?;
            let index = match index {
                Some(p) => load_index(&p, &fp)?,
                None => build_index(&ckpt.model, &dataset.load_gallery()?, &fp)?,
            };
            let json = evaluate(&ckpt.model, &dataset, &index)?.to_json()?;
            if let Some(out) = &c.out {
                write_out(out, json.as_bytes())?;
            }
            stdout.write_all(json.as_bytes())?;
        }
        Command::Search {
            index,
            text,
            sketch,
            art,
            lowres,
            image,
            k,
        } => {
            let k = check_k(k).map_err(UsageError)?;
            let (ckpt, fp) = c.checkpoint("search")?;
            let index = load_index(&index, &fp)?;
            let mut queries = Vec::new();
            if let Some(t) = text {
                queries.push(QueryInput::Text(t));
            }
            for (style, path) in [
                (StyleTag::Sketch, sketch),
                (StyleTag::Art, art),
                (StyleTag::Lowres, lowres),
                (StyleTag::Image, image),
            ] {
                if let Some(p) = path {
                    let img = ::image::open(&p).with_context(|| format!("decoding {}", p.display()))?;
                    queries.push(QueryInput::Image {
                        style,
                        image: img.to_rgb8(),
                    });
                }
            }
            if queries.is_empty() {
                return Err(UsageError("`search` needs at least one of --text, --sketch, --art, --lowres, --image".into()).into());
            }
            let response = run_search(&ckpt.model, &index, &queries, k)?;
            let json = serde_json::to_string_pretty(&response)? + "\n";
            if let Some(out) = &c.out {
                write_out(out, json.as_bytes())?;
            }
            stdout.write_all(json.as_bytes())?;
        }
        Command::Serve { index, addr } => {
            let checkpoint = need(&c.checkpoint, "--checkpoint", "serve")?;
            let manifest = need(&c.manifest, "--manifest", "serve")?;
            let state = crate::service::ServiceState::load(checkpoint, &index, manifest)?;
            tokio::runtime::Runtime::new()?.block_on(crate::service::serve(state, &addr))?;
        }
        Command::ExportEmbeddings => {
            let out = need(&c.out, "--out", "export-embeddings")?;
            let (ckpt, fp) = c.checkpoint("export-embeddings")?;
            let dataset = c.dataset("export-embeddings")?;
            let lines = export_embeddings(&ckpt, &fp, &dataset)?;
            write_out(out, lines.as_bytes())?;
            writeln!(stdout, "{} embeddings -> {}", lines.lines().count(), out.display())?;
        }
    }
    Ok(())
}

fn train(dataset: &Dataset, config: &ExperimentConfig, out: &Path, log_path: &Path, stdout: &mut dyn Write) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut log = fs::File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut failure: Option<anyhow::Error> = None;
    let result = train_two_pass(dataset, config, &mut |event| {
        if failure.is_some() {
            return;
        }
        let written = match event {
            TrainEvent::StyleSpace { k, iterations, inertia } => {
                info!("style space: k={k}, {iterations} iterations, inertia {inertia:.4e}");
                Ok(())
            }
            TrainEvent::Step { epoch, step, loss, lr } => {
                writeln!(log, "epoch={epoch} step={step} loss={loss:.9} lr={lr:.6e}").map_err(anyhow::Error::from)
            }
            TrainEvent::Epoch(e) => {
                info!("epoch {}: mean loss {:.4}, active {:.2}", e.epoch, e.mean_loss, e.active_fraction);
                Ok(())
            }
            TrainEvent::Snapshot { epoch, model } => Checkpoint::new((*model).clone(), epoch + 1)
                .save(out)
                .map(|_| ())
                .map_err(anyhow::Error::from),
        };
        if let Err(e) = written {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = result.with_context(|| {
        if out.exists() {
            format!("training aborted; last good checkpoint kept at {}", out.display())
        } else {
            "training aborted before the first epoch completed".to_string()
        }
    })?;
    let ckpt = Checkpoint::new(outcome.model, outcome.epochs.len());
    let fp = ckpt.save(out)?;
    let last = outcome.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    writeln!(
        stdout,
        "{} epochs, {} steps, final mean loss {last:.6}; checkpoint {} ({fp})",
        outcome.epochs.len(),
        outcome.steps,
        out.display()
    )?;
    Ok(())
}

fn export_embeddings(ckpt: &Checkpoint, fingerprint: &str, dataset: &Dataset) -> Result<String> {
    let model = &ckpt.model;
    let mut out = String::new();
    let mut push = |value: serde_json::Value| {
        out.push_str(&value.to_string());
        out.push('\n');
    };
    for item in dataset.load_gallery()? {
        let e = model.embed_image(&item.image)?;
        push(json!({
            "kind": "gallery",
            "gallery_id": item.gallery_id,
            "split": dataset.split_of(&item.gallery_id).unwrap_or(Split::Train),
            "style": StyleTag::Image,
            "fingerprint": fingerprint,
            "embedding": e.vector,
        }));
    }
    for r in &dataset.records {
        let e = if r.style.is_text() {
            model.embed_text(r.text.as_deref().unwrap_or_default())?
        } else {
            model.embed_image(&dataset.load_query_image(r)?)?
        };
        push(json!({
            "kind": "query",
            "gallery_id": r.gallery_id,
            "split": r.split,
            "style": r.style,
            "fingerprint": fingerprint,
            "embedding": e.vector,
        }));
    }
    Ok(out)
}
