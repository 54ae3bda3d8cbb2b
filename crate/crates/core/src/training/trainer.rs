use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;

use super::{hinge, sample_triplet, Adam, LrSchedule, Triplet};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, seeded_rng};
use crate::model::{ImageFeatures, PreparedImage, RetrievalModel, Trainable};
use crate::style::{kmeans_fit, KMeansFit};

/// A query with its frozen features already computed.
#[derive(Clone, Debug)]
pub enum PreparedQuery {
    Image(PreparedImage),
    Text(Vec<usize>),
}

/// Training queries and their gallery images, ready for the trainable part.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub records: Vec<ManifestRecord>,
    pub queries: Vec<PreparedQuery>,
    pub gallery: BTreeMap<String, PreparedImage>,
}

/// Per-step and per-epoch progress reported to the caller.
///
/// `Snapshot` follows every completed epoch; callers that persist it keep
/// the last good model if a later step aborts on a non-finite loss.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent<'a> {
    StyleSpace { k: usize, iterations: usize, inertia: f64 },
    Step { epoch: usize, step: usize, loss: f64, lr: f64 },
    Epoch(EpochLog),
    Snapshot { epoch: usize, model: &'a RetrievalModel },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub last_lr: f64,
}

pub struct TrainOutcome {
    pub model: RetrievalModel,
    pub style_fit: KMeansFit,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

/// Fits the style bases on the Gram matrices of the visual training queries.
pub fn fit_style_space(grams: &[Vec<f64>], config: &ExperimentConfig) -> Result<KMeansFit> {
    let t = &config.train;
    kmeans_fit(grams, t.k, t.seed, t.kmeans_max_iter, t.kmeans_tol)
}

impl PreparedSet {
    /// Computes frozen features for every training query and gallery image,
    /// then attaches style vectors under `model`'s style space.
    fn from_features(
        model: &RetrievalModel,
        records: Vec<ManifestRecord>,
        query_features: Vec<Option<ImageFeatures>>,
        gallery_features: BTreeMap<String, ImageFeatures>,
    ) -> Result<Self> {
        let mut queries = Vec::with_capacity(records.len());
        for (record, features) in records.iter().zip(query_features) {
            queries.push(match features {
                Some(f) => PreparedQuery::Image(model.attach_style(f)?),
                None => {
                    let text = record.text.as_deref().unwrap_or_default();
                    PreparedQuery::Text(model.trainable.text.token_ids(text)?)
                }
            });
        }
        let gallery = gallery_features
            .into_iter()
            .map(|(id, f)| Ok((id, model.attach_style(f)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            queries,
            gallery,
        })
    }

    fn gallery_image(&self, id: &str) -> Result<&PreparedImage> {
        self.gallery
            .get(id)
            .ok_or_else(|| Error::Sampling(format!("gallery id {id} has no prepared image")))
    }
}

/// Feature-level forward pass of one anchor, recording what backward needs.
enum AnchorTrace {
    Image(crate::prompt_encoder::EncoderTrace),
    Text(crate::backbone::TextTrace),
}

fn encode_image(
    model: &RetrievalModel,
    prepared: &PreparedImage,
) -> Result<(Vec<f64>, crate::prompt_encoder::EncoderTrace)> {
    let prompts = model.prompts_for(prepared)?;
    let (out, trace) = model.encoder().encode_traced(&prepared.tokens, &prompts)?;
    Ok((out.embedding.vector, trace))
}

fn backward_image(model: &RetrievalModel, prepared: &PreparedImage, trace: &crate::prompt_encoder::EncoderTrace, d_unit: &[f64], grad: &mut Trainable) {
    let d_prompts = model.encoder().backward(trace, d_unit, Some(&mut grad.head));
    model
        .trainable
        .prompts
        .accumulate_grad(&prepared.gram, &prepared.style, &d_prompts, &mut grad.prompts);
}

/// Mean triplet loss of a batch and its gradient with respect to every
/// trainable block.
pub fn batch_objective(
    model: &RetrievalModel,
    set: &PreparedSet,
    triplets: &[Triplet],
    margin: f64,
) -> Result<(f64, Trainable, usize)> {
    if triplets.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut grad = model.trainable.zeros_like();
    let mut total = 0.0;
    let mut active = 0;
    for t in triplets {
        let query = set
            .queries
            .get(t.anchor)
            .ok_or_else(|| Error::Batch(format!("anchor {} out of range", t.anchor)))?;
        let (f, anchor_trace) = match query {
            PreparedQuery::Image(p) => {
                let (f, tr) = encode_image(model, p)?;
                (f, AnchorTrace::Image(tr))
            }
            PreparedQuery::Text(ids) => {
                let (e, tr) = model.trainable.text.forward_ids(ids)?;
                (e.vector, AnchorTrace::Text(tr))
            }
        };
        let pos_img = set.gallery_image(&t.positive)?;
        let neg_img = set.gallery_image(&t.negative)?;
        let (p, pos_trace) = encode_image(model, pos_img)?;
        let (n, neg_trace) = encode_image(model, neg_img)?;
        // all three are unit vectors, so cosine is a dot product
        let d_pos = 1.0 - dot(&f, &p);
        let d_neg = 1.0 - dot(&f, &n);
        let loss = hinge(d_pos, d_neg, margin);
        total += loss;
        if loss <= 0.0 {
            continue;
        }
        active += 1;
        let df: Vec<f64> = p.iter().zip(&n).map(|(pi, ni)| scale * (ni - pi)).collect();
        let dp: Vec<f64> = f.iter().map(|v| -scale * v).collect();
        let dn: Vec<f64> = f.iter().map(|v| scale * v).collect();
        match (&anchor_trace, query) {
            (AnchorTrace::Image(tr), PreparedQuery::Image(prep)) => backward_image(model, prep, tr, &df, &mut grad),
            (AnchorTrace::Text(tr), _) => model.trainable.text.backward(tr, &df, &mut grad.text),
            _ => unreachable!("trace kind follows query kind"),
        }
        backward_image(model, pos_img, &pos_trace, &dp, &mut grad);
        backward_image(model, neg_img, &neg_trace, &dn, &mut grad);
    }
    Ok((total * scale, grad, active))
}

fn load_features(
    model: &RetrievalModel,
    dataset: &Dataset,
    records: &[ManifestRecord],
) -> Result<(Vec<Option<ImageFeatures>>, BTreeMap<String, ImageFeatures>)> {
    let mut queries = Vec::with_capacity(records.len());
    for r in records {
        queries.push(if r.style.is_text() {
            None
        } else {
            Some(model.image_features(&dataset.load_query_image(r)?)?)
        });
    }
    let mut gallery = BTreeMap::new();
    for r in records {
        if !gallery.contains_key(&r.gallery_id) {
            let image = image::open(dataset.resolve(&r.image_path))
                .map_err(|_| Error::ItemDecode(vec![r.gallery_id.clone()]))?
                .to_rgb8();
            gallery.insert(r.gallery_id.clone(), model.image_features(&image)?);
        }
    }
    Ok((queries, gallery))
}

/// Result of the first pass: a model with its style space fitted and the
/// training set with frozen features computed.
pub struct PassOne {
    pub model: RetrievalModel,
    pub set: PreparedSet,
    pub style_fit: KMeansFit,
}

/// Pass one: builds the model, computes frozen features of the training
/// split, fits the style space on its visual queries and scales the Gram
/// source of the prompt projections by the mean Gram norm.
pub fn prepare_training(dataset: &Dataset, config: &ExperimentConfig) -> Result<PassOne> {
    config.validate()?;
    let records: Vec<ManifestRecord> = dataset.records_in(Split::Train).cloned().collect();
    if records.is_empty() {
        return Err(Error::Validation("manifest has no training records".into()));
    }
    let corpus: Vec<String> = records.iter().filter_map(|r| r.text.clone()).collect();
    let mut model = RetrievalModel::new(config.clone(), corpus.iter().map(String::as_str), 1.0)?;

    info!("computing frozen features for {} training queries", records.len());
    let (query_features, gallery_features) = load_features(&model, dataset, &records)?;
    let grams: Vec<Vec<f64>> = query_features
        .iter()
        .flatten()
        .map(|f| f.gram.flattened().to_vec())
        .collect();
    let style_fit = fit_style_space(&grams, config)?;
    let mean_norm = grams.iter().map(|g| norm(g)).sum::<f64>() / grams.len() as f64;
    if mean_norm > 0.0 {
        model.trainable.prompts.source_scale = 1.0 / mean_norm;
    }
    model.style_space = Some(style_fit.space.clone());
    let set = PreparedSet::from_features(&model, records, query_features, gallery_features)?;
    Ok(PassOne { model, set, style_fit })
}

/// Pass one fits the style space on the training split's visual queries;
/// pass two optimises the prompts with triplet loss. `observer` sees every
/// step and epoch.
pub fn train_two_pass(
    dataset: &Dataset,
    config: &ExperimentConfig,
    observer: &mut dyn FnMut(&TrainEvent<'_>),
) -> Result<TrainOutcome> {
    let PassOne {
        mut model,
        set,
        style_fit,
    } = prepare_training(dataset, config)?;
    observer(&TrainEvent::StyleSpace {
        k: style_fit.space.k,
        iterations: style_fit.space.fit_iterations,
        inertia: style_fit.space.inertia,
    });

    let train = &config.train;
    let batches_per_epoch = set.records.len().div_ceil(train.batch_size);
    let schedule = LrSchedule {
        max_lr: train.learning_rate,
        warmup_steps: train.warmup_epochs * batches_per_epoch,
        total_steps: train.epochs * batches_per_epoch,
    };
    let blocks = model.trainable.blocks().len();
    let prompt_blocks = model.trainable.prompt_block_count();
    // blocks: prompts, head weight, head bias, text tower (3)
    let mask: Vec<bool> = (0..blocks)
        .map(|i| match i {
            i if i < prompt_blocks => true,
            i if i < prompt_blocks + 2 => train.train_head,
            _ => train.train_text,
        })
        .collect();
    let mut adam = Adam::default();
    let mut rng = seeded_rng(train.seed, 400);
    let mut order: Vec<usize> = (0..set.records.len()).collect();
    let mut epochs = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut active_sum, mut seen) = (0.0, 0usize, 0usize);
        let mut last_lr = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let triplets = chunk
                .iter()
                .map(|&i| sample_triplet(i, &set.records, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad, active) = batch_objective(&model, &set, &triplets, train.margin)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let lr = schedule.at(step);
            adam.step(model.trainable.blocks_mut(), grad.blocks(), &mask, lr);
            observer(&TrainEvent::Step { epoch, step, loss, lr });
            debug!("epoch {epoch} step {step} loss {loss:.6} lr {lr:.3e}");
            loss_sum += loss * chunk.len() as f64;
            active_sum += active;
            seen += chunk.len();
            last_lr = lr;
            step += 1;
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / seen as f64,
            active_fraction: active_sum as f64 / seen as f64,
            last_lr,
        };
        info!("epoch {epoch}: mean loss {:.4}, active {:.2}", log.mean_loss, log.active_fraction);
        observer(&TrainEvent::Epoch(log.clone()));
        observer(&TrainEvent::Snapshot { epoch, model: &model });
        epochs.push(log);
    }
    Ok(TrainOutcome {
        model,
        style_fit,
        epochs,
        steps: step,
    })
}
