#![allow(dead_code)]

use std::path::Path;

use freestyle_core::backbone::BackboneConfig;
use freestyle_core::data::{generate_synthetic_gallery, DataConfig, Dataset};
use freestyle_core::prompt_encoder::PromptConfig;
use freestyle_core::training::TrainConfig;
use freestyle_core::ExperimentConfig;

/// d = 8, two layers, one prompt token per layer.
pub fn miniature() -> ExperimentConfig {
    ExperimentConfig {
        backbone: BackboneConfig {
            image_size: 16,
            patch_size: 8,
            conv_channels: 4,
            feature_channels: 4,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: 16,
            token_pool: 2,
            ..BackboneConfig::desk()
        },
        gram_downsample: 2,
        prompt: PromptConfig {
            tokens_per_layer: 1,
            ..PromptConfig::default()
        },
        train: TrainConfig {
            batch_size: 8,
            epochs: 1,
            ..TrainConfig::desk()
        },
        data: DataConfig {
            image_size: 16,
            ..DataConfig::default()
        },
    }
}

pub fn synthetic(dir: &Path, count: usize, seed: u64, config: &ExperimentConfig) -> Dataset {
    let manifest = generate_synthetic_gallery(count, seed, dir, &config.data).unwrap();
    Dataset::load(&manifest).unwrap()
}

/// Outcome of comparing analytic and central-difference gradients.
pub struct GradCheck {
    pub checked: usize,
    pub within: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.checked as f64
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks every coordinate of the first `blocks` trainable blocks (all of
/// them when `None`) on one batch of seeded triplets.
pub fn gradient_check(dataset: &Dataset, config: &ExperimentConfig, blocks: Option<usize>, tol: f64) -> GradCheck {
    use freestyle_core::linalg::seeded_rng;
    use freestyle_core::training::{batch_objective, prepare_training, sample_triplet};

    let pass = prepare_training(dataset, config).unwrap();
    let mut model = pass.model;
    let set = pass.set;
    let mut rng = seeded_rng(11, 0);
    let triplets: Vec<_> = (0..set.records.len().min(6))
        .map(|i| sample_triplet(i, &set.records, &mut rng).unwrap())
        .collect();
    let margin = config.train.margin;
    let (_, grad, active) = batch_objective(&model, &set, &triplets, margin).unwrap();
    assert!(active > 0, "no active triplets to differentiate");
    let analytic: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.to_vec()).collect();
    let nblocks = blocks.unwrap_or(analytic.len());
    let h = 1e-5;
    let mut out = GradCheck {
        checked: 0,
        within: 0,
        worst: 0.0,
    };
    for (b, block) in analytic.iter().enumerate().take(nblocks) {
        for (i, a) in block.iter().enumerate() {
            let orig = model.trainable.blocks()[b][i];
            model.trainable.blocks_mut()[b][i] = orig + h;
            let up = batch_objective(&model, &set, &triplets, margin).unwrap().0;
            model.trainable.blocks_mut()[b][i] = orig - h;
            let down = batch_objective(&model, &set, &triplets, margin).unwrap().0;
            model.trainable.blocks_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(*a, numeric);
            out.checked += 1;
            if err <= tol {
                out.within += 1;
            }
            out.worst = out.worst.max(err);
        }
    }
    out
}

/// Backbone checksums seen around a short training run.
pub struct FrozenCheck {
    pub steps: usize,
    pub reference: String,
    /// Checksum after every optimizer step's epoch snapshot and at the end.
    pub observed: Vec<String>,
    pub prompts_changed: bool,
}

/// Trains for exactly `steps` optimizer steps (one epoch, batch size chosen
/// to fit) and records the frozen backbone checksum.
pub fn frozen_check(dataset: &Dataset, config: &ExperimentConfig, steps: usize) -> FrozenCheck {
    use freestyle_core::backbone::Backbone;
    use freestyle_core::data::Split;
    use freestyle_core::training::{prepare_training, train_two_pass, TrainEvent};

    let train_records = dataset.records_in(Split::Train).count();
    let mut config = config.clone();
    config.train.batch_size = train_records.div_ceil(steps);
    config.train.epochs = 1;
    config.train.warmup_epochs = 0;
    assert_eq!(train_records.div_ceil(config.train.batch_size), steps, "cannot split into {steps} batches");

    let before = prepare_training(dataset, &config).unwrap().model;
    let reference = Backbone::new(config.backbone.clone()).unwrap().checksum();
    let mut observed = vec![before.backbone.checksum()];
    let outcome = train_two_pass(dataset, &config, &mut |e| {
        if let TrainEvent::Snapshot { model, .. } = e {
            observed.push(model.backbone.checksum());
        }
    })
    .unwrap();
    observed.push(outcome.model.backbone.checksum());
    FrozenCheck {
        steps: outcome.steps,
        reference,
        observed,
        prompts_changed: outcome.model.trainable.prompts != before.trainable.prompts,
    }
}
