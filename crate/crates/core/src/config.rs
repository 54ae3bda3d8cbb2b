use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::prompt_encoder::PromptConfig;
use crate::training::TrainConfig;

/// Everything that determines a run. Serialised into checkpoints and
/// echoed in evaluation reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    /// Average-pool factor applied to conv features before the Gram product.
    pub gram_downsample: usize,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Defaults sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            gram_downsample: 2,
            prompt: PromptConfig::default(),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompt.validate(self.backbone.depth)?;
        self.train.validate()?;
        let side = self.backbone.image_size / 2;
        if self.gram_downsample == 0 || side % self.gram_downsample != 0 {
            return Err(Error::Config(format!(
                "gram_downsample {} must divide the feature map side {side}",
                self.gram_downsample
            )));
        }
        Ok(())
    }
}
