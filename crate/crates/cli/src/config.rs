use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use lpa3d::eval::OccupancyConfig;
use lpa3d::nets::{FitConfig, ModelConfig};
use lpa3d::synthroom::ScenePriors;
use lpa3d::trainer::TrainConfig;

/// One TOML file drives every verb; each reads its own table plus the
/// shared `[model]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub world: WorldSection,
    pub segmenter: SegmenterSection,
    pub anchor: AnchorSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub metrics: MetricsSection,
    pub abnormality: AbnormalitySection,
    pub render: RenderSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    pub scenes: usize,
    pub views_per_scene: usize,
    /// Defaults to the model's image size.
    pub resolution: Option<usize>,
    pub priors: ScenePriors,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            scenes: 1000,
            views_per_scene: 1,
            resolution: None,
            priors: ScenePriors::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterSection {
    pub dataset: PathBuf,
    pub fit: FitConfig,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        SegmenterSection {
            dataset: "data/train".into(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorSection {
    pub dataset: PathBuf,
    /// Scored on this dataset if given, else on the records after `labels`.
    pub eval_dataset: Option<PathBuf>,
    /// Number of labeled images used for training; all when absent.
    pub labels: Option<usize>,
    pub fit: FitConfig,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection {
            dataset: "data/train".into(),
            eval_dataset: None,
            labels: None,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub dataset: PathBuf,
    /// File written by `train-segmenter`.
    pub segmenter: PathBuf,
    /// Optional dataset with ground truth for periodic pose-error reports.
    pub eval_dataset: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    #[serde(flatten)]
    pub params: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            dataset: "data/train".into(),
            segmenter: "runs/segmenter/segmenter.bin".into(),
            eval_dataset: None,
            resume: true,
            params: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// A `ckpt_<step>` directory or a run directory (latest checkpoint).
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: "runs/train".into(),
            dataset: "data/eval".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    /// Generated images compared with the dataset.
    pub samples: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { samples: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AbnormalitySection {
    pub scenes: usize,
    pub occupancy: OccupancyConfig,
}

impl Default for AbnormalitySection {
    fn default() -> Self {
        AbnormalitySection {
            scenes: 50,
            occupancy: OccupancyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSection {
    pub scenes: usize,
    pub panorama_height: usize,
    pub resolution: usize,
    pub trajectory_frames: usize,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            scenes: 4,
            panorama_height: 64,
            resolution: 64,
            trajectory_frames: 8,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg: CliConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| lpa3d::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => CliConfig::default(),
        };
        // The training section always uses the shared model.
        cfg.train.params.model = cfg.model.clone();
        Ok(cfg)
    }
}
