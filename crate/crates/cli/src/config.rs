//! The run configuration: one JSON document covering every pipeline stage.
//! Unknown keys are rejected at every level so typos fail loudly instead of
//! silently running with defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use cloak_core::dataset::{SplitMode, SyntheticConfig};
use cloak_core::distill::DistillConfig;
use cloak_core::embedder::{EmbedderSpec, Metric};
use cloak_core::evaluation::BlurParams;
use cloak_core::imaging::SsimParams;
use cloak_core::training::AttackConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub embedder: EmbedderSection,
    pub blackbox: BlackboxSection,
    pub attack: AttackSection,
    pub distill: DistillConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
    /// Master seed; when set (or passed via `--seed`) it reseeds every
    /// stage deterministically.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSection::default(),
            embedder: EmbedderSection::default(),
            blackbox: BlackboxSection::default(),
            attack: AttackSection::default(),
            distill: DistillConfig::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
            seed: None,
        }
    }
}

impl RunConfig {
    /// Reseeds each stage from one master seed with fixed offsets, so a
    /// single `--seed` flag changes the whole run reproducibly.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dataset.synthetic.seed = seed;
        self.dataset.split_seed = seed.wrapping_add(1);
        self.embedder.pair_seed = seed.wrapping_add(2);
        self.attack.config.seed = seed.wrapping_add(3);
        self.distill.seed = seed.wrapping_add(4);
        self.eval.tsne_seed = seed.wrapping_add(5);
    }

    pub fn validate(&self) -> cloak_core::Result<()> {
        self.dataset.synthetic.validate()?;
        self.attack.config.validate()?;
        self.distill.validate()?;
        if let Some(spec) = &self.embedder.spec {
            spec.validate()?;
        }
        if let Some(spec) = &self.blackbox.spec {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub synthetic: SyntheticConfig,
    pub fractions: (f64, f64, f64),
    pub split_mode: SplitMode,
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            synthetic: SyntheticConfig::default(),
            fractions: (0.7, 0.15, 0.15),
            split_mode: SplitMode::ByIdentity,
            split_seed: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    /// Defaults to the white-box architecture sized for the dataset.
    pub spec: Option<EmbedderSpec>,
    pub metric: Metric,
    /// Seed for the impostor-pair sample during EER calibration.
    pub pair_seed: u64,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection { spec: None, metric: Metric::Euclidean, pair_seed: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackboxSection {
    pub enabled: bool,
    pub spec: Option<EmbedderSpec>,
}

impl Default for BlackboxSection {
    fn default() -> Self {
        BlackboxSection { enabled: true, spec: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub config: AttackConfig,
    /// When set, the attack is targeted at this identity's mean embedding
    /// (computed over its training images).
    pub target_identity: Option<u32>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            config: AttackConfig::untargeted_default(0.1, false),
            target_identity: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub blur: BlurParams,
    pub ssim: SsimParams,
    /// Hard projection bound applied at cloak time; defaults to the attack's
    /// perturbation threshold.
    pub cloak_threshold: Option<f64>,
    pub tsne_seed: u64,
    /// Canvas side of the t-SNE scatter PNG.
    pub plot_side: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            blur: BlurParams::default(),
            ssim: SsimParams::default(),
            cloak_threshold: None,
            tsne_seed: 71,
            plot_side: 512,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Run output directory; `--out-dir` overrides, then the
    /// `CLOAK_DATA_ROOT` environment variable, then `./run`.
    pub out_dir: Option<PathBuf>,
    /// Dataset directory; defaults to `<out_dir>/dataset`.
    pub dataset_dir: Option<PathBuf>,
}
