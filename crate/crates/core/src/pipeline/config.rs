use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::align::{DpoConfig, SingleViewConfig};
use crate::cad::GeneratorConfig;
use crate::diffusion::{DiffusionTrainConfig, ScheduleConfig};
use crate::metrics::EvalConfig;
use crate::models::{AeTrainConfig, ModelConfig};
use crate::render::DEFAULT_RES;

pub const SEED_ENV: &str = "CADCRAFTER_SEED";

/// Largest master seed. Config files store integers as signed 64-bit, and
/// stage seeds are small offsets from the master seed.
pub const MAX_SEED: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub size: usize,
    /// Camera rigs rendered per item; each rig is one 8-token condition.
    pub rigs_per_item: usize,
    /// Write depth/normal images for the first rig of every item.
    pub write_maps: bool,
    pub generator: GeneratorConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { size: 512, rigs_per_item: 2, write_maps: true, generator: GeneratorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub res: usize,
    pub projector_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { res: DEFAULT_RES, projector_seed: 0 }
    }
}

/// Preference mining before the DPO fine-tune.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub items: usize,
    pub samples_per_item: usize,
    pub max_pairs: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { items: 128, samples_per_item: 4, max_pairs: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub items: usize,
    pub per_item: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { items: 32, per_item: 1 }
    }
}

/// Everything a run needs. Per-stage `seed` fields are derived from the
/// master `seed` by [`PipelineConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub ae: AeTrainConfig,
    pub diffusion: DiffusionTrainConfig,
    pub single_view: SingleViewConfig,
    pub mining: MiningConfig,
    pub dpo: DpoConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            render: RenderConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::desk(),
            ae: AeTrainConfig::default(),
            diffusion: DiffusionTrainConfig::default(),
            single_view: SingleViewConfig::default(),
            mining: MiningConfig::default(),
            dpo: DpoConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small dimensions and short stages for smoke runs.
    pub fn toy() -> Self {
        let mut c = PipelineConfig::default();
        c.corpus.size = 64;
        c.corpus.rigs_per_item = 1;
        c.corpus.write_maps = false;
        c.corpus.generator.sketch_groups = (1, 1);
        c.corpus.generator.loops_per_sketch = (1, 1);
        c.corpus.generator.curves_per_loop = (1, 4);
        c.render.res = 32;
        c.model = ModelConfig { d_e: 16, d_model: 32, heads: 4, ae_blocks: 1, geo_blocks: 1, den_blocks: 2, d_feat: 32, ..ModelConfig::default() };
        c.ae = AeTrainConfig { max_epochs: 150, batch_size: 16, eval_every: 10, max_seconds: 300.0, ..AeTrainConfig::default() };
        c.diffusion = DiffusionTrainConfig { steps: 600, batch_size: 16, lr: 2e-3, ..DiffusionTrainConfig::default() };
        c.single_view = SingleViewConfig { steps: 300, batch_size: 16, lr: 1e-3, ..SingleViewConfig::default() };
        c.mining = MiningConfig { items: 64, samples_per_item: 4, max_pairs: 128 };
        c.dpo = DpoConfig { steps: 100, batch_size: 16, lr: 1e-4, ..DpoConfig::default() };
        c.eval.cd_points = 512;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Reads `path` (defaults when absent), then applies the environment
    /// seed override.
    pub fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
                Self::from_toml(&text)?
            }
            None => PipelineConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| PipelineError::Config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seed > MAX_SEED {
            return Err(PipelineError::Config(format!("seed {} exceeds {MAX_SEED}", self.seed)));
        }
        self.model.validate().map_err(PipelineError::Config)?;
        if self.corpus.size == 0 || self.corpus.rigs_per_item == 0 {
            return Err(PipelineError::Config("corpus size and rigs_per_item must be positive".into()));
        }
        if self.render.res < 8 {
            return Err(PipelineError::Config(format!("render res {} is below 8", self.render.res)));
        }
        if self.sample.per_item == 0 {
            return Err(PipelineError::Config("sample.per_item must be positive".into()));
        }
        self.schedule.build().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.ae.seed = s.wrapping_add(2);
        c.diffusion.seed = s.wrapping_add(3);
        c.single_view.seed = s.wrapping_add(4);
        c.dpo.seed = s.wrapping_add(5);
        c
    }

    pub fn corpus_seed(&self) -> u64 {
        self.seed
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn mining_seed(&self) -> u64 {
        self.seed.wrapping_add(6)
    }

    pub fn sample_seed(&self) -> u64 {
        self.seed.wrapping_add(7)
    }
}
