//! Run configuration: a TOML file whose every key has a built-in default.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sdft_core::baselines::Method;
use sdft_core::fixture;
use sdft_core::metrics::KlMode;
use sdft_core::tasks::{MetaCorpusConfig, PretrainConfig};
use sdft_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub vocab_size: usize,
    /// base model; required by train, eval and sequential
    pub base: Option<PathBuf>,
    /// model to evaluate; defaults to `base`
    pub checkpoint: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub meta: MetaCorpusConfig,
    pub gate: GateSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub task: TaskSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub sequential: SequentialSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub tasks: usize,
    pub per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub seed: u64,
    pub tasks: usize,
    pub per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub train_size: usize,
    pub test_size: usize,
    /// JSONL datasets; when unset the task is generated from the seed
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// bare and demonstration-conditioned probes, this many of each
    pub probes_per_kind: usize,
    pub probe_len: usize,
    pub kl_mode: KlMode,
    pub pass_samples: usize,
    pub pass_k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub fixture_seed: u64,
    pub vocab_size: usize,
    pub window: usize,
    pub max_len: usize,
    pub spread: f64,
    pub samples: usize,
    pub enumeration_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequentialSection {
    pub tasks: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: Method::Sdft.as_str().into(),
            vocab_size: fixture::VOCAB_SIZE,
            base: None,
            checkpoint: None,
            corpus: CorpusSection::default(),
            meta: fixture::meta_config(),
            gate: GateSection::default(),
            pretrain: fixture::pretrain_config(),
            train: fixture::train_config(0),
            task: TaskSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            sequential: SequentialSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { tasks: fixture::META_TASKS, per_task: fixture::META_PER_TASK }
    }
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection { seed: fixture::GATE_SEED, tasks: fixture::GATE_TASKS, per_task: fixture::GATE_PER_TASK }
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            train_size: fixture::TRAIN_SIZE,
            test_size: fixture::TASK_SIZE - fixture::TRAIN_SIZE,
            train_data: None,
            test_data: None,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { probes_per_kind: 8, probe_len: fixture::PROBE_LEN, kl_mode: fixture::KL_MODE, pass_samples: 16, pass_k: vec![1, 4, 16] }
    }
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { fixture_seed: 0, vocab_size: 5, window: 1, max_len: 3, spread: 1.5, samples: 100_000, enumeration_budget: 1_000_000 }
    }
}

impl Default for SequentialSection {
    fn default() -> Self {
        SequentialSection { tasks: 3 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| sdft_core::Error::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(cfg)
    }

    /// Applies CLI overrides; the top-level seed then drives every section.
    pub fn resolve(mut self, seed: Option<u64>, method: Option<&str>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(m) = method {
            self.method = m.to_string();
        }
        self.method()?;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.train.validate()?;
        Ok(self)
    }

    pub fn method(&self) -> Result<Method> {
        Ok(self.method.parse::<Method>()?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }
}
