//! Training config file: TOML whose tables mirror the core config structs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use moba_core::attention::AttentionMode;
use moba_core::model::{AdamConfig, LayerStackConfig, TrainSchedule};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub model: LayerStackConfig,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub corpus: CorpusSpec,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Byte-level text file; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    /// Length of the seeded synthetic corpus used when no path is given.
    pub synthetic_len: Option<usize>,
}

pub const DEFAULT_SYNTHETIC_LEN: usize = 512;

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut file: TrainFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let (Some(p), Some(dir)) = (&file.corpus.path, path.parent()) {
            if p.is_relative() {
                file.corpus.path = Some(dir.join(p));
            }
        }
        Ok(file)
    }

    /// Built-in toy setup used when no file is given.
    pub fn toy() -> Self {
        TrainFile {
            model: LayerStackConfig::toy(16, 2),
            schedule: TrainSchedule {
                total_tokens: 300 * 64,
                switch_fraction: 0.9,
                seq_len: 64,
                batch_size: 1,
                optimizer: AdamConfig::default(),
                seed: 0,
                checkpoint_every: None,
            },
            corpus: CorpusSpec::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub total_tokens: Option<usize>,
    pub switch_fraction: Option<f64>,
    pub seq_len: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub block_size: Option<usize>,
    pub top_k: Option<usize>,
    pub full_layers: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub corpus: Option<PathBuf>,
}

impl TrainOverrides {
    pub fn apply(self, file: &mut TrainFile) -> Result<()> {
        let s = &mut file.schedule;
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.total_tokens {
            s.total_tokens = v;
        }
        if let Some(v) = self.switch_fraction {
            s.switch_fraction = v;
        }
        if let Some(v) = self.seq_len {
            s.seq_len = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.lr {
            s.optimizer.lr = v;
        }
        if let Some(v) = self.checkpoint_every {
            s.checkpoint_every = Some(v);
        }
        if self.block_size.is_some() || self.top_k.is_some() {
            let AttentionMode::Moba { block_size, top_k } = &mut file.model.attention.mode else {
                anyhow::bail!("--block-size/--topk need a moba attention config");
            };
            if let Some(v) = self.block_size {
                *block_size = v;
            }
            if let Some(v) = self.top_k {
                *top_k = v;
            }
        }
        if let Some(f) = self.full_layers {
            file.model = file.model.clone().layerwise_hybrid(f)?;
        }
        if let Some(p) = self.corpus {
            file.corpus.path = Some(p);
        }
        Ok(())
    }
}
