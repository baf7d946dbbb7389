//! Configuration file for the `eer` binary.
//!
//! The file is TOML. Every key is optional and every section mirrors the
//! library's config struct of the same name:
//!
//! ```toml
//! seed = 7                      # applied to every component seed
//! classes = ["PER", "LOC"]      # class order for corpora read by the CLI
//!
//! [scorer]                      # ScorerConfig
//! embed_dim = 32
//!
//! [train]                       # TrainConfig
//! epochs = 10
//! learning_rate = 0.01
//! eer = { rho = 0.15, gamma = 0.05, lambda_u = 10.0 }
//!
//! [nns]                         # NnsConfig
//! [ee]                          # EeConfig
//! [bootstrap]                   # BootstrapConfig
//! [decode]
//! o_bias = 0.5
//! [consistency]                 # ConsistencyConfig
//! [sweep]                       # SweepSpec
//! ```
//!
//! Resolution order, later wins: built-in defaults, the config file, the
//! global `--seed` flag, then subcommand flags.

use std::path::Path;

use anyhow::Context;
use eer_ner::eval::BootstrapConfig;
use eer_ner::samplers::{EeConfig, NnsConfig};
use eer_ner::scorer::ScorerConfig;
use eer_ner::synthetic::{ConsistencyConfig, SweepAnnotation, SweepSpec};
use eer_ner::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub classes: Option<Vec<String>>,
    pub scorer: ScorerConfig,
    pub train: TrainConfig,
    pub nns: NnsConfig,
    pub ee: EeConfig,
    pub bootstrap: BootstrapConfig,
    pub decode: DecodeSection,
    pub consistency: ConsistencyConfig,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// Cost-aware decoding bias; unset means 0 unless the model directory
    /// carries a tuned value.
    pub o_bias: Option<f64>,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<CliConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Overwrites every component seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.scorer.rng_seed = seed;
        self.train.rng_seed = seed;
        self.nns.rng_seed = seed;
        self.ee.rng_seed = seed;
        self.bootstrap.rng_seed = seed;
        self.consistency.task.rng_seed = seed;
        self.consistency.scorer.rng_seed = seed;
        self.consistency.train.rng_seed = seed;
        self.sweep.task.rng_seed = seed;
        if let SweepAnnotation::Ee(ee) = &mut self.sweep.annotation {
            ee.rng_seed = seed;
        }
    }
}
