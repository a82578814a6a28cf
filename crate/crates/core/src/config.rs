// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. Parse and validation failures both surface as
//! [`Error::Config`] naming the offending field by its dotted path.
//!
//! ```toml
//! seed = 0
//! out = "runs/default"
//! gate = "soft"
//!
//! [backbone]
//! vocab_size = 20
//! d = 32
//! n_layers = 2
//! n_heads = 2
//! max_seq_len = 16
//! seed = 0
//!
//! [train]
//! lambda = 0.01
//! lr = 0.001
//! steps = 500
//! batch_size = 16
//! gate_mode_train = "soft"
//! adam_betas = [0.9, 0.999]
//! adam_eps = 1e-8
//!
//! [adapter]
//! k = 4
//! rank = 4
//! layers = []            # empty: every layer
//! positions = "first_last"
//! routed = true
//! router_input = "first_token"
//! threshold = 0.5
//!
//! [data]
//! n_train = 512
//! n_eval = 128
//!
//! [bench]
//! budget_tolerance = 0.1
//!
//! [count]
//! base_params = 7000000000       # optional override of the backbone count
//! reference_percent = 0.01       # optional figure to compare against
//!
//! [[tasks]]
//! id = 1
//! kind = "copy"
//! seq_len = 8
//! vocab = 16
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, HookSite, Positions};
use crate::error::{Error, Result};
use crate::router::{GateMode, RouterInput, DEFAULT_THRESHOLD};
use crate::taskbench::{default_suite, BenchConfig, TaskSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Number of edits (gates).
    pub k: usize,
    pub rank: usize,
    /// Hooked layers; empty means every layer.
    pub layers: Vec<usize>,
    pub positions: Positions,
    pub routed: bool,
    pub router_input: RouterInput,
    pub threshold: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            k: 4,
            rank: 4,
            layers: Vec::new(),
            positions: Positions::FirstLast,
            routed: true,
            router_input: RouterInput::FirstToken,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl AdapterConfig {
    pub fn layer_list(&self, n_layers: usize) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..n_layers).collect()
        } else {
            self.layers.clone()
        }
    }

    pub fn sites(&self, n_layers: usize) -> Vec<HookSite> {
        self.layer_list(n_layers)
            .into_iter()
            .map(|l| HookSite::new(l, self.positions.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training examples per task.
    pub n_train: usize,
    /// Held-out examples per task.
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_eval: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub budget_tolerance: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            budget_tolerance: 0.10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountConfig {
    /// Denominator for the trainable fraction; defaults to the backbone's
    /// own closed-form count.
    pub base_params: Option<u64>,
    /// A percentage to compare the computed fraction against.
    pub reference_percent: Option<f64>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, adapter initialization, and batch order.
    pub seed: u64,
    pub out: PathBuf,
    /// Gate mode for evaluation and reporting.
    pub gate: GateMode,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub adapter: AdapterConfig,
    pub data: DataConfig,
    pub bench: BenchSection,
    pub count: CountConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: default_out(),
            gate: GateMode::Soft,
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            adapter: AdapterConfig::default(),
            data: DataConfig::default(),
            bench: BenchSection::default(),
            count: CountConfig::default(),
            tasks: default_suite(8, 16),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub gate: Option<GateMode>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(gate) = o.gate {
            self.gate = gate;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        let a = &self.adapter;
        if a.k == 0 {
            return Err(Error::config("adapter.k", "must be at least 1"));
        }
        if a.rank == 0 || a.rank > self.backbone.d {
            return Err(Error::config(
                "adapter.rank",
                format!("must lie in [1, {}], got {}", self.backbone.d, a.rank),
            ));
        }
        if let Some(&l) = a.layers.iter().find(|&&l| l >= self.backbone.n_layers) {
            return Err(Error::config(
                "adapter.layers",
                format!("layer {l} outside [0, {})", self.backbone.n_layers),
            ));
        }
        if !(a.threshold > 0.0 && a.threshold < 1.0) {
            return Err(Error::config("adapter.threshold", "must lie in (0, 1)"));
        }
        if self.data.n_train == 0 {
            return Err(Error::config("data.n_train", "must be at least 1"));
        }
        if self.data.n_eval == 0 {
            return Err(Error::config("data.n_eval", "must be at least 1"));
        }
        if !(self.bench.budget_tolerance >= 0.0) {
            return Err(Error::config("bench.budget_tolerance", "must be >= 0"));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !ids.insert(t.id) {
                return Err(Error::config("tasks.id", format!("duplicate task id {}", t.id)));
            }
        }
        Ok(())
    }

    /// Task list checked for use by the training commands.
    pub fn require_tasks(&self) -> Result<&[TaskSpec]> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "no tasks configured"));
        }
        Ok(&self.tasks)
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            rank: self.adapter.rank,
            n_train: self.data.n_train,
            n_eval: self.data.n_eval,
            layers: self.adapter.layers.clone(),
            positions: self.adapter.positions.clone(),
            gate_eval: self.gate,
            budget_tolerance: self.bench.budget_tolerance,
            seed: self.seed,
        }
    }
}
