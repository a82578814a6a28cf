// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multi-task suite and the cross-task interference benchmark.
//!
//! Each task maps an input sequence over a small vocabulary to a target
//! sequence of the same length. A sequence is fed to the model as
//! `[marker, x₀, …, x_{L−1}]` where the marker token identifies the task
//! (tokens `vocab..vocab+k` are reserved for markers). The logits at
//! position `t + 1` are scored against `y_t`, so the model predicts each
//! target after reading the matching input token. Under causal attention
//! the first half of `reverse` cannot be predicted from the prefix; that
//! floor is shared by every configuration.
//!
//! The benchmark trains three configurations from the same frozen model:
//! one shared edit on the task mixture, k routed edits on the same
//! mixture, and one unrouted specialist per task. All are scored on
//! held-out data from every task.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::backbone::{FrozenModel, HookSite, Positions};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::intervention::edit_param_count;
use crate::rng::{derive_seed, CounterRng};
use crate::router::{router_param_count, GateMode};
use crate::trainer::{
    count_trainable, eval_loss, mean_gates, train, Example, ParamCount, TrainConfig, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// `y_t = (x_t + 1) mod V`
    #[serde(alias = "increment-mod-v")]
    Increment,
    /// Every target is the task's fixed token.
    #[serde(alias = "constant-token")]
    Constant,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Increment => "increment",
            TaskKind::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// 1-based task id.
    pub id: usize,
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
}

impl TaskSpec {
    pub fn new(id: usize, kind: TaskKind, seq_len: usize, vocab: usize) -> Self {
        Self {
            id,
            kind,
            seq_len,
            vocab,
        }
    }

    /// The fixed output of a `constant` task.
    pub fn constant_token(&self) -> usize {
        (self.id - 1) % self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("tasks[{}].{name}", self.id);
        if self.id == 0 {
            return Err(Error::config("tasks.id", "task ids start at 1"));
        }
        if self.vocab < 2 {
            return Err(Error::config(field("vocab"), format!("must be >= 2, got {}", self.vocab)));
        }
        if self.seq_len == 0 {
            return Err(Error::config(field("seq_len"), "must be >= 1"));
        }
        Ok(())
    }

    pub fn target(&self, x: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => x.to_vec(),
            TaskKind::Reverse => x.iter().rev().copied().collect(),
            TaskKind::Increment => x.iter().map(|&t| (t + 1) % self.vocab).collect(),
            TaskKind::Constant => vec![self.constant_token(); x.len()],
        }
    }
}

/// The default four-task suite.
pub fn default_suite(seq_len: usize, vocab: usize) -> Vec<TaskSpec> {
    [TaskKind::Copy, TaskKind::Reverse, TaskKind::Increment, TaskKind::Constant]
        .into_iter()
        .enumerate()
        .map(|(i, kind)| TaskSpec::new(i + 1, kind, seq_len, vocab))
        .collect()
}

/// `n` input/target pairs with inputs uniform over the task vocabulary.
pub fn gen_task_data(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("bench.n_train", "need at least one example"));
    }
    let mut rng = CounterRng::new(seed);
    Ok((0..n)
        .map(|_| {
            let x: Vec<usize> = (0..spec.seq_len).map(|_| rng.below(spec.vocab)).collect();
            let y = spec.target(&x);
            (x, y)
        })
        .collect())
}

/// Wrap a pair as a model input with a leading marker token.
pub fn to_example(task: usize, marker: usize, x: &[usize], y: &[usize]) -> Example {
    let mut tokens = Vec::with_capacity(x.len() + 1);
    tokens.push(marker);
    tokens.extend_from_slice(x);
    let mut targets = vec![None];
    targets.extend(y.iter().map(|&t| Some(t)));
    Example {
        task,
        tokens,
        targets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Rank of each routed edit and of each specialist.
    pub rank: usize,
    /// Examples per task used for training.
    pub n_train: usize,
    /// Held-out examples per task.
    pub n_eval: usize,
    /// Hooked layers; empty means every layer.
    pub layers: Vec<usize>,
    pub positions: Positions,
    /// Gate mode used for the headline routed-edit losses.
    pub gate_eval: GateMode,
    /// Largest allowed relative gap between shared and routed budgets.
    pub budget_tolerance: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            n_train: 512,
            n_eval: 128,
            layers: Vec::new(),
            positions: Positions::All,
            gate_eval: GateMode::Soft,
            budget_tolerance: 0.10,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn sites(&self, n_layers: usize) -> Vec<HookSite> {
        let layers: Vec<usize> = if self.layers.is_empty() {
            (0..n_layers).collect()
        } else {
            self.layers.clone()
        };
        layers
            .into_iter()
            .map(|l| HookSite::new(l, self.positions.clone()))
            .collect()
    }
}

/// Rank of a single shared edit whose trainable count best matches `k`
/// routed edits of rank `r` plus their router, over `sites` hook sites.
pub fn matched_shared_rank(d: usize, r: usize, k: usize, sites: usize, tolerance: f64) -> Result<usize> {
    let routed = sites as u64 * k as u64 * edit_param_count(r, d) + router_param_count(d, k);
    let per_rank = sites as u64 * (2 * d as u64 + 1);
    let rank = ((routed as f64 / per_rank as f64).round() as usize).clamp(1, d);
    let shared = per_rank * rank as u64;
    let gap = (shared as f64 - routed as f64).abs() / routed as f64;
    if gap > tolerance {
        return Err(Error::Budget { routed, shared });
    }
    Ok(rank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceReport {
    pub tasks: Vec<TaskSpec>,
    pub gate_eval: GateMode,
    pub rank: usize,
    pub shared_rank: usize,
    pub params_routed: ParamCount,
    pub params_shared: ParamCount,
    /// Count for one specialist.
    pub params_specialist: ParamCount,
    /// Held-out loss per task.
    pub frozen: Vec<f64>,
    pub specialist: Vec<f64>,
    pub shared: Vec<f64>,
    /// Routed edits evaluated with `gate_eval`.
    pub routed: Vec<f64>,
    pub routed_soft: Vec<f64>,
    pub routed_hard: Vec<f64>,
    /// `matrix[i][j]`: held-out loss change on task j from specialist i,
    /// relative to the frozen model.
    pub matrix: Vec<Vec<f64>>,
    /// Whether `matrix[i][i] <= matrix[i][j]` for every `j != i`.
    pub diagonal_ok: Vec<bool>,
    /// Mean soft gate per gate, for held-out data of each task.
    pub routing: Vec<Vec<f64>>,
    pub split_seed: u64,
    /// Held-out indices into each task's generated data.
    pub eval_indices: Vec<Vec<usize>>,
    /// Final-step training loss of each arm (shared, routed, specialists).
    pub final_train_loss: Vec<(String, f64)>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl InterferenceReport {
    pub fn mean_frozen(&self) -> f64 {
        mean(&self.frozen)
    }

    pub fn mean_specialist(&self) -> f64 {
        mean(&self.specialist)
    }

    pub fn mean_shared(&self) -> f64 {
        mean(&self.shared)
    }

    pub fn mean_routed(&self) -> f64 {
        mean(&self.routed)
    }

    /// `(routed − specialist) / specialist` on the means.
    pub fn routed_gap_to_specialists(&self) -> f64 {
        (self.mean_routed() - self.mean_specialist()) / self.mean_specialist()
    }

    pub fn is_finite(&self) -> bool {
        let lists = [
            &self.frozen,
            &self.specialist,
            &self.shared,
            &self.routed,
            &self.routed_soft,
            &self.routed_hard,
        ];
        lists.iter().all(|l| l.iter().all(|v| v.is_finite()))
            && self.matrix.iter().flatten().all(|v| v.is_finite())
    }

    /// Key/value report text, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("k", self.tasks.len().to_string());
        for t in &self.tasks {
            kv(
                &format!("task.{}", t.id),
                format!("{} seq_len={} vocab={}", t.kind.name(), t.seq_len, t.vocab),
            );
        }
        kv("gate_eval", self.gate_eval.to_string());
        kv("rank", self.rank.to_string());
        kv("shared_rank", self.shared_rank.to_string());
        kv("params.base", self.params_routed.base.to_string());
        kv("params.routed", self.params_routed.total.to_string());
        kv("params.routed.router", self.params_routed.router.to_string());
        kv("params.shared", self.params_shared.total.to_string());
        kv("params.specialist", self.params_specialist.total.to_string());
        let gap = (self.params_shared.total as f64 - self.params_routed.total as f64).abs()
            / self.params_routed.total as f64;
        kv("params.budget_gap", gap.to_string());
        kv("loss.frozen", join(&self.frozen));
        kv("loss.specialist", join(&self.specialist));
        kv("loss.shared", join(&self.shared));
        kv("loss.routed", join(&self.routed));
        kv("loss.routed_soft", join(&self.routed_soft));
        kv("loss.routed_hard", join(&self.routed_hard));
        kv("mean.frozen", self.mean_frozen().to_string());
        kv("mean.specialist", self.mean_specialist().to_string());
        kv("mean.shared", self.mean_shared().to_string());
        kv("mean.routed", self.mean_routed().to_string());
        kv("mean.routed_soft", mean(&self.routed_soft).to_string());
        kv("mean.routed_hard", mean(&self.routed_hard).to_string());
        kv("gap.routed_vs_specialist", self.routed_gap_to_specialists().to_string());
        kv("routed_beats_shared", (self.mean_routed() <= self.mean_shared()).to_string());
        for (i, row) in self.matrix.iter().enumerate() {
            kv(&format!("matrix.{}", i + 1), join(row));
        }
        kv(
            "matrix.diagonal_ok",
            self.diagonal_ok.iter().map(bool::to_string).collect::<Vec<_>>().join(","),
        );
        for (i, row) in self.routing.iter().enumerate() {
            kv(&format!("routing.{}", i + 1), join(row));
        }
        for (name, loss) in &self.final_train_loss {
            kv(&format!("train.final_loss.{name}"), loss.to_string());
        }
        kv("split.seed", self.split_seed.to_string());
        for (i, idx) in self.eval_indices.iter().enumerate() {
            kv(
                &format!("split.eval.{}", i + 1),
                idx.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            );
        }
        s
    }

    /// The interference matrix as CSV with task-id headers.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("specialist");
        for t in &self.tasks {
            let _ = write!(s, ",task{}", t.id);
        }
        s.push('\n');
        for (t, row) in self.tasks.iter().zip(&self.matrix) {
            let _ = write!(s, "task{}", t.id);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Write `interference_report.txt` and `interference_matrix.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("interference_report.txt"), self.to_text().as_bytes())?;
        write_atomic(&dir.join("interference_matrix.csv"), self.matrix_csv().as_bytes())
    }
}

/// Generated data for one task, split into train and held-out parts.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub eval_indices: Vec<usize>,
}

/// Marker token for the task at `index` (0-based) in a suite.
pub fn marker_token(tasks: &[TaskSpec], index: usize) -> usize {
    tasks.iter().map(|t| t.vocab).max().unwrap_or(0) + index
}

/// Check that `model` can read every task's sequences plus markers.
pub fn check_suite(tasks: &[TaskSpec], model: &FrozenModel) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::config("tasks", "at least one task is required"));
    }
    for t in tasks {
        t.validate()?;
    }
    let cfg = model.config();
    let needed_vocab = marker_token(tasks, tasks.len());
    if cfg.vocab_size < needed_vocab {
        return Err(Error::config(
            "backbone.vocab_size",
            format!("tasks and their markers need {needed_vocab} tokens, model has {}", cfg.vocab_size),
        ));
    }
    let longest = tasks.iter().map(|t| t.seq_len).max().unwrap_or(0) + 1;
    if cfg.max_seq_len < longest {
        return Err(Error::config(
            "backbone.max_seq_len",
            format!("tasks need {longest} positions including the marker, model has {}", cfg.max_seq_len),
        ));
    }
    Ok(())
}

/// Generate and split every task's data.
pub fn build_task_data(tasks: &[TaskSpec], bench: &BenchConfig) -> Result<Vec<TaskData>> {
    if bench.n_train == 0 || bench.n_eval == 0 {
        return Err(Error::config("bench.n_eval", "train and held-out sizes must be >= 1"));
    }
    let total = bench.n_train + bench.n_eval;
    tasks
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let pairs = gen_task_data(spec, total, derive_seed(bench.seed, &format!("data.{}", spec.id)))?;
            let order = CounterRng::new(derive_seed(bench.seed, &format!("split.{}", spec.id))).permutation(total);
            let marker = marker_token(tasks, i);
            let ex = |j: usize| to_example(i, marker, &pairs[j].0, &pairs[j].1);
            let mut eval_indices = order[..bench.n_eval].to_vec();
            eval_indices.sort_unstable();
            let mut train_indices = order[bench.n_eval..].to_vec();
            train_indices.sort_unstable();
            Ok(TaskData {
                train: train_indices.iter().map(|&j| ex(j)).collect(),
                eval: eval_indices.iter().map(|&j| ex(j)).collect(),
                eval_indices,
            })
        })
        .collect()
}

const EVAL_CHUNK: usize = 64;

fn edits_of(a: &Adapter) -> Vec<&crate::intervention::SubspaceEdit> {
    a.all_edits().collect()
}

fn train_arm(
    model: &FrozenModel,
    adapter: Adapter,
    data: &[Example],
    config: &TrainConfig,
    label: &str,
) -> Result<TrainState> {
    let config = TrainConfig {
        seed: derive_seed(config.seed, label),
        ..config.clone()
    };
    let mut state = TrainState::new(adapter, &config);
    train(&mut state, model, data, &config, |_, rec| {
        if rec.step % 100 == 0 || rec.step == config.steps {
            log::debug!("{label}\t{}", rec.to_tsv());
        }
        Ok(())
    })?;
    Ok(state)
}

/// Train one unrouted edit per task, each on that task's data alone.
pub fn train_specialists(
    tasks: &[TaskSpec],
    data: &[TaskData],
    model: &FrozenModel,
    bench: &BenchConfig,
    config: &TrainConfig,
) -> Result<Vec<TrainState>> {
    let sites = bench.sites(model.config().n_layers);
    tasks
        .iter()
        .zip(data)
        .map(|(t, d)| {
            let label = format!("specialist.{}", t.id);
            let adapter = Adapter::init(model.d(), bench.rank, 1, &sites, false, derive_seed(bench.seed, &label))?;
            train_arm(model, adapter, &d.train, config, &label)
        })
        .collect()
}

/// Train and score the shared, routed, and specialist configurations.
pub fn run_interference_benchmark(
    tasks: &[TaskSpec],
    model: &FrozenModel,
    bench: &BenchConfig,
    config: &TrainConfig,
) -> Result<InterferenceReport> {
    let k = tasks.len();
    if k < 2 {
        return Err(Error::config("tasks", format!("the benchmark needs at least 2 tasks, got {k}")));
    }
    check_suite(tasks, model)?;
    config.validate()?;
    let d = model.d();
    if bench.rank == 0 || bench.rank > d {
        return Err(Error::config("bench.rank", format!("must lie in [1, {d}], got {}", bench.rank)));
    }
    let sites = bench.sites(model.config().n_layers);
    let shared_rank = matched_shared_rank(d, bench.rank, k, sites.len(), bench.budget_tolerance)?;

    let data = build_task_data(tasks, bench)?;
    let mixture: Vec<Example> = data.iter().flat_map(|t| t.train.iter().cloned()).collect();

    let shared_init = Adapter::init(d, shared_rank, 1, &sites, false, derive_seed(bench.seed, "shared"))?;
    let routed_init = Adapter::init(d, bench.rank, k, &sites, true, derive_seed(bench.seed, "routed"))?;

    let (shared, routed, specialists) = std::thread::scope(|s| {
        let shared = s.spawn(|| train_arm(model, shared_init, &mixture, config, "shared"));
        let routed = s.spawn(|| train_arm(model, routed_init, &mixture, config, "routed"));
        let specialists = s.spawn(|| train_specialists(tasks, &data, model, bench, config));
        (
            shared.join().expect("shared arm panicked"),
            routed.join().expect("routed arm panicked"),
            specialists.join().expect("specialist arm panicked"),
        )
    });
    let (shared, routed, specialists) = (shared?, routed?, specialists?);

    let frozen_adapter = Adapter::init(d, 1, 1, &sites, false, 0)?;
    let eval_each = |a: &Adapter, mode: GateMode| -> Result<Vec<f64>> {
        data.iter().map(|t| eval_loss(a, model, &t.eval, mode, EVAL_CHUNK)).collect()
    };
    // Identity-initialized edits leave the forward pass unchanged.
    let frozen = eval_each(&frozen_adapter, GateMode::Soft)?;
    let shared_loss = eval_each(&shared.adapter, GateMode::Soft)?;
    let routed_soft = eval_each(&routed.adapter, GateMode::Soft)?;
    let routed_hard = eval_each(&routed.adapter, GateMode::Hard)?;
    let routed_loss = match bench.gate_eval {
        GateMode::Soft => routed_soft.clone(),
        GateMode::Hard => routed_hard.clone(),
    };

    let mut matrix = Vec::with_capacity(k);
    let mut specialist_loss = Vec::with_capacity(k);
    for (i, s) in specialists.iter().enumerate() {
        let row: Vec<f64> = eval_each(&s.adapter, GateMode::Soft)?
            .iter()
            .zip(&frozen)
            .map(|(l, f)| l - f)
            .collect();
        specialist_loss.push(row[i] + frozen[i]);
        matrix.push(row);
    }
    let diagonal_ok = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == i || row[i] <= v))
        .collect();
    let routing = data
        .iter()
        .map(|t| mean_gates(&routed.adapter, model, &t.eval))
        .collect::<Result<_>>()?;

    let mut final_train_loss = vec![
        ("shared".to_string(), *shared.loss_history.last().unwrap_or(&f64::NAN)),
        ("routed".to_string(), *routed.loss_history.last().unwrap_or(&f64::NAN)),
    ];
    for (t, s) in tasks.iter().zip(&specialists) {
        final_train_loss.push((format!("specialist.{}", t.id), *s.loss_history.last().unwrap_or(&f64::NAN)));
    }

    Ok(InterferenceReport {
        tasks: tasks.to_vec(),
        gate_eval: bench.gate_eval,
        rank: bench.rank,
        shared_rank,
        params_routed: count_trainable(&edits_of(&routed.adapter), routed.adapter.router.as_ref(), model),
        params_shared: count_trainable(&edits_of(&shared.adapter), None, model),
        params_specialist: count_trainable(&edits_of(&specialists[0].adapter), None, model),
        frozen,
        specialist: specialist_loss,
        shared: shared_loss,
        routed: routed_loss,
        routed_soft,
        routed_hard,
        matrix,
        diagonal_ok,
        routing,
        split_seed: bench.seed,
        eval_indices: data.iter().map(|t| t.eval_indices.clone()).collect(),
        final_train_loss,
    })
}
