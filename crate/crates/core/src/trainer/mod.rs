// SPDX-License-Identifier: MIT OR Apache-2.0

//! Joint training of edits and router against a frozen model.
//!
//! The objective for a batch is the mean per-example token cross-entropy
//! plus `λ·Ω(α)`, where `Ω` is the mean router activation (mean L1 of the
//! gate vector) averaged over the batch. Only adapter parameters are ever
//! placed on the tape as trainable leaves; the backbone enters as constants.

mod accounting;
mod adam;

pub use accounting::{count_trainable, count_trainable_shapes, ParamCount};
pub use adam::Adam;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterVars};
use crate::autodiff::{NodeId, Tape, Target};
use crate::backbone::FrozenModel;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, CounterRng};
use crate::router::GateMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the gate sparsity term.
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Batch sampling seed; a run config fills it from its global seed.
    #[serde(skip)]
    pub seed: u64,
    pub gate_mode_train: GateMode,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 1e-3,
            steps: 500,
            batch_size: 16,
            seed: 0,
            gate_mode_train: GateMode::Soft,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "train.lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(
                "train.adam_betas",
                format!("both betas must lie in [0, 1), got ({b1}, {b2})"),
            ));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be > 0"));
        }
        Ok(())
    }
}

/// One labelled sequence. `task` only selects which targets apply; it is
/// never shown to the model or router.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task: usize,
    pub tokens: Vec<usize>,
    /// Target token per position; `None` positions carry no loss.
    pub targets: Vec<Option<usize>>,
}

/// A built objective, ready for [`Tape::backward`].
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    /// `task_loss + λ·Ω`.
    pub loss: NodeId,
    pub task_loss: NodeId,
    /// Mean gate activation over the batch; `None` without a router.
    pub omega: Option<NodeId>,
    /// Soft gates `[B, k]` per length group, in batch order within a group.
    pub alpha: Vec<NodeId>,
    pub vars: AdapterVars,
}

impl LossGraph {
    pub fn value(&self, id: NodeId) -> f64 {
        self.tape.value(id).data()[0]
    }

    pub fn total(&self) -> f64 {
        self.value(self.loss)
    }

    pub fn task(&self) -> f64 {
        self.value(self.task_loss)
    }

    pub fn omega(&self) -> f64 {
        self.omega.map_or(0.0, |o| self.value(o))
    }
}

/// `Ω(α) = (1/k)·Σᵢ αᵢ`.
pub fn sparsity_penalty(alpha: &[f64]) -> f64 {
    if alpha.is_empty() {
        return 0.0;
    }
    alpha.iter().sum::<f64>() / alpha.len() as f64
}

/// Build the training objective for `batch`.
///
/// Examples are grouped by length; each group is one forward pass on the
/// shared tape. Every example contributes the mean cross-entropy over its
/// target positions with weight `1/B`.
pub fn batch_loss(
    adapter: &Adapter,
    model: &FrozenModel,
    batch: &[&Example],
    lambda: f64,
    mode: GateMode,
    trainable: bool,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let vars = adapter.load(&mut tape, trainable);
    let parts = objective(&mut tape, &vars, adapter, model, batch, lambda, mode)?;
    Ok(LossGraph {
        tape,
        loss: parts.loss,
        task_loss: parts.task_loss,
        omega: parts.omega,
        alpha: parts.alpha,
        vars,
    })
}

/// Node ids of one objective built by [`objective`].
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub loss: NodeId,
    pub task_loss: NodeId,
    pub omega: Option<NodeId>,
    pub alpha: Vec<NodeId>,
}

/// Build the objective on `tape` using already-loaded parameter nodes.
/// `adapter` supplies only structure (sites, gate count).
pub fn objective(
    tape: &mut Tape,
    vars: &AdapterVars,
    adapter: &Adapter,
    model: &FrozenModel,
    batch: &[&Example],
    lambda: f64,
    mode: GateMode,
) -> Result<ObjectiveNodes> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut groups: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for ex in batch {
        if ex.tokens.len() != ex.targets.len() {
            return Err(Error::shape("example tokens and targets differ in length"));
        }
        let labelled = ex.targets.iter().filter(|t| t.is_some()).count();
        if labelled == 0 {
            return Err(Error::shape("example has no target positions"));
        }
        groups.entry(ex.tokens.len()).or_default().push(ex);
    }

    let b = batch.len() as f64;
    let mut task_terms = Vec::new();
    let mut alpha_sums = Vec::new();
    let mut alphas = Vec::new();
    for (n, group) in &groups {
        let tokens: Vec<Vec<usize>> = group.iter().map(|e| e.tokens.clone()).collect();
        let mut targets = Vec::new();
        for (i, ex) in group.iter().enumerate() {
            let labelled = ex.targets.iter().filter(|t| t.is_some()).count() as f64;
            for (p, t) in ex.targets.iter().enumerate() {
                if let Some(class) = t {
                    targets.push(Target {
                        row: i * n + p,
                        class: *class,
                        weight: 1.0 / (b * labelled),
                    });
                }
            }
        }
        let mut hook = vars.hook(mode);
        let out = model.forward_with_hooks(tape, &tokens, &adapter.sites, &mut hook)?;
        task_terms.push(tape.softmax_cross_entropy(out.logits, targets)?);
        if let Some(alpha) = hook.alpha() {
            alphas.push(alpha);
            alpha_sums.push(tape.sum(alpha)?);
        }
    }

    let task_loss = sum_nodes(tape, &task_terms)?;
    let (loss, omega) = if alpha_sums.is_empty() {
        (task_loss, None)
    } else {
        let total_alpha = sum_nodes(tape, &alpha_sums)?;
        let omega = tape.scale(total_alpha, 1.0 / (b * adapter.gates() as f64))?;
        let penalty = tape.scale(omega, lambda)?;
        (tape.add(task_loss, penalty)?, Some(omega))
    };
    Ok(ObjectiveNodes {
        loss,
        task_loss,
        omega,
        alpha: alphas,
    })
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Mean per-example task loss over `examples`, evaluated in chunks.
pub fn eval_loss(
    adapter: &Adapter,
    model: &FrozenModel,
    examples: &[Example],
    mode: GateMode,
    chunk: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for part in examples.chunks(chunk.max(1)) {
        let refs: Vec<&Example> = part.iter().collect();
        let g = batch_loss(adapter, model, &refs, 0.0, mode, false)?;
        total += g.task() * part.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Mean soft gate per gate over `examples`; empty without a router.
pub fn mean_gates(adapter: &Adapter, model: &FrozenModel, examples: &[Example]) -> Result<Vec<f64>> {
    if adapter.router.is_none() || examples.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let g = batch_loss(adapter, model, &refs, 0.0, GateMode::Soft, false)?;
    Ok(column_means(&g))
}

fn column_means(g: &LossGraph) -> Vec<f64> {
    let mut sums: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for &a in &g.alpha {
        let t = g.tape.value(a);
        if sums.is_empty() {
            sums = vec![0.0; t.cols()];
        }
        for i in 0..t.rows() {
            for (s, v) in sums.iter_mut().zip(t.row(i)) {
                *s += v;
            }
        }
        rows += t.rows();
    }
    sums.iter().map(|s| s / rows.max(1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adapter: Adapter,
    pub adam: Adam,
    pub step: usize,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(adapter: Adapter, config: &TrainConfig) -> Self {
        let shapes: Vec<Vec<usize>> = adapter
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let adam = Adam::new(config.lr, config.adam_betas, config.adam_eps, &shape_refs);
        Self {
            adapter,
            adam,
            step: 0,
            loss_history: Vec::new(),
        }
    }
}

/// Per-step diagnostics, also the row format of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub total: f64,
    pub task: f64,
    /// `λ·Ω`, the amount the sparsity term adds to `task`.
    pub omega_term: f64,
    pub mean_alpha: Vec<f64>,
}

impl StepRecord {
    /// `step, total, task, λΩ, mean α per gate`, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut line = format!("{}\t{}\t{}\t{}", self.step, self.total, self.task, self.omega_term);
        for a in &self.mean_alpha {
            line.push('\t');
            line.push_str(&a.to_string());
        }
        line
    }
}

/// One Adam step on every adapter parameter, then retraction of every edit
/// basis that moved.
pub fn train_step(
    state: &mut TrainState,
    model: &FrozenModel,
    batch: &[&Example],
    config: &TrainConfig,
) -> Result<StepRecord> {
    let graph = batch_loss(
        &state.adapter,
        model,
        batch,
        config.lambda,
        config.gate_mode_train,
        true,
    )?;
    let step = state.step + 1;
    let total = graph.total();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            param: "loss".into(),
        });
    }
    let grads = graph.tape.backward(graph.loss)?;
    let ids = graph.vars.param_ids();
    let names: Vec<String> = state
        .adapter
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut grad_tensors = Vec::with_capacity(ids.len());
    for (id, name) in ids.iter().zip(&names) {
        let g = grads.get(*id).expect("adapter parameters are trainable");
        if !g.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                param: name.clone(),
            });
        }
        grad_tensors.push(g);
    }

    let bases_before: Vec<_> = state.adapter.all_edits().map(|e| e.basis.clone()).collect();
    state.adam.lr = config.lr;
    {
        let mut params = state.adapter.params_mut();
        state.adam.step(&mut params, &grad_tensors);
    }
    for (edit, before) in state.adapter.all_edits_mut().zip(&bases_before) {
        if edit.basis != *before {
            edit.retract()?;
        }
    }
    if let Some((name, _)) = state
        .adapter
        .named_params()
        .into_iter()
        .find(|(_, t)| !t.is_finite())
    {
        return Err(Error::NonFiniteLoss { step, param: name });
    }

    state.step = step;
    state.loss_history.push(total);
    Ok(StepRecord {
        step,
        total,
        task: graph.task(),
        omega_term: total - graph.task(),
        mean_alpha: column_means(&graph),
    })
}

/// Uniform sampling with replacement from a fixed dataset.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: CounterRng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: CounterRng::new(derive_seed(seed, "batches")),
        }
    }

    pub fn sample<'a>(&mut self, data: &'a [Example], batch_size: usize) -> Vec<&'a Example> {
        (0..batch_size).map(|_| &data[self.rng.below(data.len())]).collect()
    }
}

/// Run `config.steps` steps on batches drawn from `data`, calling
/// `on_step` after each.
pub fn train(
    state: &mut TrainState,
    model: &FrozenModel,
    data: &[Example],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sampler = BatchSampler::new(config.seed);
    // Skip the draws already consumed when resuming from a checkpoint.
    for _ in 0..state.step {
        sampler.sample(data, config.batch_size);
    }
    while state.step < config.steps {
        let batch = sampler.sample(data, config.batch_size);
        let record = train_step(state, model, &batch, config)?;
        on_step(state, &record)?;
    }
    Ok(())
}
