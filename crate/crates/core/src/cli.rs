// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command implementations behind the `csreft` binary.
//!
//! Each command writes human-readable results to `out` and returns the
//! process exit code: 0 success, 1 configuration or I/O error, 2 numeric
//! failure during training, 3 gradient check failure.

use std::io::Write;
use std::path::Path;

use crate::adapter::Adapter;
use crate::autodiff::grad_check;
use crate::backbone::{BackboneConfig, FrozenModel, HookSite, Positions};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::fsio::{create_dir_all, write_atomic};
use crate::linalg::Tensor;
use crate::rng::{derive_seed, CounterRng};
use crate::router::GateMode;
use crate::taskbench::{build_task_data, check_suite, run_interference_benchmark};
use crate::trainer::{
    count_trainable_shapes, eval_loss, objective, train, Example, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Largest hidden size `gradcheck` accepts.
pub const GRADCHECK_MAX_D: usize = 32;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_EPS: f64 = 1e-5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::RankDeficient { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn finish(result: Result<()>, err: &mut dyn Write) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(config: &Path, overrides: &Overrides, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(train_inner(config, overrides, out), err)
}

fn train_inner(config: &Path, overrides: &Overrides, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let tasks = cfg.require_tasks()?;
    let model = FrozenModel::build(cfg.backbone.clone())?;
    check_suite(tasks, &model)?;
    let data = build_task_data(tasks, &cfg.bench_config())?;
    let mixture: Vec<Example> = data.iter().flat_map(|t| t.train.iter().cloned()).collect();

    let sites = cfg.adapter.sites(cfg.backbone.n_layers);
    let mut adapter = Adapter::init(
        model.d(),
        cfg.adapter.rank,
        cfg.adapter.k,
        &sites,
        cfg.adapter.routed,
        derive_seed(cfg.seed, "adapter"),
    )?;
    adapter.router_input = cfg.adapter.router_input;
    if let Some(r) = &mut adapter.router {
        r.threshold = cfg.adapter.threshold;
    }

    create_dir_all(&cfg.out)?;
    let checksum = model.checksum();
    let mut state = TrainState::new(adapter, &cfg.train);
    let mut log = String::new();
    let result = train(&mut state, &model, &mixture, &cfg.train, |_, rec| {
        let line = rec.to_tsv();
        log::debug!("{line}");
        log.push_str(&line);
        log.push('\n');
        Ok(())
    });
    write_atomic(&cfg.out.join("train_log.tsv"), log.as_bytes())?;
    result?;
    if model.checksum() != checksum {
        return Err(Error::NonFinite("backbone weights changed during training".into()));
    }

    let ckpt = Checkpoint::from_state(
        &state,
        &[
            ("seed", cfg.seed.to_string()),
            ("backbone.seed", cfg.backbone.seed.to_string()),
            ("backbone.checksum", format!("{checksum:016x}")),
        ],
    );
    save_checkpoint(&ckpt, &cfg.out.join("checkpoint.csrf"))?;
    write_atomic(&cfg.out.join("config.toml"), cfg.to_toml_string().as_bytes())?;

    let _ = writeln!(out, "steps = {}", state.step);
    if let Some(last) = state.loss_history.last() {
        let _ = writeln!(out, "final_train_loss = {last}");
    }
    for (t, d) in tasks.iter().zip(&data) {
        let loss = eval_loss(&state.adapter, &model, &d.eval, cfg.gate, 64)?;
        let _ = writeln!(out, "eval_loss.task{} ({}) = {loss}", t.id, t.kind.name());
    }
    let _ = writeln!(out, "wrote {}", cfg.out.display());
    log::info!("training finished after {} steps", state.step);
    Ok(())
}

pub fn cmd_interfere(config: &Path, overrides: &Overrides, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(interfere_inner(config, overrides, out), err)
}

fn interfere_inner(config: &Path, overrides: &Overrides, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let tasks = cfg.require_tasks()?;
    let model = FrozenModel::build(cfg.backbone.clone())?;
    let report = run_interference_benchmark(tasks, &model, &cfg.bench_config(), &cfg.train)?;
    create_dir_all(&cfg.out)?;
    report.write(&cfg.out)?;
    let _ = writeln!(out, "mean.frozen = {}", report.mean_frozen());
    let _ = writeln!(out, "mean.specialist = {}", report.mean_specialist());
    let _ = writeln!(out, "mean.shared = {}", report.mean_shared());
    let _ = writeln!(out, "mean.routed = {}", report.mean_routed());
    let _ = writeln!(out, "gap.routed_vs_specialist = {}", report.routed_gap_to_specialists());
    let _ = writeln!(out, "wrote {}", cfg.out.display());
    Ok(())
}

/// Worst relative error per parameter group from [`gradcheck_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `(group, max relative error)` in a fixed order.
    pub groups: Vec<(String, f64)>,
    /// Name of the single worst parameter tensor and its error.
    pub worst: (String, f64),
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, e)| *e <= GRADCHECK_TOL)
    }
}

/// Compare reverse-mode and central-difference gradients of the full
/// objective with respect to every adapter parameter.
pub fn gradcheck_groups(d: usize, r: usize, k: usize, seed: u64) -> Result<GradcheckReport> {
    if d == 0 || d > GRADCHECK_MAX_D {
        return Err(Error::config("d", format!("must lie in [1, {GRADCHECK_MAX_D}], got {d}")));
    }
    if r == 0 || r > d {
        return Err(Error::config("r", format!("must lie in [1, d = {d}], got {r}")));
    }
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let vocab = 10;
    let model = FrozenModel::build(BackboneConfig {
        vocab_size: vocab,
        d,
        n_layers: 2,
        n_heads: if d % 2 == 0 { 2 } else { 1 },
        max_seq_len: 6,
        seed: derive_seed(seed, "backbone"),
    })?;
    let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::All)];
    let mut adapter = Adapter::init(d, r, k, &sites, true, derive_seed(seed, "adapter"))?;
    // Move off the identity point so every term of the gradient is active.
    let mut rng = CounterRng::new(derive_seed(seed, "perturb"));
    for e in adapter.all_edits_mut() {
        e.weight = e.weight.add(&Tensor::gaussian(e.weight.shape(), 0.3, &mut rng))?;
        e.bias = Tensor::gaussian(e.bias.shape(), 0.3, &mut rng);
    }
    let batch: Vec<Example> = (0..3)
        .map(|_| {
            let tokens: Vec<usize> = (0..5).map(|_| rng.below(vocab)).collect();
            let targets = (0..5).map(|p| (p > 0).then(|| tokens[p - 1])).collect();
            Example {
                task: 0,
                tokens,
                targets,
            }
        })
        .collect();
    let refs: Vec<&Example> = batch.iter().collect();

    let named: Vec<(String, Tensor)> = adapter
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let check = grad_check(
        |tape, ids| {
            let vars = adapter.vars_from_ids(ids)?;
            Ok(objective(tape, &vars, &adapter, &model, &refs, 0.05, GateMode::Soft)?.loss)
        },
        &params,
        GRADCHECK_EPS,
    )?;

    let group_of = |name: &str| -> &'static str {
        match name.rsplit('.').next() {
            Some("basis") => "edit.R",
            Some("weight") => "edit.W",
            Some("bias") => "edit.b",
            Some("w1") => "router.W1",
            Some("b1") => "router.b1",
            Some("w2") => "router.W2",
            _ => "router.b2",
        }
    };
    let order = ["edit.R", "edit.W", "edit.b", "router.W1", "router.b1", "router.W2", "router.b2"];
    let mut groups: Vec<(String, f64)> = order.iter().map(|g| (g.to_string(), 0.0)).collect();
    for ((name, _), err) in named.iter().zip(&check.per_param) {
        let g = group_of(name);
        let slot = groups.iter_mut().find(|(n, _)| n == g).expect("known group");
        slot.1 = slot.1.max(*err);
    }
    let (wi, _) = check.worst;
    Ok(GradcheckReport {
        groups,
        worst: (named[wi].0.clone(), check.per_param[wi]),
    })
}

pub fn cmd_gradcheck(d: usize, r: usize, k: usize, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let report = match gradcheck_groups(d, r, k, seed) {
        Ok(rep) => rep,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    for (group, e) in &report.groups {
        let _ = writeln!(out, "{group}\t{e:e}");
    }
    if report.passed() {
        let _ = writeln!(out, "ok: all groups within {GRADCHECK_TOL:e}");
        EXIT_OK
    } else {
        let _ = writeln!(
            err,
            "gradient check failed: worst parameter {} has relative error {:e}",
            report.worst.0, report.worst.1
        );
        EXIT_GRADCHECK
    }
}

pub fn cmd_countparams(config: &Path, overrides: &Overrides, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(countparams_inner(config, overrides, out), err)
}

fn countparams_inner(config: &Path, overrides: &Overrides, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let a = &cfg.adapter;
    let d = cfg.backbone.d;
    let sites = a.layer_list(cfg.backbone.n_layers).len();
    let base = cfg.count.base_params.unwrap_or_else(|| cfg.backbone.param_count());
    let c = count_trainable_shapes(
        std::iter::repeat((a.rank, d)).take(a.k * sites),
        a.routed.then_some((d, a.k)),
        base,
    );
    let _ = writeln!(out, "edits = {} ({} x {} sites, rank {}, d {})", c.edits, a.k, sites, a.rank, d);
    let _ = writeln!(out, "router = {}", c.router);
    let _ = writeln!(out, "total = {}", c.total);
    let _ = writeln!(out, "base = {}", c.base);
    let _ = writeln!(out, "fraction = {}", c.fraction);
    let _ = writeln!(out, "percent = {}", c.fraction * 100.0);
    if let Some(pct) = cfg.count.reference_percent {
        let reference = base as f64 * pct / 100.0;
        let _ = writeln!(out, "reference_percent = {pct}");
        let _ = writeln!(out, "reference_params = {reference}");
        let _ = writeln!(out, "router_exceeds_reference = {}", c.router as f64 > reference);
        let _ = writeln!(out, "total_exceeds_reference = {}", c.total as f64 > reference);
    }
    Ok(())
}
