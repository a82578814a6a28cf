// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion with the measured values, and exits non-zero if any fails.

use std::time::{Duration, Instant};

use csreft::adapter::Adapter;
use csreft::autodiff::Tape;
use csreft::backbone::{BackboneConfig, FrozenModel, HookSite, Positions};
use csreft::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use csreft::cli::{cmd_countparams, cmd_gradcheck, cmd_train, gradcheck_groups, GRADCHECK_TOL};
use csreft::config::Overrides;
use csreft::intervention::{edit_param_count, SubspaceEdit};
use csreft::linalg::{orthonormality_error, random_orthonormal, rowspace_projector, Tensor};
use csreft::rng::{derive_seed, CounterRng};
use csreft::router::{compose, gate, router_param_count, GateMode, RouterNet};
use csreft::taskbench::{build_task_data, default_suite, run_interference_benchmark, BenchConfig};
use csreft::trainer::{
    batch_loss, count_trainable, count_trainable_shapes, train, Example, TrainConfig, TrainState,
};
use csreft::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn model(d: usize, vocab: usize, max_seq_len: usize, seed: u64) -> FrozenModel {
    FrozenModel::build(BackboneConfig {
        vocab_size: vocab,
        d,
        n_layers: 2,
        n_heads: 2,
        max_seq_len,
        seed,
    })
    .unwrap()
}

fn random_edit(d: usize, r: usize, rng: &mut CounterRng) -> SubspaceEdit {
    SubspaceEdit::new(
        random_orthonormal(r, d, rng.next_u64()).unwrap(),
        Tensor::gaussian(&[r, d], 1.0, rng),
        Tensor::gaussian(&[r], 1.0, rng),
        HookSite::new(0, Positions::All),
    )
    .unwrap()
}

fn random_vec(d: usize, std: f64, rng: &mut CounterRng) -> Vec<f64> {
    (0..d).map(|_| std * rng.gaussian()).collect()
}

fn c1_step0_equivalence() -> Outcome {
    let t = Instant::now();
    let m = model(16, 20, 8, 1);
    let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::All)];
    let a = Adapter::init(16, 4, 3, &sites, true, 2).unwrap();
    let mut rng = CounterRng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = 1 + rng.below(8);
        let tokens = vec![(0..len).map(|_| rng.below(20)).collect::<Vec<_>>()];
        let mut tape = Tape::new();
        let vars = a.load(&mut tape, false);
        let mut hook = vars.hook(GateMode::Soft);
        let out = m.forward_with_hooks(&mut tape, &tokens, &a.sites, &mut hook).unwrap();
        let frozen = m.forward(&tokens).unwrap();
        worst = worst.max(tape.value(out.logits).max_abs_diff(&frozen).unwrap());
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-12 && within(el, 5.0),
        format!("max |intervened - frozen| = {worst:e} over 100 inputs (<= 1e-12), {el:.2?} (< 5 s)"),
    )
}

fn c2_orthonormality() -> Outcome {
    let t = Instant::now();
    let tasks = default_suite(8, 16);
    let m = model(16, 20, 9, 4);
    let bench = BenchConfig {
        n_train: 128,
        n_eval: 8,
        ..BenchConfig::default()
    };
    let data = build_task_data(&tasks, &bench).unwrap();
    let mixture: Vec<Example> = data.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let sites = bench.sites(2);
    let config = TrainConfig {
        lr: 1e-2,
        steps: 500,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(Adapter::init(16, 4, 4, &sites, true, 5).unwrap(), &config);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    train(&mut state, &m, &mixture, &config, |s, _| {
        for e in s.adapter.all_edits() {
            worst = worst.max(orthonormality_error(&e.basis)?);
        }
        checked += 1;
        Ok(())
    })
    .unwrap();
    let el = t.elapsed();
    outcome(
        worst <= 1e-8 && checked == 500 && within(el, 60.0),
        format!("max ||RR^T - I|| = {worst:e} over {checked} steps x 8 edits (<= 1e-8), {el:.2?} (< 60 s)"),
    )
}

fn c3_locality() -> Outcome {
    let mut rng = CounterRng::new(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = 2 + rng.below(31);
        let r = 1 + rng.below(d);
        let e = random_edit(d, r, &mut rng);
        let h = random_vec(d, 3.0, &mut rng);
        let phi = e.apply_edit(&h).unwrap();
        let moved: Vec<f64> = phi.iter().zip(&h).map(|(a, b)| a - b).collect();
        let proj = rowspace_projector(&e.basis).unwrap().matvec(&moved).unwrap();
        for (m, p) in moved.iter().zip(&proj) {
            worst = worst.max((m - p).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |(I - R^T R)(phi(h) - h)| = {worst:e} over 1000 pairs (<= 1e-10)"),
    )
}

fn c4_gradients() -> Outcome {
    let t = Instant::now();
    let report = gradcheck_groups(8, 2, 2, 0).unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cmd_gradcheck(8, 2, 2, 0, &mut out, &mut err);
    let el = t.elapsed();
    let groups = report
        .groups
        .iter()
        .map(|(g, e)| format!("{g}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        report.passed() && report.groups.len() == 7 && code == 0 && within(el, 30.0),
        format!("{groups} (each <= {GRADCHECK_TOL:e}), exit {code}, {el:.2?} (< 30 s)"),
    )
}

fn c5_gating() -> Outcome {
    let mut rng = CounterRng::new(7);
    let mut alpha_ok = true;
    for trial in 0..200 {
        let router = RouterNet::init(16, 4, trial);
        let h = random_vec(16, 1.0 + (trial % 5) as f64, &mut rng);
        let a = router.route(&h).unwrap();
        alpha_ok &= a.iter().all(|&v| v > 0.0 && v < 1.0);
    }

    let tie = gate(&[0.5], GateMode::Hard, 0.5) == vec![1.0]
        && gate(&RouterNet::zeros(8, 2).route(&[1.0; 8]).unwrap(), GateMode::Hard, 0.5) == vec![1.0, 1.0];

    // Hard zero gate: perturbing the closed edit's W, b changes nothing.
    let m = model(8, 12, 6, 8);
    let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::FirstLast)];
    let mut a = Adapter::init(8, 2, 2, &sites, true, 9).unwrap();
    for e in a.all_edits_mut() {
        e.weight = e.weight.add(&Tensor::gaussian(e.weight.shape(), 0.5, &mut rng)).unwrap();
        e.bias = Tensor::gaussian(e.bias.shape(), 0.5, &mut rng);
    }
    a.router.as_mut().unwrap().b2 = Tensor::vector(vec![40.0, -40.0]);
    let tokens = vec![vec![1, 2, 3, 4], vec![7, 0, 11, 5]];
    let logits = |a: &Adapter| {
        let mut tape = Tape::new();
        let vars = a.load(&mut tape, false);
        let mut hook = vars.hook(GateMode::Hard);
        let out = m.forward_with_hooks(&mut tape, &tokens, &a.sites, &mut hook).unwrap();
        tape.value(out.logits).clone()
    };
    let before = logits(&a);
    for e in &mut a.edits[1] {
        e.weight = Tensor::gaussian(e.weight.shape(), 5.0, &mut rng);
        e.bias = Tensor::gaussian(e.bias.shape(), 5.0, &mut rng);
    }
    let independent = logits(&a) == before;

    let mut one_hot_err: f64 = 0.0;
    for _ in 0..200 {
        let edits: Vec<SubspaceEdit> = (0..3).map(|_| random_edit(12, 3, &mut rng)).collect();
        let h = random_vec(12, 2.0, &mut rng);
        for i in 0..3 {
            let mut alpha = vec![0.0; 3];
            alpha[i] = 1.0;
            let c = compose(&edits, &alpha, &h).unwrap();
            let want = edits[i].apply_edit(&h).unwrap();
            for (x, y) in c.iter().zip(&want) {
                one_hot_err = one_hot_err.max((x - y).abs());
            }
        }
    }
    outcome(
        alpha_ok && tie && independent && one_hot_err <= 1e-14,
        format!(
            "alpha in (0,1): {alpha_ok}; tie at 0.5 -> on: {tie}; hard-off edit bit-independent: {independent}; one-hot vs apply_edit = {one_hot_err:e} (<= 1e-14)"
        ),
    )
}

fn c6_decomposition() -> Outcome {
    let mut rng = CounterRng::new(10);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = 6 + rng.below(20);
        let r = 1 + rng.below(d / 2);
        let joint = random_orthonormal(2 * r, d, rng.next_u64()).unwrap();
        let edits: Vec<SubspaceEdit> = (0..2)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..r).map(|j| joint.row(i * r + j).to_vec()).collect();
                SubspaceEdit::new(
                    Tensor::from_rows(&rows).unwrap(),
                    Tensor::gaussian(&[r, d], 1.0, &mut rng),
                    Tensor::gaussian(&[r], 1.0, &mut rng),
                    HookSite::new(0, Positions::All),
                )
                .unwrap()
            })
            .collect();
        let alpha = [rng.uniform(), rng.uniform()];
        let h = random_vec(d, 2.0, &mut rng);
        let composed = compose(&edits, &alpha, &h).unwrap();
        let delta: Vec<f64> = composed.iter().zip(&h).map(|(a, b)| a - b).collect();
        for (i, e) in edits.iter().enumerate() {
            let proj = rowspace_projector(&e.basis).unwrap().matvec(&delta).unwrap();
            let want = e.edit_delta(&h).unwrap();
            for (p, w) in proj.iter().zip(&want) {
                worst = worst.max((p - alpha[i] * w).abs());
            }
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |P_i(delta) - alpha_i * delta_i| = {worst:e} over 200 trials (<= 1e-10)"),
    )
}

fn c7_benchmark() -> Outcome {
    let t = Instant::now();
    let tasks = default_suite(8, 16);
    let config = TrainConfig {
        lambda: 0.01,
        lr: 1e-2,
        steps: 2000,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let m = model(32, 20, 9, seed);
        let bench = BenchConfig {
            seed,
            ..BenchConfig::default()
        };
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let r = run_interference_benchmark(&tasks, &m, &bench, &cfg).unwrap();
        let beats_shared = r.mean_routed() <= r.mean_shared();
        let gap = r.routed_gap_to_specialists();
        let ok = beats_shared && gap <= 0.15 && r.is_finite();
        wins += usize::from(ok);
        lines.push(format!(
            "    seed {seed}: routed {:.4} shared {:.4} specialists {:.4} frozen {:.4} gap {:+.1}% budget {}/{} -> {}",
            r.mean_routed(),
            r.mean_shared(),
            r.mean_specialist(),
            r.mean_frozen(),
            100.0 * gap,
            r.params_routed.total,
            r.params_shared.total,
            if ok { "holds" } else { "fails" }
        ));
    }
    let el = t.elapsed();
    outcome(
        wins >= 4 && within(el, 600.0),
        format!(
            "ordering holds for {wins}/5 seeds (need 4), {el:.1?} (< 600 s)\n{}",
            lines.join("\n")
        ),
    )
}

fn c8_accounting() -> Outcome {
    let single = count_trainable_shapes([(1, 2)], None, 1).total;
    let router_small = count_trainable_shapes([], Some((4, 2)), 1).total;
    let wide = count_trainable_shapes([], Some((4096, 4)), 7_000_000_000);
    let wide_hand = 4096u64 * 2048 + 2048 + 2048 * 4 + 4;

    // A live configuration: 4 rank-4 edits at 2 sites plus router, d = 32.
    let m = model(32, 20, 9, 0);
    let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::All)];
    let a = Adapter::init(32, 4, 4, &sites, true, 0).unwrap();
    let edits: Vec<&SubspaceEdit> = a.all_edits().collect();
    let live = count_trainable(&edits, a.router.as_ref(), &m);
    let live_hand = 2 * 4 * (2 * 4 * 32 + 4) + (32 * 16 + 16 + 16 * 4 + 4);

    let cfg = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/wide_count.toml");
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cmd_countparams(&cfg, &Overrides::default(), &mut out, &mut err);
    let printed = String::from_utf8_lossy(&out).replace('\n', "; ");

    let reference = 7e9 * 0.0098 / 100.0;
    let pass = single == 5
        && router_small == 16
        && wide.router == wide_hand
        && router_param_count(4096, 4) == wide_hand
        && live.total == live_hand
        && edit_param_count(4, 32) == 260
        && code == 0;
    outcome(
        pass,
        format!(
            "r=1,d=2 -> {single} (5); router d=4,k=2 -> {router_small} (16); d=32,k=4,r=4,2 sites -> {} ({live_hand}); \
             router d=4096,k=4 -> {} (hand sum {wide_hand}); 0.0098% of 7e9 = {reference} params, router alone is {:.1}x that\n    countparams: {printed}",
            live.total,
            wide.router,
            wide.router as f64 / reference
        ),
    )
}

const TINY: &str = r#"
seed = 3
[backbone]
vocab_size = 10
d = 8
max_seq_len = 5
[train]
lr = 0.01
steps = 20
batch_size = 4
[adapter]
k = 2
rank = 2
positions = "all"
[data]
n_train = 16
n_eval = 8
[[tasks]]
id = 1
kind = "copy"
seq_len = 4
vocab = 8
[[tasks]]
id = 2
kind = "increment"
seq_len = 4
vocab = 8
"#;

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = |name: &str| {
        let o = Overrides {
            out: Some(dir.path().join(name)),
            ..Overrides::default()
        };
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = cmd_train(&cfg, &o, &mut out, &mut err);
        (code, std::fs::read(dir.path().join(name).join("train_log.tsv")).unwrap_or_default())
    };
    let (c1, log1) = run("a");
    let (c2, log2) = run("b");
    let logs_equal = c1 == 0 && c2 == 0 && !log1.is_empty() && log1 == log2;

    let ckpt_path = dir.path().join("a").join("checkpoint.csrf");
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let state = loaded.restore().unwrap();
    let again = dir.path().join("again.csrf");
    save_checkpoint(&Checkpoint::from_state(&state, &[]), &again).unwrap();
    let reloaded = load_checkpoint(&again).unwrap().restore().unwrap();
    let bits = |s: &TrainState| -> Vec<u64> {
        s.adapter
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .chain(s.adam.m.iter().chain(&s.adam.v).flat_map(|t| t.data().iter().map(|v| v.to_bits())))
            .collect()
    };
    let roundtrip = reloaded == state && bits(&reloaded) == bits(&state);

    let bytes = std::fs::read(&ckpt_path).unwrap();
    let truncated = matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::TruncatedFile { .. })
    );
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xFF;
    let bad_magic = matches!(Checkpoint::from_bytes(&flipped), Err(Error::BadMagic { .. }));
    let mut versioned = bytes.clone();
    versioned[4] = 9;
    let version = matches!(Checkpoint::from_bytes(&versioned), Err(Error::VersionMismatch { .. }));
    outcome(
        logs_equal && roundtrip && truncated && bad_magic && version,
        format!(
            "byte-identical logs ({} bytes): {logs_equal}; checkpoint roundtrip bit-identical: {roundtrip}; \
             truncated -> TruncatedFile: {truncated}; flipped magic -> BadMagic: {bad_magic}; version -> VersionMismatch: {version}",
            log1.len()
        ),
    )
}

fn c10_objective() -> Outcome {
    let m = model(8, 12, 9, 11);
    let tasks = default_suite(6, 8);
    let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::All)];
    let mut worst: f64 = 0.0;
    for b in 0..20u64 {
        let mut rng = CounterRng::new(derive_seed(12, &b.to_string()));
        let mut a = Adapter::init(8, 2, 4, &sites, true, b).unwrap();
        for e in a.all_edits_mut() {
            e.weight = e.weight.add(&Tensor::gaussian(e.weight.shape(), 0.3, &mut rng)).unwrap();
            e.bias = Tensor::gaussian(e.bias.shape(), 0.3, &mut rng);
        }
        let bench = BenchConfig {
            n_train: 8,
            n_eval: 1,
            seed: b,
            ..BenchConfig::default()
        };
        let data = build_task_data(&tasks, &bench).unwrap();
        let size = 1 + rng.below(12);
        let pool: Vec<&Example> = data.iter().flat_map(|t| t.train.iter()).collect();
        let batch: Vec<&Example> = (0..size).map(|_| pool[rng.below(pool.len())]).collect();
        let lambda = 10f64.powf(-3.0 + 4.0 * rng.uniform());
        let with = batch_loss(&a, &m, &batch, lambda, GateMode::Soft, false).unwrap();
        let without = batch_loss(&a, &m, &batch, 0.0, GateMode::Soft, false).unwrap();
        let alpha = with.tape.value(with.alpha[0]);
        let omega: f64 = (0..alpha.rows())
            .map(|i| alpha.row(i).iter().sum::<f64>() / alpha.cols() as f64)
            .sum::<f64>()
            / alpha.rows() as f64;
        worst = worst.max(((with.total() - without.total()) - lambda * omega).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max |L(lambda) - L(0) - lambda * mean Omega| = {worst:e} over 20 batches (<= 1e-12)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("step-0 equivalence", c1_step0_equivalence),
        ("orthonormality maintenance", c2_orthonormality),
        ("subspace locality", c3_locality),
        ("gradient correctness", c4_gradients),
        ("gating contracts", c5_gating),
        ("composition decomposition", c6_decomposition),
        ("interference benchmark", c7_benchmark),
        ("parameter accounting", c8_accounting),
        ("determinism and persistence", c9_determinism),
        ("objective decomposition", c10_objective),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id == *f) {
            continue;
        }
        let o = run();
        println!("{} {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
