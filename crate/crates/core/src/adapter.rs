// SPDX-License-Identifier: MIT OR Apache-2.0

//! The trainable bundle attached to a frozen model: one set of subspace
//! edits per gate (one edit per hook site) plus an optional router.
//!
//! Without a router every gate is fixed at 1, which covers the single
//! shared edit and per-task specialists. With a router, one gate vector is
//! computed per sequence from the pre-edit residual stream at the first
//! hook site visited, then reused at every site and position.

use crate::autodiff::{NodeId, Tape};
use crate::backbone::{HookContext, HookFn, HookSite};
use crate::error::{Error, Result};
use crate::intervention::{EditVars, SubspaceEdit};
use crate::linalg::Tensor;
use crate::rng::derive_seed;
use crate::router::{gate, GateMode, RouterInput, RouterNet, RouterVars};

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub sites: Vec<HookSite>,
    /// `edits[gate][site]`.
    pub edits: Vec<Vec<SubspaceEdit>>,
    pub router: Option<RouterNet>,
    pub router_input: RouterInput,
}

impl Adapter {
    /// Identity-initialized edits of rank `rank` for `gates` gates at every
    /// site, with a freshly initialized router when `routed` is set.
    pub fn init(
        d: usize,
        rank: usize,
        gates: usize,
        sites: &[HookSite],
        routed: bool,
        seed: u64,
    ) -> Result<Self> {
        if gates == 0 {
            return Err(Error::config("adapter.k", "need at least one edit"));
        }
        if sites.is_empty() {
            return Err(Error::config("adapter.layers", "need at least one hook site"));
        }
        let edits = (0..gates)
            .map(|g| {
                sites
                    .iter()
                    .enumerate()
                    .map(|(s, site)| {
                        let seed = derive_seed(seed, &format!("edit.{g}.{s}"));
                        SubspaceEdit::identity_init(rank, d, site.clone(), seed)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let router = routed.then(|| RouterNet::init(d, gates, derive_seed(seed, "router")));
        Ok(Self {
            sites: sites.to_vec(),
            edits,
            router,
            router_input: RouterInput::default(),
        })
    }

    pub fn gates(&self) -> usize {
        self.edits.len()
    }

    pub fn dim(&self) -> usize {
        self.edits[0][0].dim()
    }

    /// Parameter tensors in a fixed order with stable names. The optimizer
    /// and checkpoints both rely on this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (g, per_site) in self.edits.iter().enumerate() {
            for (s, e) in per_site.iter().enumerate() {
                out.push((format!("edit.{g}.{s}.basis"), &e.basis));
                out.push((format!("edit.{g}.{s}.weight"), &e.weight));
                out.push((format!("edit.{g}.{s}.bias"), &e.bias));
            }
        }
        if let Some(r) = &self.router {
            out.push(("router.w1".into(), &r.w1));
            out.push(("router.b1".into(), &r.b1));
            out.push(("router.w2".into(), &r.w2));
            out.push(("router.b2".into(), &r.b2));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for per_site in &mut self.edits {
            for e in per_site {
                out.push(&mut e.basis);
                out.push(&mut e.weight);
                out.push(&mut e.bias);
            }
        }
        if let Some(r) = &mut self.router {
            out.push(&mut r.w1);
            out.push(&mut r.b1);
            out.push(&mut r.w2);
            out.push(&mut r.b2);
        }
        out
    }

    pub fn all_edits(&self) -> impl Iterator<Item = &SubspaceEdit> {
        self.edits.iter().flatten()
    }

    pub fn all_edits_mut(&mut self) -> impl Iterator<Item = &mut SubspaceEdit> {
        self.edits.iter_mut().flatten()
    }

    /// Put every parameter on `tape`.
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let edits = self
            .edits
            .iter()
            .map(|per_site| {
                per_site
                    .iter()
                    .map(|e| EditVars::load(tape, e, trainable))
                    .collect()
            })
            .collect();
        let router = self
            .router
            .as_ref()
            .map(|r| (RouterVars::load(tape, r, trainable), r.threshold));
        AdapterVars {
            edits,
            router,
            router_input: self.router_input,
        }
    }

    /// Bind existing tape nodes, given in [`Adapter::named_params`] order,
    /// as this adapter's parameters.
    pub fn vars_from_ids(&self, ids: &[NodeId]) -> Result<AdapterVars> {
        let want = self.named_params().len();
        if ids.len() != want {
            return Err(Error::DimMismatch {
                expected: want,
                found: ids.len(),
            });
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked");
        let edits = self
            .edits
            .iter()
            .map(|per_site| {
                per_site
                    .iter()
                    .map(|_| EditVars {
                        basis: next(),
                        weight: next(),
                        bias: next(),
                    })
                    .collect()
            })
            .collect();
        let router = self.router.as_ref().map(|r| {
            let vars = RouterVars {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            };
            (vars, r.threshold)
        });
        Ok(AdapterVars {
            edits,
            router,
            router_input: self.router_input,
        })
    }
}

/// Tape handles for an [`Adapter`]'s parameters.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub edits: Vec<Vec<EditVars>>,
    pub router: Option<(RouterVars, f64)>,
    pub router_input: RouterInput,
}

impl AdapterVars {
    /// Leaf ids in [`Adapter::named_params`] order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for per_site in &self.edits {
            for e in per_site {
                out.extend([e.basis, e.weight, e.bias]);
            }
        }
        if let Some((r, _)) = &self.router {
            out.extend([r.w1, r.b1, r.w2, r.b2]);
        }
        out
    }

    pub fn hook(&self, mode: GateMode) -> ComposeHook<'_> {
        ComposeHook {
            vars: self,
            mode,
            alpha: None,
            applied: None,
        }
    }
}

/// [`HookFn`] that applies `h + Σᵢ αᵢ·δᵢ(h)` at each site.
pub struct ComposeHook<'a> {
    vars: &'a AdapterVars,
    mode: GateMode,
    alpha: Option<NodeId>,
    applied: Option<NodeId>,
}

impl ComposeHook<'_> {
    /// Router output `[B, k]` before any thresholding, once computed.
    pub fn alpha(&self) -> Option<NodeId> {
        self.alpha
    }

    /// Gates actually multiplied into the deltas (thresholded in hard mode).
    pub fn applied_gates(&self) -> Option<NodeId> {
        self.applied
    }

    fn router_features(&self, tape: &mut Tape, ctx: &HookContext<'_>) -> Result<NodeId> {
        let (b, n) = (ctx.batch, ctx.seq_len);
        match self.vars.router_input {
            RouterInput::FirstToken => tape.embedding(ctx.full, (0..b).map(|i| i * n).collect()),
            RouterInput::MeanPool => {
                let mut pool = Tensor::zeros(&[b, b * n]);
                for i in 0..b {
                    pool.row_mut(i)[i * n..(i + 1) * n]
                        .iter_mut()
                        .for_each(|v| *v = 1.0 / n as f64);
                }
                let pool = tape.constant(pool);
                tape.matmul(pool, ctx.full)
            }
        }
    }
}

impl HookFn for ComposeHook<'_> {
    fn on_site(&mut self, tape: &mut Tape, ctx: &HookContext<'_>, h: NodeId) -> Result<NodeId> {
        let site = ctx.index;
        if site >= self.vars.edits[0].len() {
            return Err(Error::Hook(format!("no edits registered for site {site}")));
        }
        let gates = match &self.vars.router {
            None => None,
            Some((router, threshold)) => {
                if self.applied.is_none() {
                    let x = self.router_features(tape, ctx)?;
                    let alpha = router.route(tape, x)?;
                    self.alpha = Some(alpha);
                    self.applied = Some(match self.mode {
                        GateMode::Soft => alpha,
                        GateMode::Hard => {
                            let v = tape.value(alpha);
                            let hard = gate(v.data(), GateMode::Hard, *threshold);
                            tape.constant(Tensor::new(v.shape().to_vec(), hard)?)
                        }
                    });
                }
                let applied = self.applied.expect("set above");
                Some(tape.embedding(applied, ctx.seq_of_row.to_vec())?)
            }
        };

        let mut out = h;
        for (g, per_site) in self.vars.edits.iter().enumerate() {
            let vars = &per_site[site];
            match gates {
                None => {
                    let delta = vars.delta(tape, h)?;
                    out = tape.add(out, delta)?;
                }
                Some(rows) => {
                    let col = tape.slice(rows, 1, g, g + 1)?;
                    if self.mode == GateMode::Hard && tape.value(col).data().iter().all(|&a| a == 0.0) {
                        continue;
                    }
                    let delta = vars.delta(tape, h)?;
                    let scaled = tape.mul(delta, col)?;
                    out = tape.add(out, scaled)?;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, FrozenModel, Positions};
    use crate::rng::CounterRng;
    use crate::router::compose;

    fn model() -> FrozenModel {
        FrozenModel::build(BackboneConfig {
            vocab_size: 12,
            d: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 6,
            seed: 2,
        })
        .unwrap()
    }

    fn perturbed(mut a: Adapter, seed: u64) -> Adapter {
        let mut rng = CounterRng::new(seed);
        for e in a.all_edits_mut() {
            e.weight = e.weight.add(&Tensor::gaussian(e.weight.shape(), 0.5, &mut rng)).unwrap();
            e.bias = Tensor::gaussian(e.bias.shape(), 0.5, &mut rng);
        }
        a
    }

    #[test]
    fn tape_composition_matches_plain_compose_at_single_site() {
        let m = model();
        let sites = vec![HookSite::new(0, Positions::All)];
        let a = perturbed(Adapter::init(8, 2, 3, &sites, true, 1).unwrap(), 4);
        let tokens = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];

        let mut tape = Tape::new();
        let vars = a.load(&mut tape, false);
        let mut hook = vars.hook(GateMode::Soft);
        let out = m.forward_with_hooks(&mut tape, &tokens, &a.sites, &mut hook).unwrap();
        let pre = tape.value(out.hidden_log[0].1).clone();
        let alpha = tape.value(hook.alpha().unwrap()).clone();

        // Re-run with a recording hook to see the post-edit rows.
        let mut post = None;
        let mut tape2 = Tape::new();
        let vars2 = a.load(&mut tape2, false);
        let mut inner = vars2.hook(GateMode::Soft);
        let mut rec = |t: &mut Tape, c: &HookContext<'_>, h: NodeId| {
            let y = inner.on_site(t, c, h)?;
            post = Some(t.value(y).clone());
            Ok(y)
        };
        m.forward_with_hooks(&mut tape2, &tokens, &a.sites, &mut rec).unwrap();
        let post = post.unwrap();

        let edits: Vec<SubspaceEdit> = a.edits.iter().map(|p| p[0].clone()).collect();
        for row in 0..8 {
            let seq = row / 4;
            let first = pre.row(seq * 4);
            let plain_alpha = a.router.as_ref().unwrap().route(first).unwrap();
            for (x, y) in plain_alpha.iter().zip(alpha.row(seq)) {
                assert!((x - y).abs() < 1e-14);
            }
            let want = compose(&edits, &plain_alpha, pre.row(row)).unwrap();
            for (x, y) in want.iter().zip(post.row(row)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_zero_gate_makes_output_independent_of_that_edit() {
        let m = model();
        let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::FirstLast)];
        let mut a = perturbed(Adapter::init(8, 2, 2, &sites, true, 3).unwrap(), 5);
        let r = a.router.as_mut().unwrap();
        r.b2 = Tensor::vector(vec![50.0, -50.0]);
        let tokens = vec![vec![1, 2, 3], vec![9, 0, 4]];

        let run = |a: &Adapter| {
            let mut tape = Tape::new();
            let vars = a.load(&mut tape, false);
            let mut hook = vars.hook(GateMode::Hard);
            let out = m.forward_with_hooks(&mut tape, &tokens, &a.sites, &mut hook).unwrap();
            tape.value(out.logits).clone()
        };
        let before = run(&a);
        for e in &mut a.edits[1] {
            e.weight = e.weight.scale(-7.0);
            e.bias = Tensor::full(e.bias.shape(), 123.0);
        }
        assert_eq!(run(&a), before);
    }

    #[test]
    fn param_ids_follow_named_param_order() {
        let sites = vec![HookSite::new(0, Positions::All), HookSite::new(1, Positions::All)];
        let a = Adapter::init(8, 2, 2, &sites, true, 0).unwrap();
        let mut tape = Tape::new();
        let vars = a.load(&mut tape, true);
        let ids = vars.param_ids();
        let named = a.named_params();
        assert_eq!(ids.len(), named.len());
        for (id, (_, t)) in ids.iter().zip(&named) {
            assert_eq!(tape.value(*id), *t);
        }
    }
}
