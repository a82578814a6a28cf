// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small frozen pre-LN transformer with hook sites on the post-block
//! residual stream.
//!
//! Sequences in a batch share one length `n` and are stacked row-wise into
//! an `[B·n, d]` residual matrix. Attention uses a block-diagonal causal
//! mask so positions never see other sequences or their own future.
//!
//! At a hook site the callback receives the rows selected by the site's
//! positions (gathered as an `[m, d]` matrix) and returns replacement rows,
//! which are scattered back before the next layer runs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            d: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("backbone.{name}"), "must be at least 1"));
            }
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config(
                "backbone.n_heads",
                format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`FrozenModel`] for this config.
    pub fn param_count(&self) -> u64 {
        let (v, d, l, t) = (
            self.vocab_size as u64,
            self.d as u64,
            self.n_layers as u64,
            self.max_seq_len as u64,
        );
        // embeddings + blocks + final norm + unembedding
        v * d + t * d + l * (12 * d * d + 9 * d) + 2 * d + d * v
    }
}

/// Which token positions of each sequence a hook edits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum Positions {
    All,
    /// First and last token (a single position for length-1 sequences).
    #[default]
    FirstLast,
    Indices(Vec<usize>),
}

impl Positions {
    /// Concrete sorted, de-duplicated positions for a sequence of length `n`.
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let mut out = match self {
            Positions::All => (0..n).collect(),
            Positions::FirstLast => vec![0, n.saturating_sub(1)],
            Positions::Indices(ix) => {
                if let Some(bad) = ix.iter().find(|&&p| p >= n) {
                    return Err(Error::Hook(format!(
                        "position {bad} outside sequence of length {n}"
                    )));
                }
                ix.clone()
            }
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PositionsRepr {
    Named(String),
    List(Vec<usize>),
}

impl Serialize for Positions {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Positions::All => PositionsRepr::Named("all".into()),
            Positions::FirstLast => PositionsRepr::Named("first_last".into()),
            Positions::Indices(ix) => PositionsRepr::List(ix.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Positions {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PositionsRepr::deserialize(d)? {
            PositionsRepr::Named(s) if s == "all" => Ok(Positions::All),
            PositionsRepr::Named(s) if s == "first_last" => Ok(Positions::FirstLast),
            PositionsRepr::Named(s) => Err(serde::de::Error::custom(format!(
                "expected \"all\", \"first_last\" or a list of indices, got {s:?}"
            ))),
            PositionsRepr::List(ix) => Ok(Positions::Indices(ix)),
        }
    }
}

/// A location in the residual stream: the output of block `layer`, at the
/// given token positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub positions: Positions,
}

impl HookSite {
    pub fn new(layer: usize, positions: Positions) -> Self {
        Self { layer, positions }
    }
}

/// What a hook callback sees besides the hooked rows themselves.
#[derive(Debug)]
pub struct HookContext<'a> {
    /// Index of the site in the list passed to the forward pass.
    pub index: usize,
    pub site: &'a HookSite,
    /// Pre-edit residual stream of the whole batch, `[B·n, d]`.
    pub full: NodeId,
    /// Rows of `full` that were gathered for the callback.
    pub rows: &'a [usize],
    /// Sequence index of each gathered row.
    pub seq_of_row: &'a [usize],
    pub batch: usize,
    pub seq_len: usize,
}

/// Receives gathered hidden rows at a hook site and returns replacements.
pub trait HookFn {
    fn on_site(&mut self, tape: &mut Tape, ctx: &HookContext<'_>, h: NodeId) -> Result<NodeId>;
}

impl<F> HookFn for F
where
    F: FnMut(&mut Tape, &HookContext<'_>, NodeId) -> Result<NodeId>,
{
    fn on_site(&mut self, tape: &mut Tape, ctx: &HookContext<'_>, h: NodeId) -> Result<NodeId> {
        self(tape, ctx, h)
    }
}

type BoxedHook<'a> = Box<dyn FnMut(&mut Tape, &HookContext<'_>, NodeId) -> Result<NodeId> + 'a>;

/// A list of `(site, callback)` pairs usable as a single [`HookFn`].
#[derive(Default)]
pub struct HookList<'a> {
    entries: Vec<(HookSite, BoxedHook<'a>)>,
}

impl<'a> HookList<'a> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(
        &mut self,
        site: HookSite,
        f: impl FnMut(&mut Tape, &HookContext<'_>, NodeId) -> Result<NodeId> + 'a,
    ) -> &mut Self {
        self.entries.push((site, Box::new(f)));
        self
    }

    pub fn sites(&self) -> Vec<HookSite> {
        self.entries.iter().map(|(s, _)| s.clone()).collect()
    }
}

impl HookFn for HookList<'_> {
    fn on_site(&mut self, tape: &mut Tape, ctx: &HookContext<'_>, h: NodeId) -> Result<NodeId> {
        (self.entries[ctx.index].1)(tape, ctx, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

/// Frozen transformer weights. Matrices are stored `[in, out]` so a layer
/// computes `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    config: BackboneConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    lnf_gain: Tensor,
    lnf_bias: Tensor,
    unembed: Tensor,
}

/// Result of a hooked forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B·n, vocab]` logits.
    pub logits: NodeId,
    /// Pre-edit residual stream at each hook site, `[B·n, d]`, in site order.
    pub hidden_log: Vec<(HookSite, NodeId)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl FrozenModel {
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(config.seed);
        let d = config.d;
        let w = |rows: usize, cols: usize, rng: &mut CounterRng| {
            Tensor::gaussian(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
        };
        let tok_emb = Tensor::gaussian(&[config.vocab_size, d], 1.0, &mut rng);
        let pos_emb = Tensor::gaussian(&[config.max_seq_len, d], 1.0, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: w(d, d, &mut rng),
                w_k: w(d, d, &mut rng),
                w_v: w(d, d, &mut rng),
                w_o: w(d, d, &mut rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: w(d, 4 * d, &mut rng),
                b_up: Tensor::zeros(&[4 * d]),
                w_down: w(4 * d, d, &mut rng),
                b_down: Tensor::zeros(&[d]),
            })
            .collect();
        let unembed = w(d, config.vocab_size, &mut rng);
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            unembed,
            config,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Every weight tensor with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w_up", &b.w_up),
                ("b_up", &b.b_up),
                ("w_down", &b.w_down),
                ("b_down", &b.b_down),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// FNV-1a over the bit patterns of every weight, in name order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let n = tokens.first().map(Vec::len).unwrap_or(0);
        if tokens.is_empty() || n == 0 {
            return Err(Error::shape("forward needs at least one non-empty sequence"));
        }
        if tokens.iter().any(|s| s.len() != n) {
            return Err(Error::shape("all sequences in a batch must share one length"));
        }
        if n > self.config.max_seq_len {
            return Err(Error::shape(format!(
                "sequence length {n} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = tokens.iter().flatten().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(n)
    }

    /// `layernorm(x) * gain + bias`.
    fn norm(tape: &mut Tape, x: NodeId, gain: &Tensor, bias: &Tensor) -> Result<NodeId> {
        let g = tape.constant(gain.clone());
        let b = tape.constant(bias.clone());
        let y = tape.layernorm(x)?;
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }

    fn linear(tape: &mut Tape, x: NodeId, w: &Tensor, b: Option<&Tensor>) -> Result<NodeId> {
        let w = tape.constant(w.clone());
        let y = tape.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = tape.constant(b.clone());
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Tanh approximation of GELU built from tape primitives.
    fn gelu(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let x2 = tape.mul(x, x)?;
        let x3 = tape.mul(x2, x)?;
        let c3 = tape.scale(x3, 0.044_715)?;
        let inner = tape.add(x, c3)?;
        let inner = tape.scale(inner, GELU_C)?;
        let t = tape.tanh(inner)?;
        let one = tape.constant(Tensor::scalar(1.0));
        let t1 = tape.add(t, one)?;
        let half = tape.scale(x, 0.5)?;
        tape.mul(half, t1)
    }

    fn attention(&self, tape: &mut Tape, x: NodeId, block: &Block, seq_len: usize) -> Result<NodeId> {
        let heads = self.config.n_heads;
        let dh = self.config.d / heads;
        let q = Self::linear(tape, x, &block.w_q, None)?;
        let k = Self::linear(tape, x, &block.w_k, None)?;
        let v = Self::linear(tape, x, &block.w_v, None)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let s = tape.causal_mask(s, seq_len)?;
            let p = tape.softmax(s)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        Self::linear(tape, o, &block.w_o, None)
    }

    fn block(&self, tape: &mut Tape, x: NodeId, block: &Block, seq_len: usize) -> Result<NodeId> {
        let a = Self::norm(tape, x, &block.ln1_gain, &block.ln1_bias)?;
        let attn = self.attention(tape, a, block, seq_len)?;
        let x = tape.add(x, attn)?;
        let m = Self::norm(tape, x, &block.ln2_gain, &block.ln2_bias)?;
        let m = Self::linear(tape, m, &block.w_up, Some(&block.b_up))?;
        let m = Self::gelu(tape, m)?;
        let m = Self::linear(tape, m, &block.w_down, Some(&block.b_down))?;
        tape.add(x, m)
    }

    /// Run the model on `tokens`, handing each hook site's rows to `hook`.
    ///
    /// Weights enter the tape as constants, so gradients only reach nodes
    /// the hook introduces.
    pub fn forward_with_hooks(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<usize>],
        sites: &[HookSite],
        hook: &mut dyn HookFn,
    ) -> Result<ForwardOutput> {
        let n = self.check_tokens(tokens)?;
        let batch = tokens.len();
        for site in sites {
            if site.layer >= self.config.n_layers {
                return Err(Error::Hook(format!(
                    "hook layer {} outside [0, {})",
                    site.layer, self.config.n_layers
                )));
            }
        }
        let resolved: Vec<Vec<usize>> = sites
            .iter()
            .map(|s| s.positions.resolve(n))
            .collect::<Result<_>>()?;

        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let tok_table = tape.constant(self.tok_emb.clone());
        let pos_table = tape.constant(self.pos_emb.clone());
        let te = tape.embedding(tok_table, ids)?;
        let pe = tape.embedding(pos_table, pos_ids)?;
        let mut x = tape.add(te, pe)?;

        let mut hidden_log: Vec<Option<NodeId>> = vec![None; sites.len()];
        for (layer, block) in self.blocks.iter().enumerate() {
            x = self.block(tape, x, block, n)?;
            for (index, site) in sites.iter().enumerate().filter(|(_, s)| s.layer == layer) {
                hidden_log[index] = Some(x);
                let positions = &resolved[index];
                let mut rows = Vec::with_capacity(batch * positions.len());
                let mut seq_of_row = Vec::with_capacity(rows.capacity());
                for b in 0..batch {
                    for &p in positions {
                        rows.push(b * n + p);
                        seq_of_row.push(b);
                    }
                }
                let h = tape.embedding(x, rows.clone())?;
                let ctx = HookContext {
                    index,
                    site,
                    full: x,
                    rows: &rows,
                    seq_of_row: &seq_of_row,
                    batch,
                    seq_len: n,
                };
                let edited = hook.on_site(tape, &ctx, h)?;
                let want = [rows.len(), self.config.d];
                if tape.value(edited).shape() != want {
                    return Err(Error::Hook(format!(
                        "callback at layer {layer} returned shape {:?}, expected {want:?}",
                        tape.value(edited).shape()
                    )));
                }
                x = tape.scatter_rows(x, rows, edited)?;
            }
        }
        let hidden_log = sites
            .iter()
            .cloned()
            .zip(hidden_log.into_iter().map(|h| h.expect("every site visited")))
            .collect();

        let f = Self::norm(tape, x, &self.lnf_gain, &self.lnf_bias)?;
        let logits = Self::linear(tape, f, &self.unembed, None)?;
        Ok(ForwardOutput { logits, hidden_log })
    }

    /// Plain forward pass without hooks; returns `[B·n, vocab]` logits.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut none = |_: &mut Tape, _: &HookContext<'_>, h: NodeId| Ok(h);
        let out = self.forward_with_hooks(&mut tape, tokens, &[], &mut none)?;
        Ok(tape.value(out.logits).clone())
    }
}
