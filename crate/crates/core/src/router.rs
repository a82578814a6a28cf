// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gating network and gated composition of subspace edits.
//!
//! The router is a two-layer MLP `α = σ(W₂·relu(W₁·x + b₁) + b₂)` with
//! hidden width `⌊d/2⌋`, mapping one embedding of the input to a gate per
//! edit. Composition adds each edit's delta scaled by its gate:
//! `h' = h + Σᵢ αᵢ·δᵢ(h)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::intervention::SubspaceEdit;
use crate::linalg::Tensor;
use crate::rng::CounterRng;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Soft,
    Hard,
}

impl std::str::FromStr for GateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "soft" => Ok(GateMode::Soft),
            "hard" => Ok(GateMode::Hard),
            other => Err(format!("expected `soft` or `hard`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Soft => "soft",
            GateMode::Hard => "hard",
        })
    }
}

/// Which embedding of the input the router reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInput {
    /// Hidden state of the first token.
    #[default]
    FirstToken,
    /// Mean of the hidden states over all positions.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterNet {
    /// `⌊d/2⌋ × d`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `k × ⌊d/2⌋`
    pub w2: Tensor,
    pub b2: Tensor,
    pub threshold: f64,
}

pub fn router_hidden_width(d: usize) -> usize {
    d / 2
}

pub fn router_param_count(d: usize, k: usize) -> u64 {
    let (d, k, w) = (d as u64, k as u64, router_hidden_width(d) as u64);
    d * w + w + w * k + k
}

impl RouterNet {
    /// Gaussian `N(0, 1/fan_in)` weights, zero biases.
    pub fn init(d: usize, k: usize, seed: u64) -> Self {
        let w = router_hidden_width(d);
        let mut rng = CounterRng::new(seed);
        let w1 = Tensor::gaussian(&[w, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let w2 = Tensor::gaussian(&[k, w], 1.0 / (w.max(1) as f64).sqrt(), &mut rng);
        Self {
            w1,
            b1: Tensor::zeros(&[w]),
            w2,
            b2: Tensor::zeros(&[k]),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// All parameters zero, so every gate reads exactly 0.5.
    pub fn zeros(d: usize, k: usize) -> Self {
        let w = router_hidden_width(d);
        Self {
            w1: Tensor::zeros(&[w, d]),
            b1: Tensor::zeros(&[w]),
            w2: Tensor::zeros(&[k, w]),
            b2: Tensor::zeros(&[k]),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn gates(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .map(|t| t.len() as u64)
            .sum()
    }

    /// `α = σ(W₂·relu(W₁·h + b₁) + b₂)`.
    pub fn route(&self, h_first: &[f64]) -> Result<Vec<f64>> {
        if h_first.len() != self.dim() {
            return Err(Error::shape(format!(
                "router expects length {}, got {}",
                self.dim(),
                h_first.len()
            )));
        }
        let hidden: Vec<f64> = self
            .w1
            .matvec(h_first)?
            .iter()
            .zip(self.b1.data())
            .map(|(z, b)| (z + b).max(0.0))
            .collect();
        let logits = if hidden.is_empty() {
            vec![0.0; self.gates()]
        } else {
            self.w2.matvec(&hidden)?
        };
        Ok(logits
            .iter()
            .zip(self.b2.data())
            .map(|(z, b)| sigmoid(z + b))
            .collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft gates pass through; hard gates become `1` when `α ≥ threshold`.
pub fn gate(alpha: &[f64], mode: GateMode, threshold: f64) -> Vec<f64> {
    match mode {
        GateMode::Soft => alpha.to_vec(),
        GateMode::Hard => alpha
            .iter()
            .map(|&a| if a >= threshold { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// `h + Σᵢ αᵢ·δᵢ(h)`. Gates that are exactly zero skip their edit entirely.
pub fn compose(edits: &[SubspaceEdit], alpha: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if edits.len() != alpha.len() {
        return Err(Error::shape(format!(
            "{} edits but {} gates",
            edits.len(),
            alpha.len()
        )));
    }
    let d = h.len();
    if let Some(e) = edits.iter().find(|e| e.dim() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            found: e.dim(),
        });
    }
    let mut out = h.to_vec();
    for (edit, &a) in edits.iter().zip(alpha) {
        if a == 0.0 {
            continue;
        }
        let delta = edit.edit_delta(h)?;
        for (o, v) in out.iter_mut().zip(&delta) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Tape leaves holding the router's parameters.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl RouterVars {
    pub fn load(tape: &mut Tape, router: &RouterNet, trainable: bool) -> Self {
        Self {
            w1: tape.leaf(router.w1.clone(), trainable),
            b1: tape.leaf(router.b1.clone(), trainable),
            w2: tape.leaf(router.w2.clone(), trainable),
            b2: tape.leaf(router.b2.clone(), trainable),
        }
    }

    /// Gates for a `[B, d]` batch of router inputs; returns `[B, k]`.
    pub fn route(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w1t = tape.transpose(self.w1)?;
        let z1 = tape.matmul(x, w1t)?;
        let z1 = tape.add(z1, self.b1)?;
        let a1 = tape.relu(z1)?;
        let w2t = tape.transpose(self.w2)?;
        let z2 = tape.matmul(a1, w2t)?;
        let z2 = tape.add(z2, self.b2)?;
        tape.sigmoid(z2)
    }
}
