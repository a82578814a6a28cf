// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank subspace edits of hidden states.
//!
//! An edit with orthonormal basis rows `R` (`r×d`), target map `W` (`r×d`)
//! and offset `b` (length `r`) replaces the coordinates of `h` inside
//! `rowspace(R)` with `W·h + b`:
//!
//! ```text
//! Φ(h) = h + Rᵀ(W·h + b − R·h)
//! ```
//!
//! The delta always lies in `rowspace(R)`; the orthogonal complement of the
//! subspace passes through untouched.

use crate::autodiff::{NodeId, Tape};
use crate::backbone::HookSite;
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_rows, random_orthonormal, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceEdit {
    /// `R`, `r×d` with orthonormal rows.
    pub basis: Tensor,
    /// `W`, `r×d`.
    pub weight: Tensor,
    /// `b`, length `r`.
    pub bias: Tensor,
    pub site: HookSite,
}

impl SubspaceEdit {
    pub fn new(basis: Tensor, weight: Tensor, bias: Tensor, site: HookSite) -> Result<Self> {
        let (r, d) = match basis.shape() {
            [r, d] => (*r, *d),
            s => return Err(Error::shape(format!("edit basis must be a matrix, got {s:?}"))),
        };
        if r > d {
            return Err(Error::shape(format!("edit rank {r} exceeds dimension {d}")));
        }
        if weight.shape() != basis.shape() || bias.shape() != [r] {
            return Err(Error::shape(format!(
                "edit shapes disagree: R {:?}, W {:?}, b {:?}",
                basis.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            basis,
            weight,
            bias,
            site,
        })
    }

    /// Edit that starts as the identity map: `R` random orthonormal,
    /// `W = R`, `b = 0`.
    pub fn identity_init(r: usize, d: usize, site: HookSite, seed: u64) -> Result<Self> {
        let basis = random_orthonormal(r, d, seed)?;
        let weight = basis.clone();
        Self::new(basis, weight, Tensor::zeros(&[r]), site)
    }

    pub fn rank(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.basis.shape()[1]
    }

    /// `2·r·d + r`; the basis and the map are both trained.
    pub fn param_count(&self) -> u64 {
        edit_param_count(self.rank(), self.dim())
    }

    fn check_len(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::shape(format!(
                "hidden vector has length {}, edit expects {}",
                h.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Subspace coordinates the edit writes, minus the ones already there:
    /// `W·h + b − R·h`.
    fn coord_shift(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_len(h)?;
        let wh = self.weight.matvec(h)?;
        let rh = self.basis.matvec(h)?;
        Ok(wh
            .iter()
            .zip(self.bias.data())
            .zip(&rh)
            .map(|((w, b), r)| (w + b) - r)
            .collect())
    }

    /// `Rᵀ(W·h + b − R·h)`.
    pub fn edit_delta(&self, h: &[f64]) -> Result<Vec<f64>> {
        let shift = self.coord_shift(h)?;
        self.basis.t_matvec(&shift)
    }

    /// `Φ(h) = h + edit_delta(h)`.
    pub fn apply_edit(&self, h: &[f64]) -> Result<Vec<f64>> {
        let delta = self.edit_delta(h)?;
        Ok(h.iter().zip(&delta).map(|(a, b)| a + b).collect())
    }

    /// Re-orthonormalize `R` in place. `W` and `b` are untouched.
    pub fn retract(&mut self) -> Result<()> {
        self.basis = orthonormalize_rows(&self.basis)?;
        Ok(())
    }
}

pub fn edit_param_count(rank: usize, dim: usize) -> u64 {
    let (r, d) = (rank as u64, dim as u64);
    2 * r * d + r
}

/// Tape leaves holding one edit's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EditVars {
    pub basis: NodeId,
    pub weight: NodeId,
    pub bias: NodeId,
}

impl EditVars {
    pub fn load(tape: &mut Tape, edit: &SubspaceEdit, trainable: bool) -> Self {
        Self {
            basis: tape.leaf(edit.basis.clone(), trainable),
            weight: tape.leaf(edit.weight.clone(), trainable),
            bias: tape.leaf(edit.bias.clone(), trainable),
        }
    }

    /// Row-wise edit delta for `h` of shape `[m, d]`, computed as
    /// `(h·Wᵀ + b − h·Rᵀ)·R`.
    pub fn delta(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let wt = tape.transpose(self.weight)?;
        let rt = tape.transpose(self.basis)?;
        let hw = tape.matmul(h, wt)?;
        let target = tape.add(hw, self.bias)?;
        let hr = tape.matmul(h, rt)?;
        let shift = tape.sub(target, hr)?;
        tape.matmul(shift, self.basis)
    }

    pub fn apply(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let delta = self.delta(tape, h)?;
        tape.add(h, delta)
    }
}
