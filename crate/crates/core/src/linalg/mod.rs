// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors and the row-orthonormalization primitives behind the
//! subspace constraint `R·Rᵀ = I`.

mod tensor;

pub use tensor::Tensor;
pub(crate) use tensor::{axpy, dot, matmul_into};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Residual row norm below which the input is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Orthonormalize the rows of an `r×d` matrix with modified Gram–Schmidt.
///
/// Rows are processed in order; each row is orthogonalized against the
/// already-accepted rows twice (one re-orthogonalization pass), then
/// normalized. The row space is preserved and the result is a pure function
/// of the input.
pub fn orthonormalize_rows(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::shape(format!(
            "orthonormalize_rows: expected a matrix, got {:?}",
            m.shape()
        )));
    }
    let (r, d) = (m.shape()[0], m.shape()[1]);
    if r > d {
        return Err(Error::shape(format!(
            "orthonormalize_rows: {r} rows cannot be orthonormal in dimension {d}"
        )));
    }
    let mut q = m.clone();
    for i in 0..r {
        let (done, rest) = q.data_mut().split_at_mut(i * d);
        let row = &mut rest[..d];
        for _pass in 0..2 {
            for j in 0..i {
                let prev = &done[j * d..(j + 1) * d];
                let c = dot(prev, row);
                axpy(-c, prev, row);
            }
        }
        let norm = dot(row, row).sqrt();
        if !(norm >= RANK_TOL) {
            return Err(Error::RankDeficient { row: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(q)
}

/// Seeded `r×d` matrix with orthonormal rows: Gaussian draw, then
/// [`orthonormalize_rows`].
pub fn random_orthonormal(r: usize, d: usize, seed: u64) -> Result<Tensor> {
    if r == 0 || r > d {
        return Err(Error::shape(format!(
            "random_orthonormal: need 1 <= r <= d, got r={r}, d={d}"
        )));
    }
    let mut rng = CounterRng::new(seed);
    loop {
        let g = Tensor::gaussian(&[r, d], 1.0, &mut rng);
        match orthonormalize_rows(&g) {
            // A singular Gaussian draw has probability zero; redraw from the
            // same stream if it ever happens.
            Err(Error::RankDeficient { .. }) => continue,
            other => return other,
        }
    }
}

/// Orthogonal projector `RᵀR` onto the row space of `R`.
pub fn rowspace_projector(r: &Tensor) -> Result<Tensor> {
    if r.rank() != 2 {
        return Err(Error::shape(format!(
            "rowspace_projector: expected a matrix, got {:?}",
            r.shape()
        )));
    }
    r.transpose()?.matmul(r)
}

/// `max |R·Rᵀ − I|`.
pub fn orthonormality_error(r: &Tensor) -> Result<f64> {
    let gram = r.matmul(&r.transpose()?)?;
    gram.max_abs_diff(&Tensor::eye(gram.rows()))
}
