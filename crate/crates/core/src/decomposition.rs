//! Bit-sharing decomposition.
//!
//! For a ladder `b_1 < ... < b_K` with `b_j = gamma_j * b_{j-1}`, the grid of
//! every rung is contained in the grid of the next one. A `b_K`-bit code can
//! then be written as the `b_1`-bit code plus offsets
//! `r_j = D(z - z_{j-1}, s_j)`, each offset quantizing the residual left by
//! the running partial sum.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quantizer::{discretize_value, step_size, BitLadder};
use crate::tensor::Tensor;

/// Lowest-rung codes plus one re-assignment offset per higher rung.
#[derive(Debug, Clone, PartialEq)]
pub struct BitDecomposition {
    pub base: Tensor,
    pub offsets: Vec<Tensor>,
    pub ladder: BitLadder,
}

impl BitDecomposition {
    /// Partial sum through rung `j` (0-based): `z_{b_1} + r_{b_2} + ... + r_{b_{j+1}}`.
    pub fn prefix(&self, j: usize) -> Tensor {
        let mut acc = self.base.clone();
        for r in &self.offsets[..j] {
            acc.add_assign_scaled(r, 1.0);
        }
        acc
    }

    /// All partial sums, lowest rung first.
    pub fn prefixes(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.ladder.len());
        let mut acc = self.base.clone();
        out.push(acc.clone());
        for r in &self.offsets {
            acc.add_assign_scaled(r, 1.0);
            out.push(acc.clone());
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor {
        self.prefix(self.offsets.len())
    }
}

/// Split `z` into the lowest-rung code and recursive offsets.
///
/// Each offset is computed from the residual of the running partial sum, not
/// by re-discretizing `z` at the higher rung.
pub fn decompose(z: &Tensor, ladder: &BitLadder) -> BitDecomposition {
    let steps = ladder.step_sizes();
    let base = z.map(|v| discretize_value(v, steps[0]));
    let mut partial = base.clone();
    let mut offsets = Vec::with_capacity(steps.len() - 1);
    for &s in &steps[1..] {
        let r = z
            .zip_map(&partial, |v, p| discretize_value(v - p, s))
            .expect("same shape");
        partial.add_assign_scaled(&r, 1.0);
        offsets.push(r);
    }
    BitDecomposition {
        base,
        offsets,
        ladder: ladder.clone(),
    }
}

/// Whether each rung's code set lies on the next rung's grid.
pub fn verify_grid_subset(ladder: &BitLadder) -> bool {
    ladder.bits().windows(2).all(|w| {
        let (coarse, fine) = (step_size(w[0]), step_size(w[1]));
        let levels = (1u64 << w[0]) - 1;
        (0..=levels).all(|k| {
            let pos = (k as f64 * coarse) / fine;
            (pos - pos.round()).abs() <= 1e-12 * pos.max(1.0)
        })
    })
}

/// Normalized quantization errors per rung and the bound on their changes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSeries {
    /// `eps_K = |z - z_{b_K}|_1 / |z|_1` for each rung.
    pub errors: Vec<f64>,
    /// `C / (2^{b_K} - 1)` bounding `|eps_K - eps_{K+1}|`, one per adjacent pair.
    pub bounds: Vec<f64>,
    /// `C = d / |z|_1`.
    pub c: f64,
}

impl ErrorSeries {
    pub fn changes(&self) -> Vec<f64> {
        self.errors
            .windows(2)
            .map(|w| (w[0] - w[1]).abs())
            .collect()
    }

    pub fn bound_violations(&self) -> usize {
        self.changes()
            .iter()
            .zip(&self.bounds)
            .filter(|(c, b)| c > b)
            .count()
    }

    pub fn is_non_increasing(&self) -> bool {
        self.errors.windows(2).all(|w| w[1] <= w[0])
    }
}

pub fn quant_error_series(z: &Tensor, ladder: &BitLadder) -> Result<ErrorSeries> {
    let norm = z.l1_norm();
    if norm == 0.0 {
        return Err(Error::invalid(
            "z",
            "all-zero input leaves the error bound undefined",
        ));
    }
    let c = z.len() as f64 / norm;
    let errors = decompose(z, ladder)
        .prefixes()
        .iter()
        .map(|p| {
            z.zip_map(p, |a, b| (a - b).abs())
                .expect("same shape")
                .sum()
                / norm
        })
        .collect();
    let bounds = ladder.bits()[..ladder.len() - 1]
        .iter()
        .map(|&b| c * step_size(b))
        .collect();
    Ok(ErrorSeries { errors, bounds, c })
}
