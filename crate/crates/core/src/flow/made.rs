//! Autoregressive structure of the single-layer MADE blocks.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::math::{exp, tanh};

/// Coordinate ordering of block `b`: natural for even blocks, reversed for odd.
pub fn ordering(dim: usize, block: usize) -> Vec<usize> {
    if block.is_multiple_of(2) {
        (0..dim).collect()
    } else {
        (0..dim).rev().collect()
    }
}

/// `rank[i]` is the position of coordinate `i` in `order`.
pub fn ranks(order: &[usize]) -> Vec<usize> {
    let mut r = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        r[i] = pos;
    }
    r
}

/// Connectivity of a block's `D x D` weight matrix, flattened row-major as
/// `[i * D + j]`: output `i` may read input `j` iff `j` precedes `i`.
pub fn connectivity(order: &[usize]) -> Vec<f64> {
    let d = order.len();
    let rank = ranks(order);
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if rank[j] < rank[i] {
                m[i * d + j] = 1.0;
            }
        }
    }
    m
}

/// Entries `(i, j)` of a block's weight matrix that may be nonzero, in
/// row-major order: output `i` reads input `j` iff `j` precedes `i`.
pub fn free_entries(order: &[usize]) -> Vec<(usize, usize)> {
    let d = order.len();
    let rank = ranks(order);
    let mut out = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for i in 0..d {
        for j in 0..d {
            if rank[j] < rank[i] {
                out.push((i, j));
            }
        }
    }
    out
}

/// `[D, F]` 0/1 matrix with `(u R)[k] = u[j_k]` for free entry `k = (i_k, j_k)`.
pub fn gather_matrix(order: &[usize]) -> Tensor {
    let d = order.len();
    let free = free_entries(order);
    let f = free.len().max(1);
    let mut data = vec![0.0; d * f];
    for (k, &(_, j)) in free.iter().enumerate() {
        data[j * f + k] = 1.0;
    }
    Tensor::matrix(d, f, data).expect("gather shape")
}

/// `[F, D]` 0/1 matrix with `(v G)[i] = Σ_{k: i_k = i} v[k]`.
pub fn scatter_matrix(order: &[usize]) -> Tensor {
    let d = order.len();
    let free = free_entries(order);
    let f = free.len().max(1);
    let mut data = vec![0.0; f * d];
    for (k, &(i, _)) in free.iter().enumerate() {
        data[k * d + i] = 1.0;
    }
    Tensor::matrix(f, d, data).expect("scatter shape")
}

/// Dense row-major `D x D` weight matrix from the free-entry values.
pub fn dense_weights(order: &[usize], free_values: &[f64]) -> Vec<f64> {
    let d = order.len();
    let mut w = vec![0.0; d * d];
    for (&(i, j), &v) in free_entries(order).iter().zip(free_values) {
        w[i * d + j] = v;
    }
    w
}

/// One MADE block with concrete (already conditioned) parameters.
///
/// Density direction: `ε_i = (u_i - μ_i(u_{<i})) exp(-s_i(u_{<i}))` with
/// `μ = W_μ u + b_μ`, `s = B tanh((W_s u + b_s) / B)` and both weight matrices
/// masked to the block ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeBlock {
    pub order: Vec<usize>,
    /// Row-major `D x D`, already masked.
    pub mu_weight: Vec<f64>,
    pub mu_bias: Vec<f64>,
    pub scale_weight: Vec<f64>,
    pub scale_bias: Vec<f64>,
    pub scale_bound: f64,
}

impl MadeBlock {
    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Shift and squashed log-scale for coordinate `i` given the input `u`.
    /// Only coordinates preceding `i` in the ordering are read.
    pub fn shift_and_log_scale(&self, u: &[f64], i: usize) -> (f64, f64) {
        let d = self.dim();
        let row = i * d;
        let mut mu = self.mu_bias[i];
        let mut s = self.scale_bias[i];
        for (j, uj) in u.iter().enumerate().take(d) {
            mu += self.mu_weight[row + j] * uj;
            s += self.scale_weight[row + j] * uj;
        }
        (mu, self.scale_bound * tanh(s / self.scale_bound))
    }

    /// `u -> ε` and `log |det ∂ε/∂u|`.
    pub fn forward(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let mut out = vec![0.0; u.len()];
        let mut logdet = 0.0;
        for i in 0..u.len() {
            let (mu, s) = self.shift_and_log_scale(u, i);
            out[i] = (u[i] - mu) * exp(-s);
            logdet -= s;
        }
        (out, logdet)
    }

    /// `ε -> u`, one coordinate at a time in block order.
    pub fn inverse(&self, eps: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; eps.len()];
        for &i in &self.order {
            // Entries of `u` not yet filled are zero and masked out anyway.
            let (mu, s) = self.shift_and_log_scale(&u, i);
            u[i] = eps[i] * exp(s) + mu;
        }
        u
    }
}
