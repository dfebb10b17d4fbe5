//! State-conditional masked autoregressive flow `q_φ(z | x)`.
//!
//! The flow maps a perturbation `z` to a standard-normal `ε` through, in order:
//! a fixed diagonal scaling by the baseline perturbation scales, then
//! `n_blocks` single-layer MADE blocks with a batch-norm bijection in front of
//! every block but the first. Block orderings alternate between natural and
//! reversed. Every MADE block's weights and biases are produced by its own
//! hypernetwork from the (standardised) previous state `x`; batch-norm
//! learnables are global.
//!
//! Two evaluation routes exist. [`FlowModel::condition`] produces a
//! [`ConditionedFlow`] with plain `f64` parameters, used for sampling and
//! pointwise densities. [`FlowModel::tape_forward`] evaluates a batch on an
//! autodiff [`Tape`] so the training objective can be differentiated.

mod made;
mod norm;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, Params, Tape, Tensor, Var};
use crate::math::{ln, tanh, LN_2PI};
use crate::rng;

pub use made::{connectivity, free_entries, ordering, ranks, MadeBlock};
pub use norm::{NormLayer, RunningStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("{what} has dimension {got}, flow expects {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid flow configuration: {0}")]
    Config(&'static str),
    #[error("parameters do not fit this flow: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowConfig {
    /// Perturbation dimension.
    pub dim_z: usize,
    /// Conditioning (state) dimension.
    pub dim_x: usize,
    pub n_blocks: usize,
    /// Hidden width of each hypernetwork; 0 makes it a single affine map.
    pub hidden: usize,
    /// Fixed per-coordinate scale applied before the first block, so the
    /// identity-initialised flow equals the baseline Gaussian.
    pub base_scale: Vec<f64>,
    /// Hypernetwork input standardisation `(x - shift) / scale`.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Log-scales are squashed into `[-bound, bound]`.
    pub scale_bound: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Seed for the hypernetwork hidden-layer initialisation.
    pub init_seed: u64,
    /// Hidden-layer initial weights have standard deviation `gain / sqrt(dim_x)`
    /// and biases `gain / 2`. Larger gains start with sharper features.
    pub hidden_init_gain: f64,
}

impl FlowConfig {
    pub fn new(dim_z: usize, dim_x: usize, base_scale: Vec<f64>) -> Self {
        Self {
            dim_z,
            dim_x,
            n_blocks: 5,
            hidden: 32,
            base_scale,
            input_shift: vec![0.0; dim_x],
            input_scale: vec![1.0; dim_x],
            scale_bound: 7.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 0,
            hidden_init_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.dim_z == 0 || self.dim_x == 0 {
            return Err(FlowError::Config("dimensions must be positive"));
        }
        if self.n_blocks == 0 {
            return Err(FlowError::Config("need at least one MADE block"));
        }
        if self.base_scale.len() != self.dim_z || self.base_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(FlowError::Config(
                "base scale must be positive, one per perturbed coordinate",
            ));
        }
        if self.input_shift.len() != self.dim_x
            || self.input_scale.len() != self.dim_x
            || self.input_scale.iter().any(|s| !(*s > 0.0))
            || self.input_shift.iter().any(|s| !s.is_finite())
        {
            return Err(FlowError::Config(
                "input standardisation must have one positive scale per state coordinate",
            ));
        }
        if !(self.hidden_init_gain > 0.0 && self.hidden_init_gain.is_finite()) {
            return Err(FlowError::Config("hidden initialisation gain must be positive"));
        }
        if !(self.scale_bound > 0.0) || !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(FlowError::Config(
                "scale bound, batch-norm epsilon and momentum must be positive",
            ));
        }
        Ok(())
    }
}

/// A weight/bias pair of one hypernetwork output head.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

/// Per-block hypernetwork: an optional tanh hidden layer followed by affine
/// heads producing the block's shift and log-scale weights and biases. Weight
/// heads emit only the free (autoregressive) entries; they are absent when
/// `D_z = 1`.
#[derive(Debug, Clone, PartialEq)]
struct Hypernetwork {
    hidden: Option<Head>,
    mu_weight: Option<Head>,
    mu_bias: Head,
    scale_weight: Option<Head>,
    scale_bias: Head,
    gather: Tensor,
    scatter: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    shift: ParamId,
    log_scale: ParamId,
    stats: RunningStats,
}

/// Whether batch-norm layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Values produced by [`FlowModel::tape_forward`].
#[derive(Debug, Clone)]
pub struct TapeOutput {
    /// `[N, D_z]` base-space points.
    pub eps: Var,
    /// `[N, 1]` log-determinants of `z -> ε`.
    pub logdet: Var,
    /// `[N, 1]` log-densities `log q(z | x)`.
    pub log_density: Var,
    /// Batch mean and (unbiased) variance entering each batch-norm layer, in
    /// training mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    params: Params,
    hypernets: Vec<Hypernetwork>,
    norms: Vec<BatchNorm>,
    orders: Vec<Vec<usize>>,
}

impl FlowModel {
    /// Identity-initialised flow: all hypernetwork heads are zero, so `μ = 0`,
    /// `s = 0` for every state, and `q` equals the baseline Gaussian.
    pub fn new(config: FlowConfig) -> Result<Self, FlowError> {
        config.validate()?;
        let (dz, dx, h) = (config.dim_z, config.dim_x, config.hidden);
        let n_free = dz * (dz - 1) / 2;
        let mut params = Params::new();
        let mut hypernets = Vec::with_capacity(config.n_blocks);
        let mut norms = Vec::new();
        let mut orders = Vec::new();
        let mut init_rng = rng::stream(config.init_seed, 0);
        for b in 0..config.n_blocks {
            if b > 0 {
                let shift = params.add(format!("norm{}.shift", b - 1), Tensor::zeros(&[1, dz]));
                let log_scale = params.add(format!("norm{}.log_scale", b - 1), Tensor::zeros(&[1, dz]));
                norms.push(BatchNorm {
                    shift,
                    log_scale,
                    stats: RunningStats::identity(dz, config.bn_eps),
                });
            }
            let order = ordering(dz, b);
            let hidden = (h > 0).then(|| {
                let sd = config.hidden_init_gain / crate::math::sqrt(dx as f64);
                let bsd = 0.5 * config.hidden_init_gain;
                let w: Vec<f64> = (0..dx * h).map(|_| sd * rng::standard_normal(&mut init_rng)).collect();
                let bias: Vec<f64> = (0..h).map(|_| bsd * rng::standard_normal(&mut init_rng)).collect();
                Head {
                    weight: params.add(
                        format!("block{b}.hyper.hidden.weight"),
                        Tensor::matrix(dx, h, w).expect("shape"),
                    ),
                    bias: params.add(format!("block{b}.hyper.hidden.bias"), Tensor::row(bias)),
                }
            });
            let inp = if h > 0 { h } else { dx };
            let mut head = |name: &str, width: usize| Head {
                weight: params.add(format!("block{b}.hyper.{name}.weight"), Tensor::zeros(&[inp, width])),
                bias: params.add(format!("block{b}.hyper.{name}.bias"), Tensor::zeros(&[1, width])),
            };
            let mu_weight = (n_free > 0).then(|| head("mu_weight", n_free));
            let mu_bias = head("mu_bias", dz);
            let scale_weight = (n_free > 0).then(|| head("scale_weight", n_free));
            let scale_bias = head("scale_bias", dz);
            hypernets.push(Hypernetwork {
                hidden,
                mu_weight,
                mu_bias,
                scale_weight,
                scale_bias,
                gather: made::gather_matrix(&order),
                scatter: made::scatter_matrix(&order),
            });
            orders.push(order);
        }
        Ok(Self {
            config,
            params,
            hypernets,
            norms,
            orders,
        })
    }

    /// Rebuild a flow from stored parameters and batch-norm statistics.
    pub fn from_parts(config: FlowConfig, params: Params, stats: Vec<RunningStats>) -> Result<Self, FlowError> {
        let mut flow = Self::new(config)?;
        if params.names() != flow.params.names() {
            return Err(FlowError::Incompatible(String::from("parameter block names differ")));
        }
        for (a, b) in params.tensors().iter().zip(flow.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(FlowError::Incompatible(format!(
                    "parameter shape {:?} where {:?} was expected",
                    a.shape(),
                    b.shape()
                )));
            }
            if !a.is_finite() {
                return Err(FlowError::Incompatible(String::from("non-finite parameter")));
            }
        }
        if stats.len() != flow.norms.len() {
            return Err(FlowError::Incompatible(format!(
                "{} batch-norm layers stored, {} expected",
                stats.len(),
                flow.norms.len()
            )));
        }
        let dz = flow.config.dim_z;
        for (norm, s) in flow.norms.iter_mut().zip(stats) {
            if s.mean.len() != dz || s.var.len() != dz || s.var.iter().any(|v| !(*v > 0.0)) {
                return Err(FlowError::Incompatible(String::from("invalid batch-norm statistics")));
            }
            norm.stats = s;
        }
        flow.params = params;
        Ok(flow)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim_z(&self) -> usize {
        self.config.dim_z
    }

    pub fn dim_x(&self) -> usize {
        self.config.dim_x
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.norms.iter().map(|n| n.stats.clone()).collect()
    }

    pub fn orders(&self) -> &[Vec<usize>] {
        &self.orders
    }

    /// Set the hypernetwork input standardisation from a sample of states.
    pub fn fit_input_normalization<'a>(&mut self, states: impl IntoIterator<Item = &'a [f64]>) {
        let dx = self.config.dim_x;
        let (mut sum, mut sq, mut n) = (vec![0.0; dx], vec![0.0; dx], 0usize);
        for x in states {
            for i in 0..dx {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
            n += 1;
        }
        if n < 2 {
            return;
        }
        for i in 0..dx {
            let mean = sum[i] / n as f64;
            let var = (sq[i] / n as f64 - mean * mean).max(0.0);
            self.config.input_shift[i] = mean;
            self.config.input_scale[i] = if var > 1e-24 { crate::math::sqrt(var) } else { 1.0 };
        }
    }

    /// Moves each batch-norm layer's running statistics towards a batch's.
    pub fn update_running_stats(&mut self, batch_stats: &[(Vec<f64>, Vec<f64>)]) {
        let m = self.config.bn_momentum;
        for (norm, (mean, var)) in self.norms.iter_mut().zip(batch_stats) {
            norm.stats.update(mean, var, m);
        }
    }

    /// Sets each batch-norm layer's statistics to the mean and (unbiased)
    /// variance of its inputs over `pairs`, one layer at a time so that later
    /// layers see earlier ones in evaluation mode. Pairs are `(z, x_prev)`.
    pub fn set_population_stats<'a, I>(&mut self, pairs: I) -> Result<(), FlowError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
        I::IntoIter: Clone,
    {
        let pairs = pairs.into_iter();
        let dz = self.config.dim_z;
        for l in 0..self.norms.len() {
            let mut n = 0usize;
            let mut mean = vec![0.0; dz];
            let mut m2 = vec![0.0; dz];
            for (z, x) in pairs.clone() {
                self.check_z(z)?;
                let u = self.condition(x)?.forward_to_norm(z, l);
                n += 1;
                for i in 0..dz {
                    let d = u[i] - mean[i];
                    mean[i] += d / n as f64;
                    m2[i] += d * (u[i] - mean[i]);
                }
            }
            if n < 2 {
                return Err(FlowError::Config("population statistics need at least two pairs"));
            }
            let var = m2.iter().map(|v| v / (n - 1) as f64).collect();
            self.norms[l].stats = RunningStats { mean, var };
        }
        Ok(())
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.config.input_shift.iter().zip(&self.config.input_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn check_x(&self, x: &[f64]) -> Result<(), FlowError> {
        if x.len() != self.config.dim_x {
            return Err(FlowError::Dimension {
                what: "conditioning state",
                expected: self.config.dim_x,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_z(&self, z: &[f64]) -> Result<(), FlowError> {
        if z.len() != self.config.dim_z {
            return Err(FlowError::Dimension {
                what: "perturbation",
                expected: self.config.dim_z,
                got: z.len(),
            });
        }
        Ok(())
    }

    fn eval_head(&self, head: Head, input: &[f64]) -> Vec<f64> {
        let w = self.params.get(head.weight);
        let b = self.params.get(head.bias);
        let (rows, cols) = w.dims2();
        let mut out = b.data().to_vec();
        for (r, &v) in input.iter().enumerate().take(rows) {
            let wr = &w.data()[r * cols..(r + 1) * cols];
            for (o, wv) in out.iter_mut().zip(wr) {
                *o += v * wv;
            }
        }
        out
    }

    fn eval_weights(&self, head: Option<Head>, input: &[f64], order: &[usize]) -> Vec<f64> {
        match head {
            Some(h) => made::dense_weights(order, &self.eval_head(h, input)),
            None => vec![0.0; order.len() * order.len()],
        }
    }

    /// Runs every hypernetwork once on `x_prev` and returns the flow with
    /// concrete layer parameters.
    pub fn condition(&self, x_prev: &[f64]) -> Result<ConditionedFlow, FlowError> {
        self.check_x(x_prev)?;
        let xs = self.standardize(x_prev);
        let mut blocks = Vec::with_capacity(self.hypernets.len());
        for (hn, order) in self.hypernets.iter().zip(&self.orders) {
            let feat = match hn.hidden {
                Some(hid) => self.eval_head(hid, &xs).into_iter().map(tanh).collect(),
                None => xs.clone(),
            };
            blocks.push(MadeBlock {
                order: order.clone(),
                mu_weight: self.eval_weights(hn.mu_weight, &feat, order),
                mu_bias: self.eval_head(hn.mu_bias, &feat),
                scale_weight: self.eval_weights(hn.scale_weight, &feat, order),
                scale_bias: self.eval_head(hn.scale_bias, &feat),
                scale_bound: self.config.scale_bound,
            });
        }
        let norms = self
            .norms
            .iter()
            .map(|n| NormLayer {
                mean: n.stats.mean.clone(),
                var: n.stats.var.clone(),
                shift: self.params.get(n.shift).data().to_vec(),
                log_scale: self.params.get(n.log_scale).data().to_vec(),
                eps: self.config.bn_eps,
            })
            .collect();
        Ok(ConditionedFlow {
            base_scale: self.config.base_scale.clone(),
            blocks,
            norms,
        })
    }

    /// `log q(z | x_prev)` with batch norm in evaluation mode.
    ///
    /// # Panics
    /// On dimension mismatch; use [`FlowModel::condition`] to handle that.
    pub fn log_density(&self, z: &[f64], x_prev: &[f64]) -> f64 {
        self.check_z(z).expect("perturbation dimension");
        self.condition(x_prev).expect("state dimension").log_density(z)
    }

    /// `(ε, log |det ∂ε/∂z|)` for one point, evaluation mode.
    pub fn forward_with_logdet(&self, z: &[f64], x_prev: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check_z(z)?;
        Ok(self.condition(x_prev)?.forward(z))
    }

    /// Draw `z ~ q(· | x_prev)`.
    ///
    /// # Panics
    /// On dimension mismatch.
    pub fn sample(&self, x_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let flow = self.condition(x_prev).expect("state dimension");
        let eps: Vec<f64> = (0..self.config.dim_z).map(|_| rng::standard_normal(rng)).collect();
        flow.inverse(&eps)
    }

    /// Evaluates a batch on `tape`. `zs` is `[n, D_z]` and `xs` is `[n, D_x]`,
    /// both row-major. Gradients flow into [`FlowModel::params`].
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        zs: &[f64],
        xs: &[f64],
        n: usize,
        mode: NormMode,
    ) -> Result<TapeOutput, FlowError> {
        let (dz, dx) = (self.config.dim_z, self.config.dim_x);
        if n == 0 || zs.len() != n * dz {
            return Err(FlowError::Dimension {
                what: "perturbation batch",
                expected: n * dz,
                got: zs.len(),
            });
        }
        if xs.len() != n * dx {
            return Err(FlowError::Dimension {
                what: "state batch",
                expected: n * dx,
                got: xs.len(),
            });
        }
        let batch = [n, dz];
        let col = [n, 1];
        let std_x: Vec<f64> = xs.chunks_exact(dx).flat_map(|x| self.standardize(x)).collect();
        let x_var = tape.constant(Tensor::matrix(n, dx, std_x)?);
        let inv_scale = Tensor::row(self.config.base_scale.iter().map(|s| 1.0 / s).collect());
        let inv_scale = tape.constant(inv_scale);
        let inv_scale = tape.broadcast(inv_scale, &batch)?;
        let z_var = tape.constant(Tensor::matrix(n, dz, zs.to_vec())?);
        let mut u = tape.mul(z_var, inv_scale)?;
        let base_logdet: f64 = -self.config.base_scale.iter().map(|s| ln(*s)).sum::<f64>();
        let mut logdet = {
            let c = tape.scalar(base_logdet);
            tape.broadcast(c, &col)?
        };
        let mut batch_stats = Vec::new();
        let bound = self.config.scale_bound;

        for (b, hn) in self.hypernets.iter().enumerate() {
            if b > 0 {
                let norm = &self.norms[b - 1];
                let (y, ld, stats) = self.tape_norm(tape, u, norm, n, mode)?;
                u = y;
                logdet = tape.add(logdet, ld)?;
                if let Some(s) = stats {
                    batch_stats.push(s);
                }
            }
            let feat = match hn.hidden {
                Some(hid) => {
                    let w = tape.param(&self.params, hid.weight);
                    let bias = tape.param(&self.params, hid.bias);
                    let pre = tape.matmul(x_var, w)?;
                    let width = tape.value(pre).shape().to_vec();
                    let bias = tape.broadcast(bias, &width)?;
                    let pre = tape.add(pre, bias)?;
                    tape.tanh(pre)?
                }
                None => x_var,
            };
            let head_out = |tape: &mut Tape, head: Head| -> Result<Var, FlowError> {
                let w = tape.param(&self.params, head.weight);
                let out = tape.matmul(feat, w)?;
                let bias = tape.param(&self.params, head.bias);
                let shape = tape.value(out).shape().to_vec();
                let bias = tape.broadcast(bias, &shape)?;
                Ok(tape.add(out, bias)?)
            };
            let mut mu = head_out(tape, hn.mu_bias)?;
            let mut s_raw = head_out(tape, hn.scale_bias)?;
            if let (Some(mw), Some(sw)) = (hn.mu_weight, hn.scale_weight) {
                // Per-sample maps: ((u R) ⊙ W) G gives Σ_j W[i, j] u_j over free entries.
                let gather = tape.constant(hn.gather.clone());
                let scatter = tape.constant(hn.scatter.clone());
                let u_free = tape.matmul(u, gather)?;
                let mu_w = head_out(tape, mw)?;
                let t = tape.mul(u_free, mu_w)?;
                let t = tape.matmul(t, scatter)?;
                mu = tape.add(mu, t)?;
                let s_w = head_out(tape, sw)?;
                let t = tape.mul(u_free, s_w)?;
                let t = tape.matmul(t, scatter)?;
                s_raw = tape.add(s_raw, t)?;
            }
            let s = scale(tape, s_raw, 1.0 / bound)?;
            let s = tape.tanh(s)?;
            let s = scale(tape, s, bound)?;

            let neg_mu = scale(tape, mu, -1.0)?;
            let centred = tape.add(u, neg_mu)?;
            let neg_s = scale(tape, s, -1.0)?;
            let inv = tape.exp(neg_s)?;
            u = tape.mul(centred, inv)?;
            let ld = tape.sum(neg_s, Some(1))?;
            logdet = tape.add(logdet, ld)?;
        }

        let sq = tape.mul(u, u)?;
        let sq = tape.sum(sq, Some(1))?;
        let base = scale(tape, sq, -0.5)?;
        let c = tape.scalar(-0.5 * dz as f64 * LN_2PI);
        let c = tape.broadcast(c, &col)?;
        let base = tape.add(base, c)?;
        let log_density = tape.add(base, logdet)?;
        Ok(TapeOutput {
            eps: u,
            logdet,
            log_density,
            batch_stats,
        })
    }

    #[allow(clippy::type_complexity)]
    fn tape_norm(
        &self,
        tape: &mut Tape,
        u: Var,
        norm: &BatchNorm,
        n: usize,
        mode: NormMode,
    ) -> Result<(Var, Var, Option<(Vec<f64>, Vec<f64>)>), FlowError> {
        let dz = self.config.dim_z;
        let batch = [n, dz];
        let (centred, var, stats) = match mode {
            NormMode::Train => {
                let total = tape.sum(u, Some(0))?;
                let mean = scale(tape, total, 1.0 / n as f64)?;
                let neg_mean = scale(tape, mean, -1.0)?;
                let neg_mean = tape.broadcast(neg_mean, &batch)?;
                let centred = tape.add(u, neg_mean)?;
                let sq = tape.mul(centred, centred)?;
                let sq = tape.sum(sq, Some(0))?;
                let var = scale(tape, sq, 1.0 / n as f64)?;
                let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let stats = (
                    tape.value(mean).data().to_vec(),
                    tape.value(var).data().iter().map(|v| v * unbiased).collect(),
                );
                (centred, var, Some(stats))
            }
            NormMode::Eval => {
                let neg_mean = Tensor::row(norm.stats.mean.iter().map(|m| -m).collect());
                let neg_mean = tape.constant(neg_mean);
                let neg_mean = tape.broadcast(neg_mean, &batch)?;
                let centred = tape.add(u, neg_mean)?;
                let var = tape.constant(Tensor::row(norm.stats.var.clone()));
                (centred, var, None)
            }
        };
        let eps = tape.constant(Tensor::full(&[1, dz], self.config.bn_eps));
        let var_eps = tape.add(var, eps)?;
        let log_var = tape.log(var_eps)?;
        let neg_half_log_var = scale(tape, log_var, -0.5)?;
        let inv_sd = tape.exp(neg_half_log_var)?;
        let gamma = tape.param(&self.params, norm.log_scale);
        let beta = tape.param(&self.params, norm.shift);
        let gain = tape.exp(gamma)?;
        let gain = tape.mul(gain, inv_sd)?;
        let gain_b = tape.broadcast(gain, &batch)?;
        let y = tape.mul(centred, gain_b)?;
        let beta_b = tape.broadcast(beta, &batch)?;
        let y = tape.add(y, beta_b)?;
        let ld_row = tape.add(gamma, neg_half_log_var)?;
        let ld = tape.sum(ld_row, None)?;
        let ld = tape.broadcast(ld, &[n, 1])?;
        Ok((y, ld, stats))
    }
}

/// `c · v` through the primitive set.
fn scale(tape: &mut Tape, v: Var, c: f64) -> Result<Var, AutodiffError> {
    let shape = tape.value(v).shape().to_vec();
    let c = tape.scalar(c);
    let c = tape.broadcast(c, &shape)?;
    tape.mul(v, c)
}

/// A flow with concrete parameters for one conditioning state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedFlow {
    pub base_scale: Vec<f64>,
    pub blocks: Vec<MadeBlock>,
    /// `norms[k]` sits in front of `blocks[k + 1]`.
    pub norms: Vec<NormLayer>,
}

impl ConditionedFlow {
    pub fn dim(&self) -> usize {
        self.base_scale.len()
    }

    /// `z -> ε` and `log |det ∂ε/∂z|`.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let mut u: Vec<f64> = z.iter().zip(&self.base_scale).map(|(v, s)| v / s).collect();
        let mut logdet: f64 = -self.base_scale.iter().map(|s| ln(*s)).sum::<f64>();
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                let (y, ld) = self.norms[b - 1].forward(&u);
                u = y;
                logdet += ld;
            }
            let (y, ld) = block.forward(&u);
            u = y;
            logdet += ld;
        }
        (u, logdet)
    }

    /// Input of batch-norm layer `l`, i.e. the output of block `l`.
    fn forward_to_norm(&self, z: &[f64], l: usize) -> Vec<f64> {
        let mut u: Vec<f64> = z.iter().zip(&self.base_scale).map(|(v, s)| v / s).collect();
        for (b, block) in self.blocks.iter().enumerate().take(l + 1) {
            if b > 0 {
                u = self.norms[b - 1].forward(&u).0;
            }
            u = block.forward(&u).0;
        }
        u
    }

    /// `ε -> z`.
    pub fn inverse(&self, eps: &[f64]) -> Vec<f64> {
        let mut u = eps.to_vec();
        for (b, block) in self.blocks.iter().enumerate().rev() {
            u = block.inverse(&u);
            if b > 0 {
                u = self.norms[b - 1].inverse(&u);
            }
        }
        u.iter().zip(&self.base_scale).map(|(v, s)| v * s).collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let (eps, logdet) = self.forward(z);
        let sq: f64 = eps.iter().map(|e| e * e).sum();
        -0.5 * sq - 0.5 * eps.len() as f64 * LN_2PI + logdet
    }

    /// True when every block is the identity map (zero shift and log-scale).
    pub fn is_identity_blocks(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.mu_weight
                .iter()
                .chain(&b.mu_bias)
                .chain(&b.scale_weight)
                .chain(&b.scale_bias)
                .all(|v| *v == 0.0)
        })
    }
}

#[cfg(test)]
mod tests;
