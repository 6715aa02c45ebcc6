//! Grouped batch whitening with per-domain statistics.
//!
//! Features are split into contiguous groups of `g`. For each group the batch
//! mean `μ` and covariance `Σ = (1/m)·Σᵢ(xᵢ−μ)(xᵢ−μ)ᵀ + εI` are estimated, `Σ` is
//! factored as `L·Lᵀ`, and samples are mapped to `x̂ = L⁻¹(x−μ)` by forward
//! substitution. A per-feature scale `γ` and shift `β` follow. With `g = 1`
//! this is exactly batch normalization.
//!
//! [`DwtLayer`] keeps separate running statistics for the source and target
//! domains; a train-mode forward whitens with the statistics of the batch it
//! is given and folds them into the running average of the batch's domain.

use crate::error::{Error, Result};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode, Parameter, RunningStats};
use crate::linalg::{cholesky_lower, tri_solve_lower, tri_solve_lower_transposed};
use crate::par;
use crate::tensor::{matmul, matmul_tn, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// A non-positive-definite covariance is retried once with `ε` scaled by this.
const EPSILON_RETRY_FACTOR: f64 = 10.0;

/// Groups are processed in parallel only above this many input elements.
const PAR_MIN_ELEMENTS: usize = 1 << 14;

/// Mean and covariance of one feature group.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    /// `g×g`, shrinkage already on the diagonal.
    pub sigma: Tensor,
    pub count: usize,
}

impl BatchStats {
    pub fn group_size(&self) -> usize {
        self.mu.len()
    }
}

fn check_grouping(d: usize, g: usize) -> Result<()> {
    if g == 0 || !d.is_multiple_of(g) {
        return Err(Error::Param(format!(
            "group size {g} does not divide feature count {d}"
        )));
    }
    Ok(())
}

/// Statistics of columns `[start, start+g)`; returns them with the centered block.
fn group_stats(batch: &Tensor, start: usize, g: usize, epsilon: f64) -> (BatchStats, Tensor) {
    let m = batch.rows();
    let mut xc = batch.column_block(start, g);
    let mut mu = vec![0.0; g];
    for i in 0..m {
        for (acc, v) in mu.iter_mut().zip(xc.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mu {
        *v /= m as f64;
    }
    for i in 0..m {
        for (v, mean) in xc.row_mut(i).iter_mut().zip(&mu) {
            *v -= mean;
        }
    }
    let mut sigma = Tensor::zeros(&[g, g]);
    for j in 0..g {
        for k in 0..=j {
            let mut s = 0.0;
            for i in 0..m {
                s += xc.at(i, j) * xc.at(i, k);
            }
            s /= m as f64;
            if j == k {
                s += epsilon;
            }
            sigma.set(j, k, s);
            sigma.set(k, j, s);
        }
    }
    (BatchStats { mu, sigma, count: m }, xc)
}

/// Per-group batch statistics of an `m×d` batch.
pub fn batch_stats(batch: &Tensor, g: usize, epsilon: f64) -> Result<Vec<BatchStats>> {
    let (m, d) = batch.require_matrix("batch_stats")?;
    check_grouping(d, g)?;
    if m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "need at least 2 samples for covariance, got {m}"
        )));
    }
    if epsilon < 0.0 {
        return Err(Error::Param(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok((0..d / g).map(|k| group_stats(batch, k * g, g, epsilon).0).collect())
}

/// Whitening matrix `W = L⁻¹` for `Σ = L·Lᵀ`; lower-triangular with `WᵀW = Σ⁻¹`.
pub fn whitening_matrix(stats: &BatchStats) -> Result<Tensor> {
    let l = cholesky_lower(&stats.sigma)?;
    tri_solve_lower(&l, &Tensor::eye(stats.group_size()))
}

/// Cholesky factor of `stats.sigma`, retrying once with a larger shrinkage.
/// On retry the stats are updated to the covariance actually used.
fn factor_with_retry(stats: &mut BatchStats, epsilon: f64) -> Result<Tensor> {
    match cholesky_lower(&stats.sigma) {
        Err(Error::NotPositiveDefinite { .. }) => {
            let extra = epsilon * (EPSILON_RETRY_FACTOR - 1.0);
            for j in 0..stats.group_size() {
                let v = stats.sigma.at(j, j) + extra;
                stats.sigma.set(j, j, v);
            }
            cholesky_lower(&stats.sigma)
        }
        other => other,
    }
}

/// `x̂ = L⁻¹·xc` applied row-wise to an `n×g` centered block.
fn whiten_block(factor: &Tensor, centered: &Tensor) -> Result<Tensor> {
    Ok(tri_solve_lower(factor, &centered.transpose())?.transpose())
}

fn check_affine(d: usize, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "scale/shift of length {}/{} for {d} features",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Whiten an `m×d` batch with given per-group statistics, then scale and shift.
pub fn bw_forward(batch: &Tensor, stats: &[BatchStats], gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (m, d) = batch.require_matrix("bw_forward")?;
    check_affine(d, gamma, beta)?;
    let covered: usize = stats.iter().map(BatchStats::group_size).sum();
    if covered != d {
        return Err(Error::shape(format!(
            "statistics cover {covered} features, batch has {d}"
        )));
    }
    let mut out = Tensor::zeros(&[m, d]);
    let mut start = 0;
    for s in stats {
        let g = s.group_size();
        let l = cholesky_lower(&s.sigma)?;
        let xhat = whiten_block(&l, &center(batch, start, &s.mu))?;
        write_affine(&mut out, start, &xhat, gamma, beta);
        start += g;
    }
    Ok(out)
}

fn center(batch: &Tensor, start: usize, mu: &[f64]) -> Tensor {
    let mut xc = batch.column_block(start, mu.len());
    for i in 0..xc.rows() {
        for (v, mean) in xc.row_mut(i).iter_mut().zip(mu) {
            *v -= mean;
        }
    }
    xc
}

fn write_affine(out: &mut Tensor, start: usize, xhat: &Tensor, gamma: &[f64], beta: &[f64]) {
    let g = xhat.cols();
    for i in 0..xhat.rows() {
        for j in 0..g {
            let k = start + j;
            out.set(i, k, gamma[k] * xhat.at(i, j) + beta[k]);
        }
    }
}

/// `(1−ρ)·stored + ρ·fresh` on every mean and covariance entry.
pub fn blend_stats(stored: &mut [BatchStats], fresh: &[BatchStats], rho: f64) {
    for (s, f) in stored.iter_mut().zip(fresh) {
        for (a, b) in s.mu.iter_mut().zip(&f.mu) {
            *a = (1.0 - rho) * *a + rho * b;
        }
        for (a, b) in s.sigma.data_mut().iter_mut().zip(f.sigma.data()) {
            *a = (1.0 - rho) * *a + rho * b;
        }
        s.count = f.count;
    }
}

struct GroupCache {
    factor: Tensor,
    xhat: Tensor,
}

struct Cache {
    mode: Mode,
    spatial: Option<[usize; 4]>,
    groups: Vec<GroupCache>,
}

/// Domain-specific whitening transform layer.
#[derive(Clone)]
pub struct DwtLayer {
    features: usize,
    group_size: usize,
    epsilon: f64,
    momentum: f64,
    pub gamma: Parameter,
    pub beta: Parameter,
    running_source: RunningStats,
    running_target: RunningStats,
    last_batch_stats: Option<(DomainTag, Vec<BatchStats>)>,
    cache: Option<std::sync::Arc<Cache>>,
}

impl DwtLayer {
    pub fn new(features: usize, group_size: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        check_grouping(features, group_size)?;
        if epsilon < 0.0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Param(format!(
                "invalid epsilon {epsilon} or momentum {momentum}"
            )));
        }
        Ok(DwtLayer {
            features,
            group_size,
            epsilon,
            momentum,
            gamma: Parameter::exempt(Tensor::full(&[features], 1.0)),
            beta: Parameter::exempt(Tensor::zeros(&[features])),
            running_source: RunningStats::default(),
            running_target: RunningStats::default(),
            last_batch_stats: None,
            cache: None,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> usize {
        self.features / self.group_size
    }

    pub fn running_stats(&self, domain: DomainTag) -> &RunningStats {
        match domain {
            DomainTag::Source => &self.running_source,
            DomainTag::Target => &self.running_target,
        }
    }

    fn running_stats_mut(&mut self, domain: DomainTag) -> &mut RunningStats {
        match domain {
            DomainTag::Source => &mut self.running_source,
            DomainTag::Target => &mut self.running_target,
        }
    }

    /// Statistics used by the most recent train-mode forward.
    pub fn last_batch_stats(&self) -> Option<(DomainTag, &[BatchStats])> {
        self.last_batch_stats.as_ref().map(|(d, s)| (*d, s.as_slice()))
    }

    /// Blend fresh statistics into the running average of `domain`. The first
    /// update copies them.
    pub fn update_running_stats(&mut self, domain: DomainTag, fresh: &[BatchStats]) {
        let rho = self.momentum;
        let slot = self.running_stats_mut(domain);
        match &mut slot.groups {
            Some(stored) => blend_stats(stored, fresh, rho),
            None => slot.groups = Some(fresh.to_vec()),
        }
    }

    fn as_rows(&self, input: &Tensor) -> Result<(Tensor, Option<[usize; 4]>)> {
        match input.shape() {
            &[_, d] if d == self.features => Ok((input.clone(), None)),
            &[m, c, h, w] if c == self.features => Ok((input.nchw_to_rows(), Some([m, c, h, w]))),
            s => Err(Error::shape(format!(
                "whitening layer over {} features got input {s:?}",
                self.features
            ))),
        }
    }

    fn whiten_train(&self, rows: &Tensor) -> Result<Vec<(BatchStats, GroupCache)>> {
        let n = rows.rows();
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "need at least 2 rows for covariance, got {n}"
            )));
        }
        let g = self.group_size;
        let eps = self.epsilon;
        let work = |k: usize| -> Result<(BatchStats, GroupCache)> {
            let (mut stats, xc) = group_stats(rows, k * g, g, eps);
            let factor = factor_with_retry(&mut stats, eps)?;
            let xhat = whiten_block(&factor, &xc)?;
            Ok((stats, GroupCache { factor, xhat }))
        };
        let results = if rows.len() >= PAR_MIN_ELEMENTS {
            par::map_indexed(self.groups(), work)
        } else {
            par::map_indexed_seq(self.groups(), work)
        };
        results.into_iter().collect()
    }

    fn whiten_eval(&self, rows: &Tensor, domain: DomainTag) -> Result<Vec<GroupCache>> {
        let stats = self
            .running_stats(domain)
            .groups
            .as_ref()
            .ok_or(Error::UninitializedStats(domain.name()))?;
        let mut out = Vec::with_capacity(stats.len());
        let mut start = 0;
        for s in stats {
            let mut s = s.clone();
            let factor = factor_with_retry(&mut s, self.epsilon)?;
            let xhat = whiten_block(&factor, &center(rows, start, &s.mu))?;
            out.push(GroupCache { factor, xhat });
            start += s.group_size();
        }
        Ok(out)
    }
}

impl Layer for DwtLayer {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dwt {
            features: self.features,
            group_size: self.group_size,
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }

    fn forward(&mut self, input: &Tensor, mode: Mode, domain: DomainTag) -> Result<Tensor> {
        let (rows, spatial) = self.as_rows(input)?;
        let groups = match mode {
            Mode::Train => {
                let (stats, caches): (Vec<_>, Vec<_>) = self.whiten_train(&rows)?.into_iter().unzip();
                self.update_running_stats(domain, &stats);
                self.last_batch_stats = Some((domain, stats));
                caches
            }
            Mode::Eval => self.whiten_eval(&rows, domain)?,
        };
        let mut out = Tensor::zeros(rows.shape());
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        for (k, gc) in groups.iter().enumerate() {
            write_affine(&mut out, k * self.group_size, &gc.xhat, gamma, beta);
        }
        self.cache = Some(std::sync::Arc::new(Cache { mode, spatial, groups }));
        Ok(match spatial {
            Some([m, c, h, w]) => out.rows_to_nchw(m, c, h, w),
            None => out,
        })
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("whitening backward without a cached forward".into()))?;
        let dy = match cache.spatial {
            Some(s) if grad_output.shape() == s => grad_output.nchw_to_rows(),
            None if grad_output.shape() == [cache.groups[0].xhat.rows(), self.features] => grad_output.clone(),
            _ => {
                return Err(Error::shape(format!(
                    "whitening backward got gradient {:?}",
                    grad_output.shape()
                )))
            }
        };
        let n = dy.rows();
        let g = self.group_size;
        let mut dx = Tensor::zeros(dy.shape());
        for (k, gc) in cache.groups.iter().enumerate() {
            let start = k * g;
            let dy_g = dy.column_block(start, g);
            let mut dxhat = dy_g.clone();
            {
                let gamma = self.gamma.value.data();
                let dgamma = self.gamma.grad.data_mut();
                for i in 0..n {
                    for j in 0..g {
                        dgamma[start + j] += dy_g.at(i, j) * gc.xhat.at(i, j);
                    }
                }
                let dbeta = self.beta.grad.data_mut();
                for i in 0..n {
                    for j in 0..g {
                        dbeta[start + j] += dy_g.at(i, j);
                        dxhat.set(i, j, dy_g.at(i, j) * gamma[start + j]);
                    }
                }
            }
            let dx_g = match cache.mode {
                Mode::Eval => tri_solve_lower_transposed(&gc.factor, &dxhat.transpose())?.transpose(),
                Mode::Train => train_group_backward(&gc.factor, &gc.xhat, &dxhat)?,
            };
            dx.set_column_block(start, &dx_g);
        }
        Ok(match cache.spatial {
            Some([m, c, h, w]) => dx.rows_to_nchw(m, c, h, w),
            None => dx,
        })
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn running(&self) -> Vec<&RunningStats> {
        vec![&self.running_source, &self.running_target]
    }

    fn running_mut(&mut self) -> Vec<&mut RunningStats> {
        vec![&mut self.running_source, &mut self.running_target]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Gradient of `x ↦ x̂ = L⁻¹(x − μ)` through `μ`, `Σ` and the Cholesky factor.
///
/// With `M = −dX̂ᵀX̂` and `S = ½(Φ(M) + Φ(M)ᵀ)`, where `Φ` keeps the lower
/// triangle and halves the diagonal, the covariance adjoint is `L⁻ᵀ S L⁻¹`
/// and the centered-input gradient collapses to `(dX̂ + (2/n)·X̂·S)·L⁻¹`
/// (row-wise `L⁻ᵀ` solves). Centering then removes the column means.
fn train_group_backward(factor: &Tensor, xhat: &Tensor, dxhat: &Tensor) -> Result<Tensor> {
    let n = xhat.rows();
    let g = xhat.cols();
    let m = matmul_tn(dxhat, xhat)?;
    let mut s = Tensor::zeros(&[g, g]);
    for i in 0..g {
        for j in 0..=i {
            let v = -0.5 * m.at(i, j);
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    let mut grad = matmul(xhat, &s)?.scale(2.0 / n as f64);
    grad.add_assign(dxhat)?;
    let mut dxc = tri_solve_lower_transposed(factor, &grad.transpose())?.transpose();
    for j in 0..g {
        let mean = (0..n).map(|i| dxc.at(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            let v = dxc.at(i, j) - mean;
            dxc.set(i, j, v);
        }
    }
    Ok(dxc)
}
