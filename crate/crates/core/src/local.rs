//! Client-side training: plain SGD (FedAvg), proximal SGD (FedProx), and
//! Local Superior Soups (LSS).
//!
//! LSS grows a pool of models seeded with the round's anchor. Each new member
//! starts at the uniform average of the pool and is trained for `tau` steps;
//! every step evaluates the task loss at a random convex combination of the
//! pool, so gradients reach the active member scaled by its coefficient. Two
//! regularizers shape the pool: an affinity term pulls the active member
//! towards the anchor, a diversity term pushes it away from the earlier
//! members. Earlier members are never updated again. The returned model is the
//! uniform average of the whole pool, anchor included.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, Batch, MlpSpec};
use crate::params::{check_dims, raw_distance, uniform_weights, weighted_average, ParamVector};
use crate::seed;

/// Tolerance on `|sum(coeffs) - 1|` for interpolation coefficients.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffMode {
    /// `u_i ~ U(0,1)` i.i.d., normalized to sum to one.
    #[default]
    UniformRandom,
    /// All weight on the last (active) member.
    ActiveOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub eta: f64,
    pub tau: usize,
    pub batch_size: usize,
    pub lambda_a: f64,
    pub lambda_d: f64,
    pub num_pool_models: usize,
    pub mu_prox: f64,
    pub coeff_mode: CoeffMode,
    pub dist_epsilon: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            eta: 5e-4,
            tau: 8,
            batch_size: 64,
            lambda_a: 3.0,
            lambda_d: 3.0,
            num_pool_models: 4,
            mu_prox: 0.01,
            coeff_mode: CoeffMode::UniformRandom,
            dist_epsilon: 1e-8,
        }
    }
}

impl LocalConfig {
    /// Returns the offending field name and a message on failure.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let nonneg = |name, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((name, format!("must be a finite non-negative number, got {v}")))
            }
        };
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be at least 1".into()));
        }
        if self.num_pool_models == 0 {
            return Err(("num_pool_models", "must be at least 1".into()));
        }
        nonneg("lambda_a", self.lambda_a)?;
        nonneg("lambda_d", self.lambda_d)?;
        nonneg("mu_prox", self.mu_prox)?;
        if !(self.dist_epsilon > 0.0 && self.dist_epsilon.is_finite()) {
            return Err(("dist_epsilon", format!("must be positive, got {}", self.dist_epsilon)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| Error::InvalidArgument(format!("local.{field}: {msg}")))
    }
}

/// The LSS model pool. `members[0]` is the anchor; the last member is the one
/// being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    members: Vec<ParamVector>,
    anchor: ParamVector,
}

impl ModelPool {
    pub fn new(anchor: ParamVector) -> Self {
        Self {
            members: vec![anchor.clone()],
            anchor,
        }
    }

    /// Builds a pool from explicit members; `members[0]` must equal `anchor`.
    pub fn from_members(anchor: ParamVector, members: Vec<ParamVector>) -> Result<Self> {
        match members.first() {
            None => return Err(Error::Empty("model pool")),
            Some(first) if first != &anchor => {
                return Err(Error::InvalidArgument("first pool member must be the anchor".into()))
            }
            _ => {}
        }
        for m in &members {
            check_dims(anchor.dim(), m.dim())?;
        }
        Ok(Self { members, anchor })
    }

    pub fn anchor(&self) -> &ParamVector {
        &self.anchor
    }

    pub fn members(&self) -> &[ParamVector] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn active(&self) -> &ParamVector {
        self.members.last().expect("pool is never empty")
    }

    fn active_mut(&mut self) -> &mut ParamVector {
        self.members.last_mut().expect("pool is never empty")
    }

    /// Appends the uniform average of the current members.
    pub fn push_average(&mut self) -> Result<()> {
        let avg = weighted_average(&self.members, &uniform_weights(self.members.len()))?;
        self.members.push(avg);
        Ok(())
    }

    /// Uniform average of every member.
    pub fn average(&self) -> Result<ParamVector> {
        weighted_average(&self.members, &uniform_weights(self.members.len()))
    }

    /// Mean pairwise l2 distance over all unordered member pairs.
    pub fn mean_pairwise_distance(&self) -> f64 {
        let n = self.members.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += raw_distance(self.members[i].as_slice(), self.members[j].as_slice());
            }
        }
        total / (n * (n - 1) / 2) as f64
    }
}

pub fn sample_interp_coeffs(pool_size: usize, mode: CoeffMode, rng: &mut seed::Rng) -> Result<Vec<f64>> {
    if pool_size == 0 {
        return Err(Error::Empty("model pool"));
    }
    Ok(match mode {
        CoeffMode::ActiveOnly => {
            let mut c = vec![0.0; pool_size];
            c[pool_size - 1] = 1.0;
            c
        }
        CoeffMode::UniformRandom => {
            // open interval keeps the normalizer away from zero
            let u: Vec<f64> = (0..pool_size).map(|_| rng.random_range(f64::EPSILON..1.0)).collect();
            let total: f64 = u.iter().sum();
            u.iter().map(|v| v / total).collect()
        }
    })
}

fn check_simplex(coeffs: &[f64], n: usize) -> Result<()> {
    if coeffs.len() != n {
        return Err(Error::InvalidCoefficients(format!(
            "{} coefficients for {n} pool members",
            coeffs.len()
        )));
    }
    if let Some(c) = coeffs.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidCoefficients(format!("coefficient {c} is outside [0, 1]")));
    }
    let total: f64 = coeffs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidCoefficients(format!("coefficients sum to {total}")));
    }
    Ok(())
}

/// Convex combination `sum_i coeffs[i] * members[i]`. Zero coefficients are
/// skipped, so a one-hot vector returns that member bit-exactly.
pub fn interpolate(pool: &ModelPool, coeffs: &[f64]) -> Result<ParamVector> {
    check_simplex(coeffs, pool.len())?;
    let mut out: Option<Vec<f64>> = None;
    for (m, &c) in pool.members.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        match out.as_mut() {
            None => out = Some(m.as_slice().iter().map(|v| c * v).collect()),
            Some(acc) => {
                for (o, v) in acc.iter_mut().zip(m.as_slice()) {
                    *o += c * v;
                }
            }
        }
    }
    let out = out.expect("simplex has a positive coefficient");
    ParamVector::new(out).map_err(|_| Error::NonFinite("interpolate"))
}

/// Mean l2 distance from `f` to each of `members`.
pub fn diversity_loss(f: &ParamVector, members: &[ParamVector]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Empty("model pool"));
    }
    let mut total = 0.0;
    for m in members {
        check_dims(f.dim(), m.dim())?;
        total += raw_distance(f.as_slice(), m.as_slice());
    }
    Ok(total / members.len() as f64)
}

/// l2 distance from `f` to the anchor.
pub fn affinity_loss(f: &ParamVector, anchor: &ParamVector) -> Result<f64> {
    check_dims(f.dim(), anchor.dim())?;
    Ok(raw_distance(f.as_slice(), anchor.as_slice()))
}

/// `grad += scale * (f - other) / max(||f - other||, eps)`.
fn add_unit_pull(grad: &mut [f64], f: &[f64], other: &[f64], scale: f64, eps: f64) {
    let dist = raw_distance(f, other).max(eps);
    let k = scale / dist;
    for ((g, a), b) in grad.iter_mut().zip(f).zip(other) {
        *g += k * (a - b);
    }
}

/// Regularized LSS objective and its gradient with respect to the active
/// (last) pool member:
///
/// `L(interp(pool, coeffs)) + lambda_a * |active - anchor| - lambda_d * mean_{n < last} |active - m_n|`
///
/// Only the active member receives gradient; the task term reaches it scaled
/// by its own coefficient.
pub fn lss_regularized_grad(
    active: &ParamVector,
    pool: &ModelPool,
    coeffs: &[f64],
    spec: &MlpSpec,
    batch: &Batch<'_>,
    cfg: &LocalConfig,
) -> Result<(f64, ParamVector)> {
    check_dims(active.dim(), pool.anchor.dim())?;
    if active != pool.active() {
        return Err(Error::InvalidArgument("active model must be the last pool member".into()));
    }
    let blended = interpolate(pool, coeffs)?;
    let (task_loss, task_grad) = loss_and_grad(&blended, spec, batch)?;
    let alpha_active = coeffs[coeffs.len() - 1];

    let mut grad = task_grad.into_vec();
    if alpha_active != 1.0 {
        for g in &mut grad {
            *g *= alpha_active;
        }
    }
    let mut loss = task_loss;
    let a = active.as_slice();
    let eps = cfg.dist_epsilon;

    if cfg.lambda_a != 0.0 {
        loss += cfg.lambda_a * affinity_loss(active, &pool.anchor)?;
        add_unit_pull(&mut grad, a, pool.anchor.as_slice(), cfg.lambda_a, eps);
    }
    let frozen = &pool.members[..pool.len() - 1];
    if cfg.lambda_d != 0.0 && !frozen.is_empty() {
        loss -= cfg.lambda_d * diversity_loss(active, frozen)?;
        let scale = -cfg.lambda_d / frozen.len() as f64;
        for m in frozen {
            add_unit_pull(&mut grad, a, m.as_slice(), scale, eps);
        }
    }
    let grad = ParamVector::new(grad).map_err(|_| Error::NonFinite("lss_regularized_grad"))?;
    Ok((loss, grad))
}

/// FedProx objective `L(f) + mu/2 |f - anchor|^2` and its gradient.
pub fn fedprox_loss_and_grad(
    params: &ParamVector,
    anchor: &ParamVector,
    mu: f64,
    spec: &MlpSpec,
    batch: &Batch<'_>,
) -> Result<(f64, ParamVector)> {
    check_dims(params.dim(), anchor.dim())?;
    let (mut loss, mut grad) = loss_and_grad(params, spec, batch)?;
    if mu != 0.0 {
        let mut sq = 0.0;
        let g = grad.as_mut_slice();
        for ((g, f), a) in g.iter_mut().zip(params.as_slice()).zip(anchor.as_slice()) {
            let diff = f - a;
            sq += diff * diff;
            *g += mu * diff;
        }
        loss += 0.5 * mu * sq;
    }
    Ok((loss, grad))
}

/// Epoch-wise minibatch sampler. Indices are drawn without replacement from
/// a shuffled order and reshuffled once fewer than `batch_size` remain. When
/// the dataset is no larger than one batch, every batch is the whole dataset
/// in its original order.
pub struct MiniBatcher<'d> {
    data: &'d Dataset,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: seed::Rng,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl<'d> MiniBatcher<'d> {
    pub fn new(data: &'d Dataset, batch_size: usize, seed: u64) -> Self {
        let rng = seed::rng(seed::derive(seed, &[seed::STREAM_BATCHES]));
        Self {
            data,
            batch_size: batch_size.max(1),
            order: (0..data.len()).collect(),
            pos: data.len(),
            rng,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn is_full_batch(&self) -> bool {
        self.batch_size >= self.data.len()
    }

    pub fn next_batch(&mut self) -> Batch<'_> {
        if self.is_full_batch() {
            return self.data.batch();
        }
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        self.features.clear();
        self.labels.clear();
        for &i in idx {
            self.features.extend_from_slice(self.data.row(i));
            self.labels.push(self.data.labels()[i]);
        }
        Batch {
            features: &self.features,
            labels: &self.labels,
            input_dim: self.data.input_dim(),
        }
    }
}

fn prox_sgd(
    anchor: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &LocalConfig,
    mu: f64,
    steps: usize,
    seed: u64,
) -> Result<ParamVector> {
    cfg.validate()?;
    check_dims(anchor.dim(), spec.param_count())?;
    let mut batcher = MiniBatcher::new(data, cfg.batch_size, seed);
    let mut f = anchor.clone();
    for _ in 0..steps {
        let batch = batcher.next_batch();
        let (_, g) = fedprox_loss_and_grad(&f, anchor, mu, spec, &batch)?;
        f.add_scaled(-cfg.eta, g.as_slice());
    }
    f.ensure_finite("local SGD")?;
    Ok(f)
}

/// `tau` minibatch SGD steps from `anchor`.
pub fn sgd_local_train(
    anchor: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<ParamVector> {
    prox_sgd(anchor, spec, data, cfg, 0.0, cfg.tau, seed)
}

/// `tau` SGD steps on the proximal objective with strength `cfg.mu_prox`.
pub fn fedprox_local_train(
    anchor: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<ParamVector> {
    prox_sgd(anchor, spec, data, cfg, cfg.mu_prox, cfg.tau, seed)
}

/// Result of one LSS local run.
#[derive(Debug, Clone)]
pub struct LssOutcome {
    /// Uniform average of the final pool.
    pub model: ParamVector,
    pub pool: ModelPool,
    /// Copies of the pool taken just before each new member was appended.
    pub pool_at_append: Vec<Vec<ParamVector>>,
    /// Regularized loss at every inner step.
    pub step_losses: Vec<f64>,
}

pub fn lss_local_train(
    anchor: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<LssOutcome> {
    cfg.validate()?;
    check_dims(anchor.dim(), spec.param_count())?;
    let mut batcher = MiniBatcher::new(data, cfg.batch_size, seed);
    let mut coeff_rng = seed::rng(seed::derive(seed, &[seed::STREAM_COEFFS]));
    let mut pool = ModelPool::new(anchor.clone());
    let mut pool_at_append = Vec::with_capacity(cfg.num_pool_models);
    let mut step_losses = Vec::with_capacity(cfg.num_pool_models * cfg.tau);

    for _ in 0..cfg.num_pool_models {
        pool_at_append.push(pool.members.clone());
        pool.push_average()?;
        for _ in 0..cfg.tau {
            let coeffs = sample_interp_coeffs(pool.len(), cfg.coeff_mode, &mut coeff_rng)?;
            let batch = batcher.next_batch();
            let (loss, grad) = lss_regularized_grad(pool.active(), &pool, &coeffs, spec, &batch, cfg)?;
            pool.active_mut().add_scaled(-cfg.eta, grad.as_slice());
            step_losses.push(loss);
        }
        pool.active().ensure_finite("LSS local training")?;
    }
    let model = pool.average()?;
    Ok(LssOutcome {
        model,
        pool,
        pool_at_append,
        step_losses,
    })
}
