//! Convergence-theory calculators, estimators for the heterogeneity and
//! noise constants, and loss-landscape diagnostics.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, predict_proba, Batch, MlpSpec};
use crate::params::{check_dims, raw_distance, uniform_weights, weighted_average, ParamVector};
use crate::seed;

/// Constants of the convex convergence analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Smoothness `beta`.
    pub beta: f64,
    /// Stochastic gradient noise bound `sigma`.
    pub sigma: f64,
    /// Local/global gradient gap `zeta`.
    pub zeta: f64,
    /// Bound `c` on the regularizer's per-step update.
    pub c: f64,
    /// Distance `d` from the initialization to the optimum.
    pub d: f64,
    pub clients: f64,
    pub tau: f64,
    pub rounds: f64,
    /// Total gradient computations `K`; `clients * tau * rounds` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<f64>,
}

impl TheoryParams {
    pub fn k(&self) -> f64 {
        self.total_steps.unwrap_or(self.clients * self.tau * self.rounds)
    }

    fn zeta_c(&self) -> f64 {
        self.zeta + self.c
    }

    fn check_nonneg(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("zeta", self.zeta), ("c", self.c), ("d", self.d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn check_counts(&self) -> Result<()> {
        for (name, v) in [("clients", self.clients), ("tau", self.tau), ("rounds", self.rounds)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// The four candidates whose minimum is the step size; a term whose noise
/// constant is zero is `+inf`.
pub fn lr_terms(p: &TheoryParams) -> Result<[f64; 4]> {
    p.check_nonneg()?;
    p.check_counts()?;
    if !(p.beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {}", p.beta)));
    }
    if !(p.d > 0.0) {
        return Err(Error::InvalidArgument(format!("d must be positive, got {}", p.d)));
    }
    let (m, tau, r, beta, d) = (p.clients, p.tau, p.rounds, p.beta, p.d);
    let t1 = 1.0 / (4.0 * beta);
    let (t2, t3) = if p.sigma == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (
            m.sqrt() * d / (tau.sqrt() * r.sqrt() * p.sigma),
            d.powf(2.0 / 3.0) / (tau.powf(2.0 / 3.0) * r.cbrt() * beta.cbrt() * p.sigma.powf(2.0 / 3.0)),
        )
    };
    let zc = p.zeta_c();
    let t4 = if zc == 0.0 {
        f64::INFINITY
    } else {
        d.powf(2.0 / 3.0) / (tau * r.cbrt() * beta.cbrt() * zc.powf(2.0 / 3.0))
    };
    Ok([t1, t2, t3, t4])
}

/// Client learning rate: the minimum of [`lr_terms`].
pub fn lr_choice(p: &TheoryParams) -> Result<f64> {
    Ok(lr_terms(p)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Which numerator the first bound term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstTerm {
    /// `2 beta R^2 / (tau R)`, as published.
    #[default]
    AsPrinted,
    /// `2 beta d^2 / (tau R)`, the dimensionally consistent reading.
    DistanceSquared,
}

/// The four right-hand-side terms of the convergence bound.
pub fn bound_terms(p: &TheoryParams, first: FirstTerm) -> Result<[f64; 4]> {
    p.check_nonneg()?;
    p.check_counts()?;
    if !(p.beta >= 0.0 && p.beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be non-negative, got {}", p.beta)));
    }
    let (m, tau, r, beta, d, sigma) = (p.clients, p.tau, p.rounds, p.beta, p.d, p.sigma);
    let numerator = match first {
        FirstTerm::AsPrinted => r * r,
        FirstTerm::DistanceSquared => d * d,
    };
    let t1 = 2.0 * beta * numerator / (tau * r);
    let t2 = 2.0 * sigma * d / (m * tau * r).sqrt();
    let t3 = 5.0 * beta.cbrt() * sigma.powf(2.0 / 3.0) * d.powf(4.0 / 3.0) / (tau.cbrt() * r.powf(2.0 / 3.0));
    let t4 = 15.0 * beta.cbrt() * p.zeta_c().powf(2.0 / 3.0) * d.powf(4.0 / 3.0) / r.powf(2.0 / 3.0);
    Ok([t1, t2, t3, t4])
}

pub fn convergence_bound(p: &TheoryParams, first: FirstTerm) -> Result<f64> {
    Ok(bound_terms(p, first)?.iter().sum())
}

/// Largest local step count for which the `O(1/sqrt(K))` term dominates:
/// `sigma / (zeta + c) * sqrt(sigma / (d beta) * K^(1/2) / M^2)`.
pub fn max_local_steps(p: &TheoryParams) -> Result<f64> {
    p.check_nonneg()?;
    if p.zeta_c() == 0.0 {
        return Err(Error::Unbounded);
    }
    if !(p.d > 0.0) || !(p.beta > 0.0) {
        return Err(Error::InvalidArgument("d and beta must be positive".into()));
    }
    let k = p.k();
    if !(k >= 1.0) {
        return Err(Error::InvalidArgument(format!("K must be at least 1, got {k}")));
    }
    if !(p.clients > 0.0) {
        return Err(Error::InvalidArgument("clients must be positive".into()));
    }
    let inner = p.sigma / (p.d * p.beta) * k.sqrt() / (p.clients * p.clients);
    Ok(p.sigma / p.zeta_c() * inner.sqrt())
}

// ---------------------------------------------------------------------------
// Assumption constants
// ---------------------------------------------------------------------------

/// `max_i |g_i - sum_j w_j g_j|` for client gradients `g_i`.
pub fn gradient_dissimilarity(grads: &[ParamVector], weights: &[f64]) -> Result<f64> {
    let global = weighted_average(grads, weights)?;
    Ok(grads
        .iter()
        .map(|g| raw_distance(g.as_slice(), global.as_slice()))
        .fold(0.0, f64::max))
}

/// Empirical `zeta` at `params`: the largest distance between a client's
/// full-batch gradient and the data-weighted global gradient. The supremum
/// over models is only sampled at the given point, so this is a lower bound.
pub fn estimate_zeta(params: &ParamVector, spec: &MlpSpec, clients: &[Dataset]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let grads = clients
        .iter()
        .map(|d| loss_and_grad(params, spec, &d.batch()).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = clients.iter().map(Dataset::len).sum();
    let weights: Vec<f64> = clients.iter().map(|d| d.len() as f64 / total as f64).collect();
    gradient_dissimilarity(&grads, &weights)
}

/// Root-mean-square distance between minibatch and full-batch gradients over
/// `num_draws` random minibatches (without replacement within a batch).
pub fn estimate_sigma(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch_size: usize,
    num_draws: usize,
    seed: u64,
) -> Result<f64> {
    if num_draws < 2 {
        return Err(Error::InvalidArgument("num_draws must be at least 2".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let (_, full) = loss_and_grad(params, spec, &data.batch())?;
    if batch_size >= data.len() {
        return Ok(0.0);
    }
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for _ in 0..num_draws {
        let (chosen, _) = order.partial_shuffle(&mut rng, batch_size);
        let sub = data.subset(chosen)?;
        let (_, g) = loss_and_grad(params, spec, &sub.batch())?;
        let d = raw_distance(g.as_slice(), full.as_slice());
        total += d * d;
    }
    Ok((total / num_draws as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Variance / covariance / locality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bvcl {
    pub variance: f64,
    pub covariance: f64,
    pub locality: f64,
}

/// Prediction statistics of a set of averaged models on `test`.
///
/// Class probabilities serve as the scalar prediction functions. At each test
/// point and class, `variance` is the population variance across models and
/// `covariance` the mean of `(p_i - p_mean)(p_j - p_mean)` over ordered pairs
/// `i != j`; both are averaged over points and classes. `locality` is the
/// largest distance of a model from the models' uniform average.
pub fn bvcl_diagnostics(models: &[ParamVector], spec: &MlpSpec, test: &Dataset) -> Result<Bvcl> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("bvcl diagnostics need at least two models".into()));
    }
    let preds = models
        .iter()
        .map(|m| predict_proba(m, spec, &test.batch()))
        .collect::<Result<Vec<_>>>()?;
    let n = models.len() as f64;
    let outputs = preds[0].len();
    let (mut var_sum, mut cov_sum) = (0.0, 0.0);
    for k in 0..outputs {
        let mean = preds.iter().map(|p| p[k]).sum::<f64>() / n;
        let dev: Vec<f64> = preds.iter().map(|p| p[k] - mean).collect();
        let sq: f64 = dev.iter().map(|d| d * d).sum();
        let total: f64 = dev.iter().sum();
        var_sum += sq / n;
        // sum_{i != j} d_i d_j = (sum d)^2 - sum d^2
        cov_sum += (total * total - sq) / (n * (n - 1.0));
    }
    Ok(Bvcl {
        variance: var_sum / outputs as f64,
        covariance: cov_sum / outputs as f64,
        locality: locality(models)?,
    })
}

/// `max_i |f_i - mean(f)|`.
pub fn locality(models: &[ParamVector]) -> Result<f64> {
    let avg = weighted_average(models, &uniform_weights(models.len()))?;
    Ok(models
        .iter()
        .map(|m| raw_distance(m.as_slice(), avg.as_slice()))
        .fold(0.0, f64::max))
}

/// Moments of repeated ensemble predictions, indexed `[draw][member][output]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleMoments {
    /// Mean over members and outputs of each member's variance across draws.
    pub variance: f64,
    /// Mean over member pairs `i != j` and outputs of their covariance across draws.
    pub covariance: f64,
    /// Mean over outputs of the variance across draws of the member mean.
    pub ensemble_variance: f64,
}

/// Across-draw moments of an ensemble's predictions. With population
/// normalization the split `ensemble_variance = variance / N + (N - 1) / N *
/// covariance` holds exactly.
pub fn ensemble_moments(samples: &[Vec<Vec<f64>>]) -> Result<EnsembleMoments> {
    let draws = samples.len();
    if draws < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let members = samples[0].len();
    if members < 2 {
        return Err(Error::InvalidArgument("need at least two members".into()));
    }
    let outputs = samples[0][0].len();
    for draw in samples {
        check_dims(members, draw.len())?;
        for m in draw {
            check_dims(outputs, m.len())?;
        }
    }
    let s = draws as f64;
    let n = members as f64;
    let (mut var_sum, mut cov_sum, mut ens_sum) = (0.0, 0.0, 0.0);
    for k in 0..outputs {
        let means: Vec<f64> = (0..members)
            .map(|i| samples.iter().map(|d| d[i][k]).sum::<f64>() / s)
            .collect();
        let mut cov = vec![0.0; members * members];
        for d in samples {
            for i in 0..members {
                let di = d[i][k] - means[i];
                for j in 0..members {
                    cov[i * members + j] += di * (d[j][k] - means[j]);
                }
            }
        }
        for c in &mut cov {
            *c /= s;
        }
        let diag: f64 = (0..members).map(|i| cov[i * members + i]).sum();
        let all: f64 = cov.iter().sum();
        var_sum += diag / n;
        cov_sum += (all - diag) / (n * (n - 1.0));

        let ens_mean = means.iter().sum::<f64>() / n;
        let ens_var = samples
            .iter()
            .map(|d| {
                let m = (0..members).map(|i| d[i][k]).sum::<f64>() / n;
                (m - ens_mean) * (m - ens_mean)
            })
            .sum::<f64>()
            / s;
        ens_sum += ens_var;
    }
    let o = outputs as f64;
    Ok(EnsembleMoments {
        variance: var_sum / o,
        covariance: cov_sum / o,
        ensemble_variance: ens_sum / o,
    })
}

// ---------------------------------------------------------------------------
// Sharpness
// ---------------------------------------------------------------------------

/// Dominant eigenvalue of the Hessian of the function whose gradient is
/// `grad`, at `point`, by power iteration on finite-difference
/// Hessian-vector products `(g(f + e v) - g(f - e v)) / 2e` with
/// `e = 1e-4 (1 + |f|) / |v|`. Returns the final Rayleigh quotient.
pub fn power_iteration<G>(grad: G, point: &[f64], iters: usize, rng: &mut seed::Rng) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let dim = point.len();
    let f_norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
    let random_unit = |rng: &mut seed::Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let eps = 1e-4 * (1.0 + f_norm) / v_norm;
        let plus: Vec<f64> = point.iter().zip(v).map(|(f, v)| f + eps * v).collect();
        let minus: Vec<f64> = point.iter().zip(v).map(|(f, v)| f - eps * v).collect();
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        check_dims(dim, gp.len())?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    };

    let mut v = random_unit(rng);
    let mut reseeded = false;
    let mut eig = 0.0;
    let mut it = 0;
    while it < iters {
        let hv = hvp(&v)?;
        let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Degenerate("non-finite Hessian-vector product".into()));
        }
        if norm == 0.0 {
            if reseeded {
                return Err(Error::Degenerate("Hessian-vector product vanished twice".into()));
            }
            reseeded = true;
            v = random_unit(rng);
            continue;
        }
        eig = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        v = hv.into_iter().map(|x| x / norm).collect();
        it += 1;
    }
    Ok(eig)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median over minibatches of the dominant loss-Hessian eigenvalue. The data
/// is shuffled with `seed` and cut into consecutive batches of `batch_size`
/// (the last one may be short).
pub fn hessian_top_eig(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch_size: usize,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    check_dims(params.dim(), spec.param_count())?;
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut eigs = Vec::new();
    for chunk in order.chunks(batch_size) {
        let sub = data.subset(chunk)?;
        let batch = sub.batch();
        eigs.push(hessian_top_eig_on_batch(params, spec, &batch, iters, &mut rng)?);
    }
    Ok(median(eigs))
}

pub fn hessian_top_eig_on_batch(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &Batch<'_>,
    iters: usize,
    rng: &mut seed::Rng,
) -> Result<f64> {
    let grad = |f: &[f64]| -> Result<Vec<f64>> {
        let p = ParamVector::new(f.to_vec())?;
        Ok(loss_and_grad(&p, spec, batch)?.1.into_vec())
    };
    power_iteration(grad, params.as_slice(), iters, rng)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Ordered `key: value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.render().as_bytes())?;
        Ok(())
    }

    /// Parses text produced by [`Report::render`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Report::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(": ").ok_or_else(|| Error::Malformed {
                what: "report",
                detail: format!("line {} has no `key: value` pair", i + 1),
            })?;
            r.push(k, v);
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, gen_blobs};
    use crate::model::init_params;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    fn params(beta: f64, sigma: f64, zeta: f64, c: f64, d: f64, m: f64, tau: f64, r: f64) -> TheoryParams {
        TheoryParams {
            beta,
            sigma,
            zeta,
            c,
            d,
            clients: m,
            tau,
            rounds: r,
            total_steps: None,
        }
    }

    #[test]
    fn lr_examples() {
        let p = params(1.0, 1.0, 0.5, 0.5, 1.0, 4.0, 8.0, 2.0);
        let t = lr_terms(&p).unwrap();
        // 1/4, 2/4, 1/(4 * 2^(1/3)), 1/(8 * 2^(1/3))
        assert!((t[0] - 0.25).abs() < 1e-15);
        assert!((t[1] - 0.5).abs() < 1e-15);
        assert!((t[2] - 0.25 * 2f64.powf(-1.0 / 3.0)).abs() < 1e-12);
        assert!((t[3] - 0.125 * 2f64.powf(-1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(lr_choice(&p).unwrap(), t[3]);

        let quiet = params(2.0, 0.0, 0.0, 0.0, 1.0, 4.0, 8.0, 2.0);
        assert_eq!(lr_choice(&quiet).unwrap(), 1.0 / 8.0);

        let noisy = params(1.0, 1e6, 1e6, 1e6, 1.0, 4.0, 8.0, 2.0);
        let t = lr_terms(&noisy).unwrap();
        assert!(t[0] > t[1].min(t[2]).min(t[3]));
        assert_eq!(lr_choice(&noisy).unwrap(), t[1].min(t[2]).min(t[3]));

        assert!(lr_choice(&params(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)).is_err());
        assert!(lr_choice(&params(1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn bound_examples() {
        let quiet = params(1.5, 0.0, 0.0, 0.0, 2.0, 4.0, 8.0, 3.0);
        let t = bound_terms(&quiet, FirstTerm::AsPrinted).unwrap();
        assert_eq!(&t[1..], &[0.0, 0.0, 0.0]);
        assert!((t[0] - 2.0 * 1.5 * 9.0 / 24.0).abs() < 1e-15);
        let alt = convergence_bound(&quiet, FirstTerm::DistanceSquared).unwrap();
        assert!((alt - 2.0 * 1.5 * 4.0 / 24.0).abs() < 1e-15);

        let p = params(1.0, 1.0, 0.5, 0.5, 1.0, 4.0, 8.0, 2.0);
        let a = bound_terms(&p, FirstTerm::AsPrinted).unwrap();
        let b = bound_terms(&TheoryParams { tau: 16.0, ..p }, FirstTerm::AsPrinted).unwrap();
        assert!(b[0] < a[0] && b[2] < a[2] && b[3] == a[3]);

        assert!(convergence_bound(&TheoryParams { tau: 0.0, ..p }, FirstTerm::AsPrinted).is_err());
    }

    #[test]
    fn step_ceiling_examples() {
        let mut p = params(1.0, 2.0, 0.5, 0.5, 1.0, 2.0, 1.0, 1.0);
        p.total_steps = Some(256.0);
        let v = max_local_steps(&p).unwrap();
        assert!((v - 2.0 * 8f64.sqrt()).abs() < 1e-12);

        let sixteen = max_local_steps(&TheoryParams {
            total_steps: Some(256.0 * 16.0),
            ..p
        })
        .unwrap();
        assert!((sixteen / v - 2.0).abs() < 1e-12);

        let doubled = max_local_steps(&TheoryParams { zeta: 1.5, ..p }).unwrap();
        assert!((doubled / v - 0.5).abs() < 1e-12);

        assert!(matches!(
            max_local_steps(&TheoryParams { zeta: 0.0, c: 0.0, ..p }),
            Err(Error::Unbounded)
        ));
    }

    #[test]
    fn k_defaults_to_product() {
        let p = params(1.0, 1.0, 1.0, 1.0, 1.0, 3.0, 4.0, 5.0);
        assert_eq!(p.k(), 60.0);
    }

    #[test]
    fn dissimilarity_of_opposed_gradients() {
        let z = gradient_dissimilarity(&[pv(&[1.0, 0.0]), pv(&[-1.0, 0.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(z, 1.0);
    }

    #[test]
    fn zeta_on_constructed_instance() {
        // one feature x = 2, two classes, zero weights: softmax is (1/2, 1/2),
        // so client gradients are +/-(-1, 1, -0.5, 0.5) and cancel globally.
        let spec = MlpSpec::softmax_regression(1, 2);
        let a = Dataset::new(vec![2.0], vec![0], 1, 2).unwrap();
        let b = Dataset::new(vec![2.0], vec![1], 1, 2).unwrap();
        let z = estimate_zeta(&ParamVector::zeros(4), &spec, &[a.clone(), b]).unwrap();
        assert!((z - 2.5f64.sqrt()).abs() < 1e-15);

        let same = estimate_zeta(&ParamVector::zeros(4), &spec, &[a.clone(), a]).unwrap();
        assert!(same < 1e-10);
    }

    #[test]
    fn zeta_tracks_heterogeneity() {
        let data = gen_blobs(10, 40, 6, 1.0, 4).unwrap();
        let spec = MlpSpec::softmax_regression(6, 10);
        let f = init_params(&spec, 2);
        let avg = |alpha: f64| {
            (0..10)
                .map(|s| {
                    let plan = dirichlet_partition(&data, 5, alpha, s).unwrap();
                    estimate_zeta(&f, &spec, &plan.client_datasets(&data).unwrap()).unwrap()
                })
                .sum::<f64>()
                / 10.0
        };
        assert!(avg(0.1) > avg(100.0));
    }

    #[test]
    fn sigma_edge_cases() {
        let data = gen_blobs(3, 10, 3, 1.0, 1).unwrap();
        let spec = MlpSpec::softmax_regression(3, 3);
        let f = init_params(&spec, 1);
        assert_eq!(estimate_sigma(&f, &spec, &data, 30, 4, 0).unwrap(), 0.0);
        assert_eq!(estimate_sigma(&f, &spec, &data, 100, 4, 0).unwrap(), 0.0);
        assert!(estimate_sigma(&f, &spec, &data, 5, 1, 0).is_err());
        assert!(estimate_sigma(&f, &spec, &data, 5, 8, 0).unwrap() > 0.0);

        let same = Dataset::new([0.5, -1.0, 2.0].repeat(12), vec![1; 12], 3, 3).unwrap();
        assert!(estimate_sigma(&f, &spec, &same, 4, 16, 3).unwrap() < 1e-10);
    }

    #[test]
    fn bvcl_examples() {
        let spec = MlpSpec::softmax_regression(3, 3);
        let test = gen_blobs(3, 5, 3, 1.0, 1).unwrap();
        let f = init_params(&spec, 4);
        let d = bvcl_diagnostics(&[f.clone(), f.clone(), f.clone()], &spec, &test).unwrap();
        // the three-way mean is only exact up to rounding
        assert!(d.variance < 1e-15 && d.covariance.abs() < 1e-15 && d.locality < 1e-15);

        let g = init_params(&spec, 5);
        let d = bvcl_diagnostics(&[f.clone(), g.clone()], &spec, &test).unwrap();
        let half = 0.5 * raw_distance(f.as_slice(), g.as_slice());
        assert!((d.locality - half).abs() < 1e-12);
        assert!(d.variance > 0.0);

        assert!(bvcl_diagnostics(&[f], &spec, &test).is_err());
    }

    #[test]
    fn bvcl_is_exchangeable() {
        let spec = MlpSpec::softmax_regression(3, 3);
        let test = gen_blobs(3, 5, 3, 1.0, 1).unwrap();
        let models: Vec<ParamVector> = (0..4).map(|s| init_params(&spec, s)).collect();
        let a = bvcl_diagnostics(&models, &spec, &test).unwrap();
        let rev: Vec<ParamVector> = models.iter().rev().cloned().collect();
        let b = bvcl_diagnostics(&rev, &spec, &test).unwrap();
        assert!((a.variance - b.variance).abs() < 1e-12);
        assert!((a.covariance - b.covariance).abs() < 1e-12);
        assert!((a.locality - b.locality).abs() < 1e-12);
    }

    #[test]
    fn ensemble_variance_split() {
        use rand::Rng as _;
        let mut rng = seed::rng(11);
        for members in [2usize, 3, 7] {
            let samples: Vec<Vec<Vec<f64>>> = (0..40)
                .map(|_| {
                    let shared: f64 = rng.random();
                    (0..members)
                        .map(|_| (0..5).map(|_| shared + rng.random::<f64>()).collect())
                        .collect()
                })
                .collect();
            let m = ensemble_moments(&samples).unwrap();
            let n = members as f64;
            let split = m.variance / n + (n - 1.0) / n * m.covariance;
            assert!((m.ensemble_variance - split).abs() < 1e-12);
            assert!(m.covariance > 0.0);
        }
    }

    #[test]
    fn power_iteration_on_quadratic() {
        let mut rng = seed::rng(3);
        let grad = |f: &[f64]| Ok(vec![3.0 * f[0], f[1]]);
        let eig = power_iteration(grad, &[0.4, -1.2], 50, &mut rng).unwrap();
        assert!((eig - 3.0).abs() / 3.0 < 0.01);

        let mut rng = seed::rng(3);
        let doubled = |f: &[f64]| Ok(vec![6.0 * f[0], 2.0 * f[1]]);
        let eig2 = power_iteration(doubled, &[0.4, -1.2], 50, &mut rng).unwrap();
        assert!((eig2 / eig - 2.0).abs() < 0.02);
    }

    #[test]
    fn power_iteration_flags_flat_functions() {
        let mut rng = seed::rng(0);
        let flat = |_: &[f64]| Ok(vec![1.0, 1.0]);
        assert!(matches!(
            power_iteration(flat, &[0.0, 0.0], 5, &mut rng),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cross_entropy_sharpness_is_non_negative() {
        let data = gen_blobs(3, 20, 4, 1.0, 2).unwrap();
        let spec = MlpSpec::softmax_regression(4, 3);
        for s in 0..5 {
            let f = init_params(&spec, s);
            let eig = hessian_top_eig(&f, &spec, &data, 16, 30, s).unwrap();
            assert!(eig >= 0.0, "{eig}");
        }
    }

    #[test]
    fn report_round_trip() {
        let mut r = Report::new();
        r.push("zeta_hat", 0.25).push("strategy", "lss");
        let text = r.render();
        assert_eq!(text, "zeta_hat: 0.25\nstrategy: lss\n");
        assert_eq!(Report::parse(&text).unwrap(), r);
        assert_eq!(r.get("strategy"), Some("lss"));
        assert!(Report::parse("nonsense").is_err());
    }
}
