//! Splitting a training set across clients: Dirichlet label shift, IID, and
//! synthetic feature shift via per-client affine maps.

use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    Dirichlet { alpha: f64 },
    Iid,
    FeatureShift,
}

/// Disjoint assignment of training-set row indices to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub client_indices: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    /// `p_i = |D_i| / sum_j |D_j|`.
    pub fn data_weights(&self) -> Vec<f64> {
        let total: usize = self.client_indices.iter().map(Vec::len).sum();
        self.client_indices
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect()
    }

    /// Checks disjointness, exact coverage of `0..n`, and non-empty clients.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, idx) in self.client_indices.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("client {c} has no samples")));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "index {i} out of range or assigned twice (client {c})"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("index {i} is not assigned to any client")));
        }
        Ok(())
    }

    pub fn client_datasets(&self, data: &Dataset) -> Result<Vec<Dataset>> {
        self.client_indices.iter().map(|idx| data.subset(idx)).collect()
    }

    /// Pretty-printed JSON: `{ "scheme": {..}, "seed": .., "client_indices": [[..], ..] }`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn check_client_count(data: &Dataset, num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be at least 1".into()));
    }
    if num_clients > data.len() {
        return Err(Error::InvalidArgument(format!(
            "{num_clients} clients but only {} samples",
            data.len()
        )));
    }
    Ok(())
}

/// Moves one sample from the largest client (lowest id on ties) into every
/// empty client until none is empty.
fn rebalance(clients: &mut [Vec<usize>]) {
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..clients.len())
            .rev()
            .max_by_key(|&c| clients[c].len())
            .expect("non-empty client list");
        let moved = clients[donor].pop().expect("donor has at least two samples");
        clients[empty].push(moved);
    }
}

/// Label-shift partition: for each class, proportions over clients are drawn
/// from `Dirichlet(alpha * 1_M)` and the shuffled class indices are cut at the
/// cumulative proportions.
pub fn dirichlet_partition(data: &Dataset, num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    check_client_count(data, num_clients)?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::STREAM_PARTITION]));
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut clients = vec![Vec::new(); num_clients];
    for mut idx in data.indices_by_class() {
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            // every gamma draw underflowed; hand the class to one client
            let mut p = vec![0.0; num_clients];
            p[rng.random_range(0..num_clients)] = 1.0;
            p
        };
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == num_clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            clients[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    rebalance(&mut clients);
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Dirichlet { alpha },
        seed,
        client_indices: clients,
    })
}

/// Stratified IID split: each class is shuffled and dealt round-robin, with
/// the starting client rotating from class to class.
pub fn iid_partition(data: &Dataset, num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    check_client_count(data, num_clients)?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::STREAM_PARTITION]));
    let mut clients = vec![Vec::new(); num_clients];
    let mut next = 0;
    for mut idx in data.indices_by_class() {
        idx.shuffle(&mut rng);
        for i in idx {
            clients[next].push(i);
            next = (next + 1) % num_clients;
        }
    }
    rebalance(&mut clients);
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Iid,
        seed,
        client_indices: clients,
    })
}

/// Severity of the synthetic feature shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftPolicy {
    /// Largest rotation angle applied in each random plane.
    pub max_angle: f64,
    /// Per-coordinate scales are log-uniform in `[min_scale, max_scale]`.
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for ShiftPolicy {
    fn default() -> Self {
        Self {
            max_angle: FRAC_PI_4,
            min_scale: 0.8,
            max_scale: 1.25,
        }
    }
}

impl ShiftPolicy {
    pub fn identity() -> Self {
        Self {
            max_angle: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
        }
    }
}

/// `x -> S R x` with `R` orthogonal and `S` a positive diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub inverse: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        Self {
            dim,
            matrix: m.clone(),
            inverse: m,
        }
    }

    /// A product of `dim` Givens rotations in random coordinate planes, each
    /// by an angle in `[-max_angle, max_angle]`, followed by random scaling.
    pub fn random(dim: usize, policy: &ShiftPolicy, rng: &mut seed::Rng) -> Self {
        let mut rot = Self::identity(dim).matrix;
        if dim >= 2 {
            for _ in 0..dim {
                let i = rng.random_range(0..dim);
                let mut j = rng.random_range(0..dim - 1);
                if j >= i {
                    j += 1;
                }
                let theta = if policy.max_angle > 0.0 {
                    rng.random_range(-policy.max_angle..=policy.max_angle)
                } else {
                    0.0
                };
                let (s, c) = theta.sin_cos();
                // left-multiply by the rotation in plane (i, j)
                for col in 0..dim {
                    let a = rot[i * dim + col];
                    let b = rot[j * dim + col];
                    rot[i * dim + col] = c * a - s * b;
                    rot[j * dim + col] = s * a + c * b;
                }
            }
        }
        let (lo, hi) = (policy.min_scale.ln(), policy.max_scale.ln());
        let scales: Vec<f64> = (0..dim)
            .map(|_| if hi > lo { rng.random_range(lo..=hi).exp() } else { lo.exp() })
            .collect();
        let mut matrix = vec![0.0; dim * dim];
        let mut inverse = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                matrix[r * dim + c] = scales[r] * rot[r * dim + c];
                // (S R)^-1 = R^T S^-1
                inverse[r * dim + c] = rot[c * dim + r] / scales[c];
            }
        }
        Self { dim, matrix, inverse }
    }

    fn mul(m: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
        (0..dim)
            .map(|r| m[r * dim..(r + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        Self::mul(&self.matrix, self.dim, x)
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        Self::mul(&self.inverse, self.dim, y)
    }

    pub fn apply_to(&self, data: &Dataset) -> Result<Dataset> {
        crate::params::check_dims(self.dim, data.input_dim())?;
        data.map_features(|x| self.apply(x))
    }
}

/// IID index split plus one affine feature transform per client. Client data
/// (and any evaluation data attributed to that client) should be passed
/// through the matching transform.
pub fn feature_shift_partition(
    data: &Dataset,
    num_clients: usize,
    seed: u64,
    policy: &ShiftPolicy,
) -> Result<(PartitionPlan, Vec<AffineTransform>)> {
    let mut plan = iid_partition(data, num_clients, seed)?;
    plan.scheme = PartitionScheme::FeatureShift;
    let mut rng = seed::rng(seed::derive(seed, &[seed::STREAM_PARTITION, 1]));
    let transforms = (0..num_clients)
        .map(|_| AffineTransform::random(data.input_dim(), policy, &mut rng))
        .collect();
    Ok((plan, transforms))
}

/// Total-variation distance between the label marginal of `indices` and the
/// marginal of the whole dataset.
pub fn label_tv_distance(data: &Dataset, indices: &[usize]) -> f64 {
    let global = data.class_counts();
    let mut local = vec![0usize; data.num_classes()];
    for &i in indices {
        local[data.labels()[i]] += 1;
    }
    let n = data.len() as f64;
    let m = indices.len().max(1) as f64;
    0.5 * global
        .iter()
        .zip(&local)
        .map(|(&g, &l)| (g as f64 / n - l as f64 / m).abs())
        .sum::<f64>()
}
