//! Labelled datasets, the synthetic blob generator, and train/val/test splits.

mod idx;
mod partition;

pub use idx::{load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{
    dirichlet_partition, feature_shift_partition, iid_partition, label_tv_distance, AffineTransform,
    PartitionPlan, PartitionScheme, ShiftPolicy,
};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::params::check_dims;
use crate::seed;

/// Distance of every blob center from the origin.
pub const BLOB_CENTER_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        check_dims(features.len(), labels.len() * input_dim)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Dataset::new"));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            features: &self.features,
            labels: &self.labels,
            input_dim: self.input_dim,
        }
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Empty("subset"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {} rows", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        })
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            check_dims(first.input_dim, p.input_dim)?;
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(features, labels, first.input_dim, first.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub(crate) fn map_features(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Dataset> {
        let features: Vec<f64> = (0..self.len()).flat_map(|i| f(self.row(i))).collect();
        Dataset::new(features, self.labels.clone(), self.input_dim, self.num_classes)
    }
}

/// Unit-norm class directions scaled to [`BLOB_CENTER_RADIUS`]. They depend
/// only on the class count and dimension, so datasets drawn with different
/// seeds share the same classes.
pub fn blob_centers(num_classes: usize, input_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed::derive(0x000B_10B5, &[num_classes as u64, input_dim as u64]));
    (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                break v.iter().map(|x| BLOB_CENTER_RADIUS * x / norm).collect();
            }
        })
        .collect()
}

/// Isotropic Gaussian blobs around [`blob_centers`], `per_class` rows per
/// class in class-major order.
pub fn gen_blobs(num_classes: usize, per_class: usize, input_dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || input_dim == 0 {
        return Err(Error::InvalidArgument(
            "gen_blobs needs num_classes >= 2 and positive per_class, input_dim".into(),
        ));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(format!("spread must be positive, got {spread}")));
    }
    let centers = blob_centers(num_classes, input_dim);
    let mut rng = seed::rng(seed::derive(seed, &[seed::STREAM_DATA]));
    let mut features = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, input_dim, num_classes)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Stratified split: every class is shuffled and cut by `val_frac` and
/// `test_frac` (rounded down); the remainder goes to train.
pub fn train_val_test_split(data: &Dataset, val_frac: f64, test_frac: f64, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "bad split fractions val={val_frac} test={test_frac}"
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::STREAM_SPLIT]));
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut idx in data.indices_by_class() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (n as f64 * val_frac).floor() as usize;
        let n_test = (n as f64 * test_frac).floor() as usize;
        test.extend_from_slice(&idx[..n_test]);
        val.extend_from_slice(&idx[n_test..n_test + n_val]);
        train.extend_from_slice(&idx[n_test + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits {
        train: data.subset(&train)?,
        val: data.subset(&val)?,
        test: data.subset(&test)?,
    })
}
