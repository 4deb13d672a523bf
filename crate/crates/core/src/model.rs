//! Small dense classifiers over flat parameter vectors: softmax regression
//! when `hidden_dims` is empty, otherwise an MLP. Gradients are derived by
//! hand; loss is mean cross-entropy over the batch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{check_dims, LayerShape, ParamVector, ShapeSpec};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn shape(&self) -> ShapeSpec {
        let widths = self.widths();
        ShapeSpec {
            layers: widths
                .windows(2)
                .map(|w| LayerShape {
                    rows: w[1],
                    cols: w[0],
                    has_bias: true,
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().param_count()
    }

    fn layers(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.widths()
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// Borrowed view of a labelled minibatch: row-major features.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub input_dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_dims(features.len(), labels.len() * input_dim)?;
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed::derive(seed, &[seed::STREAM_INIT]));
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let s = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut values[layer.weights..layer.bias] {
            *w = rng.random_range(-s..=s);
        }
    }
    ParamVector::new(values).expect("glorot init is finite")
}

fn check_inputs(params: &ParamVector, spec: &MlpSpec, batch: &Batch<'_>) -> Result<()> {
    check_dims(params.dim(), spec.param_count())?;
    check_dims(batch.input_dim, spec.input_dim)?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Per-sample forward pass; keeps pre-activations and outputs of every layer.
struct Forward {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward(params: &[f64], spec: &MlpSpec, layers: &[LayerSlot], x: &[f64], keep: bool) -> Forward {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    let mut input = x.to_vec();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let w = &params[layer.weights..layer.bias];
        let b = &params[layer.bias..layer.bias + layer.fan_out];
        let z: Vec<f64> = (0..layer.fan_out)
            .map(|o| {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                row.iter().zip(&input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[o]
            })
            .collect();
        let a = if l == last {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        if keep {
            post.push(std::mem::replace(&mut input, a));
            pre.push(z);
        } else {
            input = a;
        }
    }
    post.push(input);
    Forward { pre, post }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Logits for every row of `batch`, row-major `len x num_classes`.
pub fn logits(params: &ParamVector, spec: &MlpSpec, batch: &Batch<'_>) -> Result<Vec<f64>> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layers();
    let mut out = Vec::with_capacity(batch.len() * spec.num_classes);
    for i in 0..batch.len() {
        let f = forward(params.as_slice(), spec, &layers, batch.row(i), false);
        out.extend_from_slice(f.post.last().unwrap());
    }
    Ok(out)
}

/// Softmax class probabilities, row-major `len x num_classes`.
pub fn predict_proba(params: &ParamVector, spec: &MlpSpec, batch: &Batch<'_>) -> Result<Vec<f64>> {
    let mut z = logits(params, spec, batch)?;
    for row in z.chunks_mut(spec.num_classes) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok(z)
}

/// Mean cross-entropy and its exact gradient.
pub fn loss_and_grad(params: &ParamVector, spec: &MlpSpec, batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    check_inputs(params, spec, batch)?;
    let p = params.as_slice();
    let layers = spec.layers();
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;

    for i in 0..batch.len() {
        let fw = forward(p, spec, &layers, batch.row(i), true);
        let z = fw.post.last().unwrap();
        let lse = log_sum_exp(z);
        let label = batch.labels[i];
        loss += lse - z[label];

        // dL/dz for softmax + cross-entropy
        let mut delta: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        delta[label] -= 1.0;

        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let input = &fw.post[l];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.weights + o * layer.fan_in..layer.weights + (o + 1) * layer.fan_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[layer.bias + o] += d;
            }
            if l > 0 {
                let w = &p[layer.weights..layer.bias];
                let prev_pre = &fw.pre[l - 1];
                let prev_post = &fw.post[l];
                delta = (0..layer.fan_in)
                    .map(|j| {
                        let back: f64 = (0..layer.fan_out).map(|o| w[o * layer.fan_in + j] * delta[o]).sum();
                        back * spec.activation.derivative(prev_pre[j], prev_post[j])
                    })
                    .collect();
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    let grad = ParamVector::new(grad).map_err(|_| Error::NonFinite("loss_and_grad"))?;
    Ok((loss * scale, grad))
}

/// Mean cross-entropy only.
pub fn loss(params: &ParamVector, spec: &MlpSpec, batch: &Batch<'_>) -> Result<f64> {
    let z = logits(params, spec, batch)?;
    let total: f64 = z
        .chunks(spec.num_classes)
        .zip(batch.labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / batch.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Fraction of rows whose argmax logit (lowest index on ties) matches the label.
pub fn accuracy(params: &ParamVector, spec: &MlpSpec, data: &Batch<'_>) -> Result<f64> {
    let z = logits(params, spec, data)?;
    let correct = z
        .chunks(spec.num_classes)
        .zip(data.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Loss and accuracy from a single forward pass.
pub fn evaluate(params: &ParamVector, spec: &MlpSpec, data: &Batch<'_>) -> Result<(f64, f64)> {
    let z = logits(params, spec, data)?;
    let mut total = 0.0;
    let mut correct = 0usize;
    for (row, &y) in z.chunks(spec.num_classes).zip(data.labels) {
        total += log_sum_exp(row) - row[y];
        correct += (argmax(row) == y) as usize;
    }
    let n = data.len() as f64;
    Ok((total / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_instance(seed: u64, hidden: Vec<usize>, act: Activation) -> (MlpSpec, ParamVector, Vec<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let spec = MlpSpec {
            input_dim: rng.random_range(1..5),
            hidden_dims: hidden,
            num_classes: rng.random_range(2..5),
            activation: act,
        };
        let p: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rng.random_range(1..6);
        let x: Vec<f64> = (0..n * spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
        (spec, ParamVector::new(p).unwrap(), x, y)
    }

    fn fd_grad(params: &ParamVector, spec: &MlpSpec, batch: &Batch<'_>, eps: f64) -> Vec<f64> {
        (0..params.dim())
            .map(|k| {
                let mut plus = params.clone().into_vec();
                let mut minus = plus.clone();
                plus[k] += eps;
                minus[k] -= eps;
                let lp = loss(&ParamVector::new(plus).unwrap(), spec, batch).unwrap();
                let lm = loss(&ParamVector::new(minus).unwrap(), spec, batch).unwrap();
                (lp - lm) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_regression_dim() {
        assert_eq!(MlpSpec::softmax_regression(2, 3).param_count(), 9);
        let spec = MlpSpec {
            input_dim: 4,
            hidden_dims: vec![5, 3],
            num_classes: 2,
            activation: Activation::Tanh,
        };
        assert_eq!(spec.param_count(), 4 * 5 + 5 + 5 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = MlpSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            num_classes: 2,
            activation: Activation::Relu,
        };
        let a = init_params(&spec, 11);
        assert_eq!(a, init_params(&spec, 11));
        assert_ne!(a, init_params(&spec, 12));
        for layer in spec.layers() {
            let s = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(a.as_slice()[layer.weights..layer.bias].iter().all(|w| w.abs() <= s));
            assert!(a.as_slice()[layer.bias..layer.bias + layer.fan_out].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_params_give_ln_c() {
        let spec = MlpSpec::softmax_regression(2, 4);
        let x = [1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 1.0];
        let y = [0, 1, 2, 3];
        let batch = Batch::new(&x, &y, 2).unwrap();
        let (l, _) = loss_and_grad(&ParamVector::zeros(spec.param_count()), &spec, &batch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let acts = [Activation::Relu, Activation::Tanh];
        for trial in 0..100u64 {
            let hidden = match trial % 3 {
                0 => vec![],
                1 => vec![3],
                _ => vec![3, 2],
            };
            let (spec, p, x, y) = random_instance(trial, hidden, acts[trial as usize % 2]);
            let batch = Batch::new(&x, &y, spec.input_dim).unwrap();
            let (_, g) = loss_and_grad(&p, &spec, &batch).unwrap();
            let fd = fd_grad(&p, &spec, &batch, 1e-5);
            let err = max_rel_err(g.as_slice(), &fd);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn duplicated_batch_is_equivalent() {
        let (spec, p, x, y) = random_instance(5, vec![4], Activation::Tanh);
        let batch = Batch::new(&x, &y, spec.input_dim).unwrap();
        let x2: Vec<f64> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).cloned().collect();
        let batch2 = Batch::new(&x2, &y2, spec.input_dim).unwrap();
        let (l1, g1) = loss_and_grad(&p, &spec, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&p, &spec, &batch2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(max_rel_err(g1.as_slice(), g2.as_slice()) < 1e-12);
    }

    #[test]
    fn output_bias_shift_is_invisible() {
        let (spec, p, x, y) = random_instance(9, vec![], Activation::Relu);
        let batch = Batch::new(&x, &y, spec.input_dim).unwrap();
        let mut shifted = p.clone().into_vec();
        let bias = spec.layers()[0].bias;
        for v in &mut shifted[bias..] {
            *v += 3.7;
        }
        let shifted = ParamVector::new(shifted).unwrap();
        let (l1, g1) = loss_and_grad(&p, &spec, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&shifted, &spec, &batch).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_shrinks_as_correct_logit_grows() {
        let spec = MlpSpec::softmax_regression(1, 3);
        let x = [1.0];
        let y = [2];
        let batch = Batch::new(&x, &y, 1).unwrap();
        let mut prev = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            // W = (0, 0, scale), b = 0
            let p = ParamVector::new(vec![0.0, 0.0, scale, 0.0, 0.0, 0.0]).unwrap();
            let l = loss(&p, &spec, &batch).unwrap();
            assert!(l >= 0.0 && l <= prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let spec = MlpSpec::softmax_regression(2, 2);
        // W = [[1,0],[0,1]]: class = larger coordinate
        let p = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = [2.0, -1.0, -0.5, 3.0];
        let y = [0, 1];
        assert_eq!(accuracy(&p, &spec, &Batch::new(&x, &y, 2).unwrap()).unwrap(), 1.0);

        let y = [0, 1, 0, 2];
        let x = [0.0; 8];
        let spec = MlpSpec::softmax_regression(2, 3);
        let zero = ParamVector::zeros(spec.param_count());
        assert_eq!(accuracy(&zero, &spec, &Batch::new(&x, &y, 2).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = MlpSpec::softmax_regression(2, 2);
        let x = [1.0, 2.0];
        let y = [0];
        let batch = Batch::new(&x, &y, 2).unwrap();
        assert!(matches!(
            loss_and_grad(&ParamVector::zeros(5), &spec, &batch),
            Err(Error::DimMismatch { .. })
        ));
        assert!(Batch::new(&[], &[], 2).is_err());
        let bad = [5];
        let batch = Batch::new(&x, &bad, 2).unwrap();
        assert!(loss(&ParamVector::zeros(6), &spec, &batch).is_err());
    }
}
