//! Models, datasets, losses and the SGD step.
//!
//! The model is multinomial softmax regression (`d = p·K`, weights stored
//! class-major: weight `(k, j)` lives at `k·p + j`) or linear least squares
//! (`d = p`). A bias is obtained by appending a constant feature.

use rand::Rng;

use crate::{Error, Result};

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{what} has non-finite entry at {i}"))),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Model weights `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("model dimension must be positive"));
        }
        check_finite(&values, "model")?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "model dimension must be positive");
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Bit patterns of every weight; handy for exact equality checks.
    pub fn bits(&self) -> Vec<u64> {
        self.values.iter().map(|v| v.to_bits()).collect()
    }
}

/// A gradient (local, perturbed, or aggregated).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "gradient")?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        sq_norm(&self.values).sqrt()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn scaled(&self, factor: f64) -> GradientVector {
        GradientVector {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub features: Vec<f64>,
    /// Class index for classification data; 0 for regression data.
    pub label: usize,
    /// Regression target. Classification data sets it to `label as f64`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(records: Vec<Record>, num_features: usize, num_classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("dataset must be nonempty"));
        }
        if num_features == 0 || num_classes == 0 {
            return Err(Error::invalid("feature and class counts must be positive"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != num_features {
                return Err(Error::invalid(format!(
                    "record {i} has {} features, expected {num_features}",
                    r.features.len()
                )));
            }
            if r.label >= num_classes {
                return Err(Error::invalid(format!(
                    "record {i} label {} out of range for {num_classes} classes",
                    r.label
                )));
            }
            check_finite(&r.features, "record features")?;
            if !r.target.is_finite() {
                return Err(Error::invalid(format!("record {i} target is not finite")));
            }
        }
        Ok(Self {
            records,
            num_features,
            num_classes,
        })
    }

    pub fn classification(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::invalid("feature and label counts differ"));
        }
        let p = features.first().map_or(0, Vec::len);
        let records = features
            .into_iter()
            .zip(labels)
            .map(|(features, label)| Record {
                features,
                label,
                target: label as f64,
            })
            .collect();
        Self::new(records, p, classes)
    }

    pub fn regression(features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::invalid("feature and target counts differ"));
        }
        let p = features.first().map_or(0, Vec::len);
        let records = features
            .into_iter()
            .zip(targets)
            .map(|(features, target)| Record {
                features,
                label: 0,
                target,
            })
            .collect();
        Self::new(records, p, 1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.records[i]
    }

    /// Selects records by index, keeping shape metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, self.num_features, self.num_classes)
    }
}

/// Positions of the records used for one stochastic gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn all(data: &Dataset) -> Self {
        Self {
            indices: (0..data.len()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy { classes: usize },
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// L2 regularisation strength; the penalty is `l2/2 · ‖x‖²`.
    pub l2: f64,
}

impl LossSpec {
    pub fn softmax(classes: usize) -> Self {
        Self {
            kind: LossKind::SoftmaxCrossEntropy { classes },
            l2: 0.0,
        }
    }

    pub fn least_squares() -> Self {
        Self {
            kind: LossKind::LeastSquares,
            l2: 0.0,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn param_dim(&self, num_features: usize) -> usize {
        match self.kind {
            LossKind::SoftmaxCrossEntropy { classes } => num_features * classes,
            LossKind::LeastSquares => num_features,
        }
    }

    fn validate(&self, model: &ModelParams, data: &Dataset) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!("regularisation {} must be >= 0", self.l2)));
        }
        if let LossKind::SoftmaxCrossEntropy { classes } = self.kind {
            if classes < 2 {
                return Err(Error::config("softmax needs at least two classes"));
            }
            if data.num_classes() > classes {
                return Err(Error::config(format!(
                    "dataset has {} classes but the loss expects {classes}",
                    data.num_classes()
                )));
            }
        }
        let expected = self.param_dim(data.num_features());
        if model.dim() != expected {
            return Err(Error::config(format!(
                "model dimension {} does not match {expected} for {} features",
                model.dim(),
                data.num_features()
            )));
        }
        Ok(())
    }
}

fn check_batch(data: &Dataset, batch: &Batch) -> Result<()> {
    if batch.indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = batch.indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!(
            "batch index {bad} out of range for {} records",
            data.len()
        )));
    }
    Ok(())
}

fn logits(weights: &[f64], features: &[f64], classes: usize, out: &mut Vec<f64>) {
    let p = features.len();
    out.clear();
    out.extend((0..classes).map(|k| dot(&weights[k * p..(k + 1) * p], features)));
}

/// Turns logits into probabilities in place; returns log-sum-exp.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in z.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

/// Mean loss over the batch plus the L2 penalty.
pub fn loss(model: &ModelParams, data: &Dataset, batch: &Batch, spec: &LossSpec) -> Result<f64> {
    spec.validate(model, data)?;
    check_batch(data, batch)?;
    let w = model.as_slice();
    let mut total = 0.0;
    let mut z = Vec::new();
    for &i in &batch.indices {
        let r = data.record(i);
        total += match spec.kind {
            LossKind::SoftmaxCrossEntropy { classes } => {
                logits(w, &r.features, classes, &mut z);
                let zy = z[r.label];
                softmax_in_place(&mut z) - zy
            }
            LossKind::LeastSquares => {
                let e = dot(w, &r.features) - r.target;
                0.5 * e * e
            }
        };
    }
    Ok(total / batch.size() as f64 + 0.5 * spec.l2 * sq_norm(w))
}

pub fn full_loss(model: &ModelParams, data: &Dataset, spec: &LossSpec) -> Result<f64> {
    loss(model, data, &Batch::all(data), spec)
}

/// Gradient of [`loss`] averaged over the batch.
pub fn compute_gradient(
    model: &ModelParams,
    data: &Dataset,
    batch: &Batch,
    spec: &LossSpec,
) -> Result<GradientVector> {
    spec.validate(model, data)?;
    check_batch(data, batch)?;
    let w = model.as_slice();
    let p = data.num_features();
    let mut grad = vec![0.0; w.len()];
    let mut z = Vec::new();
    for &i in &batch.indices {
        let r = data.record(i);
        match spec.kind {
            LossKind::SoftmaxCrossEntropy { classes } => {
                logits(w, &r.features, classes, &mut z);
                softmax_in_place(&mut z);
                z[r.label] -= 1.0;
                for (k, &coef) in z.iter().enumerate() {
                    for (g, &x) in grad[k * p..(k + 1) * p].iter_mut().zip(&r.features) {
                        *g += coef * x;
                    }
                }
            }
            LossKind::LeastSquares => {
                let e = dot(w, &r.features) - r.target;
                for (g, &x) in grad.iter_mut().zip(&r.features) {
                    *g += e * x;
                }
            }
        }
    }
    let inv = 1.0 / batch.size() as f64;
    for (g, &wi) in grad.iter_mut().zip(w) {
        *g = *g * inv + spec.l2 * wi;
    }
    GradientVector::new(grad)
}

/// `x − γΔ`, componentwise.
pub fn sgd_update(x: &ModelParams, delta: &GradientVector, gamma: f64) -> Result<ModelParams> {
    if x.dim() != delta.dim() {
        return Err(Error::invalid(format!(
            "model dimension {} != gradient dimension {}",
            x.dim(),
            delta.dim()
        )));
    }
    if !gamma.is_finite() {
        return Err(Error::invalid("learning rate must be finite"));
    }
    let values = x
        .as_slice()
        .iter()
        .zip(delta.as_slice())
        .map(|(xi, di)| xi - gamma * di)
        .collect();
    ModelParams::new(values)
}

/// Arg-max class; ties resolve to the lowest index.
pub fn predict(model: &ModelParams, features: &[f64], classes: usize) -> usize {
    let p = features.len();
    let w = model.as_slice();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..classes {
        let score = dot(&w[k * p..(k + 1) * p], features);
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

/// Fraction of misclassified records.
pub fn test_error(model: &ModelParams, testset: &Dataset, spec: &LossSpec) -> Result<f64> {
    let classes = match spec.kind {
        LossKind::SoftmaxCrossEntropy { classes } => classes,
        LossKind::LeastSquares => {
            return Err(Error::Unsupported(
                "test error is only defined for classification losses".into(),
            ))
        }
    };
    spec.validate(model, testset)?;
    let wrong = testset
        .records()
        .iter()
        .filter(|r| predict(model, &r.features, classes) != r.label)
        .count();
    Ok(wrong as f64 / testset.len() as f64)
}

/// Uniform sample of `size` distinct record positions.
pub fn sample_batch<R: Rng + ?Sized>(data: &Dataset, size: usize, rng: &mut R) -> Result<Batch> {
    if size == 0 || size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {size} outside 1..={}",
            data.len()
        )));
    }
    Ok(Batch::new(
        rand::seq::index::sample(rng, data.len(), size).into_vec(),
    ))
}
