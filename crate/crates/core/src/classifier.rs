//! Multinomial logistic regression trained by full-batch gradient descent.
//!
//! The model supplies the class posteriors `p(y | x)` consumed by every
//! query strategy. It sits behind [`ProbabilisticClassifier`] so that other
//! calibrated classifiers can be dropped in.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::dataset::InstanceId;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("invalid posterior matrix: {0}")]
    InvalidPosteriors(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

/// Tolerance on posterior row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub l2_penalty: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the max-norm of the gradient drops below this.
    pub convergence_tol: f64,
    /// Reserved for stochastic variants; full-batch descent from a zero
    /// start does not consume randomness.
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_penalty: 1e-3,
            learning_rate: 0.1,
            max_epochs: 500,
            convergence_tol: 1e-6,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(ClassifierError::Training("l2_penalty must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClassifierError::Training("learning_rate must be > 0".into()));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(ClassifierError::Training("convergence_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Row-stochastic `n × m` matrix of class posteriors aligned to instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    values: Array2<f64>,
    ids: Vec<InstanceId>,
}

impl PosteriorMatrix {
    pub fn new(values: Array2<f64>, ids: Vec<InstanceId>) -> Result<Self> {
        if values.nrows() != ids.len() {
            return Err(ClassifierError::Shape(format!(
                "{} rows but {} ids",
                values.nrows(),
                ids.len()
            )));
        }
        for (i, row) in values.outer_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
                return Err(ClassifierError::InvalidPosteriors(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ClassifierError::InvalidPosteriors(format!(
                    "row {i} sums to {sum}"
                )));
            }
        }
        Ok(PosteriorMatrix { values, ids })
    }

    /// Builds a matrix from nested rows, naming instances `"0"`, `"1"`, ….
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(ClassifierError::Shape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), m), flat)
            .map_err(|e| ClassifierError::Shape(e.to_string()))?;
        let ids = (0..rows.len()).map(|i| InstanceId::new(i.to_string())).collect();
        Self::new(values, ids)
    }

    pub fn with_ids(mut self, ids: Vec<InstanceId>) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return Err(ClassifierError::Shape("id count differs from row count".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn ids(&self) -> &[InstanceId] {
        &self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Index of the most probable class per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.values.outer_iter().map(|row| argmax(row)).collect()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = j;
        }
    }
    best
}

/// Anything that produces calibrated class posteriors.
pub trait ProbabilisticClassifier {
    fn num_classes(&self) -> usize;
    fn dim(&self) -> usize;
    /// Posteriors for the rows of `x` (one instance per row).
    fn predict_proba(&self, x: ArrayView2<'_, f64>, ids: &[InstanceId]) -> Result<PosteriorMatrix>;
}

/// Weights (`m × d`) and biases (`m`) of a softmax regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        ModelParams {
            weights: Array2::zeros((num_classes, dim)),
            biases: Array1::zeros(num_classes),
        }
    }

    pub fn new(weights: Array2<f64>, biases: Array1<f64>) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(ClassifierError::Shape(format!(
                "{} weight rows but {} biases",
                weights.nrows(),
                biases.len()
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(ClassifierError::Shape("non-finite parameter".into()));
        }
        Ok(ModelParams { weights, biases })
    }

    /// Raw scores `W·x + b` for every row of `x`.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.ncols() {
            return Err(ClassifierError::Shape(format!(
                "expected {} features, got {}",
                self.weights.ncols(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weights.t()) + &self.biases)
    }

    /// Serializes to the `alm1` text format: a header line, `m d`, `m` rows
    /// of weights, then one row of biases. Values use shortest round-trip
    /// exponent notation, so parsing is exact.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let (m, d) = self.weights.dim();
        let _ = writeln!(out, "alm1\n{m} {d}");
        for row in self.weights.outer_iter() {
            push_row(&mut out, row.iter());
        }
        push_row(&mut out, self.biases.iter());
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let model = parse_checkpoint(&mut lines)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(ClassifierError::Checkpoint("trailing data".into()));
        }
        Ok(model)
    }
}

fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{v:e}");
        first = false;
    }
    out.push('\n');
}

fn parse_row(line: Option<&str>, expected: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| ClassifierError::Checkpoint("truncated".into()))?;
    let values = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| ClassifierError::Checkpoint(format!("bad number {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(ClassifierError::Checkpoint(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

/// Reads one `alm1` block from `lines`, leaving the iterator after it.
pub(crate) fn parse_checkpoint<'a, I>(lines: &mut I) -> Result<ModelParams>
where
    I: Iterator<Item = &'a str>,
{
    match lines.next().map(str::trim) {
        Some("alm1") => {}
        Some(other) => {
            return Err(ClassifierError::Checkpoint(format!(
                "expected alm1 header, found {other:?}"
            )))
        }
        None => return Err(ClassifierError::Checkpoint("empty checkpoint".into())),
    }
    let dims = parse_row(lines.next(), 2)?;
    let (m, d) = (dims[0] as usize, dims[1] as usize);
    let mut flat = Vec::with_capacity(m * d);
    for _ in 0..m {
        flat.extend(parse_row(lines.next(), d)?);
    }
    let biases = parse_row(lines.next(), m)?;
    let weights = Array2::from_shape_vec((m, d), flat)
        .map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
    ModelParams::new(weights, Array1::from(biases))
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

impl ProbabilisticClassifier for ModelParams {
    fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn predict_proba(&self, x: ArrayView2<'_, f64>, ids: &[InstanceId]) -> Result<PosteriorMatrix> {
        if ids.len() != x.nrows() {
            return Err(ClassifierError::Shape(format!(
                "{} rows but {} ids",
                x.nrows(),
                ids.len()
            )));
        }
        let probs = softmax_rows(self.logits(x)?);
        Ok(PosteriorMatrix {
            values: probs,
            ids: ids.to_vec(),
        })
    }
}

pub fn predict_proba(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    ids: &[InstanceId],
) -> Result<PosteriorMatrix> {
    model.predict_proba(x, ids)
}

fn check_labels(x: ArrayView2<'_, f64>, y: &[usize], num_classes: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(ClassifierError::Shape(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= num_classes) {
        return Err(ClassifierError::Shape(format!(
            "label {c} outside 0..{num_classes}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` (biases unpenalized) and its
/// gradient with respect to weights and biases.
pub fn loss_and_gradient(
    params: &ModelParams,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    l2_penalty: f64,
) -> Result<(f64, ModelParams)> {
    check_labels(x, y, params.num_classes())?;
    check_dim(params, x)?;
    if y.is_empty() {
        return Err(ClassifierError::Empty("training set"));
    }
    let (m, d) = params.weights.dim();
    let xs = x.as_standard_layout();
    let w = params.weights.as_standard_layout();
    let mut ws = Workspace::new(m, d);
    let loss = ws.evaluate(
        w.as_slice().expect("standard layout"),
        params.biases.as_slice().expect("contiguous biases"),
        xs.as_slice().expect("standard layout"),
        y,
        l2_penalty,
    );
    Ok((loss, ws.gradient()))
}

/// Scratch buffers for the fused loss and gradient pass over row-major data.
struct Workspace {
    m: usize,
    d: usize,
    grad_w: Vec<f64>,
    grad_b: Vec<f64>,
    z: Vec<f64>,
}

impl Workspace {
    fn new(m: usize, d: usize) -> Self {
        Workspace {
            m,
            d,
            grad_w: vec![0.0; m * d],
            grad_b: vec![0.0; m],
            z: vec![0.0; m],
        }
    }

    /// Returns the loss and leaves its gradient in `grad_w`/`grad_b`.
    fn evaluate(&mut self, w: &[f64], b: &[f64], x: &[f64], y: &[usize], l2: f64) -> f64 {
        let (m, d) = (self.m, self.d);
        self.grad_w.fill(0.0);
        self.grad_b.fill(0.0);
        let mut nll = 0.0;
        for (i, &label) in y.iter().enumerate() {
            let row = &x[i * d..(i + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for c in 0..m {
                let wc = &w[c * d..(c + 1) * d];
                let zc = b[c] + wc.iter().zip(row).map(|(a, v)| a * v).sum::<f64>();
                self.z[c] = zc;
                max = max.max(zc);
            }
            let z_label = self.z[label];
            let mut sum = 0.0;
            for zc in &mut self.z {
                *zc = (*zc - max).exp();
                sum += *zc;
            }
            nll += sum.ln() + max - z_label;
            let inv = 1.0 / sum;
            for c in 0..m {
                let r = self.z[c] * inv - if c == label { 1.0 } else { 0.0 };
                self.grad_b[c] += r;
                for (g, v) in self.grad_w[c * d..(c + 1) * d].iter_mut().zip(row) {
                    *g += r * v;
                }
            }
        }
        let inv_n = 1.0 / y.len() as f64;
        let mut sq = 0.0;
        for (g, wv) in self.grad_w.iter_mut().zip(w) {
            *g = *g * inv_n + l2 * wv;
            sq += wv * wv;
        }
        for g in &mut self.grad_b {
            *g *= inv_n;
        }
        nll * inv_n + 0.5 * l2 * sq
    }

    fn grad_max_abs(&self) -> f64 {
        self.grad_w
            .iter()
            .chain(&self.grad_b)
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }

    fn gradient(&self) -> ModelParams {
        ModelParams {
            weights: Array2::from_shape_vec((self.m, self.d), self.grad_w.clone())
                .expect("gradient shape"),
            biases: Array1::from(self.grad_b.clone()),
        }
    }
}

fn check_dim(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != params.weights.ncols() {
        return Err(ClassifierError::Shape(format!(
            "expected {} features, got {}",
            params.weights.ncols(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// Loss at the starting point followed by the loss after each epoch.
    pub losses: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// Trains from zero weights; see [`train_traced`].
pub fn train(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    train_traced(x, y, num_classes, cfg).map(|(model, _)| model)
}

/// Full-batch gradient descent on the L2-regularized cross-entropy,
/// starting from zero weights and biases.
///
/// A step that would increase the loss is retried with half the learning
/// rate, so the recorded loss never increases. After an accepted step the
/// rate doubles again, capped at the configured value.
pub fn train_traced(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    check_labels(x, y, num_classes)?;
    let mut present = vec![false; num_classes];
    for &c in y {
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(ClassifierError::Training(
            "at least two distinct classes are required".into(),
        ));
    }

    let (m, d) = (num_classes, x.ncols());
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut w = vec![0.0; m * d];
    let mut b = vec![0.0; m];
    let mut ws = Workspace::new(m, d);
    let mut loss = ws.evaluate(&w, &b, xs, y, cfg.l2_penalty);
    let mut trace = TrainTrace {
        losses: vec![loss],
        epochs: 0,
        converged: false,
    };
    let mut cand_w = w.clone();
    let mut cand_b = b.clone();
    let mut cand_ws = Workspace::new(m, d);
    let mut lr = cfg.learning_rate;
    for _ in 0..cfg.max_epochs {
        lr = (lr * 2.0).min(cfg.learning_rate);
        if ws.grad_max_abs() < cfg.convergence_tol {
            trace.converged = true;
            break;
        }
        let mut accepted = false;
        while lr > 1e-12 {
            for ((c, p), g) in cand_w.iter_mut().zip(&w).zip(&ws.grad_w) {
                *c = p - lr * g;
            }
            for ((c, p), g) in cand_b.iter_mut().zip(&b).zip(&ws.grad_b) {
                *c = p - lr * g;
            }
            let c_loss = cand_ws.evaluate(&cand_w, &cand_b, xs, y, cfg.l2_penalty);
            if c_loss <= loss {
                std::mem::swap(&mut w, &mut cand_w);
                std::mem::swap(&mut b, &mut cand_b);
                std::mem::swap(&mut ws, &mut cand_ws);
                loss = c_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            // No descent step exists at machine precision.
            trace.converged = true;
            break;
        }
        trace.epochs += 1;
        trace.losses.push(loss);
    }
    if !trace.converged && ws.grad_max_abs() < cfg.convergence_tol {
        trace.converged = true;
    }
    let params = ModelParams {
        weights: Array2::from_shape_vec((m, d), w).expect("weight shape"),
        biases: Array1::from(b),
    };
    Ok((params, trace))
}

/// Fraction of rows whose argmax posterior equals the true class.
pub fn accuracy_from_posteriors(posteriors: &PosteriorMatrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(ClassifierError::Empty("test set"));
    }
    if posteriors.rows() != y.len() {
        return Err(ClassifierError::Shape(format!(
            "{} posterior rows but {} labels",
            posteriors.rows(),
            y.len()
        )));
    }
    let hits = posteriors
        .argmax()
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / y.len() as f64)
}

pub fn accuracy<C: ProbabilisticClassifier + ?Sized>(
    model: &C,
    x: ArrayView2<'_, f64>,
    y: &[usize],
) -> Result<f64> {
    if y.is_empty() {
        return Err(ClassifierError::Empty("test set"));
    }
    let ids: Vec<InstanceId> = (0..x.nrows()).map(|i| InstanceId::new(i.to_string())).collect();
    let posteriors = model.predict_proba(x, &ids)?;
    accuracy_from_posteriors(&posteriors, y)
}
