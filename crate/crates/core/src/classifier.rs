//! Classifiers over packed Saak feature vectors: multinomial logistic
//! regression and a one-hidden-layer MLP, trained by mini-batch gradient
//! descent. Training is single-threaded and seeded, so results are
//! bit-reproducible.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SaakError};
use crate::tensor::Tensor;

/// Row-major `rows x cols` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SaakError::Domain(format!(
                "feature matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Per-dimension z-score statistics fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        if x.rows == 0 {
            return Err(SaakError::Domain("cannot standardize an empty matrix".into()));
        }
        let mut mean = vec![0.0f64; x.cols];
        for row in x.data.chunks_exact(x.cols) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= x.rows as f64;
        }
        let mut var = vec![0.0f64; x.cols];
        for row in x.data.chunks_exact(x.cols) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std: Vec<f32> = var
            .iter()
            .map(|&s| {
                let sd = (s / x.rows as f64).sqrt();
                // constant dims map to 0 after centering
                if sd < 1e-12 {
                    1.0
                } else {
                    sd as f32
                }
            })
            .collect();
        Ok(Standardizer {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols != self.mean.len() {
            return Err(SaakError::Domain(format!(
                "standardizer dim {} does not match features {}",
                self.mean.len(),
                x.cols
            )));
        }
        let mut data = Vec::with_capacity(x.data.len());
        for row in x.data.chunks_exact(x.cols) {
            for ((&v, &m), &s) in row.iter().zip(&self.mean).zip(&self.std) {
                data.push((v - m) / s);
            }
        }
        FeatureMatrix::new(x.rows, x.cols, data)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogisticHyper {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub l2: f32,
    pub seed: u64,
}

impl Default for LogisticHyper {
    fn default() -> Self {
        LogisticHyper {
            lr: 1e-2,
            epochs: 50,
            batch: 128,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpHyper {
    pub hidden: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub l2: f32,
    pub seed: u64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper {
            hidden: 512,
            lr: 5e-3,
            epochs: 50,
            batch: 128,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `C x F` row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub classes: usize,
    pub features: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `H x F` row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `C x H` row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub hidden: usize,
    pub classes: usize,
    pub features: usize,
    pub final_loss: f64,
}

/// Anything that maps a feature vector to per-class scores.
pub trait ClassScores {
    fn scores(&self, x: &[f32]) -> Vec<f32>;
    fn class_count(&self) -> usize;
    fn feature_dim(&self) -> usize;
}

impl ClassScores for LinearModel {
    fn scores(&self, x: &[f32]) -> Vec<f32> {
        (0..self.classes)
            .map(|c| {
                dot(&self.weights[c * self.features..(c + 1) * self.features], x)
                    + self.bias[c]
            })
            .collect()
    }
    fn class_count(&self) -> usize {
        self.classes
    }
    fn feature_dim(&self) -> usize {
        self.features
    }
}

impl ClassScores for MlpModel {
    fn scores(&self, x: &[f32]) -> Vec<f32> {
        let mut h = vec![0.0f32; self.hidden];
        for (u, hv) in h.iter_mut().enumerate() {
            let z = dot(&self.w1[u * self.features..(u + 1) * self.features], x) + self.b1[u];
            *hv = z.max(0.0);
        }
        (0..self.classes)
            .map(|c| dot(&self.w2[c * self.hidden..(c + 1) * self.hidden], &h) + self.b2[c])
            .collect()
    }
    fn class_count(&self) -> usize {
        self.classes
    }
    fn feature_dim(&self) -> usize {
        self.features
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[4 * i..4 * i + 4], &b[4 * i..4 * i + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn check_training_input(x: &FeatureMatrix, y: &[usize], classes: usize) -> Result<()> {
    if x.rows != y.len() {
        return Err(SaakError::Domain(format!(
            "{} rows but {} labels",
            x.rows,
            y.len()
        )));
    }
    if x.rows < classes {
        return Err(SaakError::Domain(format!(
            "need at least as many samples ({}) as classes ({})",
            x.rows, classes
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(SaakError::Domain(format!(
            "label {} out of range for {} classes",
            bad, classes
        )));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(SaakError::Domain("training features contain non-finite values".into()));
    }
    Ok(())
}

/// Numerically stable softmax in place; returns log-sum-exp for the loss.
fn softmax_inplace(scores: &mut [f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    max + sum.ln()
}

/// Softmax cross-entropy loss and gradients of a linear model on a batch.
/// Accumulation in f64; L2 applies to weights only.
pub fn logistic_loss_grad(
    weights: &[f32],
    bias: &[f32],
    x: &FeatureMatrix,
    y: &[usize],
    batch: &[usize],
    l2: f32,
) -> (f64, Vec<f32>, Vec<f32>) {
    let classes = bias.len();
    let f = x.cols;
    let mut grad_w = vec![0.0f32; classes * f];
    let mut grad_b = vec![0.0f32; classes];
    let mut loss = 0.0f64;
    let inv = 1.0 / batch.len() as f64;
    for &idx in batch {
        let row = x.row(idx);
        let mut scores: Vec<f64> = (0..classes)
            .map(|c| dot(&weights[c * f..(c + 1) * f], row) as f64 + bias[c] as f64)
            .collect();
        let raw_true = scores[y[idx]];
        let lse = softmax_inplace(&mut scores);
        loss += (lse - raw_true) * inv;
        for c in 0..classes {
            let delta = ((scores[c] - if c == y[idx] { 1.0 } else { 0.0 }) * inv) as f32;
            if delta != 0.0 {
                grad_b[c] += delta;
                let gw = &mut grad_w[c * f..(c + 1) * f];
                for (g, &v) in gw.iter_mut().zip(row) {
                    *g += delta * v;
                }
            }
        }
    }
    if l2 > 0.0 {
        let mut reg = 0.0f64;
        for (g, &w) in grad_w.iter_mut().zip(weights) {
            *g += l2 * w;
            reg += (w as f64) * (w as f64);
        }
        loss += 0.5 * l2 as f64 * reg;
    }
    (loss, grad_w, grad_b)
}

#[inline]
fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Loss only, mirroring [`logistic_loss_grad`] but accumulated fully in f64
/// (used by finite-difference checks).
pub fn logistic_loss(
    weights: &[f32],
    bias: &[f32],
    x: &FeatureMatrix,
    y: &[usize],
    batch: &[usize],
    l2: f32,
) -> f64 {
    let classes = bias.len();
    let f = x.cols;
    let mut loss = 0.0f64;
    let inv = 1.0 / batch.len() as f64;
    for &idx in batch {
        let row = x.row(idx);
        let mut scores: Vec<f64> = (0..classes)
            .map(|c| dot64(&weights[c * f..(c + 1) * f], row) + bias[c] as f64)
            .collect();
        let raw_true = scores[y[idx]];
        let lse = softmax_inplace(&mut scores);
        loss += (lse - raw_true) * inv;
    }
    if l2 > 0.0 {
        let reg: f64 = weights.iter().map(|&w| (w as f64) * (w as f64)).sum();
        loss += 0.5 * l2 as f64 * reg;
    }
    loss
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Train multinomial logistic regression by mini-batch gradient descent.
pub fn train_logistic(
    x: &FeatureMatrix,
    y: &[usize],
    classes: usize,
    hyper: &LogisticHyper,
) -> Result<LinearModel> {
    check_training_input(x, y, classes)?;
    let f = x.cols;
    let mut weights = vec![0.0f32; classes * f];
    let mut bias = vec![0.0f32; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut final_loss = f64::NAN;
    for _epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0f64;
        let batches = epoch_batches(x.rows, hyper.batch, &mut rng);
        let count = batches.len();
        for batch in batches {
            let (loss, gw, gb) = logistic_loss_grad(&weights, &bias, x, y, &batch, hyper.l2);
            if !loss.is_finite() {
                return Err(SaakError::Train(
                    "logistic loss diverged to a non-finite value; try a smaller lr".into(),
                ));
            }
            epoch_loss += loss;
            for (w, &g) in weights.iter_mut().zip(&gw) {
                *w -= hyper.lr * g;
            }
            for (b, &g) in bias.iter_mut().zip(&gb) {
                *b -= hyper.lr * g;
            }
        }
        final_loss = epoch_loss / count as f64;
    }
    Ok(LinearModel {
        weights,
        bias,
        classes,
        features: f,
        final_loss,
    })
}

/// MLP parameters flattened as one vector, in the order `w1, b1, w2, b2`.
/// Shared by training and the finite-difference checks.
pub struct MlpShape {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn param_count(&self) -> usize {
        self.hidden * self.features + self.hidden + self.classes * self.hidden + self.classes
    }

    fn split<'a>(&self, params: &'a [f32]) -> (&'a [f32], &'a [f32], &'a [f32], &'a [f32]) {
        let hf = self.hidden * self.features;
        let (w1, rest) = params.split_at(hf);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }
}

/// Loss and gradient of the one-hidden-layer MLP on a batch.
pub fn mlp_loss_grad(
    shape: &MlpShape,
    params: &[f32],
    x: &FeatureMatrix,
    y: &[usize],
    batch: &[usize],
    l2: f32,
) -> (f64, Vec<f32>) {
    let (w1, b1, w2, b2) = shape.split(params);
    let (f, h, c) = (shape.features, shape.hidden, shape.classes);
    let mut grad = vec![0.0f32; params.len()];
    let (gw1, rest) = grad.split_at_mut(h * f);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(c * h);
    let mut loss = 0.0f64;
    let inv = 1.0 / batch.len() as f64;
    let mut hidden = vec![0.0f32; h];
    let mut delta1 = vec![0.0f32; h];
    for &idx in batch {
        let row = x.row(idx);
        for u in 0..h {
            let z = dot(&w1[u * f..(u + 1) * f], row) + b1[u];
            hidden[u] = z.max(0.0);
        }
        let mut scores: Vec<f64> = (0..c)
            .map(|k| dot(&w2[k * h..(k + 1) * h], &hidden) as f64 + b2[k] as f64)
            .collect();
        let raw_true = scores[y[idx]];
        let lse = softmax_inplace(&mut scores);
        loss += (lse - raw_true) * inv;
        delta1.iter_mut().for_each(|d| *d = 0.0);
        for k in 0..c {
            let d2 = ((scores[k] - if k == y[idx] { 1.0 } else { 0.0 }) * inv) as f32;
            gb2[k] += d2;
            let w2k = &w2[k * h..(k + 1) * h];
            let gw2k = &mut gw2[k * h..(k + 1) * h];
            for u in 0..h {
                gw2k[u] += d2 * hidden[u];
                delta1[u] += d2 * w2k[u];
            }
        }
        for u in 0..h {
            if hidden[u] > 0.0 && delta1[u] != 0.0 {
                gb1[u] += delta1[u];
                let gw1u = &mut gw1[u * f..(u + 1) * f];
                for (g, &v) in gw1u.iter_mut().zip(row) {
                    *g += delta1[u] * v;
                }
            }
        }
    }
    if l2 > 0.0 {
        let mut reg = 0.0f64;
        for (g, &w) in gw1.iter_mut().zip(w1) {
            *g += l2 * w;
            reg += (w as f64) * (w as f64);
        }
        for (g, &w) in gw2.iter_mut().zip(w2) {
            *g += l2 * w;
            reg += (w as f64) * (w as f64);
        }
        loss += 0.5 * l2 as f64 * reg;
    }
    (loss, grad)
}

/// Loss only, mirroring [`mlp_loss_grad`] but accumulated fully in f64.
pub fn mlp_loss(
    shape: &MlpShape,
    params: &[f32],
    x: &FeatureMatrix,
    y: &[usize],
    batch: &[usize],
    l2: f32,
) -> f64 {
    let (w1, b1, w2, b2) = shape.split(params);
    let (f, h, c) = (shape.features, shape.hidden, shape.classes);
    let mut loss = 0.0f64;
    let inv = 1.0 / batch.len() as f64;
    let mut hidden = vec![0.0f64; h];
    for &idx in batch {
        let row = x.row(idx);
        for u in 0..h {
            let z = dot64(&w1[u * f..(u + 1) * f], row) + b1[u] as f64;
            hidden[u] = z.max(0.0);
        }
        let mut scores: Vec<f64> = (0..c)
            .map(|k| {
                w2[k * h..(k + 1) * h]
                    .iter()
                    .zip(&hidden)
                    .map(|(&w, &hv)| w as f64 * hv)
                    .sum::<f64>()
                    + b2[k] as f64
            })
            .collect();
        let raw_true = scores[y[idx]];
        let lse = softmax_inplace(&mut scores);
        loss += (lse - raw_true) * inv;
    }
    if l2 > 0.0 {
        let reg: f64 = w1
            .iter()
            .chain(w2)
            .map(|&w| (w as f64) * (w as f64))
            .sum();
        loss += 0.5 * l2 as f64 * reg;
    }
    loss
}

/// Glorot-uniform initial parameters for the MLP.
pub fn mlp_init(shape: &MlpShape, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0f32; shape.param_count()];
    let (f, h, c) = (shape.features, shape.hidden, shape.classes);
    let hf = h * f;
    let limit1 = (6.0 / (f + h) as f64).sqrt();
    for p in &mut params[..hf] {
        *p = rng.gen_range(-limit1..limit1) as f32;
    }
    let limit2 = (6.0 / (h + c) as f64).sqrt();
    for p in &mut params[hf + h..hf + h + c * h] {
        *p = rng.gen_range(-limit2..limit2) as f32;
    }
    params
}

/// Train the one-hidden-layer MLP by mini-batch gradient descent.
pub fn train_mlp(
    x: &FeatureMatrix,
    y: &[usize],
    classes: usize,
    hyper: &MlpHyper,
) -> Result<MlpModel> {
    if hyper.hidden == 0 {
        return Err(SaakError::Config("MLP hidden layer size must be >= 1".into()));
    }
    check_training_input(x, y, classes)?;
    let shape = MlpShape {
        features: x.cols,
        hidden: hyper.hidden,
        classes,
    };
    let mut params = mlp_init(&shape, hyper.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut final_loss = f64::NAN;
    for _epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0f64;
        let batches = epoch_batches(x.rows, hyper.batch, &mut rng);
        let count = batches.len();
        for batch in batches {
            let (loss, grad) = mlp_loss_grad(&shape, &params, x, y, &batch, hyper.l2);
            if !loss.is_finite() {
                return Err(SaakError::Train(
                    "MLP loss diverged to a non-finite value; try a smaller lr".into(),
                ));
            }
            epoch_loss += loss;
            for (p, &g) in params.iter_mut().zip(&grad) {
                *p -= hyper.lr * g;
            }
        }
        final_loss = epoch_loss / count as f64;
    }
    let hf = shape.hidden * shape.features;
    let (w1, rest) = params.split_at(hf);
    let (b1, rest) = rest.split_at(shape.hidden);
    let (w2, b2) = rest.split_at(classes * shape.hidden);
    Ok(MlpModel {
        w1: w1.to_vec(),
        b1: b1.to_vec(),
        w2: w2.to_vec(),
        b2: b2.to_vec(),
        hidden: shape.hidden,
        classes,
        features: shape.features,
        final_loss,
    })
}

/// Argmax class per row (ties broken by lowest class index).
pub fn predict<M: ClassScores>(model: &M, x: &FeatureMatrix) -> Result<Vec<usize>> {
    if x.cols != model.feature_dim() {
        return Err(SaakError::Domain(format!(
            "feature dim {} does not match model dim {}",
            x.cols,
            model.feature_dim()
        )));
    }
    Ok((0..x.rows)
        .map(|r| {
            let scores = model.scores(x.row(r));
            let mut best = 0;
            for (c, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn evaluate<M: ClassScores>(model: &M, x: &FeatureMatrix, y: &[usize]) -> Result<f64> {
    if x.rows == 0 {
        return Err(SaakError::Domain("cannot evaluate on an empty set".into()));
    }
    if x.rows != y.len() {
        return Err(SaakError::Domain(format!(
            "{} rows but {} labels",
            x.rows,
            y.len()
        )));
    }
    let pred = predict(model, x)?;
    let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / x.rows as f64)
}

/// A trained classifier together with its feature standardization.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Logistic(LinearModel),
    Mlp(MlpModel),
}

impl ModelKind {
    pub fn scores(&self, x: &[f32]) -> Vec<f32> {
        match self {
            ModelKind::Logistic(m) => m.scores(x),
            ModelKind::Mlp(m) => m.scores(x),
        }
    }

    pub fn evaluate(&self, x: &FeatureMatrix, y: &[usize]) -> Result<f64> {
        match self {
            ModelKind::Logistic(m) => evaluate(m, x, y),
            ModelKind::Mlp(m) => evaluate(m, x, y),
        }
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        match self {
            ModelKind::Logistic(m) => predict(m, x),
            ModelKind::Mlp(m) => predict(m, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub model: ModelKind,
    pub standardizer: Standardizer,
}

impl TrainedClassifier {
    /// Standardize then evaluate.
    pub fn evaluate_raw(&self, x: &FeatureMatrix, y: &[usize]) -> Result<f64> {
        let xs = self.standardizer.transform(x)?;
        self.model.evaluate(&xs, y)
    }
}

const MODEL_META_HEADER: &str = "saak-model-meta v1";

/// Persist a trained classifier into a directory: parameter tensors plus a
/// metadata sidecar.
pub fn save_classifier(dir: &Path, clf: &TrainedClassifier) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let std = &clf.standardizer;
    let f = std.mean.len();
    Tensor::new(vec![f], std.mean.clone())?.save(&dir.join("mean.saak"))?;
    Tensor::new(vec![f], std.std.clone())?.save(&dir.join("std.saak"))?;
    let (kind, loss) = match &clf.model {
        ModelKind::Logistic(m) => {
            Tensor::new(vec![m.classes, m.features], m.weights.clone())?
                .save(&dir.join("weights.saak"))?;
            Tensor::new(vec![m.classes], m.bias.clone())?.save(&dir.join("bias.saak"))?;
            ("logistic", m.final_loss)
        }
        ModelKind::Mlp(m) => {
            Tensor::new(vec![m.hidden, m.features], m.w1.clone())?.save(&dir.join("w1.saak"))?;
            Tensor::new(vec![m.hidden], m.b1.clone())?.save(&dir.join("b1.saak"))?;
            Tensor::new(vec![m.classes, m.hidden], m.w2.clone())?.save(&dir.join("w2.saak"))?;
            Tensor::new(vec![m.classes], m.b2.clone())?.save(&dir.join("b2.saak"))?;
            ("mlp", m.final_loss)
        }
    };
    let meta = format!(
        "{}\nkind = {}\nfeatures = {}\nfinal_loss = {:e}\n",
        MODEL_META_HEADER, kind, f, loss
    );
    std::fs::write(dir.join("model.meta"), meta)?;
    Ok(())
}

pub fn load_classifier(dir: &Path) -> Result<TrainedClassifier> {
    let meta_path = dir.join("model.meta");
    let text = std::fs::read_to_string(&meta_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MODEL_META_HEADER) {
        return Err(SaakError::Format(format!(
            "{}: missing '{}' header",
            meta_path.display(),
            MODEL_META_HEADER
        )));
    }
    let mut kind = String::new();
    let mut final_loss = f64::NAN;
    for line in lines {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "kind" => kind = v.trim().to_string(),
                "final_loss" => {
                    final_loss = v.trim().parse().map_err(|_| {
                        SaakError::Format(format!("{}: bad final_loss", meta_path.display()))
                    })?
                }
                _ => {}
            }
        }
    }
    let mean = Tensor::load(&dir.join("mean.saak"))?;
    let std = Tensor::load(&dir.join("std.saak"))?;
    let standardizer = Standardizer {
        mean: mean.data().to_vec(),
        std: std.data().to_vec(),
    };
    let model = match kind.as_str() {
        "logistic" => {
            let w = Tensor::load(&dir.join("weights.saak"))?;
            let b = Tensor::load(&dir.join("bias.saak"))?;
            ModelKind::Logistic(LinearModel {
                classes: w.dims()[0],
                features: w.dims()[1],
                weights: w.data().to_vec(),
                bias: b.data().to_vec(),
                final_loss,
            })
        }
        "mlp" => {
            let w1 = Tensor::load(&dir.join("w1.saak"))?;
            let b1 = Tensor::load(&dir.join("b1.saak"))?;
            let w2 = Tensor::load(&dir.join("w2.saak"))?;
            let b2 = Tensor::load(&dir.join("b2.saak"))?;
            ModelKind::Mlp(MlpModel {
                hidden: w1.dims()[0],
                features: w1.dims()[1],
                classes: w2.dims()[0],
                w1: w1.data().to_vec(),
                b1: b1.data().to_vec(),
                w2: w2.data().to_vec(),
                b2: b2.data().to_vec(),
                final_loss,
            })
        }
        other => {
            return Err(SaakError::Format(format!(
                "{}: unknown model kind '{}'",
                meta_path.display(),
                other
            )))
        }
    };
    Ok(TrainedClassifier {
        model,
        standardizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per_class: usize, seed: u64) -> (FeatureMatrix, Vec<usize>) {
        // two linearly separable 2-D blobs with margin 1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let class = i % 2;
            let center = if class == 0 { -1.5f32 } else { 1.5 };
            data.push(center + rng.gen_range(-0.5..0.5));
            data.push(center + rng.gen_range(-0.5..0.5));
            labels.push(class);
        }
        (FeatureMatrix::new(2 * n_per_class, 2, data).unwrap(), labels)
    }

    #[test]
    fn logistic_separable_blobs() {
        let (x, y) = blobs(100, 1);
        let hyper = LogisticHyper {
            lr: 0.1,
            epochs: 100,
            ..Default::default()
        };
        let model = train_logistic(&x, &y, 2, &hyper).unwrap();
        assert_eq!(evaluate(&model, &x, &y).unwrap(), 1.0);
    }

    #[test]
    fn logistic_zero_features_predicts_prior() {
        let n = 90;
        let x = FeatureMatrix::new(n, 3, vec![0.0; n * 3]).unwrap();
        // class 2 is the majority
        let y: Vec<usize> = (0..n).map(|i| if i % 3 == 0 { 0 } else { 2 }).collect();
        let hyper = LogisticHyper {
            lr: 0.5,
            epochs: 200,
            batch: n,
            l2: 0.0,
            seed: 3,
        };
        let model = train_logistic(&x, &y, 3, &hyper).unwrap();
        let pred = predict(&model, &x).unwrap();
        assert!(pred.iter().all(|&p| p == 2));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let (x, y) = blobs(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let classes = 2;
        let f = x.cols;
        let mut weights: Vec<f32> = (0..classes * f).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut bias: Vec<f32> = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let batch: Vec<usize> = (0..x.rows).collect();
        let l2 = 1e-3f32;
        let (_, gw, gb) = logistic_loss_grad(&weights, &bias, &x, &y, &batch, l2);
        let h = 1e-3f32;
        for i in 0..weights.len() {
            let orig = weights[i];
            weights[i] = orig + h;
            let lp = logistic_loss(&weights, &bias, &x, &y, &batch, l2);
            weights[i] = orig - h;
            let lm = logistic_loss(&weights, &bias, &x, &y, &batch, l2);
            weights[i] = orig;
            let num = (lp - lm) / (2.0 * h as f64);
            let rel = (gw[i] as f64 - num).abs() / num.abs().max(gw[i].abs() as f64).max(1e-4);
            assert!(rel < 1e-4, "weight {}: analytic {} vs numeric {}", i, gw[i], num);
        }
        for c in 0..classes {
            let orig = bias[c];
            bias[c] = orig + h;
            let lp = logistic_loss(&weights, &bias, &x, &y, &batch, l2);
            bias[c] = orig - h;
            let lm = logistic_loss(&weights, &bias, &x, &y, &batch, l2);
            bias[c] = orig;
            let num = (lp - lm) / (2.0 * h as f64);
            let rel = (gb[c] as f64 - num).abs() / num.abs().max(gb[c].abs() as f64).max(1e-4);
            assert!(rel < 1e-4, "bias {}: analytic {} vs numeric {}", c, gb[c], num);
        }
    }

    #[test]
    fn mlp_learns_xor() {
        let x = FeatureMatrix::new(
            4,
            2,
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let y = vec![0, 1, 1, 0];
        let hyper = MlpHyper {
            hidden: 8,
            lr: 0.1,
            epochs: 2000,
            batch: 4,
            l2: 0.0,
            seed: 2,
        };
        let model = train_mlp(&x, &y, 2, &hyper).unwrap();
        assert_eq!(evaluate(&model, &x, &y).unwrap(), 1.0);
    }

    #[test]
    fn mlp_zero_hidden_rejected() {
        let x = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let hyper = MlpHyper {
            hidden: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_mlp(&x, &[0, 1], 2, &hyper),
            Err(SaakError::Config(_))
        ));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let (x, y) = blobs(5, 9);
        let shape = MlpShape {
            features: x.cols,
            hidden: 6,
            classes: 2,
        };
        let mut params = mlp_init(&shape, 11);
        let batch: Vec<usize> = (0..x.rows).collect();
        let l2 = 1e-3f32;
        let (_, grad) = mlp_loss_grad(&shape, &params, &x, &y, &batch, l2);
        let h = 1e-3f32;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let lp = mlp_loss(&shape, &params, &x, &y, &batch, l2);
            params[i] = orig - h;
            let lm = mlp_loss(&shape, &params, &x, &y, &batch, l2);
            params[i] = orig;
            let num = (lp - lm) / (2.0 * h as f64);
            let g = grad[i] as f64;
            let rel = (g - num).abs() / num.abs().max(g.abs()).max(1e-3);
            assert!(rel < 1e-3, "param {}: analytic {} vs numeric {}", i, g, num);
        }
    }

    #[test]
    fn full_batch_loss_monotone() {
        let (x, y) = blobs(50, 13);
        let mut weights = vec![0.0f32; 2 * x.cols];
        let mut bias = vec![0.0f32; 2];
        let batch: Vec<usize> = (0..x.rows).collect();
        let lr = 1e-3f32;
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let (loss, gw, gb) = logistic_loss_grad(&weights, &bias, &x, &y, &batch, 0.0);
            assert!(loss <= prev + 1e-12, "loss increased: {} -> {}", prev, loss);
            prev = loss;
            for (w, &g) in weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, &g) in bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
    }

    #[test]
    fn predict_shift_invariant_and_accuracy_recount() {
        let (x, y) = blobs(30, 15);
        let hyper = LogisticHyper {
            lr: 0.1,
            epochs: 50,
            ..Default::default()
        };
        let mut model = train_logistic(&x, &y, 2, &hyper).unwrap();
        let before = predict(&model, &x).unwrap();
        for b in model.bias.iter_mut() {
            *b += 42.0;
        }
        assert_eq!(predict(&model, &x).unwrap(), before);

        let acc = evaluate(&model, &x, &y).unwrap();
        let manual = before.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64;
        assert_eq!(acc, manual);
    }

    #[test]
    fn evaluate_empty_rejected() {
        let x = FeatureMatrix::new(0, 2, vec![]).unwrap();
        let model = LinearModel {
            weights: vec![0.0; 4],
            bias: vec![0.0; 2],
            classes: 2,
            features: 2,
            final_loss: 0.0,
        };
        assert!(matches!(
            evaluate(&model, &x, &[]),
            Err(SaakError::Domain(_))
        ));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (x, y) = blobs(40, 17);
        let hyper = MlpHyper {
            hidden: 16,
            epochs: 5,
            seed: 99,
            ..Default::default()
        };
        let a = train_mlp(&x, &y, 2, &hyper).unwrap();
        let b = train_mlp(&x, &y, 2, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standardizer_zscores() {
        let x = FeatureMatrix::new(4, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        let t = s.transform(&x).unwrap();
        // first dim standardized, constant second dim centered to zero
        let col0: Vec<f32> = (0..4).map(|r| t.row(r)[0]).collect();
        let mean: f32 = col0.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!(t.data.chunks(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn classifier_persistence_round_trip() {
        let (x, y) = blobs(20, 19);
        let std = Standardizer::fit(&x).unwrap();
        let xs = std.transform(&x).unwrap();
        let model = train_logistic(&xs, &y, 2, &LogisticHyper::default()).unwrap();
        let clf = TrainedClassifier {
            model: ModelKind::Logistic(model),
            standardizer: std,
        };
        let dir = tempfile::tempdir().unwrap();
        save_classifier(dir.path(), &clf).unwrap();
        let loaded = load_classifier(dir.path()).unwrap();
        assert_eq!(clf.model, loaded.model);
        assert_eq!(clf.standardizer, loaded.standardizer);

        let hyper = MlpHyper {
            hidden: 4,
            epochs: 2,
            ..Default::default()
        };
        let mlp = train_mlp(&x, &y, 2, &hyper).unwrap();
        let clf = TrainedClassifier {
            model: ModelKind::Mlp(mlp),
            standardizer: Standardizer::fit(&x).unwrap(),
        };
        let dir2 = tempfile::tempdir().unwrap();
        save_classifier(dir2.path(), &clf).unwrap();
        assert_eq!(load_classifier(dir2.path()).unwrap().model, clf.model);
    }
}
