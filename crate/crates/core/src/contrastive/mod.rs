//! Dual-projector contrastive model with two text views.
//!
//! Images pass through a shared linear encoder `E`, then through one of two
//! projectors: `P_tax`, matched against a label embedding table `T`, and
//! `P_cap`, matched against captions projected by `Q_cap`. Only the
//! taxonomy pathway is used at evaluation time. Gradients are analytic.

mod train;
mod world;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm, unit_normalize, Matrix, MatrixError};

pub use train::{
    optimizer_step, run_caption_experiment, train, AdamState, ArmSummary, EpochRecord, ExperimentConfig,
    ExperimentSummary, History, OptimizerConfig, RunResult, TrainConfig, TrainError, TrainOutcome,
};
pub use world::{
    alignment_metric, cross_covariance, sample_world, trait_energy_ratio, uniformity_metric, SyntheticDataset,
    WorldConfig, WorldModel,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContrastiveError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {0} appears more than once in the batch; enable label collisions to mask it")]
    DuplicateLabel(usize),
    #[error("label {label} is outside the {classes}-row label table")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter shapes are inconsistent: {0}")]
    Shape(String),
}

/// Sizes of every parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_c: usize,
    /// Width of the shared encoder output.
    pub d_h: usize,
    pub d_e: usize,
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_x: 32,
            d_c: 32,
            d_h: 8,
            d_e: 16,
            n_classes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Shared encoder, `d_h × d_x`.
    pub encoder: Matrix,
    /// Taxonomy projector, `d_e × d_h`.
    pub p_tax: Matrix,
    /// Caption projector, `d_e × d_h`.
    pub p_cap: Matrix,
    /// Caption text projector, `d_e × d_c`.
    pub q_cap: Matrix,
    /// Label embedding table, `n_classes × d_e`.
    pub t: Matrix,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    /// Gaussian init with variance `1 / fan_in` (unit variance for `T`).
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| n.sample(&mut rng))
        };
        let encoder = gauss(dims.d_h, dims.d_x, (1.0 / dims.d_x as f64).sqrt());
        let p_tax = gauss(dims.d_e, dims.d_h, (1.0 / dims.d_h as f64).sqrt());
        let p_cap = gauss(dims.d_e, dims.d_h, (1.0 / dims.d_h as f64).sqrt());
        let q_cap = gauss(dims.d_e, dims.d_c, (1.0 / dims.d_c as f64).sqrt());
        let t = gauss(dims.n_classes, dims.d_e, 1.0);
        Self {
            encoder,
            p_tax,
            p_cap,
            q_cap,
            t,
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            encoder: Matrix::zeros(dims.d_h, dims.d_x),
            p_tax: Matrix::zeros(dims.d_e, dims.d_h),
            p_cap: Matrix::zeros(dims.d_e, dims.d_h),
            q_cap: Matrix::zeros(dims.d_e, dims.d_c),
            t: Matrix::zeros(dims.n_classes, dims.d_e),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_x: self.encoder.cols(),
            d_c: self.q_cap.cols(),
            d_h: self.encoder.rows(),
            d_e: self.p_tax.rows(),
            n_classes: self.t.rows(),
        }
    }

    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let d = self.dims();
        let expect = [
            ("P_tax", &self.p_tax, (d.d_e, d.d_h)),
            ("P_cap", &self.p_cap, (d.d_e, d.d_h)),
            ("Q_cap", &self.q_cap, (d.d_e, d.d_c)),
            ("T", &self.t, (d.n_classes, d.d_e)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(ContrastiveError::Shape(format!("{name} is {:?}, expected {shape:?}", m.shape())));
            }
        }
        if self.matrices().iter().any(|m| !m.is_finite()) {
            return Err(MatrixError::NonFinite("parameters").into());
        }
        Ok(())
    }

    pub fn matrices(&self) -> [&Matrix; 5] {
        [&self.encoder, &self.p_tax, &self.p_cap, &self.q_cap, &self.t]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 5] {
        [&mut self.encoder, &mut self.p_tax, &mut self.p_cap, &mut self.q_cap, &mut self.t]
    }

    pub const NAMES: [&'static str; 5] = ["encoder", "p_tax", "p_cap", "q_cap", "t"];

    /// End-to-end taxonomy map from images to embeddings, `P_tax · E`.
    pub fn taxonomy_map(&self) -> Matrix {
        self.p_tax.matmul(&self.encoder).expect("validated shapes")
    }

    /// End-to-end caption-pathway image map, `P_cap · E`.
    pub fn caption_map(&self) -> Matrix {
        self.p_cap.matmul(&self.encoder).expect("validated shapes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub symmetric: bool,
    pub w_tax: f64,
    pub w_cap: f64,
    /// Permit repeated labels in a batch; same-label negatives are then
    /// excluded from the taxonomy term.
    pub allow_label_collisions: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            symmetric: true,
            w_tax: 1.0,
            w_cap: 1.0,
            allow_label_collisions: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ContrastiveError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, w) in [("w_tax", self.w_tax), ("w_cap", self.w_cap)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(ContrastiveError::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        if self.w_tax + self.w_cap <= 0.0 {
            return Err(ContrastiveError::Config("w_tax + w_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Images, captions and class labels for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub c: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// InfoNCE over a logit matrix with positives on the diagonal. Returns the
/// loss and its gradient with respect to the logits. When `labels` is given,
/// off-diagonal entries whose row and column share a label are left out.
fn nce_with_grad(s: &Matrix, symmetric: bool, labels: Option<&[usize]>) -> (f64, Matrix) {
    let n = s.rows();
    let keep = |i: usize, j: usize| i == j || labels.is_none_or(|l| l[i] != l[j]);
    let mut grad = Matrix::zeros(n, n);
    let scale = if symmetric { 0.5 } else { 1.0 } / n as f64;

    let mut rows_loss = 0.0;
    for i in 0..n {
        let cols = (0..n).filter(move |&j| keep(i, j)).map(move |j| (j, s.get(i, j)));
        let lse = log_sum_exp(cols.clone().map(|(_, v)| v));
        rows_loss += lse - s.get(i, i);
        for (j, v) in cols {
            grad.data_mut()[i * n + j] += scale * (v - lse).exp();
        }
        grad.data_mut()[i * n + i] -= scale;
    }
    let mut loss = rows_loss / n as f64;

    if symmetric {
        let mut cols_loss = 0.0;
        for j in 0..n {
            let rows = (0..n).filter(move |&i| keep(i, j)).map(move |i| (i, s.get(i, j)));
            let lse = log_sum_exp(rows.clone().map(|(_, v)| v));
            cols_loss += lse - s.get(j, j);
            for (i, v) in rows {
                grad.data_mut()[i * n + j] += scale * (v - lse).exp();
            }
            grad.data_mut()[j * n + j] -= scale;
        }
        loss = 0.5 * (loss + cols_loss / n as f64);
    }
    (loss, grad)
}

fn check_pair(u: &Matrix, v: &Matrix, tau: f64) -> Result<(), ContrastiveError> {
    if u.shape() != v.shape() {
        return Err(MatrixError::DimensionMismatch {
            op: "infonce",
            left: u.shape(),
            right: v.shape(),
        }
        .into());
    }
    if u.rows() == 0 {
        return Err(ContrastiveError::EmptyBatch);
    }
    if !(u.is_finite() && v.is_finite()) {
        return Err(MatrixError::NonFinite("infonce input").into());
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ContrastiveError::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// InfoNCE between matched rows of `u` and `v` (expected unit-normalized),
/// with logits `u vᵀ / tau`. The symmetric form averages both directions.
pub fn infonce(u: &Matrix, v: &Matrix, tau: f64, symmetric: bool) -> Result<f64, ContrastiveError> {
    check_pair(u, v, tau)?;
    let s = u.matmul_t(v)?.scaled(1.0 / tau);
    Ok(nce_with_grad(&s, symmetric, None).0)
}

/// Loss value split by term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub taxonomy: f64,
    pub caption: f64,
}

fn check_batch(batch: &Batch, params: &ModelParams, config: &LossConfig) -> Result<(), ContrastiveError> {
    config.validate()?;
    params.validate()?;
    if batch.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    let d = params.dims();
    if batch.x.shape() != (batch.len(), d.d_x) || batch.c.shape() != (batch.len(), d.d_c) {
        return Err(ContrastiveError::Shape(format!(
            "batch X {:?} / C {:?} with {} labels does not fit d_x={}, d_c={}",
            batch.x.shape(),
            batch.c.shape(),
            batch.len(),
            d.d_x,
            d.d_c
        )));
    }
    if !(batch.x.is_finite() && batch.c.is_finite()) {
        return Err(MatrixError::NonFinite("batch").into());
    }
    let mut seen = std::collections::HashSet::new();
    for &l in &batch.labels {
        if l >= d.n_classes {
            return Err(ContrastiveError::LabelOutOfRange {
                label: l,
                classes: d.n_classes,
            });
        }
        if !seen.insert(l) && !config.allow_label_collisions {
            return Err(ContrastiveError::DuplicateLabel(l));
        }
    }
    Ok(())
}

/// Backprop through row normalization: `da = (g - û (û·g)) / ‖a‖`.
fn normalize_backward(pre: &Matrix, unit: &Matrix, grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for i in 0..pre.rows() {
        let n = norm(pre.row(i));
        let u = unit.row(i);
        let p = dot(u, grad.row(i));
        for (o, &ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - ui * p) / n;
        }
    }
    out
}

/// One contrastive term between pre-normalization views `a` and `b`.
/// Returns the loss and the gradients with respect to `a` and `b`.
fn term(a: &Matrix, b: &Matrix, tau: f64, symmetric: bool, mask: Option<&[usize]>, weight: f64) -> Result<(f64, Matrix, Matrix), ContrastiveError> {
    let u = unit_normalize(a)?;
    let v = unit_normalize(b)?;
    let s = u.matmul_t(&v)?.scaled(1.0 / tau);
    let (loss, g) = nce_with_grad(&s, symmetric, mask);
    let g = g.scaled(weight / tau);
    let du = g.matmul(&v)?;
    let dv = g.t_matmul(&u)?;
    Ok((loss, normalize_backward(a, &u, &du), normalize_backward(b, &v, &dv)))
}

/// Loss and exact gradients for every parameter matrix.
pub fn loss_and_gradients(batch: &Batch, params: &ModelParams, config: &LossConfig) -> Result<(LossParts, Gradients), ContrastiveError> {
    check_batch(batch, params, config)?;
    let mut grads = ModelParams::zeros(params.dims());
    let mut parts = LossParts::default();
    let h = batch.x.matmul_t(&params.encoder)?;
    let mut dh = Matrix::zeros(h.rows(), h.cols());

    if config.w_tax > 0.0 {
        let a = h.matmul_t(&params.p_tax)?;
        let b = params.t.select_rows(&batch.labels);
        let mask = config.allow_label_collisions.then_some(batch.labels.as_slice());
        let (loss, da, db) = term(&a, &b, config.tau, config.symmetric, mask, config.w_tax)?;
        parts.taxonomy = loss;
        grads.p_tax = da.t_matmul(&h)?;
        dh.axpy(1.0, &da.matmul(&params.p_tax)?)?;
        for (i, &l) in batch.labels.iter().enumerate() {
            for (t, g) in grads.t.row_mut(l).iter_mut().zip(db.row(i)) {
                *t += g;
            }
        }
    }
    if config.w_cap > 0.0 {
        let a = h.matmul_t(&params.p_cap)?;
        let b = batch.c.matmul_t(&params.q_cap)?;
        let (loss, da, db) = term(&a, &b, config.tau, config.symmetric, None, config.w_cap)?;
        parts.caption = loss;
        grads.p_cap = da.t_matmul(&h)?;
        grads.q_cap = db.t_matmul(&batch.c)?;
        dh.axpy(1.0, &da.matmul(&params.p_cap)?)?;
    }
    grads.encoder = dh.t_matmul(&batch.x)?;
    parts.total = config.w_tax * parts.taxonomy + config.w_cap * parts.caption;
    Ok((parts, grads))
}

/// `w_tax · NCE(norm(X Eᵀ P_taxᵀ), norm(T[labels])) + w_cap · NCE(norm(X Eᵀ P_capᵀ), norm(C Q_capᵀ))`
pub fn dual_loss(batch: &Batch, params: &ModelParams, config: &LossConfig) -> Result<f64, ContrastiveError> {
    check_batch(batch, params, config)?;
    let h = batch.x.matmul_t(&params.encoder)?;
    let mut total = 0.0;
    if config.w_tax > 0.0 {
        let u = unit_normalize(&h.matmul_t(&params.p_tax)?)?;
        let v = unit_normalize(&params.t.select_rows(&batch.labels))?;
        let s = u.matmul_t(&v)?.scaled(1.0 / config.tau);
        let mask = config.allow_label_collisions.then_some(batch.labels.as_slice());
        total += config.w_tax * nce_with_grad(&s, config.symmetric, mask).0;
    }
    if config.w_cap > 0.0 {
        total += config.w_cap * caption_term(batch, params, config)?;
    }
    Ok(total)
}

/// The caption term alone, unweighted.
pub fn caption_term(batch: &Batch, params: &ModelParams, config: &LossConfig) -> Result<f64, ContrastiveError> {
    let h = batch.x.matmul_t(&params.encoder)?;
    let u = unit_normalize(&h.matmul_t(&params.p_cap)?)?;
    let v = unit_normalize(&batch.c.matmul_t(&params.q_cap)?)?;
    infonce(&u, &v, config.tau, config.symmetric)
}

pub fn gradients(batch: &Batch, params: &ModelParams, config: &LossConfig) -> Result<Gradients, ContrastiveError> {
    loss_and_gradients(batch, params, config).map(|(_, g)| g)
}

/// Taxonomy-pathway embeddings, `norm(X Eᵀ P_taxᵀ)`.
pub fn embed_for_eval(params: &ModelParams, x: &Matrix) -> Result<Matrix, ContrastiveError> {
    if x.cols() != params.encoder.cols() {
        return Err(MatrixError::DimensionMismatch {
            op: "embed_for_eval",
            left: x.shape(),
            right: params.encoder.shape(),
        }
        .into());
    }
    Ok(unit_normalize(&x.matmul_t(&params.encoder)?.matmul_t(&params.p_tax)?)?)
}

/// Normalized label embeddings, one row per class.
pub fn class_embeddings(params: &ModelParams) -> Result<Matrix, ContrastiveError> {
    Ok(unit_normalize(&params.t)?)
}
