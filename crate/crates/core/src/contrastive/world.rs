//! Linear-Gaussian two-view world and representation diagnostics.
//!
//! `x = A z + G ε + η_x`, `c = B z + D ε + η_c`, with `z` drawn around the
//! mean of the sample's class and `ε` independent of `z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Batch, ContrastiveError};
use crate::linalg::{norm, orthonormal_column_basis, Matrix, MatrixError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    /// Trait loadings of the image view, `d_x × d_z`.
    pub a: Matrix,
    /// Trait loadings of the caption view, `d_c × d_z`.
    pub b: Matrix,
    /// Nuisance loadings of the image view, `d_x × d_ε`.
    pub g: Matrix,
    /// Nuisance loadings of the caption view, `d_c × d_ε`.
    pub d: Matrix,
    pub sigma_x: f64,
    pub sigma_c: f64,
    /// One row per class, `n_classes × d_z`.
    pub class_means: Matrix,
    /// Standard deviation of `z` around its class mean.
    pub jitter: f64,
}

/// Settings for generating a random world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub d_z: usize,
    pub d_eps: usize,
    pub d_x: usize,
    pub d_c: usize,
    pub n_classes: usize,
    pub sigma_x: f64,
    pub sigma_c: f64,
    pub jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_z: 4,
            d_eps: 4,
            d_x: 32,
            d_c: 32,
            n_classes: 20,
            sigma_x: 0.1,
            sigma_c: 0.1,
            jitter: 0.3,
        }
    }
}

impl WorldModel {
    /// Random loadings with entries `N(0, 1/d_z)` and `N(0, 1/d_ε)`, class
    /// means `N(0, 1)`. `D` starts at zero (captions carry no nuisance).
    pub fn generate(cfg: &WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| n.sample(&mut rng))
        };
        let a = gauss(cfg.d_x, cfg.d_z, (1.0 / cfg.d_z as f64).sqrt());
        let b = gauss(cfg.d_c, cfg.d_z, (1.0 / cfg.d_z as f64).sqrt());
        let g = gauss(cfg.d_x, cfg.d_eps, (1.0 / cfg.d_eps as f64).sqrt());
        let class_means = gauss(cfg.n_classes, cfg.d_z, 1.0);
        Self {
            a,
            b,
            g,
            d: Matrix::zeros(cfg.d_c, cfg.d_eps),
            sigma_x: cfg.sigma_x,
            sigma_c: cfg.sigma_c,
            class_means,
            jitter: cfg.jitter,
        }
    }

    /// Copy whose caption nuisance `D` is `direction` rescaled so that
    /// `‖G Dᵀ‖_F = ratio · ‖A Bᵀ‖_F`.
    pub fn with_caption_nuisance(&self, direction: &Matrix, ratio: f64) -> Result<Self, ContrastiveError> {
        let mut out = self.clone();
        if ratio == 0.0 {
            out.d = Matrix::zeros(self.d.rows(), self.d.cols());
            return Ok(out);
        }
        let gd = self.g.matmul_t(direction)?.frobenius_norm();
        if gd == 0.0 {
            return Err(ContrastiveError::Config("nuisance direction has G·Dᵀ = 0".into()));
        }
        let ab = self.a.matmul_t(&self.b)?.frobenius_norm();
        out.d = direction.scaled(ratio * ab / gd);
        Ok(out)
    }

    /// Random `D` direction for [`WorldModel::with_caption_nuisance`].
    pub fn random_nuisance_direction(&self, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(self.d.rows(), self.d.cols(), |_, _| rng.sample(StandardNormal))
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let (d_x, d_z) = self.a.shape();
        let (d_c, d_eps) = self.d.shape();
        let ok = self.b.shape() == (d_c, d_z)
            && self.g.shape() == (d_x, d_eps)
            && self.class_means.cols() == d_z
            && self.class_means.rows() >= 1;
        if !ok {
            return Err(ContrastiveError::Shape("world model matrices disagree".into()));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_c >= 0.0 && self.jitter >= 0.0) {
            return Err(ContrastiveError::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Covariance of `z` under uniform labels: spread of the class means
    /// plus the jitter.
    pub fn latent_covariance(&self) -> Matrix {
        let k = self.n_classes();
        let d_z = self.class_means.cols();
        let mean: Vec<f64> = (0..d_z)
            .map(|j| (0..k).map(|i| self.class_means.get(i, j)).sum::<f64>() / k as f64)
            .collect();
        Matrix::from_fn(d_z, d_z, |a, b| {
            let between = (0..k)
                .map(|i| (self.class_means.get(i, a) - mean[a]) * (self.class_means.get(i, b) - mean[b]))
                .sum::<f64>()
                / k as f64;
            between + if a == b { self.jitter * self.jitter } else { 0.0 }
        })
    }

    /// Population cross-covariance `A Cov(z) Bᵀ + G Dᵀ`.
    pub fn expected_cross_covariance(&self) -> Matrix {
        let shared = self
            .a
            .matmul(&self.latent_covariance())
            .and_then(|m| m.matmul_t(&self.b))
            .expect("validated shapes");
        shared.add(&self.g.matmul_t(&self.d).expect("validated shapes")).expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x: Matrix,
    pub c: Matrix,
    pub labels: Vec<usize>,
    pub z: Matrix,
    pub eps: Matrix,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            c: self.c.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Draws `n` samples; the result depends only on `model`, `n` and `seed`.
pub fn sample_world(model: &WorldModel, n: usize, seed: u64) -> Result<SyntheticDataset, ContrastiveError> {
    model.validate()?;
    if n == 0 {
        return Err(ContrastiveError::EmptyBatch);
    }
    let (d_x, d_z) = model.a.shape();
    let (d_c, d_eps) = model.d.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, d_x);
    let mut c = Matrix::zeros(n, d_c);
    let mut z = Matrix::zeros(n, d_z);
    let mut eps = Matrix::zeros(n, d_eps);
    let mut labels = Vec::with_capacity(n);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    for i in 0..n {
        let y = rng.random_range(0..model.n_classes());
        labels.push(y);
        for (k, zk) in z.row_mut(i).iter_mut().enumerate() {
            *zk = model.class_means.get(y, k) + model.jitter * normal(&mut rng);
        }
        for e in eps.row_mut(i) {
            *e = normal(&mut rng);
        }
        let (zi, ei) = (z.row(i).to_vec(), eps.row(i).to_vec());
        for (r, out) in x.row_mut(i).iter_mut().enumerate() {
            let trait_part: f64 = zi.iter().enumerate().map(|(k, v)| model.a.get(r, k) * v).sum();
            let nuisance: f64 = ei.iter().enumerate().map(|(k, v)| model.g.get(r, k) * v).sum();
            *out = trait_part + nuisance + model.sigma_x * normal(&mut rng);
        }
        for (r, out) in c.row_mut(i).iter_mut().enumerate() {
            let trait_part: f64 = zi.iter().enumerate().map(|(k, v)| model.b.get(r, k) * v).sum();
            let nuisance: f64 = ei.iter().enumerate().map(|(k, v)| model.d.get(r, k) * v).sum();
            *out = trait_part + nuisance + model.sigma_c * normal(&mut rng);
        }
    }
    Ok(SyntheticDataset { x, c, labels, z, eps })
}

/// Sample cross-covariance `(1/(n-1)) Σ (x_i - x̄)(c_i - c̄)ᵀ`.
pub fn cross_covariance(x: &Matrix, c: &Matrix) -> Result<Matrix, ContrastiveError> {
    if x.rows() != c.rows() {
        return Err(MatrixError::DimensionMismatch {
            op: "cross_covariance",
            left: x.shape(),
            right: c.shape(),
        }
        .into());
    }
    let n = x.rows();
    if n < 2 {
        return Err(MatrixError::TooFewRows { needed: 2, got: n }.into());
    }
    let centered = |m: &Matrix| {
        let means: Vec<f64> = (0..m.cols())
            .map(|j| (0..n).map(|i| m.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        Matrix::from_fn(n, m.cols(), |i, j| m.get(i, j) - means[j])
    };
    Ok(centered(x).t_matmul(&centered(c))?.scaled(1.0 / (n - 1) as f64))
}

/// Share of `P`'s squared Frobenius norm that lies in the column space of
/// `A`: `‖P Π_A‖²_F / ‖P‖²_F`.
pub fn trait_energy_ratio(p: &Matrix, a: &Matrix) -> Result<f64, ContrastiveError> {
    if p.cols() != a.rows() {
        return Err(MatrixError::DimensionMismatch {
            op: "trait_energy_ratio",
            left: p.shape(),
            right: a.shape(),
        }
        .into());
    }
    let total = p.frobenius_norm();
    if total == 0.0 {
        return Err(MatrixError::ZeroRow(0).into());
    }
    let q = orthonormal_column_basis(a, 1e-10);
    if q.cols() == 0 {
        return Err(ContrastiveError::Config("trait loading matrix has an empty column space".into()));
    }
    let inside = p.matmul(&q)?.frobenius_norm();
    Ok(((inside / total).powi(2)).clamp(0.0, 1.0))
}

/// Mean squared distance between matched rows.
pub fn alignment_metric(u: &Matrix, v: &Matrix) -> Result<f64, ContrastiveError> {
    if u.shape() != v.shape() {
        return Err(MatrixError::DimensionMismatch {
            op: "alignment_metric",
            left: u.shape(),
            right: v.shape(),
        }
        .into());
    }
    if u.rows() == 0 {
        return Err(ContrastiveError::EmptyBatch);
    }
    let total: f64 = (0..u.rows())
        .map(|i| {
            let d: Vec<f64> = u.row(i).iter().zip(v.row(i)).map(|(a, b)| a - b).collect();
            norm(&d).powi(2)
        })
        .sum();
    Ok(total / u.rows() as f64)
}

/// `log mean_{i≠j} exp(-2 ‖u_i - u_j‖²)` over ordered pairs.
pub fn uniformity_metric(u: &Matrix) -> Result<f64, ContrastiveError> {
    let n = u.rows();
    if n < 2 {
        return Err(MatrixError::TooFewRows { needed: 2, got: n }.into());
    }
    let mut terms = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2: f64 = u.row(i).iter().zip(u.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                terms.push(-2.0 * d2);
            }
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = terms.iter().map(|t| (t - max).exp()).sum::<f64>() / terms.len() as f64;
    Ok(max + mean.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_identity_world_returns_class_means() {
        let means = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]]).unwrap();
        let model = WorldModel {
            a: Matrix::identity(2),
            b: Matrix::identity(2),
            g: Matrix::zeros(2, 2),
            d: Matrix::zeros(2, 2),
            sigma_x: 0.0,
            sigma_c: 0.0,
            class_means: means.clone(),
            jitter: 0.0,
        };
        let ds = sample_world(&model, 50, 7).unwrap();
        for i in 0..50 {
            assert_eq!(ds.x.row(i), means.row(ds.labels[i]));
            assert_eq!(ds.c.row(i), means.row(ds.labels[i]));
        }
        assert_eq!(sample_world(&model, 50, 7).unwrap(), ds);
    }

    #[test]
    fn nuisance_scaling_matches_target() {
        let w = WorldModel::generate(&WorldConfig::default(), 1);
        let noisy = w.with_caption_nuisance(&w.random_nuisance_direction(2), 1.0).unwrap();
        let gd = noisy.g.matmul_t(&noisy.d).unwrap().frobenius_norm();
        let ab = noisy.a.matmul_t(&noisy.b).unwrap().frobenius_norm();
        assert!((gd - ab).abs() < 1e-9 * ab);
        assert_eq!(w.with_caption_nuisance(&noisy.d, 0.0).unwrap().d, Matrix::zeros(32, 4));
    }

    #[test]
    fn energy_ratio_extremes() {
        let a = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        let inside = Matrix::from_rows(&[[2.0, 0.0, 0.0]]).unwrap();
        let outside = Matrix::from_rows(&[[0.0, 1.0, -1.0]]).unwrap();
        assert_eq!(trait_energy_ratio(&inside, &a).unwrap(), 1.0);
        assert_eq!(trait_energy_ratio(&outside, &a).unwrap(), 0.0);
        assert!(trait_energy_ratio(&Matrix::zeros(1, 3), &a).is_err());
    }

    #[test]
    fn alignment_and_uniformity_closed_forms() {
        let u = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(alignment_metric(&u, &u).unwrap(), 0.0);
        assert!((uniformity_metric(&u).unwrap() + 8.0).abs() < 1e-12);
        assert!(uniformity_metric(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn covariance_of_self_is_covariance() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 1.0], [0.0, 0.0], [2.0, 5.0]]).unwrap();
        let s = cross_covariance(&x, &x).unwrap();
        // var of column 0: mean 1.5, squares 0.25+2.25+2.25+0.25 = 5, /3
        assert!((s.get(0, 0) - 5.0 / 3.0).abs() < 1e-14);
        assert_eq!(s.get(0, 1), s.get(1, 0));
        assert!(cross_covariance(&x.select_rows(&[0]), &x.select_rows(&[0])).is_err());
    }
}
