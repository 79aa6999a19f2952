//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxocap::contrastive::{dual_loss, Batch, LossConfig, ModelDims, ModelParams, WorldModel};
use taxocap::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(rand_distr::StandardNormal))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = gaussian_matrix(rows, cols, rng);
    Matrix::from_fn(rows, cols, |i, j| {
        let n: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.get(i, j) / n
    })
}

/// InfoNCE written as plain loops, without max-shifting.
pub fn naive_infonce(u: &Matrix, v: &Matrix, tau: f64, symmetric: bool) -> f64 {
    let n = u.rows();
    let s = |i: usize, j: usize| (0..u.cols()).map(|k| u.get(i, k) * v.get(j, k)).sum::<f64>() / tau;
    let mut forward = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += s(i, j).exp();
        }
        forward += -s(i, i) + denom.ln();
    }
    forward /= n as f64;
    if !symmetric {
        return forward;
    }
    let mut backward = 0.0;
    for j in 0..n {
        let mut denom = 0.0;
        for i in 0..n {
            denom += s(i, j).exp();
        }
        backward += -s(j, j) + denom.ln();
    }
    0.5 * (forward + backward / n as f64)
}

pub fn random_problem(seed: u64, n: usize, dims: ModelDims) -> (Batch, ModelParams) {
    let mut r = rng(seed);
    let params = ModelParams::init(dims, r.random());
    let mut labels: Vec<usize> = (0..dims.n_classes).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, r.random_range(0..=i));
    }
    labels.truncate(n);
    let batch = Batch {
        x: gaussian_matrix(n, dims.d_x, &mut r),
        c: gaussian_matrix(n, dims.d_c, &mut r),
        labels,
    };
    (batch, params)
}

/// Central finite differences of `dual_loss` for every parameter entry.
pub fn finite_difference(batch: &Batch, params: &ModelParams, cfg: &LossConfig, h: f64) -> ModelParams {
    let mut out = params.clone();
    for which in 0..5 {
        let len = params.matrices()[which].data().len();
        for k in 0..len {
            let mut plus = params.clone();
            plus.matrices_mut()[which].data_mut()[k] += h;
            let mut minus = params.clone();
            minus.matrices_mut()[which].data_mut()[k] -= h;
            let d = (dual_loss(batch, &plus, cfg).unwrap() - dual_loss(batch, &minus, cfg).unwrap()) / (2.0 * h);
            out.matrices_mut()[which].data_mut()[k] = d;
        }
    }
    out
}

/// Largest relative error over parameter matrices, each measured as
/// `‖analytic − numeric‖_F / max(‖analytic‖_F, ‖numeric‖_F)`.
pub fn max_relative_error(analytic: &ModelParams, numeric: &ModelParams) -> f64 {
    analytic
        .matrices()
        .iter()
        .zip(numeric.matrices())
        .map(|(a, f)| {
            let diff = a.sub(f).unwrap().frobenius_norm();
            let scale = a.frobenius_norm().max(f.frobenius_norm());
            if scale == 0.0 { 0.0 } else { diff / scale }
        })
        .fold(0.0, f64::max)
}

/// Ranking by descending score via repeated selection of the best remaining
/// candidate (lowest index on ties).
pub fn selection_ranking(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            if scores[left[p]] > scores[left[best]] {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn brute_recall(s: &[Vec<f64>], rel: &[BTreeSet<usize>], k: usize) -> (f64, usize) {
    let mut hits = 0;
    let mut scored = 0;
    for (row, r) in s.iter().zip(rel) {
        if r.is_empty() {
            continue;
        }
        scored += 1;
        let top = selection_ranking(row);
        if top[..k].iter().any(|c| r.contains(c)) {
            hits += 1;
        }
    }
    (if scored == 0 { 0.0 } else { hits as f64 / scored as f64 }, scored)
}

pub fn brute_map(s: &[Vec<f64>], rel: &[BTreeSet<usize>], k: usize) -> f64 {
    let mut total = 0.0;
    let mut scored = 0;
    for (row, r) in s.iter().zip(rel) {
        if r.is_empty() {
            continue;
        }
        scored += 1;
        let top = selection_ranking(row);
        let mut ap = 0.0;
        for rank in 1..=k {
            if r.contains(&top[rank - 1]) {
                let found = top[..rank].iter().filter(|c| r.contains(c)).count();
                ap += found as f64 / rank as f64;
            }
        }
        total += ap / r.len().min(k) as f64;
    }
    total / scored as f64
}

/// Exhaustive top-1: a prediction is correct when no other class scores
/// strictly higher than the label and no lower-indexed class ties it.
pub fn brute_top1(images: &Matrix, classes: &Matrix, labels: &[usize]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let sy = cos(images.row(i), classes.row(y));
        let beaten = (0..classes.rows()).any(|c| {
            let sc = cos(images.row(i), classes.row(c));
            sc > sy || (sc == sy && c < y)
        });
        if !beaten {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Coverage counted with nested loops over records: a taxon (a complete
/// path down to `rank`) is covered when any covered path falls inside it.
pub struct CoverageOracle {
    pub covered_taxa: u64,
    pub total_taxa: u64,
    pub covered_samples: u64,
    pub total_samples: u64,
}

pub fn coverage_oracle(paths: &[Vec<Option<String>>], covered_paths: &[Vec<String>], rank: usize) -> CoverageOracle {
    let prefix = |p: &Vec<Option<String>>| -> Option<Vec<String>> {
        p[..=rank].iter().cloned().collect::<Option<Vec<String>>>()
    };
    let inside = |taxon: &Vec<String>| covered_paths.iter().any(|c| c.len() >= taxon.len() && c[..taxon.len()] == taxon[..]);
    let mut taxa: HashSet<Vec<String>> = HashSet::new();
    let mut covered_taxa: HashSet<Vec<String>> = HashSet::new();
    let mut covered_samples = 0;
    for p in paths {
        if let Some(t) = prefix(p) {
            if inside(&t) {
                covered_samples += 1;
                covered_taxa.insert(t.clone());
            }
            taxa.insert(t);
        }
    }
    CoverageOracle {
        covered_taxa: covered_taxa.len() as u64,
        total_taxa: taxa.len() as u64,
        covered_samples,
        total_samples: paths.len() as u64,
    }
}

/// Workspace-level fixture directory.
pub fn fixtures() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Unit-variance latents: a single class at the origin with unit jitter.
pub fn unit_latent_world(d: usize, seed: u64) -> WorldModel {
    let mut r = rng(seed);
    let scale = |m: Matrix, s: f64| m.scaled(s);
    WorldModel {
        a: scale(gaussian_matrix(d, 4, &mut r), 0.35),
        b: scale(gaussian_matrix(d, 4, &mut r), 0.35),
        g: scale(gaussian_matrix(d, 4, &mut r), 0.35),
        d: scale(gaussian_matrix(d, 4, &mut r), 0.35),
        sigma_x: 0.1,
        sigma_c: 0.1,
        class_means: Matrix::zeros(1, 4),
        jitter: 1.0,
    }
}
