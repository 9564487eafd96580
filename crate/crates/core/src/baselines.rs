//! Post-hoc scorers sharing the evaluation pipeline. Every score is oriented
//! so that higher means more uncertain or more likely out-of-distribution.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::linalg::{log_sum_exp, Mat64};

pub const MAHALANOBIS_RIDGE: f64 = 1e-6;
pub const EIGEN_CUTOFF: f64 = 1e-10;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// `1 − max_k p_k`.
pub fn msp_score(probs: &[f64]) -> f64 {
    1.0 - probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `−log Σ_k exp(f_k)`.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    Ok(-log_sum_exp(logits)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisModel {
    pub means: Mat64,
    pub precision: Mat64,
}

impl MahalanobisModel {
    pub fn dim(&self) -> usize {
        self.precision.rows()
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn quadratic_form(&self, f: &[f64], class: usize) -> f64 {
        let d: Vec<f64> = f.iter().zip(self.means.row(class)).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for (i, di) in d.iter().enumerate() {
            let row = self.precision.row(i);
            q += di * row.iter().zip(&d).map(|(l, dj)| l * dj).sum::<f64>();
        }
        q
    }
}

pub fn fit_mahalanobis(features: &Mat64, labels: &[usize], classes: usize) -> Result<MahalanobisModel> {
    let (n, dim) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(VoltaError::shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    if !features.is_finite() {
        return Err(VoltaError::invalid("non-finite features"));
    }
    let mut counts = vec![0usize; classes];
    let mut means = Mat64::zeros(classes, dim);
    for (row, &y) in features.row_iter().zip(labels) {
        if y >= classes {
            return Err(VoltaError::invalid(format!("label {y} outside [0, {classes})")));
        }
        counts[y] += 1;
        means.row_mut(y).iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    if let Some(c) = counts.iter().position(|&c| c < 2) {
        return Err(VoltaError::invalid(format!(
            "class {c} has {} samples, at least 2 are needed",
            counts[c]
        )));
    }
    for (c, &count) in counts.iter().enumerate() {
        means.row_mut(c).iter_mut().for_each(|m| *m /= count as f64);
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for (row, &y) in features.row_iter().zip(labels) {
        let d: Vec<f64> = row.iter().zip(means.row(y)).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    cov /= n as f64;
    for i in 0..dim {
        cov[(i, i)] += MAHALANOBIS_RIDGE;
    }
    let eig = SymmetricEigen::new(cov);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(VoltaError::numeric("mahalanobis", "covariance has no positive eigenvalue"));
    }
    let mut precision = Mat64::zeros(dim, dim);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < EIGEN_CUTOFF * lmax {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        for i in 0..dim {
            for j in 0..dim {
                let cur = precision.get(i, j);
                precision.set(i, j, cur + v[i] * v[j] / lambda);
            }
        }
    }
    // Average with the transpose so the stored precision is exactly symmetric.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let s = 0.5 * (precision.get(i, j) + precision.get(j, i));
            precision.set(i, j, s);
            precision.set(j, i, s);
        }
    }
    Ok(MahalanobisModel { means, precision })
}

/// Minimum squared Mahalanobis distance to any class mean, clamped at 0.
pub fn mahalanobis_score(model: &MahalanobisModel, f: &[f64]) -> Result<f64> {
    if f.len() != model.dim() {
        return Err(VoltaError::shape(format!(
            "feature has {} entries, model expects {}",
            f.len(),
            model.dim()
        )));
    }
    Ok((0..model.classes())
        .map(|c| model.quadratic_form(f, c))
        .fold(f64::INFINITY, f64::min)
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub q_hat: f64,
    pub n: usize,
}

pub fn fit_conformal(probs: &Mat64, labels: &[usize], alpha: f64) -> Result<ConformalCalibration> {
    let n = probs.rows();
    if n == 0 {
        return Err(VoltaError::invalid("empty conformal calibration set"));
    }
    if labels.len() != n {
        return Err(VoltaError::shape(format!("{n} rows but {} labels", labels.len())));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(VoltaError::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut scores = Vec::with_capacity(n);
    for (row, &y) in probs.row_iter().zip(labels) {
        let p = row
            .get(y)
            .ok_or_else(|| VoltaError::invalid(format!("label {y} outside [0, {})", probs.cols())))?;
        scores.push(1.0 - p);
    }
    scores.sort_by(f64::total_cmp);
    let k = ((n + 1) as f64 * (1.0 - alpha)).ceil() as usize;
    let q_hat = if k > n { 1.0 } else { scores[k.max(1) - 1] };
    Ok(ConformalCalibration {
        alpha,
        q_hat: q_hat.clamp(0.0, 1.0),
        n,
    })
}

/// Labels whose non-conformity `1 − p_k` is within the threshold.
pub fn conformal_set(probs: &[f64], calib: &ConformalCalibration) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p <= calib.q_hat)
        .map(|(k, _)| k)
        .collect()
}

/// Per-sample scores of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub scores: Vec<f64>,
}

pub fn scores_to_csv(methods: &[MethodScores]) -> String {
    let mut out = String::from("sample_id,method,score\n");
    for m in methods {
        for (i, s) in m.scores.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{s}", m.method);
        }
    }
    out
}
