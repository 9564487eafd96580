//! Post-hoc temperature fitting and confidence binning.
//!
//! The validation NLL is minimized over the inverse temperature `β = 1/τ`,
//! where it is convex: its second derivative is the mean, over samples, of
//! the variance of the similarities under the tempered softmax.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Result, VoltaError};
use crate::linalg::Mat64;
use crate::model::{Mode, VoltaModel};

pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 1e3;
pub const GRAD_TOL: f64 = 1e-10;
pub const WIDTH_TOL: f64 = 1e-12;
pub const MAX_ITER: usize = 200;
pub const N_BINS: usize = 15;

/// Per-sample score vectors with labels. Cosine similarities lie in
/// `[-1, 1]`; [`SimilaritySet::from_scores`] skips that check for
/// arbitrary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySet {
    scores: Mat64,
    labels: Vec<usize>,
}

impl SimilaritySet {
    pub fn new(sims: Mat64, labels: Vec<usize>) -> Result<Self> {
        if let Some(a) = sims.as_slice().iter().find(|a| a.abs() > 1.0 + 1e-9) {
            return Err(VoltaError::invalid(format!("similarity {a} outside [-1, 1]")));
        }
        Self::from_scores(sims, labels)
    }

    pub fn from_scores(scores: Mat64, labels: Vec<usize>) -> Result<Self> {
        if scores.rows() != labels.len() {
            return Err(VoltaError::shape(format!(
                "{} labels for {} rows",
                labels.len(),
                scores.rows()
            )));
        }
        if scores.rows() == 0 || scores.cols() == 0 {
            return Err(VoltaError::invalid("empty similarity set"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= scores.cols()) {
            return Err(VoltaError::invalid(format!("label {y} outside [0, {})", scores.cols())));
        }
        if !scores.is_finite() {
            return Err(VoltaError::invalid("non-finite similarity"));
        }
        Ok(SimilaritySet { scores, labels })
    }

    pub fn scores(&self) -> &Mat64 {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn labels_at_row_max(&self) -> bool {
        self.scores
            .row_iter()
            .zip(&self.labels)
            .all(|(r, &y)| r.iter().all(|&a| a <= r[y]))
    }

    fn is_flat(&self) -> bool {
        self.scores.row_iter().all(|r| r.iter().all(|&a| a == r[0]))
    }
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// `log Σ_j exp(β(a_j − a_y))`, evaluated through `log1p` so that
/// confidently correct samples keep full relative precision.
fn sample_nll(row: &[f64], y: usize, beta: f64) -> f64 {
    let ay = row[y];
    let (top, &amax) = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty row");
    let m = beta * (amax - ay);
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &a)| (beta * (a - amax)).exp())
        .sum();
    m + rest.ln_1p()
}

/// Mean NLL at inverse temperature `beta` with its first two derivatives.
pub fn nll_of_beta(set: &SimilaritySet, beta: f64) -> Result<NllEval> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(VoltaError::invalid(format!("beta {beta} must be positive")));
    }
    let (mut v, mut g, mut h) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    let k = set.scores.cols();
    let mut w = vec![0.0; k];
    for (row, &y) in set.scores.row_iter().zip(&set.labels) {
        v.add(sample_nll(row, y, beta));
        let amax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (wj, &a) in w.iter_mut().zip(row) {
            *wj = (beta * (a - amax)).exp();
            z += *wj;
        }
        let mean: f64 = w.iter().zip(row).map(|(p, a)| p * a).sum::<f64>() / z;
        let var: f64 = w.iter().zip(row).map(|(p, a)| p * (a - mean) * (a - mean)).sum::<f64>() / z;
        g.add(mean - row[y]);
        h.add(var);
    }
    let n = set.len() as f64;
    Ok(NllEval {
        value: v.total() / n,
        d1: g.total() / n,
        d2: h.total() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Converged,
    /// The minimum lies at (or beyond) an end of the β bracket.
    Boundary,
    /// Every sample has identical scores, so the objective is constant.
    FlatObjective,
    /// Iteration budget spent before a tolerance was met.
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub beta_star: f64,
    pub tau_star: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub iterations: usize,
    pub status: CalibrationStatus,
}

/// Guarded Newton from `β = 1`; `nll_before` is the objective there.
pub fn fit_temperature(set: &SimilaritySet) -> Result<CalibrationResult> {
    fit_temperature_from(set, 1.0)
}

/// Guarded Newton on `[BETA_MIN, BETA_MAX]` starting from `beta_ref`, with
/// bisection whenever a Newton step leaves the current bracket.
pub fn fit_temperature_from(set: &SimilaritySet, beta_ref: f64) -> Result<CalibrationResult> {
    if set.is_empty() {
        return Err(VoltaError::invalid("empty calibration set"));
    }
    let before = nll_of_beta(set, beta_ref)?.value;
    let done = |beta: f64, iterations, status| -> Result<CalibrationResult> {
        Ok(CalibrationResult {
            beta_star: beta,
            tau_star: 1.0 / beta,
            nll_before: before,
            nll_after: nll_of_beta(set, beta)?.value,
            iterations,
            status,
        })
    };
    if set.is_flat() {
        return done(1.0, 0, CalibrationStatus::FlatObjective);
    }
    // When every label sits at its row maximum the derivative is negative for
    // all β, even where it underflows to zero near BETA_MAX.
    if set.labels_at_row_max() || nll_of_beta(set, BETA_MAX)?.d1 < 0.0 {
        return done(BETA_MAX, 0, CalibrationStatus::Boundary);
    }
    if nll_of_beta(set, BETA_MIN)?.d1 > 0.0 {
        return done(BETA_MIN, 0, CalibrationStatus::Boundary);
    }
    let (mut lo, mut hi) = (BETA_MIN, BETA_MAX);
    let mut beta = beta_ref.clamp(BETA_MIN, BETA_MAX);
    for it in 1..=MAX_ITER {
        let e = nll_of_beta(set, beta)?;
        if e.d1.abs() < GRAD_TOL {
            return done(beta, it, CalibrationStatus::Converged);
        }
        if e.d1 > 0.0 {
            hi = beta;
        } else {
            lo = beta;
        }
        if hi - lo < WIDTH_TOL {
            return done(beta, it, CalibrationStatus::Converged);
        }
        let newton = beta - e.d1 / e.d2;
        beta = if e.d2 > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    done(beta, MAX_ITER, CalibrationStatus::MaxIterations)
}

/// Derivative-free cross-check: golden-section search over `log β`.
pub fn fit_temperature_golden(set: &SimilaritySet) -> Result<f64> {
    if set.is_empty() {
        return Err(VoltaError::invalid("empty calibration set"));
    }
    // Objective sums stay in compensated (sum, carry) form so comparisons
    // resolve differences below one ulp of the mean.
    let f = |t: f64| {
        let beta = t.exp();
        let mut acc = KahanSum::default();
        for (row, &y) in set.scores.row_iter().zip(&set.labels) {
            acc.add(sample_nll(row, y, beta));
        }
        Ok::<_, VoltaError>(acc)
    };
    let le = |a: KahanSum, b: KahanSum| (a.sum - b.sum) + (a.c - b.c) <= 0.0;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (BETA_MIN.ln(), BETA_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..MAX_ITER {
        if b - a < WIDTH_TOL {
            break;
        }
        if le(fc, fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// Similarities of every validation sample against the model's prototypes.
pub fn similarity_set(model: &VoltaModel, data: &FeatureDataset) -> Result<SimilaritySet> {
    let (_, cache) = model.forward(data.features(), Mode::Eval)?;
    // rounding can push a cosine a hair past ±1
    let mut sims = cache.sims;
    for a in sims.as_mut_slice() {
        *a = a.clamp(-1.0, 1.0);
    }
    SimilaritySet::new(sims, data.labels().to_vec())
}

/// Fits `τ*` on validation data and stores it in the model. The reported
/// `nll_before` is the validation NLL at the training temperature.
pub fn calibrate(model: &mut VoltaModel, val: &FeatureDataset) -> Result<CalibrationResult> {
    let set = similarity_set(model, val)?;
    let result = fit_temperature_from(&set, 1.0 / model.temperature.tau)
        .map_err(|e| e.context("temperature calibration"))?;
    model.temperature.tau_star = result.tau_star;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

/// Bin index `floor(15·conf)`, with `conf = 1` in the last bin.
pub fn bin_index(conf: f64) -> usize {
    ((conf * N_BINS as f64).floor() as usize).min(N_BINS - 1)
}

pub fn reliability(confidences: &[f64], correct: &[bool]) -> Result<ReliabilityBins> {
    if confidences.len() != correct.len() {
        return Err(VoltaError::shape("confidences and correctness flags differ in length"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(VoltaError::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut sum_conf = [0.0; N_BINS];
    let mut hits = [0usize; N_BINS];
    let mut counts = [0usize; N_BINS];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c);
        counts[b] += 1;
        sum_conf[b] += c;
        hits[b] += ok as usize;
    }
    let bins = (0..N_BINS)
        .map(|b| {
            let n = counts[b];
            Bin {
                lo: b as f64 / N_BINS as f64,
                hi: (b + 1) as f64 / N_BINS as f64,
                count: n,
                mean_conf: if n > 0 { sum_conf[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits[b] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total: confidences.len(),
    })
}

impl ReliabilityBins {
    /// Count-weighted mean of `|accuracy − confidence|`.
    pub fn ece(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / self.total as f64 * (b.accuracy - b.mean_conf).abs())
            .sum()
    }

    /// Largest `|accuracy − confidence|` over occupied bins.
    pub fn mce(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.accuracy - b.mean_conf).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,mean_conf,accuracy\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.mean_conf, b.accuracy);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_set(n: usize, k: usize, seed: u64) -> SimilaritySet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sims = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..k);
            for j in 0..k {
                let base: f64 = rng.random_range(-0.6..0.6);
                sims.push(if j == y { (base + 0.4).min(1.0) } else { base });
            }
            labels.push(y);
        }
        SimilaritySet::new(Mat64::from_vec(n, k, sims).unwrap(), labels).unwrap()
    }

    #[test]
    fn flat_set_has_constant_objective() {
        let set = SimilaritySet::new(Mat64::from_vec(3, 4, vec![0.3; 12]).unwrap(), vec![0, 1, 3]).unwrap();
        for beta in [0.01, 1.0, 50.0] {
            let e = nll_of_beta(&set, beta).unwrap();
            assert!((e.value - 4f64.ln()).abs() < 1e-14);
            assert_eq!((e.d1, e.d2), (0.0, 0.0));
        }
        let r = fit_temperature(&set).unwrap();
        assert_eq!((r.beta_star, r.status), (1.0, CalibrationStatus::FlatObjective));
    }

    #[test]
    fn single_binary_sample_runs_to_upper_boundary() {
        let set = SimilaritySet::new(Mat64::from_vec(1, 2, vec![1.0, 0.0]).unwrap(), vec![0]).unwrap();
        let mut prev = f64::INFINITY;
        for beta in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let v = nll_of_beta(&set, beta).unwrap().value;
            assert!((v - (-beta).exp().ln_1p()).abs() < 1e-15);
            assert!(v < prev);
            prev = v;
        }
        let r = fit_temperature(&set).unwrap();
        assert_eq!((r.beta_star, r.status), (BETA_MAX, CalibrationStatus::Boundary));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let set = random_set(60, 5, 4);
        let h = 1e-6;
        for beta in [0.2, 1.0, 3.7, 12.0] {
            let e = nll_of_beta(&set, beta).unwrap();
            let p = nll_of_beta(&set, beta + h).unwrap();
            let m = nll_of_beta(&set, beta - h).unwrap();
            assert!((e.d1 - (p.value - m.value) / (2.0 * h)).abs() < 1e-6);
            assert!((e.d2 - (p.d1 - m.d1) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn newton_and_golden_section_agree() {
        for seed in 0..10 {
            let set = random_set(200, 6, seed);
            let r = fit_temperature(&set).unwrap();
            assert_eq!(r.status, CalibrationStatus::Converged);
            let g = fit_temperature_golden(&set).unwrap();
            assert!(((g - r.beta_star) / r.beta_star).abs() < 1e-8, "{g} vs {}", r.beta_star);
            assert!(r.nll_after <= r.nll_before + 1e-12);
        }
    }

    #[test]
    fn reliability_examples() {
        let b = reliability(&[1.0, 1.0, 1.0], &[true, true, true]).unwrap();
        let occupied: Vec<&Bin> = b.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!((occupied[0].lo, occupied[0].accuracy, occupied[0].mean_conf), (14.0 / 15.0, 1.0, 1.0));
        assert_eq!(bin_index(0.5), 7);
        assert_eq!(bin_index(0.0), 0);

        // hand-binned: 0.05→0, 0.10→1, 0.34→5, 0.35→5, 0.99→14, 0.93→13
        let conf = [0.05, 0.10, 0.34, 0.35, 0.99, 0.93];
        let ok = [false, true, true, false, true, true];
        let b = reliability(&conf, &ok).unwrap();
        let counts: Vec<usize> = b.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![1, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(b.bins[5].accuracy, 0.5);
        assert!((b.bins[5].mean_conf - 0.345).abs() < 1e-15);
        assert_eq!(b.bins.iter().map(|b| b.count).sum::<usize>(), 6);
        assert!(reliability(&[1.5], &[true]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn curvature_is_non_negative(seed in any::<u64>(), n in 1usize..40, k in 2usize..8) {
            let set = random_set(n, k, seed);
            for i in 0..100 {
                let beta = 10f64.powf(-3.0 + 6.0 * i as f64 / 99.0);
                prop_assert!(nll_of_beta(&set, beta).unwrap().d2 >= -1e-12);
            }
        }

        #[test]
        fn fitting_never_increases_nll(seed in any::<u64>(), n in 1usize..60, k in 2usize..6) {
            let set = random_set(n, k, seed);
            let r = fit_temperature(&set).unwrap();
            prop_assert!(r.nll_after <= r.nll_before + 1e-12);
        }
    }
}
