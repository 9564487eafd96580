//! Proper scores, calibration error, selective prediction and OOD detection
//! statistics. Uncertainty and OOD scores are oriented so that larger means
//! less trustworthy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{bin_index, reliability, ReliabilityBins, N_BINS};
use crate::error::{Result, VoltaError};
use crate::linalg::{argmax, Mat64};
use crate::model::{PredictiveOutput, VoltaModel, PROB_FLOOR};

/// Per-sample probabilities, labels and uncertainty scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInputs {
    probs: Mat64,
    labels: Vec<usize>,
    uncertainty: Vec<f64>,
    predicted: Vec<usize>,
}

impl EvalInputs {
    pub fn new(probs: Mat64, labels: Vec<usize>, uncertainty: Vec<f64>) -> Result<Self> {
        let n = probs.rows();
        if n == 0 {
            return Err(VoltaError::invalid("no samples to evaluate"));
        }
        if labels.len() != n || uncertainty.len() != n {
            return Err(VoltaError::shape(format!(
                "{n} probability rows, {} labels, {} scores",
                labels.len(),
                uncertainty.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
            return Err(VoltaError::invalid(format!("label {y} outside [0, {})", probs.cols())));
        }
        for (i, row) in probs.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(VoltaError::invalid(format!("row {i} is not a probability vector")));
            }
        }
        if uncertainty.iter().any(|u| !u.is_finite()) {
            return Err(VoltaError::invalid("non-finite uncertainty score"));
        }
        let predicted = probs.row_iter().map(argmax).collect();
        Ok(EvalInputs {
            probs,
            labels,
            uncertainty,
            predicted,
        })
    }

    /// Uses each output's calibrated probabilities and uncertainty score.
    pub fn from_outputs(outputs: &[PredictiveOutput], labels: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = outputs.iter().map(|o| o.probabilities.clone()).collect();
        EvalInputs::new(
            Mat64::from_rows(&rows)?,
            labels.to_vec(),
            outputs.iter().map(|o| o.uncertainty).collect(),
        )
    }

    pub fn with_uncertainty(&self, uncertainty: Vec<f64>) -> Result<Self> {
        EvalInputs::new(self.probs.clone(), self.labels.clone(), uncertainty)
    }

    pub fn probs(&self) -> &Mat64 {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn correct(&self) -> Vec<bool> {
        self.predicted.iter().zip(&self.labels).map(|(p, y)| p == y).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.probs
            .row_iter()
            .zip(&self.predicted)
            .map(|(r, &k)| r[k])
            .collect()
    }
}

pub fn accuracy(inputs: &EvalInputs) -> f64 {
    inputs.correct().iter().filter(|&&c| c).count() as f64 / inputs.len() as f64
}

pub fn nll(inputs: &EvalInputs) -> f64 {
    let total: f64 = inputs
        .probs
        .row_iter()
        .zip(&inputs.labels)
        .map(|(r, &y)| -r[y].max(PROB_FLOOR).ln())
        .sum();
    total / inputs.len() as f64
}

pub fn brier(inputs: &EvalInputs) -> f64 {
    let total: f64 = inputs
        .probs
        .row_iter()
        .zip(&inputs.labels)
        .map(|(r, &y)| {
            r.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let o = if k == y { 1.0 } else { 0.0 };
                    (p - o) * (p - o)
                })
                .sum::<f64>()
        })
        .sum();
    total / inputs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrierMode {
    /// Three textbook-style formulas around the empirical class prior, in
    /// which the resolution and reliability terms are the same expression.
    AsPrinted,
    /// Murphy decomposition over the 15 confidence bins, with the
    /// within-bin terms folded into reliability so that the identity
    /// `Brier = UNC − RES + REL` is exact.
    MurphyBinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierDecomposition {
    pub unc: f64,
    pub res: f64,
    pub rel: f64,
    pub mode: BrierMode,
}

fn class_prior(inputs: &EvalInputs) -> Vec<f64> {
    let k = inputs.probs.cols();
    let mut prior = vec![0.0; k];
    for &y in &inputs.labels {
        prior[y] += 1.0;
    }
    let n = inputs.len() as f64;
    prior.iter_mut().for_each(|p| *p /= n);
    prior
}

pub fn brier_decomposition(inputs: &EvalInputs, mode: BrierMode) -> BrierDecomposition {
    let n = inputs.len() as f64;
    let k = inputs.probs.cols();
    let ybar = class_prior(inputs);
    let onehot = |y: usize, j: usize| if y == j { 1.0 } else { 0.0 };
    match mode {
        BrierMode::AsPrinted => {
            let (mut unc, mut res, mut rel) = (0.0, 0.0, 0.0);
            for (r, &y) in inputs.probs.row_iter().zip(&inputs.labels) {
                for j in 0..k {
                    unc += (ybar[j] - onehot(y, j)).powi(2);
                    res += (ybar[j] - r[j]).powi(2);
                    rel += (r[j] - ybar[j]).powi(2);
                }
            }
            BrierDecomposition {
                unc: unc / n,
                res: res / n,
                rel: rel / n,
                mode,
            }
        }
        BrierMode::MurphyBinned => {
            let conf = inputs.confidences();
            let mut counts = [0usize; N_BINS];
            let mut obar = vec![vec![0.0; k]; N_BINS];
            for (&c, &y) in conf.iter().zip(&inputs.labels) {
                let b = bin_index(c);
                counts[b] += 1;
                obar[b][y] += 1.0;
            }
            for (b, o) in obar.iter_mut().enumerate() {
                if counts[b] > 0 {
                    o.iter_mut().for_each(|v| *v /= counts[b] as f64);
                }
            }
            let unc: f64 = ybar.iter().map(|p| p * (1.0 - p)).sum();
            let res: f64 = (0..N_BINS)
                .map(|b| {
                    counts[b] as f64 * obar[b].iter().zip(&ybar).map(|(o, y)| (o - y).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / n;
            let mut rel = 0.0;
            for ((r, &y), &c) in inputs.probs.row_iter().zip(&inputs.labels).zip(&conf) {
                let ob = &obar[bin_index(c)];
                for j in 0..k {
                    let d = r[j] - ob[j];
                    rel += d * d - 2.0 * d * (onehot(y, j) - ob[j]);
                }
            }
            BrierDecomposition {
                unc,
                res,
                rel: rel / n,
                mode,
            }
        }
    }
}

pub fn reliability_of(inputs: &EvalInputs) -> ReliabilityBins {
    reliability(&inputs.confidences(), &inputs.correct())
        .expect("validated probabilities lie in [0, 1]")
}

/// `(ECE, MCE)` over the shared 15-bin partition.
pub fn ece_mce(inputs: &EvalInputs) -> (f64, f64) {
    let bins = reliability_of(inputs);
    (bins.ece(), bins.mce())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    /// Sample indices in acceptance order.
    pub order: Vec<usize>,
    pub coverage: Vec<f64>,
    pub risk: Vec<f64>,
    pub aurc: f64,
    pub e_aurc: f64,
    pub selective_auc: f64,
}

impl RiskCoverageCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coverage,risk\n");
        for (c, r) in self.coverage.iter().zip(&self.risk) {
            let _ = writeln!(out, "{c},{r}");
        }
        out
    }
}

/// Accepts samples in ascending uncertainty (ties by index) and records the
/// error rate at every coverage level `i/N`.
pub fn risk_coverage_from(uncertainty: &[f64], correct: &[bool]) -> Result<RiskCoverageCurve> {
    let n = uncertainty.len();
    if n == 0 || correct.len() != n {
        return Err(VoltaError::invalid("risk-coverage needs matching, non-empty inputs"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    let mut errors = 0usize;
    let mut coverage = Vec::with_capacity(n);
    let mut risk = Vec::with_capacity(n);
    for (i, &idx) in order.iter().enumerate() {
        errors += !correct[idx] as usize;
        coverage.push((i + 1) as f64 / n as f64);
        risk.push(errors as f64 / (i + 1) as f64);
    }
    let aurc = risk.iter().sum::<f64>() / n as f64;
    let err = errors as f64 / n as f64;
    let selective_auc = risk.iter().map(|r| 1.0 - r).sum::<f64>() / n as f64;
    Ok(RiskCoverageCurve {
        order,
        coverage,
        risk,
        aurc,
        e_aurc: aurc - err * (1.0 - err),
        selective_auc,
    })
}

pub fn risk_coverage(inputs: &EvalInputs) -> RiskCoverageCurve {
    risk_coverage_from(&inputs.uncertainty, &inputs.correct()).expect("validated inputs")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fpr95Mode {
    /// Linear interpolation between the two operating points around 95% TPR.
    Interpolated,
    /// FPR of the first achievable operating point with TPR ≥ 95%.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodScores {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr95: f64,
}

fn check_binary(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(VoltaError::invalid("both ID and OOD scores are required"));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(VoltaError::invalid("non-finite detection score"));
    }
    Ok(())
}

/// Rank-sum AUROC with midranks for ties; OOD is the positive class.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_binary(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (ood.len() as f64, id.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// ROC operating points from the strictest threshold down, starting at
/// `(0, 0)`; tied scores form a single point.
pub fn roc_curve(id: &[f64], ood: &[f64]) -> Result<Vec<RocPoint>> {
    check_binary(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (ood.len() as f64, id.len() as f64);
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Ok(pts)
}

pub fn auroc_trapezoid(id: &[f64], ood: &[f64]) -> Result<f64> {
    let pts = roc_curve(id, ood)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

pub fn pr_curve(id: &[f64], ood: &[f64]) -> Result<Vec<PrPoint>> {
    let roc = roc_curve(id, ood)?;
    let (np, nn) = (ood.len() as f64, id.len() as f64);
    Ok(roc[1..]
        .iter()
        .map(|p| {
            let tp = p.tpr * np;
            let fp = p.fpr * nn;
            PrPoint {
                threshold: p.threshold,
                recall: p.tpr,
                precision: tp / (tp + fp),
            }
        })
        .collect())
}

/// Step-wise average precision: `Σ (R_t − R_{t−1}) · P_t`.
pub fn auprc(id: &[f64], ood: &[f64]) -> Result<f64> {
    let pr = pr_curve(id, ood)?;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in pr {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(ap)
}

pub fn fpr_at_tpr(id: &[f64], ood: &[f64], target: f64, mode: Fpr95Mode) -> Result<f64> {
    let pts = roc_curve(id, ood)?;
    let j = pts
        .iter()
        .position(|p| p.tpr >= target)
        .expect("the last operating point has TPR 1");
    let hit = pts[j];
    if mode == Fpr95Mode::Exact || hit.tpr == target || j == 0 {
        return Ok(hit.fpr);
    }
    let prev = pts[j - 1];
    Ok(prev.fpr + (target - prev.tpr) * (hit.fpr - prev.fpr) / (hit.tpr - prev.tpr))
}

pub fn ood_scores(id: &[f64], ood: &[f64]) -> Result<OodScores> {
    Ok(OodScores {
        auroc: auroc(id, ood)?,
        auprc: auprc(id, ood)?,
        fpr95: fpr_at_tpr(id, ood, 0.95, Fpr95Mode::Interpolated)?,
    })
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

pub fn pr_to_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold,recall,precision\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.recall, p.precision);
    }
    out
}

/// Parameters stored as 32-bit floats, in MiB.
pub fn model_size_mb(param_count: usize) -> f64 {
    param_count as f64 * 4.0 / (1u64 << 20) as f64
}

pub const LATENCY_BATCHES: usize = 5;
pub const LATENCY_BATCH_SIZE: usize = 256;

/// `(ms per sample, model size in MiB)`, timing deterministic inference on
/// five batches of 256 rows cycled from `features`.
pub fn efficiency(model: &VoltaModel, features: &Mat64) -> Result<(f64, f64)> {
    if features.rows() == 0 {
        return Err(VoltaError::invalid("no rows to time"));
    }
    let idx: Vec<usize> = (0..LATENCY_BATCH_SIZE).map(|i| i % features.rows()).collect();
    let batch = features.select_rows(&idx);
    model.predict(&batch)?;
    let mut total = 0.0;
    for _ in 0..LATENCY_BATCHES {
        let start = Instant::now();
        std::hint::black_box(model.predict(&batch)?);
        total += start.elapsed().as_secs_f64() * 1e3;
    }
    let ms = total / (LATENCY_BATCHES * LATENCY_BATCH_SIZE) as f64;
    Ok((ms, model_size_mb(model.param_count())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nll: f64,
    pub brier: f64,
    pub brier_decomposition: BrierDecomposition,
    pub paper_formulas: BrierDecomposition,
    pub ece: f64,
    pub mce: f64,
    pub aurc: f64,
    pub e_aurc: f64,
    pub selective_auc: f64,
    pub ood: Option<OodScores>,
    pub ms_per_sample: Option<f64>,
    pub model_size_mb: Option<f64>,
}

/// Curve data behind a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub reliability: ReliabilityBins,
    pub risk_coverage: RiskCoverageCurve,
    pub roc: Option<Vec<RocPoint>>,
    pub pr: Option<Vec<PrPoint>>,
}

/// ID metrics from `inputs`; OOD statistics compare its uncertainty scores
/// against `ood_scores` when given.
pub fn evaluate(inputs: &EvalInputs, ood_uncertainty: Option<&[f64]>) -> Result<(MetricsReport, Curves)> {
    let bins = reliability_of(inputs);
    let rc = risk_coverage(inputs);
    let (ood, roc, pr) = match ood_uncertainty {
        Some(o) => (
            Some(ood_scores(inputs.uncertainty(), o)?),
            Some(roc_curve(inputs.uncertainty(), o)?),
            Some(pr_curve(inputs.uncertainty(), o)?),
        ),
        None => (None, None, None),
    };
    let report = MetricsReport {
        accuracy: accuracy(inputs),
        nll: nll(inputs),
        brier: brier(inputs),
        brier_decomposition: brier_decomposition(inputs, BrierMode::MurphyBinned),
        paper_formulas: brier_decomposition(inputs, BrierMode::AsPrinted),
        ece: bins.ece(),
        mce: bins.mce(),
        aurc: rc.aurc,
        e_aurc: rc.e_aurc,
        selective_auc: rc.selective_auc,
        ood,
        ms_per_sample: None,
        model_size_mb: None,
    };
    Ok((
        report,
        Curves {
            reliability: bins,
            risk_coverage: rc,
            roc,
            pr,
        },
    ))
}

impl MetricsReport {
    /// Flattened `key → value`; absent optional entries are skipped.
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("accuracy".into(), self.accuracy);
        m.insert("nll".into(), self.nll);
        m.insert("brier".into(), self.brier);
        for (prefix, d) in [("brier", &self.brier_decomposition), ("paper_formulas", &self.paper_formulas)] {
            m.insert(format!("{prefix}.unc"), d.unc);
            m.insert(format!("{prefix}.res"), d.res);
            m.insert(format!("{prefix}.rel"), d.rel);
        }
        m.insert("ece".into(), self.ece);
        m.insert("mce".into(), self.mce);
        m.insert("aurc".into(), self.aurc);
        m.insert("e_aurc".into(), self.e_aurc);
        m.insert("selective_auc".into(), self.selective_auc);
        if let Some(o) = &self.ood {
            m.insert("auroc".into(), o.auroc);
            m.insert("auprc".into(), o.auprc);
            m.insert("fpr95".into(), o.fpr95);
        }
        if let Some(v) = self.ms_per_sample {
            m.insert("ms_per_sample".into(), v);
        }
        if let Some(v) = self.model_size_mb {
            m.insert("model_size_mb".into(), v);
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in self.flatten() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    /// Inverse of [`MetricsReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| VoltaError::Parse(format!("metrics line {}: missing comma", i + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| VoltaError::Parse(format!("metrics line {}: bad value {v:?}", i + 1)))?;
            m.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            m.get(k)
                .copied()
                .ok_or_else(|| VoltaError::Parse(format!("metrics CSV lacks {k}")))
        };
        let decomposition = |prefix: &str, mode| -> Result<BrierDecomposition> {
            Ok(BrierDecomposition {
                unc: get(&format!("{prefix}.unc"))?,
                res: get(&format!("{prefix}.res"))?,
                rel: get(&format!("{prefix}.rel"))?,
                mode,
            })
        };
        let ood = match (m.get("auroc"), m.get("auprc"), m.get("fpr95")) {
            (Some(&auroc), Some(&auprc), Some(&fpr95)) => Some(OodScores { auroc, auprc, fpr95 }),
            _ => None,
        };
        Ok(MetricsReport {
            accuracy: get("accuracy")?,
            nll: get("nll")?,
            brier: get("brier")?,
            brier_decomposition: decomposition("brier", BrierMode::MurphyBinned)?,
            paper_formulas: decomposition("paper_formulas", BrierMode::AsPrinted)?,
            ece: get("ece")?,
            mce: get("mce")?,
            aurc: get("aurc")?,
            e_aurc: get("e_aurc")?,
            selective_auc: get("selective_auc")?,
            ood,
            ms_per_sample: m.get("ms_per_sample").copied(),
            model_size_mb: m.get("model_size_mb").copied(),
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::linalg::softmax;

    fn inputs(rows: &[Vec<f64>], labels: &[usize]) -> EvalInputs {
        let u = rows.iter().map(|r| 1.0 - r.iter().cloned().fold(0.0, f64::max)).collect();
        EvalInputs::new(Mat64::from_rows(rows).unwrap(), labels.to_vec(), u).unwrap()
    }

    fn random_inputs(n: usize, k: usize, seed: u64) -> EvalInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| softmax(&(0..k).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        inputs(&rows, &labels)
    }

    #[test]
    fn perfect_predictions() {
        let x = inputs(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]], &[0, 2]);
        assert_eq!((accuracy(&x), nll(&x), brier(&x)), (1.0, 0.0, 0.0));
        assert_eq!(ece_mce(&x), (0.0, 0.0));
        let rc = risk_coverage(&x);
        assert_eq!((rc.aurc, rc.selective_auc), (0.0, 1.0));
    }

    #[test]
    fn uniform_binary_brier_is_half() {
        let x = inputs(&vec![vec![0.5, 0.5]; 3],&[0, 1, 1]);
        assert_eq!(brier(&x), 0.5);
    }

    #[test]
    fn scores_match_naive_loops() {
        let x = random_inputs(50, 4, 1);
        let (mut acc, mut nl, mut br) = (0.0, 0.0, 0.0);
        for i in 0..50 {
            let r = x.probs().row(i);
            let y = x.labels()[i];
            let mut best = 0;
            for k in 1..4 {
                if r[k] > r[best] {
                    best = k;
                }
            }
            acc += (best == y) as u8 as f64;
            nl -= r[y].ln();
            for k in 0..4 {
                br += (r[k] - if k == y { 1.0 } else { 0.0 }).powi(2);
            }
        }
        assert!((accuracy(&x) - acc / 50.0).abs() < 1e-13);
        assert!((nll(&x) - nl / 50.0).abs() < 1e-13);
        assert!((brier(&x) - br / 50.0).abs() < 1e-13);
    }

    #[test]
    fn hand_computed_murphy_decomposition() {
        let x = inputs(
            &[vec![0.9, 0.1], vec![0.9, 0.1], vec![0.6, 0.4], vec![0.6, 0.4]],
            &[0, 1, 0, 0],
        );
        let d = brier_decomposition(&x, BrierMode::MurphyBinned);
        assert!((d.unc - 0.375).abs() < 1e-15);
        assert!((d.res - 0.125).abs() < 1e-15);
        assert!((d.rel - 0.32).abs() < 1e-15);
        assert!((brier(&x) - 0.57).abs() < 1e-15);
    }

    #[test]
    fn two_bin_calibration_error() {
        let mut rows = vec![vec![0.8, 0.2]; 5];
        rows.extend(vec![vec![0.6, 0.4]; 5]);
        let labels: Vec<usize> = (0..10).map(|i| if i < 5 { 0 } else { 1 }).collect();
        let (ece, mce) = ece_mce(&inputs(&rows, &labels));
        assert!((ece - 0.4).abs() < 1e-12);
        assert!((mce - 0.6).abs() < 1e-12);
    }

    #[test]
    fn risk_coverage_hand_case() {
        let u = [0.1, 0.2, 0.3, 0.4, 0.5];
        let c = [true, true, false, true, false];
        let rc = risk_coverage_from(&u, &c).unwrap();
        let want = (0.0 + 0.0 + 1.0 / 3.0 + 0.25 + 0.4) / 5.0;
        assert!((rc.aurc - want).abs() < 1e-15);
        assert!((rc.aurc - 0.1967).abs() < 1e-4);
        let wrong = risk_coverage_from(&u, &[false; 5]).unwrap();
        assert_eq!((wrong.aurc, wrong.e_aurc), (1.0, 1.0));
    }

    #[test]
    fn detection_edge_cases() {
        let id = [0.1, 0.2, 0.3];
        let ood = [0.5, 0.7, 0.9, 0.95];
        assert_eq!(auroc(&id, &ood).unwrap(), 1.0);
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95, Fpr95Mode::Interpolated).unwrap(), 0.0);
        assert_eq!(auprc(&id, &ood).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 5], &[0.4; 3]).unwrap(), 0.5);
        assert!(auroc(&[], &ood).is_err());
    }

    #[test]
    fn fpr95_interpolates_between_operating_points() {
        // 20 positives, 10 negatives: TPR jumps from 0.9 to 1.0 while FPR
        // goes from 0.2 to 0.6, so 95% TPR sits half way.
        let ood: Vec<f64> = (0..20).map(|i| if i < 18 { 10.0 + i as f64 } else { 1.0 }).collect();
        let mut id: Vec<f64> = vec![5.0, 5.5];
        id.extend([1.0; 4]);
        id.extend([0.0; 4]);
        let interp = fpr_at_tpr(&id, &ood, 0.95, Fpr95Mode::Interpolated).unwrap();
        let exact = fpr_at_tpr(&id, &ood, 0.95, Fpr95Mode::Exact).unwrap();
        assert!((interp - 0.4).abs() < 1e-12);
        assert!((exact - 0.6).abs() < 1e-12);
    }

    #[test]
    fn report_csv_round_trip() {
        let x = random_inputs(40, 3, 2);
        let (mut r, _) = evaluate(&x, Some(&[0.3, 0.9, 0.5])).unwrap();
        r.model_size_mb = Some(model_size_mb(1 << 20));
        assert_eq!(r.model_size_mb, Some(4.0));
        assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn murphy_identity_and_printed_symmetry(n in 1usize..80, k in 2usize..6, seed in any::<u64>()) {
            let x = random_inputs(n, k, seed);
            let d = brier_decomposition(&x, BrierMode::MurphyBinned);
            prop_assert!((d.unc - d.res + d.rel - brier(&x)).abs() < 1e-10);
            let p = brier_decomposition(&x, BrierMode::AsPrinted);
            prop_assert_eq!(p.res.to_bits(), p.rel.to_bits());
        }

        #[test]
        fn ece_never_exceeds_mce(n in 1usize..80, k in 2usize..6, seed in any::<u64>()) {
            let x = random_inputs(n, k, seed);
            let (ece, mce) = ece_mce(&x);
            prop_assert!(ece <= mce + 1e-15);
            prop_assert_eq!(reliability_of(&x).ece().to_bits(), ece.to_bits());
        }

        #[test]
        fn rank_and_trapezoid_auroc_agree(
            id in proptest::collection::vec(0u8..20, 1..40),
            ood in proptest::collection::vec(0u8..20, 1..40),
        ) {
            let id: Vec<f64> = id.iter().map(|&v| v as f64 / 4.0).collect();
            let ood: Vec<f64> = ood.iter().map(|&v| v as f64 / 4.0).collect();
            let a = auroc(&id, &ood).unwrap();
            prop_assert!((a - auroc_trapezoid(&id, &ood).unwrap()).abs() < 1e-12);
            let fpr = fpr_at_tpr(&id, &ood, 0.95, Fpr95Mode::Interpolated).unwrap();
            prop_assert!((0.0..=1.0).contains(&fpr));
            let ap = auprc(&id, &ood).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
        }

        #[test]
        fn zero_selective_risk_below_first_error(n in 1usize..60, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let c: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let first_err = u.iter().zip(&c).filter(|(_, &ok)| !ok).map(|(&v, _)| v).fold(f64::INFINITY, f64::min);
            let rc = risk_coverage_from(&u, &c).unwrap();
            for (i, &idx) in rc.order.iter().enumerate() {
                if u[idx] < first_err {
                    prop_assert_eq!(rc.risk[i], 0.0);
                }
            }
        }
    }
}
