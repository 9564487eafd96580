//! Multi-seed experiment orchestration: data preparation, training every
//! requested variant, calibration, evaluation against the post-hoc
//! baselines, aggregation across seeds and report emission.
//!
//! Data is fixed by the config (its own seed for synthesis and splitting);
//! the run seeds only drive model initialization, shuffling and dropout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    conformal_set, energy_score, fit_conformal, fit_mahalanobis, mahalanobis_score, msp_score,
    scores_to_csv, ConformalCalibration, MahalanobisModel, MethodScores, DEFAULT_ALPHA,
};
use crate::calibration::{calibrate, CalibrationResult};
use crate::data::{split, FeatureDataset, FileFormat, Role};
use crate::error::{Result, VoltaError};
use crate::linalg::{softmax, Mat64};
use crate::metrics::{
    efficiency, evaluate, model_size_mb, ood_scores, pr_to_csv, roc_to_csv, Curves, EvalInputs,
    MetricsReport, OodScores,
};
use crate::model::{mix_seed, Mode, VoltaModel};
use crate::stats::{mean, std_dev, welch_t_test};
use crate::synth::{make_blobs, BlobSpec};
use crate::train::{apply_ablation, train, TrainConfig, TrainingHistory, Variant};

/// Stream used to derive the Monte Carlo inference seed from a run seed.
const MC_STREAM: u64 = 7;

fn default_seeds() -> Vec<u64> {
    vec![42, 123, 456]
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Full]
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

/// Gaussian blobs split by position within each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobData {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_class: usize,
    /// Minimum distance between class means, in multiples of `std`.
    pub separation: f64,
    #[serde(default = "BlobData::default_std")]
    pub std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BlobData {
    fn default_std() -> f64 {
        1.0
    }
}

/// Feature files in CSV or VFEA binary form, chosen by extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: PathBuf,
    /// When absent, validation data is split off `train`.
    #[serde(default)]
    pub val: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub ood: BTreeMap<String, PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default)]
    pub split_seed: u64,
    /// Class count for CSV inputs; inferred from the labels when absent.
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Blobs(BlobData),
    Files(FileData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    /// The per-run seed and variant override `train.seed` and `train.variant`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_alpha")]
    pub conformal_alpha: f64,
    /// Wall-clock latency is the only non-reproducible output, so it is opt-in.
    #[serde(default)]
    pub measure_timing: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| VoltaError::Config(format!("experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VoltaError::io(path, e))?;
        let mut config = ExperimentConfig::from_json_str(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Files(f) = &mut self.data {
            fix(&mut f.train);
            fix(&mut f.test);
            if let Some(v) = &mut f.val {
                fix(v);
            }
            f.ood.values_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VoltaError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        if self.variants.iter().collect::<BTreeSet<_>>().len() != self.variants.len() {
            return bad("variants must be distinct".into());
        }
        if !(self.conformal_alpha > 0.0 && self.conformal_alpha < 1.0) {
            return bad(format!("conformal_alpha {} outside (0, 1)", self.conformal_alpha));
        }
        self.train.validate()?;
        match &self.data {
            DataConfig::Blobs(b) => {
                if b.train_per_class == 0 || b.val_per_class == 0 || b.test_per_class == 0 {
                    return bad("blob split sizes must be positive".into());
                }
                if !(b.separation > 0.0 && b.separation.is_finite()) {
                    return bad("blob separation must be positive".into());
                }
            }
            DataConfig::Files(f) => {
                if f.val.is_none() && !(f.val_fraction > 0.0 && f.val_fraction < 1.0) {
                    return bad(format!("val_fraction {} outside (0, 1)", f.val_fraction));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
    /// Named OOD sets; the first is the headline set in reports.
    pub ood: Vec<(String, FeatureDataset)>,
}

pub fn prepare_data(config: &DataConfig) -> Result<Datasets> {
    match config {
        DataConfig::Blobs(b) => {
            let per_class = b.train_per_class + b.val_per_class + b.test_per_class;
            let (id, ood) = make_blobs(&BlobSpec {
                classes: b.classes,
                dim: b.dim,
                per_class,
                ood_per_class: b.ood_per_class,
                separation: b.separation * b.std,
                std: b.std,
                seed: b.seed,
            })?;
            let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
            for c in 0..b.classes {
                let start = c * per_class;
                tr.extend(start..start + b.train_per_class);
                va.extend(start + b.train_per_class..start + b.train_per_class + b.val_per_class);
                te.extend(start + b.train_per_class + b.val_per_class..start + per_class);
            }
            Ok(Datasets {
                train: id.subset(&tr, Role::Train),
                val: id.subset(&va, Role::Val),
                test: id.subset(&te, Role::Test),
                ood: vec![("ood".to_string(), ood)],
            })
        }
        DataConfig::Files(f) => {
            let load = |p: &Path, role: Role| {
                FeatureDataset::load(p, FileFormat::from_path(p), role)
                    .map_err(|e| e.context(&format!("loading {}", p.display())))
            };
            let full_train = load(&f.train, Role::Train)?;
            let classes = f.classes.unwrap_or(full_train.classes());
            let conform = |d: FeatureDataset, name: &str| -> Result<FeatureDataset> {
                if d.dim() != full_train.dim() {
                    return Err(VoltaError::shape(format!(
                        "{name} has {} features, train has {}",
                        d.dim(),
                        full_train.dim()
                    )));
                }
                if d.labels().iter().any(|&y| y >= classes) {
                    return Err(VoltaError::invalid(format!("{name} has labels outside [0, {classes})")));
                }
                let role = d.role();
                FeatureDataset::new(d.features().clone(), d.labels().to_vec(), classes, role)
            };
            let full_train = conform(full_train.clone(), "train")?;
            let (train, val) = match &f.val {
                Some(p) => (full_train, conform(load(p, Role::Val)?, "val")?),
                None => split(&full_train, f.val_fraction, f.split_seed, f.stratified)?,
            };
            let test = conform(load(&f.test, Role::Test)?, "test")?;
            let mut ood = Vec::new();
            for (name, p) in &f.ood {
                let d = load(p, Role::Ood)?;
                if d.dim() != train.dim() {
                    return Err(VoltaError::shape(format!("OOD set {name} has {} features", d.dim())));
                }
                ood.push((name.clone(), d));
            }
            Ok(Datasets { train, val, test, ood })
        }
    }
}

pub fn method_name(variant: Variant) -> String {
    match variant {
        Variant::Full => "volta".to_string(),
        v => format!("volta_{v}"),
    }
}

pub const BASELINES: [&str; 5] = ["msp", "temperature_scaling", "energy", "mahalanobis", "conformal"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub metrics: MetricsReport,
    pub ood: BTreeMap<String, OodScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCalibration {
    pub tau: f64,
    pub tau_star: f64,
    /// Absent for variants without post-hoc scaling.
    pub result: Option<CalibrationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalSummary {
    pub alpha: f64,
    pub q_hat: f64,
    pub n_cal: usize,
    pub coverage: f64,
    pub mean_set_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub methods: Vec<MethodReport>,
    pub calibration: BTreeMap<String, VariantCalibration>,
    pub training: BTreeMap<String, TrainingSummary>,
    pub conformal: ConformalSummary,
}

impl SeedReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Everything a seed produced beyond its summary report.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub curves: BTreeMap<String, Curves>,
    pub test_scores: Vec<MethodScores>,
    pub ood_scores: BTreeMap<String, Vec<MethodScores>>,
    pub histories: BTreeMap<String, TrainingHistory>,
    pub models: BTreeMap<String, VoltaModel>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub report: SeedReport,
    pub artifacts: SeedArtifacts,
}

/// Per-sample probabilities and uncertainty of one scorer.
struct Scored {
    method: String,
    probs: Mat64,
    uncertainty: Vec<f64>,
}

fn probs_at(sims: &Mat64, tau: f64) -> Result<Mat64> {
    let rows: Vec<Vec<f64>> = sims
        .row_iter()
        .map(|r| softmax(&r.iter().map(|s| s / tau).collect::<Vec<_>>()))
        .collect();
    Mat64::from_rows(&rows)
}

/// Post-hoc scorers built on one trained model.
struct BaselineSuite {
    model: VoltaModel,
    tau_star: f64,
    mahalanobis: MahalanobisModel,
    conformal: ConformalCalibration,
}

impl BaselineSuite {
    fn fit(model: &VoltaModel, data: &Datasets, alpha: f64) -> Result<Self> {
        let mut scaled = model.clone();
        let tau_star = calibrate(&mut scaled, &data.val)?.tau_star;
        let train_v = model.raw_embed(data.train.features())?;
        let mahalanobis = fit_mahalanobis(&train_v, data.train.labels(), data.train.classes())
            .map_err(|e| e.context("mahalanobis fit"))?;
        let (_, cache) = model.forward(data.val.features(), Mode::Eval)?;
        let conformal = fit_conformal(&probs_at(&cache.sims, tau_star)?, data.val.labels(), alpha)
            .map_err(|e| e.context("conformal fit"))?;
        Ok(BaselineSuite {
            model: model.clone(),
            tau_star,
            mahalanobis,
            conformal,
        })
    }

    fn score(&self, features: &Mat64) -> Result<Vec<Scored>> {
        let (_, cache) = self.model.forward(features, Mode::Eval)?;
        let tau = self.model.temperature.tau;
        let p_tau = probs_at(&cache.sims, tau)?;
        let p_star = probs_at(&cache.sims, self.tau_star)?;
        let msp = |p: &Mat64| p.row_iter().map(msp_score).collect::<Vec<_>>();
        let energy = cache
            .sims
            .row_iter()
            .map(|r| energy_score(&r.iter().map(|s| s / tau).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let maha = cache
            .encoder
            .raw
            .row_iter()
            .map(|v| mahalanobis_score(&self.mahalanobis, v))
            .collect::<Result<Vec<_>>>()?;
        let set_sizes = p_star
            .row_iter()
            .map(|r| conformal_set(r, &self.conformal).len() as f64)
            .collect();
        let scored = |method: &str, probs: &Mat64, uncertainty: Vec<f64>| Scored {
            method: method.to_string(),
            probs: probs.clone(),
            uncertainty,
        };
        Ok(vec![
            scored("msp", &p_tau, msp(&p_tau)),
            scored("temperature_scaling", &p_star, msp(&p_star)),
            scored("energy", &p_tau, energy),
            scored("mahalanobis", &p_tau, maha),
            scored("conformal", &p_star, set_sizes),
        ])
    }
}

fn volta_scored(model: &VoltaModel, features: &Mat64, mc: Option<(usize, u64)>, method: &str) -> Result<Scored> {
    let outputs = match mc {
        Some((passes, seed)) => model.predict_mc(features, passes, seed)?,
        None => model.predict(features)?,
    };
    let rows: Vec<Vec<f64>> = outputs.iter().map(|o| o.probabilities.clone()).collect();
    Ok(Scored {
        method: method.to_string(),
        probs: Mat64::from_rows(&rows)?,
        uncertainty: outputs.iter().map(|o| o.uncertainty).collect(),
    })
}

fn summarize(h: &TrainingHistory) -> TrainingSummary {
    TrainingSummary {
        epochs_run: h.epochs.len(),
        best_epoch: h.best_epoch,
        initial_val_loss: h.initial_val_loss,
        best_val_loss: h.best_val_loss(),
        stopped_early: h.stopped_early,
    }
}

/// Runs every configured variant and baseline for one seed.
pub fn run_seed(config: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<SeedRun> {
    let ctx = |stage: &str| format!("seed {seed} {stage}");
    let train_cfg = |variant: Variant| TrainConfig {
        seed,
        variant,
        ..config.train.clone()
    };

    let mut trained: BTreeMap<Variant, VoltaModel> = BTreeMap::new();
    let mut histories = BTreeMap::new();
    let mut training = BTreeMap::new();
    for &v in &config.variants {
        let key = if v.reuses_full_training() { Variant::Full } else { v };
        if trained.contains_key(&key) {
            continue;
        }
        let (model, history) =
            train(&data.train, &data.val, &train_cfg(key)).map_err(|e| e.context(&ctx(&format!("training {key}"))))?;
        training.insert(key.to_string(), summarize(&history));
        histories.insert(key.to_string(), history);
        trained.insert(key, model);
    }

    let mut scored_test = Vec::new();
    let mut scored_ood: Vec<Vec<Scored>> = data.ood.iter().map(|_| Vec::new()).collect();
    let mut calibration = BTreeMap::new();
    let mut models = BTreeMap::new();
    let mut timing = BTreeMap::new();
    for &v in &config.variants {
        let key = if v.reuses_full_training() { Variant::Full } else { v };
        let mut model = trained[&key].clone();
        let eff = apply_ablation(&train_cfg(v), data.train.dim())?;
        let result = if eff.posthoc_ts {
            Some(calibrate(&mut model, &data.val).map_err(|e| e.context(&ctx("calibration")))?)
        } else {
            None
        };
        calibration.insert(
            v.to_string(),
            VariantCalibration {
                tau: model.temperature.tau,
                tau_star: model.temperature.tau_star,
                result,
            },
        );
        let name = method_name(v);
        let mc = eff.mc_passes.map(|p| (p, mix_seed(seed, MC_STREAM)));
        scored_test.push(volta_scored(&model, data.test.features(), mc, &name)?);
        for (slot, (_, ood)) in scored_ood.iter_mut().zip(&data.ood) {
            slot.push(volta_scored(&model, ood.features(), mc, &name)?);
        }
        let latency = if config.measure_timing {
            Some(efficiency(&model, data.test.features())?.0)
        } else {
            None
        };
        timing.insert(name.clone(), (latency, model_size_mb(model.param_count())));
        models.insert(v.to_string(), model);
    }

    let anchor = if trained.contains_key(&Variant::Full) {
        Variant::Full
    } else {
        *trained.keys().next().expect("at least one variant")
    };
    let suite = BaselineSuite::fit(&trained[&anchor], data, config.conformal_alpha)
        .map_err(|e| e.context(&ctx("baselines")))?;
    scored_test.extend(suite.score(data.test.features())?);
    for (slot, (_, ood)) in scored_ood.iter_mut().zip(&data.ood) {
        slot.extend(suite.score(ood.features())?);
    }

    let conformal_scored = scored_test.iter().find(|s| s.method == "conformal").expect("conformal scorer");
    let covered = conformal_scored
        .probs
        .row_iter()
        .zip(data.test.labels())
        .filter(|(r, y)| conformal_set(r, &suite.conformal).contains(y))
        .count();
    let conformal = ConformalSummary {
        alpha: config.conformal_alpha,
        q_hat: suite.conformal.q_hat,
        n_cal: suite.conformal.n,
        coverage: covered as f64 / data.test.len() as f64,
        mean_set_size: mean(&conformal_scored.uncertainty),
    };

    let mut methods = Vec::new();
    let mut curves = BTreeMap::new();
    for (i, s) in scored_test.iter().enumerate() {
        let inputs = EvalInputs::new(s.probs.clone(), data.test.labels().to_vec(), s.uncertainty.clone())
            .map_err(|e| e.context(&ctx(&format!("evaluating {}", s.method))))?;
        let headline = scored_ood.first().map(|o| o[i].uncertainty.as_slice());
        let (mut metrics, c) = evaluate(&inputs, headline)?;
        if let Some(&(latency, size)) = timing.get(&s.method) {
            metrics.ms_per_sample = latency;
            metrics.model_size_mb = Some(size);
        }
        let mut ood = BTreeMap::new();
        for ((name, _), set) in data.ood.iter().zip(&scored_ood) {
            ood.insert(name.clone(), ood_scores(&s.uncertainty, &set[i].uncertainty)?);
        }
        methods.push(MethodReport {
            method: s.method.clone(),
            metrics,
            ood,
        });
        curves.insert(s.method.clone(), c);
    }

    let as_scores = |list: &[Scored]| {
        list.iter()
            .map(|s| MethodScores {
                method: s.method.clone(),
                scores: s.uncertainty.clone(),
            })
            .collect::<Vec<_>>()
    };
    Ok(SeedRun {
        report: SeedReport {
            seed,
            methods,
            calibration,
            training,
            conformal,
        },
        artifacts: SeedArtifacts {
            curves,
            test_scores: as_scores(&scored_test),
            ood_scores: data
                .ood
                .iter()
                .zip(&scored_ood)
                .map(|((name, _), s)| (name.clone(), as_scores(s)))
                .collect(),
            histories,
            models,
        },
    })
}

pub const COMPARISON_METRICS: [&str; 11] = [
    "accuracy",
    "nll",
    "brier",
    "ece",
    "mce",
    "aurc",
    "e_aurc",
    "selective_auc",
    "auroc",
    "auprc",
    "fpr95",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub t: Option<f64>,
    pub dof: Option<f64>,
    pub p: Option<f64>,
    /// Why the test statistics are missing, if they are.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: &str, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,std,t,dof,p\n");
        for r in &self.rows {
            let na = r.note.clone().unwrap_or_else(|| "n/a".into());
            let opt = |v: Option<f64>| v.map_or_else(|| na.clone(), |x| x.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.metric,
                r.mean,
                r.std,
                opt(r.t),
                opt(r.dof),
                opt(r.p)
            );
        }
        out
    }
}

/// Mean and standard deviation of every metric over seeds, with Welch's
/// test of each method against the reference (VOLTA when present).
pub fn compare(reports: &[SeedReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| VoltaError::invalid("no seed reports to compare"))?;
    let methods: Vec<String> = first.methods.iter().map(|m| m.method.clone()).collect();
    let reference = if methods.iter().any(|m| m == "volta") {
        "volta".to_string()
    } else {
        methods[0].clone()
    };
    let values = |method: &str, metric: &str| -> Result<Option<Vec<f64>>> {
        let mut v = Vec::with_capacity(reports.len());
        for r in reports {
            let m = r
                .method(method)
                .ok_or_else(|| VoltaError::invalid(format!("seed {} lacks method {method}", r.seed)))?;
            match m.metrics.flatten().get(metric) {
                Some(&x) => v.push(x),
                None => return Ok(None),
            }
        }
        Ok(Some(v))
    };
    let mut rows = Vec::new();
    for method in &methods {
        for &metric in &COMPARISON_METRICS {
            let Some(x) = values(method, metric)? else { continue };
            let base = values(&reference, metric)?.expect("reference reports the same metrics");
            let (t, dof, p, note) = if x.len() < 2 {
                (None, None, None, Some("n/a (single seed)".to_string()))
            } else {
                match welch_t_test(&x, &base) {
                    Ok(w) => (Some(w.t), Some(w.dof), Some(w.p), None),
                    Err(VoltaError::Degenerate(_)) => (None, None, None, Some("n/a (zero variance)".to_string())),
                    Err(e) => return Err(e),
                }
            };
            rows.push(ComparisonRow {
                method: method.clone(),
                metric: metric.to_string(),
                mean: mean(&x),
                std: std_dev(&x),
                t,
                dof,
                p,
                note,
            });
        }
    }
    Ok(ComparisonTable { reference, rows })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub table: ComparisonTable,
}

impl ExperimentResult {
    pub fn reports(&self) -> Vec<SeedReport> {
        self.runs.iter().map(|r| r.report.clone()).collect()
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data = prepare_data(&config.data).map_err(|e| e.context("data preparation"))?;
    run_experiment_on(config, &data)
}

pub fn run_experiment_on(config: &ExperimentConfig, data: &Datasets) -> Result<ExperimentResult> {
    let runs = config
        .seeds
        .iter()
        .map(|&s| run_seed(config, data, s))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<SeedReport> = runs.iter().map(|r| r.report.clone()).collect();
    let table = compare(&reports)?;
    Ok(ExperimentResult { runs, table })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(out_dir: &Path) -> Result<Manifest> {
        let path = out_dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| VoltaError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| VoltaError::Parse(format!("manifest: {e}")))
    }

    /// Paths whose current contents no longer match their recorded hash.
    pub fn verify(&self, out_dir: &Path) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for f in &self.files {
            let path = out_dir.join(&f.path);
            let bytes = std::fs::read(&path).map_err(|e| VoltaError::io(&path, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                stale.push(f.path.clone());
            }
        }
        Ok(stale)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s.into_bytes()
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes every report, curve, score and model file plus a manifest of
/// SHA-256 hashes. Output depends only on the config and the input data.
pub fn emit_reports(result: &ExperimentResult, config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    files.insert("config.json".into(), pretty_json(config));
    files.insert("comparison.csv".into(), result.table.to_csv().into_bytes());
    files.insert("comparison.json".into(), pretty_json(&result.table));
    for run in &result.runs {
        let dir = format!("seed_{}", run.report.seed);
        let a = &run.artifacts;
        files.insert(format!("{dir}/report.json"), pretty_json(&run.report));
        for m in &run.report.methods {
            let stem = file_stem(&m.method);
            files.insert(format!("{dir}/metrics_{stem}.csv"), m.metrics.to_csv().into_bytes());
        }
        files.insert(format!("{dir}/scores_test.csv"), scores_to_csv(&a.test_scores).into_bytes());
        for (name, s) in &a.ood_scores {
            files.insert(format!("{dir}/scores_ood_{}.csv", file_stem(name)), scores_to_csv(s).into_bytes());
        }
        for (key, h) in &a.histories {
            files.insert(format!("{dir}/history_{key}.csv"), h.to_csv().into_bytes());
        }
        for (variant, model) in &a.models {
            files.insert(format!("{dir}/model_{variant}.json"), model.to_json()?.into_bytes());
        }
        for (method, c) in &a.curves {
            let stem = format!("{dir}/curves/{}", file_stem(method));
            files.insert(format!("{stem}_reliability.csv"), c.reliability.to_csv().into_bytes());
            files.insert(format!("{stem}_risk_coverage.csv"), c.risk_coverage.to_csv().into_bytes());
            if let Some(roc) = &c.roc {
                files.insert(format!("{stem}_roc.csv"), roc_to_csv(roc).into_bytes());
            }
            if let Some(pr) = &c.pr {
                files.insert(format!("{stem}_pr.csv"), pr_to_csv(pr).into_bytes());
            }
        }
    }

    let mut entries = Vec::with_capacity(files.len());
    for (rel, bytes) in &files {
        let path = out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| VoltaError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| VoltaError::io(&path, e))?;
        entries.push(ManifestEntry {
            path: rel.clone(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
    }
    let manifest = Manifest { files: entries };
    let path = out_dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.to_json()).map_err(|e| VoltaError::io(&path, e))?;
    Ok(manifest)
}

/// Runs the experiment and writes its reports; returns the result and the
/// wall-clock time it took in seconds.
pub fn run_and_emit(config: &ExperimentConfig, out_dir: &Path) -> Result<(ExperimentResult, Manifest, f64)> {
    let start = Instant::now();
    let result = run_experiment(config)?;
    let manifest = emit_reports(&result, config, out_dir)?;
    Ok((result, manifest, start.elapsed().as_secs_f64()))
}
