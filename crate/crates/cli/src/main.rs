//! `volta` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use volta_core::calibration::calibrate;
use volta_core::data::{FeatureDataset, FileFormat, Role};
use volta_core::experiment::{
    emit_reports, prepare_data, run_experiment, sha256_hex, DataConfig, Datasets, ExperimentConfig,
};
use volta_core::metrics::{evaluate, model_size_mb, ood_scores, pr_to_csv, roc_to_csv, EvalInputs};
use volta_core::train::{train, Variant};
use volta_core::{VoltaError, VoltaModel};

/// Used when no `--config` is given.
const DEFAULT_CONFIG: &str = r#"{
    "data": {"kind": "blobs", "classes": 10, "dim": 64, "train_per_class": 200,
             "val_per_class": 50, "test_per_class": 50, "ood_per_class": 50,
             "separation": 6.0}
}"#;

#[derive(Parser, Debug)]
#[command(name = "volta", version, about = "Prototype classifier with calibrated, deterministic uncertainty")]
struct Cli {
    /// Overrides the run seed (or the data seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "volta-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

impl Format {
    fn file_format(self) -> FileFormat {
        match self {
            Format::Csv => FileFormat::Csv,
            Format::Binary => FileFormat::Binary,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Binary => "vfea",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured blob datasets as feature files.
    Synth {
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
        /// Ablation variant; defaults to the config's `train.variant`.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Fit the post-hoc temperature of a checkpoint on validation data.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Compute the metric suite of a checkpoint on test data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        ood: Option<PathBuf>,
    },
    /// Score an OOD set against ID data with the model's uncertainty.
    Ood {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        ood: Option<PathBuf>,
    },
    /// Run every ablation variant and write the full report set.
    Ablate,
    /// Run the configured experiment and write the comparison table.
    Compare,
    /// Run the configured experiment and write all reports with a manifest.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_json_str(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
        config.train.seed = seed;
    }
    Ok(config)
}

fn load_dataset(path: &Path, role: Role) -> Result<FeatureDataset> {
    Ok(FeatureDataset::load(path, FileFormat::from_path(path), role)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Datasets from the config, loaded lazily only when a flag is missing.
struct Inputs {
    config: ExperimentConfig,
    data: Option<Datasets>,
}

impl Inputs {
    fn configured(&mut self) -> Result<&Datasets> {
        if self.data.is_none() {
            self.data = Some(prepare_data(&self.config.data)?);
        }
        Ok(self.data.as_ref().expect("just prepared"))
    }

    fn pick(&mut self, path: &Option<PathBuf>, role: Role) -> Result<FeatureDataset> {
        if let Some(p) = path {
            return load_dataset(p, role);
        }
        let d = self.configured()?;
        Ok(match role {
            Role::Train => d.train.clone(),
            Role::Val => d.val.clone(),
            Role::Test => d.test.clone(),
            Role::Ood => match d.ood.first() {
                Some((_, o)) => o.clone(),
                None => bail!("the config defines no OOD set; pass --ood"),
            },
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let out = cli.out.clone();
    let mut inputs = Inputs { config: config.clone(), data: None };
    match &cli.command {
        Command::Synth { format } => {
            let DataConfig::Blobs(mut blobs) = config.data.clone() else {
                bail!(VoltaError::Config("synth needs a blobs data config".into()));
            };
            if let Some(seed) = cli.seed {
                blobs.seed = seed;
            }
            let data = prepare_data(&DataConfig::Blobs(blobs))?;
            let mut sets = vec![("train", &data.train), ("val", &data.val), ("test", &data.test)];
            sets.extend(data.ood.iter().map(|(_, d)| ("ood", d)));
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (name, set) in sets {
                let path = out.join(format!("{name}.{}", format.extension()));
                set.save(&path, format.file_format())?;
                println!("{} rows -> {}", set.len(), path.display());
            }
        }
        Command::Train { train: tr, val, variant } => {
            let train_set = inputs.pick(tr, Role::Train)?;
            let val_set = inputs.pick(val, Role::Val)?;
            let mut tc = config.train.clone();
            if let Some(v) = variant {
                tc.variant = *v;
            }
            let (model, history) = train(&train_set, &val_set, &tc)?;
            write(&out.join("model.json"), model.to_json()?)?;
            write(&out.join("history.csv"), history.to_csv())?;
            println!(
                "trained {} epochs (best {}), val loss {:.6} -> {:.6}, tau {:.4}",
                history.epochs.len(),
                history.best_epoch,
                history.initial_val_loss,
                history.best_val_loss(),
                model.temperature.tau
            );
        }
        Command::Calibrate { model, val } => {
            let mut m = VoltaModel::load(model)?;
            let val_set = inputs.pick(val, Role::Val)?;
            let result = calibrate(&mut m, &val_set)?;
            write(&out.join("model.json"), m.to_json()?)?;
            write(&out.join("calibration.json"), serde_json::to_string_pretty(&result)? + "\n")?;
            println!(
                "tau* {:.6} ({:?}), validation NLL {:.6} -> {:.6}",
                result.tau_star, result.status, result.nll_before, result.nll_after
            );
        }
        Command::Evaluate { model, test, ood } => {
            let m = VoltaModel::load(model)?;
            let test_set = inputs.pick(test, Role::Test)?;
            let inputs_eval = EvalInputs::from_outputs(&m.predict(test_set.features())?, test_set.labels())?;
            let ood_u = match ood {
                Some(p) => Some(uncertainties(&m, &load_dataset(p, Role::Ood)?)?),
                None => None,
            };
            let (mut report, curves) = evaluate(&inputs_eval, ood_u.as_deref())?;
            report.model_size_mb = Some(model_size_mb(m.param_count()));
            write(&out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            write(&out.join("metrics.csv"), report.to_csv())?;
            write(&out.join("curves/reliability.csv"), curves.reliability.to_csv())?;
            write(&out.join("curves/risk_coverage.csv"), curves.risk_coverage.to_csv())?;
            if let (Some(roc), Some(pr)) = (&curves.roc, &curves.pr) {
                write(&out.join("curves/roc.csv"), roc_to_csv(roc))?;
                write(&out.join("curves/pr.csv"), pr_to_csv(pr))?;
            }
            print!("{}", report.to_csv());
        }
        Command::Ood { model, test, ood } => {
            let m = VoltaModel::load(model)?;
            let id = uncertainties(&m, &inputs.pick(test, Role::Test)?)?;
            let far = uncertainties(&m, &inputs.pick(ood, Role::Ood)?)?;
            let scores = ood_scores(&id, &far)?;
            write(&out.join("ood.json"), serde_json::to_string_pretty(&scores)? + "\n")?;
            println!("AUROC {:.6}  AUPRC {:.6}  FPR95 {:.6}", scores.auroc, scores.auprc, scores.fpr95);
        }
        Command::Ablate => {
            let mut c = config.clone();
            c.variants = Variant::ALL.to_vec();
            experiment(&c, &out)?;
        }
        Command::Compare => {
            let result = run_experiment(&config)?;
            write(&out.join("comparison.csv"), result.table.to_csv())?;
            print!("{}", result.table.to_csv());
        }
        Command::Report => experiment(&config, &out)?,
    }
    Ok(())
}

fn uncertainties(model: &VoltaModel, data: &FeatureDataset) -> Result<Vec<f64>> {
    Ok(model.predict(data.features())?.iter().map(|o| o.uncertainty).collect())
}

fn experiment(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let out = config.out_dir.clone().filter(|_| out == Path::new("volta-out")).unwrap_or(out.to_path_buf());
    let result = run_experiment(config)?;
    let manifest = emit_reports(&result, config, &out)?;
    let manifest_bytes = std::fs::read(out.join("manifest.json"))?;
    println!(
        "{} files in {} (manifest sha256 {})",
        manifest.files.len(),
        out.display(),
        sha256_hex(&manifest_bytes)
    );
    for row in result.table.rows.iter().filter(|r| r.metric == "accuracy" || r.metric == "auroc") {
        println!("{:<22} {:<9} {:.4} ± {:.4}", row.method, row.metric, row.mean, row.std);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<VoltaError>())
                .map_or(1, VoltaError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
