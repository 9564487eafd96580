//! Mini-batch training: AdamW on the encoder and raw prototypes, a plain
//! clamped gradient step on the temperature, a OneCycle learning-rate
//! schedule and validation-driven early stopping.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Result, VoltaError};
use crate::linalg::Mat64;
use crate::model::{loss_ce, mix_seed, EncoderConfig, Mode, VoltaModel, TAU_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    FixedTau,
    ShallowEncoder,
    NoPosthocTs,
    McInferenceControl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::FixedTau,
        Variant::ShallowEncoder,
        Variant::NoPosthocTs,
        Variant::McInferenceControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FixedTau => "fixed_tau",
            Variant::ShallowEncoder => "shallow_encoder",
            Variant::NoPosthocTs => "no_posthoc_ts",
            Variant::McInferenceControl => "mc_inference_control",
        }
    }

    /// Variants that share the trained weights of `Full` and only change
    /// what happens afterwards.
    pub fn reuses_full_training(self) -> bool {
        matches!(self, Variant::NoPosthocTs | Variant::McInferenceControl)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = VoltaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| VoltaError::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub tau0: f64,
    pub dropout: f64,
    pub embed_dim: usize,
    pub patience: usize,
    pub variant: Variant,
    pub warmup_fraction: f64,
    pub start_divisor: f64,
    pub final_divisor: f64,
    pub mc_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 512,
            max_lr: 3e-3,
            weight_decay: 1e-3,
            seed: 42,
            tau0: 1.0,
            dropout: 0.1,
            embed_dim: 128,
            patience: 20,
            variant: Variant::Full,
            warmup_fraction: 0.1,
            start_divisor: 25.0,
            final_divisor: 1e4,
            mc_passes: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VoltaError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.embed_dim == 0 {
            return bad("epochs, batch_size and embed_dim must be positive");
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be a finite non-negative number");
        }
        if !(self.tau0 >= TAU_FLOOR && self.tau0.is_finite()) {
            return bad("tau0 must be at least 1e-3");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.start_divisor > 1.0 && self.final_divisor > 1.0) {
            return bad("schedule divisors must exceed 1");
        }
        if self.mc_passes == 0 {
            return bad("mc_passes must be positive");
        }
        Ok(())
    }
}

/// Training setup after an ablation variant has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveConfig {
    pub encoder: EncoderConfig,
    pub tau0: f64,
    pub learn_tau: bool,
    pub posthoc_ts: bool,
    /// Number of dropout-enabled passes averaged at inference, if any.
    pub mc_passes: Option<usize>,
}

pub fn apply_ablation(config: &TrainConfig, input_dim: usize) -> Result<EffectiveConfig> {
    config.validate()?;
    let deep = EncoderConfig::deep(input_dim, config.embed_dim, config.dropout);
    let mut eff = EffectiveConfig {
        encoder: deep,
        tau0: config.tau0,
        learn_tau: true,
        posthoc_ts: true,
        mc_passes: None,
    };
    match config.variant {
        Variant::Full => {}
        Variant::FixedTau => {
            eff.tau0 = 1.0;
            eff.learn_tau = false;
        }
        Variant::ShallowEncoder => {
            eff.encoder = EncoderConfig::shallow(input_dim, config.embed_dim, config.dropout)
        }
        Variant::NoPosthocTs => eff.posthoc_ts = false,
        Variant::McInferenceControl => eff.mc_passes = Some(config.mc_passes),
    }
    eff.encoder.validate()?;
    Ok(eff)
}

/// Adam moments for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One decoupled-decay Adam step. Each parameter tensor is tagged with
    /// whether weight decay applies to it.
    pub fn update(
        &mut self,
        params: &mut [(&mut [f64], bool)],
        grads: &[&[f64]],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(VoltaError::shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, ((p, _), g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[t].len() || g.len() != self.m[t].len() {
                return Err(VoltaError::shape(format!("tensor {t} changed size")));
            }
        }
        if !(lr >= 0.0) {
            return Err(VoltaError::invalid("learning rate must be non-negative"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for (t, ((p, decay), g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if *decay { 1.0 - lr * weight_decay } else { 1.0 };
            for (j, x) in p.iter_mut().enumerate() {
                let m = &mut self.m[t][j];
                let v = &mut self.v[t][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x = *x * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub start_divisor: f64,
    pub final_divisor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycle {
            max_lr,
            total_steps,
            warmup_fraction: 0.1,
            start_divisor: 25.0,
            final_divisor: 1e4,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate at `step ∈ [0, total_steps]`.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(VoltaError::invalid(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        if self.total_steps < 2 {
            return Ok(self.max_lr);
        }
        let start = self.max_lr / self.start_divisor;
        let end = self.max_lr / self.final_divisor;
        let warm = self.warmup_steps();
        if step <= warm {
            return Ok(start + (self.max_lr - start) * step as f64 / warm as f64);
        }
        let progress = (step - warm) as f64 / (self.total_steps - warm) as f64;
        Ok(end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Validation-loss early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub stalled: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            stalled: 0,
        }
    }

    /// Records an epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = Some(epoch);
            self.stalled = 0;
            (true, false)
        } else {
            self.stalled += 1;
            (false, self.stalled >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,tau\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr, e.tau);
        }
        out
    }
}

/// Mean cross-entropy over a whole dataset in eval mode.
pub fn dataset_loss(model: &VoltaModel, data: &FeatureDataset) -> Result<f64> {
    let (probs, _) = model.forward(data.features(), Mode::Eval)?;
    loss_ce(&probs, data.labels())
}

pub fn accuracy_on(model: &VoltaModel, data: &FeatureDataset) -> Result<f64> {
    let out = model.predict(data.features())?;
    let hits = out
        .iter()
        .zip(data.labels())
        .filter(|(o, &y)| o.label == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn check_split(name: &str, data: &FeatureDataset, dim: usize, classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(VoltaError::invalid(format!("{name} split is empty")));
    }
    if data.dim() != dim || data.classes() != classes {
        return Err(VoltaError::shape(format!(
            "{name} split is {}-d with {} classes, expected {dim}-d with {classes}",
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Trains from scratch. The returned model carries the best-validation
/// weights and `tau_star == tau`; calibration is a separate step.
pub fn train(
    train_set: &FeatureDataset,
    val_set: &FeatureDataset,
    config: &TrainConfig,
) -> Result<(VoltaModel, TrainingHistory)> {
    let eff = apply_ablation(config, train_set.dim())?;
    check_split("train", train_set, train_set.dim(), train_set.classes())?;
    check_split("validation", val_set, train_set.dim(), train_set.classes())?;

    let mut model = VoltaModel::init(eff.encoder.clone(), train_set.classes(), eff.tau0, config.seed)?;
    let n = train_set.len();
    let batches = n.div_ceil(config.batch_size);
    let schedule = OneCycle {
        max_lr: config.max_lr,
        total_steps: config.epochs * batches,
        warmup_fraction: config.warmup_fraction,
        start_divisor: config.start_divisor,
        final_divisor: config.final_divisor,
    };
    let mut sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    sizes.push(model.prototypes.raw().as_slice().len());
    let mut opt = AdamW::new(&sizes);

    let initial_val_loss = dataset_loss(&model, val_set)?;
    let mut stopper = EarlyStop::new(config.patience);
    let mut best = model.clone();
    let mut records = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut lr = schedule.lr(0)?;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x: Mat64 = train_set.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let where_ = || format!("epoch {epoch} step {b}");
            let seed = mix_seed(mix_seed(config.seed, epoch as u64), b as u64);
            let (probs, cache) = model
                .forward(&x, Mode::Train { seed })
                .map_err(|e| e.context(&where_()))?;
            let loss = loss_ce(&probs, &y)?;
            if !loss.is_finite() {
                return Err(VoltaError::numeric(where_(), format!("loss is {loss}")));
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = model.backward(&cache, &y).map_err(|e| e.context(&where_()))?;
            if !grads.is_finite() {
                return Err(VoltaError::numeric(where_(), "non-finite gradient"));
            }

            lr = schedule.lr(step)?;
            {
                let mut params = model.params.tensors_mut();
                params.push((model.prototypes.raw_mut_slice(), true));
                let mut g = grads.encoder.tensors();
                g.push(grads.prototypes.as_slice());
                opt.update(&mut params, &g, lr, config.weight_decay)?;
            }
            model.prototypes.renormalize().map_err(|e| e.context(&where_()))?;
            if eff.learn_tau {
                model.temperature.tau = (model.temperature.tau - lr * grads.tau).max(TAU_FLOOR);
            }
            step += 1;
        }
        model.temperature.tau_star = model.temperature.tau;

        let val_loss = dataset_loss(&model, val_set).map_err(|e| e.context(&format!("epoch {epoch} validation")))?;
        if !val_loss.is_finite() {
            return Err(VoltaError::numeric(format!("epoch {epoch} validation"), "non-finite loss"));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            lr,
            tau: model.temperature.tau,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok((
        best,
        TrainingHistory {
            initial_val_loss,
            epochs: records,
            best_epoch: stopper.best_epoch.unwrap_or(0),
            stopped_early,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_gradient_without_decay_is_identity() {
        let mut p = vec![0.3, -1.2];
        let mut opt = AdamW::new(&[2]);
        for _ in 0..3 {
            opt.update(&mut [(&mut p[..], true)], &[&[0.0, 0.0]], 0.1, 0.0).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn adamw_constant_gradient_moves_by_lr() {
        let mut p = vec![1.0];
        let mut opt = AdamW::new(&[1]);
        opt.update(&mut [(&mut p[..], true)], &[&[1.0]], 0.1, 0.0).unwrap();
        let first = 1.0 - p[0];
        assert!((first - 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        // Second step: the bias-corrected moments are still exactly 1.
        let m = (0.9 * 0.1 + 0.1) / (1.0 - 0.81);
        let v = (0.999 * 0.001 + 0.001) / (1.0 - 0.999f64 * 0.999);
        let before = p[0];
        opt.update(&mut [(&mut p[..], true)], &[&[1.0]], 0.1, 0.0).unwrap();
        assert!((before - p[0] - 0.1 * m / (v.sqrt() + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_is_decoupled_and_skips_exempt_tensors() {
        let mut a = vec![2.0];
        let mut b = vec![2.0];
        let mut opt = AdamW::new(&[1, 1]);
        for step in 1..=3 {
            opt.update(&mut [(&mut a[..], true), (&mut b[..], false)], &[&[0.0], &[0.0]], 0.1, 0.01)
                .unwrap();
            assert!((a[0] - 2.0 * 0.999f64.powi(step)).abs() < 1e-15);
            assert_eq!(b[0], 2.0);
        }
        assert!(opt.update(&mut [(&mut a[..], true)], &[&[0.0]], 0.1, 0.0).is_err());
    }

    #[test]
    fn onecycle_endpoints() {
        let s = OneCycle::new(3e-3, 1000);
        assert!((s.lr(0).unwrap() - 3e-3 / 25.0).abs() < 1e-18);
        assert_eq!(s.warmup_steps(), 100);
        assert!((s.lr(100).unwrap() - 3e-3).abs() < 1e-12);
        assert!((s.lr(1000).unwrap() - 3e-7).abs() < 1e-12);
        assert!(s.lr(1001).is_err());
        let odd = OneCycle::new(1.0, 37);
        assert!((odd.lr(odd.warmup_steps()).unwrap() - 1.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in odd.warmup_steps()..=37 {
            let lr = odd.lr(t).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn early_stop_patience_zero_stops_on_first_stall() {
        let mut es = EarlyStop::new(0);
        assert_eq!(es.observe(0, 1.0), (true, false));
        assert_eq!(es.observe(1, 0.5), (true, false));
        assert_eq!(es.observe(2, 0.5), (false, true));
        let mut es = EarlyStop::new(2);
        es.observe(0, 1.0);
        assert_eq!(es.observe(1, 2.0), (false, false));
        assert_eq!(es.observe(2, 2.0), (false, true));
    }

    #[test]
    fn variants_parse_and_apply() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("mc".parse::<Variant>(), Err(VoltaError::Config(_))));
        let base = TrainConfig { tau0: 0.5, ..TrainConfig::default() };
        let full = apply_ablation(&base, 8).unwrap();
        assert!(full.learn_tau && full.posthoc_ts && full.encoder.residual);
        let fixed = apply_ablation(&TrainConfig { variant: Variant::FixedTau, ..base.clone() }, 8).unwrap();
        assert_eq!((fixed.tau0, fixed.learn_tau), (1.0, false));
        let shallow = apply_ablation(&TrainConfig { variant: Variant::ShallowEncoder, ..base.clone() }, 8).unwrap();
        assert!(shallow.encoder.hidden_dims.is_empty() && !shallow.encoder.residual);
        let mc = apply_ablation(&TrainConfig { variant: Variant::McInferenceControl, ..base }, 8).unwrap();
        assert_eq!(mc.mc_passes, Some(10));
    }
}
