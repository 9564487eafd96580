//! The prototype classifier: encoder, unit-norm class prototypes and a
//! learnable logit temperature, with closed-form gradients and the
//! deterministic uncertainty score `u = 1 − max softmax(Pz/τ_unc)`.

mod checkpoint;
pub mod encoder;

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use encoder::{Activation, EncoderCache, EncoderConfig, EncoderParams, Layer, Mode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VoltaError};
use crate::linalg::{argmax, l2_normalize, normalize_vjp, softmax, softmax_in_place, Mat64};

/// Fixed sharpening temperature for the uncertainty score.
pub const DEFAULT_TAU_UNC: f64 = 0.1;
/// Lower clamp for the learned temperature.
pub const TAU_FLOOR: f64 = 1e-3;
/// Probability floor applied before taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-300;

/// Class prototypes kept as unconstrained rows `p̃_k` plus their
/// normalized copies `p_k = p̃_k/‖p̃_k‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    raw: Mat64,
    unit: Mat64,
}

impl Prototypes {
    pub fn from_raw(raw: Mat64) -> Result<Self> {
        let mut unit = raw.clone();
        for k in 0..raw.rows() {
            let p = l2_normalize(raw.row(k)).map_err(|e| e.context(&format!("prototype {k}")))?;
            unit.row_mut(k).copy_from_slice(&p);
        }
        Ok(Prototypes { raw, unit })
    }

    /// Rows drawn from `N(0, I)` and normalized.
    pub fn random(classes: usize, dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let data = (0..classes * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Prototypes::from_raw(Mat64::from_vec(classes, dim, data)?)
    }

    pub fn raw(&self) -> &Mat64 {
        &self.raw
    }

    pub fn unit(&self) -> &Mat64 {
        &self.unit
    }

    pub fn raw_mut_slice(&mut self) -> &mut [f64] {
        self.raw.as_mut_slice()
    }

    /// Recomputes the unit rows after `raw` was modified.
    pub fn renormalize(&mut self) -> Result<()> {
        for k in 0..self.raw.rows() {
            let p = l2_normalize(self.raw.row(k)).map_err(|e| e.context(&format!("prototype {k}")))?;
            self.unit.row_mut(k).copy_from_slice(&p);
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.raw.rows()
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    /// Learned during training.
    pub tau: f64,
    /// Refit post hoc on validation data; equals `tau` until calibrated.
    pub tau_star: f64,
    pub tau_unc: f64,
}

impl Temperature {
    pub fn new(tau0: f64) -> Self {
        Temperature {
            tau: tau0,
            tau_star: tau0,
            tau_unc: DEFAULT_TAU_UNC,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau >= TAU_FLOOR
            && self.tau.is_finite()
            && self.tau_star > 0.0
            && self.tau_star.is_finite()
            && self.tau_unc > 0.0
            && self.tau_unc.is_finite();
        if ok {
            Ok(())
        } else {
            Err(VoltaError::invalid(format!("invalid temperatures {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encoder: EncoderCache,
    /// ‖v_i‖₂ per row.
    pub norms: Vec<f64>,
    /// Normalized embeddings.
    pub z: Mat64,
    /// Cosine similarities `z_iᵀ p_k`.
    pub sims: Mat64,
    pub logits: Mat64,
    pub probs: Mat64,
    /// Temperature the logits were computed with.
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: EncoderParams,
    pub prototypes: Mat64,
    pub tau: f64,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.prototypes.is_finite() && self.tau.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveOutput {
    pub similarities: Vec<f64>,
    /// `similarities / τ*`
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub label: usize,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltaModel {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub prototypes: Prototypes,
    pub temperature: Temperature,
    /// Seed the model was initialized and trained with.
    pub seed: u64,
}

impl VoltaModel {
    pub fn init(config: EncoderConfig, classes: usize, tau0: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(VoltaError::Config("need at least one class".into()));
        }
        if !(tau0 >= TAU_FLOOR && tau0.is_finite()) {
            return Err(VoltaError::Config(format!("initial temperature {tau0} below floor")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&config, &mut rng);
        let prototypes = Prototypes::random(classes, config.embed_dim, &mut rng)?;
        Ok(VoltaModel {
            config,
            params,
            prototypes,
            temperature: Temperature::new(tau0),
            seed,
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.classes()
    }

    /// Trainable scalars, counting prototypes and the temperature.
    pub fn param_count(&self) -> usize {
        self.params.param_count() + self.prototypes.raw().as_slice().len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_shapes(&self.config)?;
        if self.prototypes.dim() != self.config.embed_dim || self.prototypes.classes() == 0 {
            return Err(VoltaError::shape("prototype matrix does not match embedding width"));
        }
        if !self.params.is_finite() || !self.prototypes.raw().is_finite() {
            return Err(VoltaError::invalid("non-finite parameter"));
        }
        self.temperature.validate()
    }

    /// Forward pass at the training temperature.
    pub fn forward(&self, batch: &Mat64, mode: Mode) -> Result<(Mat64, ForwardCache)> {
        self.forward_with_tau(batch, mode, self.temperature.tau)
    }

    pub fn forward_with_tau(
        &self,
        batch: &Mat64,
        mode: Mode,
        tau: f64,
    ) -> Result<(Mat64, ForwardCache)> {
        let encoder = encoder::encode(&self.config, &self.params, batch, mode)?;
        let n = batch.rows();
        let mut z = encoder.raw.clone();
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = z.row_mut(r);
            let nrm = crate::linalg::norm(row);
            if !(nrm >= crate::linalg::MIN_NORM) {
                return Err(VoltaError::numeric(
                    "l2 normalization",
                    format!("embedding of row {r} has norm {nrm:e}"),
                ));
            }
            for x in row.iter_mut() {
                *x /= nrm;
            }
            norms.push(nrm);
        }
        let sims = z.matmul_t(self.prototypes.unit())?;
        let mut logits = sims.clone();
        for x in logits.as_mut_slice() {
            *x /= tau;
        }
        let mut probs = logits.clone();
        for r in 0..n {
            softmax_in_place(probs.row_mut(r));
        }
        if !probs.is_finite() {
            return Err(VoltaError::numeric("softmax head", "non-finite probabilities"));
        }
        let cache = ForwardCache {
            encoder,
            norms,
            z,
            sims,
            logits,
            probs: probs.clone(),
            tau,
        };
        Ok((probs, cache))
    }

    /// Gradients of the batch-mean cross-entropy at the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        let n = cache.probs.rows();
        let k = self.classes();
        if labels.len() != n {
            return Err(VoltaError::shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if cache.probs.cols() != k || cache.z.cols() != self.config.embed_dim {
            return Err(VoltaError::shape("cache does not belong to this model"));
        }
        let tau = cache.tau;
        let inv_b = 1.0 / n as f64;
        let protos = self.prototypes.unit();

        let mut d_raw = Mat64::zeros(n, self.config.embed_dim);
        let mut d_unit = Mat64::zeros(k, self.config.embed_dim);
        let mut d_tau = 0.0;
        let mut residual = vec![0.0; k];
        for i in 0..n {
            let y = labels[i];
            if y >= k {
                return Err(VoltaError::invalid(format!("label {y} outside [0, {k})")));
            }
            // ∂L/∂ℓ_ik = (ŷ_ik − δ_{k,y_i}) / |B|
            for (c, r) in residual.iter_mut().enumerate() {
                *r = (cache.probs.get(i, c) - if c == y { 1.0 } else { 0.0 }) * inv_b;
            }
            let dz = protos.matvec_t(&residual)?;
            let dz: Vec<f64> = dz.iter().map(|v| v / tau).collect();
            let dv = normalize_vjp(cache.encoder.raw.row(i), &dz)?;
            d_raw.row_mut(i).copy_from_slice(&dv);

            d_unit.add_outer(1.0 / tau, &residual, cache.z.row(i))?;
            let sims = cache.sims.row(i);
            d_tau -= residual.iter().zip(sims).map(|(r, s)| r * s).sum::<f64>() / (tau * tau);
        }

        let mut d_proto = Mat64::zeros(k, self.config.embed_dim);
        for c in 0..k {
            let g = normalize_vjp(self.prototypes.raw().row(c), d_unit.row(c))?;
            d_proto.row_mut(c).copy_from_slice(&g);
        }
        let encoder = encoder::encode_backward(&self.config, &self.params, &cache.encoder, &d_raw)?;
        Ok(Gradients {
            encoder,
            prototypes: d_proto,
            tau: d_tau,
        })
    }

    /// Normalized embeddings (eval mode).
    pub fn embed(&self, batch: &Mat64) -> Result<Mat64> {
        Ok(self.forward(batch, Mode::Eval)?.1.z)
    }

    /// Raw, pre-normalization embeddings (eval mode).
    pub fn raw_embed(&self, batch: &Mat64) -> Result<Mat64> {
        Ok(encoder::encode(&self.config, &self.params, batch, Mode::Eval)?.raw)
    }

    /// Deterministic single-pass inference: probabilities at `τ*`,
    /// uncertainty at `τ_unc`, ties broken toward the smallest label.
    pub fn predict(&self, batch: &Mat64) -> Result<Vec<PredictiveOutput>> {
        let (_, cache) = self.forward(batch, Mode::Eval)?;
        Ok((0..batch.rows())
            .map(|i| self.output_from_similarities(cache.sims.row(i)))
            .collect())
    }

    pub fn output_from_similarities(&self, sims: &[f64]) -> PredictiveOutput {
        let t = &self.temperature;
        let logits: Vec<f64> = sims.iter().map(|s| s / t.tau_star).collect();
        let probabilities = softmax(&logits);
        PredictiveOutput {
            similarities: sims.to_vec(),
            label: argmax(&probabilities),
            uncertainty: uncertainty_from_similarities(sims, t.tau_unc),
            logits,
            probabilities,
        }
    }

    /// Averages `passes` dropout-enabled forward passes. Only meant for the
    /// Monte Carlo inference control; with zero dropout it reproduces
    /// [`VoltaModel::predict`] exactly.
    pub fn predict_mc(&self, batch: &Mat64, passes: usize, seed: u64) -> Result<Vec<PredictiveOutput>> {
        if passes == 0 {
            return Err(VoltaError::invalid("need at least one pass"));
        }
        let n = batch.rows();
        let k = self.classes();
        let t = self.temperature;
        let mut mean_pred = Mat64::zeros(n, k);
        let mut mean_unc = Mat64::zeros(n, k);
        let mut mean_logits = Mat64::zeros(n, k);
        let mut mean_sims = Mat64::zeros(n, k);
        for pass in 0..passes {
            let (_, cache) = self.forward(batch, Mode::Train { seed: mix_seed(seed, pass as u64) })?;
            let w = 1.0 / (pass + 1) as f64;
            for i in 0..n {
                let sims = cache.sims.row(i);
                let logits: Vec<f64> = sims.iter().map(|s| s / t.tau_star).collect();
                let pred = softmax(&logits);
                let unc = softmax(&sims.iter().map(|s| s / t.tau_unc).collect::<Vec<_>>());
                // running means stay bit-exact when every pass agrees
                for (dst, src) in [
                    (mean_pred.row_mut(i), &pred[..]),
                    (mean_unc.row_mut(i), &unc[..]),
                    (mean_logits.row_mut(i), &logits[..]),
                    (mean_sims.row_mut(i), sims),
                ] {
                    for (m, x) in dst.iter_mut().zip(src) {
                        *m += (x - *m) * w;
                    }
                }
            }
        }
        Ok((0..n)
            .map(|i| PredictiveOutput {
                similarities: mean_sims.row(i).to_vec(),
                logits: mean_logits.row(i).to_vec(),
                probabilities: mean_pred.row(i).to_vec(),
                label: argmax(mean_pred.row(i)),
                uncertainty: complement_of_max(mean_unc.row(i)),
            })
            .collect())
    }
}

/// `−mean_i log p̂_{i,y_i}`, flooring probabilities at [`PROB_FLOOR`].
pub fn loss_ce(probs: &Mat64, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(VoltaError::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    if labels.is_empty() {
        return Err(VoltaError::invalid("cross-entropy of an empty batch"));
    }
    let k = probs.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(VoltaError::invalid(format!("label {y} outside [0, {k})")));
        }
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(VoltaError::invalid(format!("row {i} sums to {s}")));
        }
        total -= row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// `1 − max_k p_k`, summed over the non-maximal entries for accuracy.
pub fn complement_of_max(p: &[f64]) -> f64 {
    let top = argmax(p);
    p.iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, v)| v)
        .sum()
}

pub fn uncertainty_from_similarities(sims: &[f64], tau_unc: f64) -> f64 {
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau_unc).collect();
    complement_of_max(&softmax(&scaled))
}

/// Uncertainty score `1 − max_k softmax(Pz/τ_unc)_k` of a unit embedding.
pub fn uncertainty(prototypes: &Prototypes, z: &[f64], tau_unc: f64) -> Result<f64> {
    if !(tau_unc > 0.0) {
        return Err(VoltaError::invalid("tau_unc must be positive"));
    }
    let n = crate::linalg::norm(z);
    if (n - 1.0).abs() > 1e-9 {
        return Err(VoltaError::invalid(format!("embedding norm {n} is not 1")));
    }
    let sims = prototypes.unit().matvec(z)?;
    Ok(uncertainty_from_similarities(&sims, tau_unc))
}

/// Closed form `1 − 1/(1 + exp(Δ/τ_unc))` for a similarity gap `Δ ≥ 0`.
///
/// This is always ≥ 1/2 and is *not* a valid lower bound on the uncertainty
/// of misclassified samples; see [`pairwise_softmax_bound`] for the bound
/// that the two-class softmax argument actually yields.
pub fn misclass_lower_bound(delta: f64, tau_unc: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(VoltaError::invalid(format!("gap {delta} must be non-negative")));
    }
    if !(tau_unc > 0.0) {
        return Err(VoltaError::invalid("tau_unc must be positive"));
    }
    Ok(1.0 - 1.0 / (1.0 + (delta / tau_unc).exp()))
}

/// `1/(1 + exp(Δ/τ_unc))`: dropping all classes but the predicted and the
/// true one from the softmax denominator gives `u ≥` this value whenever the
/// prediction is wrong.
pub fn pairwise_softmax_bound(delta: f64, tau_unc: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(VoltaError::invalid(format!("gap {delta} must be non-negative")));
    }
    if !(tau_unc > 0.0) {
        return Err(VoltaError::invalid("tau_unc must be positive"));
    }
    Ok(1.0 / (1.0 + (delta / tau_unc).exp()))
}

/// SplitMix64-style mixing of a run seed with a stream index.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
