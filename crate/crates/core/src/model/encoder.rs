//! Fully connected encoder: per layer `linear → layer norm → GELU → dropout`,
//! optionally plus a learned linear projection of the raw input added to the
//! last layer's output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::linalg::{axpy, dot, Mat64};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x·Φ(x)` with the exact normal CDF.
    Gelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Widths of the layers before the final one.
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Adds a learned `input_dim → embed_dim` projection of the input.
    pub residual: bool,
    pub layer_norm: bool,
    pub activation: Activation,
    pub ln_eps: f64,
    pub dropout: f64,
}

impl EncoderConfig {
    /// `d_f → d_f → D` with a residual projection.
    pub fn deep(input_dim: usize, embed_dim: usize, dropout: f64) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims: vec![input_dim],
            embed_dim,
            residual: true,
            layer_norm: true,
            activation: Activation::Gelu,
            ln_eps: DEFAULT_LN_EPS,
            dropout,
        }
    }

    /// Single `d_f → D` layer, no residual.
    pub fn shallow(input_dim: usize, embed_dim: usize, dropout: f64) -> Self {
        EncoderConfig {
            hidden_dims: Vec::new(),
            residual: false,
            ..EncoderConfig::deep(input_dim, embed_dim, dropout)
        }
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(VoltaError::Config("encoder widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VoltaError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(VoltaError::Config("layer-norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_out × fan_in`
    pub weight: Mat64,
    pub bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: Mat64::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
            gain: vec![0.0; fan_out],
            shift: vec![0.0; fan_out],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    /// `embed_dim × input_dim`, present iff the config asks for a residual.
    pub residual: Option<Mat64>,
}

impl EncoderParams {
    /// Gaussian weights with variance `2/fan_in`, zero biases, unit gains.
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let gaussian = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize| {
            let dist = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Mat64::from_vec(rows, cols, data).expect("consistent shape")
        };
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: gaussian(rng, fan_out, fan_in),
                bias: vec![0.0; fan_out],
                gain: vec![1.0; fan_out],
                shift: vec![0.0; fan_out],
            })
            .collect();
        let residual = config
            .residual
            .then(|| gaussian(rng, config.embed_dim, config.input_dim));
        EncoderParams { layers, residual }
    }

    pub fn zeros_like(config: &EncoderConfig) -> Self {
        EncoderParams {
            layers: config
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
            residual: config
                .residual
                .then(|| Mat64::zeros(config.embed_dim, config.input_dim)),
        }
    }

    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(VoltaError::shape(format!(
                "config has {} layers, parameters have {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (l, ((fan_in, fan_out), layer)) in shapes.iter().zip(&self.layers).enumerate() {
            let ok = layer.weight.rows() == *fan_out
                && layer.weight.cols() == *fan_in
                && layer.bias.len() == *fan_out
                && layer.gain.len() == *fan_out
                && layer.shift.len() == *fan_out;
            if !ok {
                return Err(VoltaError::shape(format!(
                    "layer {l} parameters do not match {fan_in}→{fan_out}"
                )));
            }
        }
        match (&self.residual, config.residual) {
            (Some(r), true) if r.rows() == config.embed_dim && r.cols() == config.input_dim => {}
            (None, false) => {}
            _ => return Err(VoltaError::shape("residual projection does not match config")),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.is_finite()
                && [&l.bias, &l.gain, &l.shift]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()))
        }) && self.residual.as_ref().is_none_or(Mat64::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + 3 * l.bias.len())
            .sum::<usize>()
            + self.residual.as_ref().map_or(0, |r| r.as_slice().len())
    }

    /// Flat views in a fixed order, each tagged with whether weight decay
    /// applies (layer-norm gains and shifts are exempt).
    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push((l.weight.as_mut_slice(), true));
            out.push((l.bias.as_mut_slice(), true));
            out.push((l.gain.as_mut_slice(), false));
            out.push((l.shift.as_mut_slice(), false));
        }
        if let Some(r) = &mut self.residual {
            out.push((r.as_mut_slice(), true));
        }
        out
    }

    /// Same order as [`EncoderParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
            out.push(l.gain.as_slice());
            out.push(l.shift.as_slice());
        }
        if let Some(r) = &self.residual {
            out.push(r.as_slice());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks drawn from this seed.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Mat64,
    pub pre: Mat64,
    /// Standardized pre-activations (equal to `pre` without layer norm).
    pub normed: Mat64,
    pub inv_std: Vec<f64>,
    /// Input to the activation: `gain ⊙ normed + shift`.
    pub affine: Mat64,
    /// Inverted-dropout multipliers (0 or 1/(1−rate)); empty when inactive.
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub input: Mat64,
    pub layers: Vec<LayerCache>,
    /// Raw embeddings before L2 normalization.
    pub raw: Mat64,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Runs the encoder on a batch (rows are samples).
pub fn encode(
    config: &EncoderConfig,
    params: &EncoderParams,
    batch: &Mat64,
    mode: Mode,
) -> Result<EncoderCache> {
    if batch.cols() != config.input_dim {
        return Err(VoltaError::shape(format!(
            "batch has {} features, encoder expects {}",
            batch.cols(),
            config.input_dim
        )));
    }
    let n = batch.rows();
    let mut rng = match mode {
        Mode::Train { seed } if config.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let keep_scale = 1.0 / (1.0 - config.dropout);

    let mut layers = Vec::with_capacity(params.layers.len());
    let mut h = batch.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let width = layer.weight.rows();
        let mut pre = h.matmul_t(&layer.weight)?;
        for r in 0..n {
            axpy(1.0, &layer.bias, pre.row_mut(r));
        }
        let mut normed = pre.clone();
        let mut inv_std = vec![1.0; n];
        if config.layer_norm {
            for r in 0..n {
                let row = normed.row_mut(r);
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
                let is = 1.0 / (var + config.ln_eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv_std[r] = is;
            }
        }
        let mut affine = normed.clone();
        if config.layer_norm {
            for r in 0..n {
                for ((x, g), s) in affine.row_mut(r).iter_mut().zip(&layer.gain).zip(&layer.shift) {
                    *x = *x * g + s;
                }
            }
        }
        let mut out = affine.clone();
        for x in out.as_mut_slice() {
            *x = config.activation.apply(*x);
        }
        let mut mask = Vec::new();
        if let Some(rng) = rng.as_mut() {
            mask.reserve(out.as_slice().len());
            for x in out.as_mut_slice() {
                let m = if rng.random::<f64>() < config.dropout {
                    0.0
                } else {
                    keep_scale
                };
                *x *= m;
                mask.push(m);
            }
        }
        if !out.is_finite() {
            return Err(VoltaError::numeric(
                format!("encoder layer {li}"),
                "non-finite activation",
            ));
        }
        layers.push(LayerCache {
            input: std::mem::replace(&mut h, out),
            pre,
            normed,
            inv_std,
            affine,
            mask,
        });
    }
    if let Some(proj) = &params.residual {
        let skip = batch.matmul_t(proj)?;
        axpy(1.0, skip.as_slice(), h.as_mut_slice());
        if !h.is_finite() {
            return Err(VoltaError::numeric("residual projection", "non-finite output"));
        }
    }
    Ok(EncoderCache {
        input: batch.clone(),
        layers,
        raw: h,
    })
}

/// Reverse-mode accumulation through the encoder given `∂L/∂raw`.
pub fn encode_backward(
    config: &EncoderConfig,
    params: &EncoderParams,
    cache: &EncoderCache,
    d_raw: &Mat64,
) -> Result<EncoderParams> {
    if d_raw.rows() != cache.raw.rows() || d_raw.cols() != cache.raw.cols() {
        return Err(VoltaError::shape("cotangent does not match cached embeddings"));
    }
    let n = d_raw.rows();
    let mut grads = EncoderParams::zeros_like(config);

    if let (Some(g_res), Some(_)) = (&mut grads.residual, &params.residual) {
        for r in 0..n {
            g_res.add_outer(1.0, d_raw.row(r), cache.input.row(r))?;
        }
    }

    let mut d_out = d_raw.clone();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let g = &mut grads.layers[li];
        let width = layer.weight.rows();

        // through dropout and the activation
        let mut d_affine = d_out;
        if !lc.mask.is_empty() {
            for (d, m) in d_affine.as_mut_slice().iter_mut().zip(&lc.mask) {
                *d *= m;
            }
        }
        for (d, a) in d_affine.as_mut_slice().iter_mut().zip(lc.affine.as_slice()) {
            *d *= config.activation.grad(*a);
        }

        let mut d_pre = d_affine.clone();
        if config.layer_norm {
            let mut d_norm = vec![0.0; width];
            for r in 0..n {
                let dr = d_affine.row(r);
                let xh = lc.normed.row(r);
                for j in 0..width {
                    g.gain[j] += dr[j] * xh[j];
                    g.shift[j] += dr[j];
                    d_norm[j] = dr[j] * layer.gain[j];
                }
                let mean_d = d_norm.iter().sum::<f64>() / width as f64;
                let mean_dx = dot(&d_norm, xh) / width as f64;
                let is = lc.inv_std[r];
                for (j, out) in d_pre.row_mut(r).iter_mut().enumerate() {
                    *out = is * (d_norm[j] - mean_d - xh[j] * mean_dx);
                }
            }
        }

        for r in 0..n {
            let dr = d_pre.row(r);
            axpy(1.0, dr, &mut g.bias);
            g.weight.add_outer(1.0, dr, lc.input.row(r))?;
        }
        d_out = if li > 0 {
            d_pre.matmul(&layer.weight)?
        } else {
            Mat64::zeros(0, 0)
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for i in -40..=40 {
            let x = i as f64 * 0.15;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn layer_shapes_for_variants() {
        assert_eq!(EncoderConfig::deep(8, 4, 0.1).layer_shapes(), vec![(8, 8), (8, 4)]);
        assert_eq!(EncoderConfig::shallow(8, 4, 0.1).layer_shapes(), vec![(8, 4)]);
        let mut c = EncoderConfig::deep(8, 4, 1.0);
        assert!(c.validate().is_err());
        c.dropout = 0.5;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn dropout_masks_follow_seed() {
        let config = EncoderConfig::deep(5, 3, 0.4);
        let params = EncoderParams::init(&config, &mut ChaCha8Rng::seed_from_u64(1));
        let batch = Mat64::from_vec(4, 5, (0..20).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let a = encode(&config, &params, &batch, Mode::Train { seed: 9 }).unwrap();
        let b = encode(&config, &params, &batch, Mode::Train { seed: 9 }).unwrap();
        let c = encode(&config, &params, &batch, Mode::Train { seed: 10 }).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_ne!(a.raw, c.raw);
        let kept = a.layers[0].mask.iter().filter(|&&m| m > 0.0).count();
        assert!(kept > 0 && kept < a.layers[0].mask.len());
        let e = encode(&config, &params, &batch, Mode::Eval).unwrap();
        assert!(e.layers.iter().all(|l| l.mask.is_empty()));
    }
}
