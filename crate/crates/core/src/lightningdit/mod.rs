//! Small class-conditional diffusion transformer trained with rectified flow.
//!
//! Convention: `x₀` is data, `x₁` is Gaussian noise, `x_t = (1−t)·x₀ + t·x₁`
//! and the network regresses the constant velocity `x₁ − x₀`. Sampling
//! integrates from `t = 1` down to `t = 0`.

mod layers;
mod model;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;

pub use layers::{
    attention, attention_weights, gated_residual, modulate, rmsnorm, rope_2d, swiglu_ffn, swiglu_hidden, Linear,
    RMS_EPS, ROPE_THETA,
};
pub use model::{timestep_features, DiTModel, DitConfig, LatentStats, TIME_FREQS};
pub use train::{train_dit, DitTrainConfig, TrainedDit};

use crate::io::FormatError;
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DitError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
}

/// One point on the straight data–noise path.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

impl FlowState {
    /// Per-sample times `t` for `x₀`, `x₁`: `[b, ...]`.
    pub fn new(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Self, DitError> {
        if x0.shape() != x1.shape() || x0.rank() == 0 || x0.shape()[0] != t.len() {
            return Err(DitError::Shape(format!(
                "x0 {:?}, x1 {:?}, {} times",
                x0.shape(),
                x1.shape(),
                t.len()
            )));
        }
        let per = x0.numel() / t.len().max(1);
        let (a, b) = (x0.data(), x1.data());
        let x_t = (0..a.len())
            .map(|k| {
                let ti = t[k / per];
                if ti == 0.0 {
                    a[k]
                } else if ti == 1.0 {
                    b[k]
                } else {
                    (1.0 - ti) * a[k] + ti * b[k]
                }
            })
            .collect();
        let v = a.iter().zip(b).map(|(p, q)| q - p).collect();
        Ok(Self {
            t: t.to_vec(),
            x_t: Tensor::new(x_t, x0.shape())?,
            v_target: Tensor::new(v, x0.shape())?,
        })
    }
}

/// `sigmoid(n)` with `n ~ N(0, 1)`.
pub fn lognorm_sample_t(rng: &mut impl Rng) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    1.0 / (1.0 + (-n).exp())
}

/// Uniform time in the open interval `(0, 1)`.
pub fn uniform_sample_t(rng: &mut impl Rng) -> f64 {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t;
        }
    }
}

/// Scalar parts of [`velocity_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityTerms {
    pub mse: f64,
    pub direction: f64,
    /// Samples whose target had zero norm and were left out of the direction term.
    pub skipped: usize,
}

const ZERO_TARGET: f64 = 1e-8;

/// `mean((v − v̂)²) + λ · mean_b(1 − cos(v̂_b, v_b))`, the cosine taken between
/// each sample's flattened velocities. Samples with a zero-norm target are
/// excluded from the direction term.
pub fn velocity_loss(v_pred: &Tensor, v_target: &Tensor, lambda_dir: f64) -> Result<(Tensor, VelocityTerms), DitError> {
    if v_pred.shape() != v_target.shape() || v_pred.rank() == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "velocity_loss",
            lhs: v_pred.shape().to_vec(),
            rhs: v_target.shape().to_vec(),
        }
        .into());
    }
    let mse = v_pred.sub(v_target)?.square().mean();
    let b = v_pred.shape()[0];
    let per = v_pred.numel() / b.max(1);
    let keep: Vec<usize> = (0..b)
        .filter(|&i| {
            let row = &v_target.data()[i * per..(i + 1) * per];
            row.iter().map(|v| v * v).sum::<f64>().sqrt() >= ZERO_TARGET
        })
        .collect();
    let skipped = b - keep.len();
    if skipped > 0 {
        log::warn!("{skipped} zero-norm velocity targets; direction term skipped for them");
    }
    if keep.is_empty() || lambda_dir == 0.0 {
        let terms = VelocityTerms {
            mse: mse.item(),
            direction: 0.0,
            skipped,
        };
        return Ok((mse, terms));
    }
    let flat = |t: &Tensor| -> Result<Tensor, DitError> { Ok(t.reshape(&[b, per])?.index_select(&keep)?) };
    let cos = flat(v_pred)?.cosine_similarity(&flat(v_target)?, 1, crate::vfloss::NORM_EPS)?;
    let direction = cos.neg().add_scalar(1.0).mean();
    let total = mse.add(&direction.mul_scalar(lambda_dir))?;
    let terms = VelocityTerms {
        mse: mse.item(),
        direction: direction.item(),
        skipped,
    };
    Ok((total, terms))
}

/// Euler sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Guidance is applied only for `t` in this closed interval.
    pub cfg_interval: (f64, f64),
    pub shift: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            cfg_scale: 1.0,
            cfg_interval: (0.0, 1.0),
            shift: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DitError> {
        let (lo, hi) = self.cfg_interval;
        if self.steps == 0 {
            return Err(DitError::Config("sampler needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(DitError::Config(format!("cfg_interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
        }
        if !(self.shift > 0.0 && self.shift.is_finite()) {
            return Err(DitError::Config(format!("shift {} must be positive", self.shift)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(DitError::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// `s·t / (1 + (s−1)·t)`.
pub fn shift_time(t: f64, s: f64) -> f64 {
    if s == 1.0 {
        return t;
    }
    s * t / (1.0 + (s - 1.0) * t)
}

/// `steps + 1` decreasing times from 1 to 0 on the shifted grid.
pub fn time_grid(steps: usize, shift: f64) -> Vec<f64> {
    (0..=steps)
        .map(|k| shift_time(1.0 - k as f64 / steps as f64, shift))
        .collect()
}

/// Integrates `dx/dt = v(x, t)` along `grid` starting from `x` at `grid[0]`.
pub fn euler_integrate<F>(x: &Tensor, grid: &[f64], mut v: F) -> Result<Tensor, DitError>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor, DitError>,
{
    let mut x = x.detach();
    for w in grid.windows(2) {
        let dt = w[1] - w[0];
        let vel = v(&x, w[0])?;
        let next: Vec<f64> = x.data().iter().zip(vel.data()).map(|(a, b)| a + dt * b).collect();
        x = Tensor::new(next, x.shape())?;
    }
    Ok(x)
}

/// Guided velocity of `model` at `x`; the conditional prediction alone when
/// `t` lies outside the interval or the scale is 1.
pub fn guided_velocity(
    model: &DiTModel,
    x: &Tensor,
    t: f64,
    labels: &[usize],
    cfg: &SamplerConfig,
) -> Result<Tensor, DitError> {
    let b = labels.len();
    let ts = vec![t; b];
    let v_c = model.forward(x, &ts, labels)?.detach();
    let (lo, hi) = cfg.cfg_interval;
    if cfg.cfg_scale == 1.0 || t < lo || t > hi {
        return Ok(v_c);
    }
    let null = vec![model.config.null_class(); b];
    let v_u = model.forward(x, &ts, &null)?.detach();
    let out = v_u
        .data()
        .iter()
        .zip(v_c.data())
        .map(|(u, c)| u + cfg.cfg_scale * (c - u))
        .collect();
    Ok(Tensor::new(out, x.shape())?)
}

/// Draws `x₁ ~ N(0, I)` for every label and integrates to `t = 0`. Output is
/// in the model's normalized latent space, `[b, c, h, w]`.
pub fn euler_sample(model: &DiTModel, cfg: &SamplerConfig, labels: &[usize], rng: &mut impl Rng) -> Result<Tensor, DitError> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(DitError::Config("no labels to sample".into()));
    }
    let c = &model.config;
    let shape = [labels.len(), c.channels, c.grid.0, c.grid.1];
    let n: usize = shape.iter().product();
    let x1 = Tensor::new((0..n).map(|_| rng.sample(StandardNormal)).collect(), &shape)?;
    euler_integrate(&x1, &time_grid(cfg.steps, cfg.shift), |x, t| guided_velocity(model, x, t, labels, cfg))
}
