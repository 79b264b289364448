//! Desk-scale continuous VAE tokenizer with KL regularization and optional
//! foundation alignment.

mod model;
mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

pub use model::{Conv, GroupNorm, TokenizerConfig, TokenizerModel};
pub use train::{latent_vectors, posterior_means, resolve_features, train_tokenizer, EpochLog, TokenizerTrainConfig, TrainedTokenizer, VfHead};

use crate::foundation::FoundationError;
use crate::io::{FormatError, TensorTable};
use crate::numerics::{NumericsError, Tensor};
use crate::vfloss::{LatentMap, VfLossError};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    VfLoss(#[from] VfLossError),
    #[error(transparent)]
    Foundation(#[from] FoundationError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("input {h}x{w} not divisible by downsampling factor {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { term: &'static str, epoch: usize, step: usize },
}

/// Diagonal Gaussian over the latent grid, both fields `[n, d_z, h, w]`.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Posterior {
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self, TokenizerError> {
        if mean.shape() != logvar.shape() {
            return Err(TokenizerError::Shape(format!(
                "mean {:?} vs logvar {:?}",
                mean.shape(),
                logvar.shape()
            )));
        }
        Ok(Self {
            mean,
            logvar: logvar.clamp(LOGVAR_MIN, LOGVAR_MAX),
        })
    }

    /// Reparameterized draw `mean + exp(logvar / 2) · ε`.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor, TokenizerError> {
        let eps: Vec<f64> = (0..self.mean.numel()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(eps, self.mean.shape())?;
        Ok(self.mean.add(&self.logvar.mul_scalar(0.5).exp().mul(&eps)?)?)
    }

    /// Per-image latent maps in `[h, w, d_z]` layout.
    pub fn latent_maps(z: &Tensor) -> Result<Vec<LatentMap>, TokenizerError> {
        let s = z.shape();
        let hwc = z.permute(&[0, 2, 3, 1])?;
        let per = s[1] * s[2] * s[3];
        (0..s[0])
            .map(|i| {
                let t = hwc.narrow(0, i, 1)?.reshape(&[s[2], s[3], s[1]])?;
                debug_assert_eq!(t.numel(), per);
                Ok(LatentMap::new(t)?)
            })
            .collect()
    }
}

/// Sample a latent map for a single-image posterior.
pub fn sample_latent(p: &Posterior, rng: &mut impl Rng) -> Result<LatentMap, TokenizerError> {
    let z = p.sample(rng)?;
    let mut maps = Posterior::latent_maps(&z)?;
    if maps.len() != 1 {
        return Err(TokenizerError::Shape(format!("expected one image, got {}", maps.len())));
    }
    Ok(maps.remove(0))
}

/// `0.5 · Σ (mean² + exp(logvar) − 1 − logvar)` over every element.
pub fn kl_loss(p: &Posterior) -> Result<Tensor, TokenizerError> {
    let per = p
        .mean
        .square()
        .add(&p.logvar.exp())?
        .sub(&p.logvar)?
        .add_scalar(-1.0);
    Ok(per.sum().mul_scalar(0.5))
}

/// Summed absolute error.
pub fn recon_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor, TokenizerError> {
    Ok(x.sub(x_hat)?.abs().sum())
}

pub fn save_checkpoint(model: &TokenizerModel, head: Option<&VfHead>, path: &Path) -> Result<(), TokenizerError> {
    let mut table = model.to_table();
    if let Some(h) = head {
        let w = &h.projection.weight;
        table.push("vf.projection", w.shape(), w.data());
    }
    Ok(table.save(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TokenizerModel, TokenizerError> {
    TokenizerModel::from_table(&TensorTable::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn grid_shapes_follow_factor() {
        let m = TokenizerModel::new(TokenizerConfig { factor: 8, d_z: 16 }, &mut rng()).unwrap();
        let p = m.encode(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(p.mean.shape(), &[2, 16, 4, 4]);
        let x_hat = m.decode(&p.mean).unwrap();
        assert_eq!(x_hat.shape(), &[2, 3, 32, 32]);

        let m16 = TokenizerModel::new(TokenizerConfig { factor: 16, d_z: 16 }, &mut rng()).unwrap();
        assert_eq!(m16.encode(&Tensor::zeros(&[1, 3, 64, 64])).unwrap().mean.shape(), &[1, 16, 4, 4]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = TokenizerModel::new(TokenizerConfig::default(), &mut rng()).unwrap();
        assert!(matches!(
            m.encode(&Tensor::zeros(&[1, 3, 30, 32])),
            Err(TokenizerError::Indivisible { .. })
        ));
    }

    #[test]
    fn zero_head_gives_standard_normal_posterior() {
        let m = TokenizerModel::new(TokenizerConfig::default(), &mut rng()).unwrap();
        let mut r = rng();
        let x = crate::numerics::randn(&mut r, &[1, 3, 32, 32]);
        let p = m.encode(&x).unwrap();
        assert!(p.mean.data().iter().all(|&v| v == 0.0));
        assert!(p.logvar.data().iter().all(|&v| v == 0.0));
        assert_eq!(kl_loss(&p).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_single_element() {
        let p = Posterior::new(Tensor::full(&[1], 1.0), Tensor::zeros(&[1])).unwrap();
        assert_eq!(kl_loss(&p).unwrap().item(), 0.5);
    }

    #[test]
    fn recon_examples() {
        let x = Tensor::new(vec![0.1, -0.2, 0.3, 0.9], &[4]).unwrap();
        assert_eq!(recon_loss(&x, &x).unwrap().item(), 0.0);
        assert!((recon_loss(&x, &x.add_scalar(0.5)).unwrap().item() - 2.0).abs() < 1e-12);
        assert!(recon_loss(&x, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn collapsed_variance_returns_mean() {
        let mean = Tensor::new(vec![0.3, -1.2], &[1, 2, 1, 1]).unwrap();
        let p = Posterior::new(mean.clone(), Tensor::full(&[1, 2, 1, 1], -1e9)).unwrap();
        let z = sample_latent(&p, &mut rng()).unwrap();
        for (a, b) in z.values.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = Posterior::new(Tensor::zeros(&[1, 3, 2, 2]), Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        let a = p.sample(&mut rng()).unwrap();
        let b = p.sample(&mut rng()).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
