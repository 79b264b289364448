use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{lognorm_sample_t, uniform_sample_t, velocity_loss, DiTModel, DitConfig, DitError, FlowState, LatentStats};
use crate::numerics::{gradients, randn, AdamW, Parameterized, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DitTrainConfig {
    pub model: DitConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_dir: f64,
    /// Probability of replacing a label by the null class.
    pub label_dropout: f64,
    pub lognorm: bool,
    /// Switch to uniform timesteps from this step on.
    pub lognorm_until_step: Option<usize>,
    pub seed: u64,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self {
            model: DitConfig::default(),
            steps: 2000,
            batch_size: 16,
            lr: 1e-4,
            lambda_dir: 1.0,
            label_dropout: 0.1,
            lognorm: true,
            lognorm_until_step: None,
            seed: 0,
        }
    }
}

impl DitTrainConfig {
    pub fn validate(&self) -> Result<(), DitError> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(DitError::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DitError::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(DitError::Config(format!("label_dropout {} must lie in [0, 1]", self.label_dropout)));
        }
        if !(self.lambda_dir >= 0.0 && self.lambda_dir.is_finite()) {
            return Err(DitError::Config(format!("lambda_dir {} must be >= 0", self.lambda_dir)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDit {
    pub model: DiTModel,
    pub stats: LatentStats,
    /// Total velocity loss per step.
    pub losses: Vec<f64>,
    /// Training times drawn per step, flattened.
    pub times: Vec<f64>,
}

/// Rectified-flow training on pre-extracted latents `[n, c, h, w]` with one
/// label per latent. Latents are standardized per channel first.
pub fn train_dit(latents: &Tensor, labels: &[usize], cfg: &DitTrainConfig) -> Result<TrainedDit, DitError> {
    cfg.validate()?;
    let s = latents.shape();
    if s.len() != 4 || s[0] == 0 || labels.len() != s[0] {
        return Err(DitError::Shape(format!("latents {s:?} with {} labels", labels.len())));
    }
    let mut mcfg = cfg.model;
    mcfg.channels = s[1];
    mcfg.grid = (s[2], s[3]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= mcfg.num_classes) {
        return Err(DitError::Config(format!("label {bad} outside {} classes", mcfg.num_classes)));
    }
    let stats = LatentStats::fit(latents)?;
    let x_all = stats.normalize(latents)?;
    let per = s[1] * s[2] * s[3];

    let mut model = DiTModel::new(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut times = Vec::with_capacity(cfg.steps * cfg.batch_size);

    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..s[0])).collect();
        let mut x0 = Vec::with_capacity(b * per);
        for &i in &idx {
            x0.extend_from_slice(&x_all.data()[i * per..(i + 1) * per]);
        }
        let shape = [b, s[1], s[2], s[3]];
        let x0 = Tensor::new(x0, &shape)?;
        let x1 = randn(&mut rng, &shape);
        let use_lognorm = cfg.lognorm && cfg.lognorm_until_step.is_none_or(|until| step < until);
        let t: Vec<f64> = (0..b)
            .map(|_| if use_lognorm { lognorm_sample_t(&mut rng) } else { uniform_sample_t(&mut rng) })
            .collect();
        let y: Vec<usize> = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < cfg.label_dropout {
                    mcfg.null_class()
                } else {
                    labels[i]
                }
            })
            .collect();
        let flow = FlowState::new(&x0, &x1, &t)?;
        let pred = model.forward(&flow.x_t, &t, &y)?;
        let (loss, _) = velocity_loss(&pred, &flow.v_target, cfg.lambda_dir)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(DitError::NonFinite { step });
        }
        let g = gradients(&loss)?;
        let mut grads = HashMap::new();
        model.visit_params(&mut |name, p| {
            grads.insert(name.to_string(), g.get_or_zeros(p));
        });
        opt.begin_step();
        let mut failed = None;
        model.visit_params_mut(&mut |name, p| {
            if failed.is_none() {
                if let Err(e) = opt.update(name, p, &grads[name]) {
                    failed = Some(e);
                }
            }
        });
        if let Some(e) = failed {
            return Err(e.into());
        }
        if step % 100 == 0 {
            log::info!("dit step {step}: loss {value:.4}");
        }
        losses.push(value);
        times.extend(t);
    }
    model.snap_to_f32();
    Ok(TrainedDit {
        model,
        stats,
        losses,
        times,
    })
}
