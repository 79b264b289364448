use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{kl_loss, recon_loss, TokenizerConfig, TokenizerError, TokenizerModel};
use crate::data::ImageSet;
use crate::foundation::{align_grids, load_features, stack_maps, synthetic_features, FeatureSource};
use crate::numerics::{gradients, gradients_wrt, randn_param, AdamW, Parameterized, Tensor};
use crate::vfloss::{l2, AdaptiveWeight, FeatureMap, LossBreakdown, Projection, VfConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerTrainConfig {
    pub model: TokenizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w_kl: f64,
    pub seed: u64,
    /// `None` trains without the alignment loss.
    pub vf: Option<VfConfig>,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            model: TokenizerConfig::default(),
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            w_kl: 1e-6,
            seed: 0,
            vf: Some(VfConfig::default()),
        }
    }
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TokenizerError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TokenizerError::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.w_kl >= 0.0 && self.w_kl.is_finite()) {
            return Err(TokenizerError::Config(format!("w_kl {} must be >= 0", self.w_kl)));
        }
        if let Some(vf) = &self.vf {
            vf.margins.validate()?;
        }
        Ok(())
    }
}

/// Trainable projection `W` mapping latents into the feature space.
#[derive(Debug, Clone)]
pub struct VfHead {
    pub projection: Projection,
}

impl VfHead {
    pub fn new(seed: u64, d_f: usize, d_z: usize) -> Result<Self, TokenizerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6a);
        let w = randn_param(&mut rng, &[d_f, d_z], 1.0 / (d_z as f64).sqrt());
        Ok(Self {
            projection: Projection::new(w)?,
        })
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainedTokenizer {
    pub model: TokenizerModel,
    pub head: Option<VfHead>,
    pub log: Vec<EpochLog>,
    /// Per-step breakdowns, in order.
    pub steps: Vec<LossBreakdown>,
}

/// Feature maps on the `(gh, gw)` latent grid, one per dataset image.
pub fn resolve_features(
    source: &FeatureSource,
    data: &ImageSet,
    grid: (usize, usize),
) -> Result<Vec<FeatureMap>, TokenizerError> {
    let maps = match source {
        FeatureSource::Synthetic { seed, d_f, patch } => synthetic_features(&data.images, *seed, *d_f, *patch)?,
        FeatureSource::File { path } => load_features(path)?,
    };
    if maps.len() != data.len() {
        return Err(TokenizerError::Shape(format!(
            "{} feature maps for {} images",
            maps.len(),
            data.len()
        )));
    }
    maps.iter()
        .map(|m| Ok(align_grids(m, grid.0, grid.1)?))
        .collect()
}

/// `[n, d, h, w]` → `[n, h·w, d]`.
fn to_tokens(z: &Tensor) -> Result<Tensor, TokenizerError> {
    let s = z.shape();
    Ok(z.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])?)
}

fn add_into(acc: &mut HashMap<String, Vec<f64>>, name: &str, g: Vec<f64>) {
    match acc.get_mut(name) {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => {
            acc.insert(name.to_string(), g);
        }
    }
}

/// Minimizes `L_rec + w_kl·L_kl + L_vf` with AdamW. Reconstruction and KL are
/// sum losses averaged over the batch. The adaptive weight is recomputed every
/// step from the anchor gradients of `L_rec` and of the unweighted alignment terms.
pub fn train_tokenizer(
    data: &ImageSet,
    foundation: Option<&FeatureSource>,
    cfg: &TokenizerTrainConfig,
) -> Result<TrainedTokenizer, TokenizerError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TokenizerError::Config("dataset is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TokenizerModel::new(cfg.model, &mut init_rng)?;
    let grid = model.latent_grid(data.size(), data.size())?;

    let vf = match (&cfg.vf, foundation) {
        (Some(vf), Some(src)) => {
            let feats = resolve_features(src, data, grid)?;
            let d_f = feats[0].channels();
            Some((*vf, feats, VfHead::new(cfg.seed, d_f, cfg.model.d_z)?))
        }
        (Some(_), None) => {
            return Err(TokenizerError::Config("alignment enabled but no foundation source given".into()));
        }
        (None, _) => None,
    };
    let (vf_cfg, feats, mut head) = match vf {
        Some((c, f, h)) => (Some(c), f, Some(h)),
        None => (None, Vec::new(), None),
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut opt = AdamW::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let b = idx.len() as f64;
            let x = data.batch(idx);
            let post = model.encode(&x)?;
            let z = post.sample(&mut noise_rng)?;
            let x_hat = model.decode(&z)?;
            let l_rec = recon_loss(&x, &x_hat)?.mul_scalar(1.0 / b);
            let l_kl = kl_loss(&post)?.mul_scalar(1.0 / b);

            let g_rec = gradients(&l_rec)?;
            let mut rest = l_kl.mul_scalar(cfg.w_kl);
            let mut bd = LossBreakdown {
                l_rec: l_rec.item(),
                l_kl: l_kl.item(),
                ..Default::default()
            };
            if let (Some(vfc), Some(h)) = (&vf_cfg, &head) {
                let fb = stack_maps(&idx.iter().map(|&i| &feats[i]).collect::<Vec<_>>())?;
                let terms = crate::vfloss::vf_terms_batch(&to_tokens(&z)?, &fb, &h.projection, vfc)?;
                let raw = terms.raw()?;
                let g_vf = gradients_wrt(&raw, &[model.anchor()])?;
                let w = AdaptiveWeight::from_norms(l2(&g_rec.get_or_zeros(model.anchor())), l2(&g_vf[0]));
                let l_vf = raw.mul_scalar(terms.w_hyper * w.value);
                bd.l_mcos = terms.mcos.item();
                bd.l_mdms = terms.mdms.item();
                bd.l_vf = l_vf.item();
                bd.w_adaptive = w.value;
                rest = rest.add(&l_vf)?;
            }
            if let Some(term) = bd.first_non_finite() {
                return Err(TokenizerError::NonFinite { term, epoch, step });
            }
            let g_rest = gradients(&rest)?;

            let mut grads = HashMap::new();
            model.visit_params(&mut |name, p| {
                let mut g = g_rec.get_or_zeros(p);
                if let Some(r) = g_rest.get(p) {
                    g.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads, name, g);
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
            if let Some(h) = head.as_mut() {
                let mut w = h.projection.weight.clone();
                opt.update("vf.projection", &mut w, &g_rest.get_or_zeros(&h.projection.weight))?;
                h.projection = Projection::new(w)?;
            }

            for (acc, v) in [
                (&mut sum.l_rec, bd.l_rec),
                (&mut sum.l_kl, bd.l_kl),
                (&mut sum.l_mcos, bd.l_mcos),
                (&mut sum.l_mdms, bd.l_mdms),
                (&mut sum.l_vf, bd.l_vf),
                (&mut sum.w_adaptive, bd.w_adaptive),
            ] {
                *acc += v;
            }
            count += 1;
            steps.push(bd);
        }
        let c = count as f64;
        let mean = LossBreakdown {
            l_rec: sum.l_rec / c,
            l_kl: sum.l_kl / c,
            l_mcos: sum.l_mcos / c,
            l_mdms: sum.l_mdms / c,
            l_vf: sum.l_vf / c,
            w_adaptive: sum.w_adaptive / c,
        };
        log::info!(
            "epoch {epoch}: l_rec {:.4} l_kl {:.4} l_mcos {:.4} l_mdms {:.4} l_vf {:.4} w_adaptive {:.4}",
            mean.l_rec,
            mean.l_kl,
            mean.l_mcos,
            mean.l_mdms,
            mean.l_vf,
            mean.w_adaptive
        );
        log.push(EpochLog { epoch, losses: mean });
    }

    model.snap_to_f32();
    if let Some(h) = head.as_mut() {
        let w = &h.projection.weight;
        let snapped = w.data().iter().map(|&v| v as f32 as f64).collect();
        h.projection = Projection::new(Tensor::param(snapped, w.shape())?)?;
    }
    Ok(TrainedTokenizer { model, head, log, steps })
}

/// Posterior means `[n, d_z, gh, gw]`, encoded `batch` images at a time.
pub fn posterior_means(model: &TokenizerModel, images: &Tensor, batch: usize) -> Result<Tensor, TokenizerError> {
    let n = images.shape()[0];
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let x = images.detach().narrow(0, start, len)?;
        chunks.push(model.encode(&x)?.mean.detach());
        start += len;
    }
    Ok(Tensor::concat(&chunks, 0)?.detach())
}

/// Posterior means as one `d_z` vector per latent location, images in order.
pub fn latent_vectors(model: &TokenizerModel, images: &Tensor, batch: usize) -> Result<Vec<Vec<f64>>, TokenizerError> {
    let n = images.shape()[0];
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let x = images.detach().narrow(0, start, len)?;
        let mean = to_tokens(&model.encode(&x)?.mean)?;
        let d = mean.shape()[2];
        out.extend(mean.data().chunks(d).map(<[f64]>::to_vec));
        start += len;
    }
    Ok(out)
}
