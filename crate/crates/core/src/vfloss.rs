//! Vision-foundation alignment loss.
//!
//! Latents `Z` are projected to the foundation width (`Z' = W Z`) and pulled
//! towards frozen foundation features `F` by two hinge terms:
//!
//! * marginal cosine similarity, per location:
//!   `mean_ij ReLU(1 − m1 − cos(z'_ij, f_ij))`
//! * marginal distance-matrix similarity, over all location pairs:
//!   `mean_ij ReLU(|cos(z_i, z_j) − cos(f_i, f_j)| − m2)`
//!
//! The sum is rescaled by an adaptive weight (ratio of reconstruction and
//! alignment gradient norms at the last encoder convolution) and a fixed
//! hyper weight.

use std::fmt;
use std::str::FromStr;

use crate::numerics::{gradients_wrt, NumericsError, Tensor};

/// Added under the square root of every norm inside a cosine.
pub const NORM_EPS: f64 = 1e-12;
/// Vectors whose true norm falls below this are rejected.
pub const ZERO_NORM: f64 = 1e-8;
pub const ADAPTIVE_MIN: f64 = 1e-4;
pub const ADAPTIVE_MAX: f64 = 1e4;
/// Alignment gradient norms below this mean the alignment loss is dead.
pub const DEAD_GRAD: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum VfLossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{which}: zero-norm vector at batch {batch}, location {location}")]
    ZeroNorm {
        which: &'static str,
        batch: usize,
        location: usize,
    },
    #[error("grid mismatch: latent {latent:?} vs features {features:?}")]
    GridMismatch { latent: Vec<usize>, features: Vec<usize> },
    #[error("projection is {rows}x{cols} but latent has {d_z} channels")]
    ProjectionMismatch { rows: usize, cols: usize, d_z: usize },
    #[error("invalid margins: {0}")]
    InvalidMargins(String),
}

/// Latent grid `Z` of one image, stored `[h, w, d_z]`.
#[derive(Debug, Clone)]
pub struct LatentMap {
    pub values: Tensor,
}

impl LatentMap {
    pub fn new(values: Tensor) -> Result<Self, VfLossError> {
        if values.rank() != 3 || values.numel() == 0 {
            return Err(NumericsError::Invalid {
                op: "LatentMap",
                reason: format!("expected non-empty [h, w, d], got {:?}", values.shape()),
            }
            .into());
        }
        if !values.all_finite() {
            return Err(NumericsError::NonFinite("latent map".into()).into());
        }
        Ok(Self { values })
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// `[1, N, d]` view used by the batched kernels.
    pub fn as_batch(&self) -> Result<Tensor, NumericsError> {
        self.values.reshape(&[1, self.h() * self.w(), self.channels()])
    }
}

/// Frozen foundation features `F` of one image, stored `[h, w, d_f]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub source_tag: String,
}

impl FeatureMap {
    /// Gradient tracking is stripped: foundation features are never trained.
    pub fn new(values: Tensor, source_tag: impl Into<String>) -> Result<Self, VfLossError> {
        if values.rank() != 3 || values.numel() == 0 {
            return Err(NumericsError::Invalid {
                op: "FeatureMap",
                reason: format!("expected non-empty [h, w, d], got {:?}", values.shape()),
            }
            .into());
        }
        Ok(Self {
            values: values.detach(),
            source_tag: source_tag.into(),
        })
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn as_batch(&self) -> Result<Tensor, NumericsError> {
        self.values.reshape(&[1, self.h() * self.w(), self.channels()])
    }
}

/// Trainable `d_f × d_z` matrix mapping latents to the foundation width.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: Tensor,
}

impl Projection {
    pub fn new(weight: Tensor) -> Result<Self, VfLossError> {
        if weight.rank() != 2 {
            return Err(NumericsError::Invalid {
                op: "Projection",
                reason: format!("weight must be d_f x d_z, got {:?}", weight.shape()),
            }
            .into());
        }
        Ok(Self { weight })
    }

    pub fn d_f(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_z(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies `W` to the last axis of `[.., d_z]`.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor, VfLossError> {
        let d_z = *z.shape().last().unwrap_or(&0);
        if d_z != self.d_z() {
            return Err(VfLossError::ProjectionMismatch {
                rows: self.d_f(),
                cols: self.d_z(),
                d_z,
            });
        }
        Ok(z.linear(&self.weight, None)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    pub m1: f64,
    pub m2: f64,
    pub w_hyper: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            m1: 0.5,
            m2: 0.25,
            w_hyper: 0.1,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<(), VfLossError> {
        if !(0.0..=1.0).contains(&self.m1) || !(0.0..=1.0).contains(&self.m2) {
            return Err(VfLossError::InvalidMargins(format!("m1={} m2={} must lie in [0, 1]", self.m1, self.m2)));
        }
        if !(self.w_hyper >= 0.0 && self.w_hyper.is_finite()) {
            return Err(VfLossError::InvalidMargins(format!("w_hyper={} must be >= 0", self.w_hyper)));
        }
        Ok(())
    }
}

/// Which alignment terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    McosOnly,
    MdmsOnly,
    NoMargin,
}

impl Ablation {
    /// Effective `(m1, m2, w_hyper, use_mcos, use_mdms)`; single-term runs halve the hyper weight.
    pub fn resolve(self, m: &Margins) -> (f64, f64, f64, bool, bool) {
        match self {
            Ablation::Full => (m.m1, m.m2, m.w_hyper, true, true),
            Ablation::McosOnly => (m.m1, m.m2, m.w_hyper * 0.5, true, false),
            Ablation::MdmsOnly => (m.m1, m.m2, m.w_hyper * 0.5, false, true),
            Ablation::NoMargin => (0.0, 0.0, m.w_hyper, true, true),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::McosOnly => "mcos_only",
            Ablation::MdmsOnly => "mdms_only",
            Ablation::NoMargin => "no_margin",
        })
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "mcos_only" => Ok(Ablation::McosOnly),
            "mdms_only" => Ok(Ablation::MdmsOnly),
            "no_margin" => Ok(Ablation::NoMargin),
            other => Err(format!("unknown ablation '{other}' (full|mcos_only|mdms_only|no_margin)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VfConfig {
    pub margins: Margins,
    pub ablation: Ablation,
    /// Feed projected latents to the distance-matrix term instead of raw ones.
    pub mdms_on_projected: bool,
}

/// Scalar loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_mcos: f64,
    pub l_mdms: f64,
    pub l_vf: f64,
    pub w_adaptive: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.l_rec, self.l_kl, self.l_mcos, self.l_mdms, self.l_vf, self.w_adaptive]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_rec", self.l_rec),
            ("l_kl", self.l_kl),
            ("l_mcos", self.l_mcos),
            ("l_mdms", self.l_mdms),
            ("l_vf", self.l_vf),
            ("w_adaptive", self.w_adaptive),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_norms(which: &'static str, t: &Tensor) -> Result<(), VfLossError> {
    let s = t.shape();
    let (n, d) = (s[1], s[2]);
    for (row, v) in t.data().chunks(d).enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= ZERO_NORM) {
            return Err(VfLossError::ZeroNorm {
                which,
                batch: row / n,
                location: row % n,
            });
        }
    }
    Ok(())
}

fn check_grids(z: &Tensor, f: &Tensor) -> Result<(), VfLossError> {
    if z.rank() != 3 || f.rank() != 3 || z.shape()[..2] != f.shape()[..2] {
        return Err(VfLossError::GridMismatch {
            latent: z.shape().to_vec(),
            features: f.shape().to_vec(),
        });
    }
    Ok(())
}

/// Marginal cosine term over a batch: `z_proj`, `f` are `[b, n, d]`.
pub fn mcos_loss_batch(z_proj: &Tensor, f: &Tensor, m1: f64) -> Result<Tensor, VfLossError> {
    check_grids(z_proj, f)?;
    if z_proj.shape()[2] != f.shape()[2] {
        return Err(VfLossError::GridMismatch {
            latent: z_proj.shape().to_vec(),
            features: f.shape().to_vec(),
        });
    }
    check_norms("mcos latent", z_proj)?;
    check_norms("mcos feature", f)?;
    let cos = z_proj.cosine_similarity(f, 2, NORM_EPS)?;
    Ok(cos.neg().add_scalar(1.0 - m1).relu().mean())
}

/// Pairwise cosine matrix `[b, n, n]` of `[b, n, d]` rows.
pub fn cosine_matrix(x: &Tensor) -> Result<Tensor, NumericsError> {
    let norm = x.l2_norm(2, NORM_EPS)?;
    let s = x.shape();
    let unit = x.div(&norm.reshape(&[s[0], s[1], 1])?.broadcast_to(s)?)?;
    unit.bmm(&unit, true)
}

/// Marginal distance-matrix term over a batch: `z` is `[b, n, d_z]`, `f` is
/// `[b, n, d_f]` (channel counts may differ).
pub fn mdms_loss_batch(z: &Tensor, f: &Tensor, m2: f64) -> Result<Tensor, VfLossError> {
    check_grids(z, f)?;
    check_norms("mdms latent", z)?;
    check_norms("mdms feature", f)?;
    let cz = cosine_matrix(z)?;
    let cf = cosine_matrix(f)?;
    Ok(cz.sub(&cf)?.abs().add_scalar(-m2).relu().mean())
}

pub fn project_latent(z: &LatentMap, p: &Projection) -> Result<LatentMap, VfLossError> {
    LatentMap::new(p.apply(&z.values)?)
}

pub fn mcos_loss(z_proj: &LatentMap, f: &FeatureMap, m1: f64) -> Result<Tensor, VfLossError> {
    mcos_loss_batch(&z_proj.as_batch()?, &f.as_batch()?, m1)
}

pub fn mdms_loss(z: &LatentMap, f: &FeatureMap, m2: f64) -> Result<Tensor, VfLossError> {
    mdms_loss_batch(&z.as_batch()?, &f.as_batch()?, m2)
}

/// Detached gradient-norm ratio `‖∇L_rec‖ / ‖∇L_vf‖` at the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeight {
    pub value: f64,
    pub rec_grad_norm: f64,
    pub vf_grad_norm: f64,
    /// Alignment gradient vanished; `value` is the upper clamp.
    pub dead: bool,
}

impl AdaptiveWeight {
    pub fn from_norms(rec_grad_norm: f64, vf_grad_norm: f64) -> Self {
        if vf_grad_norm < DEAD_GRAD {
            log::warn!("alignment gradient norm {vf_grad_norm:e} at anchor; adaptive weight saturates");
            return Self {
                value: ADAPTIVE_MAX,
                rec_grad_norm,
                vf_grad_norm,
                dead: true,
            };
        }
        Self {
            value: (rec_grad_norm / vf_grad_norm).clamp(ADAPTIVE_MIN, ADAPTIVE_MAX),
            rec_grad_norm,
            vf_grad_norm,
            dead: false,
        }
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient-norm ratio of `l_rec` over `l_vf_raw` with respect to `anchor`.
pub fn adaptive_weight(l_vf_raw: &Tensor, l_rec: &Tensor, anchor: &Tensor) -> Result<AdaptiveWeight, VfLossError> {
    let g_rec = gradients_wrt(l_rec, &[anchor])?;
    let g_vf = gradients_wrt(l_vf_raw, &[anchor])?;
    Ok(AdaptiveWeight::from_norms(l2(&g_rec[0]), l2(&g_vf[0])))
}

/// The two alignment terms before weighting.
#[derive(Debug, Clone)]
pub struct VfTerms {
    pub mcos: Tensor,
    pub mdms: Tensor,
    /// Effective hyper weight after the ablation rule.
    pub w_hyper: f64,
}

impl VfTerms {
    /// `L_mcos + L_mdms` as one graph node.
    pub fn raw(&self) -> Result<Tensor, NumericsError> {
        self.mcos.add(&self.mdms)
    }
}

/// Alignment terms on batched `[b, n, d_z]` latents and `[b, n, d_f]` features.
pub fn vf_terms_batch(z: &Tensor, f: &Tensor, p: &Projection, cfg: &VfConfig) -> Result<VfTerms, VfLossError> {
    cfg.margins.validate()?;
    let (m1, m2, w_hyper, use_mcos, use_mdms) = cfg.ablation.resolve(&cfg.margins);
    let needs_proj = use_mcos || cfg.mdms_on_projected;
    let z_proj = if needs_proj { Some(p.apply(z)?) } else { None };
    let mcos = match (&z_proj, use_mcos) {
        (Some(zp), true) => mcos_loss_batch(zp, f, m1)?,
        _ => Tensor::scalar(0.0),
    };
    let mdms = if use_mdms {
        let zin = if cfg.mdms_on_projected { z_proj.as_ref().expect("projected") } else { z };
        mdms_loss_batch(zin, f, m2)?
    } else {
        Tensor::scalar(0.0)
    };
    Ok(VfTerms { mcos, mdms, w_hyper })
}

/// Weighted alignment loss with its scalar breakdown.
#[derive(Debug, Clone)]
pub struct VfLoss {
    /// `w_hyper · w_adaptive · (L_mcos + L_mdms)`, differentiable through the terms only.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub adaptive: AdaptiveWeight,
}

/// Full alignment loss for one latent/feature pair. `l_rec` and the latent
/// must both depend on `anchor`.
pub fn vf_loss_total(
    z: &LatentMap,
    f: &FeatureMap,
    p: &Projection,
    cfg: &VfConfig,
    l_rec: &Tensor,
    anchor: &Tensor,
) -> Result<VfLoss, VfLossError> {
    if z.h() != f.h() || z.w() != f.w() {
        return Err(VfLossError::GridMismatch {
            latent: z.values.shape().to_vec(),
            features: f.values.shape().to_vec(),
        });
    }
    let terms = vf_terms_batch(&z.as_batch()?, &f.as_batch()?, p, cfg)?;
    let raw = terms.raw()?;
    let adaptive = adaptive_weight(&raw, l_rec, anchor)?;
    let total = raw.mul_scalar(terms.w_hyper * adaptive.value);
    let breakdown = LossBreakdown {
        l_rec: l_rec.item(),
        l_kl: 0.0,
        l_mcos: terms.mcos.item(),
        l_mdms: terms.mdms.item(),
        l_vf: total.item(),
        w_adaptive: adaptive.value,
    };
    Ok(VfLoss {
        total,
        breakdown,
        adaptive,
    })
}
