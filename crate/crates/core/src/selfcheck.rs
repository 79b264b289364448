//! Finite-difference gradient suite over the differentiable building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::lightningdit::{attention, rmsnorm, swiglu_ffn, velocity_loss, DiTModel, DitConfig, Linear};
use crate::numerics::{check_gradients, randn, GradCheckReport, NumericsError, Parameterized, Tensor};
use crate::tokenizer::{kl_loss, Posterior};
use crate::vfloss::{cosine_matrix, mcos_loss_batch, mdms_loss_batch, vf_terms_batch, Margins, Projection, VfConfig};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const DIT_TOLERANCE: f64 = 1e-3;
/// Inputs closer than this to a ReLU or |·| kink are redrawn.
pub const KINK_ZONE: f64 = 10.0 * STEP;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn lift<E: std::fmt::Display>(e: E) -> NumericsError {
    NumericsError::Invalid {
        op: "gradcheck",
        reason: e.to_string(),
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(), shape).expect("shape")
}

fn linear(w: &Tensor, b: &Tensor) -> Linear {
    Linear {
        weight: w.clone(),
        bias: Some(b.clone()),
    }
}

/// Distance of every margin argument to its kink, the diagonal of the
/// distance matrices excluded.
fn kink_clearance(z: &Tensor, zp: &Tensor, f: &Tensor, m1: f64, m2: f64) -> Result<f64, NumericsError> {
    let cos = zp.cosine_similarity(f, 2, crate::vfloss::NORM_EPS)?;
    let mut gap = cos.data().iter().map(|c| (1.0 - m1 - c).abs()).fold(f64::INFINITY, f64::min);
    let (cz, cf) = (cosine_matrix(z)?, cosine_matrix(f)?);
    let n = z.shape()[1];
    for (k, (a, b)) in cz.data().iter().zip(cf.data()).enumerate() {
        if (k / n) % n == k % n {
            continue;
        }
        let d = (a - b).abs();
        gap = gap.min(d).min((d - m2).abs());
    }
    Ok(gap)
}

/// Latents `[b, n, d_z]`, features `[b, n, d_f]` and a projection with every
/// margin argument outside the kink zone.
fn vf_inputs(rng: &mut impl Rng, m: &Margins) -> Result<(Tensor, Tensor, Tensor), NumericsError> {
    loop {
        let z = randn(rng, &[1, 16, 8]);
        let f = randn(rng, &[1, 16, 12]);
        let p = normal(rng, &[12, 8], 1.0 / 8f64.sqrt());
        let zp = z.linear(&p, None)?;
        if kink_clearance(&z, &zp, &f, m.m1, m.m2)? > KINK_ZONE {
            return Ok((z, f, p));
        }
    }
}

fn tiny_dit(rng: &mut impl Rng) -> Result<DiTModel, NumericsError> {
    let cfg = DitConfig {
        depth: 1,
        heads: 2,
        width: 16,
        patch: 1,
        channels: 4,
        grid: (2, 2),
        num_classes: 4,
    };
    let mut model = DiTModel::new(cfg, rng).map_err(lift)?;
    // Zero-initialized modulation would hide most of the graph from the check.
    model.visit_params_mut(&mut |_, p| {
        let fresh = normal(rng, p.shape(), 0.3);
        *p = Tensor::param(fresh.to_vec(), p.shape()).expect("shape");
    });
    Ok(model)
}

fn with_params(model: &DiTModel, params: &[Tensor]) -> DiTModel {
    let mut m = model.clone();
    let mut it = params.iter();
    m.visit_params_mut(&mut |_, p| *p = it.next().expect("param count").clone());
    m
}

/// Runs every case; the tiny DiT perturbs at most `dit_coords` entries per tensor.
pub fn run_suite(seed: u64, dit_coords: usize) -> Result<Vec<GradCase>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, tolerance, report| out.push(GradCase { name, tolerance, report });
    let margins = Margins::default();

    let (z, f, p) = vf_inputs(&mut rng, &margins)?;
    let r = check_gradients(
        |v| {
            let zp = v[0].linear(&v[1], None)?;
            mcos_loss_batch(&zp, &f, margins.m1).map_err(lift)
        },
        &[z.clone(), p.clone()],
        STEP,
        None,
    )?;
    push("mcos_loss", TOLERANCE, r);

    let r = check_gradients(|v| mdms_loss_batch(&v[0], &f, margins.m2).map_err(lift), std::slice::from_ref(&z), STEP, None)?;
    push("mdms_loss", TOLERANCE, r);

    let cfg = VfConfig::default();
    let w_frozen = 0.5 + rng.random::<f64>();
    let r = check_gradients(
        |v| {
            let proj = Projection::new(v[1].clone()).map_err(lift)?;
            let terms = vf_terms_batch(&v[0], &f, &proj, &cfg).map_err(lift)?;
            Ok(terms.raw()?.mul_scalar(terms.w_hyper * w_frozen))
        },
        &[z, p],
        STEP,
        None,
    )?;
    push("vf_loss_total", TOLERANCE, r);

    let mean = normal(&mut rng, &[2, 4, 2, 2], 1.0);
    let logvar = normal(&mut rng, &[2, 4, 2, 2], 0.7);
    let r = check_gradients(
        |v| {
            let post = Posterior::new(v[0].clone(), v[1].clone()).map_err(lift)?;
            kl_loss(&post).map_err(lift)
        },
        &[mean, logvar],
        STEP,
        None,
    )?;
    push("kl_loss", TOLERANCE, r);

    let pred = randn(&mut rng, &[3, 4, 2, 2]);
    let target = randn(&mut rng, &[3, 4, 2, 2]);
    let r = check_gradients(
        |v| Ok(velocity_loss(&v[0], &v[1], 1.0).map_err(lift)?.0),
        &[pred, target],
        STEP,
        None,
    )?;
    push("velocity_loss", TOLERANCE, r);

    let x = randn(&mut rng, &[2, 3, 16]);
    let (h, s) = (40, 0.25);
    let ffn: Vec<Tensor> = [[h, 16], [h, 1], [h, 16], [h, 1], [16, h], [16, 1]]
        .iter()
        .map(|&[a, b]| if b == 1 { normal(&mut rng, &[a], 0.1) } else { normal(&mut rng, &[a, b], s) })
        .collect();
    let mut inputs = vec![x];
    inputs.extend(ffn);
    let r = check_gradients(
        |v| {
            let y = swiglu_ffn(&v[0], &linear(&v[1], &v[2]), &linear(&v[3], &v[4]), &linear(&v[5], &v[6]));
            Ok(y.map_err(lift)?.square().sum())
        },
        &inputs,
        STEP,
        None,
    )?;
    push("swiglu_ffn", TOLERANCE, r);

    let x = randn(&mut rng, &[2, 3, 8]);
    let gain = normal(&mut rng, &[8], 1.0);
    let probe = randn(&mut rng, &[2, 3, 8]);
    let r = check_gradients(
        |v| Ok(rmsnorm(&v[0], &v[1]).map_err(lift)?.mul(&probe)?.sum()),
        &[x, gain],
        STEP,
        None,
    )?;
    push("rmsnorm", TOLERANCE, r);

    let x = randn(&mut rng, &[2, 4, 16]);
    let positions = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
    let inputs = vec![
        x,
        normal(&mut rng, &[48, 16], 0.25),
        normal(&mut rng, &[48], 0.1),
        normal(&mut rng, &[16, 16], 0.25),
        normal(&mut rng, &[16], 0.1),
    ];
    let probe = randn(&mut rng, &[2, 4, 16]);
    let r = check_gradients(
        |v| {
            let y = attention(&v[0], &linear(&v[1], &v[2]), &linear(&v[3], &v[4]), 2, &positions).map_err(lift)?;
            Ok(y.mul(&probe)?.sum())
        },
        &inputs,
        STEP,
        None,
    )?;
    push("attention", TOLERANCE, r);

    let model = tiny_dit(&mut rng)?;
    let mut inputs = vec![randn(&mut rng, &[2, 4, 2, 2])];
    model.visit_params(&mut |_, p| inputs.push(p.detach()));
    let t = [0.3, 0.7];
    let labels = [1, model.config.null_class()];
    let probe = randn(&mut rng, &[2, 4, 2, 2]);
    let r = check_gradients(
        |v| {
            let m = with_params(&model, &v[1..]);
            Ok(m.forward(&v[0], &t, &labels).map_err(lift)?.mul(&probe)?.sum())
        },
        &inputs,
        STEP,
        Some(dit_coords),
    )?;
    push("dit_tiny", DIT_TOLERANCE, r);

    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn render_table(cases: &[GradCase]) -> String {
    let mut s = format!("{:<16} {:>12} {:>10} {:>8}  result\n", "case", "max_rel_err", "tol", "coords");
    for c in cases {
        s.push_str(&format!(
            "{:<16} {:>12.3e} {:>10.0e} {:>8}  {}\n",
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.coords_checked,
            if c.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}
