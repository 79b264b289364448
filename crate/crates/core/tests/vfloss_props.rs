mod common;

use common::{oracle_mcos, oracle_mdms, oracle_project};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vavae_core::numerics::{gradients_wrt, randn, Tensor};
use vavae_core::vfloss::{
    adaptive_weight, mcos_loss, mdms_loss, project_latent, vf_loss_total, Ablation, FeatureMap, LatentMap, Margins,
    Projection, VfConfig,
};

fn maps(rng: &mut ChaCha8Rng, side: usize, d_z: usize, d_f: usize) -> (LatentMap, FeatureMap) {
    let z = LatentMap::new(randn(rng, &[side, side, d_z])).unwrap();
    let f = FeatureMap::new(randn(rng, &[side, side, d_f]), "test").unwrap();
    (z, f)
}

#[test]
fn losses_match_double_loop_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let side = if case % 2 == 0 { 2 } else { 4 };
        let (z, f) = maps(&mut rng, side, 3, 5);
        let w = randn(&mut rng, &[5, 3]);
        let zp = project_latent(&z, &Projection::new(w.clone()).unwrap()).unwrap();
        let m1 = rng.random_range(0.0..1.0);
        let m2 = rng.random_range(0.0..1.0);
        let a = mcos_loss(&zp, &f, m1).unwrap().item();
        let b = mdms_loss(&z, &f, m2).unwrap().item();
        worst = worst
            .max((a - oracle_mcos(&zp.values, &f.values, m1)).abs())
            .max((b - oracle_mdms(&z.values, &f.values, m2)).abs());
        let proj = oracle_project(&z.values, &w);
        for (x, y) in zp.values.data().iter().zip(&proj) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn projection_identity_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (z, f) = maps(&mut rng, 2, 3, 3);
    let eye = Tensor::new(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
    let id = project_latent(&z, &Projection::new(eye.clone()).unwrap()).unwrap();
    assert_eq!(id.values.data(), z.values.data());
    let twice = project_latent(&z, &Projection::new(eye.mul_scalar(2.0)).unwrap()).unwrap();
    let (a, b) = (mcos_loss(&id, &f, 0.5).unwrap().item(), mcos_loss(&twice, &f, 0.5).unwrap().item());
    assert!((a - b).abs() < 1e-12);
    assert!(Projection::new(randn(&mut rng, &[3, 4])).unwrap().apply(&z.values).is_err());
}

#[test]
fn mdms_closed_form_example() {
    // z_i = sqrt(0.7)·e_i + sqrt(0.3)·e_5 has pairwise cosine 0.3; one-hot f has 0
    let (a, b) = (0.7f64.sqrt(), 0.3f64.sqrt());
    let mut zv = vec![0.0; 4 * 5];
    let mut fv = vec![0.0; 4 * 5];
    for i in 0..4 {
        zv[i * 5 + i] = a;
        zv[i * 5 + 4] = b;
        fv[i * 5 + i] = 1.0;
    }
    let z = LatentMap::new(Tensor::new(zv, &[2, 2, 5]).unwrap()).unwrap();
    let f = FeatureMap::new(Tensor::new(fv, &[2, 2, 5]).unwrap(), "onehot").unwrap();
    let l = mdms_loss(&z, &f, 0.25).unwrap().item();
    assert!((l - 0.0375).abs() < 1e-12, "{l}");
    assert!((l - oracle_mdms(&z.values, &f.values, 0.25)).abs() < 1e-12);
}

/// A latent that depends on `anchor`, plus a reconstruction-like loss on it.
fn anchored(rng: &mut ChaCha8Rng, side: usize, d_z: usize) -> (Tensor, LatentMap, Tensor) {
    let anchor = Tensor::param(randn(rng, &[d_z, d_z]).to_vec(), &[d_z, d_z]).unwrap();
    let x = randn(rng, &[side, side, d_z]);
    let z = x.linear(&anchor, None).unwrap();
    let l_rec = z.sub(&randn(rng, &[side, side, d_z])).unwrap().abs().sum();
    (anchor, LatentMap::new(z).unwrap(), l_rec)
}

#[test]
fn full_loss_matches_component_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let (anchor, z, l_rec) = anchored(&mut rng, 4, 8);
        let f = FeatureMap::new(randn(&mut rng, &[4, 4, 16]), "t").unwrap();
        let p = Projection::new(randn(&mut rng, &[16, 8])).unwrap();
        let cfg = VfConfig::default();
        let out = vf_loss_total(&z, &f, &p, &cfg, &l_rec, &anchor).unwrap();
        let zp = p.apply(&z.values).unwrap();
        let m = cfg.margins;
        let oracle = m.w_hyper
            * out.adaptive.value
            * (oracle_mcos(&zp, &f.values, m.m1) + oracle_mdms(&z.values, &f.values, m.m2));
        assert!((out.total.item() - oracle).abs() < 1e-10);
        assert!(out.breakdown.all_finite());

        let nm = VfConfig {
            ablation: Ablation::NoMargin,
            ..cfg
        };
        let loose = vf_loss_total(&z, &f, &p, &nm, &l_rec, &anchor).unwrap();
        assert!(loose.breakdown.l_mcos >= out.breakdown.l_mcos);
        assert!(loose.breakdown.l_mdms >= out.breakdown.l_mdms);
    }
}

#[test]
fn aligned_inputs_give_zero_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (anchor, z, l_rec) = anchored(&mut rng, 2, 4);
    let f = FeatureMap::new(z.values.detach(), "self").unwrap();
    let eye = Tensor::new((0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect(), &[4, 4]).unwrap();
    let out = vf_loss_total(&z, &f, &Projection::new(eye).unwrap(), &VfConfig::default(), &l_rec, &anchor).unwrap();
    assert_eq!(out.total.item(), 0.0);
}

#[test]
fn adaptive_weight_absorbs_loss_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (anchor, z, l_rec) = anchored(&mut rng, 4, 6);
    let f = FeatureMap::new(randn(&mut rng, &[4, 4, 9]), "t").unwrap();
    let p = Projection::new(randn(&mut rng, &[9, 6])).unwrap();
    let zp = project_latent(&z, &p).unwrap();
    let raw = mcos_loss(&zp, &f, 0.5).unwrap().add(&mdms_loss(&z, &f, 0.25).unwrap()).unwrap();
    let mut products = Vec::new();
    for c in [1.0, 7.3] {
        let scaled = raw.mul_scalar(c);
        let w = adaptive_weight(&scaled, &l_rec, &anchor).unwrap();
        let g = gradients_wrt(&scaled.mul_scalar(w.value), &[&anchor]).unwrap().remove(0);
        products.push(g);
        if c == 1.0 {
            let g_rec = gradients_wrt(&l_rec, &[&anchor]).unwrap().remove(0);
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ratio = n(&products[0]) / n(&g_rec);
            assert!((ratio - 1.0).abs() < 1e-6, "{ratio}");
        }
    }
    for (a, b) in products[0].iter().zip(&products[1]) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn arb_map(side: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![-3.0..-0.1f64, 0.1..3.0f64],
        side * side * d,
    )
}

fn tensor(v: Vec<f64>, side: usize, d: usize) -> Tensor {
    Tensor::new(v, &[side, side, d]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_nonnegative_and_bounded(z in arb_map(3, 4), f in arb_map(3, 4), m1 in 0.0..1.0f64, m2 in 0.0..1.0f64) {
        let z = LatentMap::new(tensor(z, 3, 4)).unwrap();
        let f = FeatureMap::new(tensor(f, 3, 4), "p").unwrap();
        let a = mcos_loss(&z, &f, m1).unwrap().item();
        let b = mdms_loss(&z, &f, m2).unwrap().item();
        prop_assert!((0.0..=2.0 - m1 + 1e-12).contains(&a));
        prop_assert!(b >= 0.0);
    }

    #[test]
    fn mdms_symmetric(z in arb_map(2, 5), f in arb_map(2, 5), m2 in 0.0..1.0f64) {
        let (zt, ft) = (tensor(z, 2, 5), tensor(f, 2, 5));
        let ab = mdms_loss(&LatentMap::new(zt.clone()).unwrap(), &FeatureMap::new(ft.clone(), "p").unwrap(), m2).unwrap().item();
        let ba = mdms_loss(&LatentMap::new(ft).unwrap(), &FeatureMap::new(zt, "p").unwrap(), m2).unwrap().item();
        prop_assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn scale_invariance(z in arb_map(2, 3), f in arb_map(2, 3), s in prop::collection::vec(0.1..10.0f64, 4)) {
        let zt = tensor(z.clone(), 2, 3);
        let scaled: Vec<f64> = z.iter().enumerate().map(|(k, v)| v * s[k / 3]).collect();
        let zs = tensor(scaled, 2, 3);
        let f = FeatureMap::new(tensor(f, 2, 3), "p").unwrap();
        // exact only up to the 1e-12 guard inside each norm
        let a = mcos_loss(&LatentMap::new(zt.clone()).unwrap(), &f, 0.5).unwrap().item();
        let b = mcos_loss(&LatentMap::new(zs.clone()).unwrap(), &f, 0.5).unwrap().item();
        prop_assert!((a - b).abs() < 1e-9);
        let a = mdms_loss(&LatentMap::new(zt).unwrap(), &f, 0.25).unwrap().item();
        let b = mdms_loss(&LatentMap::new(zs).unwrap(), &f, 0.25).unwrap().item();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn mdms_orthogonal_invariance(z in arb_map(2, 2), f in arb_map(2, 3), theta in 0.0..std::f64::consts::TAU) {
        let (c, s) = (theta.cos(), theta.sin());
        let rot = Tensor::new(vec![c, -s, s, c], &[2, 2]).unwrap();
        let zt = tensor(z, 2, 2);
        let f = FeatureMap::new(tensor(f, 2, 3), "p").unwrap();
        let a = mdms_loss(&LatentMap::new(zt.clone()).unwrap(), &f, 0.1).unwrap().item();
        let b = mdms_loss(&LatentMap::new(zt.linear(&rot, None).unwrap()).unwrap(), &f, 0.1).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_zone(f in arb_map(2, 4), noise in prop::collection::vec(-0.05..0.05f64, 16)) {
        // small perturbations keep every cosine above 1 − m1 and every gap below m2
        let z: Vec<f64> = f.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let z = LatentMap::new(tensor(z, 2, 4)).unwrap();
        let f = FeatureMap::new(tensor(f, 2, 4), "p").unwrap();
        let zb = z.as_batch().unwrap();
        let fb = f.as_batch().unwrap();
        let min_cos = zb.cosine_similarity(&fb, 2, 1e-12).unwrap().data().iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(min_cos >= 0.6);
        prop_assert_eq!(mcos_loss(&z, &f, 0.5).unwrap().item(), 0.0);
        prop_assert_eq!(mdms_loss(&z, &f, 0.9).unwrap().item(), 0.0);
    }

    #[test]
    fn margins_validate_range(m1 in -1.0..2.0f64, m2 in -1.0..2.0f64) {
        let ok = (0.0..=1.0).contains(&m1) && (0.0..=1.0).contains(&m2);
        prop_assert_eq!(Margins { m1, m2, w_hyper: 0.1 }.validate().is_ok(), ok);
    }
}
