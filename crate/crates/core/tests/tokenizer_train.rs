use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vavae_core::data::ImageSet;
use vavae_core::foundation::FeatureSource;
use vavae_core::numerics::{Parameterized, Tensor};
use vavae_core::tokenizer::{
    kl_loss, load_checkpoint, recon_loss, sample_latent, save_checkpoint, train_tokenizer, Posterior,
    TokenizerConfig, TokenizerModel, TokenizerTrainConfig,
};
use vavae_core::vfloss::{Margins, VfConfig};

fn params(m: &impl Parameterized) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    m.visit_params(&mut |n, t| {
        out.insert(n.to_string(), t.to_vec());
    });
    out
}

fn synthetic_source() -> FeatureSource {
    FeatureSource::Synthetic {
        seed: 1,
        d_f: 64,
        patch: 8,
    }
}

#[test]
fn single_image_is_memorized() {
    let one = ImageSet::synthetic(1, 32, 3).unwrap();
    let cfg = TokenizerTrainConfig {
        epochs: 300,
        batch_size: 1,
        lr: 1e-3,
        vf: None,
        ..Default::default()
    };
    let r = train_tokenizer(&one, None, &cfg).unwrap();
    let (first, last) = (r.steps[0].l_rec, r.steps.last().unwrap().l_rec);
    assert!(last < 0.05 * first, "recon {first} -> {last}");
}

#[test]
fn wider_latent_reconstructs_better() {
    let data = ImageSet::synthetic(512, 32, 0).unwrap();
    let finals: Vec<f64> = [16, 32]
        .iter()
        .map(|&d_z| {
            let cfg = TokenizerTrainConfig {
                epochs: 10,
                vf: None,
                model: TokenizerConfig { factor: 8, d_z },
                ..Default::default()
            };
            train_tokenizer(&data, None, &cfg).unwrap().log.last().unwrap().losses.l_rec
        })
        .collect();
    assert!(finals[1] < finals[0], "d_z=16 {} vs d_z=32 {}", finals[0], finals[1]);
}

#[test]
fn alignment_gradient_reaches_encoder() {
    let data = ImageSet::synthetic(16, 32, 5).unwrap();
    let src = synthetic_source();
    let run = |epochs: usize, vf: Option<VfConfig>| {
        let cfg = TokenizerTrainConfig {
            epochs,
            vf,
            ..Default::default()
        };
        params(&train_tokenizer(&data, vf.map(|_| &src), &cfg).unwrap().model)
    };
    // one step: only the zero-initialized output conv sees any gradient yet
    let (a, b) = (run(1, None), run(1, Some(VfConfig::default())));
    assert_ne!(a["enc.out.weight"], b["enc.out.weight"]);
    let (a, b) = (run(3, None), run(3, Some(VfConfig::default())));
    for name in a.keys().filter(|n| n.starts_with("enc.") && n.ends_with("conv.weight")) {
        assert_ne!(a[name], b[name], "{name} unchanged by the alignment term");
    }
}

#[test]
fn zero_alignment_weight_leaves_trajectory_bit_identical() {
    let data = ImageSet::synthetic(32, 32, 2).unwrap();
    let base = TokenizerTrainConfig {
        epochs: 2,
        vf: None,
        ..Default::default()
    };
    let plain = train_tokenizer(&data, None, &base).unwrap();
    let zero = TokenizerTrainConfig {
        vf: Some(VfConfig {
            margins: Margins {
                w_hyper: 0.0,
                ..Margins::default()
            },
            ..VfConfig::default()
        }),
        ..base
    };
    let aligned = train_tokenizer(&data, Some(&synthetic_source()), &zero).unwrap();
    assert_eq!(params(&plain.model), params(&aligned.model));
    for (a, b) in plain.steps.iter().zip(&aligned.steps) {
        assert_eq!(a.l_rec, b.l_rec);
        assert_eq!(b.l_vf, 0.0);
    }
}

#[test]
fn training_requires_features_when_aligned() {
    let data = ImageSet::synthetic(4, 32, 0).unwrap();
    assert!(train_tokenizer(&data, None, &TokenizerTrainConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trip_encodes_identically() {
    let data = ImageSet::synthetic(8, 32, 1).unwrap();
    let cfg = TokenizerTrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let trained = train_tokenizer(&data, Some(&synthetic_source()), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tok.vavk");
    save_checkpoint(&trained.model, trained.head.as_ref(), &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    let x = data.images.detach();
    let (a, b) = (trained.model.encode(&x).unwrap(), back.encode(&x).unwrap());
    assert_eq!(a.mean.data(), b.mean.data());
    assert_eq!(a.logvar.data(), b.logvar.data());
    assert_eq!(params(&trained.model), params(&back));
}

#[test]
fn reparameterized_variance_matches() {
    let logvar = 0.7;
    let p = Posterior::new(Tensor::full(&[1, 1, 1, 1], 0.3), Tensor::full(&[1, 1, 1, 1], logvar)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| p.sample(&mut rng).unwrap().item()).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / logvar.exp() - 1.0).abs() < 0.03, "{var}");
    assert!((mean - 0.3).abs() < 0.02);
}

#[test]
fn seeded_sampling_repeats() {
    let model = TokenizerModel::new(TokenizerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = ImageSet::synthetic(1, 32, 0).unwrap().images;
    let post = model.encode(&x).unwrap();
    let a = sample_latent(&post, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = sample_latent(&post, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a.values.data(), b.values.data());
    assert_eq!((a.h(), a.w(), a.channels()), (4, 4, 32));
}

fn kl_oracle(mean: &[f64], logvar: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mean.len() {
        let lv = logvar[i].clamp(-30.0, 20.0);
        s += 0.5 * (mean[i] * mean[i] + lv.exp() - 1.0 - lv);
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_matches_loop_and_is_nonnegative(
        mean in prop::collection::vec(-3.0..3.0f64, 24),
        logvar in prop::collection::vec(-40.0..25.0f64, 24),
    ) {
        let p = Posterior::new(Tensor::new(mean.clone(), &[1, 6, 2, 2]).unwrap(), Tensor::new(logvar.clone(), &[1, 6, 2, 2]).unwrap()).unwrap();
        let kl = kl_loss(&p).unwrap().item();
        let want = kl_oracle(&mean, &logvar);
        prop_assert!((kl - want).abs() <= 1e-10 * want.abs().max(1.0));
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn recon_matches_loop(x in prop::collection::vec(-1.0..1.0f64, 12), y in prop::collection::vec(-1.0..1.0f64, 12)) {
        let want: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        let got = recon_loss(&Tensor::new(x, &[1, 3, 2, 2]).unwrap(), &Tensor::new(y, &[1, 3, 2, 2]).unwrap()).unwrap().item();
        prop_assert!((got - want).abs() < 1e-12);
    }
}
