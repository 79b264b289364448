//! One PASS/FAIL line per primary criterion. Pass criterion names as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- sampler`.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vavae_core::data::ImageSet;
use vavae_core::diagnostics::{analyze_latents, emit_report, read_csv, Bandwidth, MetricRow};
use vavae_core::foundation::{load_features, save_features, synthetic_features, FeatureSource};
use vavae_core::lightningdit::{euler_integrate, lognorm_sample_t, time_grid, train_dit, DitConfig, DitTrainConfig};
use vavae_core::numerics::{gradients_wrt, randn, Parameterized, Tensor};
use vavae_core::selfcheck::{render_table, run_suite};
use vavae_core::tokenizer::{
    latent_vectors, load_checkpoint, posterior_means, recon_loss, save_checkpoint, train_tokenizer,
    TokenizerConfig, TokenizerModel, TokenizerTrainConfig, TrainedTokenizer, VfHead,
};
use vavae_core::vfloss::{
    adaptive_weight, mcos_loss, mdms_loss, project_latent, vf_terms_batch, FeatureMap, LatentMap, Margins, Projection,
    VfConfig,
};

use common::{oracle_mcos, oracle_mdms};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

struct Criterion {
    name: &'static str,
    /// Fails by construction of the criterion itself; reported but does not fail the run.
    known_defect: bool,
    run: fn() -> Check,
}

const TABLE6_SEEDS: [u64; 3] = [0, 1, 2];
const TABLE6_IMAGES: usize = 512;
const TABLE6_EPOCHS: usize = 30;

fn synthetic_source() -> FeatureSource {
    FeatureSource::Synthetic {
        seed: 1,
        d_f: 64,
        patch: 8,
    }
}

fn params(m: &impl Parameterized) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    m.visit_params(&mut |n, t| {
        out.insert(n.to_string(), t.to_vec());
    });
    out
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_suite() -> Check {
    let t0 = Instant::now();
    let cases = run_suite(0, usize::MAX)?;
    let took = t0.elapsed();
    print!("{}", render_table(&cases));
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let ok = cases.iter().all(|c| c.passed()) && cases.len() == 9 && took < Duration::from_secs(120);
    Ok((ok, format!("{} cases, worst rel err {worst:.2e}, {}", cases.len(), secs(took))))
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let side = if case < 25 { 2 } else { 4 };
        let (d_z, d_f) = (rng.random_range(2..9), rng.random_range(2..17));
        let z = LatentMap::new(randn(&mut rng, &[side, side, d_z]))?;
        let f = FeatureMap::new(randn(&mut rng, &[side, side, d_f]), "acceptance")?;
        let p = Projection::new(randn(&mut rng, &[d_f, d_z]))?;
        let zp = project_latent(&z, &p)?;
        let (m1, m2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = mcos_loss(&zp, &f, m1)?.item();
        let b = mdms_loss(&z, &f, m2)?.item();
        worst = worst
            .max((a - oracle_mcos(&zp.values, &f.values, m1)).abs())
            .max((b - oracle_mdms(&z.values, &f.values, m2)).abs());
    }
    Ok((worst < 1e-12, format!("50 maps, max |Δ| {worst:.2e}")))
}

/// `[n, d, h, w]` → `[n, h·w, d]`.
fn tokens(z: &Tensor) -> Result<Tensor, Box<dyn std::error::Error>> {
    let s = z.shape();
    Ok(z.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])?)
}

fn adaptive_post_condition() -> Check {
    let data = ImageSet::synthetic(8, 32, 7)?;
    let cfg = TokenizerConfig::default();
    let mut worst: f64 = 0.0;
    for state in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + state);
        let mut model = TokenizerModel::new(cfg, &mut rng)?;
        // random state: every parameter jittered, the zero-initialized anchor included
        model.visit_params_mut(&mut |_, p| {
            let noise = randn(&mut rng, p.shape()).mul_scalar(0.05);
            *p = Tensor::param(p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(), p.shape()).unwrap();
        });
        let x = data.images.detach();
        let post = model.encode(&x)?;
        let z = post.sample(&mut rng)?;
        let l_rec = recon_loss(&x, &model.decode(&z)?)?.mul_scalar(1.0 / 8.0);
        let (gh, gw) = (z.shape()[2], z.shape()[3]);
        let feats = synthetic_features(&data.images, 1, 64, 32 / gh)?;
        let fb: Vec<Tensor> = feats.iter().map(FeatureMap::as_batch).collect::<Result<_, _>>()?;
        let fb = Tensor::concat(&fb, 0)?;
        assert_eq!(fb.shape()[1], gh * gw);
        let head = VfHead::new(state, 64, cfg.d_z)?;
        let terms = vf_terms_batch(&tokens(&z)?, &fb, &head.projection, &VfConfig::default())?;
        let raw = terms.raw()?;
        let w = adaptive_weight(&raw, &l_rec, model.anchor())?;
        if w.dead || w.value <= 1e-4 || w.value >= 1e4 {
            return Ok((false, format!("state {state}: weight clamped at {}", w.value)));
        }
        let weighted = raw.mul_scalar(w.value);
        let g_vf = gradients_wrt(&weighted, &[model.anchor()])?;
        let g_rec = gradients_wrt(&l_rec, &[model.anchor()])?;
        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((norm(&g_vf[0]) / norm(&g_rec[0]) - 1.0).abs());
    }
    Ok((worst <= 1e-6, format!("10 states, max |ratio − 1| {worst:.2e}")))
}

fn margin_one_is_identity() -> Check {
    let data = ImageSet::synthetic(32, 32, 2)?;
    let base = TokenizerTrainConfig {
        epochs: 2,
        vf: None,
        ..Default::default()
    };
    let plain = train_tokenizer(&data, None, &base)?;
    let vf = TokenizerTrainConfig {
        vf: Some(VfConfig {
            margins: Margins {
                m1: 1.0,
                m2: 1.0,
                ..Margins::default()
            },
            ..VfConfig::default()
        }),
        ..base
    };
    let aligned = train_tokenizer(&data, Some(&synthetic_source()), &vf)?;
    let same = params(&plain.model) == params(&aligned.model);
    let max_vf = aligned.steps.iter().map(|s| s.l_vf).fold(0.0, f64::max);
    let max_mcos = aligned.steps.iter().map(|s| s.l_mcos).fold(0.0, f64::max);
    Ok((
        same && max_vf == 0.0,
        format!("bit-identical {same}; max L_vf {max_vf:.3e}, max L_mcos {max_mcos:.3e} (relu(−cos) and relu(|Δcos|−1) are not identically zero)"),
    ))
}

fn margin_zero_dominates() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut min_gap = f64::INFINITY;
    for _ in 0..50 {
        let z = randn(&mut rng, &[2, 16, 8]);
        let f = randn(&mut rng, &[2, 16, 24]);
        let p = Projection::new(randn(&mut rng, &[24, 8]))?;
        let raw = |m1: f64, m2: f64| -> Result<f64, Box<dyn std::error::Error>> {
            let cfg = VfConfig {
                margins: Margins {
                    m1,
                    m2,
                    ..Margins::default()
                },
                ..VfConfig::default()
            };
            let t = vf_terms_batch(&z, &f, &p, &cfg)?;
            Ok(t.w_hyper * t.raw()?.item())
        };
        let d = Margins::default();
        min_gap = min_gap.min(raw(0.0, 0.0)? - raw(d.m1, d.m2)?);
    }
    Ok((min_gap >= 0.0, format!("50 inputs, min L_vf(0,0) − L_vf(default) {min_gap:.3e}")))
}

struct Table6Run {
    gini: f64,
    cv: f64,
    rec: f64,
    trained: TrainedTokenizer,
}

fn table6_run(data: &ImageSet, seed: u64, vf: bool) -> Result<Table6Run, Box<dyn std::error::Error>> {
    let cfg = TokenizerTrainConfig {
        epochs: TABLE6_EPOCHS,
        seed,
        model: TokenizerConfig { factor: 8, d_z: 32 },
        vf: vf.then(VfConfig::default),
        ..Default::default()
    };
    let src = synthetic_source();
    let trained = train_tokenizer(data, vf.then_some(&src), &cfg)?;
    let vectors = latent_vectors(&trained.model, &data.images, 64)?;
    let u = analyze_latents(&vectors, 4096, seed, Bandwidth::Scott)?;
    let rec = trained.log.last().expect("epochs > 0").losses.l_rec;
    Ok(Table6Run {
        gini: u.gini,
        cv: u.density_cv,
        rec,
        trained,
    })
}

fn table6_trend() -> Check {
    let t0 = Instant::now();
    let data = ImageSet::synthetic(TABLE6_IMAGES, 32, 0)?;
    let mut wins = 0;
    let mut worst_rec: f64 = f64::NEG_INFINITY;
    let mut lines = Vec::new();
    for seed in TABLE6_SEEDS {
        let off = table6_run(&data, seed, false)?;
        let on = table6_run(&data, seed, true)?;
        let degradation = on.rec / off.rec - 1.0;
        worst_rec = worst_rec.max(degradation);
        if on.gini < off.gini && on.cv < off.cv {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: gini {:.4}→{:.4} cv {:.4}→{:.4} rec {:.2}→{:.2}",
            off.gini, on.gini, off.cv, on.cv, off.rec, on.rec
        ));
        if seed == 0 {
            let means = posterior_means(&on.trained.model, &data.images, 64)?;
            DIT_LATENTS.with(|l| *l.borrow_mut() = Some(means));
        }
    }
    let took = t0.elapsed();
    for l in &lines {
        println!("  {l}");
    }
    let ok = wins == TABLE6_SEEDS.len() && worst_rec < 0.2 && took < Duration::from_secs(15 * 60);
    Ok((
        ok,
        format!("VF lower on both in {wins}/3 seeds, worst recon change {:+.1}%, {}", 100.0 * worst_rec, secs(took)),
    ))
}

fn sampler_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = randn(&mut rng, &[4, 8, 4, 4]);
    let x1 = randn(&mut rng, &[4, 8, 4, 4]);
    let v = Tensor::new(x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect(), x0.shape())?;
    let out = euler_integrate(&x1, &time_grid(250, 1.0), |_, _| Ok(v.clone()))?;
    let err = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let g = time_grid(250, 3.0);
    let monotone = g.windows(2).all(|w| w[1] < w[0]) && g.iter().all(|t| (0.0..=1.0).contains(t));
    let ends = g[0] == 1.0 && g[250] == 0.0;
    Ok((
        err < 1e-6 && monotone && ends,
        format!("max |x̂₀ − x₀| {err:.2e}; shift 3 grid monotone {monotone}, exact ends {ends}"),
    ))
}

fn lognorm_stats() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let t: Vec<f64> = (0..n).map(|_| lognorm_sample_t(&mut rng)).collect();
    let mean = t.iter().sum::<f64>() / n as f64;
    let mid = t.iter().filter(|&&v| v > 0.25 && v < 0.75).count() as f64 / n as f64;
    Ok((
        (mean - 0.5).abs() <= 0.02 && (mid - 0.728).abs() <= 0.01,
        format!("mean {mean:.4}, mass(0.25, 0.75) {mid:.4}"),
    ))
}

thread_local! {
    /// Seed-0 VF tokenizer latents, reused by the DiT criterion when the trend run went first.
    static DIT_LATENTS: std::cell::RefCell<Option<Tensor>> = const { std::cell::RefCell::new(None) };
}

fn dit_convergence() -> Check {
    let t0 = Instant::now();
    let data = ImageSet::synthetic(TABLE6_IMAGES, 32, 0)?;
    let latents = match DIT_LATENTS.with(|l| l.borrow().clone()) {
        Some(l) => l,
        None => {
            let cfg = TokenizerTrainConfig {
                epochs: TABLE6_EPOCHS,
                ..Default::default()
            };
            let tok = train_tokenizer(&data, Some(&synthetic_source()), &cfg)?;
            posterior_means(&tok.model, &data.images, 64)?
        }
    };
    let cfg = DitTrainConfig {
        steps: 2000,
        model: DitConfig {
            depth: 4,
            width: 128,
            ..Default::default()
        },
        ..Default::default()
    };
    let t1 = Instant::now();
    let a = train_dit(&latents, &data.labels, &cfg)?;
    let b = train_dit(&latents, &data.labels, &cfg)?;
    let per_run = t1.elapsed() / 2;
    let l = &a.losses;
    let first = l[..50].iter().sum::<f64>() / 50.0;
    let last = l[l.len() - 100..].iter().sum::<f64>() / 100.0;
    let ratio = last / first;
    let same = a.losses == b.losses && params(&a.model) == params(&b.model);
    Ok((
        ratio < 0.3 && same && per_run < Duration::from_secs(600),
        format!(
            "last-100 / first-50 mean loss {ratio:.3}, rerun identical {same}, {} per run ({} incl. latents)",
            secs(per_run),
            secs(t0.elapsed())
        ),
    ))
}

fn round_trips() -> Check {
    let dir = tempfile::tempdir()?;
    let data = ImageSet::synthetic(8, 32, 1)?;
    let cfg = TokenizerTrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let trained = train_tokenizer(&data, Some(&synthetic_source()), &cfg)?;
    let ck = dir.path().join("tok.vavk");
    save_checkpoint(&trained.model, trained.head.as_ref(), &ck)?;
    let back = load_checkpoint(&ck)?;
    let x = data.images.detach();
    let (a, b) = (trained.model.encode(&x)?, back.encode(&x)?);
    let ck_ok = a.mean.data() == b.mean.data() && a.logvar.data() == b.logvar.data();

    let feats = synthetic_features(&data.images, 3, 16, 8)?;
    let vf = dir.path().join("f.vfft");
    save_features(&feats, &vf)?;
    let loaded = load_features(&vf)?;
    let vf_ok = feats.len() == loaded.len()
        && feats.iter().zip(&loaded).all(|(p, q)| {
            p.values.data().iter().map(|v| *v as f32).eq(q.values.data().iter().map(|v| *v as f32))
                && p.source_tag == q.source_tag
        });

    let rows: Vec<MetricRow> = trained
        .steps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| [MetricRow::new(i, "l_rec", s.l_rec), MetricRow::new(i, "l_vf", s.l_vf)])
        .collect();
    let (csv, _) = emit_report(None, &rows, dir.path())?;
    let csv_ok = read_csv(&csv)? == rows;
    Ok((
        ck_ok && vf_ok && csv_ok,
        format!("checkpoint encode identical {ck_ok}, VFFT bit-exact {vf_ok}, CSV re-parse equal {csv_ok}"),
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "gradient_suite", known_defect: false, run: gradient_suite },
        Criterion { name: "oracle_equivalence", known_defect: false, run: oracle_equivalence },
        Criterion { name: "adaptive_weight_post_condition", known_defect: false, run: adaptive_post_condition },
        Criterion { name: "margin_one_bit_identical", known_defect: true, run: margin_one_is_identity },
        Criterion { name: "margin_zero_dominates_default", known_defect: false, run: margin_zero_dominates },
        Criterion { name: "table6_trend", known_defect: false, run: table6_trend },
        Criterion { name: "sampler_exactness", known_defect: false, run: sampler_exactness },
        Criterion { name: "lognorm_statistics", known_defect: false, run: lognorm_stats },
        Criterion { name: "dit_convergence", known_defect: false, run: dit_convergence },
        Criterion { name: "round_trips", known_defect: false, run: round_trips },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        let (ok, detail) = match (c.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if ok { "PASS" } else { "FAIL" };
        let note = if !ok && c.known_defect { " [criterion contradicts the loss definition; see README]" } else { "" };
        println!("{tag} {}: {detail}{note}", c.name);
        if !ok && !c.known_defect {
            hard_failures += 1;
        }
    }
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
