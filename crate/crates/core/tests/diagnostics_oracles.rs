use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vavae_core::diagnostics::{
    emit_report, kde_density, psnr, read_csv, render_svg, resolve_bandwidth, ssim, symmetric_eigen, uniformity_metrics,
    Bandwidth, MetricRow, Pca2, UniformityReport,
};
use vavae_core::numerics::{randn, Tensor};

fn cloud(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // anisotropic so the top eigenvalues are well separated
    (0..n)
        .map(|_| (0..d).map(|k| rng.random_range(-1.0..1.0) * (d - k) as f64).collect())
        .collect()
}

#[test]
fn symmetric_eigen_agrees_with_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 7;
    let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
        }
    }
    let (values, vectors) = symmetric_eigen(&a, n);
    let mut want: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &a)).eigenvalues.iter().copied().collect();
    want.sort_by(|x, y| y.total_cmp(x));
    for (g, w) in values.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
    for col in 0..n {
        for row in 0..n {
            let av: f64 = (0..n).map(|k| a[row * n + k] * vectors[k * n + col]).sum();
            assert!((av - values[col] * vectors[row * n + col]).abs() < 1e-9);
        }
    }
}

#[test]
fn pca_axes_match_reference_decomposition() {
    let pts = cloud(2, 300, 5);
    let pca = Pca2::fit(&pts).unwrap();
    let (n, d) = (pts.len(), 5);
    let mean: Vec<f64> = (0..d).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, k| pts[i][k] - mean[k]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (slot, &idx) in order.iter().take(2).enumerate() {
        assert!((pca.variances[slot] - eig.eigenvalues[idx]).abs() < 1e-9);
        let dot: f64 = (0..d).map(|k| pca.axes[slot][k] * eig.eigenvectors[(k, idx)]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "axis {slot} off by {dot}");
    }
    let projected: Vec<[f64; 2]> = pts.iter().map(|p| pca.transform(p)).collect();
    let var0 = projected.iter().map(|p| p[0] * p[0]).sum::<f64>() / n as f64;
    assert!((var0 - pca.variances[0]).abs() < 1e-9);
}

fn kde_oracle(points: &[[f64; 2]]) -> Vec<f64> {
    let n = points.len() as f64;
    let std = |axis: usize| {
        let m = points.iter().map(|p| p[axis]).sum::<f64>() / n;
        (points.iter().map(|p| (p[axis] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let factor = n.powf(-1.0 / 6.0);
    let (hx, hy) = (factor * std(0), factor * std(1));
    points
        .iter()
        .map(|p| {
            let mut s = 0.0;
            for q in points {
                let zx = (p[0] - q[0]) / hx;
                let zy = (p[1] - q[1]) / hy;
                s += (-0.5 * zx * zx).exp() / (hx * (2.0 * std::f64::consts::PI).sqrt())
                    * (-0.5 * zy * zy).exp()
                    / (hy * (2.0 * std::f64::consts::PI).sqrt());
            }
            s / n
        })
        .collect()
}

#[test]
fn kde_matches_product_kernel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<[f64; 2]> = (0..200).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0)]).collect();
    let (got, _) = kde_density(&pts, Bandwidth::Scott).unwrap();
    for (g, w) in got.iter().zip(kde_oracle(&pts)) {
        assert!((g - w).abs() <= 1e-12 * w.max(1e-300));
    }
}

#[test]
fn kde_symmetry_and_outlier() {
    let square = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
    let (d, _) = kde_density(&square, Bandwidth::Scott).unwrap();
    assert!(d.iter().all(|v| (v - d[0]).abs() < 1e-15));
    assert!(uniformity_metrics(&d).unwrap().gini < 1e-12);

    let mut pts: Vec<[f64; 2]> = (0..20).map(|i| [(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1]).collect();
    pts.push([9.0, 9.0]);
    let (d, _) = kde_density(&pts, Bandwidth::Fixed(0.3)).unwrap();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(min, d[20]);
}

#[test]
fn scott_bandwidth_uses_sample_std() {
    let pts = [[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
    let h = resolve_bandwidth(&pts, Bandwidth::Scott).unwrap();
    let s = (5.0f64 / 3.0).sqrt();
    assert!((h[0] - 4f64.powf(-1.0 / 6.0) * s).abs() < 1e-15);
    assert!((h[1] - 2.0 * h[0]).abs() < 1e-15);
}

fn gini_oracle(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let total: f64 = x.iter().sum();
    let mut diff = 0.0;
    for a in x {
        for b in x {
            diff += (a - b).abs();
        }
    }
    diff / (2.0 * n * total)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn gini_and_cv_match_oracles(d in prop::collection::vec(1e-6..5.0f64, 2..60), c in 0.01..100.0f64) {
        let r = uniformity_metrics(&d).unwrap();
        prop_assert!((r.gini - gini_oracle(&d)).abs() < 1e-12);
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let cv = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt() / mean;
        prop_assert!((r.density_cv - cv).abs() < 1e-10);
        prop_assert!((0.0..1.0).contains(&r.gini));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r.normalized_entropy));

        let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
        let s = uniformity_metrics(&scaled).unwrap();
        prop_assert!((s.gini - r.gini).abs() < 1e-10);
        prop_assert!((s.density_cv - r.density_cv).abs() < 1e-9);

        let mut rev = d.clone();
        rev.reverse();
        prop_assert!((uniformity_metrics(&rev).unwrap().gini - r.gini).abs() < 1e-12);
    }
}

#[test]
fn csv_reparse_equals_rows() {
    let losses: Vec<MetricRow> = (0..5)
        .flat_map(|e| {
            [
                MetricRow::new(e, "l_rec", 1.0 / (e as f64 + 3.0)),
                MetricRow::new(e, "l_vf", 0.1 * std::f64::consts::PI.powi(e as i32)),
            ]
        })
        .collect();
    let report = UniformityReport {
        density_cv: 0.123_456_789_012_345_67,
        gini: 0.1,
        normalized_entropy: 0.9,
        n_points: 4096,
        bandwidth: Some([0.3, 1e-7]),
    };
    let dir = tempfile::tempdir().unwrap();
    let (csv, svg) = emit_report(Some(&report), &losses, dir.path()).unwrap();
    let rows = read_csv(&csv).unwrap();
    assert_eq!(rows[..losses.len()], losses[..]);
    let by_name = |m: &str| rows.iter().find(|r| r.metric == m).unwrap();
    assert_eq!(by_name("density_cv").value, report.density_cv);
    assert_eq!(by_name("bandwidth_y").value, 1e-7);
    assert_eq!(by_name("n_points").epoch, 4);

    let text = std::fs::read_to_string(svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(lines, 2);
}

#[test]
fn svg_escapes_metric_names() {
    let rows = [MetricRow::new(0, "a<b&\"c\"", 1.0), MetricRow::new(1, "a<b&\"c\"", 2.0)];
    let svg = render_svg(&rows);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert!(doc.descendants().any(|n| n.text().is_some_and(|t| t.contains("a<b&\"c\""))));
}

fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..=h - 8 {
        for j in 0..=w - 8 {
            let win = |p: &[f64]| -> Vec<f64> { (0..64).map(|k| p[(i + k / 8) * w + j + k % 8]).collect() };
            let (x, y) = (win(a), win(b));
            let mx = x.iter().sum::<f64>() / 64.0;
            let my = y.iter().sum::<f64>() / 64.0;
            let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 64.0;
            let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 64.0;
            let cxy = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / 64.0;
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cxy + c2) / (vx + vy + c2);
            total += l * cs;
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn psnr_and_ssim_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[2, 10, 12]).mul_scalar(0.4);
    let noise = randn(&mut rng, &[2, 10, 12]).mul_scalar(0.1);
    let y = x.add(&noise).unwrap();
    let mse = noise.data().iter().map(|v| v * v).sum::<f64>() / 240.0;
    let want = 10.0 * (4.0 / mse).log10();
    assert!((psnr(&x, &y, 2.0).unwrap() - want).abs() < 1e-10);

    let per_plane: f64 = (0..2)
        .map(|c| ssim_oracle(&x.data()[c * 120..(c + 1) * 120], &y.data()[c * 120..(c + 1) * 120], 10, 12, 2.0))
        .sum::<f64>()
        / 2.0;
    assert!((ssim(&x, &y, 2.0).unwrap() - per_plane).abs() < 1e-10);
    let flipped = Tensor::new(x.data().iter().map(|v| -v).collect(), x.shape()).unwrap();
    let s_noisy = ssim(&x, &y, 2.0).unwrap();
    assert!(s_noisy < 1.0 && ssim(&x, &flipped, 2.0).unwrap() < s_noisy);
}
