//! Latent uniformity statistics and reconstruction quality metrics.

mod pca;
mod quality;
mod report;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use pca::{project_2d, symmetric_eigen, Pca2};
pub use quality::{psnr, ssim, PSNR_CAP, SSIM_WINDOW};
pub use report::{emit_report, read_csv, render_svg, MetricRow, CSV_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("{0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero variance along axis {axis}; bandwidth undefined")]
    ZeroVariance { axis: usize },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    /// `n^(-1/6) · σ` per axis, σ the sample standard deviation.
    #[default]
    Scott,
    Fixed(f64),
}

/// Per-axis kernel widths used by [`kde_density`].
pub fn resolve_bandwidth(points: &[[f64; 2]], bw: Bandwidth) -> Result<[f64; 2], DiagnosticsError> {
    match bw {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok([h, h]),
        Bandwidth::Fixed(h) => Err(DiagnosticsError::Invalid(format!("bandwidth {h} must be positive"))),
        Bandwidth::Scott => {
            let n = points.len() as f64;
            let mut out = [0.0; 2];
            for (axis, o) in out.iter_mut().enumerate() {
                let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n;
                let var = points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                if !(var > 0.0) {
                    return Err(DiagnosticsError::ZeroVariance { axis });
                }
                *o = n.powf(-1.0 / 6.0) * var.sqrt();
            }
            Ok(out)
        }
    }
}

/// Gaussian product-kernel density at every sample, the sample itself included.
/// Points are evaluated in parallel; each sum runs in a fixed order.
pub fn kde_density(points: &[[f64; 2]], bw: Bandwidth) -> Result<(Vec<f64>, [f64; 2]), DiagnosticsError> {
    if points.len() < 2 {
        return Err(DiagnosticsError::Invalid(format!("KDE needs at least 2 points, got {}", points.len())));
    }
    let h = resolve_bandwidth(points, bw)?;
    let n = points.len() as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * h[0] * h[1] * n);
    let dens = points
        .par_iter()
        .map(|p| {
            points
                .iter()
                .map(|q| {
                    let dx = (p[0] - q[0]) / h[0];
                    let dy = (p[1] - q[1]) / h[1];
                    (-0.5 * (dx * dx + dy * dy)).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok((dens, h))
}

/// Spread statistics of a density sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformityReport {
    pub density_cv: f64,
    pub gini: f64,
    pub normalized_entropy: f64,
    pub n_points: usize,
    /// Kernel widths when the densities came from [`kde_density`].
    pub bandwidth: Option<[f64; 2]>,
}

/// Coefficient of variation (population std), Gini over ascending densities,
/// and histogram entropy over `⌈√n⌉` equal-width bins normalized by `ln B`.
/// A single occupied bin has entropy 0.
pub fn uniformity_metrics(densities: &[f64]) -> Result<UniformityReport, DiagnosticsError> {
    let n = densities.len();
    if n == 0 {
        return Err(DiagnosticsError::Invalid("no densities".into()));
    }
    if densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(DiagnosticsError::Invalid("densities must be finite and nonnegative".into()));
    }
    let total: f64 = densities.iter().sum();
    if total <= 0.0 {
        return Err(DiagnosticsError::Invalid("all densities are zero".into()));
    }
    let nf = n as f64;
    let mean = total / nf;
    let mut sorted = densities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let density_cv = if lo == hi {
        0.0
    } else {
        let var = densities.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / nf;
        var.sqrt() / mean
    };

    let gini = sorted
        .iter()
        .enumerate()
        // the coefficients sum to zero, so shifting by the minimum is exact algebra
        .map(|(i, d)| (2.0 * (i + 1) as f64 - nf - 1.0) * (d - lo))
        .sum::<f64>()
        / (nf * total);

    let bins = (nf.sqrt().ceil() as usize).max(1);
    let mut counts = vec![0usize; bins];
    for &d in densities {
        let b = if hi > lo {
            (((d - lo) / (hi - lo)) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[b.min(bins - 1)] += 1;
    }
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / nf;
            -p * p.ln()
        })
        .sum();
    let normalized_entropy = if bins > 1 { entropy / (bins as f64).ln() } else { 0.0 };

    Ok(UniformityReport {
        density_cv,
        gini,
        normalized_entropy,
        n_points: n,
        bandwidth: None,
    })
}

/// PCA → KDE → uniformity on at most `max_points` vectors (seeded subsample).
pub fn analyze_latents(
    vectors: &[Vec<f64>],
    max_points: usize,
    seed: u64,
    bw: Bandwidth,
) -> Result<UniformityReport, DiagnosticsError> {
    let chosen: Vec<Vec<f64>> = if vectors.len() > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, vectors.len(), max_points).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| vectors[i].clone()).collect()
    } else {
        vectors.to_vec()
    };
    analyze_embedding(&project_2d(&chosen)?, bw)
}

/// KDE uniformity of an existing 2D embedding.
pub fn analyze_embedding(points: &[[f64; 2]], bw: Bandwidth) -> Result<UniformityReport, DiagnosticsError> {
    let (dens, h) = kde_density(points, bw)?;
    let mut r = uniformity_metrics(&dens)?;
    r.bandwidth = Some(h);
    Ok(r)
}

/// Reads `x y` pairs, one per line; blank lines and `#` comments are skipped.
pub fn read_embedding(path: &Path) -> Result<Vec<[f64; 2]>, DiagnosticsError> {
    let text = std::fs::read_to_string(path).map_err(|e| DiagnosticsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| DiagnosticsError::Io {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", lineno + 1),
            })?;
        if vals.len() != 2 {
            return Err(DiagnosticsError::Io {
                path: path.display().to_string(),
                reason: format!("line {}: expected 2 values, got {}", lineno + 1, vals.len()),
            });
        }
        out.push([vals[0], vals[1]]);
    }
    Ok(out)
}
