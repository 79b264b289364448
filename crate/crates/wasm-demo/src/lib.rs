//! Browser bindings for three small explorations of the core crate: the
//! margin losses, the shifted sampling schedule and KDE uniformity.

use wasm_bindgen::prelude::*;

pub mod ops {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use vavae_core::diagnostics::{kde_density, uniformity_metrics, Bandwidth};
    use vavae_core::lightningdit::time_grid;
    use vavae_core::numerics::{randn, Tensor};
    use vavae_core::vfloss::{mcos_loss, mdms_loss, FeatureMap, LatentMap};

    fn msg<E: std::fmt::Display>(e: E) -> String {
        e.to_string()
    }

    /// Margin cosine loss of one 2-d token pair at each angle in `[0, π]`.
    pub fn mcos_curve(m1: f64, samples: usize) -> Result<Vec<f64>, String> {
        let samples = samples.max(2);
        let f = FeatureMap::new(Tensor::new(vec![1.0, 0.0], &[1, 1, 2]).map_err(msg)?, "axis").map_err(msg)?;
        (0..samples)
            .map(|k| {
                let theta = std::f64::consts::PI * k as f64 / (samples - 1) as f64;
                let z = Tensor::new(vec![theta.cos(), theta.sin()], &[1, 1, 2]).map_err(msg)?;
                let z = LatentMap::new(z).map_err(msg)?;
                Ok(mcos_loss(&z, &f, m1).map_err(msg)?.item())
            })
            .collect()
    }

    /// `[L_mcos, L_mdms]` for a random `side×side` feature map and a latent
    /// equal to it plus Gaussian noise of the given scale.
    pub fn vf_losses(seed: u64, side: usize, dim: usize, noise: f64, m1: f64, m2: f64) -> Result<Vec<f64>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&mut rng, &[side, side, dim]);
        let eps = randn(&mut rng, &[side, side, dim]);
        let z: Vec<f64> = f.data().iter().zip(eps.data()).map(|(a, b)| a + noise * b).collect();
        let z = LatentMap::new(Tensor::new(z, f.shape()).map_err(msg)?).map_err(msg)?;
        let f = FeatureMap::new(f, "random").map_err(msg)?;
        Ok(vec![
            mcos_loss(&z, &f, m1).map_err(msg)?.item(),
            mdms_loss(&z, &f, m2).map_err(msg)?.item(),
        ])
    }

    pub fn shifted_grid(steps: usize, shift: f64) -> Result<Vec<f64>, String> {
        if steps == 0 || !(shift > 0.0 && shift.is_finite()) {
            return Err("steps must be positive and shift > 0".into());
        }
        Ok(time_grid(steps, shift))
    }

    /// A point cloud mixing a uniform square with one Gaussian cluster holding
    /// the `cluster` fraction of points. Returns interleaved `x, y, density`
    /// triples followed by `[density_cv, gini, normalized_entropy]`.
    pub fn kde_uniformity(seed: u64, n: usize, cluster: f64) -> Result<Vec<f64>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n.max(3);
        let clustered = (cluster.clamp(0.0, 1.0) * n as f64).round() as usize;
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                if i < clustered {
                    let g = randn(&mut rng, &[2]);
                    [0.5 + 0.05 * g.data()[0], 0.5 + 0.05 * g.data()[1]]
                } else {
                    [rng.random::<f64>(), rng.random::<f64>()]
                }
            })
            .collect();
        let (dens, _) = kde_density(&pts, Bandwidth::Scott).map_err(msg)?;
        let u = uniformity_metrics(&dens).map_err(msg)?;
        let mut out: Vec<f64> = pts.iter().zip(&dens).flat_map(|(p, d)| [p[0], p[1], *d]).collect();
        out.extend([u.density_cv, u.gini, u.normalized_entropy]);
        Ok(out)
    }
}

fn exported(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mcos_curve(m1: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    exported(ops::mcos_curve(m1, samples))
}

#[wasm_bindgen]
pub fn vf_losses(seed: u64, side: usize, dim: usize, noise: f64, m1: f64, m2: f64) -> Result<Vec<f64>, JsError> {
    exported(ops::vf_losses(seed, side, dim, noise, m1, m2))
}

/// Sampler time grid from 1 down to 0.
#[wasm_bindgen]
pub fn shifted_grid(steps: usize, shift: f64) -> Result<Vec<f64>, JsError> {
    exported(ops::shifted_grid(steps, shift))
}

#[wasm_bindgen]
pub fn kde_uniformity(seed: u64, n: usize, cluster: f64) -> Result<Vec<f64>, JsError> {
    exported(ops::kde_uniformity(seed, n, cluster))
}
