//! Frozen alignment targets.
//!
//! The synthetic source flattens non-overlapping pixel patches, maps them
//! through a seeded orthonormal projection and L2-normalizes each location.
//! Features of real backbones arrive as `VFFT` files produced offline.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::{read_file, write_file, ByteReader, FormatError, GridFile};
use crate::numerics::{randn, Tensor};
use crate::vfloss::{FeatureMap, VfLossError};

pub const FEATURE_MAGIC: &[u8; 4] = b"VFFT";

#[derive(Debug, thiserror::Error)]
pub enum FoundationError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Map(#[from] VfLossError),
    #[error("image side {side} not divisible by patch {patch}")]
    Indivisible { side: usize, patch: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Where alignment features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    Synthetic { seed: u64, d_f: usize, patch: usize },
    File { path: std::path::PathBuf },
}

/// Seeded random projection with orthonormal rows (`P Pᵀ = I`) when
/// `d_f ≤ d_in`, orthonormal columns otherwise.
#[derive(Debug, Clone)]
pub struct PatchProjection {
    /// `[d_f, d_in]`, row-major
    pub matrix: Vec<f64>,
    pub d_f: usize,
    pub d_in: usize,
}

impl PatchProjection {
    pub fn new(seed: u64, d_f: usize, d_in: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let (rows, cols) = if d_f <= d_in { (d_f, d_in) } else { (d_in, d_f) };
        let g = randn(&mut rng, &[rows, cols]).to_vec();
        // modified Gram-Schmidt over the rows of g
        let mut q = g;
        for i in 0..rows {
            for j in 0..i {
                let dot: f64 = (0..cols).map(|k| q[i * cols + k] * q[j * cols + k]).sum();
                for k in 0..cols {
                    q[i * cols + k] -= dot * q[j * cols + k];
                }
            }
            let norm = (0..cols).map(|k| q[i * cols + k].powi(2)).sum::<f64>().sqrt();
            for k in 0..cols {
                q[i * cols + k] /= norm;
            }
        }
        let matrix = if d_f <= d_in {
            q
        } else {
            // transpose: d_f × d_in with orthonormal columns
            let mut t = vec![0.0; d_f * d_in];
            for i in 0..rows {
                for k in 0..cols {
                    t[k * d_in + i] = q[i * cols + k];
                }
            }
            t
        };
        Self { matrix, d_f, d_in }
    }
}

/// Synthetic features for `[n, c, H, W]` images (or a single `[c, H, W]`
/// image), one map per image on the `(H/patch) × (W/patch)` grid.
pub fn synthetic_features(images: &Tensor, seed: u64, d_f: usize, patch: usize) -> Result<Vec<FeatureMap>, FoundationError> {
    let batched = match images.rank() {
        4 => images.clone(),
        3 => {
            let s = images.shape();
            images.reshape(&[1, s[0], s[1], s[2]]).map_err(VfLossError::from)?
        }
        _ => return Err(FoundationError::Invalid(format!("expected image tensor, got {:?}", images.shape()))),
    };
    let s = batched.shape();
    let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || d_f == 0 {
        return Err(FoundationError::Invalid("patch and d_f must be positive".into()));
    }
    for side in [hh, ww] {
        if side % patch != 0 {
            return Err(FoundationError::Indivisible { side, patch });
        }
    }
    let (gh, gw) = (hh / patch, ww / patch);
    let d_in = c * patch * patch;
    let proj = PatchProjection::new(seed, d_f, d_in);
    let x = batched.data();
    let tag = format!("synthetic seed={seed} d_f={d_f} patch={patch}");
    let mut maps = Vec::with_capacity(n);
    let mut flat = vec![0.0; d_in];
    for b in 0..n {
        let mut out = Vec::with_capacity(gh * gw * d_f);
        for gi in 0..gh {
            for gj in 0..gw {
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let (y, xx) = (gi * patch + dy, gj * patch + dx);
                            flat[(ch * patch + dy) * patch + dx] = x[((b * c + ch) * hh + y) * ww + xx];
                        }
                    }
                }
                let v: Vec<f64> = (0..d_f)
                    .map(|r| (0..d_in).map(|k| proj.matrix[r * d_in + k] * flat[k]).sum())
                    .collect();
                let norm = (v.iter().map(|a| a * a).sum::<f64>() + 1e-24).sqrt();
                out.extend(v.iter().map(|a| a / norm));
            }
        }
        let t = Tensor::new(out, &[gh, gw, d_f]).map_err(VfLossError::from)?;
        maps.push(FeatureMap::new(t, tag.clone())?);
    }
    Ok(maps)
}

/// Serializes maps of identical geometry to the `VFFT` wire format.
pub fn encode_features(maps: &[FeatureMap]) -> Result<Vec<u8>, FoundationError> {
    let first = maps.first().ok_or_else(|| FoundationError::Invalid("no feature maps to save".into()))?;
    let (h, w, d) = (first.h(), first.w(), first.channels());
    let mut values = Vec::with_capacity(maps.len() * h * w * d);
    for m in maps {
        if (m.h(), m.w(), m.channels()) != (h, w, d) {
            return Err(FoundationError::Invalid(format!(
                "mixed geometry: {}x{}x{} vs {h}x{w}x{d}",
                m.h(),
                m.w(),
                m.channels()
            )));
        }
        values.extend(m.values.data().iter().map(|&v| v as f32));
    }
    Ok(GridFile {
        n: maps.len(),
        h,
        w,
        d,
        tag: first.source_tag.clone(),
        values,
    }
    .encode(FEATURE_MAGIC))
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureMap>, FoundationError> {
    let mut r = ByteReader::new(bytes);
    let g = GridFile::decode(&mut r, FEATURE_MAGIC)?;
    if r.remaining() != 0 {
        return Err(FormatError::Invalid {
            offset: r.offset(),
            reason: format!("{} trailing bytes after payload", r.remaining()),
        }
        .into());
    }
    let per = g.h * g.w * g.d;
    (0..g.n)
        .map(|i| {
            let data = g.values[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
            let t = Tensor::new(data, &[g.h, g.w, g.d]).map_err(VfLossError::from)?;
            Ok(FeatureMap::new(t, g.tag.clone())?)
        })
        .collect()
}

pub fn save_features(maps: &[FeatureMap], path: &Path) -> Result<(), FoundationError> {
    Ok(write_file(path, &encode_features(maps)?)?)
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureMap>, FoundationError> {
    decode_features(&read_file(path)?)
}

/// Bilinear resize over the grid with corners aligned; a no-op when the size
/// already matches.
pub fn align_grids(f: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap, FoundationError> {
    if target_h == 0 || target_w == 0 {
        return Err(FoundationError::Invalid(format!("target grid {target_h}x{target_w} is empty")));
    }
    let (h, w, d) = (f.h(), f.w(), f.channels());
    if (h, w) == (target_h, target_w) {
        return Ok(f.clone());
    }
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        if dst == 1 {
            (src - 1) as f64 / 2.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let x = f.values.data();
    let mut out = Vec::with_capacity(target_h * target_w * d);
    for i in 0..target_h {
        let yi = coord(i, h, target_h);
        let (y0, ty) = (yi.floor() as usize, yi - yi.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..target_w {
            let xj = coord(j, w, target_w);
            let (x0, tx) = (xj.floor() as usize, xj - xj.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..d {
                let at = |r: usize, q: usize| x[(r * w + q) * d + c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let t = Tensor::new(out, &[target_h, target_w, d]).map_err(VfLossError::from)?;
    Ok(FeatureMap::new(t, f.source_tag.clone())?)
}

/// `[n, h·w, d_f]` stack of maps for the batched loss kernels.
pub fn stack_maps(maps: &[&FeatureMap]) -> Result<Tensor, FoundationError> {
    let first = maps.first().ok_or_else(|| FoundationError::Invalid("empty feature batch".into()))?;
    let (n, d) = (first.h() * first.w(), first.channels());
    let mut data = Vec::with_capacity(maps.len() * n * d);
    for m in maps {
        data.extend_from_slice(m.values.data());
    }
    Ok(Tensor::new(data, &[maps.len(), n, d]).map_err(VfLossError::from)?)
}
