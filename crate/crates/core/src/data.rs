//! Procedural image dataset: linear colour gradients with rectangles and
//! circles drawn on top, one class per shape mixture.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{put_u32, read_file, write_file, ByteReader, FormatError, GridFile};
use crate::numerics::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"VIMG";
pub const NUM_CLASSES: usize = 4;
const CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

/// Images `[n, 3, size, size]` in `[-1, 1]` with one class label each.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub tag: String,
}

fn class_name(c: usize) -> &'static str {
    ["rectangle", "circle", "rectangle+circle", "two-circles"][c]
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn gradient(size: usize, a: [f64; 3], b: [f64; 3], angle: f64) -> Self {
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 / (size - 1).max(1) as f64 - 0.5) * dx + (y as f64 / (size - 1).max(1) as f64 - 0.5) * dy;
                let t = (u + 0.75) / 1.5;
                px.push([0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t));
            }
        }
        Self { size, px }
    }

    fn fill(&mut self, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * self.size + x] = color;
                }
            }
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))
}

fn draw_rect(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = c.size as f64;
    let (w, h) = (rng.random_range(0.2..0.6) * s, rng.random_range(0.2..0.6) * s);
    let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
    let col = color(rng);
    c.fill(col, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
}

fn draw_circle(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = c.size as f64;
    let r = rng.random_range(0.12..0.3) * s;
    let (cx, cy) = (rng.random_range(r..s - r), rng.random_range(r..s - r));
    let col = color(rng);
    c.fill(col, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
}

impl ImageSet {
    /// Deterministic in `(n, size, seed)`.
    pub fn synthetic(n: usize, size: usize, seed: u64) -> Result<Self, DataError> {
        if n == 0 {
            return Err(DataError::Invalid("dataset needs at least one image".into()));
        }
        if size < 4 {
            return Err(DataError::Invalid(format!("image size {size} too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; n * CHANNELS * size * size];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % NUM_CLASSES;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mut canvas = Canvas::gradient(size, color(&mut rng), color(&mut rng), angle);
            match label {
                0 => draw_rect(&mut canvas, &mut rng),
                1 => draw_circle(&mut canvas, &mut rng),
                2 => {
                    draw_rect(&mut canvas, &mut rng);
                    draw_circle(&mut canvas, &mut rng);
                }
                _ => {
                    draw_circle(&mut canvas, &mut rng);
                    draw_circle(&mut canvas, &mut rng);
                }
            }
            let base = i * CHANNELS * size * size;
            for (p, rgb) in canvas.px.iter().enumerate() {
                for ch in 0..CHANNELS {
                    // storage precision is f32
                    data[base + ch * size * size + p] = rgb[ch].clamp(-1.0, 1.0) as f32 as f64;
                }
            }
            labels.push(label);
        }
        Ok(Self {
            images: Tensor::new(data, &[n, CHANNELS, size, size]).expect("sized above"),
            labels,
            tag: format!("synthetic-shapes seed={seed} classes={}", (0..NUM_CLASSES).map(class_name).collect::<Vec<_>>().join(",")),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Stacks the selected images into `[k, 3, size, size]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = CHANNELS * self.size() * self.size();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(data, &[idx.len(), CHANNELS, self.size(), self.size()]).expect("sized")
    }

    pub fn encode(&self) -> Vec<u8> {
        let (n, s) = (self.len(), self.size());
        let x = self.images.data();
        let mut values = Vec::with_capacity(x.len());
        for i in 0..n {
            for p in 0..s * s {
                for c in 0..CHANNELS {
                    values.push(x[(i * CHANNELS + c) * s * s + p] as f32);
                }
            }
        }
        let grid = GridFile {
            n,
            h: s,
            w: s,
            d: CHANNELS,
            tag: self.tag.clone(),
            values,
        };
        let mut out = grid.encode(IMAGE_MAGIC);
        for &l in &self.labels {
            put_u32(&mut out, l as u32);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes);
        let g = GridFile::decode(&mut r, IMAGE_MAGIC)?;
        if g.d != CHANNELS || g.h != g.w {
            return Err(FormatError::Invalid {
                offset: 12,
                reason: format!("expected square RGB images, got {}x{}x{}", g.h, g.w, g.d),
            }
            .into());
        }
        let mut labels = Vec::with_capacity(g.n);
        for _ in 0..g.n {
            labels.push(r.u32("labels")? as usize);
        }
        let s = g.h;
        let mut data = vec![0.0; g.values.len()];
        for i in 0..g.n {
            for p in 0..s * s {
                for c in 0..CHANNELS {
                    data[(i * CHANNELS + c) * s * s + p] = g.values[(i * s * s + p) * CHANNELS + c] as f64;
                }
            }
        }
        Ok(Self {
            images: Tensor::new(data, &[g.n, CHANNELS, s, s]).expect("sized"),
            labels,
            tag: g.tag,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(write_file(path, &self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::decode(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = ImageSet::synthetic(8, 16, 3).unwrap().encode();
        let b = ImageSet::synthetic(8, 16, 3).unwrap().encode();
        assert_eq!(a, b);
        assert_ne!(a, ImageSet::synthetic(8, 16, 4).unwrap().encode());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(ImageSet::synthetic(0, 32, 0).is_err());
    }

    #[test]
    fn decode_restores_images_and_labels() {
        let set = ImageSet::synthetic(5, 8, 1).unwrap();
        let back = ImageSet::decode(&set.encode()).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.images.data(), set.images.data());
    }
}
