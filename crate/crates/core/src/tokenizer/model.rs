use rand::{Rng, SeedableRng};

use super::{Posterior, TokenizerError, LOGVAR_MAX, LOGVAR_MIN};
use crate::io::TensorTable;
use crate::numerics::{const_param, randn_param, NumericsError, Parameterized, Tensor};

const GROUPS: usize = 8;
const GN_EPS: f64 = 1e-6;

/// Convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self {
            weight: randn_param(rng, &[c_out, c_in, k, k], (2.0 / fan_in).sqrt()),
            bias: const_param(&[c_out], 0.0),
            stride,
            pad: k / 2,
        }
    }

    fn zeroed(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: const_param(&[c_out, c_in, 1, 1], 0.0),
            bias: const_param(&[c_out], 0.0),
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl GroupNorm {
    fn new(c: usize) -> Self {
        Self {
            gamma: const_param(&[c], 1.0),
            beta: const_param(&[c], 0.0),
        }
    }

    /// GroupNorm followed by SiLU.
    fn forward_silu(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        Ok(x.group_norm(GROUPS, &self.gamma, &self.beta, GN_EPS)?.silu())
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    /// Spatial downsampling factor, a power of two.
    pub factor: usize,
    pub d_z: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { factor: 8, d_z: 32 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.factor < 2 || !self.factor.is_power_of_two() {
            return Err(TokenizerError::Config(format!("factor {} must be a power of two >= 2", self.factor)));
        }
        if self.d_z == 0 {
            return Err(TokenizerError::Config("d_z must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    /// Encoder widths per downsampling stage: 32, 64, 128, … capped at 256.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.stages()).map(|i| (32usize << i).min(256)).collect()
    }
}

/// Convolutional KL-VAE: stride-2 encoder stages, a zero-initialized 1×1
/// head emitting `mean ‖ logvar`, and a mirrored conv + nearest-upsample decoder.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pub config: TokenizerConfig,
    enc: Vec<(Conv, GroupNorm)>,
    /// Last encoder convolution; its weight anchors the adaptive weight.
    enc_out: Conv,
    dec_in: (Conv, GroupNorm),
    dec: Vec<(Conv, GroupNorm)>,
    dec_out: Conv,
}

impl TokenizerModel {
    pub fn new(config: TokenizerConfig, rng: &mut impl Rng) -> Result<Self, TokenizerError> {
        config.validate()?;
        let widths = config.widths();
        let mut enc = Vec::new();
        let mut c_in = 3;
        for &w in &widths {
            enc.push((Conv::new(rng, c_in, w, 3, 2), GroupNorm::new(w)));
            c_in = w;
        }
        let top = *widths.last().expect("at least one stage");
        let enc_out = Conv::zeroed(top, 2 * config.d_z);
        let dec_in = (Conv::new(rng, config.d_z, top, 3, 1), GroupNorm::new(top));
        let mut dec = Vec::new();
        let mut c = top;
        for i in (0..widths.len()).rev() {
            let out = if i > 0 { widths[i - 1] } else { widths[0] / 2 };
            dec.push((Conv::new(rng, c, out, 3, 1), GroupNorm::new(out)));
            c = out;
        }
        let dec_out = Conv::new(rng, c, 3, 3, 1);
        Ok(Self {
            config,
            enc,
            enc_out,
            dec_in,
            dec,
            dec_out,
        })
    }

    /// Weight of the final encoder convolution.
    pub fn anchor(&self) -> &Tensor {
        &self.enc_out.weight
    }

    pub fn latent_grid(&self, h: usize, w: usize) -> Result<(usize, usize), TokenizerError> {
        let f = self.config.factor;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(TokenizerError::Indivisible { h, w, factor: f });
        }
        Ok((h / f, w / f))
    }

    /// `[n, 3, H, W]` → posterior over `[n, d_z, H/f, W/f]`.
    pub fn encode(&self, x: &Tensor) -> Result<Posterior, TokenizerError> {
        if x.rank() != 4 || x.shape()[1] != 3 {
            return Err(TokenizerError::Shape(format!("expected [n, 3, H, W], got {:?}", x.shape())));
        }
        self.latent_grid(x.shape()[2], x.shape()[3])?;
        let mut h = x.clone();
        for (conv, norm) in &self.enc {
            h = norm.forward_silu(&conv.forward(&h)?)?;
        }
        let moments = self.enc_out.forward(&h)?;
        let d = self.config.d_z;
        let mean = moments.narrow(1, 0, d)?;
        let logvar = moments.narrow(1, d, d)?.clamp(LOGVAR_MIN, LOGVAR_MAX);
        Ok(Posterior { mean, logvar })
    }

    /// `[n, d_z, h, w]` → `[n, 3, h·f, w·f]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, TokenizerError> {
        if z.rank() != 4 || z.shape()[1] != self.config.d_z {
            return Err(TokenizerError::Shape(format!(
                "expected [n, {}, h, w] latents, got {:?}",
                self.config.d_z,
                z.shape()
            )));
        }
        let mut h = self.dec_in.1.forward_silu(&self.dec_in.0.forward(z)?)?;
        for (conv, norm) in &self.dec {
            h = norm.forward_silu(&conv.forward(&h)?.upsample_nearest(2)?)?;
        }
        Ok(self.dec_out.forward(&h)?)
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::default();
        t.push("meta.config", &[2], &[self.config.factor as f64, self.config.d_z as f64]);
        self.visit_params(&mut |name, p| t.push(name, p.shape(), p.data()));
        t
    }

    pub fn from_table(table: &TensorTable) -> Result<Self, TokenizerError> {
        let (_, meta) = table
            .get("meta.config")
            .ok_or_else(|| TokenizerError::Checkpoint("missing meta.config".into()))?;
        if meta.len() < 2 {
            return Err(TokenizerError::Checkpoint("meta.config too short".into()));
        }
        let config = TokenizerConfig {
            factor: meta[0] as usize,
            d_z: meta[1] as usize,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        let mut missing = None;
        model.visit_params_mut(&mut |name, p| match table.get(name) {
            Some((shape, data)) if shape == p.shape() => {
                *p = Tensor::param(data.iter().map(|&v| v as f64).collect(), shape).expect("shape checked");
            }
            _ => missing = missing.take().or(Some(name.to_string())),
        });
        if let Some(name) = missing {
            return Err(TokenizerError::Checkpoint(format!("tensor '{name}' missing or mis-shaped")));
        }
        Ok(model)
    }
}

impl Parameterized for TokenizerModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (c, n)) in self.enc.iter().enumerate() {
            c.visit(&format!("enc.{i}.conv"), f);
            n.visit(&format!("enc.{i}.norm"), f);
        }
        self.enc_out.visit("enc.out", f);
        self.dec_in.0.visit("dec.in.conv", f);
        self.dec_in.1.visit("dec.in.norm", f);
        for (i, (c, n)) in self.dec.iter().enumerate() {
            c.visit(&format!("dec.{i}.conv"), f);
            n.visit(&format!("dec.{i}.norm"), f);
        }
        self.dec_out.visit("dec.out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (c, n)) in self.enc.iter_mut().enumerate() {
            c.visit_mut(&format!("enc.{i}.conv"), f);
            n.visit_mut(&format!("enc.{i}.norm"), f);
        }
        self.enc_out.visit_mut("enc.out", f);
        self.dec_in.0.visit_mut("dec.in.conv", f);
        self.dec_in.1.visit_mut("dec.in.norm", f);
        for (i, (c, n)) in self.dec.iter_mut().enumerate() {
            c.visit_mut(&format!("dec.{i}.conv"), f);
            n.visit_mut(&format!("dec.{i}.norm"), f);
        }
        self.dec_out.visit_mut("dec.out", f);
    }
}
