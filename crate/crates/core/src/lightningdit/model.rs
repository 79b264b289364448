use rand::{Rng, SeedableRng};

use super::layers::{attention, gated_residual, modulate, rmsnorm, swiglu_ffn, swiglu_hidden, Linear};
use super::DitError;
use crate::io::TensorTable;
use crate::numerics::{const_param, randn_param, Parameterized, Tensor};

/// Sinusoidal timestep features before the embedding MLP.
pub const TIME_FREQS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DitConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub patch: usize,
    /// Latent channels.
    pub channels: usize,
    /// Latent grid height and width.
    pub grid: (usize, usize),
    pub num_classes: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            width: 128,
            patch: 1,
            channels: 32,
            grid: (4, 4),
            num_classes: crate::data::NUM_CLASSES,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<(), DitError> {
        let bad = |m: String| Err(DitError::Config(m));
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.channels == 0 || self.patch == 0 {
            return bad("depth, heads, width, patch and channels must be positive".into());
        }
        if !self.width.is_multiple_of(4 * self.heads) {
            return bad(format!("width {} must be divisible by 4·heads = {}", self.width, 4 * self.heads));
        }
        if !self.grid.0.is_multiple_of(self.patch) || !self.grid.1.is_multiple_of(self.patch) || self.grid.0 == 0 || self.grid.1 == 0 {
            return bad(format!("grid {:?} not divisible by patch {}", self.grid, self.patch));
        }
        Ok(())
    }

    pub fn tokens(&self) -> (usize, usize) {
        (self.grid.0 / self.patch, self.grid.1 / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    fn to_meta(self) -> [f64; 8] {
        [
            self.depth as f64,
            self.heads as f64,
            self.width as f64,
            self.patch as f64,
            self.channels as f64,
            self.grid.0 as f64,
            self.grid.1 as f64,
            self.num_classes as f64,
        ]
    }

    fn from_meta(m: &[f32]) -> Result<Self, DitError> {
        if m.len() != 8 {
            return Err(DitError::Checkpoint(format!("meta.config has {} entries, expected 8", m.len())));
        }
        let u = |i: usize| m[i] as usize;
        Ok(Self {
            depth: u(0),
            heads: u(1),
            width: u(2),
            patch: u(3),
            channels: u(4),
            grid: (u(5), u(6)),
            num_classes: u(7),
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Tensor,
    qkv: Linear,
    proj: Linear,
    norm2: Tensor,
    w_gate: Linear,
    w_val: Linear,
    w_out: Linear,
    /// silu(c) → shift, scale, gate for attention then for the FFN.
    ada: Linear,
}

impl Block {
    fn new(rng: &mut impl Rng, width: usize) -> Self {
        let hidden = swiglu_hidden(width);
        Self {
            norm1: const_param(&[width], 1.0),
            qkv: Linear::new(rng, width, 3 * width, true),
            proj: Linear::new(rng, width, width, true),
            norm2: const_param(&[width], 1.0),
            w_gate: Linear::new(rng, width, hidden, false),
            w_val: Linear::new(rng, width, hidden, false),
            w_out: Linear::new(rng, hidden, width, false),
            ada: Linear::zeroed(width, 6 * width),
        }
    }

    fn forward(&self, x: &Tensor, c_act: &Tensor, heads: usize, pos: &[(f64, f64)]) -> Result<Tensor, DitError> {
        let w = x.shape()[2];
        let m = self.ada.forward(c_act)?;
        let chunk = |i: usize| m.narrow(1, i * w, w);
        let (sh1, sc1, g1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (sh2, sc2, g2) = (chunk(3)?, chunk(4)?, chunk(5)?);
        let h = modulate(&rmsnorm(x, &self.norm1)?, &sh1, &sc1)?;
        let x = gated_residual(x, &g1, &attention(&h, &self.qkv, &self.proj, heads, pos)?)?;
        let h = modulate(&rmsnorm(&x, &self.norm2)?, &sh2, &sc2)?;
        gated_residual(&x, &g2, &swiglu_ffn(&h, &self.w_gate, &self.w_val, &self.w_out)?)
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{p}.norm1.gain"), &self.norm1);
        self.qkv.visit(&format!("{p}.attn.qkv"), f);
        self.proj.visit(&format!("{p}.attn.proj"), f);
        f(&format!("{p}.norm2.gain"), &self.norm2);
        self.w_gate.visit(&format!("{p}.ffn.gate"), f);
        self.w_val.visit(&format!("{p}.ffn.val"), f);
        self.w_out.visit(&format!("{p}.ffn.out"), f);
        self.ada.visit(&format!("{p}.ada"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{p}.norm1.gain"), &mut self.norm1);
        self.qkv.visit_mut(&format!("{p}.attn.qkv"), f);
        self.proj.visit_mut(&format!("{p}.attn.proj"), f);
        f(&format!("{p}.norm2.gain"), &mut self.norm2);
        self.w_gate.visit_mut(&format!("{p}.ffn.gate"), f);
        self.w_val.visit_mut(&format!("{p}.ffn.val"), f);
        self.w_out.visit_mut(&format!("{p}.ffn.out"), f);
        self.ada.visit_mut(&format!("{p}.ada"), f);
    }
}

/// Class-conditional diffusion transformer over a latent grid.
#[derive(Debug, Clone)]
pub struct DiTModel {
    pub config: DitConfig,
    embed: Linear,
    t_mlp: (Linear, Linear),
    /// `num_classes + 1` rows; the last row is the unconditional token.
    classes: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
    final_ada: Linear,
    head: Linear,
}

/// `[cos(t·ω_k) ‖ sin(t·ω_k)]` with `t` scaled to `[0, 1000]`.
pub fn timestep_features(t: &[f64]) -> Tensor {
    let half = TIME_FREQS / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FREQS);
    for &ti in t {
        let s = ti * 1000.0;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp() * s)
            .collect();
        out.extend(freqs.iter().map(|a| a.cos()));
        out.extend(freqs.iter().map(|a| a.sin()));
    }
    Tensor::new(out, &[t.len(), TIME_FREQS]).expect("sized")
}

impl DiTModel {
    pub fn new(config: DitConfig, rng: &mut impl Rng) -> Result<Self, DitError> {
        config.validate()?;
        let w = config.width;
        Ok(Self {
            embed: Linear::new(rng, config.token_dim(), w, true),
            t_mlp: (Linear::new(rng, TIME_FREQS, w, true), Linear::new(rng, w, w, true)),
            classes: randn_param(rng, &[config.num_classes + 1, w], 0.02),
            blocks: (0..config.depth).map(|_| Block::new(rng, w)).collect(),
            final_norm: const_param(&[w], 1.0),
            final_ada: Linear::zeroed(w, 2 * w),
            head: Linear::zeroed(w, config.token_dim()),
            config,
        })
    }

    /// Token positions `(row, col)` in row-major token order.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        let (th, tw) = self.config.tokens();
        (0..th)
            .flat_map(|r| (0..tw).map(move |c| (r as f64, c as f64)))
            .collect()
    }

    /// `[b, c, h, w]` → `[b, tokens, c·p²]`.
    fn patchify(&self, x: &Tensor) -> Result<Tensor, DitError> {
        let p = self.config.patch;
        let (th, tw) = self.config.tokens();
        let b = x.shape()[0];
        let c = self.config.channels;
        Ok(x.reshape(&[b, c, th, p, tw, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, th * tw, c * p * p])?)
    }

    fn unpatchify(&self, t: &Tensor) -> Result<Tensor, DitError> {
        let p = self.config.patch;
        let (th, tw) = self.config.tokens();
        let b = t.shape()[0];
        let c = self.config.channels;
        Ok(t.reshape(&[b, th, tw, c, p, p])?
            .permute(&[0, 3, 1, 4, 2, 5])?
            .reshape(&[b, c, th * p, tw * p])?)
    }

    /// Conditioning vector `c = MLP(timestep features) + class embedding`.
    fn condition(&self, t: &[f64], labels: &[usize]) -> Result<Tensor, DitError> {
        if let Some(&bad) = labels.iter().find(|&&l| l > self.config.num_classes) {
            return Err(DitError::Config(format!("label {bad} out of range (null class is {})", self.config.num_classes)));
        }
        let te = self.t_mlp.1.forward(&self.t_mlp.0.forward(&timestep_features(t))?.silu())?;
        let ye = self.classes.index_select(labels)?;
        Ok(te.add(&ye)?)
    }

    /// Predicted velocity for latents `x`: `[b, c, h, w]` at times `t` with
    /// class `labels` (use [`DitConfig::null_class`] for unconditional).
    pub fn forward(&self, x: &Tensor, t: &[f64], labels: &[usize]) -> Result<Tensor, DitError> {
        let cfg = &self.config;
        let expect = [x.shape().first().copied().unwrap_or(0), cfg.channels, cfg.grid.0, cfg.grid.1];
        if x.shape() != expect || x.shape()[0] == 0 {
            return Err(DitError::Shape(format!("expected latents {expect:?}, got {:?}", x.shape())));
        }
        let b = x.shape()[0];
        if t.len() != b || labels.len() != b {
            return Err(DitError::Shape(format!("{b} latents, {} times, {} labels", t.len(), labels.len())));
        }
        let pos = self.positions();
        let c_act = self.condition(t, labels)?.silu();
        let mut h = self.embed.forward(&self.patchify(x)?)?;
        for blk in &self.blocks {
            h = blk.forward(&h, &c_act, cfg.heads, &pos)?;
        }
        let m = self.final_ada.forward(&c_act)?;
        let w = cfg.width;
        let h = modulate(&rmsnorm(&h, &self.final_norm)?, &m.narrow(1, 0, w)?, &m.narrow(1, w, w)?)?;
        self.unpatchify(&self.head.forward(&h)?)
    }

    /// Checkpoint table; `stats` holds the per-channel latent mean and std.
    pub fn to_table(&self, stats: Option<&LatentStats>) -> TensorTable {
        let mut t = TensorTable::default();
        t.push("meta.config", &[8], &self.config.to_meta());
        if let Some(s) = stats {
            t.push("meta.latent_mean", &[s.mean.len()], &s.mean);
            t.push("meta.latent_std", &[s.std.len()], &s.std);
        }
        self.visit_params(&mut |name, p| t.push(name, p.shape(), p.data()));
        t
    }

    pub fn from_table(table: &TensorTable) -> Result<(Self, Option<LatentStats>), DitError> {
        let (_, meta) = table
            .get("meta.config")
            .ok_or_else(|| DitError::Checkpoint("missing meta.config".into()))?;
        let config = DitConfig::from_meta(meta)?;
        let mut model = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let mut missing = None;
        model.visit_params_mut(&mut |name, p| match table.get(name) {
            Some((shape, data)) if shape == p.shape() => {
                *p = Tensor::param(data.iter().map(|&v| v as f64).collect(), shape).expect("shape checked");
            }
            _ => missing = missing.take().or(Some(name.to_string())),
        });
        if let Some(name) = missing {
            return Err(DitError::Checkpoint(format!("tensor '{name}' missing or mis-shaped")));
        }
        let stats = match (table.get("meta.latent_mean"), table.get("meta.latent_std")) {
            (Some((_, m)), Some((_, s))) => Some(LatentStats {
                mean: m.iter().map(|&v| v as f64).collect(),
                std: s.iter().map(|&v| v as f64).collect(),
            }),
            _ => None,
        };
        Ok((model, stats))
    }
}

impl Parameterized for DiTModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed.visit("embed", f);
        self.t_mlp.0.visit("t_mlp.0", f);
        self.t_mlp.1.visit("t_mlp.1", f);
        f("classes", &self.classes);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("final.norm.gain", &self.final_norm);
        self.final_ada.visit("final.ada", f);
        self.head.visit("final.head", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut("embed", f);
        self.t_mlp.0.visit_mut("t_mlp.0", f);
        self.t_mlp.1.visit_mut("t_mlp.1", f);
        f("classes", &mut self.classes);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("final.norm.gain", &mut self.final_norm);
        self.final_ada.visit_mut("final.ada", f);
        self.head.visit_mut("final.head", f);
    }
}

/// Per-channel standardization statistics of the training latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Statistics over every image and location of `[n, c, h, w]` latents.
    pub fn fit(latents: &Tensor) -> Result<Self, DitError> {
        let s = latents.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(DitError::Shape(format!("expected [n, c, h, w] latents, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = latents.data();
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |i| x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
            mean[ch] = vals().sum::<f64>() / count;
            var[ch] = vals().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
        }
        let std = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, latents: &Tensor, forward: bool) -> Result<Tensor, DitError> {
        let s = latents.shape();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(DitError::Shape(format!("latents {s:?} vs {} channels", self.mean.len())));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let out = latents
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let ch = (k / hw) % c;
                if forward {
                    (v - self.mean[ch]) / self.std[ch]
                } else {
                    v * self.std[ch] + self.mean[ch]
                }
            })
            .collect();
        Ok(Tensor::new(out, s)?)
    }

    pub fn normalize(&self, latents: &Tensor) -> Result<Tensor, DitError> {
        self.apply(latents, true)
    }

    pub fn denormalize(&self, latents: &Tensor) -> Result<Tensor, DitError> {
        self.apply(latents, false)
    }
}
