use rand::Rng;

use super::DitError;
use crate::numerics::{const_param, randn_param, NumericsError, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_THETA: f64 = 10_000.0;

/// Dense layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(d_in)`, zero bias.
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: randn_param(rng, &[d_out, d_in], 1.0 / (d_in as f64).sqrt()),
            bias: bias.then(|| const_param(&[d_out], 0.0)),
        }
    }

    pub fn zeroed(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: const_param(&[d_out, d_in], 0.0),
            bias: Some(const_param(&[d_out], 0.0)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

/// `x / sqrt(mean(x²) + eps) ∘ gain` over the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor, DitError> {
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(DitError::Shape("rmsnorm over an empty channel axis".into()));
    }
    if gain.shape() != [d] {
        return Err(NumericsError::ShapeMismatch {
            op: "rmsnorm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        }
        .into());
    }
    let rows = x.numel() / d;
    let (xs, gs) = (x.data(), gain.data());
    let mut inv = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        inv[r] = 1.0 / (ms + RMS_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = row[c] * inv[r] * gs[c];
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone()],
        move |ctx| {
            let xs = ctx.parents[0].data();
            let gs = ctx.parents[1].data();
            let go = ctx.grad_out;
            let mut gx = vec![0.0; xs.len()];
            let mut gg = vec![0.0; d];
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let s = inv[r];
                // n = x·s, y = n∘g
                let dot: f64 = (0..d).map(|c| go[r * d + c] * gs[c] * row[c]).sum();
                for c in 0..d {
                    let gn = go[r * d + c] * gs[c];
                    gx[r * d + c] = s * gn - s * s * s * row[c] * dot / d as f64;
                    gg[c] += go[r * d + c] * row[c] * s;
                }
            }
            vec![Some(gx), Some(gg)]
        },
    ))
}

/// `x ∘ (1 + scale) + shift` with per-sample `scale`, `shift`: `[b, d]`
/// broadcast over the tokens of `x`: `[b, n, d]`.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor, DitError> {
    let (b, n, d) = dims3(x)?;
    for t in [shift, scale] {
        if t.shape() != [b, d] {
            return Err(NumericsError::ShapeMismatch {
                op: "modulate",
                lhs: x.shape().to_vec(),
                rhs: t.shape().to_vec(),
            }
            .into());
        }
    }
    let (xs, sh, sc) = (x.data(), shift.data(), scale.data());
    let mut out = vec![0.0; xs.len()];
    for i in 0..b {
        for t in 0..n {
            for c in 0..d {
                let k = (i * n + t) * d + c;
                out[k] = xs[k] * (1.0 + sc[i * d + c]) + sh[i * d + c];
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), shift.clone(), scale.clone()],
        move |ctx| {
            let (xs, sc, go) = (ctx.parents[0].data(), ctx.parents[2].data(), ctx.grad_out);
            let mut gx = vec![0.0; xs.len()];
            let mut gsh = vec![0.0; b * d];
            let mut gsc = vec![0.0; b * d];
            for i in 0..b {
                for t in 0..n {
                    for c in 0..d {
                        let k = (i * n + t) * d + c;
                        gx[k] = go[k] * (1.0 + sc[i * d + c]);
                        gsh[i * d + c] += go[k];
                        gsc[i * d + c] += go[k] * xs[k];
                    }
                }
            }
            vec![Some(gx), Some(gsh), Some(gsc)]
        },
    ))
}

/// `x + gate ∘ y` with a per-sample `gate`: `[b, d]`.
pub fn gated_residual(x: &Tensor, gate: &Tensor, y: &Tensor) -> Result<Tensor, DitError> {
    let (b, n, d) = dims3(x)?;
    if y.shape() != x.shape() || gate.shape() != [b, d] {
        return Err(NumericsError::ShapeMismatch {
            op: "gated_residual",
            lhs: x.shape().to_vec(),
            rhs: gate.shape().to_vec(),
        }
        .into());
    }
    let (xs, gs, ys) = (x.data(), gate.data(), y.data());
    let mut out = vec![0.0; xs.len()];
    for i in 0..b {
        for t in 0..n {
            for c in 0..d {
                let k = (i * n + t) * d + c;
                out[k] = xs[k] + gs[i * d + c] * ys[k];
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gate.clone(), y.clone()],
        move |ctx| {
            let (gs, ys, go) = (ctx.parents[1].data(), ctx.parents[2].data(), ctx.grad_out);
            let mut gg = vec![0.0; b * d];
            let mut gy = vec![0.0; ys.len()];
            for i in 0..b {
                for t in 0..n {
                    for c in 0..d {
                        let k = (i * n + t) * d + c;
                        gg[i * d + c] += go[k] * ys[k];
                        gy[k] = go[k] * gs[i * d + c];
                    }
                }
            }
            vec![Some(go.to_vec()), Some(gg), Some(gy)]
        },
    ))
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize), DitError> {
    match x.shape() {
        &[b, n, d] => Ok((b, n, d)),
        s => Err(DitError::Shape(format!("expected [batch, tokens, channels], got {s:?}"))),
    }
}

/// `W_out · (silu(W_g·x) ∘ (W_v·x))`.
pub fn swiglu_ffn(x: &Tensor, w_gate: &Linear, w_val: &Linear, w_out: &Linear) -> Result<Tensor, DitError> {
    let g = w_gate.forward(x)?.silu();
    let v = w_val.forward(x)?;
    Ok(w_out.forward(&g.mul(&v)?)?)
}

/// `(8/3)·width` rounded to the nearest multiple of 8.
pub fn swiglu_hidden(width: usize) -> usize {
    let h = (8.0 * width as f64 / 3.0 / 8.0).round() as usize * 8;
    h.max(8)
}

fn rope_angles(pos: &[(f64, f64)], head_dim: usize) -> Vec<(f64, f64)> {
    // per token, per rotated pair: (cos, sin)
    let quarter = head_dim / 4;
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(pos.len() * half);
    for &(row, col) in pos {
        for p in [row, col] {
            for i in 0..quarter {
                let freq = ROPE_THETA.powf(-(2.0 * i as f64) / half as f64);
                let a = p * freq;
                out.push((a.cos(), a.sin()));
            }
        }
    }
    out
}

/// Rotary embedding over the last axis of `x`: `[..., n, head_dim]`. The first
/// half of the head dimension rotates with the row position, the second
/// half with the column position, adjacent channel pairs forming each plane.
pub fn rope_2d(x: &Tensor, positions: &[(f64, f64)]) -> Result<Tensor, DitError> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(DitError::Shape(format!("rope needs [..., tokens, head_dim], got {s:?}")));
    }
    let (n, hd) = (s[s.len() - 2], s[s.len() - 1]);
    if hd % 4 != 0 || hd == 0 {
        return Err(DitError::Shape(format!("head_dim {hd} not divisible by 4")));
    }
    if positions.len() != n {
        return Err(DitError::Shape(format!("{} positions for {n} tokens", positions.len())));
    }
    let angles = rope_angles(positions, hd);
    let half = hd / 2;
    let rotate = move |src: &[f64], sign: f64| {
        let mut out = vec![0.0; src.len()];
        for (row_i, row) in src.chunks(hd).enumerate() {
            let tok = row_i % n;
            let o = &mut out[row_i * hd..(row_i + 1) * hd];
            for p in 0..half {
                let (c, sn) = angles[tok * half + p];
                let sn = sn * sign;
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                o[2 * p] = a * c - b * sn;
                o[2 * p + 1] = a * sn + b * c;
            }
        }
        out
    };
    let out = rotate(x.data(), 1.0);
    Ok(Tensor::from_op(out, s.to_vec(), vec![x.clone()], move |ctx| {
        vec![Some(rotate(ctx.grad_out, -1.0))]
    }))
}

/// Scaled dot-product attention probabilities `softmax(q kᵀ / sqrt(d))`
/// for `q`, `k`: `[g, n, d]`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor, DitError> {
    let d = *q.shape().last().unwrap_or(&1) as f64;
    let logits = q.bmm(k, true)?.mul_scalar(1.0 / d.sqrt());
    Ok(logits.softmax(2)?)
}

/// Multi-head self-attention with 2D rotary positions. `x`: `[b, n, width]`.
pub fn attention(
    x: &Tensor,
    qkv: &Linear,
    proj: &Linear,
    heads: usize,
    positions: &[(f64, f64)],
) -> Result<Tensor, DitError> {
    let (b, n, w) = dims3(x)?;
    if heads == 0 || w % heads != 0 {
        return Err(DitError::Shape(format!("width {w} not divisible by {heads} heads")));
    }
    let hd = w / heads;
    // [b, n, 3, h, hd] → [3, b, h, n, hd]
    let t = qkv
        .forward(x)?
        .reshape(&[b, n, 3, heads, hd])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Tensor, DitError> { Ok(t.narrow(0, i, 1)?.reshape(&[b * heads, n, hd])?) };
    let q = rope_2d(&part(0)?, positions)?;
    let k = rope_2d(&part(1)?, positions)?;
    let v = part(2)?;
    let a = attention_weights(&q, &k)?;
    let o = a
        .bmm(&v, false)?
        .reshape(&[b, heads, n, hd])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, w])?;
    Ok(proj.forward(&o)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsnorm_hand_value() {
        let x = Tensor::new(vec![3.0, 4.0], &[1, 2]).unwrap();
        let y = rmsnorm(&x, &Tensor::full(&[2], 1.0)).unwrap();
        let r = (12.5f64 + RMS_EPS).sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-12);
        assert!((y.data()[0] - 0.848528).abs() < 1e-5);
    }

    #[test]
    fn hidden_width_rounding() {
        assert_eq!(swiglu_hidden(128), 344);
        assert_eq!(swiglu_hidden(16), 40);
        assert_eq!(swiglu_hidden(3), 8);
    }

    #[test]
    fn rope_origin_is_identity() {
        let x = Tensor::new((0..8).map(|i| i as f64).collect(), &[1, 8]).unwrap();
        let y = rope_2d(&x, &[(0.0, 0.0)]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(rope_2d(&Tensor::zeros(&[1, 6]), &[(0.0, 0.0)]).is_err());
    }
}
