use super::linalg::gemm;
use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo } = *self;
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * ho * wo;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let dst = &mut cols[row + oi * wo..row + (oi + 1) * wo];
                        if ii < 0 || ii >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo } = *self;
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * ho * wo;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = (ci * h + ii as usize) * w;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                dx[base + jj as usize] += cols[row + oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation. `self: [n, c, h, w]`, `weight: [o, c, kh, kw]`,
    /// optional `bias: [o]`; zero padding on all sides.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, NumericsError> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(NumericsError::Invalid {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(NumericsError::Invalid {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d(bias)",
                    lhs: ws.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (ckk, hw_out, hw_in) = (c * kh * kw, g.ho * g.wo, h * w);
        let mut out = vec![0.0; n * o * hw_out];
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { ckk * hw_out }];
        for b in 0..n {
            let xb = &self.data()[b * c * hw_in..(b + 1) * c * hw_in];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(o, ckk, hw_out, weight.data(), false, src, false, &mut out[b * o * hw_out..], false);
        }
        if let Some(bias) = bias {
            for (i, chunk) in out.chunks_mut(hw_out).enumerate() {
                let bv = bias.data()[i % o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![n, o, g.ho, g.wo], parents, move |ctx| {
            let (x, wt, gy) = (ctx.parents[0].data(), ctx.parents[1].data(), ctx.grad_out);
            let mut gx = ctx.needs(0).then(|| vec![0.0; n * c * hw_in]);
            let mut gw = ctx.needs(1).then(|| vec![0.0; o * ckk]);
            let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { ckk * hw_out }];
            let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { ckk * hw_out }];
            for b in 0..n {
                let gyb = &gy[b * o * hw_out..(b + 1) * o * hw_out];
                if let Some(gw) = gw.as_mut() {
                    let xb = &x[b * c * hw_in..(b + 1) * c * hw_in];
                    let src: &[f64] = if g.is_pointwise() {
                        xb
                    } else {
                        g.im2col(xb, &mut cols);
                        &cols
                    };
                    gemm(o, hw_out, ckk, gyb, false, src, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * c * hw_in..(b + 1) * c * hw_in];
                    if g.is_pointwise() {
                        gemm(ckk, o, hw_out, wt, true, gyb, false, gxb, false);
                    } else {
                        gemm(ckk, o, hw_out, wt, true, gyb, false, &mut dcols, false);
                        g.col2im(&dcols, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut gb = vec![0.0; o];
                    for (i, chunk) in gy.chunks(hw_out).enumerate() {
                        gb[i % o] += chunk.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Nearest-neighbour upsampling of `[n, c, h, w]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor, NumericsError> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(NumericsError::Invalid {
                op: "upsample_nearest",
                reason: format!("need rank-4 input and factor >= 1, got {s:?} x{factor}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h2, w2) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; planes * h2 * w2];
        for p in 0..planes {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[(p * h2 + i) * w2 + j] = x[(p * h + i / factor) * w + j / factor];
                }
            }
        }
        Ok(Tensor::from_op(out, vec![s[0], s[1], h2, w2], vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; planes * h * w];
            for p in 0..planes {
                for i in 0..h2 {
                    for j in 0..w2 {
                        g[(p * h + i / factor) * w + j / factor] += ctx.grad_out[(p * h2 + i) * w2 + j];
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Group normalization of `[n, c, h, w]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
        let s = self.shape();
        if s.len() != 4 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(NumericsError::Invalid {
                op: "group_norm",
                reason: format!("shape {s:?} incompatible with {groups} groups"),
            });
        }
        let c = s[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "group_norm(affine)",
                lhs: s.to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let (n, hw) = (s[0], s[2] * s[3]);
        let cg = c / groups;
        let m = cg * hw;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * groups];
        for b in 0..n {
            for gi in 0..groups {
                let base = (b * c + gi * cg) * hw;
                let seg = &x[base..base + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * groups + gi] = is;
                for (d, v) in xhat[base..base + m].iter_mut().zip(seg) {
                    *d = (v - mean) * is;
                }
            }
        }
        let (gm, bt) = (gamma.data(), beta.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| {
                let ch = (i / hw) % c;
                xh * gm[ch] + bt[ch]
            })
            .collect();
        Ok(Tensor::from_op(
            out,
            s.to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let gy = ctx.grad_out;
                let gm = ctx.parents[1].data();
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![0.0; gy.len()];
                    for b in 0..n {
                        for gi in 0..groups {
                            let base = (b * c + gi * cg) * hw;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for i in base..base + m {
                                let dxh = gy[i] * gm[(i / hw) % c];
                                s1 += dxh;
                                s2 += dxh * xhat[i];
                            }
                            let (s1, s2) = (s1 / m as f64, s2 / m as f64);
                            let is = inv_std[b * groups + gi];
                            for i in base..base + m {
                                let dxh = gy[i] * gm[(i / hw) % c];
                                gx[i] = is * (dxh - s1 - xhat[i] * s2);
                            }
                        }
                    }
                    gx
                });
                let (mut gg, mut gb) = (vec![0.0; c], vec![0.0; c]);
                if ctx.needs(1) || ctx.needs(2) {
                    for (i, &g) in gy.iter().enumerate() {
                        let ch = (i / hw) % c;
                        gg[ch] += g * xhat[i];
                        gb[ch] += g;
                    }
                }
                vec![gx, ctx.needs(1).then_some(gg), ctx.needs(2).then_some(gb)]
            },
        ))
    }
}
