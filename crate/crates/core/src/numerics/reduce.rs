use super::shape_ops::split_axis;
use super::{NumericsError, Tensor};

fn axis_ok(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize, usize), NumericsError> {
    if axis >= t.rank() {
        return Err(NumericsError::Invalid {
            op,
            reason: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(split_axis(t.shape(), axis))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Pairwise summation: the result depends only on the input order.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

impl Tensor {
    /// Sum of all elements, rank-0 result.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(vec![pairwise_sum(self.data())], vec![], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad_out[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, NumericsError> {
        let (outer, len, inner) = axis_ok("sum_axis", self, axis)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        Ok(Tensor::from_op(out, without_axis(self.shape(), axis), vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    g[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&ctx.grad_out[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor, NumericsError> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, NumericsError> {
        let (outer, len, inner) = axis_ok("softmax", self, axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let (y, gy) = (ctx.output, ctx.grad_out);
            let mut g = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| y[at(l)] * gy[at(l)]).sum();
                    for l in 0..len {
                        g[at(l)] = y[at(l)] * (gy[at(l)] - dot);
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// `sqrt(Σ x² + eps)` along `axis` (the axis is removed).
    pub fn l2_norm(&self, axis: usize, eps: f64) -> Result<Tensor, NumericsError> {
        let (outer, len, inner) = axis_ok("l2_norm", self, axis)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| x[(o * len + l) * inner + i].powi(2)).sum();
                out[o * inner + i] = (s + eps).sqrt();
            }
        }
        Ok(Tensor::from_op(out, without_axis(self.shape(), axis), vec![self.clone()], move |ctx| {
            let x = ctx.parents[0].data();
            let mut g = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let k = o * inner + i;
                    let scale = ctx.grad_out[k] / ctx.output[k];
                    for l in 0..len {
                        let j = (o * len + l) * inner + i;
                        g[j] = scale * x[j];
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Cosine similarity along `axis` with guarded norms `sqrt(Σx² + eps)`.
    pub fn cosine_similarity(&self, other: &Tensor, axis: usize, eps: f64) -> Result<Tensor, NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (outer, len, inner) = axis_ok("cosine_similarity", self, axis)?;
        let (a, b) = (self.data(), other.data());
        let stats = move |a: &[f64], b: &[f64], k: usize| {
            let (o, i) = (k / inner, k % inner);
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for l in 0..len {
                let j = (o * len + l) * inner + i;
                ab += a[j] * b[j];
                aa += a[j] * a[j];
                bb += b[j] * b[j];
            }
            (ab, (aa + eps).sqrt(), (bb + eps).sqrt())
        };
        let out: Vec<f64> = (0..outer * inner)
            .map(|k| {
                let (ab, na, nb) = stats(a, b, k);
                ab / (na * nb)
            })
            .collect();
        Ok(Tensor::from_op(
            out,
            without_axis(self.shape(), axis),
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let mut ga = ctx.needs(0).then(|| vec![0.0; a.len()]);
                let mut gb = ctx.needs(1).then(|| vec![0.0; b.len()]);
                for k in 0..outer * inner {
                    let (_, na, nb) = stats(a, b, k);
                    let c = ctx.output[k];
                    let g = ctx.grad_out[k];
                    let (o, i) = (k / inner, k % inner);
                    for l in 0..len {
                        let j = (o * len + l) * inner + i;
                        if let Some(ga) = ga.as_mut() {
                            ga[j] = g * (b[j] / (na * nb) - c * a[j] / (na * na));
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] = g * (a[j] / (na * nb) - c * b[j] / (nb * nb));
                        }
                    }
                }
                vec![ga, gb]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates() {
        let x = Tensor::param(vec![1.0, -1.0], &[2]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.exp().backward().is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new((0..12).map(|v| (v as f64 * 1.3).sin() * 5.0).collect(), &[3, 4]).unwrap();
        for axis in 0..2 {
            let y = x.softmax(axis).unwrap();
            let s = y.sum_axis(axis).unwrap();
            assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn cosine_gradient_is_tangential_when_parallel() {
        let c = Tensor::new(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let x = Tensor::param(vec![2.0, -4.0, 1.0], &[3]).unwrap();
        x.cosine_similarity(&c, 0, 1e-12).unwrap().mean().backward().unwrap();
        let g = x.grad().unwrap();
        let dot: f64 = g.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12, "{dot}");
    }

    #[test]
    fn axis_reductions_match_loops() {
        let x = Tensor::new((0..24).map(|v| v as f64 * 0.5).collect(), &[2, 3, 4]).unwrap();
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2, 4]);
        for a in 0..2 {
            for c in 0..4 {
                let want: f64 = (0..3).map(|b| x.data()[a * 12 + b * 4 + c]).sum();
                assert_eq!(s.data()[a * 4 + c], want);
            }
        }
    }
}
