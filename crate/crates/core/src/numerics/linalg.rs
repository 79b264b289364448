use super::{NumericsError, Tensor};

/// `c (+)= op(a) · op(b)` for row-major slices. `op(a)` is m×k, `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // op(a)[i][p] = a[i*k + p] or a[p*m + i]
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, false);
        Ok(Tensor::from_op(out, vec![m, n], vec![self.clone(), other.clone()], move |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let ga = ctx.needs(0).then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, ctx.grad_out, false, b, true, &mut g, false);
                g
            });
            let gb = ctx.needs(1).then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, a, true, ctx.grad_out, false, &mut g, false);
                g
            });
            vec![ga, gb]
        }))
    }

    /// Batched matmul `[b, m, k] × [b, k, n] → [b, m, n]`, optionally using the
    /// transpose of the right operand's last two axes (`[b, n, k]`).
    pub fn bmm(&self, other: &Tensor, rhs_transposed: bool) -> Result<Tensor, NumericsError> {
        let (a, b) = (self.shape(), other.shape());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "bmm",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (a[0], a[1], a[2]);
        let n = if rhs_transposed { b[1] } else { b[2] };
        let kb = if rhs_transposed { b[2] } else { b[1] };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                false,
                &other.data()[i * k * n..],
                rhs_transposed,
                &mut out[i * m * n..],
                false,
            );
        }
        Ok(Tensor::from_op(out, vec![batch, m, n], vec![self.clone(), other.clone()], move |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let g = ctx.grad_out;
            let ga = ctx.needs(0).then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, &g[i * m * n..], false, &b[i * k * n..], !rhs_transposed, &mut ga[i * m * k..], false);
                }
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    if rhs_transposed {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, &g[i * m * n..], true, &a[i * m * k..], false, &mut gb[i * k * n..], false);
                    } else {
                        gemm(k, m, n, &a[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], false);
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Applies a dense layer to the last axis: `x[..., in] · wᵀ + b` with
    /// `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, NumericsError> {
        let shape = self.shape();
        let ws = weight.shape();
        let d_in = *shape.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != d_in || shape.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let d_out = ws[0];
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(NumericsError::ShapeMismatch {
                    op: "linear(bias)",
                    lhs: ws.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / d_in.max(1);
        let mut out = vec![0.0; rows * d_out];
        gemm(rows, d_in, d_out, self.data(), false, weight.data(), true, &mut out, false);
        if let Some(b) = bias {
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, out_shape, parents, move |ctx| {
            let g = ctx.grad_out;
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![0.0; rows * d_in];
                gemm(rows, d_out, d_in, g, false, ctx.parents[1].data(), false, &mut gx, false);
                gx
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![0.0; d_out * d_in];
                gemm(d_out, rows, d_in, g, true, ctx.parents[0].data(), false, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut gb = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }))
    }
}
