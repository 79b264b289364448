use super::tensor::numel;
use super::{NumericsError, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output element, the flat index of the input element it reads.
fn gather_index(out_shape: &[usize], src_strides_for_out_axes: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut idx = vec![0usize; n];
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for slot in idx.iter_mut() {
        *slot = src;
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += src_strides_for_out_axes[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides_for_out_axes[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(), NumericsError> {
    if axis >= t.rank() {
        return Err(NumericsError::Invalid {
            op,
            reason: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NumericsError> {
        if numel(shape) != self.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad_out.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor, NumericsError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(NumericsError::Invalid {
                op: "permute",
                reason: format!("{dims:?} is not a permutation of {rank} axes"),
            });
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = dims.iter().map(|&d| self.shape()[d]).collect();
        let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
        let index = gather_index(&out_shape, &src_strides);
        let data = index.iter().map(|&i| self.data()[i]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; n];
            for (&src, &go) in index.iter().zip(ctx.grad_out) {
                g[src] = go;
            }
            vec![Some(g)]
        }))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor, NumericsError> {
        if self.rank() != 2 {
            return Err(NumericsError::Invalid {
                op: "transpose",
                reason: format!("expected rank 2, got {:?}", self.shape()),
            });
        }
        self.permute(&[1, 0])
    }

    /// Explicit broadcast: same rank, every source axis is 1 or equals the target.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor, NumericsError> {
        if shape.len() != self.rank()
            || self.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let in_strides = strides(self.shape());
        let src_strides: Vec<usize> = self
            .shape()
            .iter()
            .zip(&in_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let index = gather_index(shape, &src_strides);
        let data = index.iter().map(|&i| self.data()[i]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(data, shape.to_vec(), vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; n];
            for (&src, &go) in index.iter().zip(ctx.grad_out) {
                g[src] += go;
            }
            vec![Some(g)]
        }))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, NumericsError> {
        check_axis("narrow", self, axis)?;
        let (outer, full, inner) = split_axis(self.shape(), axis);
        if start + len > full {
            return Err(NumericsError::Invalid {
                op: "narrow",
                reason: format!("range {start}..{} exceeds axis length {full}", start + len),
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(data, shape, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner].copy_from_slice(&ctx.grad_out[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        check_axis("concat", first, axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(data, shape, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad_out[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Rows of a `[vocab, d]` table: output `[indices.len(), d]`.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor, NumericsError> {
        if self.rank() != 2 {
            return Err(NumericsError::Invalid {
                op: "index_select",
                reason: format!("table must be rank 2, got {:?}", self.shape()),
            });
        }
        let (vocab, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::Invalid {
                op: "index_select",
                reason: format!("index {bad} out of range for {vocab} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let indices = indices.to_vec();
        Ok(Tensor::from_op(data, vec![indices.len(), d], vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; vocab * d];
            for (r, &i) in indices.iter().enumerate() {
                g[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&ctx.grad_out[r * d..(r + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(g)]
        }))
    }
}
