use super::{NumericsError, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Elementwise map with derivative `deriv(x, y)` where `y = f(x)`.
    pub fn map_unary(
        &self,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad_out
                .iter()
                .zip(x)
                .zip(ctx.output)
                .map(|((g, &x), &y)| g * deriv(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    /// Subgradient at zero is zero.
    pub fn relu(&self) -> Tensor {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Tensor {
        self.map_unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.map_unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.map_unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map_unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// Subgradient at zero is zero.
    pub fn abs(&self) -> Tensor {
        self.map_unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.map_unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Gradient passes only strictly inside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map_unary(move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map_unary(|x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.map_unary(|x| x * c, move |_, _| c)
    }

    fn zip_op(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        backward: impl Fn(&[f64], &[f64], &[f64], &[f64], bool, bool) -> (Option<Vec<f64>>, Option<Vec<f64>>)
            + 'static,
    ) -> Result<Tensor, NumericsError> {
        same_shape(op, self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (ga, gb) = backward(
                    ctx.grad_out,
                    ctx.parents[0].data(),
                    ctx.parents[1].data(),
                    ctx.output,
                    ctx.needs(0),
                    ctx.needs(1),
                );
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_op(other, "add", |a, b| a + b, |g, _, _, _, na, nb| {
            (na.then(|| g.to_vec()), nb.then(|| g.to_vec()))
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_op(other, "sub", |a, b| a - b, |g, _, _, _, na, nb| {
            (na.then(|| g.to_vec()), nb.then(|| g.iter().map(|v| -v).collect()))
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_op(other, "mul", |a, b| a * b, |g, a, b, _, na, nb| {
            (
                na.then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                nb.then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            )
        })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_op(other, "div", |a, b| a / b, |g, _, b, y, na, nb| {
            (
                na.then(|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
                nb.then(|| g.iter().zip(b).zip(y).map(|((g, b), y)| -g * y / b).collect()),
            )
        })
    }
}
