use super::{gradients, NumericsError, Tensor};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, NumericsError>,
{
    let y = f(inputs)?;
    if y.numel() != 1 {
        return Err(NumericsError::NonScalarRoot(y.shape().to_vec()));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite(format!("checked function returned {v}")));
    }
    Ok(v)
}

/// Central-difference check of `f` with respect to several inputs at once.
///
/// `max_coords` limits how many coordinates per input are perturbed; they are
/// spread evenly over the tensor so large parameter blocks stay affordable.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64, max_coords: Option<usize>) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::Invalid {
            op: "finite_diff_check",
            reason: format!("step must be positive, got {h}"),
        });
    }
    if let Some(bad) = inputs.iter().position(|t| !t.all_finite()) {
        return Err(NumericsError::NonFinite(format!("input {bad} contains non-finite values")));
    }
    let tracked: Vec<Tensor> = inputs.iter().map(Tensor::tracked).collect();
    let root = f(&tracked)?;
    if root.numel() != 1 {
        return Err(NumericsError::NonScalarRoot(root.shape().to_vec()));
    }
    if !root.item().is_finite() {
        return Err(NumericsError::NonFinite(format!("checked function returned {}", root.item())));
    }
    let grads = gradients(&root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tracked[k]);
        let n = input.numel();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let mut plus = input.to_vec();
            plus[i] += h;
            probe[k] = Tensor::new(plus, input.shape())?;
            let fp = eval_scalar(&f, &probe)?;
            let mut minus = input.to_vec();
            minus[i] -= h;
            probe[k] = Tensor::new(minus, input.shape())?;
            let fm = eval_scalar(&f, &probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
            report.coords_checked += 1;
        }
        probe[k] = input.detach();
    }
    Ok(report)
}

/// Max relative error between the analytic gradient of `f` at `x` and central
/// differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&Tensor) -> Result<Tensor, NumericsError>,
{
    check_gradients(|v: &[Tensor]| f(&v[0]), std::slice::from_ref(x), h, None).map(|r| r.max_rel_error)
}
