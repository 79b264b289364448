use super::DiagnosticsError;
use crate::Tensor;

/// Reported when the images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

fn same_shape(x: &Tensor, y: &Tensor) -> Result<(), DiagnosticsError> {
    if x.shape() != y.shape() {
        return Err(DiagnosticsError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// `10·log10(L² / MSE)` for pixel range `L`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, x_hat: &Tensor, data_range: f64) -> Result<f64, DiagnosticsError> {
    same_shape(x, x_hat)?;
    let n = x.numel().max(1) as f64;
    let mse = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over every 8×8 window (stride 1) of every channel plane, with
/// uniform window weights and population moments. Accepts `[c, h, w]` or
/// `[n, c, h, w]`.
pub fn ssim(x: &Tensor, x_hat: &Tensor, data_range: f64) -> Result<f64, DiagnosticsError> {
    same_shape(x, x_hat)?;
    let s = x.shape();
    if s.len() < 2 {
        return Err(DiagnosticsError::Shape(format!("need at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DiagnosticsError::Shape(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in x.data().chunks(h * w).zip(x_hat.data().chunks(h * w)) {
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let a = pa[(i + di) * w + j + dj];
                        let b = pb[(i + di) * w + j + dj];
                        sa += a;
                        sb += b;
                        saa += a * a;
                        sbb += b * b;
                        sab += a * b;
                    }
                }
                let (ma, mb) = (sa / k, sb / k);
                let va = saa / k - ma * ma;
                let vb = sbb / k - mb * mb;
                let cov = sab / k - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
