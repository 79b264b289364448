use super::DiagnosticsError;

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order with matching
/// eigenvectors as the columns of the second result.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = idx.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &i) in idx.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + i];
        }
    }
    (values, vectors)
}

/// Principal-component projection onto two axes.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit loading vectors.
    pub axes: [Vec<f64>; 2],
    /// Variance captured by each axis (population normalization).
    pub variances: [f64; 2],
}

impl Pca2 {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self, DiagnosticsError> {
        let n = points.len();
        if n < 3 {
            return Err(DiagnosticsError::Invalid(format!("PCA needs at least 3 points, got {n}")));
        }
        let d = points[0].len();
        if d < 2 {
            return Err(DiagnosticsError::Invalid(format!("PCA needs dimension >= 2, got {d}")));
        }
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(DiagnosticsError::Invalid(format!("ragged input: {} vs {d}", p.len())));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for p in points {
            for i in 0..d {
                let a = p[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += a * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= n as f64;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let (values, vectors) = symmetric_eigen(&cov, d);
        if !(values[0] > 0.0) {
            return Err(DiagnosticsError::Invalid("all points coincide (rank 0)".into()));
        }
        let axis = |col: usize| {
            let mut a: Vec<f64> = (0..d).map(|k| vectors[k * d + col]).collect();
            let big = a.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                a.iter_mut().for_each(|x| *x = -*x);
            }
            a
        };
        Ok(Self {
            mean,
            axes: [axis(0), axis(1)],
            variances: [values[0], values[1].max(0.0)],
        })
    }

    pub fn transform(&self, p: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = p.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        self.axes
            .clone()
            .map(|a| a.iter().zip(&c).map(|(u, v)| u * v).sum())
    }
}

/// Centered coordinates on the top two principal components. The largest
/// magnitude entry of each loading vector is positive.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>, DiagnosticsError> {
    let pca = Pca2::fit(points)?;
    Ok(points.iter().map(|p| pca.transform(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal_is_sorted() {
        let (vals, vecs) = symmetric_eigen(&[1.0, 0.0, 0.0, 3.0], 2);
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs[1].abs(), 1.0);
    }

    #[test]
    fn reconstructs_matrix() {
        let a = [4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 5.0];
        let (vals, v) = symmetric_eigen(&a, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| v[i * 3 + k] * vals[k] * v[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_points() {
        assert!(project_2d(&[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(project_2d(&vec![vec![1.0, 1.0]; 4]).is_err());
    }
}
