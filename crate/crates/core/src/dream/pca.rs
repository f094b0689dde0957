//! Principal components of a point cloud via the symmetric eigendecomposition
//! of its sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `m x dim`, orthonormal rows.
    pub components: Tensor,
    /// Eigenvalues of the sample covariance, descending.
    pub variances: Vec<f64>,
}

/// Full spectrum: every eigenpair, sorted by descending eigenvalue, with the
/// largest-magnitude entry of each eigenvector made positive.
fn spectrum(points: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let n = points.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 points, got {n}")));
    }
    let dim = points.item_len();
    let mut mean = vec![0.0; dim];
    for row in points.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| points.item(i)[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut values = Vec::with_capacity(dim);
    let mut vectors = Vec::with_capacity(dim);
    for &i in &order {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = (0..dim).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        values.push(eig.eigenvalues[i].max(0.0));
        vectors.push(v);
    }
    Ok((mean, vectors, values))
}

fn assemble(mean: Vec<f64>, vectors: Vec<Vec<f64>>, values: Vec<f64>, m: usize) -> Result<Pca> {
    let dim = mean.len();
    Ok(Pca {
        mean,
        components: Tensor::new(vec![m, dim], vectors[..m].concat())?,
        variances: values[..m].to_vec(),
    })
}

/// Top `m` principal components. Requires `m <= min(n - 1, dim)`.
pub fn pca_fit(points: &Tensor, m: usize) -> Result<Pca> {
    let n = points.shape().first().copied().unwrap_or(0);
    let dim = points.item_len();
    if n >= 2 && m > (n - 1).min(dim) {
        return Err(Error::InvalidArgument(format!(
            "cannot take {m} components from {n} points of dimension {dim}"
        )));
    }
    let (mean, vectors, values) = spectrum(points)?;
    assemble(mean, vectors, values, m)
}

/// Smallest `m` whose components explain at least `target` of the total
/// variance, capped at `cap` and at `min(n - 1, dim)`.
pub fn pca_fit_explained(points: &Tensor, target: f64, cap: usize) -> Result<Pca> {
    let n = points.shape().first().copied().unwrap_or(0);
    let (mean, vectors, values) = spectrum(points)?;
    let limit = cap.min(n - 1).min(mean.len());
    let total: f64 = values.iter().sum();
    let mut m = 0;
    let mut acc = 0.0;
    if total > 0.0 {
        while m < limit && acc < target * total {
            acc += values[m];
            m += 1;
        }
    }
    assemble(mean, vectors, values, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_one_direction() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let pts = Tensor::from_rows(&[vec![-2.0 * s, -2.0 * s], vec![0.0, 0.0], vec![s, s], vec![3.0 * s, 3.0 * s]]).unwrap();
        let p = pca_fit(&pts, 2).unwrap();
        let c = p.components.item(0);
        assert!((c[0] - s).abs() < 1e-12 && (c[1] - s).abs() < 1e-12, "{c:?}");
        assert!(p.variances[1].abs() < 1e-12);
        assert_eq!(pca_fit_explained(&pts, 0.95, 10).unwrap().variances.len(), 1);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(pca_fit(&one, 0).is_err());
        let two = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(pca_fit(&two, 2).is_err());
        assert!(pca_fit(&two, 1).is_ok());
    }
}
