use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `[N × out_dim]` coordinates of the centered data.
    pub coords: Tensor,
    /// Principal directions, one per row, `[out_dim × D]`.
    pub axes: Tensor,
    /// Fraction of total variance captured by each axis.
    pub explained: Vec<f64>,
}

/// Projects centered rows onto the top `out_dim` eigenvectors of the sample
/// covariance. Each axis is signed so its largest-magnitude component is
/// positive.
pub fn pca_project(x: &Tensor, out_dim: usize) -> Result<Projection, EvalError> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        return Err(EvalError::TooFewRows { need: 2, got: n });
    }
    if out_dim == 0 || out_dim > d {
        return Err(EvalError::Shape(format!(
            "cannot project {d}-dimensional data onto {out_dim} axes"
        )));
    }
    let mean = x.reduce(crate::tensor::ReduceOp::Mean, 0)?;
    let centered = x.sub(&mean)?;
    let cov = centered.matmul_tn(&centered)?.scale(1.0 / (n - 1) as f64);
    let m = DMatrix::from_row_slice(d, d, cov.data());
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut axes = Vec::with_capacity(out_dim * d);
    let mut explained = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let col = eig.eigenvectors.column(k);
        let lead = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        axes.extend(col.iter().map(|v| sign * v));
        explained.push(if total > 0.0 {
            eig.eigenvalues[k].max(0.0) / total
        } else {
            0.0
        });
    }
    let axes = Tensor::new(&[out_dim, d], axes)?;
    let coords = centered.matmul_nt(&axes)?;
    Ok(Projection {
        coords,
        axes,
        explained,
    })
}
