//! Small dense linear-algebra helpers shared across the estimation modules:
//! eigenvalue-based symmetric (pseudo-)inversion, rank detection, and the
//! empirical quantile used for threshold grids.

use nalgebra::{DMatrix, DVector};

/// Relative eigenvalue cutoff for pseudo-inversion of symmetric matrices.
pub const PINV_RELATIVE_TOL: f64 = 1e-12;

/// Condition-number threshold above which a Gram matrix is flagged.
pub const CONDITION_FLAG: f64 = 1e12;

/// Result of inverting a symmetric positive semidefinite matrix.
#[derive(Debug, Clone)]
pub struct SymInverse {
    pub matrix: DMatrix<f64>,
    /// Number of eigenvalues kept (numerical rank).
    #[allow(dead_code)]
    pub rank: usize,
    /// True when at least one eigenvalue was clipped (pseudo-inverse path).
    pub clipped: bool,
    /// Ratio of largest to smallest retained eigenvalue.
    pub condition: f64,
}

/// Invert a symmetric matrix through its eigendecomposition, clipping
/// eigenvalues below `PINV_RELATIVE_TOL * lambda_max`. Returns `None` when the
/// matrix has numerical rank zero.
pub fn sym_pinv(a: &DMatrix<f64>) -> Option<SymInverse> {
    debug_assert_eq!(a.nrows(), a.ncols());
    let p = a.nrows();
    if p == 0 {
        return Some(SymInverse {
            matrix: DMatrix::zeros(0, 0),
            rank: 0,
            clipped: false,
            condition: 1.0,
        });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if lambda_max == 0.0 {
        return None;
    }
    let cut = PINV_RELATIVE_TOL * lambda_max;
    let mut rank = 0;
    let mut lambda_min = f64::INFINITY;
    let mut inv_vals = DVector::zeros(p);
    for (j, &v) in eig.eigenvalues.iter().enumerate() {
        if v > cut {
            inv_vals[j] = 1.0 / v;
            lambda_min = lambda_min.min(v);
            rank += 1;
        }
    }
    if rank == 0 {
        return None;
    }
    // V * diag(1/lambda) * V'
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..p {
        let s = inv_vals[j];
        scaled.column_mut(j).scale_mut(s);
    }
    let mut matrix = &scaled * eig.eigenvectors.transpose();
    symmetrize(&mut matrix);
    Some(SymInverse {
        matrix,
        rank,
        clipped: rank < p,
        condition: lambda_max / lambda_min,
    })
}

/// Force exact symmetry after a chain of float operations.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let p = a.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Numerical column rank via singular values, relative tolerance
/// `tol_rel * sigma_max`.
pub fn column_rank(a: &DMatrix<f64>, tol_rel: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0_f64, |m, &v| m.max(v));
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&v| v > tol_rel * smax)
        .count()
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" definition). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    debug_assert!(m > 0);
    if m == 1 {
        return sorted[0];
    }
    let h = (m as f64 - 1.0) * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Standard normal density.
pub fn gaussian_kernel(u: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    (-0.5 * u * u).exp() * INV_SQRT_2PI
}

/// Sample standard deviation (denominator m - 1).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (m as f64 - 1.0)).sqrt()
}
