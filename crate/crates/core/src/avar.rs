//! Asymptotic covariance of the GMM estimator: (G' Omega^-1 G)^-1 / n, where
//! G stacks the moment derivatives with respect to the slopes and the
//! threshold. The threshold derivative of the jump model involves densities
//! of the threshold variable and is estimated with a Gaussian
//! Nadaraya-Watson smoother under Silverman's rule-of-thumb bandwidth; the
//! kink counterparts are plain sample averages of indicator terms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{column_rank, gaussian_kernel, sample_std, sym_pinv, symmetrize};
use crate::moments::{centered_moment_covariance, MomentSystem};

/// Centered second-moment matrix of the residual moment rows, evaluated at
/// the estimate: (1/n) sum g_i g_i' - mean(g) mean(g)'.
pub fn omega_hat(ghat: &DMatrix<f64>) -> DMatrix<f64> {
    centered_moment_covariance(ghat)
}

/// Slope Jacobian: block t equals -(1/n) sum_i z_it dx_it', stacked over
/// periods (l x k1).
pub fn g_beta_hat(ms: &MomentSystem) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ms.l, ms.k1);
    let offsets = ms.instruments.offsets();
    for (s, zt) in ms.instruments.z.iter().enumerate() {
        let off = offsets[s];
        for i in 0..ms.n {
            for a in 0..zt.ncols() {
                let zv = zt[(i, a)];
                for r in 0..ms.k1 {
                    out[(off + a, r)] -= zv * ms.dx[s][(i, r)];
                }
            }
        }
    }
    out / ms.n as f64
}

/// Threshold-part Jacobian of the jump model: block t equals
/// -(1/n) sum_i z_it (1_it(gamma)' X_it), an l x (k1+1) matrix.
pub fn g_delta_hat(ms: &MomentSystem, gamma: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ms.l, ms.k1 + 1);
    let offsets = ms.instruments.offsets();
    for (s, zt) in ms.instruments.z.iter().enumerate() {
        let off = offsets[s];
        for i in 0..ms.n {
            let ic = if ms.q_cur[s][i] > gamma { 1.0 } else { 0.0 };
            let ip = if ms.q_prev[s][i] > gamma { 1.0 } else { 0.0 };
            for a in 0..zt.ncols() {
                let zv = zt[(i, a)];
                out[(off + a, 0)] -= zv * (ic - ip);
                for r in 0..ms.k1 {
                    out[(off + a, 1 + r)] -=
                        zv * (ic * ms.x_cur[s][(i, r)] - ip * ms.x_prev[s][(i, r)]);
                }
            }
        }
    }
    out / ms.n as f64
}

/// Kink-slope Jacobian: block t equals (1/n) sum_i z_it of the differenced
/// hinge (q - gamma)^+ terms, an l x 1 matrix.
pub fn g_kappa_hat(ms: &MomentSystem, gamma: f64) -> DMatrix<f64> {
    let hinge = |q: f64| if q > gamma { q - gamma } else { 0.0 };
    let mut out = DMatrix::zeros(ms.l, 1);
    let offsets = ms.instruments.offsets();
    for (s, zt) in ms.instruments.z.iter().enumerate() {
        let off = offsets[s];
        for i in 0..ms.n {
            let d = hinge(ms.q_cur[s][i]) - hinge(ms.q_prev[s][i]);
            for a in 0..zt.ncols() {
                out[(off + a, 0)] += zt[(i, a)] * d;
            }
        }
    }
    out / ms.n as f64
}

/// Rule-of-thumb bandwidth h0 * 1.06 * sd(q) * m^(-1/5) over a pooled sample.
pub fn silverman_bandwidth(pooled: &[f64], h0: f64) -> Result<f64> {
    if pooled.len() < 2 {
        return Err(Error::DegenerateSample);
    }
    let sd = sample_std(pooled);
    if sd == 0.0 {
        return Err(Error::DegenerateSample);
    }
    Ok(h0 * 1.06 * sd * (pooled.len() as f64).powf(-0.2))
}

/// Kernel estimate of the threshold Jacobian for the jump model: block t is
/// (1/(n h)) sum_i z_it [ (1, x_{i,t-1}') delta K((gamma - q_{i,t-1})/h)
///                      - (1, x_it') delta K((gamma - q_it)/h) ].
pub fn g_gamma_hat_jump(
    ms: &MomentSystem,
    delta: &DVector<f64>,
    gamma: f64,
    h: f64,
) -> DVector<f64> {
    assert_eq!(delta.len(), ms.k1 + 1);
    let mut out = DVector::zeros(ms.l);
    let offsets = ms.instruments.offsets();
    for (s, zt) in ms.instruments.z.iter().enumerate() {
        let off = offsets[s];
        for i in 0..ms.n {
            let mut cur = delta[0];
            let mut prev = delta[0];
            for r in 0..ms.k1 {
                cur += ms.x_cur[s][(i, r)] * delta[1 + r];
                prev += ms.x_prev[s][(i, r)] * delta[1 + r];
            }
            let k_cur = gaussian_kernel((gamma - ms.q_cur[s][i]) / h);
            let k_prev = gaussian_kernel((gamma - ms.q_prev[s][i]) / h);
            let v = prev * k_prev - cur * k_cur;
            for a in 0..zt.ncols() {
                out[off + a] += zt[(i, a)] * v;
            }
        }
    }
    out / (ms.n as f64 * h)
}

/// Threshold Jacobian of the kink model: block t is
/// kappa (1/n) sum_i z_it [ 1{q_{i,t-1} > gamma} - 1{q_it > gamma} ].
pub fn g_gamma_hat_kink(ms: &MomentSystem, kappa: f64, gamma: f64) -> DVector<f64> {
    let mut out = DVector::zeros(ms.l);
    let offsets = ms.instruments.offsets();
    for (s, zt) in ms.instruments.z.iter().enumerate() {
        let off = offsets[s];
        for i in 0..ms.n {
            let ic = if ms.q_cur[s][i] > gamma { 1.0 } else { 0.0 };
            let ip = if ms.q_prev[s][i] > gamma { 1.0 } else { 0.0 };
            let v = ip - ic;
            for a in 0..zt.ncols() {
                out[off + a] += zt[(i, a)] * v;
            }
        }
    }
    out * (kappa / ms.n as f64)
}

/// Moment Jacobian blocks and the moment covariance entering the sandwich.
#[derive(Debug, Clone)]
pub struct JacobianSet {
    pub g_beta: DMatrix<f64>,
    /// Jump-shift block (l x (k1+1)) or kink-slope block (l x 1).
    pub g_threshold: DMatrix<f64>,
    pub g_gamma: DVector<f64>,
    pub omega: DMatrix<f64>,
    /// Kernel bandwidth used for the jump threshold Jacobian.
    pub bandwidth: Option<f64>,
}

impl JacobianSet {
    /// Stacked Jacobian (G_beta, G_threshold, G_gamma), l x (k1+k2+1).
    pub fn stacked(&self) -> DMatrix<f64> {
        let l = self.g_beta.nrows();
        let p = self.g_beta.ncols() + self.g_threshold.ncols() + 1;
        let mut g = DMatrix::zeros(l, p);
        g.view_mut((0, 0), (l, self.g_beta.ncols()))
            .copy_from(&self.g_beta);
        g.view_mut((0, self.g_beta.ncols()), (l, self.g_threshold.ncols()))
            .copy_from(&self.g_threshold);
        g.view_mut((0, p - 1), (l, 1)).copy_from(&self.g_gamma);
        g
    }
}

/// Coefficient covariance with rank diagnostics.
#[derive(Debug, Clone)]
pub struct CovarianceResult {
    pub vcov: DMatrix<f64>,
    pub rank_deficient: bool,
    /// Coefficients whose variance is not identified (reported without CI).
    pub affected: Vec<bool>,
    pub omega_pinv: bool,
}

/// Coefficient covariance (G' Omega^-1 G)^-1 / n.
pub fn covariance(jac: &JacobianSet, n: usize) -> Result<CovarianceResult> {
    let g = jac.stacked();
    let p = g.ncols();
    let g_rank = column_rank(&g, 1e-10);
    let mut rank_deficient = g_rank < p;

    let omega_inv = sym_pinv(&jac.omega);
    let (info, omega_pinv) = match omega_inv {
        Some(inv) => {
            let pinv = inv.clipped;
            let mut m = g.transpose() * inv.matrix * &g;
            symmetrize(&mut m);
            (m, pinv)
        }
        None => {
            // residual moments have no variation (perfect fit): the sampling
            // covariance degenerates to zero
            return Ok(CovarianceResult {
                vcov: DMatrix::zeros(p, p),
                rank_deficient,
                affected: vec![false; p],
                omega_pinv: true,
            });
        }
    };

    let (vcov, affected) = match sym_pinv(&info) {
        Some(inv) => {
            rank_deficient |= inv.clipped;
            let vcov = &inv.matrix / n as f64;
            let affected = if rank_deficient {
                // directions outside the row space of the information matrix
                let proj = &inv.matrix * &info; // ~ identity on identified span
                (0..p).map(|j| (proj[(j, j)] - 1.0).abs() > 1e-6).collect()
            } else {
                vec![false; p]
            };
            (vcov, affected)
        }
        None => (DMatrix::zeros(p, p), vec![true; p]),
    };

    Ok(CovarianceResult {
        vcov,
        rank_deficient,
        affected,
        omega_pinv,
    })
}
