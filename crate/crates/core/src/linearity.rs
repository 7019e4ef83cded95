//! Sup-Wald test of linearity (no threshold effect) with a fast multiplier
//! bootstrap.
//!
//! The threshold location is unidentified under the null, so the Wald
//! statistic for a zero threshold part is maximized over the candidate grid.
//! Critical values come from a multiplier bootstrap: per-unit standard-normal
//! draws scale the residual moments of the fitted model, and only the
//! averaged moment vector is recomputed per replicate; the per-threshold
//! solution maps and variance blocks are reused from the original sample,
//! which is what makes the procedure cheap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{closed_form_at, FittedModel, GridSpec, ProfileCache};
use crate::linalg::{sym_pinv, symmetrize};
use crate::moments::{centered_moment_covariance, MomentSystem};
use crate::rng::derive_seed;

/// Wald statistic at one candidate threshold, with the pieces the bootstrap
/// reuses: the linear map from averaged moments to the threshold-part
/// estimate and the inverse variance block.
#[derive(Debug, Clone)]
pub struct WaldPoint {
    pub gamma: f64,
    pub wald: f64,
    /// Threshold-part estimate at this gamma (jump shifts or kink slope).
    pub delta: DVector<f64>,
    /// Rows of the closed-form solution map belonging to the threshold part,
    /// k2 x l.
    delta_map: DMatrix<f64>,
    /// Inverse of the threshold-part variance block, k2 x k2.
    sigma_inv: DMatrix<f64>,
    /// Pseudo-inversion was needed somewhere in the variance chain.
    pub sigma_pinv_used: bool,
}

/// Per-grid-point Wald machinery computed once from the original sample.
#[derive(Debug, Clone)]
pub struct WaldTable {
    pub points: Vec<WaldPoint>,
    pub n: usize,
}

/// Sup-Wald outcome; bootstrap fields are empty until the bootstrap runs.
#[derive(Debug, Clone)]
pub struct LinearityResult {
    pub sup_wald: f64,
    /// (gamma, Wald) pairs across the grid.
    pub wald_curve: Vec<(f64, f64)>,
    pub boot_stats: Vec<f64>,
    /// Share of bootstrap statistics at or above the observed sup-Wald.
    pub p_value: Option<f64>,
    pub b: usize,
    pub seed: u64,
}

pub(crate) fn wald_at_cached(ms: &MomentSystem, g2m: &DMatrix<f64>, gamma: f64) -> WaldPoint {
    let k1 = ms.k1;
    let k2 = ms.k2;
    let cf = closed_form_at(ms, g2m);
    let delta = DVector::from_fn(k2, |i, _| cf.slopes[k1 + i]);
    let delta_map = cf.solution_map.rows(k1, k2).into_owned();

    let resid = ms.residual_matrix(&cf.slopes, gamma);
    if ms.is_perfect_fit(&resid) {
        // no variation in the residual moments at this threshold: a perfect
        // fit has unbounded evidence unless delta itself is zero
        let w = if delta.norm() > 0.0 { f64::INFINITY } else { 0.0 };
        return WaldPoint {
            gamma,
            wald: w,
            delta,
            delta_map,
            sigma_inv: DMatrix::zeros(k2, k2),
            sigma_pinv_used: true,
        };
    }
    let ghat = ms.residual_moments(&resid);
    let omega = centered_moment_covariance(&ghat);

    let mut pinv_used = cf.flags.used_pinv;
    let (sigma_inv, wald) = match sym_pinv(&omega) {
        Some(omega_inv) => {
            pinv_used |= omega_inv.clipped;
            let mut info = g2m.transpose() * omega_inv.matrix * g2m;
            symmetrize(&mut info);
            match sym_pinv(&info) {
                Some(info_inv) => {
                    pinv_used |= info_inv.clipped;
                    let sigma = info_inv.matrix.view((k1, k1), (k2, k2)).into_owned();
                    match sym_pinv(&sigma) {
                        Some(si) => {
                            pinv_used |= si.clipped;
                            let w = ms.n as f64
                                * (delta.transpose() * &si.matrix * &delta)[(0, 0)];
                            (si.matrix, w.max(0.0))
                        }
                        None => (DMatrix::zeros(k2, k2), 0.0),
                    }
                }
                None => {
                    pinv_used = true;
                    (DMatrix::zeros(k2, k2), 0.0)
                }
            }
        }
        None => {
            pinv_used = true;
            let w = if delta.norm() > 0.0 { f64::INFINITY } else { 0.0 };
            (DMatrix::zeros(k2, k2), w)
        }
    };

    WaldPoint {
        gamma,
        wald,
        delta,
        delta_map,
        sigma_inv,
        sigma_pinv_used: pinv_used,
    }
}

/// Wald statistic for the hypothesis of no threshold part at a fixed
/// threshold, using the system's current weight for the slope estimate and
/// the (G' Omega^-1 G)^-1 block evaluated at that estimate for the variance.
pub fn wald_at(ms: &MomentSystem, gamma: f64) -> WaldPoint {
    let g2m = ms.g2_mean(gamma);
    wald_at_cached(ms, &g2m, gamma)
}

pub(crate) fn sup_wald_cached(
    ms: &MomentSystem,
    cache: &ProfileCache,
) -> Result<(LinearityResult, WaldTable)> {
    if cache.gammas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let points: Vec<WaldPoint> = cache
        .gammas
        .par_iter()
        .zip(cache.g2.par_iter())
        .map(|(&g, g2m)| wald_at_cached(ms, g2m, g))
        .collect();
    let sup = points
        .iter()
        .map(|p| p.wald)
        .fold(f64::NEG_INFINITY, f64::max);
    let curve = points.iter().map(|p| (p.gamma, p.wald)).collect();
    Ok((
        LinearityResult {
            sup_wald: sup,
            wald_curve: curve,
            boot_stats: Vec::new(),
            p_value: None,
            b: 0,
            seed: 0,
        },
        WaldTable {
            points,
            n: ms.n,
        },
    ))
}

/// Maximize the Wald statistic over the candidate grid.
pub fn sup_wald(ms: &MomentSystem, grid: &GridSpec) -> Result<(LinearityResult, WaldTable)> {
    let cache = ProfileCache::build(ms, grid);
    sup_wald_cached(ms, &cache)
}

/// Multiplier bootstrap: per replicate, one standard-normal draw per unit
/// scales that unit's residual moment row, the averaged moment is rebuilt,
/// and the per-threshold solution maps and variance blocks from the original
/// sample are reused. Deterministic per (seed, replicate index) regardless of
/// scheduling.
pub fn bootstrap_linearity(
    table: &WaldTable,
    sup_wald: f64,
    residual_moments: &DMatrix<f64>,
    b: usize,
    seed: u64,
) -> (Vec<f64>, f64) {
    let n = table.n;
    let stats: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
            let eta = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let gbar_star = residual_moments.transpose() * &eta / n as f64;
            let mut sup = 0.0_f64;
            for point in &table.points {
                let d = &point.delta_map * &gbar_star;
                let w = n as f64 * (d.transpose() * &point.sigma_inv * &d)[(0, 0)];
                sup = sup.max(w);
            }
            sup
        })
        .collect();
    let hits = stats.iter().filter(|&&s| s >= sup_wald).count();
    (stats, hits as f64 / b as f64)
}

/// Sup-Wald test with multiplier bootstrap p-value for a fitted model. The
/// grid and the second-step weight of the fit are reused; `b = 0` skips the
/// bootstrap.
pub fn linearity_test(model: &FittedModel, b: usize, seed: u64) -> Result<LinearityResult> {
    let (mut result, table) = sup_wald_cached(&model.system, &model.cache)?;
    result.seed = seed;
    if b > 0 {
        let ghat = model.system.residual_moments(&model.estimate.residuals);
        let (stats, p) = bootstrap_linearity(&table, result.sup_wald, &ghat, b, seed);
        result.boot_stats = stats;
        result.p_value = Some(p);
        result.b = b;
    }
    Ok(result)
}
