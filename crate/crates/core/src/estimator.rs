//! Two-step GMM estimation of the threshold location and slopes.
//!
//! For each candidate threshold the slope problem is linear and solved in
//! closed form; the threshold itself comes from a grid search over empirical
//! quantiles of the pooled threshold variable. The first step weights moments
//! with the block-tridiagonal matrix implied by differenced i.i.d. errors,
//! the second step with the inverse covariance of the first-step residual
//! moments (Seo & Shin 2016, Journal of Econometrics 195).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::avar::{self, JacobianSet};
use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, sym_pinv, CONDITION_FLAG};
use crate::moments::{weight_second_step, centered_moment_covariance, ModelSpec, MomentSystem};
use crate::panel::{PanelData, TransformedPanel};

/// Candidate thresholds: empirical quantiles of the pooled threshold variable
/// with `trim_rate / 2` trimmed from each tail.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub points: Vec<f64>,
    pub grid_num: usize,
    pub trim_rate: f64,
}

impl GridSpec {
    /// Quantile grid over a pooled sample (unsorted input accepted).
    pub fn from_pooled(pooled: &[f64], grid_num: usize, trim_rate: f64) -> Result<Self> {
        if pooled.is_empty() || grid_num == 0 {
            return Err(Error::EmptyGrid);
        }
        let mut sorted = pooled.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut points = Vec::with_capacity(grid_num);
        for j in 0..grid_num {
            let p = if grid_num == 1 {
                0.5
            } else {
                trim_rate / 2.0 + j as f64 * (1.0 - trim_rate) / (grid_num as f64 - 1.0)
            };
            points.push(quantile_sorted(&sorted, p));
        }
        points.dedup();
        Ok(GridSpec {
            points,
            grid_num,
            trim_rate,
        })
    }

    /// Grid from explicit candidate values (sorted, de-duplicated).
    pub fn from_points(mut points: Vec<f64>, trim_rate: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyGrid);
        }
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        let grid_num = points.len();
        Ok(GridSpec {
            points,
            grid_num,
            trim_rate,
        })
    }
}

/// Numerical health of one closed-form solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct GramFlags {
    /// Condition number of the Gram matrix exceeded the flag threshold.
    pub near_singular: bool,
    /// Eigenvalue clipping kicked in (pseudo-inverse solution).
    pub used_pinv: bool,
}

/// Closed-form slope solution at a fixed threshold.
#[derive(Debug, Clone)]
pub struct ClosedForm {
    pub slopes: DVector<f64>,
    pub criterion: f64,
    pub flags: GramFlags,
    /// Linear map from the averaged moment g1_bar to the slope estimate;
    /// reused by the multiplier bootstrap.
    pub solution_map: DMatrix<f64>,
}

/// Solve the profiled slope problem given the cached averaged moment
/// derivative `g2_mean` evaluated at the candidate threshold.
pub(crate) fn closed_form_at(ms: &MomentSystem, g2_mean: &DMatrix<f64>) -> ClosedForm {
    let g2w = g2_mean.transpose() * &ms.w; // k x l
    let mut gram = &g2w * g2_mean; // k x k
    crate::linalg::symmetrize(&mut gram);
    let b = &g2w * ms.g1_mean();
    let k = gram.nrows();
    let (solution_map, flags) = match sym_pinv(&gram) {
        Some(inv) => (
            inv.matrix * &g2w,
            GramFlags {
                near_singular: inv.condition > CONDITION_FLAG || inv.clipped,
                used_pinv: inv.clipped,
            },
        ),
        None => (
            DMatrix::zeros(k, ms.l),
            GramFlags {
                near_singular: true,
                used_pinv: true,
            },
        ),
    };
    let slopes = if flags.used_pinv {
        &solution_map * ms.g1_mean()
    } else {
        // same quantity, but solve through the Gram factor for accuracy
        match gram.clone().cholesky() {
            Some(chol) => chol.solve(&b),
            None => &solution_map * ms.g1_mean(),
        }
    };
    let gbar = ms.g1_mean() - g2_mean * &slopes;
    let mut criterion = (gbar.transpose() * &ms.w * &gbar)[(0, 0)];
    if criterion < 0.0 && criterion > -1e-12 {
        criterion = 0.0;
    }
    ClosedForm {
        slopes,
        criterion,
        flags,
        solution_map,
    }
}

/// Profiled slope solution at a fixed threshold.
pub fn closed_form_slopes(ms: &MomentSystem, gamma: f64) -> ClosedForm {
    let g2m = ms.g2_mean(gamma);
    closed_form_at(ms, &g2m)
}

/// Averaged moment derivatives cached per grid point; they do not depend on
/// the weight matrix, so both estimation steps and the Wald sweep share them.
#[derive(Debug, Clone)]
pub struct ProfileCache {
    pub gammas: Vec<f64>,
    pub g2: Vec<DMatrix<f64>>,
}

impl ProfileCache {
    pub fn build(ms: &MomentSystem, grid: &GridSpec) -> Self {
        let g2: Vec<DMatrix<f64>> = grid
            .points
            .par_iter()
            .map(|&g| ms.g2_mean(g))
            .collect();
        ProfileCache {
            gammas: grid.points.clone(),
            g2,
        }
    }
}

/// Result of the grid search: the minimizing threshold with its slopes.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub gamma: f64,
    pub gamma_index: usize,
    pub slopes: DVector<f64>,
    pub criterion: f64,
    pub flags: GramFlags,
    /// Flags aggregated across all grid points.
    pub any_near_singular: usize,
    pub any_pinv: usize,
}

pub(crate) fn grid_search_cached(
    ms: &MomentSystem,
    cache: &ProfileCache,
) -> Result<GridSearchResult> {
    if cache.gammas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let evals: Vec<ClosedForm> = cache
        .g2
        .par_iter()
        .map(|g2m| closed_form_at(ms, g2m))
        .collect();
    let mut best: Option<usize> = None;
    let mut near = 0;
    let mut pinv = 0;
    for (idx, cf) in evals.iter().enumerate() {
        if cf.flags.near_singular {
            near += 1;
        }
        if cf.flags.used_pinv {
            pinv += 1;
        }
        if !cf.criterion.is_finite() {
            continue;
        }
        // ties keep the earlier (smaller) gamma
        best = match best {
            None => Some(idx),
            Some(b) if cf.criterion < evals[b].criterion => Some(idx),
            Some(b) => Some(b),
        };
    }
    let idx = best.ok_or(Error::AllGridPointsSingular)?;
    let chosen = &evals[idx];
    Ok(GridSearchResult {
        gamma: cache.gammas[idx],
        gamma_index: idx,
        slopes: chosen.slopes.clone(),
        criterion: chosen.criterion,
        flags: chosen.flags,
        any_near_singular: near,
        any_pinv: pinv,
    })
}

/// Minimize the profiled criterion over the grid. Ties break toward the
/// smallest threshold so results do not depend on evaluation order.
pub fn grid_search(ms: &MomentSystem, grid: &GridSpec) -> Result<GridSearchResult> {
    let cache = ProfileCache::build(ms, grid);
    grid_search_cached(ms, &cache)
}

/// Which weighting produced the reported estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightStage {
    First,
    Second,
}

/// Threshold-part coefficients: the full shift vector for the jump model or
/// the single kink slope.
#[derive(Debug, Clone)]
pub enum ThresholdCoef {
    Jump(DVector<f64>),
    Kink(f64),
}

impl ThresholdCoef {
    pub fn as_vector(&self) -> DVector<f64> {
        match self {
            ThresholdCoef::Jump(v) => v.clone(),
            ThresholdCoef::Kink(k) => DVector::from_element(1, *k),
        }
    }
}

/// Numerical warnings accumulated during estimation.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub first_step_weight_pinv: bool,
    pub second_step_weight_pinv: bool,
    pub near_singular_grid_points: usize,
    pub pinv_grid_points: usize,
    pub omega_pinv: bool,
    pub rank_deficient_jacobian: bool,
}

/// Full estimation output: coefficients, covariance, intervals, residuals.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub beta: DVector<f64>,
    pub threshold: ThresholdCoef,
    pub gamma: f64,
    /// Covariance of (beta, threshold part, gamma), (k1+k2+1) square.
    pub vcov: DMatrix<f64>,
    /// Standard errors; `None` where the Jacobian is rank deficient.
    pub se: Vec<Option<f64>>,
    /// 95 percent intervals coef +/- 1.96 se.
    pub ci95: Vec<Option<(f64, f64)>>,
    pub criterion_value: f64,
    pub weight_stage: WeightStage,
    /// Differenced residuals at the final estimate, n x (T - t0 + 1).
    pub residuals: DMatrix<f64>,
    /// Design regressor names (lagged dependent variable first when dynamic).
    pub regressor_names: Vec<String>,
    pub bandwidth: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    /// All reported coefficients in (beta, threshold part, gamma) order.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        v.extend(self.threshold.as_vector().iter().copied());
        v.push(self.gamma);
        v
    }

    pub fn k1(&self) -> usize {
        self.beta.len()
    }
}

/// A fitted model bundling the estimate with the moment system (carrying the
/// second-step weight) and the threshold grid, ready for the linearity test.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub transformed: TransformedPanel,
    pub system: MomentSystem,
    pub grid: GridSpec,
    pub cache: ProfileCache,
    pub estimate: Estimate,
}

/// Run the full two-step procedure and keep the estimation context.
pub fn fit(spec: &ModelSpec, data: &PanelData) -> Result<FittedModel> {
    spec.validate()?;
    let tp = TransformedPanel::build(
        data,
        &spec.depvar,
        &spec.threshold_var,
        &spec.design_regressors(),
        spec.dynamic,
    )?;
    let mut ms = MomentSystem::build(spec, data, &tp)?;
    let grid = GridSpec::from_pooled(&tp.pooled_q_sorted(), spec.grid_num, spec.trim_rate)?;
    let cache = ProfileCache::build(&ms, &grid);

    let mut diagnostics = Diagnostics {
        first_step_weight_pinv: ms.first_step_weight_pinv,
        ..Diagnostics::default()
    };

    // first step
    let step1 = grid_search_cached(&ms, &cache)?;
    let resid1 = ms.residual_matrix(&step1.slopes, step1.gamma);
    // A (numerically) perfect first-step fit leaves nothing to invert; keep
    // the first-step weight in that case.
    let weight_stage = if ms.is_perfect_fit(&resid1) {
        WeightStage::First
    } else {
        let ghat1 = ms.residual_moments(&resid1);
        match weight_second_step(&ghat1) {
            Ok(w2) => {
                diagnostics.second_step_weight_pinv = w2.used_pseudo_inverse;
                ms.set_weight(w2.matrix);
                WeightStage::Second
            }
            Err(Error::SingularWeight) => WeightStage::First,
            Err(e) => return Err(e),
        }
    };

    // second step with the updated weight
    let step2 = grid_search_cached(&ms, &cache)?;
    diagnostics.near_singular_grid_points = step2.any_near_singular;
    diagnostics.pinv_grid_points = step2.any_pinv;

    let residuals = ms.residual_matrix(&step2.slopes, step2.gamma);
    let omega = if ms.is_perfect_fit(&residuals) {
        DMatrix::zeros(ms.l, ms.l)
    } else {
        let ghat2 = ms.residual_moments(&residuals);
        centered_moment_covariance(&ghat2)
    };

    let k1 = ms.k1;
    let beta = DVector::from_fn(k1, |i, _| step2.slopes[i]);
    let threshold = if spec.kink {
        ThresholdCoef::Kink(step2.slopes[k1])
    } else {
        ThresholdCoef::Jump(DVector::from_fn(k1 + 1, |i, _| step2.slopes[k1 + i]))
    };

    // asymptotic covariance
    let g_beta = avar::g_beta_hat(&ms);
    let (g_threshold, g_gamma, bandwidth) = if spec.kink {
        let g_kappa = avar::g_kappa_hat(&ms, step2.gamma);
        let kappa = step2.slopes[k1];
        let g_gamma = avar::g_gamma_hat_kink(&ms, kappa, step2.gamma);
        (g_kappa, g_gamma, None)
    } else {
        let g_delta = avar::g_delta_hat(&ms, step2.gamma);
        let delta = threshold.as_vector();
        let pooled = tp.pooled_q_estimation(ms.t0);
        let h = avar::silverman_bandwidth(&pooled, spec.h0)?;
        let g_gamma = avar::g_gamma_hat_jump(&ms, &delta, step2.gamma, h);
        (g_delta, g_gamma, Some(h))
    };
    let jac = JacobianSet {
        g_beta,
        g_threshold,
        g_gamma,
        omega,
        bandwidth,
    };
    let cov = avar::covariance(&jac, ms.n)?;
    diagnostics.omega_pinv = cov.omega_pinv;
    diagnostics.rank_deficient_jacobian = cov.rank_deficient;

    let coefs: Vec<f64> = {
        let mut v: Vec<f64> = beta.iter().copied().collect();
        v.extend(threshold.as_vector().iter().copied());
        v.push(step2.gamma);
        v
    };
    let mut se = Vec::with_capacity(coefs.len());
    let mut ci95 = Vec::with_capacity(coefs.len());
    for (j, &c) in coefs.iter().enumerate() {
        let var = cov.vcov[(j, j)];
        if cov.affected[j] || !var.is_finite() || var < 0.0 {
            se.push(None);
            ci95.push(None);
        } else {
            let s = var.sqrt();
            se.push(Some(s));
            ci95.push(Some((c - 1.96 * s, c + 1.96 * s)));
        }
    }

    let estimate = Estimate {
        beta,
        threshold,
        gamma: step2.gamma,
        vcov: cov.vcov,
        se,
        ci95,
        criterion_value: step2.criterion,
        weight_stage,
        residuals,
        regressor_names: tp.regressor_names.clone(),
        bandwidth,
        diagnostics,
    };
    Ok(FittedModel {
        spec: spec.clone(),
        transformed: tp,
        system: ms,
        grid,
        cache,
        estimate,
    })
}

/// Two-step estimate without the estimation context.
pub fn two_step_estimate(spec: &ModelSpec, data: &PanelData) -> Result<Estimate> {
    fit(spec, data).map(|m| m.estimate)
}

/// Differenced residuals dy_it - dx_it' beta - threshold term, at arbitrary
/// parameter values. `slopes` holds (beta..., delta... | kappa).
pub fn residuals(
    spec: &ModelSpec,
    data: &PanelData,
    slopes: &[f64],
    gamma: f64,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let tp = TransformedPanel::build(
        data,
        &spec.depvar,
        &spec.threshold_var,
        &spec.design_regressors(),
        spec.dynamic,
    )?;
    let ms = MomentSystem::build(spec, data, &tp)?;
    let k = ms.k1 + ms.k2;
    if slopes.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} slope values, expected {}",
            slopes.len(),
            k
        )));
    }
    Ok(ms.residual_matrix(&DVector::from_column_slice(slopes), gamma))
}
