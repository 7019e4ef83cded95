//! Monte Carlo experiments for the linearity test: a threshold
//! autoregression with an exogenous driver, plus size and power drivers that
//! compare sup-Wald statistics against a one-draw-per-iteration bootstrap
//! critical value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::fit;
use crate::linearity::linearity_test;
use crate::moments::ModelSpec;
use crate::panel::{PanelData, Record};
use crate::rng::derive_seed;

/// Parameters of the simulated threshold autoregression
/// y_it = b1 y_{i,t-1} + b2 x_it + (d0 + d1 y_{i,t-1} + d2 x_it) 1{x_it > 0}
///        + mu_i + eps_it,
/// with x and eps independent centered normals.
#[derive(Debug, Clone)]
pub struct DgpParams {
    pub beta1: f64,
    pub beta2: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub n: usize,
    pub t_len: usize,
    pub sigma_x: f64,
    pub sigma_eps: f64,
    /// Initial periods discarded so the recursion starts near its stationary
    /// distribution.
    pub burn_in: usize,
    /// Draw unit effects mu_i ~ N(0,1); off by default.
    pub fixed_effects: bool,
}

impl DgpParams {
    pub fn new(coefs: [f64; 5], n: usize, t_len: usize) -> Self {
        DgpParams {
            beta1: coefs[0],
            beta2: coefs[1],
            delta0: coefs[2],
            delta1: coefs[3],
            delta2: coefs[4],
            n,
            t_len,
            sigma_x: 1.0,
            sigma_eps: 0.25,
            burn_in: 50,
            fixed_effects: false,
        }
    }

    /// Both regimes of the autoregression must be stable.
    pub fn is_stable(&self) -> bool {
        self.beta1.abs() < 1.0 && (self.beta1 + self.delta1).abs() < 1.0
    }
}

/// Simulate a balanced panel from the threshold autoregression. Draw order
/// per unit: optional fixed effect, then (x, eps) per period including
/// burn-in. Deterministic given the seed.
pub fn generate_dgp(params: &DgpParams, seed: u64) -> Result<PanelData> {
    if !params.is_stable() {
        return Err(Error::UnstableParams);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.burn_in + params.t_len;
    let mut records = Vec::with_capacity(params.n * params.t_len);
    for i in 0..params.n {
        let mu = if params.fixed_effects {
            rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let mut y_prev = 0.0;
        for t in 0..total {
            let x = params.sigma_x * rng.sample::<f64, _>(StandardNormal);
            let eps = params.sigma_eps * rng.sample::<f64, _>(StandardNormal);
            let regime = if x > 0.0 { 1.0 } else { 0.0 };
            let y = params.beta1 * y_prev
                + params.beta2 * x
                + (params.delta0 + params.delta1 * y_prev + params.delta2 * x) * regime
                + mu
                + eps;
            if t >= params.burn_in {
                records.push(Record {
                    unit: (i + 1).to_string(),
                    time: (t - params.burn_in + 1) as f64,
                    values: vec![Some(y), Some(x)],
                });
            }
            y_prev = y;
        }
    }
    PanelData::from_records(vec!["y".into(), "x".into()], records)
}

/// Tuning of a size or power experiment.
#[derive(Debug, Clone)]
pub struct ExperimentDesign {
    pub iters: usize,
    pub grid_num: usize,
    pub trim_rate: f64,
    pub h0: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ExperimentDesign {
    fn default() -> Self {
        ExperimentDesign {
            iters: 500,
            grid_num: 100,
            trim_rate: 0.4,
            h0: 1.5,
            alpha: 0.05,
            seed: 1,
        }
    }
}

/// One Monte Carlo iteration: the observed statistic and its single
/// bootstrap companion.
#[derive(Debug, Clone, Copy)]
pub struct SimDraw {
    pub sup_w: f64,
    pub sup_w_star: f64,
}

/// Experiment outcome: rejection rate of sup-W against the bootstrap
/// critical value, with the raw draws retained.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rejection_rate: f64,
    pub critical_value: f64,
    pub draws: Vec<SimDraw>,
}

/// Empirical percentile as the order statistic with rank ceil(p * m).
pub fn empirical_percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len();
    let rank = ((p * m as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(m) - 1]
}

/// Model specification used throughout the experiments: dynamic jump model
/// with the exogenous driver as both regressor and threshold variable.
fn experiment_spec(design: &ExperimentDesign) -> ModelSpec {
    let mut spec = ModelSpec::new("y", "x");
    spec.regressors = vec!["x".into()];
    spec.grid_num = design.grid_num;
    spec.trim_rate = design.trim_rate;
    spec.h0 = design.h0;
    spec
}

/// Run the Monte Carlo protocol: per iteration simulate a panel, fit the
/// threshold model, record sup-W and one bootstrap sup-W*; reject when sup-W
/// exceeds the empirical (1 - alpha) percentile of the sup-W* draws.
pub fn run_experiment(params: &DgpParams, design: &ExperimentDesign) -> Result<ExperimentResult> {
    if design.iters == 0 {
        return Err(Error::DegenerateSample);
    }
    let spec = experiment_spec(design);
    let draws: Result<Vec<SimDraw>> = (0..design.iters)
        .into_par_iter()
        .map(|it| {
            let data_seed = derive_seed(design.seed, 2 * it as u64);
            let boot_seed = derive_seed(design.seed, 2 * it as u64 + 1);
            let data = generate_dgp(params, data_seed)?;
            let model = fit(&spec, &data)?;
            let lin = linearity_test(&model, 1, boot_seed)?;
            Ok(SimDraw {
                sup_w: lin.sup_wald,
                sup_w_star: lin.boot_stats[0],
            })
        })
        .collect();
    let draws = draws?;
    let stars: Vec<f64> = draws.iter().map(|d| d.sup_w_star).collect();
    let critical_value = empirical_percentile(&stars, 1.0 - design.alpha);
    let rejections = draws.iter().filter(|d| d.sup_w > critical_value).count();
    Ok(ExperimentResult {
        rejection_rate: rejections as f64 / design.iters as f64,
        critical_value,
        draws,
    })
}

/// Size experiment: linear data (all threshold shifts zero), N = 500,
/// T = 12, 100 grid points.
pub fn run_size_experiment(iters: usize, seed: u64) -> Result<ExperimentResult> {
    let params = DgpParams::new([0.5, 0.8, 0.0, 0.0, 0.0], 500, 12);
    let design = ExperimentDesign {
        iters,
        seed,
        ..ExperimentDesign::default()
    };
    run_experiment(&params, &design)
}

/// Power experiment under a chosen coefficient vector, same design as the
/// size run.
pub fn run_power_experiment(coefs: [f64; 5], iters: usize, seed: u64) -> Result<ExperimentResult> {
    let params = DgpParams::new(coefs, 500, 12);
    let design = ExperimentDesign {
        iters,
        seed,
        ..ExperimentDesign::default()
    };
    run_experiment(&params, &design)
}
