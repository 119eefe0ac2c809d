//! The VBEM loop: point-estimate EM start, then alternating M- and E-steps
//! until the free energy settles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{build_system, DesignSpec, StackedSystem};
use crate::dist::{InvGamma, InvWishart};
use crate::error::{Error, Result};
use crate::estep::{build_augmented, smooth, AugmentedSystem};
use crate::model::{EpochedSeries, ParamPosterior, PosteriorState, PriorConfig, PriorSettings};
use crate::mstep::{free_energy, m_step, residual_scatter, transition_residual, update_alpha, FreeEnergy};

/// Relative drop in F that is reported as divergence.
pub const DIVERGENCE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Stop once `|dF / F| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Point-estimate EM iterations used for the starting values.
    pub em_iters: usize,
    /// Starting state-noise variance of the EM initialisation.
    pub q0: f64,
}

impl FitConfig {
    /// Loose tolerance used while comparing designs.
    pub fn selection() -> Self {
        Self { tol: 1e-2, ..Self::default() }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 200, em_iters: 10, q0: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyTrace {
    /// F after the initial step, then after every VBEM iteration.
    pub values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Set if F ever dropped by more than [`DIVERGENCE_SLACK`] relative.
    pub diverged: bool,
}

impl FreeEnergyTrace {
    pub fn last(&self) -> f64 {
        *self.values.last().expect("trace holds at least the initial value")
    }

    /// Largest relative decrease between consecutive values (0 if none).
    pub fn max_relative_drop(&self) -> f64 {
        self.values.windows(2).map(|w| (w[0] - w[1]) / w[0].abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamPosterior,
    pub state: PosteriorState,
    pub trace: FreeEnergyTrace,
    pub free_energy: FreeEnergy,
    pub prior: PriorConfig,
    pub system: StackedSystem,
}

impl FitResult {
    pub fn f(&self) -> f64 {
        self.trace.last()
    }
}

/// Fit `spec` to `series`. The support starts at `t_start` (0-based) or at
/// the design minimum.
pub fn fit(
    series: &EpochedSeries,
    spec: &DesignSpec,
    settings: &PriorSettings,
    config: &FitConfig,
    t_start: Option<usize>,
) -> Result<FitResult> {
    let system = build_system(series, spec, t_start)?;
    let prior = PriorConfig::from_settings(system.k(), system.channels, settings);
    fit_system(system, prior, config)
}

/// Point estimates `(a, q, R_j)` from plain EM on the fixed-parameter model.
pub fn em_init(
    system: &StackedSystem,
    prior: &PriorConfig,
    config: &FitConfig,
) -> Result<(Vec<f64>, f64, Vec<DMatrix<f64>>)> {
    let k = system.k();
    let n = system.n_states();
    let mut a = vec![prior.m_a; k];
    let mut q = config.q0;
    let mut r: Vec<DMatrix<f64>> = (0..system.trials).map(|j| sample_cov(system, j)).collect();
    // ML drives R to zero when a trajectory fits the data exactly (e.g. repeated trials).
    let r_floor: Vec<f64> = r.iter().map(|c| R_FLOOR * c.trace() / c.nrows() as f64).collect();
    for _ in 0..config.em_iters {
        let aug = AugmentedSystem::point(DVector::from_column_slice(&a), q, r.clone());
        let st = smooth(&aug, prior, system)?;
        if n > 1 {
            for (i, ai) in a.iter_mut().enumerate() {
                if st.m2[(i, i)] > f64::MIN_POSITIVE {
                    *ai = st.m3[(i, i)] / st.m2[(i, i)];
                }
            }
            let gamma = transition_residual(&st, &a, &vec![0.0; k]);
            q = (gamma / (k * (n - 1)) as f64).max(1e-12);
        }
        for (j, rj) in r.iter_mut().enumerate() {
            *rj = residual_scatter(&st, system, j) / n as f64 + floor(system.channels);
            for i in 0..rj.nrows() {
                rj[(i, i)] = rj[(i, i)].max(r_floor[j]);
            }
        }
    }
    if a.iter().any(|v| !v.is_finite()) || !q.is_finite() {
        return Err(Error::Numeric("EM initialisation produced non-finite values".into()));
    }
    Ok((a, q, r))
}

/// Relative floor on the diagonal of the EM estimate of each `R_j`.
const R_FLOOR: f64 = 1e-3;

fn floor(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d) * 1e-10
}

fn sample_cov(system: &StackedSystem, j: usize) -> DMatrix<f64> {
    let rows = system.block(j);
    let d = rows.len();
    let n = system.n_states() as f64;
    let mean = system.z.iter().fold(DVector::zeros(d), |acc, z| acc + z.rows(rows.start, d)) / n;
    let mut cov = system.z.iter().fold(DMatrix::zeros(d, d), |acc, z| {
        let e = z.rows(rows.start, d) - &mean;
        acc + &e * e.transpose()
    }) / n.max(1.0);
    for i in 0..d {
        if cov[(i, i)] <= 0.0 {
            cov[(i, i)] = 1.0;
        }
    }
    cov + floor(d)
}

/// Parameter posterior concentrated near the EM point estimates, with the
/// hyperparameters at their priors.
pub fn point_posterior(a: &[f64], q: f64, r: &[DMatrix<f64>], n_states: usize, prior: &PriorConfig) -> ParamPosterior {
    let k = a.len();
    let delta: Vec<InvGamma> = (0..k).map(|i| InvGamma::new(prior.kappa_p(), prior.beta_p(i))).collect();
    let alpha = update_alpha(a, &vec![0.0; k], &delta, prior);
    let q_shape = prior.n_p() + k as f64 * (n_states as f64 - 1.0) / 2.0;
    let q_shape = q_shape.max(1.0);
    let r_dof = prior.r_p() + n_states as f64;
    ParamPosterior {
        a_mean: a.to_vec(),
        a_var: vec![0.0; k],
        alpha,
        delta,
        q: InvGamma::new(q_shape, q_shape * q),
        a_q: InvGamma::new(prior.a_qp(), prior.b_qp()),
        r: r.iter().map(|rj| InvWishart::new(r_dof, rj * r_dof)).collect(),
        a_r: vec![InvGamma::new(prior.a_pr(), prior.b_pr()); prior.channels],
    }
}

/// Run VBEM on an already stacked system.
pub fn fit_system(system: StackedSystem, prior: PriorConfig, config: &FitConfig) -> Result<FitResult> {
    if !(config.tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", config.tol)));
    }
    prior.validate()?;
    if prior.k() != system.k() {
        return Err(Error::Shape("prior dimension does not match the design".into()));
    }
    let (a, q, r) = em_init(&system, &prior, config)?;
    let start = point_posterior(&a, q, &r, system.n_states(), &prior);
    let state = smooth(&AugmentedSystem::point(DVector::from_column_slice(&a), q, r), &prior, &system)?;

    let mut params = m_step(&state, &system, &start, &prior)?;
    let mut state = smooth(&build_augmented(&params)?, &prior, &system)?;
    let mut fe = free_energy(&state, &params, &prior);
    let mut trace = FreeEnergyTrace { values: vec![fe.total], converged: false, iterations: 0, diverged: false };
    check_finite(fe.total)?;

    while trace.iterations < config.max_iter {
        params = m_step(&state, &system, &params, &prior)?;
        state = smooth(&build_augmented(&params)?, &prior, &system)?;
        fe = free_energy(&state, &params, &prior);
        check_finite(fe.total)?;
        let prev = trace.last();
        trace.values.push(fe.total);
        trace.iterations += 1;
        if fe.total < prev - DIVERGENCE_SLACK * prev.abs() {
            log::warn!("free energy decreased from {prev} to {} at iteration {}", fe.total, trace.iterations);
            trace.diverged = true;
        }
        if ((fe.total - prev) / prev).abs() < config.tol {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        log::warn!("VBEM stopped after {} iterations without converging", trace.iterations);
    }
    Ok(FitResult { params, state, trace, free_energy: fe, prior, system })
}

fn check_finite(f: f64) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("free energy is {f}")))
    }
}
