//! Variational M-step: closed-form conjugate updates of every parameter
//! posterior, and the free energy.
//!
//! Updates run in the order delta, alpha, A, a_q, Q, a_r, R so each one
//! sees the freshest moments of its neighbours.

use nalgebra::DMatrix;

use crate::design::StackedSystem;
use crate::dist::{InvGamma, InvWishart};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, robust_cholesky};
use crate::model::{ParamPosterior, PosteriorState, PriorConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `q(delta_i) = IG(kappa_p + c_p, beta_p + <alpha_i^{-1}>)`.
pub fn update_delta(alpha: &[InvGamma], prior: &PriorConfig) -> Vec<InvGamma> {
    alpha
        .iter()
        .enumerate()
        .map(|(i, a)| InvGamma::new(prior.kappa_p() + prior.c_p(), prior.beta_p(i) + a.mean_inv()))
        .collect()
}

/// `q(alpha_i) = IG(c_p + 1/2, <delta_i^{-1}> + <(A_ii - m_A)^2> / 2)`.
pub fn update_alpha(a_mean: &[f64], a_var: &[f64], delta: &[InvGamma], prior: &PriorConfig) -> Vec<InvGamma> {
    let m = prior.m_a;
    a_mean
        .iter()
        .zip(a_var)
        .zip(delta)
        .map(|((&mu, &theta), dl)| {
            InvGamma::new(prior.c_p() + 0.5, dl.mean_inv() + 0.5 * (theta + mu * mu + m * m - 2.0 * m * mu))
        })
        .collect()
}

/// Gaussian `q(A_ii)`; returns `(means, variances)`.
pub fn update_a(state: &PosteriorState, q: &InvGamma, alpha: &[InvGamma], prior: &PriorConfig) -> (Vec<f64>, Vec<f64>) {
    let q_prec = q.mean_inv();
    alpha
        .iter()
        .enumerate()
        .map(|(i, al)| {
            let a_prec = al.mean_inv();
            let theta = 1.0 / (q_prec * state.m2[(i, i)] + a_prec);
            let psi = a_prec * prior.m_a + q_prec * state.m3[(i, i)];
            (psi * theta, theta)
        })
        .unzip()
}

/// `q(a_q) = IG(a_qp + n_p, b_qp + <q^{-1}>)`.
pub fn update_aq(q: &InvGamma, prior: &PriorConfig) -> InvGamma {
    InvGamma::new(prior.a_qp() + prior.n_p(), prior.b_qp() + q.mean_inv())
}

/// Expected transition residual
/// `sum_i [M1_ii - 2 M3_ii <A_ii> + M2_ii (<A_ii>^2 + var A_ii)]`.
pub fn transition_residual(state: &PosteriorState, a_mean: &[f64], a_var: &[f64]) -> f64 {
    a_mean
        .iter()
        .zip(a_var)
        .enumerate()
        .map(|(i, (&mu, &theta))| state.m1[(i, i)] - 2.0 * state.m3[(i, i)] * mu + state.m2[(i, i)] * (mu * mu + theta))
        .sum()
}

/// `q(q) = IG(n_p + k(T-1)/2, <a_q^{-1}> + Gamma/2)`.
pub fn update_q(
    state: &PosteriorState,
    a_mean: &[f64],
    a_var: &[f64],
    a_q: &InvGamma,
    prior: &PriorConfig,
) -> InvGamma {
    let k = a_mean.len() as f64;
    let n = state.len() as f64;
    let mut gamma = transition_residual(state, a_mean, a_var);
    if gamma < 0.0 {
        log::warn!("negative transition residual {gamma:e} clamped to zero");
        gamma = 0.0;
    }
    InvGamma::new(prior.n_p() + k * (n - 1.0) / 2.0, a_q.mean_inv() + 0.5 * gamma)
}

/// `q(a_r,i) = IG(a_pr + N r_p / 2, b_pr + nu sum_j <R_j^{-1}>_ii)`.
pub fn update_ar(r: &[InvWishart], prior: &PriorConfig) -> Vec<InvGamma> {
    let d = prior.channels;
    let shape = prior.a_pr() + r.len() as f64 * prior.r_p() / 2.0;
    let prec: Vec<DMatrix<f64>> = r.iter().map(InvWishart::mean_inv).collect();
    (0..d)
        .map(|i| InvGamma::new(shape, prior.b_pr() + prior.nu * prec.iter().map(|p| p[(i, i)]).sum::<f64>()))
        .collect()
}

/// Prior scale `2 nu diag(<a_r^{-1}>)` of every `R_j`.
pub fn r_prior_scale(a_r: &[InvGamma], nu: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(a_r.len(), a_r.iter().map(|a| 2.0 * nu * a.mean_inv())))
}

/// Expected residual scatter `sum_t <(Z - C phi)(Z - C phi)'>` of trial `j`.
pub fn residual_scatter(state: &PosteriorState, system: &StackedSystem, j: usize) -> DMatrix<f64> {
    let rows = system.block(j);
    let d = rows.len();
    let mut out = DMatrix::zeros(d, d);
    for s in 0..state.len() {
        let c = system.c[s].rows(rows.start, d);
        let e = system.z[s].rows(rows.start, d) - c * &state.mu_s[s];
        out += &e * e.transpose();
        out += c * &state.sigma_s[s] * c.transpose();
    }
    out
}

/// `q(R_j) = IW(r_p + T, 2 nu diag(<a_r^{-1}>) + residual scatter_j)`.
pub fn update_r(
    state: &PosteriorState,
    system: &StackedSystem,
    a_r: &[InvGamma],
    prior: &PriorConfig,
) -> Vec<InvWishart> {
    let base = r_prior_scale(a_r, prior.nu);
    let dof = prior.r_p() + state.len() as f64;
    (0..system.trials)
        .map(|j| {
            let mut scale = &base + residual_scatter(state, system, j);
            crate::linalg::symmetrize(&mut scale);
            InvWishart::new(dof, scale)
        })
        .collect()
}

/// One full M-step.
pub fn m_step(
    state: &PosteriorState,
    system: &StackedSystem,
    params: &ParamPosterior,
    prior: &PriorConfig,
) -> Result<ParamPosterior> {
    if state.k() != params.k() || state.k() != prior.k() {
        return Err(Error::Shape("posterior state and parameters disagree in k".into()));
    }
    let delta = update_delta(&params.alpha, prior);
    let alpha = update_alpha(&params.a_mean, &params.a_var, &delta, prior);
    let (a_mean, a_var) = update_a(state, &params.q, &alpha, prior);
    let a_q = update_aq(&params.q, prior);
    let q = update_q(state, &a_mean, &a_var, &a_q, prior);
    let a_r = update_ar(&params.r, prior);
    let r = update_r(state, system, &a_r, prior);
    let out = ParamPosterior { a_mean, a_var, alpha, delta, q, a_q, r, a_r };
    out.validate()?;
    Ok(out)
}

/// Free energy and its pieces. Every `*_term` is `<ln p> - <ln q>` for
/// that block, i.e. minus its KL divergence from the (hierarchical) prior.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FreeEnergy {
    pub total: f64,
    /// Expected complete-data log likelihood plus the entropy of `q(phi)`.
    pub data: f64,
    pub a_term: f64,
    pub alpha_term: f64,
    pub delta_term: f64,
    pub q_term: f64,
    pub aq_term: f64,
    pub r_term: f64,
    pub ar_term: f64,
}

/// Mean-field free energy for `params` and the state posterior `state`,
/// which must come from the E-step run on `params`.
///
/// The trajectory part uses the log normalizer of the augmented system,
/// corrected for the difference between `ln <q^{-1}>^{-1}` and `<ln q>`
/// (likewise for each `R_j`).
pub fn free_energy(state: &PosteriorState, params: &ParamPosterior, prior: &PriorConfig) -> FreeEnergy {
    let k = params.k() as f64;
    let n = state.len() as f64;

    let q_tilde_ln = -params.q.mean_inv().ln();
    let mut data = state.log_normalizer + (n - 1.0) * k / 2.0 * (q_tilde_ln - params.q.mean_log());
    for r in &params.r {
        let prec = r.mean_inv();
        let ln_r_tilde = -robust_cholesky(&prec).map_or(f64::NAN, |c| chol_logdet(&c));
        data += n / 2.0 * (ln_r_tilde - r.mean_logdet());
    }

    let mut a_term = 0.0;
    for i in 0..params.k() {
        let theta = params.a_var[i];
        let dev = params.a_mean[i] - prior.m_a;
        let al = &params.alpha[i];
        a_term += -0.5 * LN_2PI - 0.5 * al.mean_log() - 0.5 * al.mean_inv() * (theta + dev * dev);
        if theta > 0.0 {
            a_term += 0.5 * (LN_2PI + 1.0 + theta.ln());
        }
    }

    let alpha_term: f64 = params
        .alpha
        .iter()
        .zip(&params.delta)
        .map(|(al, dl)| al.expected_log_density(prior.c_p(), -dl.mean_log(), dl.mean_inv()) + al.entropy())
        .sum();
    let delta_term: f64 =
        params.delta.iter().enumerate().map(|(i, dl)| -dl.kl(&InvGamma::new(prior.kappa_p(), prior.beta_p(i)))).sum();
    let q_term =
        params.q.expected_log_density(prior.n_p(), -params.a_q.mean_log(), params.a_q.mean_inv()) + params.q.entropy();
    let aq_term = -params.a_q.kl(&InvGamma::new(prior.a_qp(), prior.b_qp()));

    let d = prior.channels as f64;
    let mean_logdet_b = d * (2.0 * prior.nu).ln() - params.a_r.iter().map(InvGamma::mean_log).sum::<f64>();
    let mean_b = r_prior_scale(&params.a_r, prior.nu);
    let r_term: f64 =
        params.r.iter().map(|r| r.expected_log_density(prior.r_p(), mean_logdet_b, &mean_b) + r.entropy()).sum();
    let ar_prior = InvGamma::new(prior.a_pr(), prior.b_pr());
    let ar_term = -params.a_r.iter().map(|a| a.kl(&ar_prior)).sum::<f64>();

    let total = data + a_term + alpha_term + delta_term + q_term + aq_term + r_term + ar_term;
    FreeEnergy { total, data, a_term, alpha_term, delta_term, q_term, aq_term, r_term, ar_term }
}
