//! Variational E-step: Kalman filter and RTS smoother on the augmented
//! system whose posterior equals `q*(phi_1..T)`.
//!
//! Taking expectations of the complete-data log density over the parameter
//! posteriors yields an ordinary linear-Gaussian model with
//!
//! * transition `<A>` and state noise `<Q^{-1}>^{-1}`,
//! * per-trial observation noise `<R_j^{-1}>^{-1}`,
//! * extra pseudo-observations `0 = U_A phi_t + e_t`, `e_t ~ N(0, I_k)`, for
//!   every `t` that has a successor, with `U_A'U_A = diag(var(A_ii) <q^{-1}>)`.
//!
//! Data rows are processed trial block by trial block (the stacked noise is
//! block diagonal), then the pseudo-observation rows.

use nalgebra::{DMatrix, DVector};

use crate::design::StackedSystem;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_logpdf, robust_cholesky, spd_inverse, symmetrize};
use crate::model::{ParamPosterior, PosteriorState, PriorConfig};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Point parameters of the augmented system.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    /// Diagonal of `<A>`.
    pub a: DVector<f64>,
    /// State-noise variance of the augmented model, `1 / <q^{-1}>`.
    pub q: f64,
    /// Diagonal of `U_A`.
    pub u: DVector<f64>,
    /// Per-trial observation covariances `<R_j^{-1}>^{-1}`.
    pub r: Vec<DMatrix<f64>>,
}

impl AugmentedSystem {
    /// Fixed-parameter system (no fluctuation rows).
    pub fn point(a: DVector<f64>, q: f64, r: Vec<DMatrix<f64>>) -> Self {
        let k = a.len();
        Self { a, q, u: DVector::zeros(k), r }
    }

    pub fn k(&self) -> usize {
        self.a.len()
    }

    /// Augmented regressor `[C_t; U_A]` for state time `s` of `system`.
    pub fn c_tilde(&self, system: &StackedSystem, s: usize) -> DMatrix<f64> {
        let c = &system.c[s];
        let k = self.k();
        let mut out = DMatrix::zeros(c.nrows() + k, k);
        out.rows_mut(0, c.nrows()).copy_from(c);
        for i in 0..k {
            out[(c.nrows() + i, i)] = self.u[i];
        }
        out
    }

    /// Augmented observation `[Z_t; 0_k]`.
    pub fn z_tilde(&self, system: &StackedSystem, s: usize) -> DVector<f64> {
        let z = &system.z[s];
        let mut out = DVector::zeros(z.len() + self.k());
        out.rows_mut(0, z.len()).copy_from(z);
        out
    }
}

/// Collapse the parameter posteriors into the augmented system.
pub fn build_augmented(param: &ParamPosterior) -> Result<AugmentedSystem> {
    let q_prec = param.q.mean_inv();
    if !q_prec.is_finite() || q_prec <= 0.0 {
        return Err(Error::Numeric(format!("<q^-1> = {q_prec} is not a positive finite value")));
    }
    if param.a_mean.iter().chain(&param.a_var).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite moment of A".into()));
    }
    let a = DVector::from_column_slice(&param.a_mean);
    let u = DVector::from_iterator(param.k(), param.a_var.iter().map(|&v| (v.max(0.0) * q_prec).sqrt()));
    let r = param
        .r
        .iter()
        .map(|w| {
            let prec = w.mean_inv();
            if prec.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite <R^-1>".into()));
            }
            spd_inverse(&prec).ok_or_else(|| Error::Numeric("<R^-1> is not positive definite".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedSystem { a, q: 1.0 / q_prec, u, r })
}

/// Measurement update with observation `z = H phi + e`, `e ~ N(0, noise)`.
/// Returns the predictive log density of `z`.
fn measure(
    mu: &mut DVector<f64>,
    sigma: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    z: &DVector<f64>,
    noise: &DMatrix<f64>,
    time: usize,
) -> Result<f64> {
    let ph = &*sigma * h.transpose();
    let s = h * &ph + noise;
    let chol = robust_cholesky(&s).ok_or(Error::Singular { time })?;
    let resid = z - h * &*mu;
    let ll = gaussian_logpdf(&resid, &chol);
    let gain_t = chol.solve(&ph.transpose());
    *mu += gain_t.tr_mul(&resid);
    *sigma -= ph * gain_t;
    symmetrize(sigma);
    Ok(ll)
}

/// Run the forward filter and backward smoother on `system`.
pub fn smooth(aug: &AugmentedSystem, prior: &PriorConfig, system: &StackedSystem) -> Result<PosteriorState> {
    let k = aug.k();
    let n = system.n_states();
    if n == 0 {
        return Err(Error::Shape("empty estimation support".into()));
    }
    if system.k() != k || prior.k() != k {
        return Err(Error::Shape(format!(
            "state dimensions disagree: system {}, parameters {k}, prior {}",
            system.k(),
            prior.k()
        )));
    }
    if aug.r.len() != system.trials {
        return Err(Error::Shape("one observation covariance per trial is required".into()));
    }

    let active: Vec<usize> = (0..k).filter(|&i| aug.u[i] != 0.0).collect();
    let u_rows = DMatrix::from_fn(active.len(), k, |r, c| if c == active[r] { aug.u[c] } else { 0.0 });
    let eye_u = DMatrix::identity(active.len(), active.len());
    let zero_u = DVector::zeros(active.len());

    let mut mu_pred = Vec::with_capacity(n);
    let mut sigma_pred = Vec::with_capacity(n);
    let mut mu_f: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut sigma_f: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut log_upsilon = 0.0;
    let mut log_normalizer = 0.0;

    for s in 0..n {
        let (mp, sp) = if s == 0 {
            (prior.mu1.clone(), prior.sigma1.clone())
        } else {
            let m = mu_f[s - 1].component_mul(&aug.a);
            let prev = &sigma_f[s - 1];
            let mut p = DMatrix::from_fn(k, k, |i, j| aug.a[i] * prev[(i, j)] * aug.a[j]);
            for i in 0..k {
                p[(i, i)] += aug.q;
            }
            (m, p)
        };
        let mut mu = mp.clone();
        let mut sigma = sp.clone();
        for j in 0..system.trials {
            let rows = system.block(j);
            let h = system.c[s].rows(rows.start, rows.len()).into_owned();
            let z = system.z[s].rows(rows.start, rows.len()).into_owned();
            log_upsilon += measure(&mut mu, &mut sigma, &h, &z, &aug.r[j], s)?;
        }
        if s + 1 < n && !active.is_empty() {
            let ll = measure(&mut mu, &mut sigma, &u_rows, &zero_u, &eye_u, s)?;
            log_normalizer += ll + active.len() as f64 * HALF_LN_2PI;
        }
        mu_pred.push(mp);
        sigma_pred.push(sp);
        mu_f.push(mu);
        sigma_f.push(sigma);
    }
    log_normalizer += log_upsilon;

    // Backward pass.
    let mut mu_s = mu_f.clone();
    let mut sigma_s = sigma_f.clone();
    let mut sigma_cross = vec![DMatrix::zeros(k, k); n.saturating_sub(1)];
    for s in (0..n.saturating_sub(1)).rev() {
        let chol = robust_cholesky(&sigma_pred[s + 1]).ok_or(Error::Singular { time: s + 1 })?;
        // J_s = Sigma_f A' Sigma_pred^{-1}; solve for J_s'.
        let a_sigma = DMatrix::from_fn(k, k, |i, j| aug.a[i] * sigma_f[s][(i, j)]);
        let gain = chol.solve(&a_sigma).transpose();
        let dm = &mu_s[s + 1] - &mu_pred[s + 1];
        mu_s[s] = &mu_f[s] + &gain * dm;
        let ds = &sigma_s[s + 1] - &sigma_pred[s + 1];
        let mut smoothed = &sigma_f[s] + &gain * ds * gain.transpose();
        symmetrize(&mut smoothed);
        sigma_cross[s] = &sigma_s[s + 1] * gain.transpose();
        sigma_s[s] = smoothed;
    }

    let mut m1 = DMatrix::zeros(k, k);
    let mut m2 = DMatrix::zeros(k, k);
    let mut m3 = DMatrix::zeros(k, k);
    for s in 1..n {
        m1 += &sigma_s[s] + &mu_s[s] * mu_s[s].transpose();
        m2 += &sigma_s[s - 1] + &mu_s[s - 1] * mu_s[s - 1].transpose();
        m3 += &sigma_cross[s - 1] + &mu_s[s] * mu_s[s - 1].transpose();
    }

    Ok(PosteriorState {
        t_start: system.t_start,
        mu_s,
        sigma_s,
        sigma_cross,
        mu_pred,
        sigma_pred,
        m1,
        m2,
        m3,
        log_upsilon,
        log_normalizer,
    })
}
