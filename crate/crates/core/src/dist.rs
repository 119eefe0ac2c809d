//! Inverse-gamma and inverse-Wishart posteriors with the moments and
//! expected log densities needed by the variational updates and the free
//! energy.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::linalg::{chol_logdet, robust_cholesky, spd_inverse};

/// `IG(shape, scale)` with density `scale^shape / Γ(shape) x^{-shape-1} e^{-scale/x}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    /// `<x^{-1}>`
    pub fn mean_inv(&self) -> f64 {
        self.shape / self.scale
    }

    /// `<ln x>`
    pub fn mean_log(&self) -> f64 {
        self.scale.ln() - digamma(self.shape)
    }

    /// `<x>`; infinite when `shape <= 1`.
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn is_valid(&self) -> bool {
        self.shape > 0.0 && self.scale > 0.0 && self.shape.is_finite() && self.scale.is_finite()
    }

    /// `<ln IG(x; shape, b)>` where `x` follows `self` and the (possibly
    /// random) scale `b` enters through `<ln b>` and `<b>`.
    pub fn expected_log_density(&self, shape: f64, mean_log_scale: f64, mean_scale: f64) -> f64 {
        shape * mean_log_scale - ln_gamma(shape) - (shape + 1.0) * self.mean_log() - mean_scale * self.mean_inv()
    }

    pub fn entropy(&self) -> f64 {
        -self.expected_log_density(self.shape, self.scale.ln(), self.scale)
    }

    /// `KL(self || other)`.
    pub fn kl(&self, other: &InvGamma) -> f64 {
        -self.entropy() - self.expected_log_density(other.shape, other.scale.ln(), other.scale)
    }
}

/// `ln Γ_d(x)`, the multivariate log-gamma function.
pub fn ln_mvgamma(d: usize, x: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=d).map(|i| ln_gamma(x + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

/// `IW_d(dof, scale)` over `d x d` covariance matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvWishart {
    pub dof: f64,
    pub scale: DMatrix<f64>,
}

impl InvWishart {
    pub fn new(dof: f64, scale: DMatrix<f64>) -> Self {
        Self { dof, scale }
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// `<R^{-1}> = dof * scale^{-1}`
    pub fn mean_inv(&self) -> DMatrix<f64> {
        spd_inverse(&self.scale).expect("inverse-Wishart scale must be positive definite") * self.dof
    }

    /// `<ln |R|>`
    pub fn mean_logdet(&self) -> f64 {
        let d = self.dim();
        let chol = robust_cholesky(&self.scale).expect("inverse-Wishart scale must be positive definite");
        chol_logdet(&chol)
            - d as f64 * 2f64.ln()
            - (1..=d).map(|i| digamma((self.dof - i as f64 + 1.0) / 2.0)).sum::<f64>()
    }

    /// `<R>`; requires `dof > d + 1`.
    pub fn mean(&self) -> DMatrix<f64> {
        &self.scale / (self.dof - self.dim() as f64 - 1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.dof > self.dim() as f64 - 1.0 && robust_cholesky(&self.scale).is_some()
    }

    /// `<ln IW(R; dof, B)>` where `R` follows `self` and the random scale
    /// `B` enters through `<ln |B|>` and `<B>`.
    pub fn expected_log_density(&self, dof: f64, mean_logdet_scale: f64, mean_scale: &DMatrix<f64>) -> f64 {
        let d = self.dim();
        let df = d as f64;
        0.5 * dof * mean_logdet_scale
            - 0.5 * dof * df * 2f64.ln()
            - ln_mvgamma(d, dof / 2.0)
            - 0.5 * (dof + df + 1.0) * self.mean_logdet()
            - 0.5 * (mean_scale * self.mean_inv()).trace()
    }

    pub fn entropy(&self) -> f64 {
        let chol = robust_cholesky(&self.scale).expect("inverse-Wishart scale must be positive definite");
        -self.expected_log_density(self.dof, chol_logdet(&chol), &self.scale)
    }
}
