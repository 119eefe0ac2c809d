//! Data containers shared by every stage: the observed epoched series, the
//! prior hierarchy, the smoothed state moments and the parameter posteriors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{InvGamma, InvWishart};
use crate::error::{Error, Result};

/// `N` trials of `d` channels sampled at `T` instants.
///
/// Channel 0 is the effect signal `Y`, channel 1 the putative cause `X`
/// (`Z_t = (Y_t, X_t)'`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochedSeries {
    trials: usize,
    channels: usize,
    len: usize,
    /// Trial-major, then channel, then time.
    data: Vec<f64>,
    pub sample_rate: Option<f64>,
}

impl EpochedSeries {
    /// Build from `trials[j][i][t]`.
    pub fn new(trials: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = trials.len();
        if n == 0 {
            return Err(Error::Shape("at least one trial is required".into()));
        }
        let d = trials[0].len();
        if d == 0 {
            return Err(Error::Shape("at least one channel is required".into()));
        }
        let t = trials[0][0].len();
        let mut data = Vec::with_capacity(n * d * t);
        for (j, trial) in trials.into_iter().enumerate() {
            if trial.len() != d {
                return Err(Error::Shape(format!("trial {j} has {} channels, expected {d}", trial.len())));
            }
            for (i, ch) in trial.into_iter().enumerate() {
                if ch.len() != t {
                    return Err(Error::Shape(format!("trial {j} channel {i} has {} samples, expected {t}", ch.len())));
                }
                data.extend(ch);
            }
        }
        Self::from_flat(n, d, t, data)
    }

    pub fn from_flat(trials: usize, channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != trials * channels * len {
            return Err(Error::Shape(format!("{} values do not fill {trials}x{channels}x{len}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { trials, channels, len, data, sample_rate: None })
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, trial: usize, channel: usize) -> &[f64] {
        let start = (trial * self.channels + channel) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn get(&self, trial: usize, channel: usize, t: usize) -> f64 {
        self.data[(trial * self.channels + channel) * self.len + t]
    }

    /// Observation vector `Z_t` of one trial.
    pub fn observation(&self, trial: usize, t: usize) -> DVector<f64> {
        DVector::from_fn(self.channels, |i, _| self.get(trial, i, t))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Keep only the listed trials, in order.
    pub fn select_trials(&self, which: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(which.len() * self.channels * self.len);
        for &j in which {
            if j >= self.trials {
                return Err(Error::Shape(format!("trial {j} out of range")));
            }
            let start = j * self.channels * self.len;
            data.extend_from_slice(&self.data[start..start + self.channels * self.len]);
        }
        let mut out = Self::from_flat(which.len(), self.channels, self.len, data)?;
        out.sample_rate = self.sample_rate;
        Ok(out)
    }

    /// Exchange the labels of channels 0 and 1 in the flagged trials.
    pub fn swap_channels(&self, flags: &[bool]) -> Self {
        let mut out = self.clone();
        for (j, &swap) in flags.iter().enumerate().take(self.trials) {
            if swap {
                let base = j * self.channels * self.len;
                for t in 0..self.len {
                    out.data.swap(base + t, base + self.len + t);
                }
            }
        }
        out
    }
}

/// Every fixed hyperparameter of the prior hierarchy for a state of
/// dimension `k` and `d` observed channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub mu1: DVector<f64>,
    pub sigma1: DMatrix<f64>,
    /// Prior location of every `A_ii`.
    pub m_a: f64,
    /// Half-t scales `D_i` for the `alpha_i`.
    pub d_scales: Vec<f64>,
    /// Half-t scale `A_q` of `Q_ii^{1/2}`.
    pub a_q: f64,
    /// Half-t scale `A_R` of the `R_ii^{1/2}`.
    pub a_r: f64,
    pub nu: f64,
    pub channels: usize,
}

/// Design-independent prior settings; [`PriorConfig::from_settings`]
/// expands them for a concrete state dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSettings {
    pub sigma1: f64,
    pub m_a: f64,
    pub half_t_scale: f64,
    pub a_q: f64,
    pub a_r: f64,
    pub nu: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self { sigma1: 0.1, m_a: 0.9, half_t_scale: 1e5, a_q: 1e5, a_r: 1e5, nu: 2.0 }
    }
}

impl PriorConfig {
    /// Default hierarchy: `mu1 = 0`, `Sigma1 = 0.1 I`, `m_A = 0.9`, `nu = 2`,
    /// all half-t scales `1e5`.
    pub fn defaults(k: usize, channels: usize) -> Self {
        Self::from_settings(k, channels, &PriorSettings::default())
    }

    pub fn from_settings(k: usize, channels: usize, s: &PriorSettings) -> Self {
        Self {
            mu1: DVector::zeros(k),
            sigma1: DMatrix::identity(k, k) * s.sigma1,
            m_a: s.m_a,
            d_scales: vec![s.half_t_scale; k],
            a_q: s.a_q,
            a_r: s.a_r,
            nu: s.nu,
            channels,
        }
    }

    pub fn k(&self) -> usize {
        self.mu1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.sigma1.nrows() != k || self.sigma1.ncols() != k || self.d_scales.len() != k {
            return Err(Error::Shape("prior dimensions disagree with k".into()));
        }
        let positive = self.d_scales.iter().all(|&v| v > 0.0) && self.a_q > 0.0 && self.a_r > 0.0;
        if !positive || self.nu <= 0.0 {
            return Err(Error::Config("prior scales must be strictly positive".into()));
        }
        if nalgebra::Cholesky::new(self.sigma1.clone()).is_none() {
            return Err(Error::Config("Sigma1 must be positive definite".into()));
        }
        Ok(())
    }

    // Inverse-gamma seeds of the half-t mixtures.

    pub fn kappa_p(&self) -> f64 {
        0.5
    }
    pub fn c_p(&self) -> f64 {
        0.5
    }
    pub fn n_p(&self) -> f64 {
        0.5
    }
    pub fn a_qp(&self) -> f64 {
        0.5
    }
    pub fn a_pr(&self) -> f64 {
        0.5
    }
    pub fn beta_p(&self, i: usize) -> f64 {
        1.0 / (self.d_scales[i] * self.d_scales[i])
    }
    pub fn b_qp(&self) -> f64 {
        1.0 / (self.a_q * self.a_q)
    }
    pub fn b_pr(&self) -> f64 {
        1.0 / (self.a_r * self.a_r)
    }
    /// Inverse-Wishart degrees of freedom `nu + d - 1`.
    pub fn r_p(&self) -> f64 {
        self.nu + self.channels as f64 - 1.0
    }
}

/// Variational posteriors of every model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPosterior {
    /// Posterior means `psi_i * theta_i` of the diagonal of `A`.
    pub a_mean: Vec<f64>,
    /// Posterior variances `theta_i` of the diagonal of `A`.
    pub a_var: Vec<f64>,
    pub alpha: Vec<InvGamma>,
    pub delta: Vec<InvGamma>,
    /// The single state-noise variance `Q_ii`.
    pub q: InvGamma,
    pub a_q: InvGamma,
    /// One observation-noise covariance per trial.
    pub r: Vec<InvWishart>,
    pub a_r: Vec<InvGamma>,
}

impl ParamPosterior {
    pub fn k(&self) -> usize {
        self.a_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let igs_ok =
            self.alpha.iter().chain(&self.delta).chain(&self.a_r).chain([&self.q, &self.a_q]).all(InvGamma::is_valid);
        if !igs_ok {
            return Err(Error::Numeric("inverse-gamma parameter not strictly positive".into()));
        }
        if self.a_var.iter().any(|&v| !(v >= 0.0)) || self.a_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("invalid Gaussian posterior for A".into()));
        }
        if !self.r.iter().all(InvWishart::is_valid) {
            return Err(Error::Numeric("inverse-Wishart scale not positive definite".into()));
        }
        Ok(())
    }
}

/// Smoothed moments of the coefficient trajectory on the estimation support.
///
/// Index `s` runs over state times `0..n`, which correspond to sample
/// indices `t_start + s` of the original series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorState {
    pub t_start: usize,
    pub mu_s: Vec<DVector<f64>>,
    pub sigma_s: Vec<DMatrix<f64>>,
    /// `cov(phi_{s+1}, phi_s | all data)` for `s = 0..n-1`.
    pub sigma_cross: Vec<DMatrix<f64>>,
    pub mu_pred: Vec<DVector<f64>>,
    pub sigma_pred: Vec<DMatrix<f64>>,
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    pub m3: DMatrix<f64>,
    /// Predictive log density of the data rows only.
    pub log_upsilon: f64,
    /// Log normalizer of the augmented system (data plus fluctuation rows).
    pub log_normalizer: f64,
}

impl PosteriorState {
    pub fn len(&self) -> usize {
        self.mu_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_s.is_empty()
    }

    pub fn k(&self) -> usize {
        self.mu_s.first().map_or(0, |m| m.len())
    }
}
