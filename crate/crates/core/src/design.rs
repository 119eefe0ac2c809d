//! Regressor matrices `C_t` and the multi-trial stacked observation system.
//!
//! # Coefficient layout
//!
//! A design is a list of *lag slots* (a time lag, or a wavelet/smooth
//! coefficient at some delay). Each slot `s` owns a `d x d` coefficient
//! matrix `theta_s`, stored row-major, so the state is
//!
//! ```text
//! phi = [vec_row(theta_0), vec_row(theta_1), ...],   k = L * d^2
//! ```
//!
//! and entry `theta_s[i, l]` (effect of channel `l` on channel `i`) lives at
//! index `s * d^2 + i * d + l`. Row `i` of `C_t` therefore holds the slot
//! features of every channel in the columns of block `(s, i)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::atrous;
use crate::error::{Error, Result};
use crate::model::EpochedSeries;

/// Frequency band a lag slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    /// Plain time-domain lag.
    Time,
    /// Wavelet coefficients of scale `j` (1-based).
    Scale(usize),
    /// Smooth coefficients of the coarsest scale.
    Smooth,
}

/// One regressor slot: band plus 1-based lag position inside the band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagSlot {
    pub band: Band,
    pub lag: usize,
}

/// How the histories enter `C_t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignSpec {
    /// VAR(p) on the raw samples.
    TimeDomain { order: usize },
    /// À trous Haar histories; `orders` holds `p_1..p_J` then the smooth order.
    Wavelet { orders: Vec<usize> },
}

impl DesignSpec {
    pub fn time(order: usize) -> Self {
        DesignSpec::TimeDomain { order }
    }

    pub fn wavelet(orders: Vec<usize>) -> Self {
        DesignSpec::Wavelet { orders }
    }

    /// Number of wavelet scales `J` (0 for time-domain designs).
    pub fn scales(&self) -> usize {
        match self {
            DesignSpec::TimeDomain { .. } => 0,
            DesignSpec::Wavelet { orders } => orders.len().saturating_sub(1),
        }
    }

    pub fn slots(&self) -> Vec<LagSlot> {
        match self {
            DesignSpec::TimeDomain { order } => (1..=*order).map(|lag| LagSlot { band: Band::Time, lag }).collect(),
            DesignSpec::Wavelet { orders } => {
                let j_max = orders.len().saturating_sub(1);
                let mut slots = Vec::new();
                for (j, &p) in orders.iter().enumerate().take(j_max) {
                    slots.extend((1..=p).map(|lag| LagSlot { band: Band::Scale(j + 1), lag }));
                }
                if let Some(&p) = orders.last() {
                    slots.extend((1..=p).map(|lag| LagSlot { band: Band::Smooth, lag }));
                }
                slots
            }
        }
    }

    pub fn k(&self, channels: usize) -> usize {
        self.slots().len() * channels * channels
    }

    /// First 0-based sample index at which every regressor is fully supported.
    pub fn min_t_start(&self) -> usize {
        match self {
            DesignSpec::TimeDomain { order } => *order,
            DesignSpec::Wavelet { orders } => {
                let j_max = orders.len().saturating_sub(1);
                let mut start = 0;
                for (j, &p) in orders.iter().enumerate().take(j_max) {
                    start = start.max((1usize << (j + 1)) * p);
                }
                if let Some(&p) = orders.last() {
                    start = start.max((1usize << j_max) * p);
                }
                start
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DesignSpec::TimeDomain { order } => {
                if *order == 0 {
                    return Err(Error::InvalidOrder("order must be at least 1".into()));
                }
            }
            DesignSpec::Wavelet { orders } => {
                if orders.len() < 2 {
                    return Err(Error::InvalidScale("wavelet design needs at least one scale plus the smooth".into()));
                }
                if orders.iter().all(|&p| p == 0) {
                    return Err(Error::InvalidDesign("at least one scale order must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Build the regressors of one trial on the minimal support.
    pub fn build(&self, series: &EpochedSeries, trial: usize) -> Result<RegressorDesign> {
        match self {
            DesignSpec::TimeDomain { order } => build_time_regressors(series, trial, *order),
            DesignSpec::Wavelet { orders } => atrous::build_wavelet_regressors(series, trial, orders.len() - 1, orders),
        }
    }
}

/// Per-time predictor matrices of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorDesign {
    pub spec: DesignSpec,
    pub channels: usize,
    pub slots: Vec<LagSlot>,
    /// First usable 0-based sample index.
    pub t_start: usize,
    /// Length of the underlying series.
    pub len: usize,
    /// `features[(t - t_start) * L * d + s * d + l]`: value of slot `s` for
    /// channel `l` at sample `t`.
    features: Vec<f64>,
}

impl RegressorDesign {
    /// Assemble a design from a feature oracle `feature(slot, channel, t)`.
    pub(crate) fn from_features<F>(
        spec: DesignSpec,
        channels: usize,
        len: usize,
        t_start: usize,
        mut feature: F,
    ) -> Self
    where
        F: FnMut(&LagSlot, usize, usize) -> f64,
    {
        let slots = spec.slots();
        let mut features = Vec::with_capacity((len - t_start) * slots.len() * channels);
        for t in t_start..len {
            for slot in &slots {
                for l in 0..channels {
                    features.push(feature(slot, l, t));
                }
            }
        }
        Self { spec, channels, slots, t_start, len, features }
    }

    pub fn k(&self) -> usize {
        self.slots.len() * self.channels * self.channels
    }

    /// Number of usable time steps.
    pub fn n_states(&self) -> usize {
        self.len - self.t_start
    }

    /// Feature value of slot `s`, channel `l` at sample `t`.
    pub fn feature(&self, s: usize, l: usize, t: usize) -> f64 {
        let stride = self.slots.len() * self.channels;
        self.features[(t - self.t_start) * stride + s * self.channels + l]
    }

    /// The `d x k` matrix `C_t` for 0-based sample index `t >= t_start`.
    pub fn c_matrix(&self, t: usize) -> DMatrix<f64> {
        let d = self.channels;
        let mut c = DMatrix::zeros(d, self.k());
        self.fill_c(t, &mut c, 0);
        c
    }

    fn fill_c(&self, t: usize, c: &mut DMatrix<f64>, row0: usize) {
        let d = self.channels;
        for s in 0..self.slots.len() {
            for i in 0..d {
                for l in 0..d {
                    c[(row0 + i, s * d * d + i * d + l)] = self.feature(s, l, t);
                }
            }
        }
    }

    /// Move the start of the support later (never earlier than the minimum).
    pub fn with_t_start(mut self, t_start: usize) -> Result<Self> {
        if t_start < self.t_start {
            return Err(Error::InvalidDesign(format!(
                "support start {t_start} precedes the first fully supported sample {}",
                self.t_start
            )));
        }
        if t_start >= self.len {
            return Err(Error::InvalidDesign("support start beyond the end of the series".into()));
        }
        let stride = self.slots.len() * self.channels;
        self.features.drain(..(t_start - self.t_start) * stride);
        self.t_start = t_start;
        Ok(self)
    }

    /// Indices of `theta_s[effect, cause]` for every slot accepted by `filter`.
    pub fn cross_indices(&self, effect: usize, cause: usize, filter: impl Fn(&LagSlot) -> bool) -> Vec<usize> {
        coefficient_indices(&self.slots, self.channels, effect, cause, filter)
    }
}

/// Indices of `theta_s[effect, cause]` in the state vector.
pub fn coefficient_indices(
    slots: &[LagSlot],
    channels: usize,
    effect: usize,
    cause: usize,
    filter: impl Fn(&LagSlot) -> bool,
) -> Vec<usize> {
    let d = channels;
    slots.iter().enumerate().filter(|(_, s)| filter(s)).map(|(s, _)| s * d * d + effect * d + cause).collect()
}

/// VAR(p) regressors of one trial: slot `j` holds `Z_{t-j}`.
pub fn build_time_regressors(series: &EpochedSeries, trial: usize, p: usize) -> Result<RegressorDesign> {
    if p == 0 {
        return Err(Error::InvalidOrder("order must be at least 1".into()));
    }
    if p >= series.len() {
        return Err(Error::InvalidOrder(format!("order {p} needs more than {} samples", series.len())));
    }
    if trial >= series.trials() {
        return Err(Error::Shape(format!("trial {trial} out of range")));
    }
    Ok(RegressorDesign::from_features(DesignSpec::time(p), series.channels(), series.len(), p, |slot, l, t| {
        series.get(trial, l, t - slot.lag)
    }))
}

/// The multi-trial observation system `Z_t = C_t phi_t + v_t` with trial
/// row-blocks stacked in trial order.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub spec: DesignSpec,
    pub slots: Vec<LagSlot>,
    pub trials: usize,
    pub channels: usize,
    pub t_start: usize,
    /// Stacked observations, one `d*N` vector per state time.
    pub z: Vec<DVector<f64>>,
    /// Stacked `d*N x k` regressors per state time.
    pub c: Vec<DMatrix<f64>>,
}

impl StackedSystem {
    pub fn k(&self) -> usize {
        self.c.first().map_or(self.slots.len() * self.channels * self.channels, |c| c.ncols())
    }

    pub fn n_states(&self) -> usize {
        self.z.len()
    }

    /// Rows of trial `j` in the stacked system.
    pub fn block(&self, j: usize) -> std::ops::Range<usize> {
        j * self.channels..(j + 1) * self.channels
    }
}

/// Stack per-trial designs (which must agree in kind and support) together
/// with the matching observations.
pub fn stack_trials(designs: &[RegressorDesign], series: &EpochedSeries) -> Result<StackedSystem> {
    let first = designs.first().ok_or_else(|| Error::Shape("no designs to stack".into()))?;
    if designs.len() != series.trials() {
        return Err(Error::Shape(format!("{} designs for {} trials", designs.len(), series.trials())));
    }
    for d in designs {
        if d.spec != first.spec || d.t_start != first.t_start || d.len != first.len || d.channels != first.channels {
            return Err(Error::Shape("trial designs disagree in kind, support or length".into()));
        }
    }
    if first.len != series.len() || first.channels != series.channels() {
        return Err(Error::Shape("designs do not match the series shape".into()));
    }
    let d = first.channels;
    let n = designs.len();
    let k = first.k();
    let mut z = Vec::with_capacity(first.n_states());
    let mut c = Vec::with_capacity(first.n_states());
    for t in first.t_start..first.len {
        let mut zt = DVector::zeros(d * n);
        let mut ct = DMatrix::zeros(d * n, k);
        for (j, design) in designs.iter().enumerate() {
            for i in 0..d {
                zt[j * d + i] = series.get(j, i, t);
            }
            design.fill_c(t, &mut ct, j * d);
        }
        z.push(zt);
        c.push(ct);
    }
    Ok(StackedSystem {
        spec: first.spec.clone(),
        slots: first.slots.clone(),
        trials: n,
        channels: d,
        t_start: first.t_start,
        z,
        c,
    })
}

/// Build and stack the regressors of every trial on a common support that
/// starts at `t_start` (or the design minimum when `None`).
pub fn build_system(series: &EpochedSeries, spec: &DesignSpec, t_start: Option<usize>) -> Result<StackedSystem> {
    spec.validate()?;
    let start = t_start.unwrap_or_else(|| spec.min_t_start());
    let designs =
        (0..series.trials()).map(|j| spec.build(series, j)?.with_t_start(start)).collect::<Result<Vec<_>>>()?;
    stack_trials(&designs, series)
}
