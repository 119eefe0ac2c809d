//! Causal à trous Haar decomposition and the multiscale regressor design.
//!
//! With `S_0 = x`, each level averages the previous one with its value
//! `2^j` samples earlier:
//!
//! ```text
//! S_{j+1}(t) = (S_j(t) + S_j(t - 2^j)) / 2,    w_{j+1}(t) = S_j(t) - S_{j+1}(t)
//! ```
//!
//! Only past samples are touched, so every coefficient at `t` is a function
//! of `x_0..=x_t`. Level `j` first becomes fully supported at the 0-based
//! index `2^j - 1`; earlier entries are left undefined (`NaN`) and are never
//! used for estimation.

use crate::design::{Band, DesignSpec, RegressorDesign};
use crate::error::{Error, Result};
use crate::model::EpochedSeries;

/// Wavelet coefficients `w_{j,t}` (`j = 1..=J`) and smooth `s_{J,t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletDecomposition {
    /// `w[j - 1][t]`
    pub w: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub scales: usize,
}

impl WaveletDecomposition {
    /// First 0-based index at which level `j` is fully supported.
    pub fn first_supported(j: usize) -> usize {
        (1usize << j) - 1
    }

    pub fn wavelet(&self, j: usize, t: usize) -> Option<f64> {
        (t >= Self::first_supported(j)).then(|| self.w[j - 1][t])
    }

    pub fn smooth(&self, t: usize) -> Option<f64> {
        (t >= Self::first_supported(self.scales)).then(|| self.s[t])
    }
}

/// Decompose `x` over `scales` levels.
pub fn decompose(x: &[f64], scales: usize) -> Result<WaveletDecomposition> {
    if scales == 0 {
        return Err(Error::InvalidScale("at least one scale is required".into()));
    }
    if scales >= usize::BITS as usize - 1 || x.len() < (1usize << scales) {
        return Err(Error::InvalidScale(format!(
            "{scales} scales need at least {} samples, got {}",
            1u128 << scales.min(100),
            x.len()
        )));
    }
    let n = x.len();
    let mut prev = x.to_vec();
    let mut w = Vec::with_capacity(scales);
    for j in 0..scales {
        let step = 1usize << j;
        let mut next = vec![f64::NAN; n];
        let mut wj = vec![f64::NAN; n];
        for t in WaveletDecomposition::first_supported(j + 1)..n {
            next[t] = 0.5 * (prev[t] + prev[t - step]);
            wj[t] = prev[t] - next[t];
        }
        w.push(wj);
        prev = next;
    }
    Ok(WaveletDecomposition { w, s: prev, scales })
}

/// Multiscale regressors of one trial.
///
/// `orders` holds `p_1..p_J` followed by the smooth order `p_{J+1}`. Slot
/// `(scale j, lag m)` carries `w_{j, t-1-2^j(m-1)}` and slot `(smooth, m)`
/// carries `s_{J, t-1-2^J(m-1)}` for every channel.
pub fn build_wavelet_regressors(
    series: &EpochedSeries,
    trial: usize,
    scales: usize,
    orders: &[usize],
) -> Result<RegressorDesign> {
    if orders.len() != scales + 1 {
        return Err(Error::InvalidDesign(format!("{} orders given for {scales} scales plus the smooth", orders.len())));
    }
    let spec = DesignSpec::wavelet(orders.to_vec());
    spec.validate()?;
    if trial >= series.trials() {
        return Err(Error::Shape(format!("trial {trial} out of range")));
    }
    let t_start = spec.min_t_start();
    if t_start >= series.len() {
        return Err(Error::InvalidDesign(format!(
            "lags reach back {t_start} samples but the series has only {}",
            series.len()
        )));
    }
    let decs =
        (0..series.channels()).map(|l| decompose(series.channel(trial, l), scales)).collect::<Result<Vec<_>>>()?;
    Ok(RegressorDesign::from_features(spec, series.channels(), series.len(), t_start, |slot, l, t| {
        let dec = &decs[l];
        let v = match slot.band {
            Band::Scale(j) => dec.wavelet(j, t - 1 - (1usize << j) * (slot.lag - 1)),
            Band::Smooth => dec.smooth(t - 1 - (1usize << scales) * (slot.lag - 1)),
            Band::Time => unreachable!("wavelet designs have no time-domain slots"),
        };
        v.expect("support start guarantees every lag is defined")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_has_no_detail() {
        let dec = decompose(&[5.0; 32], 3).unwrap();
        for t in 7..32 {
            for j in 1..=3 {
                assert_eq!(dec.wavelet(j, t), Some(0.0));
            }
            assert_eq!(dec.smooth(t), Some(5.0));
        }
    }

    #[test]
    fn two_sample_example() {
        let dec = decompose(&[0.0, 2.0], 1).unwrap();
        assert_eq!(dec.smooth(1), Some(1.0));
        assert_eq!(dec.wavelet(1, 1), Some(1.0));
        assert_eq!(dec.wavelet(1, 0), None);
    }

    #[test]
    fn too_many_scales() {
        assert!(matches!(decompose(&[1.0; 7], 3), Err(Error::InvalidScale(_))));
        assert!(matches!(decompose(&[1.0; 7], 0), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn smooth_only_design() {
        let s = EpochedSeries::new(vec![vec![vec![0.0, 2.0, 4.0, 6.0, 8.0], vec![1.0, 1.0, 3.0, 3.0, 5.0]]]).unwrap();
        let d = build_wavelet_regressors(&s, 0, 1, &[0, 1]).unwrap();
        assert_eq!(d.k(), 4);
        assert_eq!(d.t_start, 2);
        // smooth at t-1 = 1: channel 0 -> 1.0, channel 1 -> 1.0
        let c = d.c_matrix(2);
        assert_eq!(c.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 0.0]);
        // t = 4 uses smooth at 3: (6+4)/2 = 5, (3+3)/2 = 3
        let c = d.c_matrix(4);
        assert_eq!(c.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 5.0, 3.0]);
    }

    #[test]
    fn all_zero_orders_rejected() {
        let s = EpochedSeries::new(vec![vec![vec![0.0; 16], vec![0.0; 16]]]).unwrap();
        assert!(matches!(build_wavelet_regressors(&s, 0, 2, &[0, 0, 0]), Err(Error::InvalidDesign(_))));
    }

    #[test]
    fn lag_beyond_series_rejected() {
        let s = EpochedSeries::new(vec![vec![vec![0.0; 8], vec![0.0; 8]]]).unwrap();
        assert!(matches!(build_wavelet_regressors(&s, 0, 2, &[0, 2, 0]), Err(Error::InvalidDesign(_))));
    }
}
