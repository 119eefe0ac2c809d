//! Design selection by free energy: the VAR order of the time-domain model,
//! and the number of scales plus per-scale orders of the multiscale model.
//!
//! Every candidate in one search is fitted on the same support so that
//! their free energies are comparable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_system, DesignSpec};
use crate::error::{Error, Result};
use crate::model::{EpochedSeries, PriorConfig, PriorSettings};
use crate::vbem::{fit_system, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub fit: FitConfig,
    pub prior: PriorSettings,
    /// Select on this trial only instead of all trials.
    pub single_trial: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { fit: FitConfig::selection(), prior: PriorSettings::default(), single_trial: None }
    }
}

/// One fitted candidate. `free_energy` is `-inf` when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spec: DesignSpec,
    pub free_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub spec: DesignSpec,
    pub free_energy: f64,
    /// Common 0-based support start of every candidate.
    pub t_start: usize,
    /// Every candidate in evaluation order.
    pub candidates: Vec<Candidate>,
}

impl Selection {
    /// Free energy of the candidate equal to `spec`, if it was evaluated.
    pub fn free_energy_of(&self, spec: &DesignSpec) -> Option<f64> {
        self.candidates.iter().find(|c| &c.spec == spec).map(|c| c.free_energy)
    }
}

fn data_for<'a>(series: &'a EpochedSeries, config: &SelectionConfig) -> Result<std::borrow::Cow<'a, EpochedSeries>> {
    match config.single_trial {
        Some(j) => Ok(std::borrow::Cow::Owned(series.select_trials(&[j])?)),
        None => Ok(std::borrow::Cow::Borrowed(series)),
    }
}

/// Fit every spec on the common support `t_start`.
pub fn evaluate(
    series: &EpochedSeries,
    specs: &[DesignSpec],
    t_start: usize,
    config: &SelectionConfig,
) -> Vec<Candidate> {
    specs
        .par_iter()
        .map(|spec| {
            let f = build_system(series, spec, Some(t_start)).and_then(|sys| {
                let prior = PriorConfig::from_settings(sys.k(), sys.channels, &config.prior);
                fit_system(sys, prior, &config.fit)
            });
            let free_energy = match f {
                Ok(fit) => fit.f(),
                Err(e) => {
                    log::warn!("candidate {spec:?} failed: {e}");
                    f64::NEG_INFINITY
                }
            };
            Candidate { spec: spec.clone(), free_energy }
        })
        .collect()
}

fn best(candidates: &[Candidate]) -> Result<&Candidate> {
    candidates
        .iter()
        .filter(|c| c.free_energy.is_finite())
        .fold(None, |acc: Option<&Candidate>, c| match acc {
            Some(b) if b.free_energy >= c.free_energy => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Selection("every candidate fit failed".into()))
}

/// Time-domain order `1..=p_max` with the largest free energy, all fitted
/// after the first `p_max` samples.
pub fn select_order_bss(series: &EpochedSeries, p_max: usize, config: &SelectionConfig) -> Result<Selection> {
    if p_max == 0 {
        return Err(Error::InvalidOrder("p_max must be at least 1".into()));
    }
    if p_max >= series.len() {
        return Err(Error::InvalidOrder(format!("p_max {p_max} leaves no samples to fit")));
    }
    let data = data_for(series, config)?;
    let specs: Vec<DesignSpec> = (1..=p_max).map(DesignSpec::time).collect();
    let candidates = evaluate(&data, &specs, p_max, config);
    let b = best(&candidates)?.clone();
    Ok(Selection { spec: b.spec, free_energy: b.free_energy, t_start: p_max, candidates })
}

/// Support start shared by every multiscale candidate with at most
/// `j_max` scales and orders up to `p_max`.
pub fn msbss_t_start(j_max: usize, p_max: usize) -> usize {
    (1usize << j_max) * p_max
}

/// Stepwise multiscale search.
///
/// For each `J` in `1..=j_max`, scales `1..=J` are visited in turn and each
/// gets the order in `0..=p_max` with the largest free energy, keeping the
/// already chosen ones and leaving unvisited scales at 0. The smooth holds
/// order 1 during this search. The best `J` is kept, then its smooth order
/// is chosen from `0..=p_max`.
pub fn select_msbss(series: &EpochedSeries, j_max: usize, p_max: usize, config: &SelectionConfig) -> Result<Selection> {
    if j_max == 0 {
        return Err(Error::InvalidScale("j_max must be at least 1".into()));
    }
    if p_max == 0 {
        return Err(Error::InvalidOrder("p_max must be at least 1".into()));
    }
    let t_start = msbss_t_start(j_max, p_max);
    if t_start >= series.len() {
        return Err(Error::InvalidDesign(format!(
            "{j_max} scales with order {p_max} reach back {t_start} samples, series has {}",
            series.len()
        )));
    }
    let data = data_for(series, config)?;
    let mut all = Vec::new();
    let mut per_j: Vec<Candidate> = Vec::new();
    for j in 1..=j_max {
        let mut orders = vec![0; j + 1];
        orders[j] = 1;
        let mut current: Option<Candidate> = None;
        for scale in 0..j {
            let specs: Vec<DesignSpec> = (0..=p_max)
                .map(|p| {
                    let mut o = orders.clone();
                    o[scale] = p;
                    DesignSpec::wavelet(o)
                })
                .collect();
            let cands = evaluate(&data, &specs, t_start, config);
            let b = best(&cands)?.clone();
            if let DesignSpec::Wavelet { orders: o } = &b.spec {
                orders = o.clone();
            }
            all.extend(cands);
            current = Some(b);
        }
        per_j.push(current.expect("at least one scale visited"));
    }
    let chosen = best(&per_j)?.clone();
    let DesignSpec::Wavelet { orders } = chosen.spec.clone() else { unreachable!() };
    let j = orders.len() - 1;
    let specs: Vec<DesignSpec> = (0..=p_max)
        .map(|p| {
            let mut o = orders.clone();
            o[j] = p;
            DesignSpec::wavelet(o)
        })
        .filter(|s| s.validate().is_ok())
        .collect();
    let cands = evaluate(&data, &specs, t_start, config);
    let b = best(&cands)?.clone();
    all.extend(cands);
    Ok(Selection { spec: b.spec, free_energy: b.free_energy, t_start, candidates: all })
}
