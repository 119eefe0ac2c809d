//! Per-time Granger-causality statistic from the highest-posterior-density
//! region of the cross coefficients, and the cluster-mass permutation test.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::design::{coefficient_indices, Band, DesignSpec, LagSlot};
use crate::error::{Error, Result};
use crate::linalg::sym_pinv;
use crate::model::PosteriorState;
use crate::vbem::FitResult;

/// Tested direction between channel 1 (`X`) and channel 0 (`Y`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "X->Y")]
    XToY,
    #[serde(rename = "Y->X")]
    YToX,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::XToY, Direction::YToX];

    /// `(effect, cause)` channel indices.
    pub fn channels(self) -> (usize, usize) {
        match self {
            Direction::XToY => (0, 1),
            Direction::YToX => (1, 0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::XToY => "X->Y",
            Direction::YToX => "Y->X",
        }
    }
}

/// Which cross coefficients enter the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "scale", rename_all = "snake_case")]
pub enum Scope {
    Overall,
    Scale(usize),
    Smooth,
}

impl Scope {
    fn admits(self, slot: &LagSlot) -> bool {
        match self {
            Scope::Overall => true,
            Scope::Scale(j) => slot.band == Band::Scale(j),
            Scope::Smooth => slot.band == Band::Smooth,
        }
    }

    pub fn label(self) -> String {
        match self {
            Scope::Overall => "overall".into(),
            Scope::Scale(j) => format!("scale{j}"),
            Scope::Smooth => "smooth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityTrace {
    pub direction: Direction,
    pub scope: Scope,
    /// Number of tested coefficients.
    pub c: usize,
    /// 1-based sample labels.
    pub times: Vec<usize>,
    pub statistic: Vec<f64>,
    pub significance: Vec<f64>,
}

impl CausalityTrace {
    pub fn flags(&self, level: f64) -> Vec<bool> {
        self.significance.iter().map(|&s| s < level).collect()
    }
}

/// `m = mu' Sigma^{-1} mu` over `indices` at state time `s`, and its
/// significance `1 - F_{chi2_c}(m)`.
pub fn hpd_statistic(state: &PosteriorState, indices: &[usize], s: usize) -> Result<(f64, f64)> {
    let c = indices.len();
    if c == 0 {
        return Err(Error::InvalidDesign("no coefficients to test".into()));
    }
    let mu = DVector::from_iterator(c, indices.iter().map(|&i| state.mu_s[s][i]));
    let sigma = DMatrix::from_fn(c, c, |a, b| state.sigma_s[s][(indices[a], indices[b])]);
    let m = mahalanobis(&mu, &sigma, s);
    Ok((m, chi2_sf(m, c)))
}

fn mahalanobis(mu: &DVector<f64>, sigma: &DMatrix<f64>, s: usize) -> f64 {
    match sigma.clone().cholesky() {
        Some(ch) => mu.dot(&ch.solve(mu)),
        None => {
            log::warn!("singular coefficient covariance at state {s}; using the pseudo-inverse");
            mu.dot(&(sym_pinv(sigma) * mu))
        }
    }
}

/// Upper tail of the chi-squared distribution with `c` degrees of freedom.
pub fn chi2_sf(m: f64, c: usize) -> f64 {
    let dist = ChiSquared::new(c as f64).expect("positive degrees of freedom");
    dist.sf(m.max(0.0)).clamp(0.0, 1.0)
}

/// Statistic threshold matching a significance `level`.
pub fn chi2_threshold(level: f64, c: usize) -> f64 {
    ChiSquared::new(c as f64).expect("positive degrees of freedom").inverse_cdf(1.0 - level)
}

/// Trace of one direction and scope over the whole support.
pub fn causality_trace(
    state: &PosteriorState,
    slots: &[LagSlot],
    channels: usize,
    direction: Direction,
    scope: Scope,
) -> Result<CausalityTrace> {
    if channels < 2 {
        return Err(Error::Shape("causality needs at least two channels".into()));
    }
    let (effect, cause) = direction.channels();
    let idx = coefficient_indices(slots, channels, effect, cause, |s| scope.admits(s));
    let mut statistic = Vec::with_capacity(state.len());
    let mut significance = Vec::with_capacity(state.len());
    for s in 0..state.len() {
        let (m, p) = hpd_statistic(state, &idx, s)?;
        statistic.push(m);
        significance.push(p);
    }
    Ok(CausalityTrace {
        direction,
        scope,
        c: idx.len(),
        times: (0..state.len()).map(|s| state.t_start + s + 1).collect(),
        statistic,
        significance,
    })
}

/// Scopes reported for a design: overall, plus every scale with a nonzero
/// order and the smooth for multiscale designs.
pub fn scopes(spec: &DesignSpec) -> Vec<Scope> {
    let mut out = vec![Scope::Overall];
    if let DesignSpec::Wavelet { orders } = spec {
        let j_max = orders.len() - 1;
        out.extend((1..=j_max).filter(|&j| orders[j - 1] > 0).map(Scope::Scale));
        if orders[j_max] > 0 {
            out.push(Scope::Smooth);
        }
    }
    out
}

/// All traces of a fit: both directions, every scope.
pub fn directional_traces(fit: &FitResult) -> Result<Vec<CausalityTrace>> {
    let sys = &fit.system;
    let mut out = Vec::new();
    for dir in Direction::BOTH {
        for scope in scopes(&sys.spec) {
            out.push(causality_trace(&fit.state, &sys.slots, sys.channels, dir, scope)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// First and last 1-based labels of the run.
    pub start: usize,
    pub end: usize,
    pub mass: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub direction: Direction,
    pub scope: Scope,
    pub level: f64,
    pub clusters: Vec<Cluster>,
    pub null_max_masses: Vec<f64>,
}

/// Maximal runs with `significance < level`: `(first index, last index, mass)`.
pub fn find_clusters(trace: &CausalityTrace, level: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut run: Option<(usize, f64)> = None;
    for (i, (&sig, &m)) in trace.significance.iter().zip(&trace.statistic).enumerate() {
        if sig < level {
            let (start, mass) = run.unwrap_or((i, 0.0));
            run = Some((start, mass + m));
        } else if let Some((start, mass)) = run.take() {
            out.push((start, i - 1, mass));
        }
    }
    if let Some((start, mass)) = run {
        out.push((start, trace.significance.len() - 1, mass));
    }
    out
}

/// Largest cluster mass, 0 without clusters.
pub fn max_cluster_mass(trace: &CausalityTrace, level: f64) -> f64 {
    find_clusters(trace, level).into_iter().map(|c| c.2).fold(0.0, f64::max)
}

/// Channel-swap flags of permutation `index`: one fair coin per trial
/// from the stream `(seed, index)`.
pub fn permutation_flags(seed: u64, index: u64, trials: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..trials).map(|_| rng.random_bool(0.5)).collect()
}

/// Permutation p-value with the add-one convention.
pub fn permutation_p_value(mass: f64, null: &[f64]) -> f64 {
    (1 + null.iter().filter(|&&v| v >= mass).count()) as f64 / (null.len() + 1) as f64
}

/// Cluster-mass test of several traces sharing one permutation scheme.
///
/// `refit` re-estimates everything on data whose channel labels are swapped
/// in the flagged trials and returns traces covering the same
/// (direction, scope) pairs.
pub fn cluster_mass_test_many<F>(
    observed: &[CausalityTrace],
    level: f64,
    permutations: usize,
    trials: usize,
    seed: u64,
    refit: F,
) -> Result<Vec<ClusterResult>>
where
    F: Fn(&[bool]) -> Result<Vec<CausalityTrace>> + Sync,
{
    if permutations < 1 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("cluster threshold level {level} outside (0, 1)")));
    }
    let nulls: Vec<Vec<f64>> = (0..permutations as u64)
        .into_par_iter()
        .map(|i| {
            let traces = refit(&permutation_flags(seed, i, trials))?;
            observed
                .iter()
                .map(|o| {
                    traces
                        .iter()
                        .find(|t| t.direction == o.direction && t.scope == o.scope)
                        .map(|t| max_cluster_mass(t, level))
                        .ok_or_else(|| {
                            Error::Shape(format!("refit lacks the {} {} trace", o.direction.label(), o.scope.label()))
                        })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(observed
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let null: Vec<f64> = nulls.iter().map(|v| v[k]).collect();
            let clusters = find_clusters(o, level)
                .into_iter()
                .map(|(a, b, mass)| Cluster {
                    start: o.times[a],
                    end: o.times[b],
                    mass,
                    p_value: permutation_p_value(mass, &null),
                })
                .collect();
            ClusterResult { direction: o.direction, scope: o.scope, level, clusters, null_max_masses: null }
        })
        .collect())
}

/// Single-trace cluster-mass test.
pub fn cluster_mass_test<F>(
    observed: &CausalityTrace,
    level: f64,
    permutations: usize,
    trials: usize,
    seed: u64,
    refit: F,
) -> Result<ClusterResult>
where
    F: Fn(&[bool]) -> Result<CausalityTrace> + Sync,
{
    let mut out = cluster_mass_test_many(std::slice::from_ref(observed), level, permutations, trials, seed, |f| {
        refit(f).map(|t| vec![t])
    })?;
    Ok(out.remove(0))
}
