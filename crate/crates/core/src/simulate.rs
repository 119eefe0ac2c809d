//! Synthetic data: series drawn from the state-space model itself, and
//! bivariate series whose coefficients drift slowly and deterministically.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::causality::CausalityTrace;
use crate::error::{Error, Result};
use crate::model::EpochedSeries;

/// Transition values of the coefficients at lags `p-1, p-2, ...`; lag `p`
/// itself gets [`TRUE_LAG_A`].
pub const LAG_PROFILE: [f64; 7] = [0.54, 0.34, 0.21, 0.13, 0.09, 0.05, 0.03];
pub const TRUE_LAG_A: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssParams {
    pub order: usize,
    pub len: usize,
    pub trials: usize,
    pub channels: usize,
    /// Diagonal of `Q`.
    pub q: f64,
    /// Diagonal of `R`.
    pub r: f64,
    /// Realisations whose observations exceed this magnitude are redrawn.
    pub bound: f64,
    pub max_attempts: usize,
}

impl BssParams {
    pub fn new(order: usize, len: usize, trials: usize) -> Self {
        Self { order, len, trials, channels: 2, q: 0.1, r: 0.1, bound: 100.0, max_attempts: 10_000 }
    }
}

/// Diagonal of `A` for a time-domain design of order `p` with `d` channels.
pub fn bss_transition(p: usize, d: usize) -> Vec<f64> {
    let mut a = Vec::with_capacity(p * d * d);
    for lag in 1..=p {
        let v = if lag == p { TRUE_LAG_A } else { LAG_PROFILE.get(p - lag - 1).copied().unwrap_or(0.0) };
        a.extend(std::iter::repeat_n(v, d * d));
    }
    a
}

/// Output of [`gen_bss`]: the series and `phi_t` for `t = p..T` (0-based).
#[derive(Debug, Clone)]
pub struct BssSample {
    pub series: EpochedSeries,
    pub phi: Vec<DVector<f64>>,
    /// Number of discarded explosive realisations.
    pub rejected: usize,
}

/// Draw from the model with the lag profile above. The coefficient
/// trajectory is shared by all trials; explosive realisations are redrawn.
pub fn gen_bss(p: usize, len: usize, trials: usize, seed: u64) -> Result<BssSample> {
    gen_bss_with(&BssParams::new(p, len, trials), seed)
}

pub fn gen_bss_with(params: &BssParams, seed: u64) -> Result<BssSample> {
    let &BssParams { order: p, len, trials, channels: d, q, r, bound, max_attempts } = params;
    if p == 0 || p >= len || trials == 0 || d == 0 {
        return Err(Error::Config(format!("invalid simulation shape p={p} T={len} N={trials}")));
    }
    let a = bss_transition(p, d);
    let k = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (qs, rs) = (q.sqrt(), r.sqrt());
    for attempt in 0..max_attempts {
        let mut phi = Vec::with_capacity(len - p);
        let mut cur = DVector::from_fn(k, |_, _| qs * rng.sample::<f64, _>(StandardNormal));
        for _ in p..len {
            phi.push(cur.clone());
            cur = DVector::from_fn(k, |i, _| a[i] * cur[i] + qs * rng.sample::<f64, _>(StandardNormal));
        }
        let mut data = vec![0.0; trials * d * len];
        let mut ok = true;
        'trials: for j in 0..trials {
            let base = j * d * len;
            for t in 0..len {
                for i in 0..d {
                    let mut v = rs * rng.sample::<f64, _>(StandardNormal);
                    if t >= p {
                        let ph = &phi[t - p];
                        for lag in 1..=p {
                            for l in 0..d {
                                v += ph[(lag - 1) * d * d + i * d + l] * data[base + l * len + t - lag];
                            }
                        }
                    }
                    if !(v.abs() <= bound) {
                        ok = false;
                        break 'trials;
                    }
                    data[base + i * len + t] = v;
                }
            }
        }
        if ok {
            let series = EpochedSeries::from_flat(trials, d, len, data)?;
            return Ok(BssSample { series, phi, rejected: attempt });
        }
    }
    Err(Error::Numeric(format!("no bounded realisation in {max_attempts} attempts")))
}

/// Observation-noise law of the slowly varying study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Normal,
    StudentT { dof: f64 },
}

impl NoiseKind {
    pub fn student_t5() -> Self {
        NoiseKind::StudentT { dof: 5.0 }
    }
}

/// Noise vector with scale `scale * I_d`.
fn draw_noise(rng: &mut ChaCha8Rng, kind: NoiseKind, d: usize, scale: f64) -> impl Iterator<Item = f64> {
    let mult = match kind {
        NoiseKind::Normal => 1.0,
        NoiseKind::StudentT { dof } => {
            let w: f64 = ChiSquared::new(dof).expect("positive dof").sample(rng);
            (dof / w).sqrt()
        }
    };
    let s = scale.sqrt() * mult;
    let z: Vec<f64> = (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
    z.into_iter()
}

/// Where causality is present, in 1-based inclusive sample labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalWindow {
    pub start: usize,
    pub end: usize,
    /// First label at which the coefficient has reached its plateau.
    pub plateau: usize,
}

impl CausalWindow {
    pub fn contains(&self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }

    /// Labels in the window after the ramp.
    pub fn interior(&self, t: usize) -> bool {
        (self.plateau..=self.end).contains(&t)
    }
}

/// Onset label 190 for `T = 500`, scaled proportionally otherwise, and a
/// half-cosine rise over `T / 10` samples.
pub fn slow_window(len: usize) -> CausalWindow {
    let start = ((190 * len) as f64 / 500.0).round().max(1.0) as usize;
    let ramp = (len / 10).max(1);
    CausalWindow { start, end: len, plateau: (start + ramp).min(len) }
}

/// Value of the drifting coefficients at 1-based label `t`.
pub fn slow_trajectory(window: &CausalWindow, value: f64, t: usize) -> f64 {
    if t < window.start {
        0.0
    } else if t >= window.plateau {
        value
    } else {
        let x = (t - window.start) as f64 / (window.plateau - window.start) as f64;
        value * 0.5 * (1.0 - (std::f64::consts::PI * x).cos())
    }
}

#[derive(Debug, Clone)]
pub struct SlowSample {
    pub series: EpochedSeries,
    pub window: CausalWindow,
    /// Common value of the auto and cross coefficients, per 0-based index.
    pub coefficient: Vec<f64>,
}

/// Bivariate series in which `Y` (channel 0) depends at lag `p` on its own
/// past and on `X` (channel 1) through coefficients that are zero before
/// the window and rise smoothly to `value`. `X` is pure noise.
pub fn gen_slow_varying(
    p: usize,
    len: usize,
    trials: usize,
    value: f64,
    noise: NoiseKind,
    seed: u64,
) -> Result<SlowSample> {
    if p == 0 || p >= len || trials == 0 {
        return Err(Error::Config(format!("invalid simulation shape p={p} T={len} N={trials}")));
    }
    if let NoiseKind::StudentT { dof } = noise {
        if !(dof > 0.0) {
            return Err(Error::Config("t noise needs positive degrees of freedom".into()));
        }
    }
    let window = slow_window(len);
    let coefficient: Vec<f64> = (0..len).map(|t| slow_trajectory(&window, value, t + 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; trials * 2 * len];
    for j in 0..trials {
        let base = j * 2 * len;
        for t in 0..len {
            let mut e = draw_noise(&mut rng, noise, 2, 0.1);
            let (ey, ex) = (e.next().unwrap(), e.next().unwrap());
            let mut y = ey;
            if t >= p {
                y += coefficient[t] * (data[base + t - p] + data[base + len + t - p]);
            }
            data[base + t] = y;
            data[base + len + t] = ex;
        }
    }
    Ok(SlowSample { series: EpochedSeries::from_flat(trials, 2, len, data)?, window, coefficient })
}

/// Per-label detection rates across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    /// 1-based labels covered by at least one replication.
    pub times: Vec<usize>,
    /// Fraction of replications flagging the label, among those covering it.
    pub flag_rate: Vec<f64>,
    pub in_window: Vec<bool>,
}

impl DetectionScore {
    /// TPR inside the window, `None` outside.
    pub fn tpr(&self) -> Vec<Option<f64>> {
        self.flag_rate.iter().zip(&self.in_window).map(|(&r, &w)| w.then_some(r)).collect()
    }

    /// TNR outside the window, `None` inside.
    pub fn tnr(&self) -> Vec<Option<f64>> {
        self.flag_rate.iter().zip(&self.in_window).map(|(&r, &w)| (!w).then_some(1.0 - r)).collect()
    }

    /// Mean TPR over labels selected by `keep` inside the window.
    pub fn mean_tpr(&self, keep: impl Fn(usize) -> bool) -> f64 {
        mean(self.times.iter().zip(self.tpr()).filter(|(t, _)| keep(**t)).filter_map(|(_, v)| v))
    }

    pub fn mean_tnr(&self) -> f64 {
        mean(self.tnr().into_iter().flatten())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Score significance flags (`significance < level`) of one trace per
/// replication against the true window.
pub fn score_detection(traces: &[CausalityTrace], window: &CausalWindow, level: f64) -> Result<DetectionScore> {
    if traces.is_empty() {
        return Err(Error::Config("at least one replication is required".into()));
    }
    let mut counts: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for tr in traces {
        for (&t, &sig) in tr.times.iter().zip(&tr.significance) {
            let e = counts.entry(t).or_default();
            e.0 += usize::from(sig < level);
            e.1 += 1;
        }
    }
    let times: Vec<usize> = counts.keys().copied().collect();
    let flag_rate = counts.values().map(|&(f, n)| f as f64 / n as f64).collect();
    let in_window = times.iter().map(|&t| window.contains(t)).collect();
    Ok(DetectionScore { times, flag_rate, in_window })
}
