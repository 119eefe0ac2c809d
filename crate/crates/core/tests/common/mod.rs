//! Shared helpers: a dense joint-Gaussian oracle for the smoother and
//! random small systems.
#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tvgc::design::{Band, DesignSpec, LagSlot, StackedSystem};
use tvgc::estep::AugmentedSystem;
use tvgc::model::PriorConfig;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub struct DenseMoments {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    /// `cov(phi_{s+1}, phi_s)`
    pub cross: Vec<DMatrix<f64>>,
    pub log_normalizer: f64,
    /// Log density of the data rows alone.
    pub log_data: f64,
    pub full_mean: DVector<f64>,
    pub full_cov: DMatrix<f64>,
}

fn logpdf(resid: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let ch = cov.clone().cholesky().expect("oracle covariance is PD");
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (resid.len() as f64 * 2.0 * HALF_LN_2PI + logdet + resid.dot(&ch.solve(resid)))
}

/// Condition the joint Gaussian of `phi_0..phi_{n-1}` on every observation
/// row at once.
pub fn dense_posterior(aug: &AugmentedSystem, prior: &PriorConfig, sys: &StackedSystem) -> DenseMoments {
    let k = aug.k();
    let n = sys.n_states();
    let a = DMatrix::from_diagonal(&aug.a);
    // Prior moments.
    let mut m = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    m.push(prior.mu1.clone());
    var.push(prior.sigma1.clone());
    for s in 1..n {
        m.push(&a * &m[s - 1]);
        var.push(&a * &var[s - 1] * &a + DMatrix::identity(k, k) * aug.q);
    }
    let mut p = DMatrix::zeros(k * n, k * n);
    for s in 0..n {
        let mut blk = var[s].clone();
        for r in s..n {
            if r > s {
                blk = &a * blk;
            }
            p.view_mut((r * k, s * k), (k, k)).copy_from(&blk);
            p.view_mut((s * k, r * k), (k, k)).copy_from(&blk.transpose());
        }
    }
    let mean = DVector::from_iterator(k * n, m.iter().flat_map(|v| v.iter().copied()));

    let active: Vec<usize> = (0..k).filter(|&i| aug.u[i] != 0.0).collect();
    let dn = sys.trials * sys.channels;
    let rows = n * dn + n.saturating_sub(1) * active.len();
    let mut h = DMatrix::zeros(rows, k * n);
    let mut y = DVector::zeros(rows);
    let mut noise = DMatrix::zeros(rows, rows);
    let mut data_rows = Vec::new();
    let mut row = 0;
    for s in 0..n {
        h.view_mut((row, s * k), (dn, k)).copy_from(&sys.c[s]);
        y.rows_mut(row, dn).copy_from(&sys.z[s]);
        for j in 0..sys.trials {
            let d = sys.channels;
            noise.view_mut((row + j * d, row + j * d), (d, d)).copy_from(&aug.r[j]);
        }
        data_rows.extend(row..row + dn);
        row += dn;
        if s + 1 < n {
            for &i in &active {
                h[(row, s * k + i)] = aug.u[i];
                noise[(row, row)] = 1.0;
                row += 1;
            }
        }
    }
    let s_mat = &h * &p * h.transpose() + &noise;
    let ch = s_mat.clone().cholesky().expect("innovation PD");
    let ph = &p * h.transpose();
    let resid = &y - &h * &mean;
    let post_mean = &mean + &ph * ch.solve(&resid);
    let post_cov = &p - &ph * ch.solve(&ph.transpose());
    let n_aug = rows - n * dn;
    let log_normalizer = logpdf(&resid, &s_mat) + n_aug as f64 * HALF_LN_2PI;
    let sel = |v: &DVector<f64>| DVector::from_iterator(data_rows.len(), data_rows.iter().map(|&r| v[r]));
    let s_data = DMatrix::from_fn(data_rows.len(), data_rows.len(), |a, b| {
        (&h * &p * h.transpose())[(data_rows[a], data_rows[b])] + noise[(data_rows[a], data_rows[b])]
    });
    let log_data = logpdf(&sel(&resid), &s_data);

    DenseMoments {
        mean: (0..n).map(|s| post_mean.rows(s * k, k).into_owned()).collect(),
        cov: (0..n).map(|s| post_cov.view((s * k, s * k), (k, k)).into_owned()).collect(),
        cross: (0..n.saturating_sub(1)).map(|s| post_cov.view(((s + 1) * k, s * k), (k, k)).into_owned()).collect(),
        log_normalizer,
        log_data,
        full_mean: post_mean,
        full_cov: post_cov,
    }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| normal(rng));
    &b * b.transpose() * 0.3 + DMatrix::identity(d, d) * floor
}

/// Random system with `n` states, `k` coefficients, `trials` blocks of
/// `d` rows each.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, trials: usize) -> StackedSystem {
    StackedSystem {
        spec: DesignSpec::time(1),
        slots: vec![LagSlot { band: Band::Time, lag: 1 }],
        trials,
        channels: d,
        t_start: 0,
        z: (0..n).map(|_| DVector::from_fn(d * trials, |_, _| normal(rng))).collect(),
        c: (0..n).map(|_| DMatrix::from_fn(d * trials, k, |_, _| normal(rng))).collect(),
    }
}

pub fn random_augmented(rng: &mut ChaCha8Rng, k: usize, d: usize, trials: usize, with_u: bool) -> AugmentedSystem {
    AugmentedSystem {
        a: DVector::from_fn(k, |_, _| rng.random_range(-0.95..0.95)),
        q: rng.random_range(0.05..1.0),
        u: DVector::from_fn(k, |_, _| if with_u { rng.random_range(0.0..0.8) } else { 0.0 }),
        r: (0..trials).map(|_| random_spd(rng, d, 0.2)).collect(),
    }
}

pub fn random_prior(rng: &mut ChaCha8Rng, k: usize, d: usize) -> PriorConfig {
    let mut p = PriorConfig::defaults(k, d);
    p.mu1 = DVector::from_fn(k, |_, _| normal(rng));
    p.sigma1 = random_spd(rng, k, 0.3);
    p
}

/// Norm-wise relative error `|a - b| / |b|` (absolute when `b = 0`).
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn rel_err_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
