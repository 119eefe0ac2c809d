mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvgc::causality::*;
use tvgc::design::{build_system, DesignSpec};
use tvgc::estep::{smooth, AugmentedSystem};
use tvgc::model::{EpochedSeries, PosteriorState, PriorConfig};

fn single_state(mu: DVector<f64>, sigma: DMatrix<f64>) -> PosteriorState {
    let k = mu.len();
    PosteriorState {
        t_start: 0,
        mu_pred: vec![mu.clone()],
        sigma_pred: vec![sigma.clone()],
        mu_s: vec![mu],
        sigma_s: vec![sigma],
        sigma_cross: vec![],
        m1: DMatrix::zeros(k, k),
        m2: DMatrix::zeros(k, k),
        m3: DMatrix::zeros(k, k),
        log_upsilon: 0.0,
        log_normalizer: 0.0,
    }
}

#[test]
fn one_dimensional_example() {
    let st = single_state(DVector::from_element(1, 1.96), DMatrix::identity(1, 1));
    let (m, sig) = hpd_statistic(&st, &[0], 0).unwrap();
    assert!((m - 3.8416).abs() < 1e-12);
    assert!((sig - 0.05).abs() < 1e-4);
}

#[test]
fn direction_of_the_mean_does_not_matter() {
    let a = 2.3;
    let m1 =
        hpd_statistic(&single_state(DVector::from_vec(vec![a, 0.0]), DMatrix::identity(2, 2)), &[0, 1], 0).unwrap();
    let m2 =
        hpd_statistic(&single_state(DVector::from_vec(vec![0.0, a]), DMatrix::identity(2, 2)), &[0, 1], 0).unwrap();
    assert_eq!(m1, m2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn significance_is_invariant_to_reparameterization(seed in 0u64..100_000, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = random_spd(&mut rng, c, 0.05);
        let mu = DVector::from_fn(c, |_, _| normal(&mut rng));
        let mut l = DMatrix::from_fn(c, c, |_, _| normal(&mut rng));
        for i in 0..c {
            l[(i, i)] += 3.0 * l[(i, i)].signum();
        }
        let idx: Vec<usize> = (0..c).collect();
        let (m, sig) = hpd_statistic(&single_state(mu.clone(), sigma.clone()), &idx, 0).unwrap();
        let (m2, sig2) = hpd_statistic(&single_state(&l * mu, &l * sigma * l.transpose()), &idx, 0).unwrap();
        prop_assert!((m - m2).abs() <= 1e-8 * m.max(1.0));
        prop_assert!((sig - sig2).abs() <= 1e-8);
    }

    #[test]
    fn significance_falls_as_the_statistic_grows(a in 0.0f64..50.0, b in 0.0f64..50.0, c in 1usize..8) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (s_lo, s_hi) = (chi2_sf(lo, c), chi2_sf(hi, c));
        prop_assert!((0.0..=1.0).contains(&s_lo) && (0.0..=1.0).contains(&s_hi));
        prop_assert!(s_hi < s_lo);
    }
}

fn dummy_traces(spec: &DesignSpec) -> Vec<CausalityTrace> {
    let slots = spec.slots();
    let k = spec.k(2);
    let st = single_state(DVector::zeros(k), DMatrix::identity(k, k));
    let mut out = Vec::new();
    for dir in Direction::BOTH {
        for scope in scopes(spec) {
            out.push(causality_trace(&st, &slots, 2, dir, scope).unwrap());
        }
    }
    out
}

#[test]
fn tested_dimensions() {
    for p in 1..=4 {
        let traces = dummy_traces(&DesignSpec::time(p));
        assert_eq!(traces.len(), 2);
        assert!(traces.iter().all(|t| t.c == p && t.scope == Scope::Overall));
    }
    let traces = dummy_traces(&DesignSpec::wavelet(vec![5, 5, 3, 1, 1]));
    let x_to_y: Vec<(Scope, usize)> =
        traces.iter().filter(|t| t.direction == Direction::XToY).map(|t| (t.scope, t.c)).collect();
    assert_eq!(
        x_to_y,
        vec![
            (Scope::Overall, 15),
            (Scope::Scale(1), 5),
            (Scope::Scale(2), 5),
            (Scope::Scale(3), 3),
            (Scope::Scale(4), 1),
            (Scope::Smooth, 1)
        ]
    );
    // zero orders get no trace of their own
    let traces = dummy_traces(&DesignSpec::wavelet(vec![2, 0, 1]));
    assert_eq!(traces.len(), 2 * 3);
    assert!(traces.iter().all(|t| t.scope != Scope::Scale(2)));
}

#[test]
fn zero_mean_is_never_significant() {
    let (m, sig) = hpd_statistic(&single_state(DVector::zeros(3), DMatrix::identity(3, 3)), &[0, 1, 2], 0).unwrap();
    assert_eq!((m, sig), (0.0, 1.0));
}

#[test]
fn singular_covariance_falls_back_to_pseudo_inverse() {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let (m, _) = hpd_statistic(&single_state(DVector::from_vec(vec![2.0, 2.0]), sigma), &[0, 1], 0).unwrap();
    // pinv of [[1,1],[1,1]] is a quarter of the same matrix
    assert!((m - 4.0).abs() < 1e-10);
}

/// With `A = 1`, negligible state noise, known `R` and a diffuse start the
/// smoothed posterior is the static GLS posterior, so the statistic is an
/// exact Wald test and its null false-positive rate is the nominal level.
#[test]
fn static_limit_is_calibrated() {
    let reps = 2000;
    let (len, noise) = (100, 0.1f64);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut hits = 0;
    for _ in 0..reps {
        let data: Vec<Vec<f64>> = (0..2).map(|_| (0..len).map(|_| noise.sqrt() * normal(&mut rng)).collect()).collect();
        let series = EpochedSeries::new(vec![data]).unwrap();
        let sys = build_system(&series, &DesignSpec::time(1), None).unwrap();
        let mut prior = PriorConfig::defaults(4, 2);
        prior.sigma1 = DMatrix::identity(4, 4) * 1e8;
        let aug = AugmentedSystem::point(DVector::from_element(4, 1.0), 1e-14, vec![DMatrix::identity(2, 2) * noise]);
        let st = smooth(&aug, &prior, &sys).unwrap();
        let tr = causality_trace(&st, &sys.slots, 2, Direction::XToY, Scope::Overall).unwrap();
        if tr.significance[st.len() / 2] < 0.05 {
            hits += 1;
        }
    }
    let rate = hits as f64 / reps as f64;
    let se = (0.05f64 * 0.95 / reps as f64).sqrt();
    assert!((rate - 0.05).abs() < 3.5 * se, "false-positive rate {rate}");
}

fn trace(stat: &[f64], c: usize) -> CausalityTrace {
    CausalityTrace {
        direction: Direction::XToY,
        scope: Scope::Overall,
        c,
        times: (1..=stat.len()).collect(),
        statistic: stat.to_vec(),
        significance: stat.iter().map(|&m| chi2_sf(m, c)).collect(),
    }
}

#[test]
fn cluster_example() {
    let t = trace(&[0.0, 5.0, 6.0, 0.0], 1);
    assert!((chi2_threshold(0.2, 1) - 1.642).abs() < 1e-3);
    assert_eq!(find_clusters(&t, 0.2), vec![(1, 2, 11.0)]);
    assert!(find_clusters(&trace(&[0.0, 0.1, 1.0], 1), 0.2).is_empty());
}

proptest! {
    #[test]
    fn clusters_are_maximal_runs(stat in prop::collection::vec(0.0f64..6.0, 1..60), level in 0.01f64..0.9) {
        let t = trace(&stat, 1);
        let flags = t.flags(level);
        let clusters = find_clusters(&t, level);
        let mut covered = vec![false; stat.len()];
        for &(a, b, mass) in &clusters {
            prop_assert!(a == 0 || !flags[a - 1]);
            prop_assert!(b + 1 == stat.len() || !flags[b + 1]);
            let sum: f64 = stat[a..=b].iter().sum();
            prop_assert!((sum - mass).abs() < 1e-9);
            for i in a..=b {
                prop_assert!(flags[i]);
                covered[i] = true;
            }
        }
        prop_assert_eq!(covered, flags);
    }
}

#[test]
fn permutation_test_is_reproducible_under_any_pool_size() {
    let observed = trace(&[0.0, 9.0, 9.0, 9.0, 0.0], 1);
    let refit = |flags: &[bool]| {
        let n = flags.iter().filter(|&&f| f).count() as f64;
        Ok(trace(&[0.0, n, 0.5 * n, 0.0, n], 1))
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| cluster_mass_test(&observed, 0.2, 150, 6, 99, refit).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    assert_eq!(a.null_max_masses.len(), 150);
    assert_eq!(a.clusters.len(), 1);
    // null masses are at most 1.5 * 6 = 9 < 27
    assert_eq!(a.clusters[0].p_value, 1.0 / 151.0);
    assert!(cluster_mass_test(&observed, 0.2, 0, 6, 99, refit).is_err());
}
