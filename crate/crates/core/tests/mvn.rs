mod common;

use common::{permuted, phi, random_correlation};
use maxstable::mvn::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn univariate_examples() {
    assert_eq!(std_normal_cdf(0.0), 0.5);
    assert_eq!(std_normal_cdf(f64::INFINITY), 1.0);
    assert!((std_normal_cdf(1.96) - 0.975_002_104_851_779_5).abs() < 1e-12);
    for x in [-6.0, -2.5, -0.3, 0.0, 0.8, 3.1] {
        assert!((std_normal_cdf(x) - phi(x)).abs() < 1e-12);
    }
}

#[test]
fn trivariate_orthant() {
    let rho: f64 = 0.5;
    let exact = 0.125 + 3.0 * rho.asin() / (4.0 * std::f64::consts::PI);
    let c = vec![1.0, rho, rho, rho, 1.0, rho, rho, rho, 1.0];
    let p = MvnProblem::new(vec![0.0; 3], c).unwrap();
    let est = mvn_cdf(&p, &MvnOptions::default()).unwrap();
    assert!((est.value - exact).abs() < 1e-4, "{est:?}");
}

#[test]
fn error_estimate_covers_the_truth() {
    // reference: the same problem at a hundredfold tighter tolerance
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tight = MvnOptions {
        abs_tol: 1e-6,
        max_points: 1 << 20,
        ..Default::default()
    };
    let n = 60;
    let mut covered = 0;
    for k in 0..n {
        let d = rng.gen_range(3..=6);
        let upper = (0..d).map(|_| rng.gen_range(-1.5..2.0)).collect();
        let p = MvnProblem::new(upper, random_correlation(&mut rng, d)).unwrap();
        let opts = MvnOptions {
            seed: k,
            ..Default::default()
        };
        let est = mvn_cdf(&p, &opts).unwrap();
        let reference = mvn_cdf(&p, &tight).unwrap();
        if (est.value - reference.value).abs() <= est.error + reference.error {
            covered += 1;
        }
    }
    assert!(covered as f64 >= 0.95 * n as f64, "{covered} of {n}");
}

#[test]
fn thread_count_does_not_change_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = MvnProblem::new(
        vec![0.3, -0.2, 1.1, 0.5, 0.0],
        random_correlation(&mut rng, 5),
    )
    .unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mvn_cdf(&p, &MvnOptions::default()).unwrap())
    };
    let one = run(1);
    assert_eq!(one.value.to_bits(), run(3).value.to_bits());
    assert_eq!(one.error.to_bits(), run(3).error.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn independence_factorizes(upper in proptest::collection::vec(-3.0f64..3.0, 1..=10)) {
        let want: f64 = upper.iter().map(|&b| phi(b)).product();
        let est = mvn_cdf(&MvnProblem::identity(upper).unwrap(), &MvnOptions::default()).unwrap();
        prop_assert!((est.value - want).abs() <= est.error.max(1e-13));
        prop_assert!((est.value - want).abs() <= 1e-6);
    }

    #[test]
    fn raising_a_limit_never_lowers_the_probability(seed in 0u64..10_000, d in 3usize..=6,
                                                    at in 0usize..6, step in 0.05f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upper: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..2.0)).collect();
        let corr = random_correlation(&mut rng, d);
        let mut raised = upper.clone();
        raised[at % d] += step;
        let opts = MvnOptions::default();
        let lo = mvn_cdf(&MvnProblem::new(upper, corr.clone()).unwrap(), &opts).unwrap();
        let hi = mvn_cdf(&MvnProblem::new(raised, corr).unwrap(), &opts).unwrap();
        prop_assert!(hi.value >= lo.value - 3.0 * lo.error.max(hi.error), "{:?} {:?}", lo, hi);
    }

    #[test]
    fn permutations_agree(seed in 0u64..10_000, d in 3usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upper: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..2.0)).collect();
        let p = MvnProblem::new(upper, random_correlation(&mut rng, d)).unwrap();
        let mut perm: Vec<usize> = (0..d).collect();
        perm.reverse();
        perm.swap(0, d / 2);
        let opts = MvnOptions::default();
        let a = mvn_cdf(&p, &opts).unwrap();
        let b = mvn_cdf(&permuted(&p, &perm), &opts).unwrap();
        prop_assert!((a.value - b.value).abs() <= 2.0 * a.error.max(b.error) + 1e-12, "{:?} {:?}", a, b);
    }

    #[test]
    fn identical_problems_give_identical_bits(seed in 0u64..10_000, d in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upper: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = MvnProblem::new(upper, random_correlation(&mut rng, d)).unwrap();
        let a = mvn_cdf(&p, &MvnOptions::default()).unwrap();
        let b = mvn_cdf(&p.clone(), &MvnOptions::default()).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a.error.to_bits(), b.error.to_bits());
    }
}
