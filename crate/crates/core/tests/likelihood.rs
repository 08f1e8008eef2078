mod common;

use common::*;
use maxstable::likelihood::*;
use maxstable::models::{LogisticParams, Model, Point};
use maxstable::partitions::{binomial, PartitionTable};
use maxstable::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logistic(alpha: f64) -> Model {
    Model::Logistic(LogisticParams::new(alpha).unwrap())
}

/// Every set partition of `0..n` as a list of block bitmasks, built by
/// placing each element into an existing block or a new one.
fn partitions_recursive(n: usize) -> Vec<Vec<usize>> {
    fn go(i: usize, n: usize, blocks: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(blocks.clone());
            return;
        }
        for b in 0..blocks.len() {
            blocks[b] |= 1 << i;
            go(i + 1, n, blocks, out);
            blocks[b] &= !(1 << i);
        }
        blocks.push(1 << i);
        go(i + 1, n, blocks, out);
        blocks.pop();
    }
    let mut out = Vec::new();
    go(0, n, &mut Vec::new(), &mut out);
    out
}

/// `-V + ln sum_P prod_{S in P} (-V_S)` straight from the model partials.
fn density_oracle(model: &Model, z: &[f64]) -> f64 {
    let v = model.exponent_measure(z).unwrap();
    let dv = model.all_partials(z).unwrap();
    let terms: Vec<f64> = partitions_recursive(z.len())
        .iter()
        .map(|p| p.iter().map(|&s| dv.log_neg(s)).sum())
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -v + top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn univariate_and_independent_examples() {
    let t1 = PartitionTable::build(1).unwrap();
    assert_eq!(log_density_full(&logistic(0.5), &[1.0], &t1).unwrap(), -1.0);
    let t2 = PartitionTable::build(2).unwrap();
    let got = log_density_full(&logistic(1.0), &[1.0, 2.0], &t2).unwrap();
    let want = (-1.0 + 0.0) + (-0.5 - 2.0 * 2f64.ln());
    assert!((got - want).abs() < 1e-14, "{got} vs {want}");
}

#[test]
fn table_density_matches_recursive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for q in 1..=6 {
        let table = PartitionTable::build(q).unwrap();
        for k in 0..12 {
            let model = match k % 4 {
                0 => random_logistic(&mut rng),
                1 => random_mixture(&mut rng),
                2 => random_reich_shaby(&mut rng, q),
                _ if q <= 4 => random_brown_resnick(&mut rng, q),
                _ => random_logistic(&mut rng),
            };
            let z = random_z(&mut rng, q);
            let got = log_density_full(&model, &z, &table).unwrap();
            let want = density_oracle(&model, &z);
            assert!(rel(got, want) < 1e-10, "q {q} {model:?}: {got} vs {want}");
        }
    }
}

#[test]
fn density_is_mixed_derivative_of_cdf() {
    let model = logistic(0.6);
    let cdf = |z: &[f64]| (-model.exponent_measure(z).unwrap()).exp();
    let mixed = |z: &[f64], h: f64| {
        let mut acc = 0.0;
        for signs in 0..8 {
            let mut x = z.to_vec();
            let mut sign = 1.0;
            for (i, xi) in x.iter_mut().enumerate() {
                if signs & (1 << i) != 0 {
                    *xi += h * z[i];
                } else {
                    *xi -= h * z[i];
                    sign = -sign;
                }
            }
            acc += sign * cdf(&x);
        }
        acc / (8.0 * h * h * h * z.iter().product::<f64>())
    };
    let table = PartitionTable::build(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..10 {
        let z = random_z(&mut rng, 3);
        let h = 2e-3;
        let numeric = (4.0 * mixed(&z, h / 2.0) - mixed(&z, h)) / 3.0;
        let analytic = log_density_full(&model, &z, &table).unwrap().exp();
        assert!(
            rel(numeric, analytic) < 1e-4,
            "{z:?}: {numeric} vs {analytic}"
        );
    }
}

#[test]
fn cdf_consistency_in_two_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let table = PartitionTable::build(2).unwrap();
    for _ in 0..20 {
        let model = random_reich_shaby(&mut rng, 2);
        let z = random_z(&mut rng, 2);
        let cdf = |x: &[f64]| (-model.exponent_measure(x).unwrap()).exp();
        let d1 = |x: &[f64]| richardson(cdf, x, 0, 1e-3);
        let numeric = richardson(d1, &z, 1, 1e-3);
        let analytic = log_density_full(&model, &z, &table).unwrap().exp();
        assert!(rel(numeric, analytic) < 1e-4, "{numeric} vs {analytic}");
    }
}

/// Composite Simpson weights on `n` (even) intervals.
fn simpson(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| match i {
            0 => 1.0,
            i if i == n => 1.0,
            i if i % 2 == 1 => 4.0,
            _ => 2.0,
        })
        .collect()
}

#[test]
fn bivariate_density_integrates_to_one() {
    // integrate over (ln z1, ln z2); the margins are Gumbel there
    let (lo, hi, n) = (-4.0f64, 30.0f64, 1700usize);
    let h = (hi - lo) / n as f64;
    let w = simpson(n);
    let table = PartitionTable::build(2).unwrap();
    for alpha in [0.3, 0.6, 0.9] {
        let model = logistic(alpha);
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let mut row = 0.0;
            for j in 0..=n {
                let y = lo + j as f64 * h;
                let ld = log_density_full(&model, &[x.exp(), y.exp()], &table).unwrap();
                row += w[j] * (ld + x + y).exp();
            }
            total += w[i] * row;
        }
        total *= h * h / 9.0;
        assert!((total - 1.0).abs() < 1e-3, "alpha {alpha}: {total}");
    }
}

fn line_sites(n: usize) -> Vec<Point> {
    (0..n).map(|i| [i as f64, 0.0]).collect()
}

#[test]
fn scheme_examples_on_a_line() {
    let sites = line_sites(3);
    let full = build_scheme(3, 2, Some(&sites), 1.0, WeightRule::Unit).unwrap();
    assert_eq!(full.len(), 3);
    let one = build_scheme(3, 2, Some(&sites), 0.34, WeightRule::Unit).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.subsets[0].members(), &[0, 1]);
    assert_eq!(one.max_distance.as_deref(), Some(&[1.0][..]));
}

#[test]
fn scheme_errors() {
    let sites = line_sites(3);
    assert!(matches!(
        build_scheme(3, 2, Some(&sites), 0.0, WeightRule::Unit),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        build_scheme(3, 2, None, 0.5, WeightRule::Unit),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        build_scheme(3, 4, None, 1.0, WeightRule::Unit),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        build_scheme(3, 2, None, 1.0, WeightRule::Constant(-1.0)),
        Err(Error::Domain(_))
    ));
}

/// Sorts every `q`-subset by (max distance, member list).
fn ranking_oracle(sites: &[Point], q: usize) -> Vec<(f64, Vec<usize>)> {
    let n = sites.len();
    let mut all = Vec::new();
    for mask in 0usize..(1 << n) {
        if mask.count_ones() as usize != q {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut d: f64 = 0.0;
        for &a in &members {
            for &b in &members {
                d = d.max(
                    ((sites[a][0] - sites[b][0]).powi(2) + (sites[a][1] - sites[b][1]).powi(2))
                        .sqrt(),
                );
            }
        }
        all.push((d, members));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    all
}

#[test]
fn truncated_scheme_matches_brute_force_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sites = unit_square(&mut rng, 5);
    let scheme = build_scheme(5, 3, Some(&sites), 0.5, WeightRule::Unit).unwrap();
    assert_eq!(scheme.len(), 5);
    let oracle = ranking_oracle(&sites, 3);
    for (s, (_, m)) in scheme.subsets.iter().zip(&oracle) {
        assert_eq!(s.members(), &m[..]);
    }
}

#[test]
fn composite_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let model = random_logistic(&mut rng);
        let z = random_z(&mut rng, 4);
        let table = PartitionTable::build(4).unwrap();
        let full = log_density_full(&model, &z, &table).unwrap();
        let scheme = build_scheme(4, 4, None, 1.0, WeightRule::Unit).unwrap();
        assert_eq!(log_composite(&model, &scheme, &z).unwrap(), full);

        let pairs = build_scheme(4, 2, None, 1.0, WeightRule::Unit).unwrap();
        let once = log_composite(&model, &pairs, &z).unwrap();
        let twice = log_composite(&model, &pairs.scaled(2.0).unwrap(), &z).unwrap();
        assert!((twice - 2.0 * once).abs() <= 1e-13 * once.abs());
    }
    // independence: every margin appears in two of the three pairs
    let model = logistic(1.0);
    let z = [0.7, 1.9, 3.2];
    let full = log_density_full(&model, &z, &PartitionTable::build(3).unwrap()).unwrap();
    let pairs = build_scheme(3, 2, None, 1.0, WeightRule::Unit).unwrap();
    let cl = log_composite(&model, &pairs, &z).unwrap();
    assert!(
        (cl - 2.0 * full).abs() < 1e-13 * full.abs(),
        "{cl} vs {full}"
    );
}

fn random_dataset(rng: &mut ChaCha8Rng, m: usize, q: usize) -> Dataset {
    let rows = (0..m).map(|_| random_z(rng, q)).collect();
    Dataset::new(rows, Some(unit_square(rng, q))).unwrap()
}

#[test]
fn replicate_sum_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = logistic(0.45);
    let data = random_dataset(&mut rng, 9, 5);
    let scheme = build_scheme(5, 3, data.locations(), 0.6, WeightRule::Unit).unwrap();

    let single = data.select(&[4]);
    let one = log_likelihood_replicates(&model, &scheme, &single)
        .unwrap()
        .value;
    assert_eq!(
        one,
        log_composite(&model, &scheme, data.replicate(4)).unwrap()
    );

    let a = log_likelihood_replicates(&model, &scheme, &data.select(&[0]))
        .unwrap()
        .value;
    let b = log_likelihood_replicates(&model, &scheme, &data.select(&[1]))
        .unwrap()
        .value;
    let ab = log_likelihood_replicates(&model, &scheme, &data.select(&[0, 1]))
        .unwrap()
        .value;
    assert!((ab - (a + b)).abs() <= 1e-13 * ab.abs());

    let all = log_likelihood_replicates(&model, &scheme, &data)
        .unwrap()
        .value;
    let shuffled = data.select(&[3, 8, 0, 5, 1, 7, 2, 6, 4]);
    let perm = log_likelihood_replicates(&model, &scheme, &shuffled)
        .unwrap()
        .value;
    assert!((all - perm).abs() <= 1e-12 * all.abs());
}

#[test]
fn telemetry_counts_partials() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = logistic(0.7);
    let data = random_dataset(&mut rng, 6, 7);
    for q in 1..=7 {
        let scheme = build_scheme(7, q, None, 1.0, WeightRule::Unit).unwrap();
        let v = log_likelihood_replicates(&model, &scheme, &data).unwrap();
        let expect = binomial(7, q as u64).unwrap() as u64 * ((1u64 << q) - 1) * 6;
        assert_eq!(v.telemetry.partial_evaluations, expect);
        assert!(v.telemetry.table_bytes > 0);
    }
}

#[test]
fn bit_identical_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = random_reich_shaby(&mut rng, 8);
    let data = {
        let rows = (0..40).map(|_| random_z(&mut rng, 8)).collect();
        let Model::ReichShaby(p) = &model else {
            unreachable!()
        };
        Dataset::new(rows, Some(p.locations().to_vec())).unwrap()
    };
    let scheme = build_scheme(8, 3, data.locations(), 0.5, WeightRule::Unit).unwrap();
    let eval = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                log_likelihood_replicates(&model, &scheme, &data)
                    .unwrap()
                    .value
            })
    };
    let one = eval(1);
    assert_eq!(one.to_bits(), eval(3).to_bits());
    assert_eq!(one.to_bits(), eval(8).to_bits());
}

#[test]
fn dimension_mismatch_is_rejected() {
    let scheme = build_scheme(3, 2, None, 1.0, WeightRule::Unit).unwrap();
    assert!(log_composite(&logistic(0.5), &scheme, &[1.0, 2.0]).is_err());
    assert!(Dataset::new(vec![vec![1.0, -2.0]], None).is_err());
    assert!(Dataset::new(vec![vec![1.0, 2.0]], Some(vec![[0.0, 0.0], [0.0, 0.0]])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scheme_invariants(seed in 0u64..10_000, total in 2usize..=9, qf in 0.0f64..1.0, t in 0.01f64..=1.0) {
        let q = 1 + ((total - 1) as f64 * qf) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = unit_square(&mut rng, total);
        let s = build_scheme(total, q, Some(&sites), t, WeightRule::Unit).unwrap();
        let c = binomial(total as u64, q as u64).unwrap();
        prop_assert_eq!(s.len() as u128, retained_count(c, t));
        prop_assert!(s.subsets.iter().all(|x| x.len() == q));
        let mut seen = s.subsets.clone();
        seen.sort_by(|a, b| a.members().cmp(b.members()));
        seen.dedup();
        prop_assert_eq!(seen.len(), s.len());
        let d = s.max_distance.clone().unwrap();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let oracle = ranking_oracle(&sites, q);
        for (x, (_, m)) in s.subsets.iter().zip(&oracle) {
            prop_assert_eq!(x.members(), &m[..]);
        }
    }

    #[test]
    fn density_matches_oracle(seed in 0u64..100_000, q in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = if seed % 2 == 0 { random_mixture(&mut rng) } else { random_reich_shaby(&mut rng, q) };
        let z = random_z(&mut rng, q);
        let table = PartitionTable::build(q).unwrap();
        let got = log_density_full(&model, &z, &table).unwrap();
        prop_assert!(rel(got, density_oracle(&model, &z)) < 1e-10);
    }

    #[test]
    fn composite_weights_are_linear(seed in 0u64..100_000, w in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_logistic(&mut rng);
        let z = random_z(&mut rng, 5);
        let s = build_scheme(5, 2, None, 1.0, WeightRule::Unit).unwrap();
        let base = log_composite(&model, &s, &z).unwrap();
        let scaled = log_composite(&model, &s.scaled(w).unwrap(), &z).unwrap();
        prop_assert!((scaled - w * base).abs() <= 1e-12 * (w * base).abs().max(1.0));
    }
}
