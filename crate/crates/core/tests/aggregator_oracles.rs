use fmpa_core::aggregation::{bulyan, coordinate_median, krum, mkrum, trimmed_mean, AggregationContext, AggregatorSpec};
use fmpa_core::ParamVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_updates(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<ParamVector> {
    (0..n).map(|_| ParamVector::new((0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()).collect()
}

fn sorted_column(u: &[ParamVector], j: usize) -> Vec<f64> {
    let mut c: Vec<f64> = u.iter().map(|v| v.as_slice()[j]).collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c
}

fn median_oracle(u: &[ParamVector]) -> Vec<f64> {
    (0..u[0].dim())
        .map(|j| {
            let c = sorted_column(u, j);
            let n = c.len();
            if n % 2 == 1 {
                c[n / 2]
            } else {
                (c[n / 2 - 1] + c[n / 2]) / 2.0
            }
        })
        .collect()
}

fn trmean_oracle(u: &[ParamVector], beta: usize) -> Vec<f64> {
    (0..u[0].dim())
        .map(|j| {
            let c = sorted_column(u, j);
            let inner = &c[beta..c.len() - beta];
            inner.iter().sum::<f64>() / inner.len() as f64
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn median_and_trmean_match_sort_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=50);
        let u = random_updates(&mut rng, n, d);
        assert!(close(coordinate_median(&u).unwrap().update.as_slice(), &median_oracle(&u), 1e-12));
        let beta = rng.random_range(0..=(n - 1) / 2);
        assert!(close(trimmed_mean(&u, beta).unwrap().update.as_slice(), &trmean_oracle(&u, beta), 1e-12));
    }
}

// Brute-force Krum family, written directly from the definitions.

fn sqd(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn krum_pick(u: &[ParamVector], pool: &[usize], m: usize) -> usize {
    let n = pool.len();
    let k = if n == 1 { 0 } else { n.saturating_sub(m + 2).max(1).min(n - 1) };
    let mut best: Option<(f64, usize)> = None;
    for (pos, &i) in pool.iter().enumerate() {
        let mut ds: Vec<f64> = pool.iter().filter(|&&j| j != i).map(|&j| sqd(&u[i], &u[j])).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s: f64 = ds[..k].iter().sum();
        if best.is_none_or(|(b, _)| s < b) {
            best = Some((s, pos));
        }
    }
    best.unwrap().1
}

fn select(u: &[ParamVector], m: usize, size: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..u.len()).collect();
    let mut out = Vec::new();
    while out.len() < size {
        let pos = krum_pick(u, &pool, m);
        out.push(pool.remove(pos));
    }
    out.sort_unstable();
    out
}

fn mean_of(u: &[ParamVector], idx: &[usize]) -> Vec<f64> {
    let d = u[0].dim();
    (0..d).map(|j| idx.iter().map(|&i| u[i].as_slice()[j]).sum::<f64>() / idx.len() as f64).collect()
}

#[test]
fn krum_family_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.random_range(3..=12);
        let d = rng.random_range(1..=20);
        let u = random_updates(&mut rng, n, d);
        let m = rng.random_range(0..=n - 3);

        let k = krum(&u, m).unwrap();
        let w = select(&u, m, 1);
        assert_eq!(k.kept, w);
        assert_eq!(k.update, u[w[0]]);

        let size = rng.random_range(1..=n - m);
        let mk = mkrum(&u, m, size).unwrap();
        let sel = select(&u, m, size);
        assert_eq!(mk.kept, sel);
        assert!(close(mk.update.as_slice(), &mean_of(&u, &sel), 1e-12));

        let bm = (n.saturating_sub(3)) / 4;
        if n >= 4 * bm + 3 {
            let gamma = n - 2 * bm;
            let b = bulyan(&u, bm, None).unwrap();
            let sel = select(&u, bm, gamma);
            assert_eq!(b.kept, sel);
            let chosen: Vec<ParamVector> = sel.iter().map(|&i| u[i].clone()).collect();
            assert!(close(b.update.as_slice(), &trmean_oracle(&chosen, bm), 1e-12));
        }
    }
}

fn all_rules(n: usize) -> Vec<AggregatorSpec> {
    let m = (n.saturating_sub(3) / 4).max(1);
    vec![
        AggregatorSpec::Fedavg,
        AggregatorSpec::Krum { m },
        AggregatorSpec::Mkrum { m, selection: None },
        AggregatorSpec::Median,
        AggregatorSpec::Trmean { beta: m },
        AggregatorSpec::NormBounding,
        AggregatorSpec::Bulyan { m, selection: None },
        AggregatorSpec::Faba { m },
        AggregatorSpec::Afa { threshold: 0.5, max_passes: 10 },
        AggregatorSpec::Cc { iterations: 1, radius: 100.0 },
        AggregatorSpec::Dnc { m, subsample_dim: None, filter_coef: 1.0, power_iters: 50 },
    ]
}

fn updates_strategy() -> impl Strategy<Value = Vec<ParamVector>> {
    (7usize..14, 1usize..12).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
            .prop_map(|rows| rows.into_iter().map(|r| ParamVector::new(r).unwrap()).collect())
    })
}

/// Pairwise distances separated enough that no selection rule meets a tie.
fn tie_free(u: &[ParamVector]) -> bool {
    let mut ds = Vec::new();
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            ds.push(sqd(&u[i], &u[j]));
        }
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ds.windows(2).all(|w| w[1] - w[0] > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_rule_returns_finite_update_of_input_dim(u in updates_strategy(), seed in any::<u64>()) {
        let prev = u[0].scale(0.5);
        let ctx = AggregationContext { prev_global_update: Some(&prev), seed, round: 3 };
        for rule in all_rules(u.len()) {
            let out = rule.aggregate(&u, &ctx).unwrap();
            prop_assert!(out.update.is_finite(), "{}", rule.name());
            prop_assert_eq!(out.update.dim(), u[0].dim());
        }
    }

    #[test]
    fn identical_inputs_are_returned_exactly(v in prop::collection::vec(-5.0f64..5.0, 1..12), n in 7usize..14) {
        let v = ParamVector::new(v).unwrap();
        let u = vec![v.clone(); n];
        let prev = v.scale(2.0);
        let ctx = AggregationContext { prev_global_update: Some(&prev), seed: 1, round: 0 };
        for rule in all_rules(n) {
            let out = rule.aggregate(&u, &ctx).unwrap();
            // the mean of n equal floats can differ from the float itself in the last bit
            prop_assert!(close(out.update.as_slice(), v.as_slice(), 1e-15), "{}", rule.name());
        }
    }

    #[test]
    fn permuting_clients_keeps_the_update(u in updates_strategy().prop_filter("tie-free", |u| tie_free(u)), rot in 1usize..6) {
        let n = u.len();
        let mut p = u.clone();
        p.rotate_left(rot % n);
        let prev = u[1].scale(-0.3);
        let ctx = AggregationContext { prev_global_update: Some(&prev), seed: 5, round: 2 };
        // Once the Krum pool shrinks to m + 3 the neighbour count is 1 and mutual nearest
        // neighbours tie by construction; keep the selections short of that point.
        let m = (n.saturating_sub(3) / 4).max(1);
        let rules = all_rules(n).into_iter().map(|r| match r {
            AggregatorSpec::Mkrum { m, .. } => AggregatorSpec::Mkrum { m, selection: Some(n - 2 * m - 3) },
            AggregatorSpec::Bulyan { m, .. } => AggregatorSpec::Bulyan { m, selection: Some(2 * m + 1) },
            other => other,
        });
        prop_assert!(n >= 3 * m + 4);
        for rule in rules {
            // DNC subsamples coordinates but scores rows independently of their position
            let a = rule.aggregate(&u, &ctx).unwrap().update;
            let b = rule.aggregate(&p, &ctx).unwrap().update;
            prop_assert!(close(a.as_slice(), b.as_slice(), 1e-9), "{}", rule.name());
        }
    }
}
