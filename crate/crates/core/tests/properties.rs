mod common;

use common::checks;
use common::{instance, Instance};
use proptest::prelude::*;
use rayon::prelude::*;
use shim_conformal::conformal::{
    default_range, full_cp, full_cp_point, p_value, segment_crossings, split_cp,
};
use shim_conformal::datagen::{generate, SyntheticSpec};
use shim_conformal::oracle::{expand, DEFAULT_CAP};
use shim_conformal::patterns::{materialize, pattern_count, CovariateMatrix, Pattern};
use shim_conformal::solver::{certify_kkt, fit_traced, FitConfig};
use shim_conformal::taupath::{
    compute_tau_path, directions, step_join, Event, Kink, PathOptions,
};

fn config() -> impl Strategy<Value = FitConfig> {
    (
        prop::sample::select(vec![0.5, 1.0, 5.0]),
        prop::sample::select(vec![0.0, 0.5]),
        1usize..=3,
    )
        .prop_map(|(lambda, l2, d)| FitConfig::new(lambda).with_l2(l2).with_max_order(Some(d)))
}

fn small_instance() -> impl Strategy<Value = Instance> {
    (any::<u64>(), 8usize..=25, 2usize..=6, 0.3f64..0.8).prop_map(|(s, n, m, p)| instance(s, n, m, p))
}

fn binary_matrix(n: usize, m: usize) -> impl Strategy<Value = CovariateMatrix> {
    prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.6), m), n).prop_map(|bits| {
        let rows: Vec<Vec<f64>> = bits
            .iter()
            .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect();
        CovariateMatrix::from_rows(&rows).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kkt_holds_at_every_kink(inst in small_instance(), cfg in config()) {
        let d = cfg.max_order.unwrap();
        checks::kkt_at_kinks(&inst, &cfg, d).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn path_is_piecewise_linear(inst in small_instance(), cfg in config(), f in 0.05f64..0.95) {
        let d = cfg.max_order.unwrap();
        checks::piecewise_linear(&inst, &cfg, d, &[f]).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bounds_dominate_descendants(
        (z, w, v) in (2usize..30, 1usize..=8).prop_flat_map(|(n, m)| (
            binary_matrix(n, m),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        ))
    ) {
        checks::bound_dominance(&z, &w, &v).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn conformal_set_ignores_row_order(
        (inst, perm) in small_instance().prop_flat_map(|inst| {
            let n = inst.y.len();
            (Just(inst), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
        cfg in config(),
    ) {
        checks::permutation_invariant(&inst, &cfg, 0.1, &perm).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn larger_alpha_gives_subset(inst in small_instance(), cfg in config(), a in 0.02f64..0.5, b in 0.02f64..0.5) {
        checks::alpha_monotone(&inst, &cfg, &[a, b, 0.1]).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn pruned_join_search_matches_exhaustive(
        s: u64, n in 8usize..=30, m in 2usize..=10, p in 0.3f64..0.8, cfg in config()
    ) {
        let inst = instance(s, n, m, p);
        let path = compute_tau_path(&inst.z, &inst.y, default_range(&inst.y), &cfg).unwrap();
        let open = cfg.clone().with_prune(false);
        for kink in &path.kinks {
            let a = step_join(kink, &inst.z, &cfg);
            let b = step_join(kink, &inst.z, &open);
            prop_assert_eq!(&a.joiner, &b.joiner);
            prop_assert!(a.delta == b.delta || (a.delta - b.delta).abs() <= 1e-12 * (1.0 + b.delta.abs()));
            prop_assert!(a.nodes_visited <= b.nodes_visited);
        }
        let p = pattern_count(m, cfg.max_order.unwrap()) as f64;
        prop_assert!((path.kinks.len() as f64) <= 3f64.powf(p) + 2.0);
    }

    #[test]
    fn events_are_consistent(inst in small_instance(), cfg in config()) {
        let path = compute_tau_path(&inst.z, &inst.y, default_range(&inst.y), &cfg).unwrap();
        for k in 1..path.kinks.len() {
            let (prev, here) = (&path.kinks[k - 1], &path.kinks[k]);
            let find = |kink: &Kink, p: &Pattern| kink.active.iter().position(|t| &t.pattern == p);
            match &here.event {
                Event::Leave { pattern } => {
                    prop_assert!(find(here, pattern).is_none());
                    let a = find(prev, pattern).expect("leaver was active");
                    let at = prev.coefficients_at(here.tau)[a];
                    prop_assert!(at.abs() <= 1e-9 * (1.0 + prev.active[a].coef.abs()), "leaver at {}", at);
                }
                Event::Join { pattern, sign } => {
                    let a = find(here, pattern).expect("joiner is active");
                    prop_assert_eq!(here.active[a].coef, 0.0);
                    prop_assert_eq!(here.active[a].sign, *sign);
                    prop_assert!(here.nu[a] * f64::from(*sign) >= 0.0, "ν {} against sign {}", here.nu[a], sign);
                    prop_assert!(find(prev, pattern).is_none());
                }
                Event::End => prop_assert_eq!(k, path.kinks.len() - 1),
                Event::Start => prop_assert!(false, "start event after the first kink"),
            }
        }
    }

    #[test]
    fn p_value_constant_between_crossings(inst in small_instance(), cfg in config(), u in prop::collection::vec(0.0f64..1.0, 5)) {
        let path = compute_tau_path(&inst.z, &inst.y, default_range(&inst.y), &cfg).unwrap();
        for pair in path.kinks.windows(2) {
            let mut cuts = vec![pair[0].tau];
            cuts.extend(segment_crossings(&pair[0], pair[1].tau));
            cuts.push(pair[1].tau);
            for piece in cuts.windows(2) {
                let (lo, hi) = (piece[0], piece[1]);
                // pieces this short cannot be probed away from their ends
                if hi - lo < 1e-6 {
                    continue;
                }
                let pi = |t: f64| {
                    let scores: Vec<f64> = pair[0].residual_at(t).iter().map(|x| x.abs()).collect();
                    p_value(&scores)
                };
                let first = pi(lo + (0.01 + 0.98 * u[0]) * (hi - lo));
                for &f in &u[1..] {
                    prop_assert_eq!(pi(lo + (0.01 + 0.98 * f) * (hi - lo)), first);
                }
            }
        }
    }

    #[test]
    fn crossings_match_sign_scan(
        a in prop::collection::vec(-3.0f64..3.0, 13),
        b in prop::collection::vec(-1.0f64..1.0, 13),
    ) {
        let kink = Kink {
            tau: 0.0,
            active: vec![],
            event: Event::Start,
            nu: vec![],
            residual: a.clone(),
            residual_direction: b.clone(),
            joiner_gamma: None,
            nodes_visited: 0,
            degenerate: false,
        };
        let len = 2.0;
        let grid = 1_000_000;
        let step = len / grid as f64;
        let found = segment_crossings(&kink, len);
        let (at, ct) = (a[12], 1.0 - b[12]);
        let mut changes = Vec::new();
        for i in 0..12 {
            let f = |t: f64| (a[i] - t * b[i]).abs() - (at + t * ct).abs();
            let mut prev = f(0.0);
            for k in 1..=grid {
                let t = k as f64 * step;
                let cur = f(t);
                if (prev < 0.0) != (cur < 0.0) && prev != 0.0 && k < grid {
                    changes.push(t - 0.5 * step);
                }
                prev = cur;
            }
        }
        for &c in &changes {
            prop_assert!(found.iter().any(|&x| (x - c).abs() <= step), "sign change near {} missed: {:?}", c, found);
        }
        for &x in &found {
            prop_assert!(changes.iter().any(|&c| (x - c).abs() <= step), "crossing {} without sign change", x);
        }
    }

    #[test]
    fn null_model_set_has_closed_form(y in prop::collection::vec(-10.0f64..10.0, 4..30), alpha in 0.05f64..0.5) {
        let n = y.len();
        let rows: Vec<Vec<f64>> = (0..=n).map(|i| vec![(i % 2) as f64, 1.0]).collect();
        let z = CovariateMatrix::from_rows(&rows).unwrap();
        let cfg = FitConfig::new(1e6);
        let range = default_range(&y);
        let path = compute_tau_path(&z, &y, range, &cfg).unwrap();
        prop_assert_eq!(path.kinks.len(), 2);
        let set = full_cp(&path, alpha).unwrap();

        let mut mags: Vec<f64> = y.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let allowed = ((1.0 - alpha) * (n as f64 + 1.0) - 1.0 + 1e-9).floor() as usize;
        let (lo, hi) = if allowed >= n {
            range
        } else {
            ((-mags[allowed]).max(range.0), mags[allowed].min(range.1))
        };
        prop_assert_eq!(set.intervals.len(), 1);
        let (a, b) = set.intervals[0];
        prop_assert!((a - lo).abs() <= 1e-9 && (b - hi).abs() <= 1e-9, "{:?} vs [{}, {}]", set.intervals, lo, hi);
    }

    #[test]
    fn solver_rounds_never_increase_objective(inst in small_instance(), cfg in config()) {
        let y = shim_conformal::solver::augmented_response(&inst.y, 0.3);
        let (state, trace) = fit_traced(&inst.z, &y, &cfg).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()), "objective rose {} -> {}", w[0], w[1]);
        }
        let report = certify_kkt(&state, &inst.z, &cfg).unwrap();
        prop_assert!(report.passed);
        let exp = expand(&inst.z, cfg.max_order.unwrap(), DEFAULT_CAP).unwrap();
        let brute = (0..exp.len())
            .filter(|&j| state.coefficient(&exp.patterns[j]) == 0.0)
            .map(|j| exp.dot(j, &state.residual).abs())
            .fold(0.0, f64::max);
        prop_assert!((report.max_inactive - brute).abs() <= 1e-10 * (1.0 + brute));
    }

    #[test]
    fn materialize_matches_products(z in binary_matrix(20, 5), items in prop::sample::subsequence(vec![0u32, 1, 2, 3, 4], 1..=3).prop_shuffle()) {
        let mut shuffled = items.clone();
        shuffled.reverse();
        let p = Pattern::new(items.clone(), 5).unwrap();
        let q = Pattern::new(shuffled, 5).unwrap();
        prop_assert_eq!(&p, &q);
        let col = materialize(&p, &z).unwrap();
        let dense = col.dense();
        for i in 0..20 {
            let prod: f64 = items.iter().map(|&j| z.get(i, j as usize)).product();
            prop_assert_eq!(dense[i], prod);
            prop_assert_eq!(col.entry(i), prod);
        }
    }

    #[test]
    fn directions_solve_the_normal_equations(z in binary_matrix(16, 5), l2 in prop::sample::select(vec![0.0, 0.5])) {
        let active: Vec<Pattern> = [&[0u32][..], &[1, 2], &[3]]
            .iter()
            .map(|p| Pattern::new(p.to_vec(), 5).unwrap())
            .collect();
        let res = directions(&active, &z, l2);
        prop_assume!(res.is_ok());
        let (nu, v) = res.unwrap();
        let cols: Vec<Vec<f64>> = active.iter().map(|p| materialize(p, &z).unwrap().dense()).collect();
        for (a, ca) in cols.iter().enumerate() {
            let lhs: f64 = cols.iter().zip(&nu).map(|(cb, x)| x * ca.iter().zip(cb).map(|(p, q)| p * q).sum::<f64>()).sum::<f64>() + l2 * nu[a];
            prop_assert!((lhs - ca[15]).abs() <= 1e-10, "row {}: {} vs {}", a, lhs, ca[15]);
        }
        for i in 0..16 {
            let vi: f64 = cols.iter().zip(&nu).map(|(c, x)| c[i] * x).sum();
            prop_assert!((vi - v[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn split_with_constant_scores() {
    let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![(i % 2) as f64]).collect();
    let z = CovariateMatrix::from_rows(&rows).unwrap();
    let y_train = vec![0.1, -0.1, 0.2, 0.0, 0.1, -0.2, 0.0, 0.05];
    let y_cal = vec![1.5, -1.5, 1.5, 1.5, -1.5, 1.5, -1.5, 1.5];
    let cfg = FitConfig::new(100.0);
    let res = split_cp(&z, &y_train, &z, &y_cal, &[1.0], &cfg, 0.2).unwrap();
    assert_eq!(res.q, 1.5);
    assert_eq!(res.interval, (-1.5, 1.5));
    assert!(!res.unbounded);

    let res = split_cp(&z, &y_train, &z, &y_cal, &[1.0], &cfg, 0.05).unwrap();
    assert!(res.unbounded && res.q.is_infinite());
}

#[test]
fn monte_carlo_coverage() {
    let alpha = 0.1;
    let draws = 500;
    let cfg = FitConfig::new(1.0).with_max_order(Some(2));
    let covered: usize = (0..draws as u64)
        .into_par_iter()
        .map(|s| {
            // (n+1)α integral, so the rank guarantee is exactly 1 − α
            let ds = generate(&SyntheticSpec::planted(30, 5, 0.5, 10_000 + s)).unwrap();
            let (train, test) = ds.split_at(29).unwrap();
            let (set, _) = full_cp_point(&train.z, &train.y, &test.z.row(0), &cfg, alpha, None, &PathOptions::default()).unwrap();
            usize::from(set.contains(test.y[0]))
        })
        .sum();
    let rate = covered as f64 / draws as f64;
    let floor = 1.0 - alpha - 3.0 * (alpha * (1.0 - alpha) / draws as f64).sqrt();
    assert!(rate >= floor, "coverage {rate} below {floor}");
}

#[test]
fn refit_at_kinks_agrees_with_unpruned_path() {
    for s in 0..10 {
        let inst = instance(s, 20, 5, 0.6);
        let cfg = FitConfig::new(1.0).with_max_order(Some(3));
        let range = default_range(&inst.y);
        let a = compute_tau_path(&inst.z, &inst.y, range, &cfg).unwrap();
        let b = compute_tau_path(&inst.z, &inst.y, range, &cfg.clone().with_prune(false)).unwrap();
        assert_eq!(a.kinks.len(), b.kinks.len(), "seed {s}");
        assert!(a.stats.total_nodes <= b.stats.total_nodes);
        let fracs: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        checks::piecewise_linear(&inst, &cfg, 3, &fracs).unwrap();
    }
}
