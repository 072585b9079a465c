use brwlab_core::engine::prune_policy;
use brwlab_core::oracle::{brute_force_events, default_battery, exact_expectation, EnumerationBudget};
use brwlab_core::rng::replica_rng;
use brwlab_core::walk::survival_prob;
use brwlab_core::{
    check_boundary, derive_step_law, detect_events, grow_tree, normalize_to_boundary, renewal_function, simulate,
    Atom, EventWindowSpec, OffspringLaw, SimConfig,
};
use proptest::prelude::*;

fn bernoulli(h: f64) -> OffspringLaw {
    OffspringLaw::builtin(&format!("bernoulli-pm:{h}")).unwrap()
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Ballot count: a simple symmetric walk stays `≥ 0` for `n` steps with
/// probability `C(n, ⌊n/2⌋) / 2^n`.
fn ssrw_survival(n: u64) -> f64 {
    binomial(n, n / 2) / 2f64.powi(n as i32)
}

#[test]
fn ssrw_survival_matches_ballot_count() {
    let step = derive_step_law(&OffspringLaw::builtin("ssrw-coupled").unwrap()).unwrap();
    for n in [1u64, 2, 3, 7, 20, 101, 400] {
        let p = survival_prob(&step, 0.0, n as usize, 0.0).unwrap();
        assert!((p - ssrw_survival(n)).abs() < 1e-12, "n={n}: {p}");
    }
}

#[test]
fn builtins_sit_on_the_boundary() {
    for name in ["ssrw-coupled", "two-atom", "bernoulli-pm:0.5"] {
        let rep = check_boundary(&OffspringLaw::builtin(name).unwrap(), 1e-10).unwrap();
        assert!(rep.boundary && rep.supercritical, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn bernoulli_moments(h in 0.05f64..0.69) {
        let rep = check_boundary(&bernoulli(h), 1e-10).unwrap();
        prop_assert!((rep.exp_mass - 1.0).abs() < 1e-12);
        prop_assert!(rep.tilt_mean.abs() < 1e-12);
        prop_assert!((rep.sigma2 - h * h).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_renewal_counts_ladder_steps(h in 0.05f64..0.69, pts in prop::collection::vec(0.0f64..8.0, 1..20)) {
        let step = derive_step_law(&bernoulli(h)).unwrap();
        let mut grid = pts.clone();
        grid.push(0.0);
        grid.sort_by(f64::total_cmp);
        let t = renewal_function(&step, &grid, 100_000).unwrap();
        prop_assert_eq!(t.eval(0.0), 1.0);
        prop_assert_eq!(t.eval(-h / 2.0), 0.0);
        for w in t.values().windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for (&x, &r) in grid.iter().zip(t.values()) {
            let expect = (x / h + 1e-9).floor() + 1.0;
            prop_assert!((r - expect).abs() < 1e-6, "x={} r={} expect={}", x, r, expect);
        }
    }

    #[test]
    fn survival_is_monotone(h in 0.1f64..0.69, n in 1usize..60, x in 0.0f64..3.0) {
        let step = derive_step_law(&bernoulli(h)).unwrap();
        let p = survival_prob(&step, x, n, 0.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(survival_prob(&step, x, n + 1, 0.0).unwrap() <= p + 1e-15);
        prop_assert!(survival_prob(&step, x + h, n, 0.0).unwrap() >= p - 1e-15);
    }

    #[test]
    fn many_to_one_on_bernoulli(h in 0.1f64..0.69, n in 1usize..4) {
        let law = bernoulli(h);
        let step = derive_step_law(&law).unwrap();
        for (name, f) in default_battery(n) {
            let (tree, walk) = exact_expectation(&law, &step, n, &*f, &EnumerationBudget::default()).unwrap();
            prop_assert!((tree - walk).abs() < 1e-10, "{}: {} vs {}", name, tree, walk);
        }
    }

    #[test]
    fn normalization_lands_on_boundary(
        a in 0.05f64..0.9,
        lo in -3i32..0,
        hi in 1i32..4,
    ) {
        let raw = OffspringLaw::new(
            None,
            vec![
                Atom::new(a, vec![lo as f64, hi as f64]),
                Atom::new(1.0 - a, vec![0.0, hi as f64, 1.0]),
            ],
        )
        .unwrap();
        if let Ok(norm) = normalize_to_boundary(&raw, 1e-12, 200) {
            let rep = check_boundary(&norm.law, 1e-8).unwrap();
            prop_assert!(rep.boundary);
            prop_assert!(norm.scale > 0.0);
        }
    }

    #[test]
    fn simulation_records_are_consistent(seed in any::<u64>(), n in 1usize..14, level in 2.0f64..30.0) {
        let law = OffspringLaw::builtin("two-atom").unwrap();
        let mut cfg = SimConfig::new(n, 0.0);
        cfg.sigma2 = check_boundary(&law, 1e-10).unwrap().sigma2;
        cfg.prune = prune_policy(level, 0.0, 1_000_000).unwrap();
        let run = |s| simulate(&law, &cfg, None, s, &mut replica_rng(s, 0)).unwrap();
        let st = run(seed);
        prop_assert_eq!(format!("{st:?}"), format!("{:?}", run(seed)));
        prop_assert_eq!(st.records.len(), n + 1);
        for (k, r) in st.records.iter().enumerate() {
            prop_assert_eq!(r.k, k);
            prop_assert!(r.w >= 0.0 && r.w.is_finite() && r.d.is_finite());
            prop_assert!(r.pruned_w >= 0.0);
            if r.z == 0 {
                prop_assert_eq!(r.w, 0.0);
                prop_assert!(r.min.is_none());
            }
        }
        for w in st.records.windows(2) {
            prop_assert!(w[0].pruned_bound <= w[1].pruned_bound);
            prop_assert!(w[0].pruned_w <= w[1].pruned_w + 1e-15);
        }
    }

    #[test]
    fn event_detection_matches_brute_force(seed in any::<u64>(), lambda in 0.0f64..0.5, k in 0.5f64..4.0) {
        let law = OffspringLaw::builtin("ssrw-coupled").unwrap();
        let n = 3;
        let tree = grow_tree(&law, 2 * n, 1_000_000, &mut replica_rng(seed, 1)).unwrap();
        let spec = EventWindowSpec::new(n, lambda, k).unwrap();
        let fast = detect_events(&tree, &spec).unwrap();
        let mut slow = brute_force_events(&tree, &spec);
        let mut wit = fast.witnesses.clone();
        slow.sort_unstable();
        wit.sort_unstable();
        prop_assert_eq!(fast.occurred, !slow.is_empty());
        prop_assert_eq!(wit, slow);
    }

    #[test]
    fn window_schedule(n in 2usize..500, lambda in -1.0f64..3.0) {
        let spec = EventWindowSpec::new(n, lambda, 10.0).unwrap();
        prop_assert!((spec.s() - (0.5 * (n as f64).ln() - lambda)).abs() < 1e-12);
        for i in 0..=2 * n + 1 {
            let inside = 2 * i > n && i <= 2 * n;
            prop_assert_eq!(spec.a(i), if inside { spec.s() } else { 0.0 });
        }
    }
}
