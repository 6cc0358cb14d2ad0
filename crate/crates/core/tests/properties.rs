use proptest::prelude::*;
use teechain::harness::suites::random_balance_scenario;
use teechain::harness::{cost_formulas, run, AdversaryConfig, Params, Scheme, SimConfig, Simulation};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every honest user gets at least the oracle's payout; clean runs get
    /// exactly it.
    #[test]
    fn random_scenarios_meet_the_oracle(seed in any::<u64>()) {
        let s = random_balance_scenario(seed);
        let out = run(&s).unwrap();
        prop_assert!(out.check().is_ok(), "{:?}", out.verdict);
    }

    /// Channel capacity equals the deposits after any payment sequence, and
    /// the two endpoints agree once traffic settles.
    #[test]
    fn capacity_is_conserved(fund in (1u64..500, 0u64..500), pays in prop::collection::vec((any::<bool>(), 1u64..200), 0..30)) {
        let users = [("a".to_string(), 1_000, true), ("b".to_string(), 1_000, true)];
        let mut sim = Simulation::new(SimConfig::default(), AdversaryConfig::default(), &users);
        let c = sim.open_channel(0, 1).unwrap();
        sim.deliver_all();
        sim.fund_channel(0, 1, c, fund.0, None).unwrap();
        if fund.1 > 0 {
            sim.fund_channel(1, 0, c, fund.1, None).unwrap();
        }
        let mut expect = (fund.0, fund.1);
        for (from_a, amount) in pays {
            let (u, have) = if from_a { (0, expect.0) } else { (1, expect.1) };
            let ok = sim.pay(u, c, amount).is_ok();
            prop_assert_eq!(ok, amount <= have);
            if ok {
                if from_a { expect = (expect.0 - amount, expect.1 + amount) } else { expect = (expect.0 + amount, expect.1 - amount) }
            }
            sim.deliver_all();
        }
        let a = sim.channel(0, c).unwrap();
        let b = sim.channel(1, c).unwrap();
        prop_assert_eq!((a.my_bal, a.remote_bal), expect);
        prop_assert_eq!((b.my_bal, b.remote_bal), (expect.1, expect.0));
        prop_assert_eq!(sim.invariant_violations(), 0);
        sim.settle(0, c, true).unwrap();
        sim.confirm_all();
        let v = sim.finish(true);
        prop_assert!(v.pass);
        prop_assert_eq!(sim.wallet_balance(0), 1_000 - fund.0 + expect.0);
    }

    /// The Teechain formulas, evaluated independently in floating point.
    #[test]
    fn teechain_formula(n in 1i64..50, n1 in 1i64..50, n2 in 1i64..50, m1f in 0.0f64..1.0, m2f in 0.0f64..1.0) {
        let m1 = 1 + ((n1 - 1) as f64 * m1f) as i64;
        let m2 = 1 + ((n2 - 1) as f64 * m2f) as i64;
        let row = cost_formulas(Scheme::Teechain, &Params { n, n1, n2, m1, m2, ..Params::default() }).unwrap();
        let f = |r: num_rational::Rational64| *r.numer() as f64 / *r.denom() as f64;
        prop_assert_eq!(f(row.bilateral.cost), 1.0 + n as f64 / 2.0);
        prop_assert_eq!(f(row.unilateral.cost), 2.0 + (n1 + n2) as f64 / 2.0 + (m1 + m2) as f64);
        prop_assert_eq!(f(row.unilateral.txs), 3.0);
    }

    /// SFMC amortizes its funding over the n channels of a factory.
    #[test]
    fn sfmc_formula(d in 1i64..10, i in 1i64..10, p in 3i64..20, n in 1i64..40) {
        let row = cost_formulas(Scheme::Sfmc, &Params { d, i, p, n, ..Params::default() }).unwrap();
        let f = |r: num_rational::Rational64| *r.numer() as f64 / *r.denom() as f64;
        let tree = (3 + d) as f64;
        let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
        prop_assert!(close(f(row.bilateral.txs), 2.0 / n as f64));
        prop_assert!(close(f(row.bilateral.cost), 2.0 * p as f64 / n as f64));
        prop_assert!(close(f(row.unilateral.txs), (1 + i) as f64 / n as f64 + tree));
        prop_assert!(close(f(row.unilateral.cost), (1 + i) as f64 * p as f64 / n as f64 + 2.0 * tree));
    }
}
