#[path = "support/toy_ln.rs"]
mod toy_ln;

use proptest::prelude::*;
use teechain::harness::{AdversaryConfig, SimConfig, Simulation};
use toy_ln::{Party, ToyError, ToyLn};

/// Bob's settlement is kept off chain for `delay_s`, during which alice
/// does all her host can. Returns bob's final wallet balance.
fn withheld_payout(delay_s: u64, paid: u64) -> u64 {
    let users = [("alice".to_string(), 1_000, false), ("bob".to_string(), 1_000, true)];
    let mut sim = Simulation::new(SimConfig::default(), AdversaryConfig::default(), &users);
    let c = sim.open_channel(0, 1).unwrap();
    sim.deliver_all();
    sim.fund_channel(0, 1, c, 100, None).unwrap();
    sim.pay(0, c, paid).unwrap();
    sim.deliver_all();
    sim.adversary.withhold = vec![1];
    sim.settle(1, c, true).unwrap();
    sim.advance(delay_s * 1_000_000);
    let _ = sim.settle(0, c, true);
    sim.reclaim(0);
    sim.confirm_all();
    sim.release_withheld();
    sim.confirm_all();
    let v = sim.finish(true);
    assert!(v.pass, "{v:?}");
    sim.wallet_balance(1)
}

#[test]
fn timely_justice_wins() {
    let mut ch = ToyLn::open((100, 0), 10);
    ch.pay_a_to_b(60);
    ch.publish(Party::A, 0, 0).unwrap();
    assert_eq!(ch.sweep(5), Err(ToyError::StillLocked));
    ch.justice(Party::B).unwrap();
    assert_eq!(ch.payout, Some((0, 100)));
}

#[test]
fn latest_state_cannot_be_punished() {
    let mut ch = ToyLn::open((100, 0), 10);
    ch.pay_a_to_b(60);
    ch.publish(Party::A, 1, 0).unwrap();
    assert_eq!(ch.justice(Party::B), Err(ToyError::NotRevoked));
    ch.sweep(10).unwrap();
    assert_eq!(ch.payout, Some((40, 60)));
}

#[test]
fn late_justice_loses_in_a_timeout_channel() {
    let mut ch = ToyLn::open((100, 0), 86_400);
    ch.pay_a_to_b(60);
    ch.publish(Party::A, 0, 0).unwrap();
    ch.sweep(1_000_000).unwrap();
    assert_eq!(ch.justice(Party::B), Err(ToyError::Closed));
    assert_eq!(ch.payout, Some((100, 0)));
}

#[test]
fn teechain_withholding_for_a_million_seconds() {
    assert_eq!(withheld_payout(1_000_000, 60), 1_060);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn payout_is_independent_of_delay(delay_s in 0u64..10_000_000, paid in 1u64..=100) {
        prop_assert_eq!(withheld_payout(delay_s, paid), 1_000 + paid);
    }
}
