use teechain::harness::suites::{multihop_trial, path_setup, reachable, PathOutcome, PATH_DEPOSIT, STAGES};
use teechain::multihop::Stage;

#[test]
fn three_hop_payment_conserves_value() {
    let (mut sim, channels) = path_setup(3).unwrap();
    sim.pay_multihop(&[0, 1, 2], &channels, 5).unwrap();
    sim.deliver_all();
    let first = sim.channel(0, channels[0]).unwrap();
    let second = sim.channel(1, channels[1]).unwrap();
    assert_eq!(first.my_bal, PATH_DEPOSIT - 5);
    assert_eq!(second.my_bal, PATH_DEPOSIT - 5);
    assert_eq!(sim.channel(1, channels[0]).unwrap().my_bal, 5);
    assert_eq!(sim.channel(2, channels[1]).unwrap().my_bal, 5);
    let v = sim.finish(true);
    assert!(v.pass, "{v:?}");
}

#[test]
fn insufficient_hop_aborts_before_locking() {
    let (mut sim, channels) = path_setup(3).unwrap();
    assert!(sim.pay_multihop(&[0, 1, 2], &channels, PATH_DEPOSIT + 1).is_err());
    sim.deliver_all();
    for (k, c) in channels.iter().enumerate() {
        assert!(sim.channel(k as u32, *c).unwrap().lock.is_none());
    }
    let v = sim.finish(true);
    assert!(v.pass, "{v:?}");
}

#[test]
fn reachable_cells() {
    assert!(!reachable(3, 0, Stage::Sign));
    assert!(!reachable(3, 2, Stage::Lock));
    assert!(reachable(3, 1, Stage::PreUpdate));
    let cells: usize = (2..=5).map(|n| (0..n).map(|p| STAGES.iter().filter(|s| reachable(n, p, **s)).count()).sum::<usize>()).sum();
    assert_eq!(cells, 64);
}

#[test]
fn early_ejection_settles_pre_payment() {
    let (base, channels) = path_setup(3).unwrap();
    for seed in 0..5 {
        assert_eq!(multihop_trial(&base, &channels, 0, Stage::Lock, seed), Ok(PathOutcome::Pre));
    }
}

#[test]
fn late_ejection_settles_post_payment() {
    let (base, channels) = path_setup(4).unwrap();
    for seed in 0..5 {
        assert_eq!(multihop_trial(&base, &channels, 3, Stage::Release, seed), Ok(PathOutcome::Post));
    }
}

#[test]
fn every_cell_is_all_or_nothing() {
    for n in 2..=4 {
        let (base, channels) = path_setup(n).unwrap();
        for pos in 0..n {
            for stage in STAGES.iter().filter(|s| reachable(n, pos, **s)) {
                for seed in 0..3 {
                    let r = multihop_trial(&base, &channels, pos, *stage, seed + 100 * n as u64);
                    assert!(r.is_ok(), "n={n} node={pos} stage={stage:?} seed={seed}: {r:?}");
                }
            }
        }
    }
}
