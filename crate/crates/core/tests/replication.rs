use teechain::harness::suites::{rollback_attack, threshold_attack, CHANNEL_DEPOSIT, GENESIS};
use teechain::harness::{AdversaryConfig, SimConfig, SimError, Simulation};
use teechain::program::{ChannelId, Command, ProgramError, Reply};
use teechain::replication::ReplicationError;
use teechain::tee::TeeError;

fn committee_channel(persist: bool, backups: usize, m: u32) -> (Simulation, ChannelId) {
    let users = [("alice".to_string(), GENESIS, true), ("bob".to_string(), GENESIS, true)];
    let mut sim = Simulation::new(SimConfig { persist, ..SimConfig::default() }, AdversaryConfig::default(), &users);
    for _ in 0..backups {
        sim.add_backup(0).unwrap();
    }
    let c = sim.open_channel(0, 1).unwrap();
    sim.deliver_all();
    sim.fund_channel(0, 1, c, CHANNEL_DEPOSIT, Some((m, backups + 1))).unwrap();
    (sim, c)
}

#[test]
fn live_committee_signs_a_settlement() {
    let (mut sim, c) = committee_channel(false, 2, 2);
    sim.pay(0, c, 30).unwrap();
    sim.deliver_all();
    sim.settle(1, c, true).unwrap();
    sim.confirm_all();
    let v = sim.finish(true);
    assert!(v.pass, "{v:?}");
    assert_eq!(sim.wallet_balance(1), GENESIS + 30);
}

#[test]
fn committee_below_threshold_freezes_funds() {
    let (mut sim, c) = committee_channel(false, 2, 2);
    sim.pay(0, c, 30).unwrap();
    sim.deliver_all();
    let members = sim.users[0].nodes.clone();
    sim.crash(members[0]);
    sim.crash(members[1]);
    let _ = sim.settle(1, c, true);
    sim.confirm_all();
    assert_eq!(sim.wallet_balance(1), GENESIS);
    let deposit = *sim.channel_deposits[&c].keys().next().unwrap();
    assert!(sim.ledger.is_unspent(&deposit));
}

#[test]
fn update_waits_for_the_whole_chain() {
    let (mut sim, c) = committee_channel(false, 2, 2);
    sim.pay(0, c, 10).unwrap();
    // The payment is held until both backups acknowledge it.
    assert_eq!(sim.channel(1, c).unwrap().my_bal, 0);
    sim.deliver_all();
    assert_eq!(sim.channel(1, c).unwrap().my_bal, 10);
}

#[test]
fn reading_a_replica_freezes_the_chain() {
    let (mut sim, c) = committee_channel(false, 1, 1);
    sim.pay(0, c, 10).unwrap();
    sim.deliver_all();
    let backup = sim.users[0].nodes[1];
    assert!(matches!(sim.command(backup, Command::ReadReplica), Ok(Reply::Replica { .. })));
    sim.deliver_all();
    let e = sim.pay(0, c, 5).unwrap_err();
    assert!(matches!(e, SimError::Program(ProgramError::Replication(ReplicationError::ChainFrozen))), "{e}");
    // Settling from the frozen replica pays exactly the state at the freeze.
    let reply = sim.command(backup, Command::Settle { channel: c }).unwrap();
    sim.broadcast_reply(0, reply);
    sim.confirm_all();
    let v = sim.finish(true);
    assert!(v.pass, "{v:?}");
    assert_eq!(sim.wallet_balance(1), GENESIS + 10);
}

#[test]
fn honest_members_refuse_to_cosign_theft() {
    for seed in 0..10 {
        let r = threshold_attack(2, 3, 1, seed).unwrap();
        assert!(!r.theft, "seed {seed}: {r:?}");
        let r = threshold_attack(2, 3, 2, seed).unwrap();
        assert!(r.theft, "seed {seed}: {r:?}");
    }
}

#[test]
fn rollback_attacks_fail() {
    for seed in 0..30 {
        let r = rollback_attack(seed).unwrap();
        assert!(!r.theft, "seed {seed}: {r:?}");
        assert_eq!(r.victim_ledger, r.victim_owed);
    }
}

#[test]
fn restore_resumes_and_stale_restore_fails() {
    let users = [("alice".to_string(), GENESIS, true), ("bob".to_string(), GENESIS, true)];
    let mut sim = Simulation::new(SimConfig { persist: true, ..SimConfig::default() }, AdversaryConfig::default(), &users);
    let c = sim.open_channel(0, 1).unwrap();
    sim.deliver_all();
    sim.fund_channel(0, 1, c, CHANNEL_DEPOSIT, None).unwrap();
    let node = sim.primary(0);
    sim.pay(0, c, 5).unwrap();
    sim.deliver_all();
    let old = sim.stored_blob(node).unwrap();
    sim.advance(1_000_000);
    sim.pay(0, c, 5).unwrap();
    sim.deliver_all();
    let latest = sim.stored_blob(node).unwrap();
    let before = sim.channel(0, c).unwrap().clone();

    sim.crash(node);
    let e = sim.restore_from(node, old).unwrap_err();
    assert!(matches!(e, SimError::Tee(TeeError::StaleSnapshot { .. })), "{e}");
    sim.restore_from(node, latest).unwrap();
    assert_eq!(sim.channel(0, c).unwrap(), &before);
    sim.advance(1_000_000);
    sim.pay(0, c, 5).unwrap();
    sim.deliver_all();
    assert_eq!(sim.channel(1, c).unwrap().my_bal, 15);
}
