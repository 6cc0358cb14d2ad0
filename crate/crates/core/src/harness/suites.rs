//! Seeded property suites run by the CLI and the acceptance tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{run, Op, Scenario, UserSpec};
use super::sim::{AdversaryConfig, SimConfig, SimError, Simulation};
use crate::crypto::{hash_value, KeyPair};
use crate::ideal::User;
use crate::ledger::{OutPoint, TagKind, Transaction, TxOut};
use crate::multihop::Stage;
use crate::program::ProgramError;
use crate::program::{ChannelId, Command, Reply};
use crate::replication::ReplicationError;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub cases: u64,
    pub passed: u64,
    /// Cells that cannot occur and were not run.
    pub skipped: u64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.passed == self.cases
    }

    fn record(&mut self, label: impl FnOnce() -> String, result: Result<(), String>) {
        self.cases += 1;
        match result {
            Ok(()) => self.passed += 1,
            Err(e) => self.failures.push(format!("{}: {e}", label())),
        }
    }
}

// ------------------------------------------------------------------ balance

/// A random scenario of 2 to 6 users, up to 4 channels and up to 20
/// payments. About a third of the scenarios run without an adversary and
/// deliver everything after each step; those must match the oracle exactly.
/// The rest face drops, replays, unbounded holds, reordering, withheld
/// settlements and premature settles, and must pay every honest user at
/// least what the oracle predicts.
pub fn random_balance_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = rng.gen_range(2..=6usize);
    let users: Vec<UserSpec> = (0..n_users)
        .map(|i| UserSpec { name: format!("u{i}"), balance: rng.gen_range(1_500..=3_000), honest: i < 2 || rng.gen_bool(0.75), backups: 0 })
        .collect();
    let exact = rng.gen_bool(0.35);
    let mut script = Vec::new();
    let n_channels = rng.gen_range(1..=4usize);
    let mut channels: Vec<(String, String, String)> = Vec::new();
    for k in 0..n_channels {
        let a = rng.gen_range(0..n_users);
        let mut b = rng.gen_range(0..n_users - 1);
        if b >= a {
            b += 1;
        }
        let (fund_a, fund_b) = (rng.gen_range(1..=300), if rng.gen_bool(0.6) { rng.gen_range(1..=300) } else { 0 });
        let label = format!("c{k}");
        let (a, b) = (format!("u{a}"), format!("u{b}"));
        script.push(Op::SetupChannel {
            channel: label.clone(),
            a: a.clone(),
            b: b.clone(),
            fund_a,
            fund_b,
            committee_a: None,
            committee_b: None,
        });
        channels.push((label, a, b));
    }
    let dishonest: Vec<User> = (0..n_users).filter(|i| !users[*i].honest).map(|i| i as User).collect();
    if !exact {
        let pick = |rng: &mut ChaCha8Rng, xs: &[f64]| *xs.choose(rng).expect("nonempty");
        let adversary = AdversaryConfig {
            drop: pick(&mut rng, &[0.0, 0.02, 0.1]),
            replay: pick(&mut rng, &[0.0, 0.1, 0.3]),
            hold: pick(&mut rng, &[0.0, 0.05, 0.2]),
            max_delay_us: *[0, 5_000, 50_000].choose(&mut rng).expect("nonempty"),
            eventual_release: rng.gen_bool(0.5),
            withhold: dishonest,
        };
        script.push(Op::SetAdversary { adversary });
    }
    let n_payments = rng.gen_range(0..=20usize);
    let mut payments = 0;
    let mut steps = 0;
    while payments < n_payments && steps < 60 {
        steps += 1;
        let (label, a, b) = channels.choose(&mut rng).expect("at least one channel").clone();
        let side = if rng.gen_bool(0.5) { &a } else { &b };
        let roll = rng.gen_range(0..100);
        let op = match roll {
            0..=64 => {
                payments += 1;
                Op::Pay { channel: label.clone(), from: side.clone(), amount: rng.gen_range(1..=60) }
            }
            65..=72 if !exact => Op::Deliver { count: rng.gen_range(1..=5) },
            73..=76 if !exact => Op::DeliverRandom { count: rng.gen_range(1..=5) },
            77..=80 => Op::ConfirmAll,
            81..=83 => Op::Advance { us: rng.gen_range(1..=1_000_000) },
            84..=88 => {
                let which = if rng.gen_bool(0.5) { "a" } else { "b" };
                Op::Dissociate { deposit: format!("{label}.{which}") }
            }
            89..=92 => Op::Settle { user: side.clone(), channel: label.clone(), force: rng.gen_bool(0.5) },
            93..=95 => {
                let which = if rng.gen_bool(0.5) { "a" } else { "b" };
                Op::Release { deposit: format!("{label}.{which}") }
            }
            96..=99 if !exact => Op::ReleaseHeld,
            _ => Op::ConfirmAll,
        };
        let settles = matches!(op, Op::Settle { .. });
        script.push(op);
        if exact {
            script.push(Op::DeliverAll);
            if settles {
                script.push(Op::ConfirmAll);
            }
        }
    }
    if exact {
        script.push(Op::DeliverAll);
    }
    let mut scenario = Scenario {
        seed,
        users,
        adversary: AdversaryConfig::default(),
        min_confirmations: 1,
        exact,
        persist: false,
        cost_params: Default::default(),
        script,
    };
    // Deposits exist only for funded sides; drop ops naming the others.
    let funded: std::collections::BTreeSet<String> = scenario
        .script
        .iter()
        .filter_map(|op| match op {
            Op::SetupChannel { channel, fund_b, .. } => {
                Some(if *fund_b > 0 { vec![format!("{channel}.a"), format!("{channel}.b")] } else { vec![format!("{channel}.a")] })
            }
            _ => None,
        })
        .flatten()
        .collect();
    scenario.script.retain(|op| match op {
        Op::Dissociate { deposit } | Op::Release { deposit } => funded.contains(deposit),
        _ => true,
    });
    scenario
}

/// Runs `cases` random balance scenarios from `first_seed` on.
pub fn balance_suite(first_seed: u64, cases: u64) -> SuiteReport {
    let mut report = SuiteReport::default();
    for seed in first_seed..first_seed + cases {
        let scenario = random_balance_scenario(seed);
        let result = run(&scenario).map_err(|e| e.to_string()).and_then(|out| out.check().map_err(|e| e.to_string()));
        report.record(|| format!("seed {seed}"), result);
    }
    report
}

/// Independent stream for one trial, derived from the suite seed and the
/// trial's coordinates.
fn trial_seed<T: Serialize>(seed: u64, coords: T) -> u64 {
    let d = hash_value(&("teechain-trial", seed, coords));
    u64::from_be_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

fn err(e: SimError) -> String {
    e.to_string()
}

// ----------------------------------------------------------------- multihop

pub const STAGES: [Stage; 6] = [Stage::Lock, Stage::Sign, Stage::PreUpdate, Stage::Update, Stage::PostUpdate, Stage::Release];

/// Deposit per path channel, funded by its left endpoint.
pub const PATH_DEPOSIT: u64 = 100;
pub const PATH_AMOUNT: u64 = 10;
pub const PATH_GENESIS: u64 = 1_000;

/// Whether the node at `pos` of an `n`-node path ever holds its record at
/// `stage`. The sender moves from lock straight to pre-update and then to
/// post-update; the recipient starts at sign and moves to update and release.
pub fn reachable(n: usize, pos: usize, stage: Stage) -> bool {
    if pos == 0 {
        !matches!(stage, Stage::Sign | Stage::Update)
    } else if pos + 1 == n {
        matches!(stage, Stage::Sign | Stage::Update | Stage::Release)
    } else {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathOutcome {
    Pre,
    Post,
}

/// Users `p0 .. p{n-1}` with channel `k` between `pk` and `pk+1`, funded by
/// `pk` with a 1-of-1 deposit.
pub fn path_setup(n: usize) -> Result<(Simulation, Vec<ChannelId>), SimError> {
    let users: Vec<(String, u64, bool)> = (0..n).map(|i| (format!("p{i}"), PATH_GENESIS, true)).collect();
    let mut sim = Simulation::new(SimConfig { seed: n as u64, ..SimConfig::default() }, AdversaryConfig::default(), &users);
    let mut channels = Vec::new();
    for k in 0..n - 1 {
        let c = sim.open_channel(k as User, k as User + 1)?;
        sim.deliver_all();
        sim.fund_channel(k as User, k as User + 1, c, PATH_DEPOSIT, None)?;
        channels.push(c);
    }
    Ok((sim, channels))
}

/// One cell trial: pay along the path, let `ejector` eject once its record
/// reaches `stage`, deliver a random subset of the traffic still in flight,
/// eject everyone else in random order, confirm the mempool in random order
/// and let every node reclaim. Returns the state the path settled in.
pub fn multihop_trial(base: &Simulation, channels: &[ChannelId], ejector: usize, stage: Stage, seed: u64) -> Result<PathOutcome, String> {
    let mut sim = base.clone();
    sim.reseed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = channels.len() + 1;
    let path: Vec<User> = (0..n as User).collect();
    let pid = sim.pay_multihop(&path, channels, PATH_AMOUNT).map_err(err)?;
    let stage_of = |sim: &Simulation, u: usize| sim.enclave(sim.primary(u as User)).core.payments.get(&(pid, u as u32)).map(|p| p.stage);
    while stage_of(&sim, ejector) != Some(stage) {
        if !sim.deliver_next() {
            return Err(format!("node {ejector} never reached {stage:?}"));
        }
    }
    sim.eject(ejector as User, pid).map_err(err)?;
    let k = rng.gen_range(0..=sim.in_flight());
    for _ in 0..k {
        sim.deliver_random();
    }
    let mut others: Vec<usize> = (0..n).filter(|u| *u != ejector).collect();
    others.shuffle(&mut rng);
    for u in others {
        if stage_of(&sim, u).is_some_and(|s| s != Stage::Ejected) {
            let _ = sim.eject(u as User, pid);
        }
    }
    let mut ids = sim.ledger.mempool_ids();
    ids.shuffle(&mut rng);
    for id in ids {
        sim.confirm(&id);
    }
    let verdict = sim.finish(false);
    if !verdict.pass {
        return Err(format!("oracle check failed: {verdict:?}"));
    }
    let mut outcome = None;
    for (k, c) in channels.iter().enumerate() {
        let deposit: OutPoint = *sim.channel_deposits[c].keys().next().expect("channel funded");
        let Some(tx) = sim.ledger.confirmed_txs().find(|t| t.prevouts().any(|p| *p == deposit)) else {
            return Err(format!("channel {k} never settled"));
        };
        let right = sim.users[k + 1].address();
        let this = match (tx.tag.map(|t| t.kind), tx.paid_to(&right)) {
            (Some(TagKind::Path), _) => PathOutcome::Post,
            (_, 0) => PathOutcome::Pre,
            (_, a) if a == PATH_AMOUNT => PathOutcome::Post,
            (_, a) => return Err(format!("channel {k} settled paying {a}")),
        };
        if outcome.is_some_and(|o| o != this) {
            return Err(format!("mixed settlement: channel {k} is {this:?}, earlier channels {outcome:?}"));
        }
        outcome = Some(this);
    }
    let outcome = outcome.expect("path has a channel");
    for u in 0..n {
        let delta: i64 = match (outcome, u) {
            (PathOutcome::Post, 0) => -(PATH_AMOUNT as i64),
            (PathOutcome::Post, u) if u + 1 == n => PATH_AMOUNT as i64,
            _ => 0,
        };
        let want = (PATH_GENESIS as i64 + delta) as u64;
        let got = sim.wallet_balance(u as User);
        if got != want {
            return Err(format!("{outcome:?} outcome but p{u} holds {got}, expected {want}"));
        }
    }
    Ok(outcome)
}

/// Every reachable (path length, ejecting node, stage) cell, `orders`
/// sampled schedules each.
pub fn multihop_matrix(seed: u64, orders: u64) -> SuiteReport {
    let mut report = SuiteReport::default();
    for n in 2..=5usize {
        let (base, channels) = match path_setup(n) {
            Ok(x) => x,
            Err(e) => {
                report.record(|| format!("setup n={n}"), Err(e.to_string()));
                continue;
            }
        };
        for pos in 0..n {
            for (si, stage) in STAGES.iter().enumerate() {
                if !reachable(n, pos, *stage) {
                    report.skipped += 1;
                    continue;
                }
                for t in 0..orders {
                    let s = trial_seed(seed, (n, pos, si, t));
                    let r = multihop_trial(&base, &channels, pos, *stage, s).map(|_| ());
                    report.record(|| format!("n={n} node={pos} stage={stage:?} order={t}"), r);
                }
            }
        }
    }
    report
}

// -------------------------------------------------------------- replication

pub const CHANNEL_DEPOSIT: u64 = 100;
pub const GENESIS: u64 = 1_000;

/// Result of one attack on a replicated deposit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackResult {
    /// The honest victim ended with less than the oracle owes it.
    pub theft: bool,
    pub victim_ledger: u64,
    pub victim_owed: u64,
}

/// A force-freeze rollback attempt by the owner `a` of a committee deposit
/// held by its primary and one backup. The owner pays the victim `c`, reads
/// the backup's replica at a random point (which freezes the chain), keeps
/// paying, settles from both the frozen backup and the primary and has its
/// own transactions confirmed first. A second variant restarts the primary
/// from an old sealed snapshot instead. The victim must end with exactly
/// what the oracle owed it when the chain froze.
pub fn rollback_attack(seed: u64) -> Result<AttackResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let users = [("attacker".to_string(), GENESIS, false), ("victim".to_string(), GENESIS, true)];
    // Half the attacks restart the primary from an old sealed snapshot; the
    // backup then co-signs alone, so those deposits are 1-of-2.
    let restore = rng.gen_bool(0.5);
    let persist = restore;
    let config = SimConfig { seed, persist, ..SimConfig::default() };
    let mut sim = Simulation::new(config, AdversaryConfig::default(), &users);
    let sim = &mut sim;
    let backup = sim.add_backup(0).map_err(err)?;
    let primary = sim.primary(0);
    let c = sim.open_channel(0, 1).map_err(err)?;
    sim.deliver_all();
    let m = if restore { 1 } else { rng.gen_range(1..=2u32) };
    sim.fund_channel(0, 1, c, CHANNEL_DEPOSIT, Some((m, 2))).map_err(err)?;
    let victim_dep = if rng.gen_bool(0.5) { rng.gen_range(1..=50) } else { 0 };
    if victim_dep > 0 {
        sim.fund_channel(1, 0, c, victim_dep, None).map_err(err)?;
    }
    let mut snapshot = None;
    // The snapshot is taken after the first payment, so a later one makes
    // it stale.
    let before = rng.gen_range(2..=5);
    for i in 0..before {
        sim.pay(0, c, rng.gen_range(1..=15)).map_err(err)?;
        if rng.gen_bool(0.3) {
            // The victim may have nothing left to send.
            let _ = sim.pay(1, c, rng.gen_range(1..=5));
        }
        sim.deliver_all();
        if persist && i == 0 {
            snapshot = sim.stored_blob(primary);
        }
    }
    // A payment may be in flight to the backup when the chain freezes. A
    // crash in that window leaves the committee one update ahead of the
    // peer, which is not a rollback, so only the freeze variant does this.
    if !restore && rng.gen_bool(0.5) {
        let _ = sim.pay(0, c, rng.gen_range(1..=10));
        let k = rng.gen_range(0..=sim.in_flight());
        for _ in 0..k {
            sim.deliver_next();
        }
    }
    let owed_now = |sim: &Simulation| {
        let ic = sim.mirror.ideal.channels.get(&c.0).expect("channel open in the oracle");
        if ic.u == 1 {
            ic.amount_u
        } else {
            ic.amount_v
        }
    };
    let frozen_at;
    if restore {
        // Rollback through stable storage: restart from an older snapshot.
        frozen_at = owed_now(sim);
        sim.crash(primary);
        let blob = snapshot.clone().ok_or("no snapshot")?;
        if sim.restore_from(primary, blob).is_ok() {
            return Err("enclave restarted from a stale snapshot".into());
        }
    } else {
        match sim.command(backup, Command::ReadReplica) {
            Ok(Reply::Replica { .. }) => {}
            r => return Err(format!("reading the replica failed: {r:?}")),
        }
        // Traffic sent before the freeze lands; what the replica committed is
        // now visible to the oracle and nothing later can be.
        sim.deliver_all();
        frozen_at = owed_now(sim);
        for _ in 0..rng.gen_range(0..=3) {
            let _ = sim.command(primary, Command::Pay { channel: c, amount: 5 });
            sim.deliver_all();
        }
        // Settle from the frozen backup, co-signing with whoever will.
        if let Ok(reply) = sim.command(backup, Command::Settle { channel: c }) {
            sim.broadcast_reply(0, reply);
        }
        if let Ok(reply) = sim.command(primary, Command::Settle { channel: c }) {
            sim.broadcast_reply(0, reply);
        }
    }
    let mut ids = sim.ledger.mempool_ids();
    ids.shuffle(rng);
    for id in ids {
        sim.confirm(&id);
    }
    sim.deliver_all();
    let verdict = sim.finish(true);
    let victim_ledger = sim.wallet_balance(1);
    let victim_owed = GENESIS - victim_dep + frozen_at;
    if let Some(d) = verdict.divergence {
        return Err(d);
    }
    Ok(AttackResult { theft: victim_ledger != victim_owed || !verdict.pass, victim_ledger, victim_owed })
}

/// The deposit owner `a` funds an m-of-n committee deposit, pays its whole
/// balance to the victim, then compromises `compromised` committee members,
/// extracts their keys and tries to spend the deposit back to itself. Honest
/// members are asked to co-sign and must refuse. The attacker's transaction,
/// if complete, is confirmed before the victim settles.
pub fn threshold_attack(m: u32, n: usize, compromised: usize, seed: u64) -> Result<AttackResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = [("attacker".to_string(), GENESIS, false), ("victim".to_string(), GENESIS, true)];
    let mut sim = Simulation::new(SimConfig { seed, ..SimConfig::default() }, AdversaryConfig::default(), &users);
    for _ in 1..n {
        sim.add_backup(0).map_err(err)?;
    }
    let c = sim.open_channel(0, 1).map_err(err)?;
    sim.deliver_all();
    let deposit = sim.fund_channel(0, 1, c, CHANNEL_DEPOSIT, Some((m, n))).map_err(err)?;
    sim.pay(0, c, CHANNEL_DEPOSIT).map_err(err)?;
    sim.deliver_all();
    let mut members: Vec<usize> = sim.users[0].nodes[..n].to_vec();
    members.shuffle(&mut rng);
    let (bad, good) = members.split_at(compromised);
    let address = sim.ledger.output(&deposit).ok_or("deposit missing")?.address.clone();
    let mut theft = Transaction::unsigned(vec![deposit], vec![TxOut { address: sim.users[0].address(), amount: CHANNEL_DEPOSIT }], None);
    for &node in bad {
        sim.compromise(node);
        let state = sim.leak(node).map_err(err)?;
        for (public, secret) in state.local.member_keys {
            let kp = KeyPair { public, secret };
            let a = address.clone();
            theft.sign_inputs_for(|_| Some(a.clone()), &kp);
        }
    }
    for &node in good {
        match sim.command(node, Command::CommitteeSign { tx: theft.clone(), authorization: None }) {
            Err(SimError::Program(ProgramError::Replication(ReplicationError::StateMismatch))) => {}
            Ok(Reply::Transaction(t)) => theft = t,
            r => return Err(format!("honest member answered {r:?}")),
        }
    }
    if theft.inputs[0].witnesses.len() >= address.threshold() as usize && sim.ledger.submit(theft.clone()).is_ok() {
        sim.confirm(&theft.txid());
    }
    let verdict = sim.finish(true);
    let victim_ledger = sim.wallet_balance(1);
    let victim_owed = GENESIS + CHANNEL_DEPOSIT;
    Ok(AttackResult { theft: victim_ledger < victim_owed, victim_ledger, victim_owed: verdict.users[0].ideal })
}

/// Rollback attacks and the threshold table, `cases` seeds each. Thefts
/// with fewer than m compromised members are failures; so is a failed theft
/// with m compromised members, since that would mean the committee model
/// is not what the deposit script says.
pub fn replication_suite(seed: u64, cases: u64) -> SuiteReport {
    let mut report = SuiteReport::default();
    for t in 0..cases {
        let s = trial_seed(seed, ("rollback", t));
        let r = match rollback_attack(s) {
            Ok(a) if a.theft => Err(format!("victim got {} of {}", a.victim_ledger, a.victim_owed)),
            Ok(_) => Ok(()),
            Err(e) => Err(e),
        };
        report.record(|| format!("rollback {t}"), r);
    }
    for (m, n) in [(1u32, 1usize), (1, 2), (2, 3), (3, 4)] {
        for t in 0..cases {
            let s = trial_seed(seed, ("threshold", m, n, t));
            let below =
                threshold_attack(m, n, m as usize - 1, s).and_then(|a| if a.theft { Err("theft below threshold".into()) } else { Ok(()) });
            report.record(|| format!("({m},{n}) with {} compromised, trial {t}", m - 1), below);
            let at =
                threshold_attack(m, n, m as usize, s).and_then(|a| if a.theft { Ok(()) } else { Err("theft at threshold failed".into()) });
            report.record(|| format!("({m},{n}) with {m} compromised, trial {t}"), at);
        }
    }
    report
}

// ------------------------------------------------------------------ counter

/// Payments a sender completes in one simulated second when it offers one
/// payment per millisecond. With `persist_each` every payment is sealed
/// under a monotonic counter increment before its output is released; with
/// batching the client seals once every 100 ms and releases the batch.
pub fn counter_throughput(persist_each: bool) -> Result<u64, SimError> {
    let users = [("alice".to_string(), GENESIS * 10, true), ("bob".to_string(), GENESIS, true)];
    let config = SimConfig { persist: false, check_each_step: false, ..SimConfig::default() };
    let mut sim = Simulation::new(config, AdversaryConfig::default(), &users);
    let c = sim.open_channel(0, 1)?;
    sim.deliver_all();
    sim.fund_channel(0, 1, c, GENESIS * 5, None)?;
    sim.config.persist = persist_each;
    let start = sim.now + 1_000_000 - sim.now % 1_000_000;
    sim.now = start;
    let node = sim.primary(0);
    let mut done = 0;
    let mut batch = 0;
    let mut last_seal = None;
    for ms in 0..1_000u64 {
        sim.now = start + ms * 1_000;
        if sim.command(node, Command::Pay { channel: c, amount: 1 }).is_ok() {
            batch += 1;
        }
        if persist_each {
            done += std::mem::take(&mut batch);
        } else if last_seal.is_none_or(|t| sim.now >= t + 100_000) {
            sim.persist(node)?;
            last_seal = Some(sim.now);
            done += std::mem::take(&mut batch);
        }
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(random_balance_scenario(9), random_balance_scenario(9));
        assert_ne!(random_balance_scenario(9), random_balance_scenario(10));
    }

    #[test]
    fn generated_scenarios_validate() {
        for seed in 0..50 {
            let s = random_balance_scenario(seed);
            s.validate().unwrap();
            assert!((2..=6).contains(&s.users.len()));
            let pays = s.script.iter().filter(|o| matches!(o, Op::Pay { .. })).count();
            assert!(pays <= 20);
        }
    }
}
