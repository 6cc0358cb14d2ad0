//! Scenario files and the runner that executes them.
//!
//! A scenario is JSON:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "users": [{"name": "alice", "balance": 1000, "backups": 1}, {"name": "bob", "balance": 1000}],
//!   "adversary": {"drop": 0.0, "replay": 0.1, "max_delay_us": 5000},
//!   "exact": false,
//!   "script": [
//!     {"op": "setup_channel", "channel": "ab", "a": "alice", "b": "bob", "fund_a": 100},
//!     {"op": "pay", "channel": "ab", "from": "alice", "amount": 30},
//!     {"op": "settle", "user": "bob", "channel": "ab"}
//!   ]
//! }
//! ```
//!
//! Channels, deposits and path payments are named by labels the script
//! introduces. Protocol errors returned by an operation are recorded in the
//! trace and the script continues; label and shape errors make the scenario
//! invalid. Every run ends with all honest users reclaiming and the
//! differential check against the ideal functionality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cost::{CostReport, Params};
use super::sim::{AdversaryConfig, SimConfig, SimError, Simulation, Verdict};
use crate::ideal::User;
use crate::ledger::{OutPoint, PaymentId};
use crate::program::ChannelId;

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub name: String,
    pub balance: u64,
    #[serde(default = "yes")]
    pub honest: bool,
    /// Backup enclaves appended to the user's replication chain at start.
    #[serde(default)]
    pub backups: usize,
}

/// A committee deposit: `m` signatures out of the first `n` enclaves of the
/// owner's chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committee {
    pub m: u32,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    OpenChannel {
        channel: String,
        a: String,
        b: String,
    },
    Deposit {
        deposit: String,
        user: String,
        amount: u64,
        #[serde(default)]
        committee: Option<Committee>,
    },
    Approve {
        deposit: String,
        peer: String,
    },
    Associate {
        deposit: String,
        channel: String,
    },
    /// Opens a channel and funds each side with a fresh deposit named
    /// `<channel>.a` / `<channel>.b`; a zero amount funds nothing.
    SetupChannel {
        channel: String,
        a: String,
        b: String,
        #[serde(default)]
        fund_a: u64,
        #[serde(default)]
        fund_b: u64,
        #[serde(default)]
        committee_a: Option<Committee>,
        #[serde(default)]
        committee_b: Option<Committee>,
    },
    Pay {
        channel: String,
        from: String,
        amount: u64,
    },
    PayMultihop {
        payment: String,
        path: Vec<String>,
        channels: Vec<String>,
        amount: u64,
    },
    Dissociate {
        deposit: String,
    },
    Settle {
        user: String,
        channel: String,
        #[serde(default)]
        force: bool,
    },
    Release {
        deposit: String,
    },
    Eject {
        user: String,
        payment: String,
    },
    AddBackup {
        user: String,
    },
    Crash {
        user: String,
        #[serde(default)]
        node: usize,
    },
    Compromise {
        user: String,
        #[serde(default)]
        node: usize,
    },
    /// Replaces the adversary from this point on.
    SetAdversary {
        adversary: AdversaryConfig,
    },
    DeliverAll,
    Deliver {
        count: usize,
    },
    DeliverRandom {
        count: usize,
    },
    ConfirmAll,
    Advance {
        us: u64,
    },
    ReleaseHeld,
    ReleaseWithheld,
    Reclaim {
        user: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default = "one")]
    pub min_confirmations: u64,
    /// Require ledger balances to equal the oracle's payout, not just
    /// bound it from below.
    #[serde(default)]
    pub exact: bool,
    /// Persist enclave state through the monotonic counter every step.
    #[serde(default)]
    pub persist: bool,
    /// Parameters for the competitor columns of the cost report.
    #[serde(default)]
    pub cost_params: Params,
    pub script: Vec<Op>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    /// Event trace, one JSON object per line.
    pub events: String,
    /// Ledger confirmations, one JSON object per line.
    pub ledger: String,
    pub cost: CostReport,
    pub verdict: Verdict,
}

impl RunOutput {
    /// The verdict as a result: a failed differential check is an error.
    pub fn check(&self) -> Result<(), SimError> {
        if self.verdict.pass {
            return Ok(());
        }
        let why = self.verdict.divergence.clone().unwrap_or_else(|| format!("{:?}", self.verdict.users));
        Err(SimError::OracleDivergence(why))
    }
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Scenario, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::ScenarioInvalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios serialize")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::ScenarioInvalid(m));
        if self.users.is_empty() {
            return invalid("no users".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for u in &self.users {
            if !names.insert(u.name.as_str()) {
                return invalid(format!("duplicate user {}", u.name));
            }
        }
        let a = &self.adversary;
        for (name, p) in [("drop", a.drop), ("replay", a.replay), ("hold", a.hold)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("adversary {name} probability {p}"));
            }
        }
        if a.withhold.iter().any(|u| *u as usize >= self.users.len()) {
            return invalid("withhold names an unknown user".into());
        }
        Ok(())
    }
}

struct Runner {
    sim: Simulation,
    users: BTreeMap<String, User>,
    channels: BTreeMap<String, ChannelId>,
    deposits: BTreeMap<String, (User, OutPoint)>,
    payments: BTreeMap<String, PaymentId>,
}

impl Runner {
    fn user(&self, name: &str) -> Result<User, SimError> {
        self.users.get(name).copied().ok_or_else(|| SimError::ScenarioInvalid(format!("unknown user {name}")))
    }

    fn channel(&self, label: &str) -> Result<ChannelId, SimError> {
        self.channels.get(label).copied().ok_or_else(|| SimError::ScenarioInvalid(format!("unknown channel {label}")))
    }

    fn deposit(&self, label: &str) -> Result<(User, OutPoint), SimError> {
        self.deposits.get(label).copied().ok_or_else(|| SimError::ScenarioInvalid(format!("unknown deposit {label}")))
    }

    fn node(&self, user: &str, idx: usize) -> Result<usize, SimError> {
        let u = self.user(user)?;
        self.sim.users[u as usize].nodes.get(idx).copied().ok_or_else(|| SimError::ScenarioInvalid(format!("{user} has no node {idx}")))
    }

    /// Runs one op. The outer error aborts the run; the inner one is a
    /// protocol outcome that is only recorded.
    fn op(&mut self, op: &Op) -> Result<Result<(), SimError>, SimError> {
        let committee = |c: &Option<Committee>| c.map(|c| (c.m, c.n));
        Ok(match op {
            Op::OpenChannel { channel, a, b } => {
                let (a, b) = (self.user(a)?, self.user(b)?);
                let c = self.sim.open_channel(a, b);
                c.map(|c| {
                    self.channels.insert(channel.clone(), c);
                })
            }
            Op::Deposit { deposit, user, amount, committee: k } => {
                let u = self.user(user)?;
                match self.sim.deposit(u, *amount, committee(k)) {
                    Err(e @ SimError::ScenarioInvalid(_)) => return Err(e),
                    r => r.map(|o| {
                        self.deposits.insert(deposit.clone(), (u, o));
                    }),
                }
            }
            Op::Approve { deposit, peer } => {
                let ((u, o), p) = (self.deposit(deposit)?, self.user(peer)?);
                self.sim.approve(u, p, o)
            }
            Op::Associate { deposit, channel } => {
                let ((u, o), c) = (self.deposit(deposit)?, self.channel(channel)?);
                self.sim.associate(u, c, o)
            }
            Op::SetupChannel { channel, a, b, fund_a, fund_b, committee_a, committee_b } => {
                let (ua, ub) = (self.user(a)?, self.user(b)?);
                let c = match self.sim.open_channel(ua, ub) {
                    Ok(c) => c,
                    Err(e) => return Ok(Err(e)),
                };
                self.channels.insert(channel.clone(), c);
                self.sim.deliver_all();
                for (side, u, v, amount, k) in [("a", ua, ub, *fund_a, committee_a), ("b", ub, ua, *fund_b, committee_b)] {
                    if amount == 0 {
                        continue;
                    }
                    match self.sim.fund_channel(u, v, c, amount, committee(k)) {
                        Ok(o) => {
                            self.deposits.insert(format!("{channel}.{side}"), (u, o));
                        }
                        Err(e @ SimError::ScenarioInvalid(_)) => return Err(e),
                        Err(e) => return Ok(Err(e)),
                    }
                }
                Ok(())
            }
            Op::Pay { channel, from, amount } => {
                let (c, u) = (self.channel(channel)?, self.user(from)?);
                self.sim.pay(u, c, *amount)
            }
            Op::PayMultihop { payment, path, channels, amount } => {
                let path: Vec<User> = path.iter().map(|p| self.user(p)).collect::<Result<_, _>>()?;
                let chans: Vec<ChannelId> = channels.iter().map(|c| self.channel(c)).collect::<Result<_, _>>()?;
                if path.len() != chans.len() + 1 {
                    return Err(SimError::ScenarioInvalid("path needs one more node than channels".into()));
                }
                self.sim.pay_multihop(&path, &chans, *amount).map(|p| {
                    self.payments.insert(payment.clone(), p);
                })
            }
            Op::Dissociate { deposit } => {
                let (u, o) = self.deposit(deposit)?;
                let c = self.sim.enclave(self.sim.primary(u)).core.deposits.get(&o).and_then(|d| match d.status {
                    crate::program::DepositStatus::Associated(c) => Some(c),
                    _ => None,
                });
                match c {
                    Some(c) => self.sim.dissociate(u, c, o),
                    None => Err(SimError::UnexpectedReply("deposit is not associated".into())),
                }
            }
            Op::Settle { user, channel, force } => {
                let (u, c) = (self.user(user)?, self.channel(channel)?);
                self.sim.settle(u, c, *force).map(|_| ())
            }
            Op::Release { deposit } => {
                let (u, o) = self.deposit(deposit)?;
                self.sim.release(u, o).map(|_| ())
            }
            Op::Eject { user, payment } => {
                let u = self.user(user)?;
                let p = *self.payments.get(payment).ok_or_else(|| SimError::ScenarioInvalid(format!("unknown payment {payment}")))?;
                self.sim.eject(u, p).map(|_| ())
            }
            Op::AddBackup { user } => {
                let u = self.user(user)?;
                self.sim.add_backup(u).map(|_| ())
            }
            Op::Crash { user, node } => {
                let n = self.node(user, *node)?;
                self.sim.crash(n);
                Ok(())
            }
            Op::Compromise { user, node } => {
                let n = self.node(user, *node)?;
                self.sim.compromise(n);
                Ok(())
            }
            Op::SetAdversary { adversary } => {
                if adversary.withhold.iter().any(|u| *u as usize >= self.users.len()) {
                    return Err(SimError::ScenarioInvalid("withhold names an unknown user".into()));
                }
                self.sim.adversary = adversary.clone();
                Ok(())
            }
            Op::DeliverAll => {
                self.sim.deliver_all();
                Ok(())
            }
            Op::Deliver { count } => {
                for _ in 0..*count {
                    self.sim.deliver_next();
                }
                Ok(())
            }
            Op::DeliverRandom { count } => {
                for _ in 0..*count {
                    self.sim.deliver_random();
                }
                Ok(())
            }
            Op::ConfirmAll => {
                self.sim.confirm_all();
                Ok(())
            }
            Op::Advance { us } => {
                self.sim.advance(*us);
                Ok(())
            }
            Op::ReleaseHeld => {
                self.sim.release_held();
                Ok(())
            }
            Op::ReleaseWithheld => {
                self.sim.release_withheld();
                Ok(())
            }
            Op::Reclaim { user } => {
                let u = self.user(user)?;
                self.sim.reclaim(u);
                Ok(())
            }
        })
    }
}

/// Builds the simulation for a scenario without running its script.
pub fn build(scenario: &Scenario) -> Result<Simulation, SimError> {
    scenario.validate()?;
    let config =
        SimConfig { seed: scenario.seed, min_confirmations: scenario.min_confirmations, persist: scenario.persist, ..SimConfig::default() };
    let users: Vec<(String, u64, bool)> = scenario.users.iter().map(|u| (u.name.clone(), u.balance, u.honest)).collect();
    let mut sim = Simulation::new(config, scenario.adversary.clone(), &users);
    for (i, u) in scenario.users.iter().enumerate() {
        for _ in 0..u.backups {
            sim.add_backup(i as User)?;
        }
    }
    Ok(sim)
}

/// Executes a scenario to the end, reclaims and checks against the oracle.
pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
    let sim = build(scenario)?;
    let mut r = Runner {
        users: scenario.users.iter().enumerate().map(|(i, u)| (u.name.clone(), i as User)).collect(),
        sim,
        channels: BTreeMap::new(),
        deposits: BTreeMap::new(),
        payments: BTreeMap::new(),
    };
    for op in &scenario.script {
        if let Err(e) = r.op(op)? {
            r.sim.log("op-error", None, format!("{op:?}: {e}"));
        }
    }
    let verdict = r.sim.finish(scenario.exact);
    Ok(RunOutput {
        events: r.sim.trace_jsonl(),
        ledger: r.sim.ledger.trace_jsonl(),
        cost: r.sim.cost_report(&scenario.cost_params),
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAPPY: &str = r#"{
        "seed": 3,
        "users": [{"name": "alice", "balance": 1000}, {"name": "bob", "balance": 500}],
        "exact": true,
        "script": [
            {"op": "setup_channel", "channel": "ab", "a": "alice", "b": "bob", "fund_a": 100, "fund_b": 20},
            {"op": "pay", "channel": "ab", "from": "alice", "amount": 30},
            {"op": "deliver_all"},
            {"op": "settle", "user": "bob", "channel": "ab"},
            {"op": "deliver_all"}
        ]
    }"#;

    #[test]
    fn happy_path_passes() {
        let out = run(&Scenario::from_json(HAPPY).unwrap()).unwrap();
        out.check().unwrap();
        assert_eq!(out.verdict.users[0].ledger, 970);
        assert_eq!(out.verdict.users[1].ledger, 530);
    }

    #[test]
    fn unknown_label_is_invalid() {
        let mut s = Scenario::from_json(HAPPY).unwrap();
        s.script.push(Op::Pay { channel: "zz".into(), from: "alice".into(), amount: 1 });
        assert!(matches!(run(&s), Err(SimError::ScenarioInvalid(_))));
    }

    #[test]
    fn unknown_field_is_invalid() {
        assert!(Scenario::from_json(r#"{"seed":1,"users":[],"script":[],"bogus":1}"#).is_err());
        let s = Scenario::from_json(r#"{"seed":1,"users":[],"script":[]}"#).unwrap();
        assert!(matches!(s.validate(), Err(SimError::ScenarioInvalid(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let s = Scenario::from_json(HAPPY).unwrap();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}
