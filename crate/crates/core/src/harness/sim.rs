//! Deterministic discrete-event simulation of hosts, enclaves, the network
//! and the ledger, mirrored call-for-call into the ideal functionality.
//!
//! Every source of nondeterminism is drawn from one seeded stream, and every
//! collection is ordered, so a (scenario, seed) pair always produces the
//! same trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cost::{measure, ChannelFootprint, CostReport, Params};
use crate::channel::Channel;
use crate::crypto::{derive_seed, keygen, KeyPair, PublicKey, Signature};
use crate::encoding::{decode, encode};
use crate::ideal::{DepositId, IdealState, PendingPaymentId, User};
use crate::ledger::{Address, Ledger, LedgerError, OutPoint, PaymentId, Transaction, TxId, TxOut};
use crate::multihop::{Route, Stage};
use crate::program::{ChannelId, Command, Config, DepositStatus, Envelope, Event, Output, ProgramError, Reply, Teechain};
use crate::replication::ReplicationError;
use crate::tee::{EnclaveId, MonotonicCounter, Platform, TeeError};

pub type NodeId = usize;

const SLOT: EnclaveId = EnclaveId(0);
/// Upper bound on deliveries in one `deliver_all`, against livelock.
const MAX_DELIVERIES: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("scenario invalid: {0}")]
    ScenarioInvalid(String),
    #[error("oracle divergence: {0}")]
    OracleDivergence(String),
    #[error("enclave: {0}")]
    Tee(#[from] TeeError),
    #[error("program: {0}")]
    Program(#[from] ProgramError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("fewer than m committee members could sign")]
    InsufficientLiveMembers,
    #[error("unexpected reply: {0}")]
    UnexpectedReply(String),
}

impl SimError {
    fn is_retryable(&self) -> bool {
        matches!(self, SimError::Program(ProgramError::OutOfOrder) | SimError::Program(ProgramError::Replication(ReplicationError::Busy)))
    }
}

/// Network and ledger adversary. Probabilities apply per message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub drop: f64,
    /// A delivered message is recorded and injected again later.
    pub replay: f64,
    /// The message is held until released; with no release this is an
    /// unbounded delay.
    pub hold: f64,
    /// Extra uniform delay per message; nonzero values reorder traffic.
    pub max_delay_us: u64,
    /// Held messages are released when the scenario ends.
    pub eventual_release: bool,
    /// Users whose ledger transactions are kept out of blocks until released.
    pub withhold: Vec<User>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig { drop: 0.0, replay: 0.0, hold: 0.0, max_delay_us: 0, eventual_release: true, withhold: Vec::new() }
    }
}

impl AdversaryConfig {
    pub fn is_passive(&self) -> bool {
        self.drop == 0.0 && self.replay == 0.0 && self.hold == 0.0 && self.withhold.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub min_confirmations: u64,
    /// Base one-way network latency.
    pub latency_us: u64,
    /// Persist sealed state through the monotonic counter after every step.
    pub persist: bool,
    pub counter_rate: u64,
    /// Compare real and ideal channel balances after every step.
    pub check_each_step: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            min_confirmations: 1,
            latency_us: 1_000,
            persist: false,
            counter_rate: MonotonicCounter::DEFAULT_RATE_PER_SEC,
            check_each_step: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: u64,
    pub kind: String,
    pub node: Option<NodeId>,
    pub data: String,
}

#[derive(Clone)]
pub struct Node {
    pub owner: User,
    pub identity: PublicKey,
    pub platform: Platform<Teechain>,
    /// Deliveries that arrived ahead of their predecessors or while the
    /// enclave was busy; retried after every successful delivery.
    stash: Vec<Envelope>,
}

impl Node {
    pub fn enclave(&self) -> &Teechain {
        self.platform.enclave(SLOT).expect("slot installed").inspect()
    }

    pub fn is_crashed(&self) -> bool {
        self.platform.enclave(SLOT).is_ok_and(|e| e.status() == crate::tee::EnclaveStatus::Crashed)
    }
}

/// A transaction the host obtained from its enclave.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostTx {
    pub tx: Transaction,
    pub authorization: Option<Signature>,
}

#[derive(Clone)]
pub struct UserState {
    pub name: String,
    pub wallet: KeyPair,
    /// Chain order: the primary first, then its backups.
    pub nodes: Vec<NodeId>,
    pub honest: bool,
    pub txs: Vec<HostTx>,
}

impl UserState {
    pub fn primary(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn address(&self) -> Address {
        Address::Single(self.wallet.public)
    }
}

#[derive(Clone)]
struct InFlight {
    id: u64,
    ready_at: u64,
    held: bool,
    env: Envelope,
}

/// Translation of real events into ideal calls.
#[derive(Clone, Default)]
pub struct Mirror {
    pub ideal: IdealState,
    deposits: BTreeMap<OutPoint, DepositId>,
    payments: BTreeMap<(ChannelId, User, u64), PendingPaymentId>,
    multihop: BTreeMap<(PaymentId, ChannelId), PendingPaymentId>,
    settled: BTreeSet<(User, ChannelId)>,
    pub divergence: Option<String>,
}

impl Mirror {
    fn diverge(&mut self, msg: String) {
        if self.divergence.is_none() {
            self.divergence = Some(msg);
        }
    }

    fn call<T>(&mut self, what: &str, r: Result<T, crate::ideal::Fail>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(_) => {
                self.diverge(format!("ideal rejected {what}"));
                None
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub name: String,
    pub honest: bool,
    pub ledger: u64,
    pub ideal: u64,
    pub perceived: i128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub divergence: Option<String>,
    pub users: Vec<UserOutcome>,
}

#[derive(Clone)]
pub struct Simulation {
    pub config: SimConfig,
    pub adversary: AdversaryConfig,
    pub now: u64,
    pub ledger: Ledger,
    pub nodes: Vec<Node>,
    pub users: Vec<UserState>,
    pub mirror: Mirror,
    rng: ChaCha8Rng,
    by_identity: BTreeMap<PublicKey, NodeId>,
    network: Vec<InFlight>,
    next_msg: u64,
    tasks: VecDeque<(NodeId, Command)>,
    pending_approvals: Vec<(NodeId, PublicKey, OutPoint)>,
    withheld: BTreeSet<TxId>,
    key_holders: BTreeMap<PublicKey, NodeId>,
    next_channel: u64,
    /// Deposits ever associated with each channel and their (m, n), for
    /// cost accounting.
    pub channel_deposits: BTreeMap<ChannelId, BTreeMap<OutPoint, (u32, u32)>>,
    /// Transactions that released a deposit rather than closing a channel.
    pub releases: BTreeSet<TxId>,
    /// Every envelope put on the wire, as an eavesdropper records it.
    pub wire: Vec<Envelope>,
    trace: Vec<TraceEntry>,
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut b = [0u8; 32];
    b[..8].copy_from_slice(&seed.to_be_bytes());
    b
}

/// Short, stable description of a command for the trace.
fn describe(cmd: &Command) -> String {
    match cmd {
        Command::Connect { peer } => format!("Connect {peer:?}"),
        Command::Deliver { envelope } => format!("Deliver {:?}->{:?} seq={:?}", envelope.from, envelope.to, envelope.seq()),
        Command::NewAddress => "NewAddress".into(),
        Command::NewMemberKey => "NewMemberKey".into(),
        Command::OpenChannel { channel, peer, .. } => format!("OpenChannel {} {peer:?}", channel.0),
        Command::NewDeposit { tx, index, committee } => {
            format!("NewDeposit {:?}:{index} committee={}", tx.txid(), committee.len())
        }
        Command::ReleaseDeposit { outpoint, .. } => format!("ReleaseDeposit {outpoint:?}"),
        Command::ApproveMyDeposit { peer, outpoint } => format!("ApproveMyDeposit {peer:?} {outpoint:?}"),
        Command::ApproveTheirDeposit { peer, tx, index, .. } => format!("ApproveTheirDeposit {peer:?} {:?}:{index}", tx.txid()),
        Command::Associate { channel, outpoint } => format!("Associate {} {outpoint:?}", channel.0),
        Command::Dissociate { channel, outpoint } => format!("Dissociate {} {outpoint:?}", channel.0),
        Command::Pay { channel, amount } => format!("Pay {} {amount}", channel.0),
        Command::Settle { channel } => format!("Settle {}", channel.0),
        Command::RecoverDeposit { outpoint, evidence, .. } => format!("RecoverDeposit {outpoint:?} {:?}", evidence.txid()),
        Command::PayMultihop { route, amount } => format!("PayMultihop hops={} {amount}", route.channels.len()),
        Command::Eject { payment } => format!("Eject {payment:?}"),
        Command::EjectWithPopt { payment, evidence, .. } => format!("EjectWithPopt {payment:?} {:?}", evidence.txid()),
        Command::Attest { .. } => "Attest".into(),
        Command::AssignBackup { backup, .. } => format!("AssignBackup {backup:?}"),
        Command::ReadReplica => "ReadReplica".into(),
        Command::Freeze => "Freeze".into(),
        Command::CommitteeSign { tx, authorization } => {
            format!("CommitteeSign {:?} auth={}", tx.txid(), authorization.is_some())
        }
    }
}

impl Simulation {
    /// Users are `(name, genesis balance, honest)`; each gets a wallet key
    /// and a primary enclave on its own platform.
    pub fn new(config: SimConfig, adversary: AdversaryConfig, users: &[(String, u64, bool)]) -> Simulation {
        let root = seed_bytes(config.seed);
        let wallets: Vec<KeyPair> = (0..users.len()).map(|i| keygen(derive_seed(&root, "wallet", i as u64))).collect();
        let grants: Vec<(Address, u64)> =
            wallets.iter().zip(users).map(|(w, (_, amount, _))| (Address::Single(w.public), *amount)).collect();
        let ledger = Ledger::genesis(derive_seed(&root, "ledger", 0), &grants);
        let genesis: Vec<(User, u64)> = users.iter().enumerate().map(|(i, (_, a, _))| (i as User, *a)).collect();
        let mut sim = Simulation {
            rng: ChaCha8Rng::from_seed(derive_seed(&root, "schedule", 0)),
            config,
            adversary,
            now: 0,
            ledger,
            nodes: Vec::new(),
            users: Vec::new(),
            mirror: Mirror { ideal: IdealState::new(&genesis), ..Mirror::default() },
            by_identity: BTreeMap::new(),
            network: Vec::new(),
            next_msg: 0,
            tasks: VecDeque::new(),
            pending_approvals: Vec::new(),
            withheld: BTreeSet::new(),
            key_holders: BTreeMap::new(),
            next_channel: 1,
            channel_deposits: BTreeMap::new(),
            releases: BTreeSet::new(),
            wire: Vec::new(),
            trace: Vec::new(),
        };
        for (i, ((name, _, honest), wallet)) in users.iter().zip(wallets).enumerate() {
            sim.users.push(UserState { name: name.clone(), wallet, nodes: Vec::new(), honest: *honest, txs: Vec::new() });
            sim.add_node(i as User);
        }
        sim
    }

    /// Boots a fresh enclave on a new platform owned by `owner`.
    pub fn add_node(&mut self, owner: User) -> NodeId {
        let id = self.nodes.len();
        let root = seed_bytes(self.config.seed);
        let cfg = Config { ledger_key: self.ledger.public_key(), min_confirmations: self.config.min_confirmations };
        let mut platform = Platform::new(MonotonicCounter::new(self.config.counter_rate));
        let identity =
            platform.install(SLOT, derive_seed(&root, "enclave", id as u64), &encode(&cfg)).expect("fresh platform accepts an enclave");
        self.nodes.push(Node { owner, identity, platform, stash: Vec::new() });
        self.by_identity.insert(identity, id);
        self.users[owner as usize].nodes.push(id);
        id
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Restarts the adversary's and scheduler's random stream, so that
    /// clones of one simulation can explore different schedules.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::from_seed(derive_seed(&seed_bytes(self.config.seed), "reseed", seed));
    }

    /// Seals `node`'s state to stable storage under a fresh counter value.
    pub fn persist(&mut self, node: NodeId) -> Result<u64, SimError> {
        Ok(self.nodes[node].platform.persist(SLOT, self.now)?)
    }

    pub fn stored_blob(&self, node: NodeId) -> Option<Vec<u8>> {
        self.nodes[node].platform.stored_blob(SLOT).map(<[u8]>::to_vec)
    }

    /// The host replaces `node`'s stable storage, then restarts the enclave
    /// from it.
    pub fn restore_from(&mut self, node: NodeId, blob: Vec<u8>) -> Result<(), SimError> {
        self.log("adversary", Some(node), "restore from storage".into());
        let p = &mut self.nodes[node].platform;
        p.overwrite_storage(SLOT, blob);
        p.restore(SLOT)?;
        Ok(())
    }

    pub fn primary(&self, u: User) -> NodeId {
        self.users[u as usize].primary()
    }

    pub fn identity(&self, node: NodeId) -> PublicKey {
        self.nodes[node].identity
    }

    pub fn enclave(&self, node: NodeId) -> &Teechain {
        self.nodes[node].enclave()
    }

    pub fn channel(&self, u: User, c: ChannelId) -> Option<&Channel> {
        self.enclave(self.primary(u)).core.channels.get(&c)
    }

    pub fn wallet_balance(&self, u: User) -> u64 {
        self.ledger.balance_of(&self.users[u as usize].wallet.public)
    }

    pub fn invariant_violations(&self) -> u64 {
        self.nodes.iter().map(|n| n.enclave().stats().invariant_violations).sum()
    }

    pub fn log(&mut self, kind: &str, node: Option<NodeId>, data: String) {
        self.trace.push(TraceEntry { t: self.now, kind: kind.to_string(), node, data });
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.trace {
            s.push_str(&serde_json::to_string(e).expect("trace entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn advance(&mut self, us: u64) {
        self.now += us;
    }

    // ---------------------------------------------------------------- steps

    /// Runs one command on `node`, then any host reactions it triggers.
    pub fn command(&mut self, node: NodeId, cmd: Command) -> Result<Reply, SimError> {
        let r = self.step_node(node, cmd);
        self.drain_tasks();
        r
    }

    /// Like `command`, but first lets outstanding replication finish.
    pub fn command_when_idle(&mut self, node: NodeId, cmd: Command) -> Result<Reply, SimError> {
        for _ in 0..64 {
            match self.command(node, cmd.clone()) {
                Err(SimError::Tee(TeeError::RateLimited { retry_at_us })) => self.now = self.now.max(retry_at_us),
                Err(e) if e.is_retryable() => {
                    if !self.deliver_next() {
                        return Err(e);
                    }
                }
                r => return r,
            }
        }
        Err(SimError::Program(ReplicationError::Busy.into()))
    }

    fn channel_ids(&self, node: NodeId) -> BTreeSet<ChannelId> {
        self.enclave(node).core.channels.keys().copied().collect()
    }

    fn step_node(&mut self, node: NodeId, cmd: Command) -> Result<Reply, SimError> {
        let before = self.channel_ids(node);
        self.log("command", Some(node), describe(&cmd));
        let input = encode(&cmd);
        let now = self.now;
        let platform = &mut self.nodes[node].platform;
        let res = if self.config.persist { platform.resume_persistent(SLOT, &input, now) } else { platform.resume(SLOT, &input) };
        let bytes = match res {
            Ok((bytes, _)) => bytes,
            Err(e) => {
                self.log("reply", Some(node), format!("tee error: {e}"));
                return Err(e.into());
            }
        };
        let out: Output = decode(&bytes).expect("enclave output decodes");
        for env in out.messages {
            self.send(env);
        }
        for ev in &out.events {
            self.log("event", Some(node), format!("{ev:?}"));
            self.on_event(node, ev);
        }
        self.after_step(node, before);
        match out.reply {
            Ok(reply) => {
                self.log("reply", Some(node), "ok".into());
                Ok(reply)
            }
            Err(e) => {
                self.log("reply", Some(node), format!("error: {e}"));
                Err(e.into())
            }
        }
    }

    fn drain_tasks(&mut self) {
        while let Some((node, cmd)) = self.tasks.pop_front() {
            // A rate-limited host waits for the counter and tries again.
            if let Err(SimError::Tee(TeeError::RateLimited { retry_at_us })) = self.step_node(node, cmd.clone()) {
                self.now = self.now.max(retry_at_us);
                self.tasks.push_front((node, cmd));
            }
        }
    }

    // -------------------------------------------------------------- network

    fn send(&mut self, env: Envelope) {
        self.wire.push(env.clone());
        let adv = &self.adversary;
        let (drop, hold, max_delay) = (adv.drop, adv.hold, adv.max_delay_us);
        if drop > 0.0 && self.rng.gen_bool(drop) {
            self.log("drop", None, format!("{:?}->{:?} seq={:?}", env.from, env.to, env.seq()));
            return;
        }
        let held = hold > 0.0 && self.rng.gen_bool(hold);
        let delay = if max_delay > 0 { self.rng.gen_range(0..=max_delay) } else { 0 };
        self.enqueue(env, self.config.latency_us + delay, held);
    }

    fn enqueue(&mut self, env: Envelope, delay: u64, held: bool) {
        let id = self.next_msg;
        self.next_msg += 1;
        self.network.push(InFlight { id, ready_at: self.now + delay, held, env });
    }

    /// Messages on the wire that the scheduler may deliver.
    pub fn in_flight(&self) -> usize {
        self.network.iter().filter(|m| !m.held).count()
    }

    pub fn held(&self) -> usize {
        self.network.iter().filter(|m| m.held).count()
    }

    /// Delivers the earliest deliverable message. Returns false when none.
    pub fn deliver_next(&mut self) -> bool {
        let next = self.network.iter().enumerate().filter(|(_, m)| !m.held).min_by_key(|(_, m)| (m.ready_at, m.id)).map(|(i, _)| i);
        let Some(i) = next else { return false };
        let m = self.network.remove(i);
        self.now = self.now.max(m.ready_at);
        self.deliver(m.env);
        true
    }

    /// Delivers the deliverable message at a uniformly random position.
    pub fn deliver_random(&mut self) -> bool {
        let live: Vec<usize> = (0..self.network.len()).filter(|i| !self.network[*i].held).collect();
        if live.is_empty() {
            return false;
        }
        let i = live[self.rng.gen_range(0..live.len())];
        let m = self.network.remove(i);
        self.now = self.now.max(m.ready_at);
        self.deliver(m.env);
        true
    }

    pub fn deliver_all(&mut self) {
        for _ in 0..MAX_DELIVERIES {
            if !self.deliver_next() {
                return;
            }
        }
    }

    pub fn release_held(&mut self) {
        for m in &mut self.network {
            m.held = false;
        }
    }

    /// Puts a recorded envelope back on the wire.
    pub fn inject(&mut self, env: Envelope) {
        self.log("inject", None, format!("{:?}->{:?} seq={:?}", env.from, env.to, env.seq()));
        self.enqueue(env, self.config.latency_us, false);
    }

    fn deliver(&mut self, env: Envelope) {
        let replay = self.adversary.replay;
        if replay > 0.0 && self.rng.gen_bool(replay) {
            let delay = self.config.latency_us + self.rng.gen_range(0..=self.adversary.max_delay_us.max(self.config.latency_us));
            self.log("replay", None, format!("{:?}->{:?} seq={:?}", env.from, env.to, env.seq()));
            self.enqueue(env.clone(), delay, false);
        }
        let Some(&node) = self.by_identity.get(&env.to) else { return };
        if self.nodes[node].is_crashed() {
            self.log("lost", Some(node), "receiver crashed".into());
            return;
        }
        match self.step_node(node, Command::Deliver { envelope: env.clone() }) {
            Err(e) if e.is_retryable() => self.nodes[node].stash.push(env),
            Err(SimError::Tee(TeeError::RateLimited { retry_at_us })) => {
                let delay = retry_at_us.saturating_sub(self.now);
                self.enqueue(env, delay, false);
            }
            Err(_) => {}
            Ok(_) => self.flush_stash(node),
        }
        self.drain_tasks();
    }

    fn flush_stash(&mut self, node: NodeId) {
        loop {
            let stash = std::mem::take(&mut self.nodes[node].stash);
            if stash.is_empty() {
                return;
            }
            let mut progressed = false;
            let mut keep = Vec::new();
            for env in stash {
                match self.step_node(node, Command::Deliver { envelope: env.clone() }) {
                    Err(e) if e.is_retryable() => keep.push(env),
                    Err(SimError::Tee(TeeError::RateLimited { retry_at_us })) => {
                        let delay = retry_at_us.saturating_sub(self.now);
                        self.enqueue(env, delay, false);
                    }
                    _ => progressed = true,
                }
            }
            let arrived = std::mem::take(&mut self.nodes[node].stash);
            keep.extend(arrived);
            self.nodes[node].stash = keep;
            if !progressed {
                return;
            }
        }
    }

    // --------------------------------------------------------------- ledger

    /// Adds committee co-signatures until every input meets its threshold.
    pub fn collect_signatures(&mut self, mut tx: Transaction, auth: Option<Signature>) -> Result<Transaction, SimError> {
        for i in 0..tx.inputs.len() {
            let Some(out) = self.ledger.output(&tx.inputs[i].prevout) else { continue };
            let addr = out.address.clone();
            let m = addr.threshold() as usize;
            for (k, key) in addr.keys().iter().enumerate() {
                if tx.inputs[i].witnesses.len() >= m {
                    break;
                }
                if tx.inputs[i].witnesses.iter().any(|w| w.key_index == k as u32) {
                    continue;
                }
                let Some(&holder) = self.key_holders.get(key) else { continue };
                if self.nodes[holder].is_crashed() {
                    continue;
                }
                if let Ok(Reply::Transaction(t)) =
                    self.command_when_idle(holder, Command::CommitteeSign { tx: tx.clone(), authorization: auth })
                {
                    tx = t;
                }
            }
            if tx.inputs[i].witnesses.len() < m {
                return Err(SimError::InsufficientLiveMembers);
            }
        }
        Ok(tx)
    }

    /// Completes and broadcasts a transaction on behalf of `u`'s host.
    pub fn broadcast(&mut self, u: User, tx: Transaction, auth: Option<Signature>) -> Result<TxId, SimError> {
        if !self.users[u as usize].txs.iter().any(|h| h.tx.txid() == tx.txid()) {
            self.users[u as usize].txs.push(HostTx { tx: tx.clone(), authorization: auth });
        }
        let tx = self.collect_signatures(tx, auth)?;
        let txid = tx.txid();
        let r = self.ledger.submit(tx);
        self.log("submit", None, format!("{txid:?} by {} -> {:?}", self.users[u as usize].name, r.as_ref().err()));
        r?;
        if self.adversary.withhold.contains(&u) {
            self.withheld.insert(txid);
        }
        Ok(txid)
    }

    /// Confirms every mempool transaction the adversary does not withhold.
    pub fn confirm_all(&mut self) {
        for txid in self.ledger.mempool_ids() {
            if !self.withheld.contains(&txid) {
                self.confirm(&txid);
            }
        }
    }

    pub fn confirm(&mut self, txid: &TxId) {
        if let Some(c) = self.ledger.confirm(txid) {
            self.log("confirm", None, format!("{c:?}"));
        }
        self.retry_approvals();
    }

    pub fn release_withheld(&mut self) {
        self.withheld.clear();
    }

    pub fn withheld(&self) -> &BTreeSet<TxId> {
        &self.withheld
    }

    fn retry_approvals(&mut self) {
        let pending = std::mem::take(&mut self.pending_approvals);
        for (node, peer, outpoint) in pending {
            match self.approval_command(peer, outpoint) {
                Some(cmd) => self.tasks.push_back((node, cmd)),
                None => self.pending_approvals.push((node, peer, outpoint)),
            }
        }
        self.drain_tasks();
    }

    fn approval_command(&self, peer: PublicKey, outpoint: OutPoint) -> Option<Command> {
        let tx = self.ledger.confirmed_tx(&outpoint.txid)?.clone();
        let cert = self.ledger.certify(&outpoint.txid)?;
        (cert.depth() >= self.config.min_confirmations).then_some(Command::ApproveTheirDeposit { peer, tx, index: outpoint.index, cert })
    }

    // ------------------------------------------------------- event mirroring

    fn is_primary(&self, node: NodeId) -> bool {
        let owner = self.nodes[node].owner;
        self.primary(owner) == node
    }

    fn owner_of(&self, pk: &PublicKey) -> Option<User> {
        self.by_identity.get(pk).map(|n| self.nodes[*n].owner)
    }

    fn on_event(&mut self, node: NodeId, ev: &Event) {
        if let Event::ApprovalRequested { peer, outpoint } = ev {
            match self.approval_command(*peer, *outpoint) {
                Some(cmd) => self.tasks.push_back((node, cmd)),
                None => self.pending_approvals.push((node, *peer, *outpoint)),
            }
        }
        if !self.is_primary(node) {
            return;
        }
        let u = self.nodes[node].owner;
        let m = &mut self.mirror;
        match *ev {
            Event::ChannelRequested { channel, peer } => {
                if m.ideal.channels.contains_key(&channel.0) {
                    let r = m.ideal.accept_channel_open(u, channel.0);
                    m.call("acceptChannelOpen", r);
                } else {
                    let Some(v) = self.owner_of(&peer) else { return };
                    let m = &mut self.mirror;
                    let r = m.ideal.open_channel(u, channel.0, v);
                    m.call("openChannel", r);
                }
            }
            Event::DepositRegistered { outpoint, amount } => {
                let r = m.ideal.add_deposit(u, amount);
                if let Some(crate::ideal::Outcome::Deposit(d)) = m.call("addDeposit", r) {
                    m.deposits.insert(outpoint, d);
                }
            }
            Event::DepositReleased { outpoint, .. } => {
                // A recovered deposit was already paid out by a settle.
                let Some(d) = m.deposits.get(&outpoint).copied() else { return };
                if m.ideal.deposits.contains_key(&d) {
                    let r = m.ideal.remove_deposit(u, d);
                    m.call("removeDeposit", r);
                }
            }
            Event::Associated { channel, outpoint, .. } => {
                if let Some(o) = self.ledger.output(&outpoint) {
                    let shape = (o.address.threshold(), o.address.keys().len() as u32);
                    self.channel_deposits.entry(channel).or_default().insert(outpoint, shape);
                }
                let m = &mut self.mirror;
                let Some(d) = m.deposits.get(&outpoint).copied() else { return m.diverge("unknown deposit".into()) };
                let r = m.ideal.associate_deposit(u, channel.0, d);
                m.call("associateDeposit", r);
            }
            Event::AssociationAccepted { channel, outpoint, .. } => {
                let Some(d) = m.deposits.get(&outpoint).copied() else { return m.diverge("unknown deposit".into()) };
                let r = m.ideal.accept_associate_deposit(u, channel.0, d);
                m.call("acceptAssociateDeposit", r);
            }
            Event::DissociateRequested { outpoint, .. } => {
                let Some(d) = m.deposits.get(&outpoint).copied() else { return m.diverge("unknown deposit".into()) };
                let r = m.ideal.dissociate_deposit(u, d);
                m.call("dissociateDeposit", r);
            }
            Event::DissociateAccepted { outpoint, .. } => {
                let Some(d) = m.deposits.get(&outpoint).copied() else { return m.diverge("unknown deposit".into()) };
                // A settle of either party may already have swept the
                // dissociation; the same holds for the ack below.
                if m.ideal.pending_deposits.contains_key(&d) {
                    let r = m.ideal.accept_dissociate(u, d);
                    m.call("acceptDissociate", r);
                }
            }
            Event::DissociateAcked { outpoint, .. } => {
                let Some(d) = m.deposits.get(&outpoint).copied() else { return m.diverge("unknown deposit".into()) };
                if m.ideal.pending_deposits.contains_key(&d) {
                    let r = m.ideal.ack_dissociate(u, d);
                    m.call("ackDissociate", r);
                }
            }
            Event::PaymentSent { channel, index, amount } => {
                let r = m.ideal.pay(u, channel.0, amount);
                if let Some(crate::ideal::Outcome::Payment(p)) = m.call("pay", r) {
                    m.payments.insert((channel, u, index), p);
                }
            }
            Event::PaymentReceived { channel, index, .. } => {
                let sender = m.ideal.channels.get(&channel.0).map(|c| if c.u == u { c.v } else { c.u });
                let Some(p) = sender.and_then(|s| m.payments.get(&(channel, s, index)).copied()) else {
                    return m.diverge(format!("receive without send on channel {}", channel.0));
                };
                let r = m.ideal.receive_payment(u, p);
                m.call("receivePayment", r);
            }
            Event::MultihopStage { payment, position, stage: Stage::Lock } => {
                let Some(rec) = self.enclave(node).core.payments.get(&(payment, position)) else { return };
                let Some(&out) = rec.route.channels.get(position as usize) else { return };
                let amount = rec.amount;
                let m = &mut self.mirror;
                let r = m.ideal.pay(u, out.0, amount);
                if let Some(crate::ideal::Outcome::Payment(p)) = m.call("pay (path lock)", r) {
                    m.multihop.insert((payment, out), p);
                }
            }
            Event::MultihopCredit { payment, channel, .. } => {
                let Some(p) = m.multihop.get(&(payment, channel)).copied() else {
                    return m.diverge("path credit without lock".into());
                };
                let r = m.ideal.receive_payment(u, p);
                m.call("receivePayment (path)", r);
            }
            _ => {}
        }
    }

    /// Channels that disappeared were settled by this party; then compare
    /// balances with the ideal world.
    fn after_step(&mut self, node: NodeId, before: BTreeSet<ChannelId>) {
        let u = self.nodes[node].owner;
        let after = self.channel_ids(node);
        for c in before.difference(&after) {
            if self.mirror.settled.insert((u, *c)) && self.mirror.ideal.channels.contains_key(&c.0) {
                let r = self.mirror.ideal.settle_channel(u, c.0);
                self.mirror.call("settleChannel", r);
            }
        }
        if self.config.check_each_step && self.is_primary(node) {
            self.check_node(node);
        }
    }

    fn check_node(&mut self, node: NodeId) {
        let u = self.nodes[node].owner;
        let e = self.enclave(node);
        if e.pending.is_some() {
            return;
        }
        let mut bad = None;
        for c in e.core.channels.values() {
            if c.lock.is_some() {
                continue;
            }
            let Some(ic) = self.mirror.ideal.channels.get(&c.id.0) else { continue };
            let side = if ic.u == u { ic.amount_u } else { ic.amount_v };
            if side != c.my_bal && !self.mirror.settled.contains(&(u, c.id)) {
                bad = Some(format!("user {u} channel {}: real {} ideal {}", c.id.0, c.my_bal, side));
            }
        }
        if let Some(msg) = bad {
            self.mirror.diverge(msg);
        }
        if !self.mirror.ideal.invariants_hold() {
            self.mirror.diverge("ideal invariants broken".into());
        }
    }

    // ------------------------------------------------------- host workflows

    /// Establishes a session between two enclaves.
    pub fn connect(&mut self, a: NodeId, b: NodeId) -> Result<(), SimError> {
        if self.enclave(a).has_session(&self.identity(b)) {
            return Ok(());
        }
        let peer = self.identity(b);
        self.command_when_idle(a, Command::Connect { peer })?;
        self.deliver_all();
        Ok(())
    }

    /// Appends a fresh enclave of `u` to the tail of its chain.
    pub fn add_backup(&mut self, u: User) -> Result<NodeId, SimError> {
        let tail = *self.users[u as usize].nodes.last().expect("user has a primary");
        let b = self.add_node(u);
        self.connect(tail, b)?;
        let nonce = derive_seed(&seed_bytes(self.config.seed), "attest-nonce", b as u64);
        let (quote, quote_sig) = self.nodes[b].platform.resume(SLOT, &encode(&Command::Attest { nonce }))?;
        let backup = self.identity(b);
        self.command_when_idle(tail, Command::AssignBackup { backup, quote, quote_sig, nonce })?;
        self.deliver_all();
        Ok(b)
    }

    pub fn open_channel(&mut self, a: User, b: User) -> Result<ChannelId, SimError> {
        let (pa, pb) = (self.primary(a), self.primary(b));
        self.connect(pa, pb)?;
        let channel = ChannelId(self.next_channel);
        self.next_channel += 1;
        let (wa, wb) = (self.users[a as usize].address(), self.users[b as usize].address());
        let (ia, ib) = (self.identity(pa), self.identity(pb));
        self.command_when_idle(pa, Command::OpenChannel { channel, peer: ib, my_addr: wa.clone(), remote_addr: wb.clone() })?;
        self.command_when_idle(pb, Command::OpenChannel { channel, peer: ia, my_addr: wb, remote_addr: wa })?;
        Ok(channel)
    }

    /// Funds a deposit from `u`'s wallet. With `committee = Some(m, n)` the
    /// deposit is an m-of-n output held by the first n enclaves of `u`'s
    /// chain; otherwise a 1-of-1 key of the primary.
    pub fn deposit(&mut self, u: User, amount: u64, committee: Option<(u32, usize)>) -> Result<OutPoint, SimError> {
        let primary = self.primary(u);
        let (address, members) = match committee {
            None => {
                let Reply::Address(k) = self.command_when_idle(primary, Command::NewAddress)? else {
                    return Err(SimError::UnexpectedReply("NewAddress".into()));
                };
                (Address::multisig(1, vec![k])?, Vec::new())
            }
            Some((m, n)) => {
                let chain = self.users[u as usize].nodes.clone();
                if n == 0 || n > chain.len() || m == 0 || m as usize > n {
                    return Err(SimError::ScenarioInvalid(format!("committee {m}-of-{n} with chain of {}", chain.len())));
                }
                let mut keys = Vec::new();
                for &node in &chain[..n] {
                    let Reply::Address(k) = self.command_when_idle(node, Command::NewMemberKey)? else {
                        return Err(SimError::UnexpectedReply("NewMemberKey".into()));
                    };
                    self.key_holders.insert(k, node);
                    keys.push(k);
                }
                (Address::multisig(m, keys)?, chain[..n].iter().map(|n| self.identity(*n)).collect())
            }
        };
        let tx = self.fund(u, address, amount)?;
        let txid = self.ledger.submit(tx.clone())?;
        self.confirm(&txid);
        self.command_when_idle(primary, Command::NewDeposit { tx, index: 0, committee: members })?;
        self.deliver_all();
        Ok(OutPoint { txid, index: 0 })
    }

    /// Wallet transaction paying `amount` to `to` with change back.
    fn fund(&self, u: User, to: Address, amount: u64) -> Result<Transaction, SimError> {
        let user = &self.users[u as usize];
        let mut picked = Vec::new();
        let mut total = 0u64;
        for o in self.ledger.unspent_for(&user.address()) {
            if total >= amount {
                break;
            }
            total += o.amount;
            picked.push(o.id);
        }
        if total < amount || amount == 0 {
            return Err(SimError::ScenarioInvalid(format!("{} cannot fund {amount}", user.name)));
        }
        let mut outputs = vec![TxOut { address: to, amount }];
        if total > amount {
            outputs.push(TxOut { address: user.address(), amount: total - amount });
        }
        let mut tx = Transaction::unsigned(picked, outputs, None);
        let wallet = user.address();
        tx.sign_inputs_for(|_| Some(wallet.clone()), &user.wallet);
        Ok(tx)
    }

    pub fn approve(&mut self, u: User, peer: User, outpoint: OutPoint) -> Result<(), SimError> {
        let p = self.identity(self.primary(peer));
        self.command_when_idle(self.primary(u), Command::ApproveMyDeposit { peer: p, outpoint })?;
        Ok(())
    }

    pub fn associate(&mut self, u: User, channel: ChannelId, outpoint: OutPoint) -> Result<(), SimError> {
        self.command_when_idle(self.primary(u), Command::Associate { channel, outpoint })?;
        Ok(())
    }

    /// Deposit, approval and association in one go, delivering as needed.
    pub fn fund_channel(
        &mut self,
        u: User,
        peer: User,
        channel: ChannelId,
        amount: u64,
        committee: Option<(u32, usize)>,
    ) -> Result<OutPoint, SimError> {
        let d = self.deposit(u, amount, committee)?;
        self.approve(u, peer, d)?;
        self.deliver_all();
        self.associate(u, channel, d)?;
        self.deliver_all();
        Ok(d)
    }

    pub fn pay(&mut self, u: User, channel: ChannelId, amount: u64) -> Result<(), SimError> {
        self.command_when_idle(self.primary(u), Command::Pay { channel, amount })?;
        Ok(())
    }

    pub fn dissociate(&mut self, u: User, channel: ChannelId, outpoint: OutPoint) -> Result<(), SimError> {
        self.command_when_idle(self.primary(u), Command::Dissociate { channel, outpoint })?;
        Ok(())
    }

    pub fn pay_multihop(&mut self, path: &[User], channels: &[ChannelId], amount: u64) -> Result<PaymentId, SimError> {
        let nodes = path.iter().map(|u| self.identity(self.primary(*u))).collect();
        let route = Route { nodes, channels: channels.to_vec() };
        match self.command_when_idle(self.primary(path[0]), Command::PayMultihop { route, amount })? {
            Reply::Payment(p) => Ok(p),
            r => Err(SimError::UnexpectedReply(format!("{r:?}"))),
        }
    }

    /// Broadcasts whatever transactions a reply carries.
    pub fn broadcast_reply(&mut self, u: User, reply: Reply) -> Vec<TxId> {
        let txs: Vec<(Transaction, Option<Signature>)> = match reply {
            Reply::Transaction(tx) => vec![(tx, None)],
            Reply::Transactions(txs) => txs.into_iter().map(|t| (t, None)).collect(),
            Reply::Release { tx, authorization } => vec![(tx, Some(authorization))],
            _ => Vec::new(),
        };
        txs.into_iter().filter_map(|(tx, auth)| self.broadcast(u, tx, auth).ok()).collect()
    }

    /// Settles a channel; a channel that started an off-chain close is
    /// settled on-chain when `force` is set.
    pub fn settle(&mut self, u: User, channel: ChannelId, force: bool) -> Result<Vec<TxId>, SimError> {
        let node = self.primary(u);
        let reply = self.command_when_idle(node, Command::Settle { channel })?;
        let mut ids = self.broadcast_reply(u, reply.clone());
        if force && reply == Reply::Transactions(Vec::new()) && self.enclave(node).core.channels.contains_key(&channel) {
            let reply = self.command_when_idle(node, Command::Settle { channel })?;
            ids.extend(self.broadcast_reply(u, reply));
        }
        Ok(ids)
    }

    pub fn release(&mut self, u: User, outpoint: OutPoint) -> Result<Vec<TxId>, SimError> {
        let payout = self.users[u as usize].address();
        let reply = self.command_when_idle(self.primary(u), Command::ReleaseDeposit { outpoint, payout })?;
        if let Reply::Release { tx, .. } = &reply {
            self.releases.insert(tx.txid());
        }
        Ok(self.broadcast_reply(u, reply))
    }

    pub fn eject(&mut self, u: User, payment: PaymentId) -> Result<Vec<TxId>, SimError> {
        let reply = self.command_when_idle(self.primary(u), Command::Eject { payment })?;
        Ok(self.broadcast_reply(u, reply))
    }

    pub fn crash(&mut self, node: NodeId) {
        self.log("adversary", Some(node), "crash".into());
        self.nodes[node].platform.enclave_mut(SLOT).expect("installed").inject_crash();
    }

    pub fn compromise(&mut self, node: NodeId) {
        self.log("adversary", Some(node), "compromise".into());
        self.nodes[node].platform.enclave_mut(SLOT).expect("installed").inject_compromise();
    }

    /// State bytes an attacker extracts from a compromised enclave.
    pub fn leak(&self, node: NodeId) -> Result<Teechain, SimError> {
        let bytes = self.nodes[node].platform.enclave(SLOT)?.leak_state()?;
        Ok(decode(&bytes).expect("program state decodes"))
    }

    /// Cost of every channel so far, measured from the ledger trace.
    pub fn cost_report(&self, params: &Params) -> CostReport {
        let empty = BTreeMap::new();
        let fps: Vec<ChannelFootprint<'_>> = (1..self.next_channel)
            .map(|c| ChannelFootprint {
                channel: ChannelId(c),
                deposits: self.channel_deposits.get(&ChannelId(c)).unwrap_or(&empty),
                releases: &self.releases,
            })
            .collect();
        measure(self.ledger.trace(), &fps, params)
    }

    // -------------------------------------------------------------- reclaim

    /// Drives `u`'s enclave and host until everything it can claim is on the
    /// ledger: ejects in-flight path payments, settles every channel,
    /// releases free deposits, answers conflicts with proofs of premature
    /// termination and recovers deposits left unspent by a conflicting
    /// settlement.
    pub fn reclaim(&mut self, u: User) {
        let node = self.primary(u);
        let mut tried_popt: BTreeSet<(PaymentId, TxId)> = BTreeSet::new();
        let mut tried_recover: BTreeSet<(OutPoint, TxId)> = BTreeSet::new();
        for _round in 0..12 {
            let mut progress = false;
            if self.nodes[node].is_crashed() {
                return;
            }
            let core = self.enclave(node).core.clone();
            let mut ejects: BTreeSet<PaymentId> = BTreeSet::new();
            for ((pid, _), p) in &core.payments {
                let locks = p.views.iter().any(|v| core.channels.get(&v.channel).is_some_and(|c| c.lock == Some(*pid)));
                if p.stage != Stage::Ejected && locks {
                    ejects.insert(*pid);
                }
            }
            for pid in ejects {
                progress |= self.eject(u, pid).is_ok();
            }
            let channels: Vec<ChannelId> = self.enclave(node).core.channels.keys().copied().collect();
            for c in channels {
                progress |= self.settle(u, c, true).is_ok();
            }
            let free: Vec<OutPoint> = self
                .enclave(node)
                .core
                .deposits
                .iter()
                .filter(|(o, d)| d.status == DepositStatus::Free && self.ledger.is_unspent(o))
                .map(|(o, _)| *o)
                .collect();
            for o in free {
                progress |= self.release(u, o).is_ok();
            }
            progress |= self.resubmit(u);
            self.confirm_all();
            progress |= self.answer_conflicts(u, &mut tried_popt);
            progress |= self.recover_deposits(u, &mut tried_recover);
            self.confirm_all();
            if !progress {
                return;
            }
        }
    }

    /// Rebroadcasts host transactions that never reached the mempool.
    fn resubmit(&mut self, u: User) -> bool {
        let txs = self.users[u as usize].txs.clone();
        let mut any = false;
        for h in txs {
            let id = h.tx.txid();
            let known = self.ledger.is_confirmed(&id) || self.ledger.was_conflicted(&id) || self.ledger.mempool_ids().contains(&id);
            let spendable = h.tx.prevouts().all(|p| self.ledger.is_unspent(p));
            if !known && spendable && self.broadcast(u, h.tx, h.authorization).is_ok() {
                any = true;
            }
        }
        any
    }

    fn answer_conflicts(&mut self, u: User, tried: &mut BTreeSet<(PaymentId, TxId)>) -> bool {
        let node = self.primary(u);
        let mut any = false;
        let records: Vec<(PaymentId, Vec<Transaction>)> = self
            .enclave(node)
            .core
            .payments
            .iter()
            .filter(|(_, p)| p.stage == Stage::Ejected)
            .map(|((pid, _), p)| (*pid, p.decided.clone().unwrap_or_default()))
            .collect();
        for (pid, decided) in records {
            let lost = decided.iter().any(|t| !self.ledger.is_confirmed(&t.txid()) && t.prevouts().any(|p| !self.ledger.is_unspent(p)));
            if !lost {
                continue;
            }
            let evidence: Option<Transaction> = self
                .ledger
                .confirmed_txs()
                .filter(|t| t.tag.is_some_and(|g| g.payment == pid))
                .filter(|t| decided.iter().any(|d| d.conflicts_with(t) && d.txid() != t.txid()))
                .find(|t| !tried.contains(&(pid, t.txid())))
                .cloned();
            let Some(evidence) = evidence else { continue };
            tried.insert((pid, evidence.txid()));
            let cert = self.ledger.certify(&evidence.txid()).expect("confirmed");
            if let Ok(reply) = self.command_when_idle(node, Command::EjectWithPopt { payment: pid, evidence, cert }) {
                self.broadcast_reply(u, reply);
                any = true;
            }
        }
        any
    }

    fn recover_deposits(&mut self, u: User, tried: &mut BTreeSet<(OutPoint, TxId)>) -> bool {
        let node = self.primary(u);
        let core = self.enclave(node).core.clone();
        let payout = self.users[u as usize].address();
        let mut any = false;
        for (o, d) in &core.deposits {
            let DepositStatus::Associated(cid) = d.status else { continue };
            if core.channels.contains_key(&cid) || !self.ledger.is_unspent(o) {
                continue;
            }
            let Some(records) = core.settlements.get(&cid) else { continue };
            let candidates: Vec<Transaction> = self
                .ledger
                .confirmed_txs()
                .filter(|t| records.iter().any(|r| t.prevouts().any(|p| r.prevouts.contains(p))))
                .cloned()
                .collect();
            for evidence in candidates {
                if !tried.insert((*o, evidence.txid())) {
                    continue;
                }
                let cert = self.ledger.certify(&evidence.txid()).expect("confirmed");
                let cmd = Command::RecoverDeposit { outpoint: *o, payout: payout.clone(), evidence, cert };
                if let Ok(reply) = self.command_when_idle(node, cmd) {
                    self.broadcast_reply(u, reply);
                    any = true;
                    break;
                }
            }
        }
        any
    }

    /// Ends a run: releases held traffic if the adversary must, lets every
    /// honest user reclaim, mirrors the reclaim in the ideal world and
    /// compares ledger balances. With `exact` the ledger must match the
    /// oracle's prediction to the unit.
    pub fn finish(&mut self, exact: bool) -> Verdict {
        if self.adversary.eventual_release {
            self.release_held();
            self.release_withheld();
        }
        self.deliver_all();
        let honest: Vec<User> = (0..self.users.len() as User).filter(|u| self.users[*u as usize].honest).collect();
        for &u in &honest {
            self.reclaim(u);
        }
        self.release_withheld();
        self.confirm_all();
        for &u in &honest {
            self.reclaim(u);
        }
        let mut users = Vec::new();
        let mut pass = true;
        for &u in &honest {
            for op in self.mirror.ideal.reclaim_all(u) {
                let r = self.mirror.ideal.apply(&op);
                self.mirror.call("reclaim", r);
            }
            let ideal = self.mirror.ideal.ledger.get(&u).copied().unwrap_or(0);
            let perceived = self.mirror.ideal.perceived_balance(u);
            let ledger = self.wallet_balance(u);
            let ok = ledger >= ideal && ideal as i128 == perceived && (!exact || ledger == ideal);
            pass &= ok;
            self.log(
                "verdict",
                None,
                format!("{} ledger={ledger} ideal={ideal} perceived={perceived} ok={ok}", self.users[u as usize].name),
            );
            users.push(UserOutcome { name: self.users[u as usize].name.clone(), honest: true, ledger, ideal, perceived });
        }
        if self.invariant_violations() > 0 {
            self.mirror.diverge(format!("{} capacity violations", self.invariant_violations()));
        }
        let divergence = self.mirror.divergence.clone();
        Verdict { pass: pass && divergence.is_none(), divergence, users }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> Simulation {
        Simulation::new(SimConfig::default(), AdversaryConfig::default(), &[("alice".into(), 1_000, true), ("bob".into(), 1_000, true)])
    }

    #[test]
    fn channel_lifecycle_matches_ideal() {
        let mut s = two();
        let c = s.open_channel(0, 1).unwrap();
        s.deliver_all();
        assert!(s.channel(0, c).unwrap().is_open && s.channel(1, c).unwrap().is_open);
        s.fund_channel(0, 1, c, 100, None).unwrap();
        s.fund_channel(1, 0, c, 50, None).unwrap();
        s.pay(0, c, 30).unwrap();
        s.pay(1, c, 5).unwrap();
        s.deliver_all();
        assert_eq!(s.channel(0, c).unwrap().my_bal, 75);
        assert_eq!(s.channel(1, c).unwrap().my_bal, 75);
        s.settle(0, c, true).unwrap();
        s.confirm_all();
        let v = s.finish(true);
        assert!(v.pass, "{v:?}");
        assert_eq!(s.wallet_balance(0), 975);
        assert_eq!(s.wallet_balance(1), 1_025);
    }

    #[test]
    fn neutral_close_needs_no_settlement() {
        let mut s = two();
        let c = s.open_channel(0, 1).unwrap();
        s.deliver_all();
        s.fund_channel(0, 1, c, 100, None).unwrap();
        s.pay(0, c, 10).unwrap();
        s.deliver_all();
        s.pay(1, c, 10).unwrap();
        s.deliver_all();
        let before = s.ledger.height();
        assert!(s.settle(0, c, false).unwrap().is_empty());
        s.deliver_all();
        assert!(s.channel(0, c).is_none() && s.channel(1, c).is_none());
        assert_eq!(s.ledger.height(), before);
        let v = s.finish(true);
        assert!(v.pass, "{v:?}");
    }

    #[test]
    fn replayed_paid_message_is_stale() {
        let mut s = two();
        let c = s.open_channel(0, 1).unwrap();
        s.deliver_all();
        s.fund_channel(0, 1, c, 100, None).unwrap();
        let mark = s.wire.len();
        s.pay(0, c, 7).unwrap();
        s.deliver_all();
        let paid = s.wire[mark].clone();
        s.inject(paid);
        s.deliver_all();
        assert_eq!(s.channel(1, c).unwrap().my_bal, 7);
        assert!(s.finish(true).pass);
    }

    #[test]
    fn measured_costs_match_formulas() {
        use num_rational::Rational64;
        let mut s = two();
        s.add_backup(0).unwrap();
        s.add_backup(0).unwrap();
        s.add_backup(1).unwrap();
        s.add_backup(1).unwrap();
        let bilateral = s.open_channel(0, 1).unwrap();
        s.deliver_all();
        s.fund_channel(0, 1, bilateral, 100, Some((2, 3))).unwrap();
        s.pay(0, bilateral, 10).unwrap();
        s.deliver_all();
        s.pay(1, bilateral, 10).unwrap();
        s.deliver_all();
        assert!(s.settle(0, bilateral, false).unwrap().is_empty());
        s.deliver_all();
        let unilateral = s.open_channel(0, 1).unwrap();
        s.deliver_all();
        s.fund_channel(0, 1, unilateral, 100, Some((2, 3))).unwrap();
        s.fund_channel(1, 0, unilateral, 100, Some((1, 2))).unwrap();
        s.pay(0, unilateral, 30).unwrap();
        s.deliver_all();
        assert_eq!(s.settle(0, unilateral, true).unwrap().len(), 1);
        s.confirm_all();
        let report = s.cost_report(&Params::default());
        let b = &report.channels[0];
        assert_eq!((b.unilateral, b.txs, b.cost), (false, 1, Rational64::new(5, 2)));
        assert_eq!(b.formula.unwrap().cost, b.cost);
        let u = &report.channels[1];
        assert_eq!((u.unilateral, u.txs, u.cost), (true, 3, Rational64::new(1 + 1 + 2 + 1, 1) + Rational64::new(5, 2)));
        assert_eq!(u.formula.unwrap().cost, u.cost);
        let v = s.finish(true);
        assert!(v.pass, "{v:?}\n{}", s.trace_jsonl());
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = || {
            let mut s = two();
            let c = s.open_channel(0, 1).unwrap();
            s.deliver_all();
            s.fund_channel(0, 1, c, 40, None).unwrap();
            s.pay(0, c, 4).unwrap();
            s.finish(false);
            s.trace_jsonl()
        };
        assert_eq!(run(), run());
    }
}
