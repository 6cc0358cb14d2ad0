//! The enclave program: state layout, wire format and command dispatch.
//!
//! State is split in two. [`Core`] holds channels, deposits, shared keys and
//! multi-hop records; it is what committee members replicate and what is
//! rolled back when a handler fails or a replicated update is abandoned.
//! [`Local`] holds per-enclave material that must never be replicated:
//! sessions, committee member keys and the replication role.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, ChannelError, ChannelMsg, SettlementRecord};
use crate::crypto::{self, derive_seed, keygen, Handshake, Hello, KeyPair, PublicKey, SecretKey, SessionKey};
use crate::encoding::{decode, encode};
use crate::ledger::{Address, ConfirmationCert, OutPoint, PaymentId, Transaction, TxId};
use crate::multihop::{MultihopError, MultihopMsg, PathPayment, Route, Stage};
use crate::replication::{ChainState, Pending, ReplicationError, ReplicationMsg};
use crate::tee::Program;

pub const PROGRAM_NAME: &str = "teechain-enclave-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId(pub u64);

/// Boot parameters. The ledger key lets the enclave verify confirmation
/// certificates relayed by its untrusted host.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    pub ledger_key: PublicKey,
    pub min_confirmations: u64,
}

/// Deposit metadata shared with channel peers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositInfo {
    pub amount: u64,
    pub address: Address,
    /// Identities of the enclaves holding the address keys; empty for an
    /// unreplicated 1-of-1 deposit whose key is shared with the channel peer.
    pub committee: Vec<PublicKey>,
}

impl DepositInfo {
    pub fn is_committee(&self) -> bool {
        !self.committee.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepositStatus {
    Free,
    Associated(ChannelId),
    Released(TxId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deposit {
    pub info: DepositInfo,
    pub status: DepositStatus,
}

/// Replicated protocol state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Core {
    pub key_counter: u64,
    /// Keys of 1-of-1 deposit addresses: our own and those shared by peers.
    pub keys: BTreeMap<PublicKey, SecretKey>,
    pub deposits: BTreeMap<OutPoint, Deposit>,
    /// Remote deposits we approved, per remote enclave.
    pub approved_theirs: BTreeMap<PublicKey, BTreeMap<OutPoint, DepositInfo>>,
    /// Our deposits each remote enclave approved.
    pub approved_mine: BTreeMap<PublicKey, BTreeSet<OutPoint>>,
    /// Approval requests awaiting a ledger check by our host.
    pub approval_requests: BTreeMap<PublicKey, BTreeMap<OutPoint, DepositInfo>>,
    pub channels: BTreeMap<ChannelId, Channel>,
    /// Acks that arrived before our own open command: (their addr, our addr).
    pub early_acks: BTreeMap<ChannelId, (PublicKey, Address, Address)>,
    pub payments: BTreeMap<(PaymentId, u32), PathPayment>,
    pub payment_counter: u64,
    /// Settlements produced per channel, kept for deposit recovery.
    pub settlements: BTreeMap<ChannelId, Vec<SettlementRecord>>,
}

impl Core {
    pub fn capacity_holds(c: &Channel) -> bool {
        c.capacity_holds()
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Session {
    pub key: SessionKey,
    pub send_seq: u64,
    pub recv_seq: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub steps: u64,
    pub invariant_violations: u64,
}

/// Non-replicated enclave state.
#[derive(Clone, Serialize, Deserialize)]
pub struct Local {
    pub identity: KeyPair,
    pub config: Config,
    pub entropy_counter: u64,
    pub sessions: BTreeMap<PublicKey, Session>,
    pub handshakes: BTreeMap<PublicKey, Handshake>,
    pub member_keys: BTreeMap<PublicKey, SecretKey>,
    pub chain: ChainState,
    pub stats: Stats,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Teechain {
    pub core: Core,
    pub local: Local,
    pub pending: Option<Box<Pending>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Hello(Hello),
    Sealed { context: u64, seq: u64, ciphertext: Vec<u8> },
}

/// Bytes on the wire between two enclaves, relayed by untrusted hosts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: PublicKey,
    pub to: PublicKey,
    pub body: Body,
}

impl Envelope {
    pub fn seq(&self) -> Option<u64> {
        match &self.body {
            Body::Sealed { seq, .. } => Some(*seq),
            Body::Hello(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Channel(ChannelMsg),
    Multihop(MultihopMsg),
    Replication(ReplicationMsg),
}

fn wire_ad(context: u64, from: &PublicKey, to: &PublicKey, seq: u64) -> Vec<u8> {
    encode(&("teechain-wire", context, from, to, seq))
}

fn wire_nonce(from: &PublicKey, to: &PublicKey, seq: u64) -> [u8; 12] {
    let h = crypto::hash_value(&("teechain-wire-nonce", from, to, seq));
    h[..12].try_into().expect("slice of 12")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    /// Establish an authenticated session with another enclave.
    Connect {
        peer: PublicKey,
    },
    Deliver {
        envelope: Envelope,
    },
    /// Fresh key for a 1-of-1 deposit address.
    NewAddress,
    /// Fresh key for this enclave's seat in a deposit committee.
    NewMemberKey,
    OpenChannel {
        channel: ChannelId,
        peer: PublicKey,
        my_addr: Address,
        remote_addr: Address,
    },
    NewDeposit {
        tx: Transaction,
        index: u32,
        committee: Vec<PublicKey>,
    },
    ReleaseDeposit {
        outpoint: OutPoint,
        payout: Address,
    },
    ApproveMyDeposit {
        peer: PublicKey,
        outpoint: OutPoint,
    },
    ApproveTheirDeposit {
        peer: PublicKey,
        tx: Transaction,
        index: u32,
        cert: ConfirmationCert,
    },
    Associate {
        channel: ChannelId,
        outpoint: OutPoint,
    },
    Dissociate {
        channel: ChannelId,
        outpoint: OutPoint,
    },
    Pay {
        channel: ChannelId,
        amount: u64,
    },
    Settle {
        channel: ChannelId,
    },
    /// Reclaims a dissociating deposit whose settlement was conflicted by a
    /// confirmed transaction that left it unspent.
    RecoverDeposit {
        outpoint: OutPoint,
        payout: Address,
        evidence: Transaction,
        cert: ConfirmationCert,
    },
    PayMultihop {
        route: Route,
        amount: u64,
    },
    Eject {
        payment: PaymentId,
    },
    EjectWithPopt {
        payment: PaymentId,
        evidence: Transaction,
        cert: ConfirmationCert,
    },
    Attest {
        nonce: [u8; 32],
    },
    AssignBackup {
        backup: PublicKey,
        quote: Vec<u8>,
        quote_sig: crypto::Signature,
        nonce: [u8; 32],
    },
    ReadReplica,
    Freeze,
    /// Committee member co-signature; `authorization` is the primary's
    /// release statement for deposits the replica still shows as free.
    CommitteeSign {
        tx: Transaction,
        authorization: Option<crypto::Signature>,
    },
}

impl Command {
    /// Commands that operate on the replication machinery itself and may run
    /// while a replicated update is outstanding.
    fn is_control(&self) -> bool {
        matches!(self, Command::Attest { .. } | Command::ReadReplica | Command::Freeze | Command::CommitteeSign { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reply {
    Done,
    /// Held until the backup chain acknowledges the resulting state.
    Pending,
    Address(PublicKey),
    Transaction(Transaction),
    /// Release transaction plus this enclave's authorization for committee
    /// members whose replica may predate the release.
    Release {
        tx: Transaction,
        authorization: crypto::Signature,
    },
    Transactions(Vec<Transaction>),
    Payment(PaymentId),
    /// A backup's frozen state, identified by version and digest; the
    /// state itself never leaves the enclave.
    Replica {
        version: u64,
        digest: crypto::Digest,
    },
    Attested {
        nonce: [u8; 32],
        identity: PublicKey,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    SessionEstablished { peer: PublicKey },
    ChannelRequested { channel: ChannelId, peer: PublicKey },
    ChannelOpened { channel: ChannelId },
    DepositRegistered { outpoint: OutPoint, amount: u64 },
    DepositReleased { outpoint: OutPoint, amount: u64, txid: TxId },
    DepositApprovedByPeer { peer: PublicKey, outpoint: OutPoint },
    ApprovalRequested { peer: PublicKey, outpoint: OutPoint },
    Associated { channel: ChannelId, outpoint: OutPoint, amount: u64 },
    AssociationAccepted { channel: ChannelId, outpoint: OutPoint, amount: u64 },
    DissociateRequested { channel: ChannelId, outpoint: OutPoint, amount: u64 },
    DissociateAccepted { channel: ChannelId, outpoint: OutPoint },
    DissociateAcked { channel: ChannelId, outpoint: OutPoint },
    DissociateCompleted { channel: ChannelId, outpoint: OutPoint },
    PaymentSent { channel: ChannelId, index: u64, amount: u64 },
    PaymentReceived { channel: ChannelId, index: u64, amount: u64 },
    PaymentDropped { channel: ChannelId, index: u64, reason: String },
    Settled { channel: ChannelId, txid: Option<TxId> },
    NeutralCloseStarted { channel: ChannelId },
    ChannelClosed { channel: ChannelId },
    RemoteSettled { channel: ChannelId },
    DepositRecovered { outpoint: OutPoint, txid: TxId },
    MultihopStage { payment: PaymentId, position: u32, stage: Stage },
    MultihopCredit { payment: PaymentId, channel: ChannelId, amount: u64 },
    MultihopDebit { payment: PaymentId, channel: ChannelId, amount: u64 },
    Ejected { payment: PaymentId, position: u32, txids: Vec<TxId> },
    ReplicationStarted { version: u64 },
    ReplicaApplied { version: u64 },
    BackupAssigned { backup: PublicKey },
    BackupRejected { backup: PublicKey, reason: String },
    JoinedChain { upstream: PublicKey },
    ChainFrozen,
    PendingDiscarded { version: u64 },
    MessageRejected { from: PublicKey, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum ProgramError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Multihop(#[from] MultihopError),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
    #[error("network channel already exists")]
    AlreadyExists,
    #[error("no network channel with peer")]
    NoSession,
    #[error("stale or replayed sequence number")]
    StaleSequence,
    #[error("sequence number from the future; retry after predecessors")]
    OutOfOrder,
    #[error("message failed authentication")]
    Authentication,
    #[error("message not addressed to this enclave")]
    Misrouted,
    #[error("malformed input: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Output {
    pub messages: Vec<Envelope>,
    pub reply: Result<Reply, ProgramError>,
    pub events: Vec<Event>,
}

/// Side effects collected while a handler runs.
#[derive(Default)]
pub(crate) struct Ctx {
    pub outbox: Vec<(PublicKey, u64, Message)>,
    pub events: Vec<Event>,
    /// Envelopes that bypass the outbox (handshakes, replication traffic).
    pub direct: Vec<Envelope>,
}

impl Ctx {
    pub fn send(&mut self, to: PublicKey, context: u64, msg: Message) {
        self.outbox.push((to, context, msg));
    }

    pub fn emit(&mut self, e: Event) {
        self.events.push(e);
    }
}

impl Program for Teechain {
    const NAME: &'static str = PROGRAM_NAME;

    fn boot(identity: KeyPair, init: &[u8]) -> Result<Self, String> {
        let config: Config = decode(init).map_err(|e| e.to_string())?;
        Ok(Teechain {
            core: Core::default(),
            local: Local {
                identity,
                config,
                entropy_counter: 0,
                sessions: BTreeMap::new(),
                handshakes: BTreeMap::new(),
                member_keys: BTreeMap::new(),
                chain: ChainState::default(),
                stats: Stats::default(),
            },
            pending: None,
        })
    }

    fn step(&mut self, input: &[u8]) -> Vec<u8> {
        let out = match decode::<Command>(input) {
            Ok(cmd) => self.execute(cmd),
            Err(e) => Output { messages: vec![], reply: Err(ProgramError::Malformed(e.to_string())), events: vec![] },
        };
        self.local.stats.steps += 1;
        self.check_invariants();
        encode(&out)
    }

    fn frozen(&self) -> bool {
        self.local.chain.frozen
    }
}

impl Teechain {
    pub fn identity(&self) -> PublicKey {
        self.local.identity.public
    }

    pub fn stats(&self) -> &Stats {
        &self.local.stats
    }

    pub fn channel(&self, id: ChannelId) -> Option<&Channel> {
        self.core.channels.get(&id)
    }

    pub fn has_session(&self, peer: &PublicKey) -> bool {
        self.local.sessions.contains_key(peer)
    }

    fn check_invariants(&mut self) {
        let bad = self.core.channels.values().filter(|c| !c.capacity_holds()).count() as u64;
        self.local.stats.invariant_violations += bad;
    }

    pub(crate) fn fresh_entropy(&mut self, label: &str) -> [u8; 32] {
        self.local.entropy_counter += 1;
        derive_seed(self.local.identity.secret.as_bytes(), label, self.local.entropy_counter)
    }

    pub(crate) fn fresh_deposit_key(&mut self) -> KeyPair {
        self.core.key_counter += 1;
        keygen(derive_seed(self.local.identity.secret.as_bytes(), "deposit-key", self.core.key_counter))
    }

    /// Key able to sign for `pk`, from either replicated or member storage.
    pub(crate) fn secret_for(&self, pk: &PublicKey) -> Option<KeyPair> {
        self.core.keys.get(pk).or_else(|| self.local.member_keys.get(pk)).map(|s| KeyPair { public: *pk, secret: s.clone() })
    }

    /// Signs every input of `tx` whose address includes a key we hold.
    pub(crate) fn sign_with_held_keys(&self, tx: &mut Transaction, address_of: impl Fn(&OutPoint) -> Option<Address>) {
        let prevouts: Vec<OutPoint> = tx.prevouts().copied().collect();
        for p in prevouts {
            let Some(addr) = address_of(&p) else { continue };
            for k in addr.keys() {
                if let Some(kp) = self.secret_for(k) {
                    tx.sign_inputs_for(|q| (*q == p).then(|| addr.clone()), &kp);
                }
            }
        }
    }

    fn execute(&mut self, cmd: Command) -> Output {
        let mut ctx = Ctx::default();
        let is_control = cmd.is_control();
        if let Command::Deliver { envelope } = cmd {
            return self.execute_delivery(envelope);
        }
        if !is_control && self.pending.is_some() {
            return Output { messages: vec![], reply: Err(ReplicationError::Busy.into()), events: vec![] };
        }
        let snapshot = self.core.clone();
        let reply = self.dispatch(cmd, &mut ctx);
        self.finish(snapshot, reply, ctx, !is_control)
    }

    fn dispatch(&mut self, cmd: Command, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        match cmd {
            Command::Connect { peer } => self.connect(peer, ctx),
            Command::Deliver { .. } => unreachable!("handled by execute_delivery"),
            Command::NewAddress => {
                let kp = self.fresh_deposit_key();
                self.core.keys.insert(kp.public, kp.secret);
                Ok(Reply::Address(kp.public))
            }
            Command::NewMemberKey => {
                let seed = self.fresh_entropy("member-key");
                let kp = keygen(seed);
                self.local.member_keys.insert(kp.public, kp.secret);
                Ok(Reply::Address(kp.public))
            }
            Command::OpenChannel { channel, peer, my_addr, remote_addr } => {
                self.ensure_not_frozen()?;
                self.open_channel(channel, peer, my_addr, remote_addr, ctx)
            }
            Command::NewDeposit { tx, index, committee } => self.new_deposit(tx, index, committee, ctx),
            Command::ReleaseDeposit { outpoint, payout } => self.release_deposit(outpoint, payout, ctx),
            Command::ApproveMyDeposit { peer, outpoint } => self.approve_my_deposit(peer, outpoint, ctx),
            Command::ApproveTheirDeposit { peer, tx, index, cert } => self.approve_their_deposit(peer, tx, index, cert, ctx),
            Command::Associate { channel, outpoint } => {
                self.ensure_not_frozen()?;
                self.associate(channel, outpoint, ctx)
            }
            Command::Dissociate { channel, outpoint } => {
                self.ensure_not_frozen()?;
                self.dissociate(channel, outpoint, ctx)
            }
            Command::Pay { channel, amount } => {
                self.ensure_not_frozen()?;
                self.pay(channel, amount, ctx)
            }
            Command::Settle { channel } => self.settle(channel, ctx),
            Command::RecoverDeposit { outpoint, payout, evidence, cert } => self.recover_deposit(outpoint, payout, evidence, cert, ctx),
            Command::PayMultihop { route, amount } => {
                self.ensure_not_frozen()?;
                self.pay_multihop(route, amount, ctx)
            }
            Command::Eject { payment } => self.eject(payment, ctx),
            Command::EjectWithPopt { payment, evidence, cert } => self.eject_with_popt(payment, evidence, cert, ctx),
            Command::Attest { nonce } => Ok(Reply::Attested { nonce, identity: self.identity() }),
            Command::AssignBackup { backup, quote, quote_sig, nonce } => self.assign_backup(backup, quote, quote_sig, nonce, ctx),
            Command::ReadReplica => self.read_replica(ctx),
            Command::Freeze => self.freeze(None, ctx),
            Command::CommitteeSign { tx, authorization } => self.committee_sign(tx, authorization, ctx),
        }
    }

    pub(crate) fn ensure_not_frozen(&self) -> Result<(), ProgramError> {
        if self.local.chain.frozen {
            Err(ReplicationError::ChainFrozen.into())
        } else {
            Ok(())
        }
    }

    /// Commits or rolls back a handler run and turns its outbox into
    /// envelopes, holding business effects back while the chain replicates.
    fn finish(&mut self, snapshot: Core, reply: Result<Reply, ProgramError>, mut ctx: Ctx, business: bool) -> Output {
        if reply.is_err() {
            self.core = snapshot;
            return Output { messages: ctx.direct, reply, events: Vec::new() };
        }
        if business && self.replicating() && self.core != snapshot {
            let version = self.local.chain.version + 1;
            self.local.chain.version = version;
            let downstream = self.local.chain.downstream.expect("replicating implies a backup");
            let update = ReplicationMsg::StateUpdate { version, replica: encode(&self.core) };
            let mut messages = ctx.direct;
            match self.seal(downstream, 0, &Message::Replication(update)) {
                Ok(env) => messages.push(env),
                Err(e) => {
                    self.core = snapshot;
                    return Output { messages, reply: Err(e), events: Vec::new() };
                }
            }
            self.pending = Some(Box::new(Pending { version, snapshot, outbox: ctx.outbox, events: ctx.events, reply }));
            return Output { messages, reply: Ok(Reply::Pending), events: vec![Event::ReplicationStarted { version }] };
        }
        let mut messages = ctx.direct;
        for (to, context, msg) in ctx.outbox {
            match self.seal(to, context, &msg) {
                Ok(env) => messages.push(env),
                Err(_) => ctx.events.push(Event::MessageRejected { from: to, reason: "no session for outgoing message".into() }),
            }
        }
        Output { messages, reply, events: ctx.events }
    }

    /// Releases effects held by a committed replicated update.
    pub(crate) fn release_pending(&mut self, pending: Pending, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        for (to, context, msg) in pending.outbox {
            match self.seal(to, context, &msg) {
                Ok(env) => ctx.direct.push(env),
                Err(_) => ctx.events.push(Event::MessageRejected { from: to, reason: "no session for outgoing message".into() }),
            }
        }
        ctx.events.extend(pending.events);
        pending.reply
    }

    pub(crate) fn seal(&mut self, to: PublicKey, context: u64, msg: &Message) -> Result<Envelope, ProgramError> {
        let me = self.identity();
        let session = self.local.sessions.get_mut(&to).ok_or(ProgramError::NoSession)?;
        session.send_seq += 1;
        let seq = session.send_seq;
        let ciphertext = session.key.seal(wire_nonce(&me, &to, seq), &wire_ad(context, &me, &to, seq), &encode(msg));
        Ok(Envelope { from: me, to, body: Body::Sealed { context, seq, ciphertext } })
    }

    fn connect(&mut self, peer: PublicKey, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if self.local.sessions.contains_key(&peer) || self.local.handshakes.contains_key(&peer) {
            return Err(ProgramError::AlreadyExists);
        }
        if peer == self.identity() {
            return Err(ProgramError::Malformed("cannot connect to self".into()));
        }
        let entropy = self.fresh_entropy("handshake");
        let (hs, hello) = Handshake::start(&self.local.identity, peer, entropy);
        self.local.handshakes.insert(peer, hs);
        ctx.direct.push(Envelope { from: self.identity(), to: peer, body: Body::Hello(hello) });
        Ok(Reply::Done)
    }

    fn on_hello(&mut self, hello: Hello, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let peer = hello.identity;
        if self.local.sessions.contains_key(&peer) {
            return Err(ProgramError::AlreadyExists);
        }
        let hs = match self.local.handshakes.get(&peer) {
            Some(hs) => hs.clone(),
            None => {
                let entropy = self.fresh_entropy("handshake");
                let (hs, reply) = Handshake::start(&self.local.identity, peer, entropy);
                ctx.direct.push(Envelope { from: self.identity(), to: peer, body: Body::Hello(reply) });
                hs
            }
        };
        let key = hs.finish(&hello).map_err(|_| ProgramError::Authentication)?;
        self.local.handshakes.remove(&peer);
        self.local.sessions.insert(peer, Session { key, send_seq: 0, recv_seq: 0 });
        ctx.emit(Event::SessionEstablished { peer });
        Ok(Reply::Done)
    }

    /// Authenticates and decrypts without consuming the sequence number.
    fn open(&self, env: &Envelope) -> Result<(u64, u64, Message), ProgramError> {
        let Body::Sealed { context, seq, ciphertext } = &env.body else { unreachable!("hello handled separately") };
        let session = self.local.sessions.get(&env.from).ok_or(ProgramError::NoSession)?;
        if *seq <= session.recv_seq {
            return Err(ProgramError::StaleSequence);
        }
        if *seq > session.recv_seq + 1 {
            return Err(ProgramError::OutOfOrder);
        }
        let me = self.identity();
        let plain = session
            .key
            .open(wire_nonce(&env.from, &me, *seq), &wire_ad(*context, &env.from, &me, *seq), ciphertext)
            .map_err(|_| ProgramError::Authentication)?;
        let msg = decode::<Message>(&plain).map_err(|e| ProgramError::Malformed(e.to_string()))?;
        Ok((*context, *seq, msg))
    }

    fn execute_delivery(&mut self, env: Envelope) -> Output {
        let mut ctx = Ctx::default();
        if env.to != self.identity() {
            return Output { messages: vec![], reply: Err(ProgramError::Misrouted), events: vec![] };
        }
        if let Body::Hello(hello) = env.body {
            let reply = self.on_hello(hello, &mut ctx);
            return Output { messages: ctx.direct, reply, events: ctx.events };
        }
        let (context, seq, msg) = match self.open(&env) {
            Ok(x) => x,
            Err(e) => return Output { messages: vec![], reply: Err(e), events: vec![] },
        };
        let control = matches!(msg, Message::Replication(_));
        if !control && self.pending.is_some() {
            return Output { messages: vec![], reply: Err(ReplicationError::Busy.into()), events: vec![] };
        }
        self.local.sessions.get_mut(&env.from).expect("opened above").recv_seq = seq;
        let snapshot = self.core.clone();
        let from = env.from;
        let reply = match msg {
            Message::Channel(m) => {
                if self.local.chain.frozen {
                    Err(ReplicationError::ChainFrozen.into())
                } else {
                    self.on_channel_msg(from, context, m, &mut ctx)
                }
            }
            Message::Multihop(m) => self.on_multihop_msg(from, m, &mut ctx),
            Message::Replication(m) => self.on_replication_msg(from, m, &mut ctx),
        };
        let reply = match reply {
            Err(e) => {
                ctx.events.clear();
                ctx.events.push(Event::MessageRejected { from, reason: e.to_string() });
                let mut out = self.finish(snapshot, Err(e), Ctx { direct: ctx.direct, ..Ctx::default() }, false);
                out.events = ctx.events;
                return out;
            }
            ok => ok,
        };
        self.finish(snapshot, reply, ctx, !control)
    }

    pub(crate) fn replicating(&self) -> bool {
        self.local.chain.upstream.is_none() && self.local.chain.downstream.is_some() && !self.local.chain.frozen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::Enclave;

    fn enclave(b: u8) -> Enclave<Teechain> {
        let cfg = Config { ledger_key: keygen([0; 32]).public, min_confirmations: 1 };
        Enclave::new([b; 32], &encode(&cfg)).unwrap()
    }

    fn run(e: &mut Enclave<Teechain>, cmd: Command) -> Output {
        decode(&e.resume(&encode(&cmd)).unwrap().0).unwrap()
    }

    fn pair() -> (Enclave<Teechain>, Enclave<Teechain>) {
        let mut a = enclave(1);
        let mut b = enclave(2);
        let out = run(&mut a, Command::Connect { peer: b.identity() });
        let hello_a = out.messages[0].clone();
        let out = run(&mut b, Command::Deliver { envelope: hello_a });
        let hello_b = out.messages[0].clone();
        run(&mut a, Command::Deliver { envelope: hello_b });
        (a, b)
    }

    #[test]
    fn sessions_agree_after_hello_exchange() {
        let (a, b) = pair();
        let ka = &a.inspect().local.sessions[&b.identity()].key;
        let kb = &b.inspect().local.sessions[&a.identity()].key;
        assert_eq!(ka, kb);
    }

    #[test]
    fn connect_twice_is_rejected() {
        let (mut a, b) = pair();
        assert_eq!(run(&mut a, Command::Connect { peer: b.identity() }).reply, Err(ProgramError::AlreadyExists));
    }

    #[test]
    fn garbage_input_is_rejected() {
        let mut a = enclave(1);
        let out: Output = decode(&a.resume(b"\xff\xff").unwrap().0).unwrap();
        assert!(matches!(out.reply, Err(ProgramError::Malformed(_))));
    }
}
