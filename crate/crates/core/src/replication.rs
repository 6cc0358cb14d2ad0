//! Chain replication of enclave state across committee members.
//!
//! The primary heads a chain of backups. A business handler's effects are
//! held until the whole chain has acknowledged the resulting state, so no
//! peer observes an update that a backup could later contradict. Once any
//! member is asked to reveal or act on its replica the chain freezes and the
//! primary stops accepting updates: a frozen replica can never be outrun by
//! newer primary state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, KeyPair, PublicKey, Signature};
use crate::encoding::{decode, encode};
use crate::ledger::{Address, OutPoint, Transaction, TxId};
use crate::program::{ChannelId, Ctx};
use crate::program::{Core, DepositStatus, Event, Message, Output, ProgramError, Reply, Teechain, PROGRAM_NAME};
use crate::tee::{attest_verify, ProgramId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum ReplicationError {
    #[error("a replicated update is outstanding")]
    Busy,
    #[error("replication chain is frozen")]
    ChainFrozen,
    #[error("chain tail already has a backup")]
    TailOccupied,
    #[error("attestation of backup failed")]
    AttestFailed,
    #[error("not a member of this chain or committee")]
    NotMember,
    #[error("requested transaction contradicts replicated state")]
    StateMismatch,
    #[error("no replica held")]
    NoReplica,
    #[error("enclave is not a backup")]
    NotBackup,
    #[error("unexpected replication message")]
    Unexpected,
    #[error("insufficient balance across deposits")]
    InsufficientBalance,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub upstream: Option<PublicKey>,
    pub downstream: Option<PublicKey>,
    /// Identity of the chain's primary, as seen by a backup.
    pub head: Option<PublicKey>,
    pub frozen: bool,
    pub version: u64,
    /// Last state acknowledged by this backup.
    pub replica: Option<(u64, Vec<u8>)>,
    /// State forwarded downstream but not yet acknowledged.
    pub forwarding: Option<(u64, Vec<u8>)>,
    pub pending_backup: Option<PublicKey>,
}

/// Effects of a primary handler held until the chain acknowledges them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pending {
    pub version: u64,
    pub snapshot: Core,
    pub outbox: Vec<(PublicKey, u64, Message)>,
    pub events: Vec<Event>,
    pub reply: Result<Reply, ProgramError>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicationMsg {
    AddBackup { head: PublicKey, version: u64, replica: Vec<u8> },
    BackupAck,
    BackupNack { reason: String },
    StateUpdate { version: u64, replica: Vec<u8> },
    StateAck { version: u64 },
    Freeze,
}

fn rep(msg: ReplicationMsg) -> Message {
    Message::Replication(msg)
}

fn release_digest(txid: &TxId) -> crypto::Digest {
    crypto::hash_value(&("teechain-release", txid))
}

/// Primary's statement that `txid` releases one of its free deposits.
pub fn release_authorization(identity: &KeyPair, txid: &TxId) -> Signature {
    crypto::sign(&identity.secret, &release_digest(txid))
}

pub fn verify_release_authorization(primary: &PublicKey, txid: &TxId, sig: &Signature) -> bool {
    crypto::verify(primary, &release_digest(txid), sig)
}

/// One deposit's contribution to a payment plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositSlice {
    pub outpoint: OutPoint,
    pub committee: Vec<PublicKey>,
    pub available: u64,
}

/// A single replicated update covering every deposit of one committee.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedUpdate {
    pub committee: Vec<PublicKey>,
    pub amount: u64,
    pub deposits: Vec<OutPoint>,
}

/// Splits `amount` greedily across deposits in order, grouping deposits
/// that share a committee into one update per committee.
pub fn batch_update_for_payment(slices: &[DepositSlice], amount: u64) -> Result<Vec<PlannedUpdate>, ReplicationError> {
    let mut remaining = amount;
    let mut plan: Vec<PlannedUpdate> = Vec::new();
    for s in slices {
        if remaining == 0 {
            break;
        }
        let take = s.available.min(remaining);
        if take == 0 {
            continue;
        }
        remaining -= take;
        match plan.iter_mut().find(|u| u.committee == s.committee) {
            Some(u) => {
                u.amount += take;
                u.deposits.push(s.outpoint);
            }
            None => plan.push(PlannedUpdate { committee: s.committee.clone(), amount: take, deposits: vec![s.outpoint] }),
        }
    }
    if remaining > 0 {
        return Err(ReplicationError::InsufficientBalance);
    }
    Ok(plan)
}

impl Teechain {
    pub(crate) fn assign_backup(
        &mut self,
        backup: PublicKey,
        quote: Vec<u8>,
        quote_sig: Signature,
        nonce: [u8; 32],
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        let chain = &self.local.chain;
        if chain.downstream.is_some() || chain.pending_backup.is_some() {
            return Err(ReplicationError::TailOccupied.into());
        }
        if chain.frozen {
            return Err(ReplicationError::ChainFrozen.into());
        }
        let attested = attest_verify(&ProgramId::of(PROGRAM_NAME), &quote, &quote_sig, &backup)
            && decode::<Output>(&quote).is_ok_and(|o| o.reply == Ok(Reply::Attested { nonce, identity: backup }));
        if !attested {
            return Err(ReplicationError::AttestFailed.into());
        }
        if !self.local.sessions.contains_key(&backup) {
            return Err(ProgramError::NoSession);
        }
        let (head, version, replica) = match chain.upstream {
            None => (self.identity(), chain.version, encode(&self.core)),
            Some(_) => {
                let (v, bytes) = chain.replica.clone().ok_or(ReplicationError::NoReplica)?;
                (chain.head.expect("backups know their head"), v, bytes)
            }
        };
        self.local.chain.pending_backup = Some(backup);
        ctx.send(backup, 0, rep(ReplicationMsg::AddBackup { head, version, replica }));
        Ok(Reply::Done)
    }

    pub(crate) fn read_replica(&mut self, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if self.local.chain.upstream.is_none() {
            return Err(ReplicationError::NotBackup.into());
        }
        let (version, bytes) = self.local.chain.replica.clone().ok_or(ReplicationError::NoReplica)?;
        let state: Core = decode(&bytes).map_err(|e| ProgramError::Malformed(e.to_string()))?;
        self.freeze(None, ctx)?;
        // The frozen replica becomes this member's state; it can only settle.
        self.core = state;
        Ok(Reply::Replica { version, digest: crypto::hash(&bytes) })
    }

    /// Freezes this member and floods the freeze along the chain. A primary
    /// with an outstanding update abandons it.
    pub(crate) fn freeze(&mut self, from: Option<PublicKey>, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if self.local.chain.frozen {
            return Ok(Reply::Done);
        }
        self.local.chain.frozen = true;
        self.local.chain.forwarding = None;
        ctx.emit(Event::ChainFrozen);
        if let Some(p) = self.pending.take() {
            self.core = p.snapshot;
            ctx.emit(Event::PendingDiscarded { version: p.version });
        }
        let chain = &self.local.chain;
        for n in [chain.upstream, chain.downstream].into_iter().flatten() {
            if Some(n) != from {
                ctx.send(n, 0, rep(ReplicationMsg::Freeze));
            }
        }
        Ok(Reply::Done)
    }

    /// The state this member vouches for: its own core at the primary, the
    /// acknowledged replica at a backup.
    fn vouched_state(&self) -> Result<Core, ProgramError> {
        if self.local.chain.upstream.is_none() {
            return Ok(self.core.clone());
        }
        let (_, bytes) = self.local.chain.replica.as_ref().ok_or(ReplicationError::NoReplica)?;
        decode(bytes).map_err(|e| ProgramError::Malformed(e.to_string()))
    }

    /// Signs the inputs of `tx` this member holds keys for, provided the
    /// transaction is consistent with the vouched-for state.
    pub(crate) fn committee_sign(
        &mut self,
        mut tx: Transaction,
        authorization: Option<Signature>,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        self.committee_sign_with(&mut tx, authorization.as_ref(), ctx)?;
        Ok(Reply::Transaction(tx))
    }

    pub(crate) fn committee_sign_with(
        &mut self,
        tx: &mut Transaction,
        authorization: Option<&Signature>,
        ctx: &mut Ctx,
    ) -> Result<(), ProgramError> {
        let state = self.vouched_state()?;
        let primary = self.local.chain.head.unwrap_or(self.identity());
        let txid = tx.txid();
        let inputs: Vec<OutPoint> = tx.prevouts().copied().collect();
        let channel_of = |o: &OutPoint| -> Option<ChannelId> {
            state.channels.values().find(|c| c.my_deps.contains_key(o) || c.remote_deps.contains_key(o)).map(|c| c.id)
        };
        let mut addresses: BTreeMap<OutPoint, Address> = BTreeMap::new();
        let mut settles_channel = false;
        for o in &inputs {
            let (address, channel) = if let Some(d) = state.deposits.get(o) {
                match d.status {
                    DepositStatus::Free => {
                        if !authorization.is_some_and(|s| verify_release_authorization(&primary, &txid, s)) {
                            return Err(ReplicationError::StateMismatch.into());
                        }
                        (d.info.address.clone(), None)
                    }
                    DepositStatus::Released(t) if t == txid => (d.info.address.clone(), None),
                    DepositStatus::Released(_) => return Err(ReplicationError::StateMismatch.into()),
                    DepositStatus::Associated(c) => (d.info.address.clone(), Some(c)),
                }
            } else if let Some(c) = channel_of(o) {
                (state.channels[&c].address_of(o).expect("found above"), Some(c))
            } else {
                continue;
            };
            if let Some(cid) = channel {
                let c = state.channels.get(&cid).ok_or(ReplicationError::StateMismatch)?;
                let foreign = inputs.iter().any(|i| {
                    let known = state.deposits.contains_key(i) || channel_of(i).is_some();
                    known && !c.my_deps.contains_key(i) && !c.remote_deps.contains_key(i)
                });
                let diss: u64 = c.dissociating.iter().filter(|d| inputs.contains(d)).map(|d| c.my_deps[d].amount).sum();
                let mine_ok = tx.paid_to(&c.my_addr) >= c.my_bal + diss;
                // Whichever deposit is spent, the peer's balance is owed out of it.
                let remote_ok = tx.paid_to(&c.remote_addr) >= c.remote_bal;
                if c.lock.is_some() || foreign || !mine_ok || !remote_ok {
                    return Err(ReplicationError::StateMismatch.into());
                }
                settles_channel = true;
            }
            addresses.insert(*o, address);
        }
        let before: usize = tx.inputs.iter().map(|i| i.witnesses.len()).sum();
        for (o, addr) in &addresses {
            for k in addr.keys() {
                let secret = self.local.member_keys.get(k).or_else(|| state.keys.get(k));
                if let Some(sk) = secret {
                    let kp = KeyPair { public: *k, secret: sk.clone() };
                    tx.sign_inputs_for(|p| (p == o).then(|| addr.clone()), &kp);
                }
            }
        }
        let after: usize = tx.inputs.iter().map(|i| i.witnesses.len()).sum();
        if after == before
            && addresses.values().all(|a| !a.keys().iter().any(|k| self.local.member_keys.contains_key(k) || state.keys.contains_key(k)))
        {
            return Err(ReplicationError::NotMember.into());
        }
        if settles_channel && (self.local.chain.upstream.is_some() || self.local.chain.downstream.is_some()) {
            self.freeze(None, ctx)?;
        }
        Ok(())
    }

    pub(crate) fn on_replication_msg(&mut self, from: PublicKey, msg: ReplicationMsg, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        match msg {
            ReplicationMsg::AddBackup { head, version, replica } => {
                let chain = &self.local.chain;
                if chain.upstream.is_some() || chain.downstream.is_some() || chain.frozen {
                    ctx.send(from, 0, rep(ReplicationMsg::BackupNack { reason: "already chained".into() }));
                    return Ok(Reply::Done);
                }
                self.local.chain.upstream = Some(from);
                self.local.chain.head = Some(head);
                self.local.chain.version = version;
                self.local.chain.replica = Some((version, replica));
                ctx.emit(Event::JoinedChain { upstream: from });
                ctx.send(from, 0, rep(ReplicationMsg::BackupAck));
                Ok(Reply::Done)
            }
            ReplicationMsg::BackupAck => {
                if self.local.chain.pending_backup != Some(from) {
                    return Err(ReplicationError::Unexpected.into());
                }
                self.local.chain.pending_backup = None;
                self.local.chain.downstream = Some(from);
                ctx.emit(Event::BackupAssigned { backup: from });
                Ok(Reply::Done)
            }
            ReplicationMsg::BackupNack { reason } => {
                if self.local.chain.pending_backup != Some(from) {
                    return Err(ReplicationError::Unexpected.into());
                }
                self.local.chain.pending_backup = None;
                ctx.emit(Event::BackupRejected { backup: from, reason });
                Ok(Reply::Done)
            }
            ReplicationMsg::StateUpdate { version, replica } => {
                if self.local.chain.upstream != Some(from) {
                    return Err(ReplicationError::NotMember.into());
                }
                if self.local.chain.frozen {
                    return Err(ReplicationError::ChainFrozen.into());
                }
                match self.local.chain.downstream {
                    Some(down) => {
                        self.local.chain.forwarding = Some((version, replica.clone()));
                        ctx.send(down, 0, rep(ReplicationMsg::StateUpdate { version, replica }));
                    }
                    None => {
                        self.local.chain.version = version;
                        self.local.chain.replica = Some((version, replica));
                        ctx.emit(Event::ReplicaApplied { version });
                        ctx.send(from, 0, rep(ReplicationMsg::StateAck { version }));
                    }
                }
                Ok(Reply::Done)
            }
            ReplicationMsg::StateAck { version } => {
                if self.local.chain.downstream != Some(from) {
                    return Err(ReplicationError::NotMember.into());
                }
                match self.local.chain.upstream {
                    None => match self.pending.take() {
                        Some(p) if p.version == version => {
                            ctx.emit(Event::ReplicaApplied { version });
                            self.release_pending(*p, ctx)
                        }
                        other => {
                            self.pending = other;
                            Err(ReplicationError::Unexpected.into())
                        }
                    },
                    Some(up) => match self.local.chain.forwarding.take() {
                        Some((v, bytes)) if v == version => {
                            self.local.chain.version = v;
                            self.local.chain.replica = Some((v, bytes));
                            ctx.emit(Event::ReplicaApplied { version });
                            ctx.send(up, 0, rep(ReplicationMsg::StateAck { version }));
                            Ok(Reply::Done)
                        }
                        other => {
                            self.local.chain.forwarding = other;
                            Err(ReplicationError::Unexpected.into())
                        }
                    },
                }
            }
            ReplicationMsg::Freeze => {
                let chain = &self.local.chain;
                if chain.upstream != Some(from) && chain.downstream != Some(from) {
                    return Err(ReplicationError::NotMember.into());
                }
                self.freeze(Some(from), ctx)
            }
        }
    }
}
