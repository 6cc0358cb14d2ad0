//! Two-party payment channels between enclaves.
//!
//! Each side keeps its own view of a channel. Payments are pipelined: the
//! payer debits before the payee credits, so at any moment each side's view
//! of the *other* party's balance is at least that party's own view. Both
//! views always satisfy
//! `my_bal + remote_bal + Σ dissociating == Σ my_deps + Σ remote_deps`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{PublicKey, SecretKey};
use crate::ledger::{Address, ConfirmationCert, OutPoint, Transaction, TxId, TxOut, TxTag};
use crate::program::{ChannelId, Ctx, Deposit, DepositInfo, DepositStatus, Event, Message, ProgramError, Reply, Teechain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum ChannelError {
    #[error("unknown channel")]
    UnknownChannel,
    #[error("channel id already in use")]
    DuplicateChannel,
    #[error("settlement addresses do not match")]
    AddressMismatch,
    #[error("channel is not open")]
    ChannelClosed,
    #[error("no key held for deposit address")]
    UnknownAddress,
    #[error("deposit already registered")]
    DuplicateDeposit,
    #[error("unknown deposit")]
    UnknownDeposit,
    #[error("deposit is not free")]
    DepositNotFree,
    #[error("deposit not confirmed on ledger")]
    NotConfirmedOnLedger,
    #[error("deposit already approved")]
    AlreadyApproved,
    #[error("deposit not approved by channel peer")]
    NotApproved,
    #[error("deposit is not free")]
    NotFree,
    #[error("insufficient channel balance")]
    InsufficientBalance,
    #[error("channel is locked by a multi-hop payment")]
    ChannelLocked,
    #[error("deposit not associated with channel")]
    NotAssociated,
    #[error("amount must be positive")]
    InvalidAmount,
    #[error("evidence does not show the settlement was conflicted")]
    InvalidEvidence,
    #[error("message from a party that is not the channel peer")]
    WrongPeer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub id: ChannelId,
    pub remote: PublicKey,
    pub my_addr: Address,
    pub remote_addr: Address,
    pub is_open: bool,
    pub my_bal: u64,
    pub remote_bal: u64,
    pub my_deps: BTreeMap<OutPoint, DepositInfo>,
    pub remote_deps: BTreeMap<OutPoint, DepositInfo>,
    /// Our deposits whose dissociation is awaiting the peer's ack. Still in
    /// `my_deps`; their amount is already removed from `my_bal`.
    pub dissociating: BTreeSet<OutPoint>,
    /// Peer deposits we released, awaiting the peer's final ack.
    pub remote_dissociating: BTreeSet<OutPoint>,
    pub lock: Option<crate::ledger::PaymentId>,
    pub closing: bool,
    pub remote_settled: bool,
    pub pay_index: u64,
    pub recv_index: u64,
}

impl Channel {
    pub fn deposit_total(&self) -> u64 {
        self.my_deps.values().chain(self.remote_deps.values()).map(|d| d.amount).sum()
    }

    pub fn dissociating_total(&self) -> u64 {
        self.dissociating.iter().filter_map(|p| self.my_deps.get(p)).map(|d| d.amount).sum()
    }

    pub fn capacity_holds(&self) -> bool {
        self.my_bal as u128 + self.remote_bal as u128 + self.dissociating_total() as u128 == self.deposit_total() as u128
    }

    /// Neither side has moved value since the deposits were associated.
    pub fn is_neutral(&self) -> bool {
        let mine: u64 = self.my_deps.values().map(|d| d.amount).sum();
        let theirs: u64 = self.remote_deps.values().map(|d| d.amount).sum();
        self.my_bal + self.dissociating_total() == mine && self.remote_bal == theirs
    }

    pub fn address_of(&self, p: &OutPoint) -> Option<Address> {
        self.my_deps.get(p).or_else(|| self.remote_deps.get(p)).map(|d| d.address.clone())
    }

    pub fn all_deps(&self) -> BTreeMap<OutPoint, DepositInfo> {
        let mut all = self.my_deps.clone();
        all.extend(self.remote_deps.iter().map(|(k, v)| (*k, v.clone())));
        all
    }

    fn usable(&self) -> Result<(), ChannelError> {
        if !self.is_open || self.closing || self.remote_settled {
            return Err(ChannelError::ChannelClosed);
        }
        if self.lock.is_some() {
            return Err(ChannelError::ChannelLocked);
        }
        Ok(())
    }
}

/// Unsigned settlement paying `my` to `my_addr` and `remote` to `remote_addr`
/// out of `deps`. Inputs and outputs are in canonical order so both parties
/// derive identical transactions from identical views.
pub fn settlement_tx(
    deps: &BTreeMap<OutPoint, DepositInfo>,
    my_addr: &Address,
    my: u64,
    remote_addr: &Address,
    remote: u64,
    tag: Option<TxTag>,
) -> Option<Transaction> {
    if deps.is_empty() {
        return None;
    }
    let mut outputs: Vec<TxOut> = Vec::new();
    for (address, amount) in [(my_addr, my), (remote_addr, remote)] {
        if amount == 0 {
            continue;
        }
        match outputs.iter_mut().find(|o| &o.address == address) {
            Some(o) => o.amount += amount,
            None => outputs.push(TxOut { address: address.clone(), amount }),
        }
    }
    outputs.sort_by(|a, b| a.address.cmp(&b.address).then(a.amount.cmp(&b.amount)));
    Some(Transaction::unsigned(deps.keys().copied().collect(), outputs, tag))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelMsg {
    Ack { channel: ChannelId, sender_addr: Address, receiver_addr: Address },
    ApproveRequest { outpoint: OutPoint, info: DepositInfo },
    Approved { outpoint: OutPoint },
    Associate { channel: ChannelId, outpoint: OutPoint, info: DepositInfo, secret: Option<SecretKey> },
    Dissociate { channel: ChannelId, outpoint: OutPoint },
    DissociateAck { channel: ChannelId, outpoint: OutPoint },
    DissociateDone { channel: ChannelId, outpoint: OutPoint },
    CloseNeutral { channel: ChannelId },
    Paid { channel: ChannelId, index: u64, amount: u64 },
    Terminated { channel: ChannelId },
}

/// Record of a settlement we produced, used to recover deposits it would have
/// spent if a conflicting transaction confirms instead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub txid: TxId,
    pub prevouts: BTreeSet<OutPoint>,
}

fn ch(msg: ChannelMsg) -> Message {
    Message::Channel(msg)
}

impl Teechain {
    fn channel_mut(&mut self, id: ChannelId) -> Result<&mut crate::channel::Channel, ChannelError> {
        self.core.channels.get_mut(&id).ok_or(ChannelError::UnknownChannel)
    }

    fn peer_channel_mut(&mut self, id: ChannelId, from: PublicKey) -> Result<&mut Channel, ChannelError> {
        let c = self.channel_mut(id)?;
        if c.remote != from {
            return Err(ChannelError::WrongPeer);
        }
        Ok(c)
    }

    pub(crate) fn open_channel(
        &mut self,
        id: ChannelId,
        peer: PublicKey,
        my_addr: Address,
        remote_addr: Address,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        if !self.local.sessions.contains_key(&peer) {
            return Err(ProgramError::NoSession);
        }
        if self.core.channels.contains_key(&id) {
            return Err(ChannelError::DuplicateChannel.into());
        }
        let mut c = Channel {
            id,
            remote: peer,
            my_addr: my_addr.clone(),
            remote_addr: remote_addr.clone(),
            is_open: false,
            my_bal: 0,
            remote_bal: 0,
            my_deps: BTreeMap::new(),
            remote_deps: BTreeMap::new(),
            dissociating: BTreeSet::new(),
            remote_dissociating: BTreeSet::new(),
            lock: None,
            closing: false,
            remote_settled: false,
            pay_index: 0,
            recv_index: 0,
        };
        ctx.emit(Event::ChannelRequested { channel: id, peer });
        if let Some((from, their, mine)) = self.core.early_acks.remove(&id) {
            if from == peer && their == remote_addr && mine == my_addr {
                c.is_open = true;
                ctx.emit(Event::ChannelOpened { channel: id });
            }
        }
        self.core.channels.insert(id, c);
        ctx.send(peer, id.0, ch(ChannelMsg::Ack { channel: id, sender_addr: my_addr, receiver_addr: remote_addr }));
        Ok(Reply::Done)
    }

    pub(crate) fn new_deposit(
        &mut self,
        tx: Transaction,
        index: u32,
        committee: Vec<PublicKey>,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        let out = tx.outputs.get(index as usize).ok_or(ProgramError::Malformed("no such output".into()))?;
        let outpoint = OutPoint { txid: tx.txid(), index };
        let Address::Multisig { keys, .. } = &out.address else {
            return Err(ChannelError::UnknownAddress.into());
        };
        if committee.is_empty() {
            if keys.len() != 1 || !self.core.keys.contains_key(&keys[0]) {
                return Err(ChannelError::UnknownAddress.into());
            }
        } else {
            let me = self.identity();
            let seat = committee.iter().position(|m| *m == me);
            let held = seat.map(|i| keys.len() == committee.len() && self.local.member_keys.contains_key(&keys[i]));
            if held != Some(true) {
                return Err(ChannelError::UnknownAddress.into());
            }
        }
        if self.core.deposits.contains_key(&outpoint) {
            return Err(ChannelError::DuplicateDeposit.into());
        }
        let info = DepositInfo { amount: out.amount, address: out.address.clone(), committee };
        self.core.deposits.insert(outpoint, Deposit { info, status: DepositStatus::Free });
        ctx.emit(Event::DepositRegistered { outpoint, amount: out.amount });
        Ok(Reply::Done)
    }

    pub(crate) fn release_deposit(&mut self, outpoint: OutPoint, payout: Address, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let dep = self.core.deposits.get(&outpoint).ok_or(ChannelError::UnknownDeposit)?;
        if dep.status != DepositStatus::Free {
            return Err(ChannelError::DepositNotFree.into());
        }
        let info = dep.info.clone();
        self.release_to(outpoint, info, payout, ctx)
    }

    fn release_to(&mut self, outpoint: OutPoint, info: DepositInfo, payout: Address, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let mut tx = Transaction::unsigned(vec![outpoint], vec![TxOut { address: payout, amount: info.amount }], None);
        let addr = info.address.clone();
        self.sign_with_held_keys(&mut tx, |_| Some(addr.clone()));
        let txid = tx.txid();
        self.core.deposits.get_mut(&outpoint).expect("caller checked").status = DepositStatus::Released(txid);
        ctx.emit(Event::DepositReleased { outpoint, amount: info.amount, txid });
        let authorization = crate::replication::release_authorization(&self.local.identity, &txid);
        Ok(Reply::Release { tx, authorization })
    }

    pub(crate) fn approve_my_deposit(&mut self, peer: PublicKey, outpoint: OutPoint, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if !self.local.sessions.contains_key(&peer) {
            return Err(ProgramError::NoSession);
        }
        let dep = self.core.deposits.get(&outpoint).ok_or(ChannelError::UnknownDeposit)?;
        if dep.status != DepositStatus::Free {
            return Err(ChannelError::NotFree.into());
        }
        if self.core.approved_mine.get(&peer).is_some_and(|s| s.contains(&outpoint)) {
            return Err(ChannelError::AlreadyApproved.into());
        }
        let info = dep.info.clone();
        ctx.send(peer, 0, ch(ChannelMsg::ApproveRequest { outpoint, info }));
        Ok(Reply::Done)
    }

    pub(crate) fn approve_their_deposit(
        &mut self,
        peer: PublicKey,
        tx: Transaction,
        index: u32,
        cert: ConfirmationCert,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        if !self.local.sessions.contains_key(&peer) {
            return Err(ProgramError::NoSession);
        }
        let outpoint = OutPoint { txid: tx.txid(), index };
        if self.core.approved_theirs.get(&peer).is_some_and(|m| m.contains_key(&outpoint)) {
            return Err(ChannelError::AlreadyApproved.into());
        }
        if !cert.verify(&self.local.config.ledger_key) || cert.txid != outpoint.txid || cert.depth() < self.local.config.min_confirmations {
            return Err(ChannelError::NotConfirmedOnLedger.into());
        }
        let out = tx.outputs.get(index as usize).ok_or(ProgramError::Malformed("no such output".into()))?;
        if !out.address.is_multisig() {
            return Err(ChannelError::AddressMismatch.into());
        }
        let requested = self.core.approval_requests.get_mut(&peer).and_then(|m| m.remove(&outpoint));
        let committee = match requested {
            Some(info) if info.amount == out.amount && info.address == out.address => info.committee,
            Some(_) => return Err(ChannelError::AddressMismatch.into()),
            None => Vec::new(),
        };
        let info = DepositInfo { amount: out.amount, address: out.address.clone(), committee };
        self.core.approved_theirs.entry(peer).or_default().insert(outpoint, info);
        ctx.send(peer, 0, ch(ChannelMsg::Approved { outpoint }));
        Ok(Reply::Done)
    }

    pub(crate) fn associate(&mut self, id: ChannelId, outpoint: OutPoint, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let c = self.core.channels.get(&id).ok_or(ChannelError::UnknownChannel)?;
        c.usable()?;
        let remote = c.remote;
        let dep = self.core.deposits.get(&outpoint).ok_or(ChannelError::UnknownDeposit)?;
        if dep.status != DepositStatus::Free {
            return Err(ChannelError::NotFree.into());
        }
        if !self.core.approved_mine.get(&remote).is_some_and(|s| s.contains(&outpoint)) {
            return Err(ChannelError::NotApproved.into());
        }
        let info = dep.info.clone();
        let secret = if info.is_committee() {
            None
        } else {
            let k = info.address.keys()[0];
            Some(self.core.keys.get(&k).cloned().ok_or(ChannelError::UnknownAddress)?)
        };
        self.core.deposits.get_mut(&outpoint).expect("checked").status = DepositStatus::Associated(id);
        let c = self.channel_mut(id)?;
        c.my_deps.insert(outpoint, info.clone());
        c.my_bal += info.amount;
        ctx.emit(Event::Associated { channel: id, outpoint, amount: info.amount });
        ctx.send(remote, id.0, ch(ChannelMsg::Associate { channel: id, outpoint, info, secret }));
        Ok(Reply::Done)
    }

    pub(crate) fn dissociate(&mut self, id: ChannelId, outpoint: OutPoint, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let c = self.channel_mut(id)?;
        if !c.is_open || c.remote_settled {
            return Err(ChannelError::ChannelClosed.into());
        }
        if c.lock.is_some() {
            return Err(ChannelError::ChannelLocked.into());
        }
        Self::start_dissociation(c, outpoint, ctx)?;
        Ok(Reply::Done)
    }

    fn start_dissociation(c: &mut Channel, outpoint: OutPoint, ctx: &mut Ctx) -> Result<(), ChannelError> {
        let amount = c.my_deps.get(&outpoint).ok_or(ChannelError::NotAssociated)?.amount;
        if c.dissociating.contains(&outpoint) {
            return Err(ChannelError::NotAssociated);
        }
        if c.my_bal < amount {
            return Err(ChannelError::InsufficientBalance);
        }
        c.my_bal -= amount;
        c.dissociating.insert(outpoint);
        ctx.emit(Event::DissociateRequested { channel: c.id, outpoint, amount });
        ctx.send(c.remote, c.id.0, ch(ChannelMsg::Dissociate { channel: c.id, outpoint }));
        Ok(())
    }

    pub(crate) fn pay(&mut self, id: ChannelId, amount: u64, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if amount == 0 {
            return Err(ChannelError::InvalidAmount.into());
        }
        let c = self.channel_mut(id)?;
        c.usable()?;
        if c.my_bal < amount {
            return Err(ChannelError::InsufficientBalance.into());
        }
        c.my_bal -= amount;
        c.remote_bal += amount;
        c.pay_index += 1;
        let index = c.pay_index;
        let remote = c.remote;
        ctx.emit(Event::PaymentSent { channel: id, index, amount });
        ctx.send(remote, id.0, ch(ChannelMsg::Paid { channel: id, index, amount }));
        Ok(Reply::Done)
    }

    pub(crate) fn settle(&mut self, id: ChannelId, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let c = self.core.channels.get(&id).ok_or(ChannelError::UnknownChannel)?;
        if c.lock.is_some() {
            return Err(ChannelError::ChannelLocked.into());
        }
        let off_chain = c.is_open && !c.closing && !c.remote_settled && c.is_neutral();
        if off_chain && !self.local.chain.frozen {
            let c = self.channel_mut(id)?;
            c.closing = true;
            let mine: Vec<OutPoint> = c.my_deps.keys().filter(|p| !c.dissociating.contains(p)).copied().collect();
            for p in mine {
                Self::start_dissociation(c, p, ctx)?;
            }
            let remote = c.remote;
            ctx.emit(Event::NeutralCloseStarted { channel: id });
            ctx.send(remote, id.0, ch(ChannelMsg::CloseNeutral { channel: id }));
            self.maybe_close(id, ctx);
            return Ok(Reply::Transactions(Vec::new()));
        }
        if self.local.chain.downstream.is_some() && !self.local.chain.frozen {
            self.freeze(None, ctx)?;
        }
        let c = self.core.channels.remove(&id).expect("checked above");
        let deps = c.all_deps();
        let tx = settlement_tx(&deps, &c.my_addr, c.my_bal + c.dissociating_total(), &c.remote_addr, c.remote_bal, None);
        let txs = match tx {
            Some(mut tx) => {
                self.sign_with_held_keys(&mut tx, |p| deps.get(p).map(|d| d.address.clone()));
                self.record_settlement(&c, &tx);
                vec![tx]
            }
            None => Vec::new(),
        };
        ctx.emit(Event::Settled { channel: id, txid: txs.first().map(|t| t.txid()) });
        if self.local.sessions.contains_key(&c.remote) {
            ctx.send(c.remote, id.0, ch(ChannelMsg::Terminated { channel: id }));
        }
        Ok(Reply::Transactions(txs))
    }

    pub(crate) fn record_settlement(&mut self, c: &Channel, tx: &Transaction) {
        let rec = SettlementRecord { txid: tx.txid(), prevouts: tx.prevouts().copied().collect() };
        self.core.settlements.entry(c.id).or_default().push(rec);
    }

    pub(crate) fn recover_deposit(
        &mut self,
        outpoint: OutPoint,
        payout: Address,
        evidence: Transaction,
        cert: ConfirmationCert,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        let dep = self.core.deposits.get(&outpoint).ok_or(ChannelError::UnknownDeposit)?;
        let DepositStatus::Associated(cid) = dep.status else {
            return Err(ChannelError::NotAssociated.into());
        };
        if self.core.channels.contains_key(&cid) {
            return Err(ChannelError::NotFree.into());
        }
        if !cert.verify(&self.local.config.ledger_key) || cert.txid != evidence.txid() {
            return Err(ChannelError::NotConfirmedOnLedger.into());
        }
        let records = self.core.settlements.get(&cid).ok_or(ChannelError::NotAssociated)?;
        let ev_inputs: BTreeSet<OutPoint> = evidence.prevouts().copied().collect();
        let dead = records
            .iter()
            .filter(|r| r.prevouts.contains(&outpoint))
            .all(|r| r.txid != cert.txid && r.prevouts.iter().any(|p| ev_inputs.contains(p)));
        if !dead || ev_inputs.contains(&outpoint) {
            return Err(ChannelError::InvalidEvidence.into());
        }
        let info = dep.info.clone();
        let reply = self.release_to(outpoint, info, payout, ctx)?;
        if let Reply::Release { tx, .. } = &reply {
            ctx.emit(Event::DepositRecovered { outpoint, txid: tx.txid() });
        }
        Ok(reply)
    }

    /// Removes a closing channel once every deposit has been dissociated.
    fn maybe_close(&mut self, id: ChannelId, ctx: &mut Ctx) {
        let done = self
            .core
            .channels
            .get(&id)
            .is_some_and(|c| c.closing && c.my_deps.is_empty() && c.remote_deps.is_empty() && c.remote_dissociating.is_empty());
        if done {
            self.core.channels.remove(&id);
            ctx.emit(Event::ChannelClosed { channel: id });
        }
    }

    pub(crate) fn on_channel_msg(&mut self, from: PublicKey, context: u64, msg: ChannelMsg, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if let ChannelMsg::Ack { channel, .. }
        | ChannelMsg::Associate { channel, .. }
        | ChannelMsg::Dissociate { channel, .. }
        | ChannelMsg::DissociateAck { channel, .. }
        | ChannelMsg::DissociateDone { channel, .. }
        | ChannelMsg::CloseNeutral { channel }
        | ChannelMsg::Paid { channel, .. }
        | ChannelMsg::Terminated { channel } = &msg
        {
            if channel.0 != context {
                return Err(ProgramError::Malformed("context does not match channel".into()));
            }
        }
        match msg {
            ChannelMsg::Ack { channel, sender_addr, receiver_addr } => {
                let Some(c) = self.core.channels.get_mut(&channel) else {
                    self.core.early_acks.entry(channel).or_insert((from, sender_addr, receiver_addr));
                    return Ok(Reply::Done);
                };
                if c.remote != from {
                    return Err(ChannelError::WrongPeer.into());
                }
                if c.is_open {
                    return Err(ChannelError::DuplicateChannel.into());
                }
                if sender_addr != c.remote_addr || receiver_addr != c.my_addr {
                    return Err(ChannelError::AddressMismatch.into());
                }
                c.is_open = true;
                ctx.emit(Event::ChannelOpened { channel });
                Ok(Reply::Done)
            }
            ChannelMsg::ApproveRequest { outpoint, info } => {
                self.core.approval_requests.entry(from).or_default().insert(outpoint, info);
                ctx.emit(Event::ApprovalRequested { peer: from, outpoint });
                Ok(Reply::Done)
            }
            ChannelMsg::Approved { outpoint } => {
                let dep = self.core.deposits.get(&outpoint).ok_or(ChannelError::UnknownDeposit)?;
                if dep.status != DepositStatus::Free {
                    return Err(ChannelError::NotFree.into());
                }
                if !self.core.approved_mine.entry(from).or_default().insert(outpoint) {
                    return Err(ChannelError::AlreadyApproved.into());
                }
                ctx.emit(Event::DepositApprovedByPeer { peer: from, outpoint });
                Ok(Reply::Done)
            }
            ChannelMsg::Associate { channel, outpoint, info, secret } => {
                let approved = self.core.approved_theirs.get(&from).and_then(|m| m.get(&outpoint)).cloned();
                let c = self.peer_channel_mut(channel, from)?;
                c.usable()?;
                let approved = approved.ok_or(ChannelError::NotApproved)?;
                if approved.amount != info.amount || approved.address != info.address {
                    return Err(ChannelError::AddressMismatch.into());
                }
                if c.remote_deps.contains_key(&outpoint) {
                    return Err(ChannelError::DuplicateDeposit.into());
                }
                let key = match (&secret, info.is_committee()) {
                    (Some(s), false) if s.public() == info.address.keys()[0] => Some((s.public(), s.clone())),
                    (None, true) => None,
                    _ => return Err(ChannelError::UnknownAddress.into()),
                };
                c.remote_deps.insert(outpoint, approved);
                c.remote_bal += info.amount;
                if let Some((pk, sk)) = key {
                    self.core.keys.insert(pk, sk);
                }
                ctx.emit(Event::AssociationAccepted { channel, outpoint, amount: info.amount });
                Ok(Reply::Done)
            }
            ChannelMsg::Dissociate { channel, outpoint } => {
                let c = self.peer_channel_mut(channel, from)?;
                if c.lock.is_some() {
                    return Err(ChannelError::ChannelLocked.into());
                }
                let info = c.remote_deps.get(&outpoint).ok_or(ChannelError::NotAssociated)?.clone();
                if c.remote_bal < info.amount {
                    return Err(ChannelError::InsufficientBalance.into());
                }
                c.remote_deps.remove(&outpoint);
                c.remote_bal -= info.amount;
                c.remote_dissociating.insert(outpoint);
                if !info.is_committee() {
                    self.core.keys.remove(&info.address.keys()[0]);
                }
                ctx.emit(Event::DissociateAccepted { channel, outpoint });
                ctx.send(from, channel.0, ch(ChannelMsg::DissociateAck { channel, outpoint }));
                Ok(Reply::Done)
            }
            ChannelMsg::DissociateAck { channel, outpoint } => {
                let c = self.peer_channel_mut(channel, from)?;
                if !c.dissociating.remove(&outpoint) {
                    return Err(ChannelError::NotAssociated.into());
                }
                c.my_deps.remove(&outpoint);
                if let Some(d) = self.core.deposits.get_mut(&outpoint) {
                    d.status = DepositStatus::Free;
                }
                ctx.emit(Event::DissociateAcked { channel, outpoint });
                ctx.send(from, channel.0, ch(ChannelMsg::DissociateDone { channel, outpoint }));
                self.maybe_close(channel, ctx);
                Ok(Reply::Done)
            }
            ChannelMsg::DissociateDone { channel, outpoint } => {
                let c = self.peer_channel_mut(channel, from)?;
                if !c.remote_dissociating.remove(&outpoint) {
                    return Err(ChannelError::NotAssociated.into());
                }
                ctx.emit(Event::DissociateCompleted { channel, outpoint });
                self.maybe_close(channel, ctx);
                Ok(Reply::Done)
            }
            ChannelMsg::CloseNeutral { channel } => {
                let c = self.peer_channel_mut(channel, from)?;
                if c.lock.is_some() {
                    return Err(ChannelError::ChannelLocked.into());
                }
                c.closing = true;
                let mine: Vec<OutPoint> = c.my_deps.keys().filter(|p| !c.dissociating.contains(p)).copied().collect();
                for p in mine {
                    // A deposit we can no longer cover stays put; the channel
                    // then needs an on-chain settlement.
                    let _ = Self::start_dissociation(c, p, ctx);
                }
                ctx.emit(Event::NeutralCloseStarted { channel });
                self.maybe_close(channel, ctx);
                Ok(Reply::Done)
            }
            ChannelMsg::Paid { channel, index, amount } => {
                let c = self.peer_channel_mut(channel, from)?;
                if c.lock.is_some() {
                    return Err(ChannelError::ChannelLocked.into());
                }
                if c.remote_bal < amount || amount == 0 {
                    return Err(ChannelError::InsufficientBalance.into());
                }
                c.my_bal += amount;
                c.remote_bal -= amount;
                c.recv_index = index;
                ctx.emit(Event::PaymentReceived { channel, index, amount });
                Ok(Reply::Done)
            }
            ChannelMsg::Terminated { channel } => {
                let c = self.peer_channel_mut(channel, from)?;
                c.remote_settled = true;
                ctx.emit(Event::RemoteSettled { channel });
                Ok(Reply::Done)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn info(amount: u64, seed: u8) -> DepositInfo {
        DepositInfo { amount, address: Address::Multisig { m: 1, keys: vec![keygen([seed; 32]).public] }, committee: vec![] }
    }

    fn op(b: u8) -> OutPoint {
        OutPoint { txid: TxId([b; 32]), index: 0 }
    }

    fn chan() -> Channel {
        Channel {
            id: ChannelId(1),
            remote: keygen([9; 32]).public,
            my_addr: Address::Single(keygen([1; 32]).public),
            remote_addr: Address::Single(keygen([2; 32]).public),
            is_open: true,
            my_bal: 0,
            remote_bal: 0,
            my_deps: BTreeMap::new(),
            remote_deps: BTreeMap::new(),
            dissociating: BTreeSet::new(),
            remote_dissociating: BTreeSet::new(),
            lock: None,
            closing: false,
            remote_settled: false,
            pay_index: 0,
            recv_index: 0,
        }
    }

    #[test]
    fn capacity_and_neutrality() {
        let mut c = chan();
        c.my_deps.insert(op(1), info(10, 1));
        c.my_bal = 10;
        assert!(c.capacity_holds() && c.is_neutral());
        c.my_bal = 7;
        c.remote_bal = 3;
        assert!(c.capacity_holds() && !c.is_neutral());
        c.remote_bal = 4;
        assert!(!c.capacity_holds());
    }

    #[test]
    fn dissociating_amount_counts_towards_capacity() {
        let mut c = chan();
        c.my_deps.insert(op(1), info(10, 1));
        c.my_deps.insert(op(2), info(5, 2));
        c.my_bal = 10;
        c.remote_bal = 0;
        c.dissociating.insert(op(2));
        assert!(c.capacity_holds());
        assert!(c.is_neutral());
    }

    #[test]
    fn settlement_is_canonical_and_skips_zero_outputs() {
        let mut deps = BTreeMap::new();
        deps.insert(op(2), info(5, 2));
        deps.insert(op(1), info(10, 1));
        let a = Address::Single(keygen([1; 32]).public);
        let b = Address::Single(keygen([2; 32]).public);
        let t1 = settlement_tx(&deps, &a, 15, &b, 0, None).unwrap();
        assert_eq!(t1.outputs.len(), 1);
        assert_eq!(t1.inputs[0].prevout, op(1));
        let t2 = settlement_tx(&deps, &a, 9, &b, 6, None).unwrap();
        let t3 = settlement_tx(&deps, &b, 6, &a, 9, None).unwrap();
        assert_eq!(t2.txid(), t3.txid(), "both parties derive the same transaction");
        assert!(settlement_tx(&BTreeMap::new(), &a, 0, &b, 0, None).is_none());
    }
}
