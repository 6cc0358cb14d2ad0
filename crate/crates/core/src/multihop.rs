//! Multi-hop payments over a path of channels.
//!
//! A payment moves through six stages. Every node locks its channels, then a
//! single transaction `tau` settling all path channels at their post-payment
//! balances is collected and signed. Balances change only once every node
//! holds a fully signed `tau`, and `tau` is discarded only once every node has
//! applied the payment. A node that ejects therefore always has a settlement
//! consistent with every other node's: either all pre-payment, all
//! post-payment, or `tau` itself.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::channel::{settlement_tx, Channel};
use crate::crypto::{hash_value, PublicKey};
use crate::ledger::{Address, ConfirmationCert, OutPoint, PaymentId, TagKind, Transaction, TxTag};
use crate::program::{ChannelId, Ctx, DepositInfo, Event, Message, ProgramError, Reply, Teechain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum MultihopError {
    #[error("route is malformed")]
    InvalidRoute,
    #[error("channel on route is unusable: {0}")]
    ChannelUnusable(String),
    #[error("insufficient balance on route channel")]
    InsufficientBalance,
    #[error("committee deposits cannot back multi-hop payments")]
    CommitteeDepositUnsupported,
    #[error("unknown payment")]
    UnknownPayment,
    #[error("message does not match payment stage")]
    StageMismatch,
    #[error("path transaction does not honour local balances")]
    TauMismatch,
    #[error("payment was ejected")]
    PaymentEjected,
    #[error("settlement evidence is invalid")]
    InvalidEvidence,
    #[error("amount must be positive")]
    InvalidAmount,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<PublicKey>,
    /// `channels[i]` connects `nodes[i]` and `nodes[i + 1]`.
    pub channels: Vec<ChannelId>,
}

impl Route {
    pub fn is_well_formed(&self) -> bool {
        self.nodes.len() >= 2 && self.channels.len() + 1 == self.nodes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Lock,
    Sign,
    PreUpdate,
    Update,
    PostUpdate,
    Release,
    Ejected,
}

/// A node's snapshot of one of its path channels at lock time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalView {
    pub channel: ChannelId,
    pub my_addr: Address,
    pub remote_addr: Address,
    pub pre_my: u64,
    pub pre_remote: u64,
    pub post_my: u64,
    pub post_remote: u64,
    pub deps: BTreeMap<OutPoint, DepositInfo>,
}

impl LocalView {
    fn of(c: &Channel, delta_my: i128) -> LocalView {
        LocalView {
            channel: c.id,
            my_addr: c.my_addr.clone(),
            remote_addr: c.remote_addr.clone(),
            pre_my: c.my_bal,
            pre_remote: c.remote_bal,
            post_my: (c.my_bal as i128 + delta_my) as u64,
            post_remote: (c.remote_bal as i128 - delta_my) as u64,
            deps: c.all_deps(),
        }
    }

    fn local_tx(&self, post: bool, payment: PaymentId) -> Option<Transaction> {
        let (my, remote, kind) =
            if post { (self.post_my, self.post_remote, TagKind::Post) } else { (self.pre_my, self.pre_remote, TagKind::Pre) };
        settlement_tx(&self.deps, &self.my_addr, my, &self.remote_addr, remote, Some(TxTag { payment, kind }))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathPayment {
    pub payment: PaymentId,
    pub position: u32,
    pub route: Route,
    pub amount: u64,
    pub stage: Stage,
    /// In-channel first, then out-channel.
    pub views: Vec<LocalView>,
    /// Fully signed `tau`, held from pre-update until post-update.
    pub tau: Option<Transaction>,
    pub decided: Option<Vec<Transaction>>,
}

impl PathPayment {
    fn is_sender(&self) -> bool {
        self.position == 0
    }

    fn is_recipient(&self) -> bool {
        self.position as usize == self.route.nodes.len() - 1
    }

    fn in_channel(&self) -> Option<ChannelId> {
        (!self.is_sender()).then(|| self.route.channels[self.position as usize - 1])
    }

    fn out_channel(&self) -> Option<ChannelId> {
        (!self.is_recipient()).then(|| self.route.channels[self.position as usize])
    }

    fn prev(&self) -> PublicKey {
        self.route.nodes[self.position as usize - 1]
    }

    fn next(&self) -> PublicKey {
        self.route.nodes[self.position as usize + 1]
    }

    fn address_of(&self, p: &OutPoint) -> Option<Address> {
        self.views.iter().find_map(|v| v.deps.get(p).map(|d| d.address.clone()))
    }

    /// `tau` spends every deposit we know of and pays each of our addresses
    /// at least our post-payment balance.
    fn tau_honours(&self, tau: &Transaction) -> bool {
        let inputs: BTreeSet<&OutPoint> = tau.prevouts().collect();
        if !self.views.iter().all(|v| v.deps.keys().all(|p| inputs.contains(p))) {
            return false;
        }
        let mut owed: BTreeMap<&Address, u64> = BTreeMap::new();
        for v in &self.views {
            *owed.entry(&v.my_addr).or_default() += v.post_my;
        }
        owed.iter().all(|(a, amt)| tau.paid_to(a) >= *amt)
    }

    fn local_txs(&self, post: bool) -> Vec<Transaction> {
        self.views.iter().filter_map(|v| v.local_tx(post, self.payment)).collect()
    }
}

/// Every input carries at least its threshold of witnesses.
fn fully_signed(tx: &Transaction, thresholds: &BTreeMap<OutPoint, usize>) -> bool {
    tx.inputs.iter().all(|i| thresholds.get(&i.prevout).map_or(!i.witnesses.is_empty(), |m| i.witnesses.len() >= *m))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultihopMsg {
    Lock { payment: PaymentId, route: Route, amount: u64, position: u32, tau: Transaction },
    Sign { payment: PaymentId, position: u32, tau: Transaction },
    PreUpdate { payment: PaymentId, position: u32, tau: Transaction },
    Update { payment: PaymentId, position: u32 },
    PostUpdate { payment: PaymentId, position: u32 },
    Release { payment: PaymentId, position: u32 },
}

fn mh(msg: MultihopMsg) -> Message {
    Message::Multihop(msg)
}

fn check_usable(c: &Channel) -> Result<(), MultihopError> {
    let reason = if !c.is_open || c.closing || c.remote_settled {
        "not open"
    } else if c.lock.is_some() {
        "locked"
    } else if !c.dissociating.is_empty() || !c.remote_dissociating.is_empty() {
        "dissociation pending"
    } else {
        return if c.my_deps.values().chain(c.remote_deps.values()).any(|d| d.is_committee()) {
            Err(MultihopError::CommitteeDepositUnsupported)
        } else {
            Ok(())
        };
    };
    Err(MultihopError::ChannelUnusable(reason.into()))
}

impl Teechain {
    fn route_channel(&self, id: ChannelId, peer: PublicKey) -> Result<&Channel, MultihopError> {
        let c = self.core.channels.get(&id).ok_or(MultihopError::ChannelUnusable("unknown".into()))?;
        if c.remote != peer {
            return Err(MultihopError::InvalidRoute);
        }
        check_usable(c)?;
        Ok(c)
    }

    fn stage(&self, ctx: &mut Ctx, p: &PathPayment) {
        ctx.emit(Event::MultihopStage { payment: p.payment, position: p.position, stage: p.stage });
    }

    fn adjust(&mut self, id: ChannelId, delta_my: i128) {
        let c = self.core.channels.get_mut(&id).expect("locked channels persist until ejection");
        c.my_bal = (c.my_bal as i128 + delta_my) as u64;
        c.remote_bal = (c.remote_bal as i128 - delta_my) as u64;
    }

    fn unlock(&mut self, p: &PathPayment) {
        for v in &p.views {
            if let Some(c) = self.core.channels.get_mut(&v.channel) {
                if c.lock == Some(p.payment) {
                    c.lock = None;
                }
            }
        }
    }

    /// Locks the out-channel, appends it to `tau` and forwards the lock.
    fn lock_out(&mut self, p: &mut PathPayment, tau: &mut Transaction, ctx: &mut Ctx) -> Result<(), MultihopError> {
        let out = p.out_channel().expect("caller is not the recipient");
        let c = self.route_channel(out, p.next())?;
        if c.my_bal < p.amount {
            return Err(MultihopError::InsufficientBalance);
        }
        let view = LocalView::of(c, -(p.amount as i128));
        for prevout in view.deps.keys() {
            tau.inputs.push(crate::ledger::TxIn { prevout: *prevout, witnesses: Vec::new() });
        }
        for (address, amount) in [(&view.my_addr, view.post_my), (&view.remote_addr, view.post_remote)] {
            if amount > 0 {
                tau.outputs.push(crate::ledger::TxOut { address: address.clone(), amount });
            }
        }
        self.core.channels.get_mut(&out).expect("checked").lock = Some(p.payment);
        p.views.push(view);
        ctx.send(
            p.next(),
            0,
            mh(MultihopMsg::Lock {
                payment: p.payment,
                route: p.route.clone(),
                amount: p.amount,
                position: p.position + 1,
                tau: tau.clone(),
            }),
        );
        Ok(())
    }

    pub(crate) fn pay_multihop(&mut self, route: Route, amount: u64, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        if amount == 0 {
            return Err(MultihopError::InvalidAmount.into());
        }
        if !route.is_well_formed() || route.nodes[0] != self.identity() {
            return Err(MultihopError::InvalidRoute.into());
        }
        self.core.payment_counter += 1;
        let payment = PaymentId(hash_value(&("teechain-payment", self.identity(), self.core.payment_counter)));
        let mut p = PathPayment { payment, position: 0, route, amount, stage: Stage::Lock, views: Vec::new(), tau: None, decided: None };
        let mut tau = Transaction::unsigned(Vec::new(), Vec::new(), Some(TxTag { payment, kind: TagKind::Path }));
        self.lock_out(&mut p, &mut tau, ctx)?;
        self.stage(ctx, &p);
        self.core.payments.insert((payment, 0), p);
        Ok(Reply::Payment(payment))
    }

    #[allow(clippy::too_many_arguments)]
    fn on_lock(
        &mut self,
        from: PublicKey,
        payment: PaymentId,
        route: Route,
        amount: u64,
        position: u32,
        mut tau: Transaction,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        let i = position as usize;
        if !route.is_well_formed() || i == 0 || i >= route.nodes.len() || route.nodes[i] != self.identity() || route.nodes[i - 1] != from {
            return Err(MultihopError::InvalidRoute.into());
        }
        if amount == 0 {
            return Err(MultihopError::InvalidAmount.into());
        }
        if self.core.payments.contains_key(&(payment, position)) {
            return Err(MultihopError::StageMismatch.into());
        }
        if tau.tag != Some(TxTag { payment, kind: TagKind::Path }) {
            return Err(MultihopError::TauMismatch.into());
        }
        let inc = route.channels[i - 1];
        let c = self.route_channel(inc, from)?;
        if c.remote_bal < amount {
            return Err(MultihopError::InsufficientBalance.into());
        }
        let view = LocalView::of(c, amount as i128);
        let mut p = PathPayment { payment, position, route, amount, stage: Stage::Lock, views: vec![view], tau: None, decided: None };
        if !p.tau_honours(&tau) {
            return Err(MultihopError::TauMismatch.into());
        }
        self.core.channels.get_mut(&inc).expect("checked").lock = Some(payment);
        if p.is_recipient() {
            let addrs = p.clone();
            self.sign_with_held_keys(&mut tau, |o| addrs.address_of(o));
            p.stage = Stage::Sign;
            ctx.send(from, 0, mh(MultihopMsg::Sign { payment, position: position - 1, tau }));
        } else {
            self.lock_out(&mut p, &mut tau, ctx)?;
        }
        self.stage(ctx, &p);
        self.core.payments.insert((payment, position), p);
        Ok(Reply::Done)
    }

    fn record_for(&mut self, payment: PaymentId, position: u32, from: PublicKey, expect: Stage) -> Result<PathPayment, MultihopError> {
        let p = self.core.payments.get(&(payment, position)).ok_or(MultihopError::UnknownPayment)?;
        if p.stage == Stage::Ejected {
            return Err(MultihopError::PaymentEjected);
        }
        let i = position as usize;
        let neighbour_ok = (i > 0 && p.route.nodes[i - 1] == from) || (i + 1 < p.route.nodes.len() && p.route.nodes[i + 1] == from);
        if !neighbour_ok {
            return Err(MultihopError::InvalidRoute);
        }
        if p.stage != expect {
            return Err(MultihopError::StageMismatch);
        }
        Ok(p.clone())
    }

    pub(crate) fn on_multihop_msg(&mut self, from: PublicKey, msg: MultihopMsg, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        match msg {
            MultihopMsg::Lock { payment, route, amount, position, tau } => self.on_lock(from, payment, route, amount, position, tau, ctx),
            MultihopMsg::Sign { payment, position, mut tau } => {
                let mut p = self.record_for(payment, position, from, Stage::Lock)?;
                if p.is_recipient() || p.next() != from || !p.tau_honours(&tau) {
                    return Err(MultihopError::TauMismatch.into());
                }
                let addrs = p.clone();
                self.sign_with_held_keys(&mut tau, |o| addrs.address_of(o));
                if p.is_sender() {
                    let thresholds: BTreeMap<OutPoint, usize> =
                        p.views.iter().flat_map(|v| v.deps.iter().map(|(o, d)| (*o, d.address.threshold() as usize))).collect();
                    if !fully_signed(&tau, &thresholds) {
                        return Err(MultihopError::TauMismatch.into());
                    }
                    p.stage = Stage::PreUpdate;
                    p.tau = Some(tau.clone());
                    ctx.send(p.next(), 0, mh(MultihopMsg::PreUpdate { payment, position: 1, tau }));
                } else {
                    p.stage = Stage::Sign;
                    ctx.send(p.prev(), 0, mh(MultihopMsg::Sign { payment, position: position - 1, tau }));
                }
                self.stage(ctx, &p);
                self.core.payments.insert((payment, position), p);
                Ok(Reply::Done)
            }
            MultihopMsg::PreUpdate { payment, position, tau } => {
                let mut p = self.record_for(payment, position, from, Stage::Sign)?;
                if p.is_sender() || p.prev() != from || !p.tau_honours(&tau) {
                    return Err(MultihopError::TauMismatch.into());
                }
                p.tau = Some(tau.clone());
                if p.is_recipient() {
                    let inc = p.in_channel().expect("recipient has an in-channel");
                    self.adjust(inc, p.amount as i128);
                    ctx.emit(Event::MultihopCredit { payment, channel: inc, amount: p.amount });
                    p.stage = Stage::Update;
                    ctx.send(from, 0, mh(MultihopMsg::Update { payment, position: position - 1 }));
                } else {
                    p.stage = Stage::PreUpdate;
                    ctx.send(p.next(), 0, mh(MultihopMsg::PreUpdate { payment, position: position + 1, tau }));
                }
                self.stage(ctx, &p);
                self.core.payments.insert((payment, position), p);
                Ok(Reply::Done)
            }
            MultihopMsg::Update { payment, position } => {
                let mut p = self.record_for(payment, position, from, Stage::PreUpdate)?;
                if p.is_recipient() || p.next() != from {
                    return Err(MultihopError::StageMismatch.into());
                }
                if let Some(inc) = p.in_channel() {
                    self.adjust(inc, p.amount as i128);
                    ctx.emit(Event::MultihopCredit { payment, channel: inc, amount: p.amount });
                }
                let out = p.out_channel().expect("not the recipient");
                self.adjust(out, -(p.amount as i128));
                ctx.emit(Event::MultihopDebit { payment, channel: out, amount: p.amount });
                if p.is_sender() {
                    p.tau = None;
                    p.stage = Stage::PostUpdate;
                    ctx.send(p.next(), 0, mh(MultihopMsg::PostUpdate { payment, position: 1 }));
                } else {
                    p.stage = Stage::Update;
                    ctx.send(p.prev(), 0, mh(MultihopMsg::Update { payment, position: position - 1 }));
                }
                self.stage(ctx, &p);
                self.core.payments.insert((payment, position), p);
                Ok(Reply::Done)
            }
            MultihopMsg::PostUpdate { payment, position } => {
                let mut p = self.record_for(payment, position, from, Stage::Update)?;
                if p.is_sender() || p.prev() != from {
                    return Err(MultihopError::StageMismatch.into());
                }
                p.tau = None;
                if p.is_recipient() {
                    p.stage = Stage::Release;
                    self.unlock(&p);
                    ctx.send(from, 0, mh(MultihopMsg::Release { payment, position: position - 1 }));
                } else {
                    p.stage = Stage::PostUpdate;
                    ctx.send(p.next(), 0, mh(MultihopMsg::PostUpdate { payment, position: position + 1 }));
                }
                self.stage(ctx, &p);
                self.core.payments.insert((payment, position), p);
                Ok(Reply::Done)
            }
            MultihopMsg::Release { payment, position } => {
                let mut p = self.record_for(payment, position, from, Stage::PostUpdate)?;
                if p.is_recipient() || p.next() != from {
                    return Err(MultihopError::StageMismatch.into());
                }
                p.stage = Stage::Release;
                self.unlock(&p);
                if !p.is_sender() {
                    ctx.send(p.prev(), 0, mh(MultihopMsg::Release { payment, position: position - 1 }));
                }
                self.stage(ctx, &p);
                self.core.payments.insert((payment, position), p);
                Ok(Reply::Done)
            }
        }
    }

    /// Settlement of a completed payment's channels at their current state.
    fn current_post_txs(&self, p: &PathPayment) -> Vec<Transaction> {
        p.views
            .iter()
            .filter_map(|v| self.core.channels.get(&v.channel))
            .filter(|c| c.lock.is_none())
            .filter_map(|c| {
                let tag = Some(TxTag { payment: p.payment, kind: TagKind::Post });
                settlement_tx(&c.all_deps(), &c.my_addr, c.my_bal + c.dissociating_total(), &c.remote_addr, c.remote_bal, tag)
            })
            .collect()
    }

    fn records_of(&self, payment: PaymentId) -> Vec<u32> {
        self.core.payments.range((payment, 0)..=(payment, u32::MAX)).map(|((_, pos), _)| *pos).collect()
    }

    /// Terminates the payment's channels with `txs` for every record and
    /// returns the deduplicated, signed transactions.
    fn decide(&mut self, payment: PaymentId, decisions: Vec<(u32, Vec<Transaction>)>, ctx: &mut Ctx) -> Reply {
        let mut out: Vec<Transaction> = Vec::new();
        for (pos, mut txs) in decisions {
            let p = self.core.payments.get(&(payment, pos)).expect("record exists").clone();
            for tx in &mut txs {
                let addrs = p.clone();
                self.sign_with_held_keys(tx, |o| addrs.address_of(o));
            }
            for v in &p.views {
                let ours = self.core.channels.get(&v.channel).map(|c| c.lock);
                if ours == Some(Some(payment)) || (ours == Some(None) && p.stage == Stage::Release) {
                    self.core.channels.remove(&v.channel);
                }
                for tx in txs.iter().filter(|t| t.prevouts().any(|o| v.deps.contains_key(o))) {
                    let rec = crate::channel::SettlementRecord { txid: tx.txid(), prevouts: tx.prevouts().copied().collect() };
                    let recs = self.core.settlements.entry(v.channel).or_default();
                    if !recs.contains(&rec) {
                        recs.push(rec);
                    }
                }
            }
            ctx.emit(Event::Ejected { payment, position: pos, txids: txs.iter().map(|t| t.txid()).collect() });
            let rec = self.core.payments.get_mut(&(payment, pos)).expect("record exists");
            rec.stage = Stage::Ejected;
            rec.tau = None;
            rec.decided = Some(txs.clone());
            for tx in txs {
                if !out.iter().any(|t| t.txid() == tx.txid()) {
                    out.push(tx);
                }
            }
        }
        Reply::Transactions(out)
    }

    pub(crate) fn eject(&mut self, payment: PaymentId, ctx: &mut Ctx) -> Result<Reply, ProgramError> {
        let positions = self.records_of(payment);
        if positions.is_empty() {
            return Err(MultihopError::UnknownPayment.into());
        }
        let mut decisions = Vec::new();
        for pos in positions {
            let p = &self.core.payments[&(payment, pos)];
            let txs = match p.stage {
                Stage::Ejected => p.decided.clone().unwrap_or_default(),
                Stage::Lock | Stage::Sign => p.local_txs(false),
                Stage::PreUpdate | Stage::Update => p.tau.clone().into_iter().collect(),
                Stage::PostUpdate => p.local_txs(true),
                Stage::Release => self.current_post_txs(p),
            };
            decisions.push((pos, txs));
        }
        Ok(self.decide(payment, decisions, ctx))
    }

    pub(crate) fn eject_with_popt(
        &mut self,
        payment: PaymentId,
        evidence: Transaction,
        cert: ConfirmationCert,
        ctx: &mut Ctx,
    ) -> Result<Reply, ProgramError> {
        if !cert.verify(&self.local.config.ledger_key) || cert.txid != evidence.txid() {
            return Err(MultihopError::InvalidEvidence.into());
        }
        let tag = evidence.tag.filter(|t| t.payment == payment).ok_or(MultihopError::InvalidEvidence)?;
        let positions = self.records_of(payment);
        if positions.is_empty() {
            return Err(MultihopError::UnknownPayment.into());
        }
        let mut decisions = Vec::new();
        for pos in positions {
            let p = &self.core.payments[&(payment, pos)];
            let post_decided = p.stage == Stage::Ejected
                && p.decided.as_ref().is_some_and(|d| !d.is_empty() && d.iter().all(|t| t.tag.is_some_and(|g| g.kind == TagKind::Post)));
            let txs = match tag.kind {
                TagKind::Pre => {
                    if matches!(p.stage, Stage::PostUpdate | Stage::Release) {
                        return Err(MultihopError::InvalidEvidence.into());
                    }
                    p.local_txs(false)
                }
                TagKind::Post | TagKind::Path if p.stage == Stage::Release => self.current_post_txs(p),
                TagKind::Post | TagKind::Path if post_decided => p.decided.clone().unwrap_or_default(),
                TagKind::Post | TagKind::Path => p.local_txs(true),
            };
            decisions.push((pos, txs));
        }
        Ok(self.decide(payment, decisions, ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::ledger::TxId;

    fn view(deps: &[(u8, u64)], my: u64, remote: u64, delta: i128) -> LocalView {
        let mut map = BTreeMap::new();
        for (b, amt) in deps {
            map.insert(
                OutPoint { txid: TxId([*b; 32]), index: 0 },
                DepositInfo { amount: *amt, address: Address::Multisig { m: 1, keys: vec![keygen([*b; 32]).public] }, committee: vec![] },
            );
        }
        LocalView {
            channel: ChannelId(deps[0].0 as u64),
            my_addr: Address::Single(keygen([100 + deps[0].0; 32]).public),
            remote_addr: Address::Single(keygen([200 + deps[0].0; 32]).public),
            pre_my: my,
            pre_remote: remote,
            post_my: (my as i128 + delta) as u64,
            post_remote: (remote as i128 - delta) as u64,
            deps: map,
        }
    }

    fn record(views: Vec<LocalView>) -> PathPayment {
        PathPayment {
            payment: PaymentId([7; 32]),
            position: 1,
            route: Route { nodes: vec![keygen([1; 32]).public; 3], channels: vec![ChannelId(1), ChannelId(2)] },
            amount: 3,
            stage: Stage::Lock,
            views,
            tau: None,
            decided: None,
        }
    }

    #[test]
    fn stages_are_ordered() {
        assert!(Stage::Lock < Stage::Sign && Stage::Sign < Stage::PreUpdate && Stage::PostUpdate < Stage::Release);
    }

    #[test]
    fn local_txs_carry_tag_and_balances() {
        let p = record(vec![view(&[(1, 10)], 4, 6, 3)]);
        let pre = p.local_txs(false);
        let post = p.local_txs(true);
        assert_eq!(pre[0].tag.unwrap().kind, TagKind::Pre);
        assert_eq!(post[0].tag.unwrap().kind, TagKind::Post);
        assert_eq!(pre[0].paid_to(&p.views[0].my_addr), 4);
        assert_eq!(post[0].paid_to(&p.views[0].my_addr), 7);
        assert_ne!(pre[0].txid(), post[0].txid());
    }

    #[test]
    fn tau_must_spend_all_deps_and_pay_post_balances() {
        let v = view(&[(1, 10)], 4, 6, 3);
        let p = record(vec![v.clone()]);
        let tag = Some(TxTag { payment: p.payment, kind: TagKind::Path });
        let good = settlement_tx(&v.deps, &v.my_addr, 7, &v.remote_addr, 3, tag).unwrap();
        assert!(p.tau_honours(&good));
        let short = settlement_tx(&v.deps, &v.my_addr, 6, &v.remote_addr, 4, tag).unwrap();
        assert!(!p.tau_honours(&short));
        let missing = Transaction::unsigned(vec![], good.outputs.clone(), tag);
        assert!(!p.tau_honours(&missing));
    }

    #[test]
    fn route_shape() {
        let a = keygen([1; 32]).public;
        assert!(Route { nodes: vec![a, a], channels: vec![ChannelId(1)] }.is_well_formed());
        assert!(!Route { nodes: vec![a], channels: vec![] }.is_well_formed());
        assert!(!Route { nodes: vec![a, a], channels: vec![] }.is_well_formed());
    }
}
