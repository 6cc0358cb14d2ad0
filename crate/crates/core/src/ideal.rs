//! Ideal payment-channel functionality used as a differential oracle.
//!
//! Plain tables and integers: no cryptography, no network. Every handler
//! either applies its whole mutation and succeeds or changes nothing and
//! fails. After every successful handler `state_balance(u) ==
//! perceived_balance(u)` for every user and no channel holds more than its
//! associated deposits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type User = u32;
pub type ChannelKey = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DepositId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PendingPaymentId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LedgerPaymentId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("ideal handler guard failed")]
pub struct Fail;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealChannel {
    pub u: User,
    pub v: User,
    pub amount_u: u64,
    pub amount_v: u64,
    pub symmetric: bool,
}

impl IdealChannel {
    fn side_mut(&mut self, who: User) -> Option<&mut u64> {
        if who == self.u {
            Some(&mut self.amount_u)
        } else if who == self.v {
            Some(&mut self.amount_v)
        } else {
            None
        }
    }

    fn side(&self, who: User) -> Option<u64> {
        if who == self.u {
            Some(self.amount_u)
        } else if who == self.v {
            Some(self.amount_v)
        } else {
            None
        }
    }

    fn other(&self, who: User) -> User {
        if who == self.u {
            self.v
        } else {
            self.u
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealDeposit {
    pub amount: u64,
    pub owner: User,
    pub channel: Option<ChannelKey>,
    pub symmetric: bool,
}

/// One handler invocation by `caller`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdealOp {
    GetLedgerBalance { caller: User, of: User },
    AcceptLedgerPayment { caller: User, id: LedgerPaymentId },
    AddDeposit { caller: User, amount: u64 },
    RemoveDeposit { caller: User, deposit: DepositId },
    OpenChannel { caller: User, channel: ChannelKey, peer: User },
    AcceptChannelOpen { caller: User, channel: ChannelKey },
    AssociateDeposit { caller: User, channel: ChannelKey, deposit: DepositId },
    AcceptAssociateDeposit { caller: User, channel: ChannelKey, deposit: DepositId },
    DissociateDeposit { caller: User, deposit: DepositId },
    AcceptDissociate { caller: User, deposit: DepositId },
    AckDissociate { caller: User, deposit: DepositId },
    Pay { caller: User, channel: ChannelKey, amount: u64 },
    ReceivePayment { caller: User, id: PendingPaymentId },
    SettleChannel { caller: User, channel: ChannelKey },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Done,
    Balance(u64),
    Deposit(DepositId),
    Payment(PendingPaymentId),
    LedgerPayment(LedgerPaymentId),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealState {
    pub ledger: BTreeMap<User, u64>,
    pub channels: BTreeMap<ChannelKey, IdealChannel>,
    pub deposits: BTreeMap<DepositId, IdealDeposit>,
    /// Deposits mid-dissociation: (owner, accepted by peer).
    pub pending_deposits: BTreeMap<DepositId, (User, bool)>,
    /// Sent but not yet received: (recipient, channel, amount).
    pub pending_payments: BTreeMap<PendingPaymentId, (User, ChannelKey, u64)>,
    /// Channels settled by one side: the side that has not settled yet.
    pub pending_channels: BTreeMap<ChannelKey, User>,
    pub pending_ledger: BTreeMap<LedgerPaymentId, (User, u64)>,
    deposit_counter: u64,
    payment_counter: u64,
    ledger_payment_counter: u64,
    initial: BTreeMap<User, u64>,
    received: BTreeMap<User, u64>,
    paid: BTreeMap<User, u64>,
}

impl IdealState {
    pub fn new(genesis: &[(User, u64)]) -> IdealState {
        let mut s = IdealState::default();
        for (u, amt) in genesis {
            *s.ledger.entry(*u).or_default() += amt;
            *s.initial.entry(*u).or_default() += amt;
        }
        s
    }

    pub fn users(&self) -> impl Iterator<Item = User> + '_ {
        self.ledger.keys().copied()
    }

    /// Initial funds plus payments received minus payments sent.
    pub fn perceived_balance(&self, u: User) -> i128 {
        self.initial.get(&u).copied().unwrap_or(0) as i128 + self.received.get(&u).copied().unwrap_or(0) as i128
            - self.paid.get(&u).copied().unwrap_or(0) as i128
    }

    /// Everything `u` could reclaim: ledger funds, channel balances, free
    /// deposits, pending ledger payments and deposits mid-dissociation.
    pub fn state_balance(&self, u: User) -> i128 {
        let ledger = self.ledger.get(&u).copied().unwrap_or(0) as i128;
        let channels: i128 = self.channels.values().filter_map(|c| c.side(u)).map(|a| a as i128).sum();
        let free: i128 = self.deposits.values().filter(|d| d.owner == u && d.channel.is_none()).map(|d| d.amount as i128).sum();
        let ledger_pending: i128 = self.pending_ledger.values().filter(|(w, _)| *w == u).map(|(_, a)| *a as i128).sum();
        let dissociating: i128 =
            self.pending_deposits.iter().filter(|(_, (w, _))| *w == u).map(|(d, _)| self.deposits[d].amount as i128).sum();
        ledger + channels + free + ledger_pending + dissociating
    }

    pub fn capacity_holds(&self) -> bool {
        self.channels.iter().all(|(cid, c)| {
            let deps: u128 = self.deposits.values().filter(|d| d.channel == Some(*cid)).map(|d| d.amount as u128).sum();
            c.amount_u as u128 + c.amount_v as u128 <= deps
        })
    }

    pub fn invariants_hold(&self) -> bool {
        self.capacity_holds() && self.users().all(|u| self.state_balance(u) == self.perceived_balance(u))
    }

    pub fn apply(&mut self, op: &IdealOp) -> Result<Outcome, Fail> {
        match *op {
            IdealOp::GetLedgerBalance { of, .. } => self.ledger.get(&of).map(|b| Outcome::Balance(*b)).ok_or(Fail),
            IdealOp::AcceptLedgerPayment { caller, id } => self.accept_ledger_payment(caller, id),
            IdealOp::AddDeposit { caller, amount } => self.add_deposit(caller, amount),
            IdealOp::RemoveDeposit { caller, deposit } => self.remove_deposit(caller, deposit),
            IdealOp::OpenChannel { caller, channel, peer } => self.open_channel(caller, channel, peer),
            IdealOp::AcceptChannelOpen { caller, channel } => self.accept_channel_open(caller, channel),
            IdealOp::AssociateDeposit { caller, channel, deposit } => self.associate_deposit(caller, channel, deposit),
            IdealOp::AcceptAssociateDeposit { caller, channel, deposit } => self.accept_associate_deposit(caller, channel, deposit),
            IdealOp::DissociateDeposit { caller, deposit } => self.dissociate_deposit(caller, deposit),
            IdealOp::AcceptDissociate { caller, deposit } => self.accept_dissociate(caller, deposit),
            IdealOp::AckDissociate { caller, deposit } => self.ack_dissociate(caller, deposit),
            IdealOp::Pay { caller, channel, amount } => self.pay(caller, channel, amount),
            IdealOp::ReceivePayment { caller, id } => self.receive_payment(caller, id),
            IdealOp::SettleChannel { caller, channel } => self.settle_channel(caller, channel),
        }
    }

    /// `u` already settled `cid` and the other side has not.
    fn has_settled(&self, cid: ChannelKey, u: User) -> bool {
        self.pending_channels.get(&cid).is_some_and(|w| *w != u)
    }

    pub fn accept_ledger_payment(&mut self, u: User, id: LedgerPaymentId) -> Result<Outcome, Fail> {
        match self.pending_ledger.get(&id) {
            Some((w, amount)) if *w == u => {
                let amount = *amount;
                *self.ledger.entry(u).or_default() += amount;
                self.pending_ledger.remove(&id);
                Ok(Outcome::Done)
            }
            _ => Err(Fail),
        }
    }

    pub fn add_deposit(&mut self, u: User, amount: u64) -> Result<Outcome, Fail> {
        let bal = self.ledger.get_mut(&u).ok_or(Fail)?;
        if *bal < amount {
            return Err(Fail);
        }
        *bal -= amount;
        let id = DepositId(self.deposit_counter);
        self.deposit_counter += 1;
        self.deposits.insert(id, IdealDeposit { amount, owner: u, channel: None, symmetric: false });
        Ok(Outcome::Deposit(id))
    }

    fn new_ledger_payment(&mut self, u: User, amount: u64) -> LedgerPaymentId {
        let id = LedgerPaymentId(self.ledger_payment_counter);
        self.ledger_payment_counter += 1;
        self.pending_ledger.insert(id, (u, amount));
        id
    }

    pub fn remove_deposit(&mut self, u: User, deposit: DepositId) -> Result<Outcome, Fail> {
        match self.deposits.get(&deposit) {
            Some(d) if d.owner == u && d.channel.is_none() => {
                let amount = d.amount;
                self.deposits.remove(&deposit);
                Ok(Outcome::LedgerPayment(self.new_ledger_payment(u, amount)))
            }
            _ => Err(Fail),
        }
    }

    pub fn open_channel(&mut self, u: User, cid: ChannelKey, v: User) -> Result<Outcome, Fail> {
        if self.channels.contains_key(&cid) || u == v {
            return Err(Fail);
        }
        self.channels.insert(cid, IdealChannel { u, v, amount_u: 0, amount_v: 0, symmetric: false });
        Ok(Outcome::Done)
    }

    pub fn accept_channel_open(&mut self, v: User, cid: ChannelKey) -> Result<Outcome, Fail> {
        match self.channels.get_mut(&cid) {
            Some(c) if c.v == v && !c.symmetric => {
                c.symmetric = true;
                Ok(Outcome::Done)
            }
            _ => Err(Fail),
        }
    }

    pub fn associate_deposit(&mut self, u: User, cid: ChannelKey, deposit: DepositId) -> Result<Outcome, Fail> {
        let d = self.deposits.get(&deposit).ok_or(Fail)?;
        if d.owner != u || d.channel.is_some() || d.symmetric {
            return Err(Fail);
        }
        let amount = d.amount;
        let settled = self.has_settled(cid, u);
        let c = self.channels.get_mut(&cid).ok_or(Fail)?;
        if c.u != u && c.v != u {
            return Err(Fail);
        }
        if (c.v == u && !c.symmetric) || settled {
            return Err(Fail);
        }
        *c.side_mut(u).expect("party checked") += amount;
        let d = self.deposits.get_mut(&deposit).expect("checked");
        d.channel = Some(cid);
        d.symmetric = false;
        Ok(Outcome::Done)
    }

    pub fn accept_associate_deposit(&mut self, _v: User, cid: ChannelKey, deposit: DepositId) -> Result<Outcome, Fail> {
        match self.deposits.get_mut(&deposit) {
            Some(d) if d.channel == Some(cid) && !d.symmetric => {
                d.symmetric = true;
                Ok(Outcome::Done)
            }
            _ => Err(Fail),
        }
    }

    /// Either party may dissociate its own deposit.
    pub fn dissociate_deposit(&mut self, u: User, deposit: DepositId) -> Result<Outcome, Fail> {
        let d = self.deposits.get(&deposit).ok_or(Fail)?;
        let cid = d.channel.ok_or(Fail)?;
        if d.owner != u || self.pending_deposits.contains_key(&deposit) {
            return Err(Fail);
        }
        let amount = d.amount;
        let c = self.channels.get_mut(&cid).ok_or(Fail)?;
        let side = c.side_mut(u).ok_or(Fail)?;
        if *side < amount {
            return Err(Fail);
        }
        *side -= amount;
        self.pending_deposits.insert(deposit, (u, false));
        Ok(Outcome::Done)
    }

    pub fn accept_dissociate(&mut self, _v: User, deposit: DepositId) -> Result<Outcome, Fail> {
        match self.pending_deposits.get_mut(&deposit) {
            Some((_, accepted)) if !*accepted => {
                *accepted = true;
                Ok(Outcome::Done)
            }
            _ => Err(Fail),
        }
    }

    pub fn ack_dissociate(&mut self, u: User, deposit: DepositId) -> Result<Outcome, Fail> {
        if self.pending_deposits.get(&deposit) != Some(&(u, true)) {
            return Err(Fail);
        }
        self.pending_deposits.remove(&deposit);
        let d = self.deposits.get_mut(&deposit).expect("pending deposits exist");
        d.channel = None;
        d.symmetric = false;
        Ok(Outcome::Done)
    }

    pub fn pay(&mut self, u: User, cid: ChannelKey, amount: u64) -> Result<Outcome, Fail> {
        let c = self.channels.get_mut(&cid).ok_or(Fail)?;
        if !(c.symmetric || c.u == u) {
            return Err(Fail);
        }
        let recipient = c.other(u);
        let side = c.side_mut(u).ok_or(Fail)?;
        if amount > *side {
            return Err(Fail);
        }
        *side -= amount;
        let id = PendingPaymentId(self.payment_counter);
        self.payment_counter += 1;
        self.pending_payments.insert(id, (recipient, cid, amount));
        *self.paid.entry(u).or_default() += amount;
        Ok(Outcome::Payment(id))
    }

    /// Credits the recipient's side of the channel.
    pub fn receive_payment(&mut self, v: User, id: PendingPaymentId) -> Result<Outcome, Fail> {
        let (w, cid, amount) = *self.pending_payments.get(&id).ok_or(Fail)?;
        if w != v || self.has_settled(cid, v) {
            return Err(Fail);
        }
        let c = self.channels.get_mut(&cid).ok_or(Fail)?;
        *c.side_mut(v).ok_or(Fail)? += amount;
        self.pending_payments.remove(&id);
        *self.received.entry(v).or_default() += amount;
        Ok(Outcome::Done)
    }

    /// Pays out the caller's side plus its pending dissociations on this
    /// channel; the second party to settle removes the channel.
    pub fn settle_channel(&mut self, u: User, cid: ChannelKey) -> Result<Outcome, Fail> {
        let c = self.channels.get(&cid).ok_or(Fail)?;
        let amount_u = c.side(u).ok_or(Fail)?;
        let v = c.other(u);
        if self.pending_channels.get(&cid) == Some(&v) {
            return Err(Fail);
        }
        let pending: Vec<DepositId> =
            self.pending_deposits.iter().filter(|(d, (w, _))| *w == u && self.deposits[d].channel == Some(cid)).map(|(d, _)| *d).collect();
        let pending_sum: u64 = pending.iter().map(|d| self.deposits[d].amount).sum();
        let id = self.new_ledger_payment(u, amount_u + pending_sum);
        for d in &pending {
            self.pending_deposits.remove(d);
            self.deposits.remove(d);
        }
        *self.channels.get_mut(&cid).expect("exists").side_mut(u).expect("party") = 0;
        if self.pending_channels.remove(&cid).is_none() {
            self.pending_channels.insert(cid, v);
        } else {
            self.deposits.retain(|_, d| d.channel != Some(cid));
            self.pending_deposits.retain(|d, _| self.deposits.contains_key(d));
            self.channels.remove(&cid);
        }
        Ok(Outcome::LedgerPayment(id))
    }

    /// The operation sequence that converts everything `u` perceives into
    /// ledger funds: remove free deposits, settle open channels, then accept
    /// every resulting and already pending ledger payment.
    pub fn reclaim_all(&self, u: User) -> Vec<IdealOp> {
        let mut ops = Vec::new();
        let mut next = self.ledger_payment_counter;
        let mut accepts: Vec<LedgerPaymentId> = self.pending_ledger.iter().filter(|(_, (w, _))| *w == u).map(|(id, _)| *id).collect();
        for (id, d) in &self.deposits {
            if d.owner == u && d.channel.is_none() {
                ops.push(IdealOp::RemoveDeposit { caller: u, deposit: *id });
                accepts.push(LedgerPaymentId(next));
                next += 1;
            }
        }
        for (cid, c) in &self.channels {
            if (c.u == u || c.v == u) && self.pending_channels.get(cid) != Some(&c.other(u)) {
                ops.push(IdealOp::SettleChannel { caller: u, channel: *cid });
                accepts.push(LedgerPaymentId(next));
                next += 1;
            }
        }
        ops.extend(accepts.into_iter().map(|id| IdealOp::AcceptLedgerPayment { caller: u, id }));
        ops
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn add_deposit_debits_ledger() {
        let mut s = IdealState::new(&[(0, 100)]);
        assert_eq!(s.add_deposit(0, 10), Ok(Outcome::Deposit(DepositId(0))));
        assert_eq!(s.ledger[&0], 90);
        assert_eq!(s.add_deposit(0, 91), Err(Fail));
        assert!(s.invariants_hold());
    }

    #[test]
    fn overdraft_payment_fails_without_change() {
        let mut s = IdealState::new(&[(0, 100), (1, 0)]);
        s.open_channel(0, 7, 1).unwrap();
        s.accept_channel_open(1, 7).unwrap();
        let before = s.clone();
        assert_eq!(s.pay(0, 7, 1), Err(Fail));
        assert_eq!(s, before);
    }

    #[test]
    fn full_lifecycle() {
        let mut s = IdealState::new(&[(0, 100), (1, 50)]);
        let Outcome::Deposit(d) = s.add_deposit(0, 10).unwrap() else { panic!() };
        s.open_channel(0, 1, 1).unwrap();
        s.accept_channel_open(1, 1).unwrap();
        s.associate_deposit(0, 1, d).unwrap();
        s.accept_associate_deposit(1, 1, d).unwrap();
        let Outcome::Payment(p) = s.pay(0, 1, 3).unwrap() else { panic!() };
        s.receive_payment(1, p).unwrap();
        let Outcome::LedgerPayment(a) = s.settle_channel(0, 1).unwrap() else { panic!() };
        let Outcome::LedgerPayment(b) = s.settle_channel(1, 1).unwrap() else { panic!() };
        s.accept_ledger_payment(0, a).unwrap();
        s.accept_ledger_payment(1, b).unwrap();
        assert_eq!(s.ledger[&0], 97);
        assert_eq!(s.ledger[&1], 53);
        assert!(s.channels.is_empty() && s.deposits.is_empty());
        assert!(s.invariants_hold());
    }

    #[test]
    fn second_settle_by_same_party_fails() {
        let mut s = IdealState::new(&[(0, 10), (1, 0)]);
        s.open_channel(0, 1, 1).unwrap();
        s.settle_channel(0, 1).unwrap();
        assert_eq!(s.settle_channel(0, 1), Err(Fail));
    }

    #[test]
    fn settle_includes_only_this_channels_pending_dissociations() {
        let mut s = IdealState::new(&[(0, 100), (1, 0)]);
        let mut deps = Vec::new();
        for cid in [1, 2] {
            s.open_channel(0, cid, 1).unwrap();
            s.accept_channel_open(1, cid).unwrap();
            let Outcome::Deposit(d) = s.add_deposit(0, 10).unwrap() else { panic!() };
            s.associate_deposit(0, cid, d).unwrap();
            s.dissociate_deposit(0, d).unwrap();
            deps.push(d);
        }
        let Outcome::LedgerPayment(id) = s.settle_channel(0, 1).unwrap() else { panic!() };
        assert_eq!(s.pending_ledger[&id], (0, 10));
        assert!(s.pending_deposits.contains_key(&deps[1]));
        assert!(s.invariants_hold());
    }

    #[test]
    fn reclaim_on_empty_state_is_empty() {
        let s = IdealState::new(&[(0, 5)]);
        assert!(s.reclaim_all(0).is_empty());
    }

    #[test]
    fn reclaim_deposit_and_channel() {
        let mut s = IdealState::new(&[(0, 100), (1, 0)]);
        s.add_deposit(0, 10).unwrap();
        s.open_channel(0, 1, 1).unwrap();
        let ops = s.reclaim_all(0);
        assert_eq!(ops.len(), 4);
        for op in &ops {
            s.apply(op).unwrap();
        }
        assert_eq!(s.ledger[&0] as i128, s.perceived_balance(0));
    }

    fn op_strategy(users: u32) -> impl Strategy<Value = (u8, u32, u32, u64, u64)> {
        (0u8..14, 0..users, 0..users, 0u64..6, 0u64..40)
    }

    fn pick(s: &IdealState, kind: u8, a: User, b: User, x: u64, amt: u64) -> IdealOp {
        let dep = DepositId(x.min(s.deposit_counter.saturating_sub(1)));
        let pay = PendingPaymentId(x.min(s.payment_counter.saturating_sub(1)));
        let led = LedgerPaymentId(x.min(s.ledger_payment_counter.saturating_sub(1)));
        let cid = x % 4;
        match kind {
            0 => IdealOp::GetLedgerBalance { caller: a, of: b },
            1 => IdealOp::AcceptLedgerPayment { caller: a, id: led },
            2 => IdealOp::AddDeposit { caller: a, amount: amt },
            3 => IdealOp::RemoveDeposit { caller: a, deposit: dep },
            4 => IdealOp::OpenChannel { caller: a, channel: cid, peer: b },
            5 => IdealOp::AcceptChannelOpen { caller: a, channel: cid },
            6 => IdealOp::AssociateDeposit { caller: a, channel: cid, deposit: dep },
            7 => IdealOp::AcceptAssociateDeposit { caller: a, channel: cid, deposit: dep },
            8 => IdealOp::DissociateDeposit { caller: a, deposit: dep },
            9 => IdealOp::AcceptDissociate { caller: a, deposit: dep },
            10 => IdealOp::AckDissociate { caller: a, deposit: dep },
            11 => IdealOp::Pay { caller: a, channel: cid, amount: amt },
            12 => IdealOp::ReceivePayment { caller: a, id: pay },
            _ => IdealOp::SettleChannel { caller: a, channel: cid },
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn invariants_hold_after_every_handler_and_reclaim_reaches_perceived(
            ops in proptest::collection::vec(op_strategy(3), 0..60),
            who in 0u32..3,
        ) {
            let mut s = IdealState::new(&[(0, 100), (1, 60), (2, 30)]);
            for (kind, a, b, x, amt) in ops {
                let op = pick(&s, kind, a, b, x, amt);
                let before = s.clone();
                if s.apply(&op).is_err() {
                    prop_assert_eq!(&s, &before);
                }
                prop_assert!(s.invariants_hold(), "after {:?}", op);
            }
            let perceived = s.perceived_balance(who);
            for op in s.reclaim_all(who) {
                prop_assert!(s.apply(&op).is_ok(), "reclaim op {:?} failed", op);
            }
            prop_assert_eq!(s.ledger[&who] as i128, perceived);
        }
    }
}
