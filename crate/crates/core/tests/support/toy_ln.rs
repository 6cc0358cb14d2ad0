//! A two-party channel with revocable commitments and a relative timeout,
//! as in Lightning-style designs. Publishing a commitment pays the other
//! side at once and locks the publisher's share for `to_self_delay`; during
//! that window the other side may claim everything with the revocation
//! secret if the commitment is stale. Afterwards the publisher sweeps.

/// Balances of (a, b) in one commitment.
pub type State = (u64, u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Party {
    A,
    B,
}

#[derive(Clone, Copy, Debug)]
struct Published {
    by: Party,
    state: usize,
    at: u64,
}

#[derive(Clone, Debug)]
pub struct ToyLn {
    pub to_self_delay: u64,
    states: Vec<State>,
    published: Option<Published>,
    /// Final on-chain payout once the channel is closed.
    pub payout: Option<State>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyError {
    AlreadyPublished,
    NothingPublished,
    NotRevoked,
    StillLocked,
    OwnCommitment,
    Closed,
}

impl ToyLn {
    pub fn open(funding: State, to_self_delay: u64) -> ToyLn {
        ToyLn { to_self_delay, states: vec![funding], published: None, payout: None }
    }

    /// Moves `amount` from a to b in a new commitment, revoking the old one.
    pub fn pay_a_to_b(&mut self, amount: u64) {
        let (a, b) = *self.states.last().expect("channel has a state");
        self.states.push((a - amount, b + amount));
    }

    pub fn latest(&self) -> usize {
        self.states.len() - 1
    }

    /// Publishes commitment `state`, stale or not.
    pub fn publish(&mut self, by: Party, state: usize, now: u64) -> Result<(), ToyError> {
        if self.payout.is_some() {
            return Err(ToyError::Closed);
        }
        if self.published.is_some() {
            return Err(ToyError::AlreadyPublished);
        }
        self.published = Some(Published { by, state, at: now });
        Ok(())
    }

    /// The counterparty's justice transaction: valid only on a revoked
    /// commitment the publisher has not yet swept.
    pub fn justice(&mut self, by: Party) -> Result<(), ToyError> {
        let p = self.published.ok_or(ToyError::NothingPublished)?;
        if self.payout.is_some() {
            return Err(ToyError::Closed);
        }
        if p.by == by {
            return Err(ToyError::OwnCommitment);
        }
        if p.state == self.latest() {
            return Err(ToyError::NotRevoked);
        }
        let total = self.states[0].0 + self.states[0].1;
        self.payout = Some(match by {
            Party::A => (total, 0),
            Party::B => (0, total),
        });
        Ok(())
    }

    /// The publisher claims its delayed share once the timeout expires.
    pub fn sweep(&mut self, now: u64) -> Result<(), ToyError> {
        let p = self.published.ok_or(ToyError::NothingPublished)?;
        if self.payout.is_some() {
            return Err(ToyError::Closed);
        }
        if now < p.at + self.to_self_delay {
            return Err(ToyError::StillLocked);
        }
        self.payout = Some(self.states[p.state]);
        Ok(())
    }
}
