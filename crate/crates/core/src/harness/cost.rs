//! Blockchain cost accounting.
//!
//! Cost is the number of (public key, signature) pairs a transaction puts on
//! chain: every witness counts one, and every m-of-n output counts n/2 for
//! the committee keys it publishes. Single-key outputs count nothing because
//! their key is paid for by the witness that later spends them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::ledger::{OutPoint, TraceRecord, TxId};
use crate::program::ChannelId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ln,
    Dmc,
    Sfmc,
    Teechain,
}

impl std::str::FromStr for Scheme {
    type Err = CostError;
    fn from_str(s: &str) -> Result<Scheme, CostError> {
        match s.to_ascii_lowercase().as_str() {
            "ln" => Ok(Scheme::Ln),
            "dmc" => Ok(Scheme::Dmc),
            "sfmc" => Ok(Scheme::Sfmc),
            "teechain" => Ok(Scheme::Teechain),
            _ => Err(CostError::UnknownScheme(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("parameter {name} = {value} out of range")]
    ParamOutOfRange { name: &'static str, value: i64 },
    #[error("unknown scheme {0}")]
    UnknownScheme(String),
}

/// Formula parameters. `d` is the number of invalidation-tree layers, `i`
/// the number of channel-factory layers, `p` the parties sharing a factory
/// and `n` the number of channels sharing it (for SFMC) or the committee size
/// of the one deposit of a bilateral close (for Teechain). `n1, n2, m1, m2`
/// describe the two deposits of a unilateral close.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Params {
    pub d: i64,
    pub i: i64,
    pub p: i64,
    pub n: i64,
    pub n1: i64,
    pub n2: i64,
    pub m1: i64,
    pub m2: i64,
}

impl Default for Params {
    fn default() -> Self {
        Params { d: 1, i: 1, p: 3, n: 1, n1: 1, n2: 1, m1: 1, m2: 1 }
    }
}

impl Params {
    fn check(&self, scheme: Scheme) -> Result<(), CostError> {
        let bad = |name, value| Err(CostError::ParamOutOfRange { name, value });
        match scheme {
            Scheme::Ln => {}
            Scheme::Dmc => {
                if self.d < 1 {
                    return bad("d", self.d);
                }
            }
            Scheme::Sfmc => {
                if self.d < 1 {
                    return bad("d", self.d);
                }
                if self.i < 1 {
                    return bad("i", self.i);
                }
                if self.p <= 2 {
                    return bad("p", self.p);
                }
                if self.n < 1 {
                    return bad("n", self.n);
                }
            }
            Scheme::Teechain => {
                for (name, v) in [("n", self.n), ("n1", self.n1), ("n2", self.n2)] {
                    if v < 1 {
                        return bad(name, v);
                    }
                }
                if self.m1 < 1 || self.m1 > self.n1 {
                    return bad("m1", self.m1);
                }
                if self.m2 < 1 || self.m2 > self.n2 {
                    return bad("m2", self.m2);
                }
            }
        }
        Ok(())
    }
}

/// Transactions and cost of closing one channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Close {
    pub txs: Rational64,
    pub cost: Rational64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub bilateral: Close,
    pub unilateral: Close,
}

fn r(n: i64) -> Rational64 {
    Rational64::from_integer(n)
}

fn q(n: i64, d: i64) -> Rational64 {
    Rational64::new(n, d)
}

/// Closed-form transaction counts and costs per channel.
pub fn cost_formulas(scheme: Scheme, p: &Params) -> Result<CostRow, CostError> {
    p.check(scheme)?;
    let close = |txs, cost| Close { txs, cost };
    Ok(match scheme {
        Scheme::Ln => CostRow { bilateral: close(r(4), r(6)), unilateral: close(r(4), r(6)) },
        Scheme::Dmc => {
            let tree = r(1 + p.d + 2);
            CostRow { bilateral: close(r(2), r(4)), unilateral: close(tree, r(2) * tree) }
        }
        Scheme::Sfmc => {
            let tree = r(1 + p.d + 2);
            let layers = r(1 + p.i);
            CostRow {
                bilateral: close(q(2, p.n), q(2 * p.p, p.n)),
                unilateral: close(layers / r(p.n) + tree, layers * q(p.p, p.n) + r(2) * tree),
            }
        }
        Scheme::Teechain => CostRow {
            bilateral: close(r(1), r(1) + q(p.n, 2)),
            unilateral: close(r(3), r(1) + q(p.n1, 2) + r(1) + q(p.n2, 2) + r(p.m1) + r(p.m2)),
        },
    })
}

/// Cost of one confirmed transaction.
pub fn tx_cost(rec: &TraceRecord) -> Rational64 {
    let witnesses: i64 = rec.inputs.iter().map(|i| i.signatures as i64).sum();
    let keys = rec.outputs.iter().filter(|o| o.multisig).fold(Rational64::zero(), |acc, o| acc + q(o.n as i64, 2));
    r(witnesses) + keys
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCost {
    pub channel: u64,
    /// Whether any transaction settled the channel on chain.
    pub unilateral: bool,
    pub txs: u64,
    pub cost: Rational64,
    /// The Teechain formula for this channel's shape, when it has one: a
    /// bilateral close of one deposit or a unilateral close of two.
    pub formula: Option<Close>,
    pub ln: Close,
    pub dmc: Close,
    pub sfmc: Close,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub channels: Vec<ChannelCost>,
    pub total_txs: u64,
    pub total_cost: Rational64,
}

/// What the accountant needs to know about one channel.
pub struct ChannelFootprint<'a> {
    pub channel: ChannelId,
    /// Deposits ever associated, with their (m, n).
    pub deposits: &'a BTreeMap<OutPoint, (u32, u32)>,
    /// Transactions that spent a deposit to release it rather than to close.
    pub releases: &'a BTreeSet<TxId>,
}

/// Measures each channel's funding and closing transactions from the ledger
/// trace and sets them beside the competitor formulas at `params`.
pub fn measure(trace: &[TraceRecord], channels: &[ChannelFootprint<'_>], params: &Params) -> CostReport {
    let row = |s| cost_formulas(s, params).expect("competitor parameters validated by caller");
    let (ln, dmc, sfmc) = (row(Scheme::Ln), row(Scheme::Dmc), row(Scheme::Sfmc));
    let mut out = Vec::new();
    for fp in channels {
        let funding: BTreeSet<String> = fp.deposits.keys().map(|o| o.txid.to_string()).collect();
        let spent: BTreeSet<String> = fp.deposits.keys().map(|o| o.to_string()).collect();
        let releases: BTreeSet<String> = fp.releases.iter().map(|t| t.to_string()).collect();
        let mut txs = 0;
        let mut cost = Rational64::zero();
        let mut unilateral = false;
        for rec in trace {
            let closes = !releases.contains(&rec.txid) && rec.inputs.iter().any(|i| spent.contains(&i.outpoint));
            if closes {
                unilateral = true;
            }
            if closes || funding.contains(&rec.txid) {
                txs += 1;
                cost += tx_cost(rec);
            }
        }
        let shapes: Vec<(u32, u32)> = fp.deposits.values().copied().collect();
        let formula = match (unilateral, shapes.as_slice()) {
            (false, [(_, n)]) => {
                let p = Params { n: *n as i64, ..Params::default() };
                cost_formulas(Scheme::Teechain, &p).ok().map(|r| r.bilateral)
            }
            (true, [(m1, n1), (m2, n2)]) => {
                let p = Params { n1: *n1 as i64, n2: *n2 as i64, m1: *m1 as i64, m2: *m2 as i64, ..Params::default() };
                cost_formulas(Scheme::Teechain, &p).ok().map(|r| r.unilateral)
            }
            _ => None,
        };
        let pick = |row: CostRow| if unilateral { row.unilateral } else { row.bilateral };
        out.push(ChannelCost { channel: fp.channel.0, unilateral, txs, cost, formula, ln: pick(ln), dmc: pick(dmc), sfmc: pick(sfmc) });
    }
    let total_txs = out.iter().map(|c| c.txs).sum();
    let total_cost = out.iter().fold(Rational64::zero(), |a, c| a + c.cost);
    CostReport { channels: out, total_txs, total_cost }
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,close,txs,cost,formula_txs,formula_cost,ln_txs,ln_cost,dmc_txs,dmc_cost,sfmc_txs,sfmc_cost\n");
        for c in &self.channels {
            let (ft, fc) = c.formula.map_or((String::new(), String::new()), |f| (f.txs.to_string(), f.cost.to_string()));
            let _ = writeln!(
                s,
                "{},{},{},{},{ft},{fc},{},{},{},{},{},{}",
                c.channel,
                if c.unilateral { "unilateral" } else { "bilateral" },
                c.txs,
                c.cost,
                c.ln.txs,
                c.ln.cost,
                c.dmc.txs,
                c.dmc.cost,
                c.sfmc.txs,
                c.sfmc.cost
            );
        }
        let _ = writeln!(s, "total,,{},{},,,,,,,,", self.total_txs, self.total_cost);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lightning_is_constant() {
        for d in 1..4 {
            let row = cost_formulas(Scheme::Ln, &Params { d, ..Params::default() }).unwrap();
            assert_eq!(row.bilateral, Close { txs: r(4), cost: r(6) });
            assert_eq!(row.unilateral, Close { txs: r(4), cost: r(6) });
        }
    }

    #[test]
    fn teechain_rows() {
        let b = cost_formulas(Scheme::Teechain, &Params { n: 3, ..Params::default() }).unwrap();
        assert_eq!(b.bilateral, Close { txs: r(1), cost: q(5, 2) });
        let u = cost_formulas(Scheme::Teechain, &Params { n1: 3, n2: 3, m1: 2, m2: 2, ..Params::default() }).unwrap();
        assert_eq!(u.unilateral, Close { txs: r(3), cost: r(9) });
    }

    #[test]
    fn ranges_enforced() {
        let e = |s, p| cost_formulas(s, &p).unwrap_err();
        assert!(matches!(e(Scheme::Dmc, Params { d: 0, ..Params::default() }), CostError::ParamOutOfRange { name: "d", .. }));
        assert!(matches!(e(Scheme::Sfmc, Params { i: 0, ..Params::default() }), CostError::ParamOutOfRange { name: "i", .. }));
        assert!(matches!(e(Scheme::Sfmc, Params { p: 2, ..Params::default() }), CostError::ParamOutOfRange { name: "p", .. }));
        assert!(matches!(e(Scheme::Sfmc, Params { n: 0, ..Params::default() }), CostError::ParamOutOfRange { name: "n", .. }));
        assert!(matches!(e(Scheme::Teechain, Params { m1: 2, n1: 1, ..Params::default() }), CostError::ParamOutOfRange { .. }));
    }

    #[test]
    fn scheme_parses() {
        assert_eq!("SFMC".parse::<Scheme>().unwrap(), Scheme::Sfmc);
        assert!("x".parse::<Scheme>().is_err());
    }
}
