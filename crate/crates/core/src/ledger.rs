//! Simulated UTXO ledger.
//!
//! Outputs are locked to a single key or an m-of-n key list. Transactions are
//! accepted into a mempool after signature and value checks; confirmation is
//! driven externally (by the scheduler) and drops transactions whose inputs
//! were spent in the meantime. Fees are zero and amounts are integers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, hash_value, KeyPair, PublicKey, Signature};
use crate::encoding::encode;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("invalid signature on input {0}")]
    InvalidSignature(OutPoint),
    #[error("unknown input {0}")]
    UnknownInput(OutPoint),
    #[error("insufficient signatures on input {0}")]
    InsufficientSignatures(OutPoint),
    #[error("inputs and outputs do not balance")]
    ValueMismatch,
    #[error("malformed transaction: {0}")]
    Malformed(&'static str),
    #[error("invalid address policy")]
    InvalidAddress,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub [u8; 32]);

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx:{}", &hex::encode(self.0)[..12])
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: TxId,
    pub index: u32,
}

impl fmt::Display for OutPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.txid, self.index)
    }
}

/// Spending policy of an output.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Address {
    Single(PublicKey),
    /// `m` of the listed keys must sign. Deposits always use this form, with
    /// `keys.len() == 1` for an unreplicated deposit.
    Multisig {
        m: u32,
        keys: Vec<PublicKey>,
    },
}

impl Address {
    pub fn multisig(m: u32, keys: Vec<PublicKey>) -> Result<Address, LedgerError> {
        let a = Address::Multisig { m, keys };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        match self {
            Address::Single(_) => Ok(()),
            Address::Multisig { m, keys } => {
                let distinct: BTreeSet<_> = keys.iter().collect();
                if *m == 0 || (*m as usize) > keys.len() || distinct.len() != keys.len() {
                    Err(LedgerError::InvalidAddress)
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn keys(&self) -> &[PublicKey] {
        match self {
            Address::Single(k) => std::slice::from_ref(k),
            Address::Multisig { keys, .. } => keys,
        }
    }

    pub fn threshold(&self) -> u32 {
        match self {
            Address::Single(_) => 1,
            Address::Multisig { m, .. } => *m,
        }
    }

    pub fn is_multisig(&self) -> bool {
        matches!(self, Address::Multisig { .. })
    }

    pub fn render(&self) -> String {
        match self {
            Address::Single(k) => format!("pk:{k}"),
            Address::Multisig { m, keys } => {
                let ks: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
                format!("{m}-of-{}:{}", keys.len(), ks.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOut {
    pub address: Address,
    pub amount: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub key_index: u32,
    pub signature: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxIn {
    pub prevout: OutPoint,
    pub witnesses: Vec<Witness>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PaymentId(pub [u8; 32]);

impl fmt::Debug for PaymentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pay:{}", &hex::encode(self.0)[..12])
    }
}

impl fmt::Display for PaymentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Which global state of a multi-hop payment a settlement reflects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TagKind {
    /// Local channel settlement before the payment.
    Pre,
    /// Local channel settlement after the payment.
    Post,
    /// The path-wide settlement transaction; reflects the post-payment state.
    Path,
}

impl TagKind {
    pub fn is_post(self) -> bool {
        matches!(self, TagKind::Post | TagKind::Path)
    }
}

/// Signed marker binding a settlement to a multi-hop payment state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxTag {
    pub payment: PaymentId,
    pub kind: TagKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub inputs: Vec<TxIn>,
    pub outputs: Vec<TxOut>,
    pub tag: Option<TxTag>,
}

impl Transaction {
    pub fn unsigned(prevouts: Vec<OutPoint>, outputs: Vec<TxOut>, tag: Option<TxTag>) -> Transaction {
        let inputs = prevouts.into_iter().map(|prevout| TxIn { prevout, witnesses: Vec::new() }).collect();
        Transaction { inputs, outputs, tag }
    }

    /// Identifier over everything except witnesses, so independently collected
    /// signatures refer to the same transaction.
    pub fn txid(&self) -> TxId {
        let prevouts: Vec<&OutPoint> = self.inputs.iter().map(|i| &i.prevout).collect();
        TxId(hash_value(&("teechain-tx", prevouts, &self.outputs, &self.tag)))
    }

    /// Bytes covered by every input signature.
    pub fn sighash(&self) -> Vec<u8> {
        encode(&("teechain-sighash", self.txid()))
    }

    pub fn prevouts(&self) -> impl Iterator<Item = &OutPoint> {
        self.inputs.iter().map(|i| &i.prevout)
    }

    pub fn output_total(&self) -> u64 {
        self.outputs.iter().map(|o| o.amount).sum()
    }

    pub fn paid_to(&self, address: &Address) -> u64 {
        self.outputs.iter().filter(|o| &o.address == address).map(|o| o.amount).sum()
    }

    pub fn conflicts_with(&self, other: &Transaction) -> bool {
        let mine: BTreeSet<_> = self.prevouts().collect();
        other.prevouts().any(|p| mine.contains(p))
    }

    /// Adds a witness for `input` unless that key already signed it.
    pub fn add_witness(&mut self, input: usize, witness: Witness) {
        let ws = &mut self.inputs[input].witnesses;
        if !ws.iter().any(|w| w.key_index == witness.key_index) {
            ws.push(witness);
            ws.sort_by_key(|w| w.key_index);
        }
    }

    /// Signs every input locked to `address` with `key`, if `key` is listed.
    pub fn sign_inputs_for(&mut self, address_of: impl Fn(&OutPoint) -> Option<Address>, key: &KeyPair) -> usize {
        let msg = self.sighash();
        let mut signed = 0;
        for i in 0..self.inputs.len() {
            let Some(addr) = address_of(&self.inputs[i].prevout) else { continue };
            if let Some(idx) = addr.keys().iter().position(|k| *k == key.public) {
                let signature = crypto::sign(&key.secret, &msg);
                self.add_witness(i, Witness { key_index: idx as u32, signature });
                signed += 1;
            }
        }
        signed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputStatus {
    Unspent,
    Spent(TxId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerOutput {
    pub id: OutPoint,
    pub address: Address,
    pub amount: u64,
    pub status: OutputStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Confirmation {
    Confirmed { txid: TxId, height: u64 },
    Conflicted { txid: TxId },
}

impl Confirmation {
    pub fn txid(&self) -> TxId {
        match self {
            Confirmation::Confirmed { txid, .. } | Confirmation::Conflicted { txid } => *txid,
        }
    }
}

/// Ledger-signed statement that a transaction is confirmed. Enclaves verify it
/// against the ledger key they were configured with, so hosts cannot forge
/// confirmations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationCert {
    pub txid: TxId,
    pub height: u64,
    pub tip: u64,
    pub signature: Signature,
}

fn cert_payload(txid: &TxId, height: u64, tip: u64) -> Vec<u8> {
    encode(&("teechain-confirmation", txid, height, tip))
}

impl ConfirmationCert {
    pub fn verify(&self, ledger_key: &PublicKey) -> bool {
        self.tip >= self.height && crypto::verify(ledger_key, &cert_payload(&self.txid, self.height, self.tip), &self.signature)
    }

    pub fn depth(&self) -> u64 {
        self.tip - self.height + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceInput {
    pub outpoint: String,
    pub signatures: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOutput {
    pub address: String,
    pub m: u32,
    pub n: u32,
    pub multisig: bool,
    pub amount: u64,
}

/// One JSON-lines record per confirmed transaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub height: u64,
    pub txid: String,
    pub inputs: Vec<TraceInput>,
    pub outputs: Vec<TraceOutput>,
}

impl TraceRecord {
    fn of(height: u64, tx: &Transaction) -> TraceRecord {
        TraceRecord {
            height,
            txid: tx.txid().to_string(),
            inputs: tx
                .inputs
                .iter()
                .map(|i| TraceInput { outpoint: i.prevout.to_string(), signatures: i.witnesses.len() as u32 })
                .collect(),
            outputs: tx
                .outputs
                .iter()
                .map(|o| TraceOutput {
                    address: o.address.render(),
                    m: o.address.threshold(),
                    n: o.address.keys().len() as u32,
                    multisig: o.address.is_multisig(),
                    amount: o.amount,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ledger {
    key: KeyPair,
    outputs: BTreeMap<OutPoint, LedgerOutput>,
    mempool: Vec<Transaction>,
    confirmed: BTreeMap<TxId, (u64, Transaction)>,
    conflicted: BTreeSet<TxId>,
    height: u64,
    trace: Vec<TraceRecord>,
}

impl Ledger {
    /// Creates a ledger whose height-0 transaction mints `grants`.
    pub fn genesis(key_seed: [u8; 32], grants: &[(Address, u64)]) -> Ledger {
        let tx = Transaction {
            inputs: Vec::new(),
            outputs: grants.iter().map(|(a, v)| TxOut { address: a.clone(), amount: *v }).collect(),
            tag: None,
        };
        let mut ledger = Ledger {
            key: crypto::keygen(key_seed),
            outputs: BTreeMap::new(),
            mempool: Vec::new(),
            confirmed: BTreeMap::new(),
            conflicted: BTreeSet::new(),
            height: 0,
            trace: Vec::new(),
        };
        ledger.apply(tx, 0);
        ledger
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn submit(&mut self, tx: Transaction) -> Result<TxId, LedgerError> {
        let txid = tx.txid();
        if self.confirmed.contains_key(&txid) || self.mempool.iter().any(|t| t.txid() == txid) {
            return Ok(txid);
        }
        if tx.inputs.is_empty() || tx.outputs.is_empty() {
            return Err(LedgerError::Malformed("empty inputs or outputs"));
        }
        if tx.prevouts().collect::<BTreeSet<_>>().len() != tx.inputs.len() {
            return Err(LedgerError::Malformed("duplicate input"));
        }
        if tx.outputs.iter().any(|o| o.amount == 0) {
            return Err(LedgerError::Malformed("zero-value output"));
        }
        for o in &tx.outputs {
            o.address.validate()?;
        }
        let msg = tx.sighash();
        let mut total_in: u64 = 0;
        for input in &tx.inputs {
            let prev = self.outputs.get(&input.prevout).ok_or(LedgerError::UnknownInput(input.prevout))?;
            let keys = prev.address.keys();
            let mut seen = BTreeSet::new();
            for w in &input.witnesses {
                let key = keys.get(w.key_index as usize).ok_or(LedgerError::InvalidSignature(input.prevout))?;
                if !seen.insert(w.key_index) || !crypto::verify(key, &msg, &w.signature) {
                    return Err(LedgerError::InvalidSignature(input.prevout));
                }
            }
            if (seen.len() as u32) < prev.address.threshold() {
                return Err(LedgerError::InsufficientSignatures(input.prevout));
            }
            total_in = total_in.checked_add(prev.amount).ok_or(LedgerError::ValueMismatch)?;
        }
        let total_out = tx.outputs.iter().try_fold(0u64, |acc, o| acc.checked_add(o.amount));
        if total_out != Some(total_in) {
            return Err(LedgerError::ValueMismatch);
        }
        self.mempool.push(tx);
        Ok(txid)
    }

    pub fn mempool(&self) -> &[Transaction] {
        &self.mempool
    }

    pub fn mempool_ids(&self) -> Vec<TxId> {
        self.mempool.iter().map(|t| t.txid()).collect()
    }

    /// Confirms (or drops as conflicted) the oldest mempool transaction.
    pub fn confirm_next(&mut self) -> Option<Confirmation> {
        self.confirm_at(0)
    }

    /// Confirms (or drops as conflicted) the mempool transaction at `index`.
    pub fn confirm_at(&mut self, index: usize) -> Option<Confirmation> {
        if index >= self.mempool.len() {
            return None;
        }
        let tx = self.mempool.remove(index);
        let txid = tx.txid();
        let spendable = tx.prevouts().all(|p| matches!(self.outputs.get(p).map(|o| o.status), Some(OutputStatus::Unspent)));
        if !spendable {
            self.conflicted.insert(txid);
            return Some(Confirmation::Conflicted { txid });
        }
        self.height += 1;
        let height = self.height;
        self.apply(tx, height);
        Some(Confirmation::Confirmed { txid, height })
    }

    pub fn confirm(&mut self, txid: &TxId) -> Option<Confirmation> {
        let idx = self.mempool.iter().position(|t| t.txid() == *txid)?;
        self.confirm_at(idx)
    }

    /// Confirms the whole mempool in FIFO order.
    pub fn confirm_all(&mut self) -> Vec<Confirmation> {
        let mut out = Vec::new();
        while let Some(c) = self.confirm_next() {
            out.push(c);
        }
        out
    }

    fn apply(&mut self, tx: Transaction, height: u64) {
        let txid = tx.txid();
        for p in tx.prevouts() {
            if let Some(o) = self.outputs.get_mut(p) {
                o.status = OutputStatus::Spent(txid);
            }
        }
        for (i, o) in tx.outputs.iter().enumerate() {
            let id = OutPoint { txid, index: i as u32 };
            self.outputs.insert(id, LedgerOutput { id, address: o.address.clone(), amount: o.amount, status: OutputStatus::Unspent });
        }
        self.trace.push(TraceRecord::of(height, &tx));
        self.confirmed.insert(txid, (height, tx));
    }

    pub fn output(&self, p: &OutPoint) -> Option<&LedgerOutput> {
        self.outputs.get(p)
    }

    pub fn is_unspent(&self, p: &OutPoint) -> bool {
        matches!(self.outputs.get(p).map(|o| o.status), Some(OutputStatus::Unspent))
    }

    pub fn is_confirmed(&self, txid: &TxId) -> bool {
        self.confirmed.contains_key(txid)
    }

    pub fn was_conflicted(&self, txid: &TxId) -> bool {
        self.conflicted.contains(txid)
    }

    pub fn confirmed_tx(&self, txid: &TxId) -> Option<&Transaction> {
        self.confirmed.get(txid).map(|(_, t)| t)
    }

    pub fn confirmed_txs(&self) -> impl Iterator<Item = &Transaction> {
        self.confirmed.values().map(|(_, t)| t)
    }

    pub fn certify(&self, txid: &TxId) -> Option<ConfirmationCert> {
        let (height, _) = self.confirmed.get(txid)?;
        let signature = crypto::sign(&self.key.secret, &cert_payload(txid, *height, self.height));
        Some(ConfirmationCert { txid: *txid, height: *height, tip: self.height, signature })
    }

    /// Sum of unspent confirmed outputs locked to the single key `pk`.
    pub fn balance_of(&self, pk: &PublicKey) -> u64 {
        self.outputs.values().filter(|o| o.status == OutputStatus::Unspent && o.address == Address::Single(*pk)).map(|o| o.amount).sum()
    }

    pub fn unspent_for(&self, address: &Address) -> Vec<LedgerOutput> {
        self.outputs.values().filter(|o| o.status == OutputStatus::Unspent && &o.address == address).cloned().collect()
    }

    pub fn total_supply(&self) -> u64 {
        self.outputs.values().filter(|o| o.status == OutputStatus::Unspent).map(|o| o.amount).sum()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            s.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            s.push('\n');
        }
        s
    }
}
