//! Trusted execution environment model.
//!
//! An enclave runs one [`Program`] whose state never leaves the enclave except
//! through sealing (encrypted under a key derived from the enclave identity) or
//! through an injected compromise. Every output is signed by the enclave
//! identity together with the program identifier, which doubles as remote
//! attestation.

use std::collections::BTreeMap;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::crypto::{self, hash, hkdf32, keygen, KeyPair, PublicKey, Signature};
use crate::encoding::{decode, encode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TeeError {
    #[error("enclave already installed")]
    AlreadyInstalled,
    #[error("no enclave installed")]
    NotInstalled,
    #[error("enclave crashed")]
    Crashed,
    #[error("enclave is not compromised")]
    NotCompromised,
    #[error("sealed blob is malformed")]
    CorruptBlob,
    #[error("sealed blob counter {blob} does not match hardware counter {hardware}")]
    StaleSnapshot { blob: u64, hardware: u64 },
    #[error("monotonic counter rate limited until t={retry_at_us}us")]
    RateLimited { retry_at_us: u64 },
    #[error("program rejected its initial input: {0}")]
    BadInit(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProgramId(pub [u8; 32]);

impl ProgramId {
    pub fn of(name: &str) -> ProgramId {
        ProgramId(hash(name.as_bytes()))
    }
}

/// Code that runs inside an enclave. State is the serialized program value.
pub trait Program: Sized + Serialize + DeserializeOwned {
    const NAME: &'static str;

    fn boot(identity: KeyPair, init: &[u8]) -> Result<Self, String>;

    fn step(&mut self, input: &[u8]) -> Vec<u8>;

    fn frozen(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnclaveStatus {
    Running,
    Crashed,
    Compromised,
    Frozen,
}

fn attestation_payload(program: &ProgramId, output: &[u8]) -> Vec<u8> {
    encode(&("teechain-attest", program, output))
}

/// Checks that `output` was produced by `program` inside the enclave `identity`.
pub fn attest_verify(program: &ProgramId, output: &[u8], sig: &Signature, identity: &PublicKey) -> bool {
    crypto::verify(identity, &attestation_payload(program, output), sig)
}

const SEAL_MAGIC: &[u8; 4] = b"TCSB";
const SEAL_VERSION: u8 = 1;

/// Sealed program state: `magic(4) | version(1) | counter(8, BE) | nonce(12) | ciphertext`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub counter: u64,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    fn header(counter: u64) -> Vec<u8> {
        let mut h = SEAL_MAGIC.to_vec();
        h.push(SEAL_VERSION);
        h.extend_from_slice(&counter.to_be_bytes());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Self::header(self.counter);
        b.extend_from_slice(&self.nonce);
        b.extend_from_slice(&self.ciphertext);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SealedBlob, TeeError> {
        if bytes.len() < 25 || &bytes[..4] != SEAL_MAGIC || bytes[4] != SEAL_VERSION {
            return Err(TeeError::CorruptBlob);
        }
        let counter = u64::from_be_bytes(bytes[5..13].try_into().expect("slice of 8"));
        let nonce: [u8; 12] = bytes[13..25].try_into().expect("slice of 12");
        Ok(SealedBlob { counter, nonce, ciphertext: bytes[25..].to_vec() })
    }
}

fn sealing_key(identity: &KeyPair, program: &ProgramId) -> [u8; 32] {
    hkdf32(identity.secret.as_bytes(), &encode(&("teechain-seal", program)))
}

fn seal_nonce(counter: u64) -> [u8; 12] {
    let h = hash(&encode(&("teechain-seal-nonce", counter)));
    h[..12].try_into().expect("slice of 12")
}

#[derive(Clone)]
pub struct Enclave<P: Program> {
    program_id: ProgramId,
    identity: KeyPair,
    program: P,
    crashed: bool,
    compromised: bool,
}

impl<P: Program> Enclave<P> {
    pub fn new(seed: [u8; 32], init: &[u8]) -> Result<Self, TeeError> {
        let identity = keygen(seed);
        let program = P::boot(identity.clone(), init).map_err(TeeError::BadInit)?;
        Ok(Enclave { program_id: ProgramId::of(P::NAME), identity, program, crashed: false, compromised: false })
    }

    pub fn identity(&self) -> PublicKey {
        self.identity.public
    }

    pub fn program_id(&self) -> ProgramId {
        self.program_id
    }

    pub fn status(&self) -> EnclaveStatus {
        if self.crashed {
            EnclaveStatus::Crashed
        } else if self.compromised {
            EnclaveStatus::Compromised
        } else if self.program.frozen() {
            EnclaveStatus::Frozen
        } else {
            EnclaveStatus::Running
        }
    }

    /// Runs one program step and returns its output with an attestation.
    pub fn resume(&mut self, input: &[u8]) -> Result<(Vec<u8>, Signature), TeeError> {
        if self.crashed {
            return Err(TeeError::Crashed);
        }
        let out = self.program.step(input);
        let sig = crypto::sign(&self.identity.secret, &attestation_payload(&self.program_id, &out));
        Ok((out, sig))
    }

    pub fn inject_crash(&mut self) {
        self.crashed = true;
    }

    pub fn inject_compromise(&mut self) {
        self.compromised = true;
    }

    /// Program state as seen by an attacker who broke the enclave.
    pub fn leak_state(&self) -> Result<Vec<u8>, TeeError> {
        if !self.compromised {
            return Err(TeeError::NotCompromised);
        }
        Ok(encode(&self.program))
    }

    /// Attestation over arbitrary output, available only after compromise.
    pub fn forge_attestation(&self, output: &[u8]) -> Result<Signature, TeeError> {
        if !self.compromised {
            return Err(TeeError::NotCompromised);
        }
        Ok(crypto::sign(&self.identity.secret, &attestation_payload(&self.program_id, output)))
    }

    pub fn seal(&self, counter: u64) -> SealedBlob {
        let nonce = seal_nonce(counter);
        let key = sealing_key(&self.identity, &self.program_id);
        let ciphertext = crypto::aead_seal(&key, nonce, &SealedBlob::header(counter), &encode(&self.program));
        SealedBlob { counter, nonce, ciphertext }
    }

    /// Recreates an enclave from a sealed blob on the same platform identity.
    pub fn unseal(seed: [u8; 32], blob: &SealedBlob, hardware_counter: u64) -> Result<Self, TeeError> {
        if blob.counter != hardware_counter {
            return Err(TeeError::StaleSnapshot { blob: blob.counter, hardware: hardware_counter });
        }
        let identity = keygen(seed);
        let program_id = ProgramId::of(P::NAME);
        let key = sealing_key(&identity, &program_id);
        let plain =
            crypto::aead_open(&key, blob.nonce, &SealedBlob::header(blob.counter), &blob.ciphertext).map_err(|_| TeeError::CorruptBlob)?;
        let program = decode(&plain).map_err(|_| TeeError::CorruptBlob)?;
        Ok(Enclave { program_id, identity, program, crashed: false, compromised: false })
    }

    /// Read-only access for invariant checks in tests and the harness.
    pub fn inspect(&self) -> &P {
        &self.program
    }

    /// Replaces program state, e.g. to roll back a step whose persistence failed.
    pub(crate) fn replace_program(&mut self, program: P) {
        self.program = program;
    }
}

/// Hardware monotonic counter with a bounded increment rate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonicCounter {
    value: u64,
    min_interval_us: u64,
    last_increment_us: Option<u64>,
}

impl MonotonicCounter {
    pub const DEFAULT_RATE_PER_SEC: u64 = 10;

    pub fn new(increments_per_sec: u64) -> Self {
        assert!(increments_per_sec > 0, "rate must be positive");
        MonotonicCounter { value: 0, min_interval_us: 1_000_000 / increments_per_sec, last_increment_us: None }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn increment(&mut self, now_us: u64) -> Result<u64, TeeError> {
        if let Some(last) = self.last_increment_us {
            let ready = last + self.min_interval_us;
            if now_us < ready {
                return Err(TeeError::RateLimited { retry_at_us: ready });
            }
        }
        self.value += 1;
        self.last_increment_us = Some(now_us);
        Ok(self.value)
    }
}

impl Default for MonotonicCounter {
    fn default() -> Self {
        Self::new(Self::DEFAULT_RATE_PER_SEC)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnclaveId(pub u32);

#[derive(Clone)]
struct Slot<P: Program> {
    seed: [u8; 32],
    enclave: Enclave<P>,
}

/// One machine's TEE hardware: enclave slots, a monotonic counter and stable
/// storage for sealed state.
#[derive(Clone)]
pub struct Platform<P: Program> {
    slots: BTreeMap<EnclaveId, Slot<P>>,
    counter: MonotonicCounter,
    storage: BTreeMap<EnclaveId, Vec<u8>>,
}

impl<P: Program> Platform<P> {
    pub fn new(counter: MonotonicCounter) -> Self {
        Platform { slots: BTreeMap::new(), counter, storage: BTreeMap::new() }
    }

    pub fn install(&mut self, id: EnclaveId, seed: [u8; 32], init: &[u8]) -> Result<PublicKey, TeeError> {
        if self.slots.contains_key(&id) {
            return Err(TeeError::AlreadyInstalled);
        }
        let enclave = Enclave::new(seed, init)?;
        let pk = enclave.identity();
        self.slots.insert(id, Slot { seed, enclave });
        Ok(pk)
    }

    pub fn enclave(&self, id: EnclaveId) -> Result<&Enclave<P>, TeeError> {
        self.slots.get(&id).map(|s| &s.enclave).ok_or(TeeError::NotInstalled)
    }

    pub fn enclave_mut(&mut self, id: EnclaveId) -> Result<&mut Enclave<P>, TeeError> {
        self.slots.get_mut(&id).map(|s| &mut s.enclave).ok_or(TeeError::NotInstalled)
    }

    pub fn resume(&mut self, id: EnclaveId, input: &[u8]) -> Result<(Vec<u8>, Signature), TeeError> {
        self.enclave_mut(id)?.resume(input)
    }

    /// Runs a step and persists the new state before releasing the output.
    /// If the counter is rate limited the step is rolled back.
    pub fn resume_persistent(&mut self, id: EnclaveId, input: &[u8], now_us: u64) -> Result<(Vec<u8>, Signature), TeeError> {
        let slot = self.slots.get_mut(&id).ok_or(TeeError::NotInstalled)?;
        if slot.enclave.crashed {
            return Err(TeeError::Crashed);
        }
        let before = encode(slot.enclave.inspect());
        let result = slot.enclave.resume(input)?;
        if encode(slot.enclave.inspect()) == before {
            return Ok(result);
        }
        match self.counter.increment(now_us) {
            Ok(value) => {
                self.storage.insert(id, slot.enclave.seal(value).to_bytes());
                Ok(result)
            }
            Err(e) => {
                slot.enclave.replace_program(decode(&before).expect("state re-decodes"));
                Err(e)
            }
        }
    }

    pub fn persist(&mut self, id: EnclaveId, now_us: u64) -> Result<u64, TeeError> {
        let slot = self.slots.get(&id).ok_or(TeeError::NotInstalled)?;
        let value = self.counter.increment(now_us)?;
        self.storage.insert(id, slot.enclave.seal(value).to_bytes());
        Ok(value)
    }

    pub fn stored_blob(&self, id: EnclaveId) -> Option<&[u8]> {
        self.storage.get(&id).map(|v| v.as_slice())
    }

    /// Host-controlled storage; an attacker may overwrite it with old blobs.
    pub fn overwrite_storage(&mut self, id: EnclaveId, bytes: Vec<u8>) {
        self.storage.insert(id, bytes);
    }

    /// Replaces a crashed enclave with one restored from stable storage.
    pub fn restore(&mut self, id: EnclaveId) -> Result<PublicKey, TeeError> {
        let slot = self.slots.get(&id).ok_or(TeeError::NotInstalled)?;
        let bytes = self.storage.get(&id).ok_or(TeeError::CorruptBlob)?;
        let blob = SealedBlob::from_bytes(bytes)?;
        let enclave = Enclave::unseal(slot.seed, &blob, self.counter.value())?;
        let pk = enclave.identity();
        self.slots.get_mut(&id).expect("checked above").enclave = enclave;
        Ok(pk)
    }

    pub fn counter(&self) -> &MonotonicCounter {
        &self.counter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Echo {
        secret: crypto::SecretKey,
        count: u64,
    }

    impl Program for Echo {
        const NAME: &'static str = "echo-v1";
        fn boot(identity: KeyPair, init: &[u8]) -> Result<Self, String> {
            if init == b"bad" {
                return Err("bad".into());
            }
            Ok(Echo { secret: identity.secret, count: 0 })
        }
        fn step(&mut self, input: &[u8]) -> Vec<u8> {
            if input != b"peek" {
                self.count += 1;
            }
            encode(&(self.count, input))
        }
    }

    #[test]
    fn resume_output_is_attested() {
        let mut e = Enclave::<Echo>::new([1; 32], b"").unwrap();
        let (out, sig) = e.resume(b"hi").unwrap();
        assert!(attest_verify(&ProgramId::of("echo-v1"), &out, &sig, &e.identity()));
        assert!(!attest_verify(&ProgramId::of("other"), &out, &sig, &e.identity()));
        assert!(!attest_verify(&ProgramId::of("echo-v1"), b"x", &sig, &e.identity()));
    }

    #[test]
    fn install_twice_fails_and_missing_slot_errors() {
        let mut p = Platform::<Echo>::new(MonotonicCounter::default());
        p.install(EnclaveId(0), [1; 32], b"").unwrap();
        assert_eq!(p.install(EnclaveId(0), [1; 32], b""), Err(TeeError::AlreadyInstalled));
        assert_eq!(p.resume(EnclaveId(9), b"").unwrap_err(), TeeError::NotInstalled);
        assert_eq!(p.install(EnclaveId(1), [1; 32], b"bad"), Err(TeeError::BadInit("bad".into())));
    }

    #[test]
    fn crash_and_compromise() {
        let mut e = Enclave::<Echo>::new([2; 32], b"").unwrap();
        assert!(e.leak_state().is_err());
        e.inject_compromise();
        assert_eq!(e.status(), EnclaveStatus::Compromised);
        let leaked = e.leak_state().unwrap();
        let seed = [2u8; 32];
        assert!(leaked.windows(32).any(|w| w == seed), "compromise exposes secrets");
        let sig = e.forge_attestation(b"anything").unwrap();
        assert!(attest_verify(&e.program_id(), b"anything", &sig, &e.identity()));
        e.inject_crash();
        assert_eq!(e.resume(b"x"), Err(TeeError::Crashed));
    }

    #[test]
    fn sealed_blob_layout_and_roundtrip() {
        let mut e = Enclave::<Echo>::new([3; 32], b"").unwrap();
        e.resume(b"a").unwrap();
        let blob = e.seal(7);
        let bytes = blob.to_bytes();
        assert_eq!(&bytes[..4], b"TCSB");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..13], &7u64.to_be_bytes());
        assert_eq!(SealedBlob::from_bytes(&bytes).unwrap(), blob);
        let restored = Enclave::<Echo>::unseal([3; 32], &blob, 7).unwrap();
        assert_eq!(restored.inspect().count, 1);
        assert_eq!(Enclave::<Echo>::unseal([3; 32], &blob, 8).err(), Some(TeeError::StaleSnapshot { blob: 7, hardware: 8 }));
        assert_eq!(Enclave::<Echo>::unseal([4; 32], &blob, 7).err(), Some(TeeError::CorruptBlob));
        let mut tampered = bytes.clone();
        tampered[6] ^= 1;
        let tb = SealedBlob::from_bytes(&tampered).unwrap();
        assert!(Enclave::<Echo>::unseal([3; 32], &tb, tb.counter).is_err());
    }

    #[test]
    fn counter_rate_limit() {
        let mut c = MonotonicCounter::new(10);
        assert_eq!(c.increment(0), Ok(1));
        assert_eq!(c.increment(50_000), Err(TeeError::RateLimited { retry_at_us: 100_000 }));
        assert_eq!(c.increment(100_000), Ok(2));
        let mut n = 0;
        let mut c = MonotonicCounter::new(10);
        for t in (0..1_000_000).step_by(1_000) {
            if c.increment(t).is_ok() {
                n += 1;
            }
        }
        assert_eq!(n, 10);
    }

    #[test]
    fn persistent_platform_rolls_back_when_rate_limited_and_restores() {
        let mut p = Platform::<Echo>::new(MonotonicCounter::new(10));
        let id = EnclaveId(0);
        p.install(id, [5; 32], b"").unwrap();
        p.resume_persistent(id, b"a", 0).unwrap();
        assert!(matches!(p.resume_persistent(id, b"b", 10), Err(TeeError::RateLimited { .. })));
        assert_eq!(p.enclave(id).unwrap().inspect().count, 1);
        p.resume_persistent(id, b"peek", 10).unwrap();
        p.resume_persistent(id, b"c", 100_000).unwrap();
        let old = p.stored_blob(id).unwrap().to_vec();
        p.resume_persistent(id, b"d", 200_000).unwrap();
        p.enclave_mut(id).unwrap().inject_crash();
        p.restore(id).unwrap();
        assert_eq!(p.enclave(id).unwrap().inspect().count, 3);
        p.overwrite_storage(id, old);
        assert!(matches!(p.restore(id), Err(TeeError::StaleSnapshot { .. })));
    }
}
