//! Signatures, hashing, authenticated key exchange and AEAD.
//!
//! Keys are derived deterministically from 32-byte seeds so whole simulations
//! replay bit-for-bit. Verification never panics on hostile input.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::encoding::encode;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("peer authentication failed")]
    AuthenticationFailure,
    #[error("AEAD open failed")]
    Aead,
}

pub type Digest = [u8; 32];

pub fn hash(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// Hash of the canonical encoding of `value`.
pub fn hash_value<T: Serialize + ?Sized>(value: &T) -> Digest {
    hash(&encode(value))
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", &hex::encode(self.0)[..12])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// An Ed25519 secret seed. Never printed.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey(pub(crate) [u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn public(&self) -> PublicKey {
        PublicKey(SigningKey::from_bytes(&self.0).verifying_key().to_bytes())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{}", &hex::encode(self.0)[..12])
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bytes(&self.0)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bytes: Vec<u8> = Deserialize::deserialize(d)?;
        let arr: [u8; 64] = bytes.try_into().map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(Signature(arr))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

pub fn keygen(seed: [u8; 32]) -> KeyPair {
    let secret = SecretKey(seed);
    KeyPair { public: secret.public(), secret }
}

/// Derives a child seed; distinct labels give independent keys.
pub fn derive_seed(parent: &[u8; 32], label: &str, counter: u64) -> [u8; 32] {
    hash_value(&(parent, label, counter))
}

pub fn sign(secret: &SecretKey, msg: &[u8]) -> Signature {
    Signature(SigningKey::from_bytes(&secret.0).sign(msg).to_bytes())
}

pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

pub fn aead_seal(key: &[u8; 32], nonce: [u8; 12], ad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    ChaCha20Poly1305::new(Key::from_slice(key))
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: ad })
        .expect("chacha20poly1305 encryption does not fail for in-memory buffers")
}

pub fn aead_open(key: &[u8; 32], nonce: [u8; 12], ad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    ChaCha20Poly1305::new(Key::from_slice(key))
        .decrypt(Nonce::from_slice(&nonce), Payload { msg: ciphertext, aad: ad })
        .map_err(|_| CryptoError::Aead)
}

pub fn hkdf32(ikm: &[u8], info: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    Hkdf::<Sha256>::new(None, ikm).expand(info, &mut out).expect("32 bytes is a valid HKDF output length");
    out
}

/// Symmetric key shared by two authenticated enclaves.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionKey {
    key: [u8; 32],
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

impl SessionKey {
    pub fn seal(&self, nonce: [u8; 12], ad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        aead_seal(&self.key, nonce, ad, plaintext)
    }

    pub fn open(&self, nonce: [u8; 12], ad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        aead_open(&self.key, nonce, ad, ciphertext)
    }

    pub fn fingerprint(&self) -> Digest {
        hash(&self.key)
    }
}

/// One side's key-exchange message: a fresh X25519 share signed by the
/// sender's identity key and bound to the intended recipient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub identity: PublicKey,
    pub ephemeral: [u8; 32],
    pub signature: Signature,
}

fn hello_payload(ephemeral: &[u8; 32], recipient: &PublicKey) -> Vec<u8> {
    encode(&("teechain-hello", ephemeral, recipient))
}

/// In-progress key exchange with one expected peer.
#[derive(Clone, Serialize, Deserialize)]
pub struct Handshake {
    me: PublicKey,
    peer: PublicKey,
    ephemeral_secret: [u8; 32],
    ephemeral_public: [u8; 32],
}

impl Handshake {
    /// Starts an exchange; `entropy` must be fresh per exchange.
    pub fn start(me: &KeyPair, peer: PublicKey, entropy: [u8; 32]) -> (Handshake, Hello) {
        let secret = x25519_dalek::StaticSecret::from(entropy);
        let public = x25519_dalek::PublicKey::from(&secret).to_bytes();
        let hello = Hello { identity: me.public, ephemeral: public, signature: sign(&me.secret, &hello_payload(&public, &peer)) };
        let hs = Handshake { me: me.public, peer, ephemeral_secret: secret.to_bytes(), ephemeral_public: public };
        (hs, hello)
    }

    pub fn peer(&self) -> PublicKey {
        self.peer
    }

    /// Completes the exchange. Fails if `hello` is not signed by the expected
    /// peer for this recipient.
    pub fn finish(&self, hello: &Hello) -> Result<SessionKey, CryptoError> {
        if hello.identity != self.peer || !verify(&hello.identity, &hello_payload(&hello.ephemeral, &self.me), &hello.signature) {
            return Err(CryptoError::AuthenticationFailure);
        }
        let secret = x25519_dalek::StaticSecret::from(self.ephemeral_secret);
        let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(hello.ephemeral));
        if !shared.was_contributory() {
            return Err(CryptoError::AuthenticationFailure);
        }
        let mut sides = [(self.me, self.ephemeral_public), (hello.identity, hello.ephemeral)];
        sides.sort();
        let key = hkdf32(shared.as_bytes(), &encode(&("teechain-session", sides)));
        Ok(SessionKey { key })
    }
}
