//! Hashing, signing, and authenticated encryption primitives.
//!
//! Wire-level commitments: hashes are SHA-256, signatures are Ed25519, and
//! record payloads are sealed with ChaCha20-Poly1305 under a 256-bit
//! deployment data key. All randomness is drawn from an injected RNG so
//! seeded runs reproduce byte-for-byte.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

/// 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub const ZERO: Digest32 = Digest32([0u8; 32]);

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s).map_err(|_| CryptoError::BadHex)?;
        let arr: [u8; 32] = raw.try_into().map_err(|_| CryptoError::BadLength)?;
        Ok(Digest32(arr))
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn sha256(bytes: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest32(h.finalize().into())
}

/// SHA-256 over the concatenation of several segments, without building an
/// intermediate buffer.
pub fn sha256_parts(parts: &[&[u8]]) -> Digest32 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest32(h.finalize().into())
}

/// 16-byte random value. Used both for guard-issued admission challenges and
/// for per-call replay nonces.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce16(pub [u8; 16]);

impl Nonce16 {
    pub fn random(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut raw = [0u8; 16];
        rng.fill_bytes(&mut raw);
        Nonce16(raw)
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s).map_err(|_| CryptoError::BadHex)?;
        let arr: [u8; 16] = raw.try_into().map_err(|_| CryptoError::BadLength)?;
        Ok(Nonce16(arr))
    }
}

impl fmt::Debug for Nonce16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce16({})", hex::encode(self.0))
    }
}

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn verify(&self, message: &[u8], signature: &Sig64) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        vk.verify(message, &ed25519_dalek::Signature::from_bytes(&signature.0))
            .is_ok()
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.0))
    }
}

/// Ed25519 signature bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sig64(pub [u8; 64]);

impl fmt::Debug for Sig64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig64({})", hex::encode(self.0))
    }
}

/// A named signing identity (root, guard, publisher, expert, or a simulated
/// device's in-process key holder).
#[derive(Clone)]
pub struct SigningIdentity {
    id: String,
    key: SigningKey,
}

impl SigningIdentity {
    pub fn generate(id: impl Into<String>, rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self {
            id: id.into(),
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_secret_bytes(id: impl Into<String>, seed: &[u8; 32]) -> Self {
        Self {
            id: id.into(),
            key: SigningKey::from_bytes(seed),
        }
    }

    pub fn from_secret_hex(id: impl Into<String>, s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s).map_err(|_| CryptoError::BadHex)?;
        let arr: [u8; 32] = raw.try_into().map_err(|_| CryptoError::BadLength)?;
        Ok(Self::from_secret_bytes(id, &arr))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.key.verifying_key().to_bytes())
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.key.to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Sig64 {
        Sig64(self.key.sign(message).to_bytes())
    }
}

impl fmt::Debug for SigningIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningIdentity({})", self.id)
    }
}

/// 256-bit deployment data key for sealing flow-record payloads.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DataKey(pub [u8; 32]);

const AEAD_NONCE_LEN: usize = 12;

impl DataKey {
    pub fn random(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut raw = [0u8; 32];
        rng.fill_bytes(&mut raw);
        DataKey(raw)
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s).map_err(|_| CryptoError::BadHex)?;
        let arr: [u8; 32] = raw.try_into().map_err(|_| CryptoError::BadLength)?;
        Ok(DataKey(arr))
    }

    /// Seal plaintext into a self-contained envelope: 12-byte encryption
    /// nonce followed by ciphertext and tag. A fresh nonce is drawn per call,
    /// so sealing identical plaintexts twice yields different envelopes.
    pub fn seal(&self, rng: &mut (impl RngCore + CryptoRng), plaintext: &[u8]) -> Vec<u8> {
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.0));
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce), plaintext)
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(AEAD_NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn open(&self, envelope: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if envelope.len() < AEAD_NONCE_LEN + 16 {
            return Err(CryptoError::BadEnvelope);
        }
        let (nonce, ct) = envelope.split_at(AEAD_NONCE_LEN);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.0));
        cipher
            .decrypt(Nonce::from_slice(nonce), ct)
            .map_err(|_| CryptoError::AuthFailed)
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DataKey(..)")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid hex string")]
    BadHex,
    #[error("wrong byte length")]
    BadLength,
    #[error("envelope too short to contain nonce and tag")]
    BadEnvelope,
    #[error("authentication failed: wrong key or tampered ciphertext")]
    AuthFailed,
}
