//! Simulated device root of trust: boot-measurement chain, software-load
//! attestation, and user-facing verification codes.
//!
//! The TPM is an in-process key holder. Boot measurement uses rolling-hash
//! extension: starting from 32 zero bytes, each stage folds in as
//! `digest := H(digest || stage_code_digest)`. Load attestations bind a
//! guard-supplied 16-byte challenge so they cannot be replayed across
//! admissions.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::clock::TimeSource;
use crate::crypto::{sha256, sha256_parts, Digest32, Nonce16, Sig64, SigningIdentity};
use crate::registry::{ApprovalState, RegistryView, Role};
use crate::wire::Writer;

/// Token version prefix for rendered verification codes.
const TOKEN_PREFIX: &str = "BBX1";

#[derive(Debug, Error)]
pub enum AttestationError {
    #[error("configuration: boot stage list is empty")]
    EmptyBootStages,
    #[error("protocol: challenge must be 16 bytes, got {0}")]
    MalformedChallenge(usize),
    #[error("state: no software loaded")]
    NothingLoaded,
}

/// In-process stand-in for a device with a TPM: identity key, measured
/// boot stages, and the digest of whatever software is currently loaded.
#[derive(Clone)]
pub struct DeviceState {
    identity: SigningIdentity,
    boot_stages: Vec<(String, Digest32)>,
    loaded_code_digest: Option<Digest32>,
}

impl fmt::Debug for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DeviceState({}, {} stages, loaded={})",
            self.identity.id(),
            self.boot_stages.len(),
            self.loaded_code_digest.is_some()
        )
    }
}

impl DeviceState {
    pub fn device_id(&self) -> &str {
        self.identity.id()
    }

    pub fn identity(&self) -> &SigningIdentity {
        &self.identity
    }

    pub fn public_key(&self) -> crate::crypto::PublicKey {
        self.identity.public_key()
    }

    pub fn boot_stages(&self) -> &[(String, Digest32)] {
        &self.boot_stages
    }

    pub fn loaded_code_digest(&self) -> Option<Digest32> {
        self.loaded_code_digest
    }
}

/// Fresh simulated device: new key pair, recorded boot stages, nothing
/// loaded yet.
pub fn initialize_device(
    device_id: &str,
    boot_stages: Vec<(String, Digest32)>,
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<DeviceState, AttestationError> {
    if boot_stages.is_empty() {
        return Err(AttestationError::EmptyBootStages);
    }
    Ok(DeviceState {
        identity: SigningIdentity::generate(device_id, rng),
        boot_stages,
        loaded_code_digest: None,
    })
}

/// Rolling boot digest: digest_0 is 32 zero bytes, each stage extends it
/// with `H(digest || stage_code_digest)`.
pub fn measure_boot_chain(device: &DeviceState) -> Digest32 {
    fold_boot_digests(device.boot_stages.iter().map(|(_, d)| *d))
}

/// The same fold over bare stage digests, for callers that know the
/// expected stage list without holding a device.
pub fn fold_boot_digests(stage_digests: impl IntoIterator<Item = Digest32>) -> Digest32 {
    let mut digest = Digest32::ZERO;
    for stage in stage_digests {
        digest = sha256_parts(&[&digest.0, &stage.0]);
    }
    digest
}

/// Signed statement that a device with a given boot measurement has loaded
/// a given piece of software, bound to a one-shot challenge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attestation {
    pub device_id: String,
    pub boot_digest: Digest32,
    pub code_digest: Digest32,
    pub challenge: Nonce16,
    pub signature: Sig64,
}

impl Attestation {
    /// Signed message: boot_digest || code_digest || challenge.
    pub fn signing_bytes(
        boot_digest: &Digest32,
        code_digest: &Digest32,
        challenge: &Nonce16,
    ) -> Vec<u8> {
        let mut v = Vec::with_capacity(80);
        v.extend_from_slice(&boot_digest.0);
        v.extend_from_slice(&code_digest.0);
        v.extend_from_slice(&challenge.0);
        v
    }
}

/// Measure `code_bytes`, record the digest as loaded, and sign the
/// attestation over the supplied challenge.
pub fn attest_load(
    device: &mut DeviceState,
    code_bytes: &[u8],
    challenge: &[u8],
) -> Result<Attestation, AttestationError> {
    let challenge: [u8; 16] = challenge
        .try_into()
        .map_err(|_| AttestationError::MalformedChallenge(challenge.len()))?;
    let challenge = Nonce16(challenge);
    let code_digest = sha256(code_bytes);
    device.loaded_code_digest = Some(code_digest);
    let boot_digest = measure_boot_chain(device);
    let signature = device
        .identity
        .sign(&Attestation::signing_bytes(&boot_digest, &code_digest, &challenge));
    Ok(Attestation {
        device_id: device.identity.id().to_string(),
        boot_digest,
        code_digest,
        challenge,
        signature,
    })
}

/// Why an attestation was rejected; the first failing check names the
/// reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    UnknownDevice,
    BadSignature,
    BootMismatch,
    ChallengeMismatch,
    NotApproved,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::UnknownDevice => "unknown device",
            RejectReason::BadSignature => "bad signature",
            RejectReason::BootMismatch => "boot digest mismatch",
            RejectReason::ChallengeMismatch => "challenge mismatch",
            RejectReason::NotApproved => "software not approved",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Check an attestation against the registry. Checks run in a fixed order
/// and the first failure wins: registration, signature, boot digest,
/// challenge, approval state.
pub fn verify_attestation(
    view: &RegistryView,
    quorum: u64,
    attestation: &Attestation,
    expected_challenge: &Nonce16,
) -> Result<(), RejectReason> {
    let record = view
        .identity_with_role(&attestation.device_id, Role::Device)
        .ok_or(RejectReason::UnknownDevice)?;
    let message = Attestation::signing_bytes(
        &attestation.boot_digest,
        &attestation.code_digest,
        &attestation.challenge,
    );
    if !record.public_key.verify(&message, &attestation.signature) {
        return Err(RejectReason::BadSignature);
    }
    if attestation.boot_digest != record.expected_boot_digest {
        return Err(RejectReason::BootMismatch);
    }
    if attestation.challenge != *expected_challenge {
        return Err(RejectReason::ChallengeMismatch);
    }
    if !view
        .approval_status(&attestation.code_digest, quorum)
        .is_approved()
    {
        return Err(RejectReason::NotApproved);
    }
    Ok(())
}

/// User-facing proof of what a device is running, renderable as a QR
/// payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationCode {
    pub device_id: String,
    pub code_digest: Digest32,
    pub timestamp_ms: u64,
    pub signature: Sig64,
}

impl VerificationCode {
    /// Signed message: canonical encoding of (device_id, code_digest,
    /// timestamp).
    pub fn signing_bytes(device_id: &str, code_digest: &Digest32, timestamp_ms: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_text(device_id)
            .put_fixed(&code_digest.0)
            .put_u64(timestamp_ms);
        w.finish()
    }

    /// `BBX1.<device_id>.<hex digest>.<decimal timestamp>.<base64url sig>`
    pub fn render(&self) -> String {
        format!(
            "{TOKEN_PREFIX}.{}.{}.{}.{}",
            self.device_id,
            self.code_digest.to_hex(),
            self.timestamp_ms,
            URL_SAFE_NO_PAD.encode(self.signature.0),
        )
    }

    /// Strict inverse of [`render`](Self::render). Field charsets are
    /// exact: lowercase hex, plain decimal, unpadded base64url; anything
    /// else is a fault, never a lenient parse.
    pub fn parse(token: &str) -> Result<Self, TokenFault> {
        let rest = token
            .strip_prefix("BBX1.")
            .ok_or_else(|| TokenFault::Malformed("missing version prefix".into()))?;
        // device_id may itself contain dots; the three trailing fields are
        // fixed-format, so split from the right.
        let mut parts = rest.rsplitn(4, '.');
        let sig_part = parts.next().unwrap_or_default();
        let ts_part = parts.next().ok_or_else(too_few)?;
        let digest_part = parts.next().ok_or_else(too_few)?;
        let device_id = parts.next().ok_or_else(too_few)?;
        if device_id.is_empty() {
            return Err(TokenFault::Malformed("empty device id".into()));
        }
        if digest_part.len() != 64
            || !digest_part
                .chars()
                .all(|c| matches!(c, '0'..='9' | 'a'..='f'))
        {
            return Err(TokenFault::Malformed("digest is not 64 lowercase hex".into()));
        }
        let code_digest = Digest32::from_hex(digest_part)
            .map_err(|_| TokenFault::Malformed("digest is not 64 lowercase hex".into()))?;
        if ts_part.is_empty() || !ts_part.chars().all(|c| c.is_ascii_digit()) {
            return Err(TokenFault::Malformed("timestamp is not decimal".into()));
        }
        let timestamp_ms: u64 = ts_part
            .parse()
            .map_err(|_| TokenFault::Malformed("timestamp out of range".into()))?;
        let sig_raw = URL_SAFE_NO_PAD
            .decode(sig_part)
            .map_err(|_| TokenFault::Malformed("signature is not base64url".into()))?;
        let signature: [u8; 64] = sig_raw
            .try_into()
            .map_err(|_| TokenFault::Malformed("signature is not 64 bytes".into()))?;
        Ok(VerificationCode {
            device_id: device_id.to_string(),
            code_digest,
            timestamp_ms,
            signature: Sig64(signature),
        })
    }
}

fn too_few() -> TokenFault {
    TokenFault::Malformed("too few fields".into())
}

/// Sign the currently loaded digest with the device key at the current
/// tick.
pub fn make_verification_code(
    device: &DeviceState,
    clock: &dyn TimeSource,
) -> Result<VerificationCode, AttestationError> {
    let code_digest = device
        .loaded_code_digest
        .ok_or(AttestationError::NothingLoaded)?;
    let timestamp_ms = clock.now_ms();
    let signature = device.identity.sign(&VerificationCode::signing_bytes(
        device.identity.id(),
        &code_digest,
        timestamp_ms,
    ));
    Ok(VerificationCode {
        device_id: device.identity.id().to_string(),
        code_digest,
        timestamp_ms,
        signature,
    })
}

/// Faults that make a token invalid as a token, before approval is even
/// considered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenFault {
    Malformed(String),
    UnknownDevice(String),
    BadSignature,
}

impl fmt::Display for TokenFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenFault::Malformed(detail) => write!(f, "malformed token: {detail}"),
            TokenFault::UnknownDevice(id) => write!(f, "unknown device '{id}'"),
            TokenFault::BadSignature => f.write_str("signature does not verify"),
        }
    }
}

/// Outcome of checking a rendered token against the registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodeCheckOutcome {
    /// Genuine token, software approved.
    Accept {
        device_id: String,
        code_digest: Digest32,
        timestamp_ms: u64,
    },
    /// Genuine token, but the software is not in approved state.
    NotApproved {
        device_id: String,
        state: ApprovalState,
    },
    /// Not a genuine token at all.
    Invalid(TokenFault),
}

/// Parse and check a rendered token: structure, device registration,
/// signature, then approval state.
pub fn check_verification_code(
    view: &RegistryView,
    quorum: u64,
    token: &str,
) -> CodeCheckOutcome {
    let code = match VerificationCode::parse(token) {
        Ok(code) => code,
        Err(fault) => return CodeCheckOutcome::Invalid(fault),
    };
    let Some(record) = view.identity_with_role(&code.device_id, Role::Device) else {
        return CodeCheckOutcome::Invalid(TokenFault::UnknownDevice(code.device_id));
    };
    let message =
        VerificationCode::signing_bytes(&code.device_id, &code.code_digest, code.timestamp_ms);
    if !record.public_key.verify(&message, &code.signature) {
        return CodeCheckOutcome::Invalid(TokenFault::BadSignature);
    }
    let state = view.approval_status(&code.code_digest, quorum);
    if state.is_approved() {
        CodeCheckOutcome::Accept {
            device_id: code.device_id,
            code_digest: code.code_digest,
            timestamp_ms: code.timestamp_ms,
        }
    } else {
        CodeCheckOutcome::NotApproved {
            device_id: code.device_id,
            state,
        }
    }
}
