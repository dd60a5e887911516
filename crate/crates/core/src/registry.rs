//! The public registry chain: software manifests, expert reviews,
//! revocations, device registrations, and communication policy rules.
//!
//! Every mutation is a signed block on a [`Ledger`] of kind `registry`.
//! Queries run against a [`RegistryView`] that is maintained incrementally
//! and can always be recomputed by folding the chain from genesis; the two
//! must agree for every prefix.
//!
//! Approval follows a quorum rule: a component is approved once it has at
//! least `quorum` approve verdicts from distinct registered experts and no
//! revocation. Reject verdicts are recorded but do not veto. Revocation is
//! absorbing: no later entry restores approval.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::clock::TimeSource;
use crate::crypto::{Digest32, PublicKey, Sig64, SigningIdentity};
use crate::ledger::{
    BlockRef, DeploymentManifest, Ledger, LedgerError, LedgerKind, TAG_DEPLOYMENT_MANIFEST,
    TAG_DEVICE_REGISTRATION, TAG_EXPERT_REVIEW, TAG_POLICY_RULE, TAG_REVOCATION,
    TAG_SOFTWARE_MANIFEST,
};
use crate::wire::{Reader, WireError, Writer};

/// Wildcard marker accepted for rule caller and function fields.
pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Approve,
    Reject,
}

impl Verdict {
    pub fn as_byte(self) -> u8 {
        match self {
            Verdict::Reject => 0,
            Verdict::Approve => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(Verdict::Reject),
            1 => Ok(Verdict::Approve),
            other => Err(WireError::InvalidValue {
                field: "verdict",
                detail: other.to_string(),
            }),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "approve" => Some(Verdict::Approve),
            "reject" => Some(Verdict::Reject),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Approve => "approve",
            Verdict::Reject => "reject",
        })
    }
}

/// What an identity on the registry is for. Experts and publishers reuse
/// the device registration shape with a role flag and a zero boot digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Device,
    Expert,
    Publisher,
}

impl Role {
    pub fn as_byte(self) -> u8 {
        match self {
            Role::Device => 0,
            Role::Expert => 1,
            Role::Publisher => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(Role::Device),
            1 => Ok(Role::Expert),
            2 => Ok(Role::Publisher),
            other => Err(WireError::InvalidValue {
                field: "role",
                detail: other.to_string(),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Device => "device",
            Role::Expert => "expert",
            Role::Publisher => "publisher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftwareManifest {
    pub component_id: String,
    pub version: String,
    pub code_digest: Digest32,
    pub publisher_id: String,
    pub publisher_signature: Sig64,
    pub metadata: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertReview {
    pub component_id: String,
    pub version: String,
    pub expert_id: String,
    pub verdict: Verdict,
    pub expert_signature: Sig64,
}

impl ExpertReview {
    /// Bytes the expert signs: the reviewed code digest followed by the
    /// verdict byte.
    pub fn signing_bytes(code_digest: &Digest32, verdict: Verdict) -> Vec<u8> {
        let mut v = Vec::with_capacity(33);
        v.extend_from_slice(&code_digest.0);
        v.push(verdict.as_byte());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revocation {
    pub component_id: String,
    pub version: String,
    pub authority_id: String,
    pub reason: String,
    pub authority_signature: Sig64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRegistration {
    pub device_id: String,
    pub device_public_key: PublicKey,
    pub expected_boot_digest: Digest32,
    pub role: Role,
    pub registrar_id: String,
    pub registrar_signature: Sig64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub caller_node_id: String,
    pub callee_node_id: String,
    pub function_name: String,
    pub authority_id: String,
    pub authority_signature: Sig64,
}

impl PolicyRule {
    fn matches(&self, caller: &str, callee: &str, function: &str) -> bool {
        (self.caller_node_id == WILDCARD || self.caller_node_id == caller)
            && self.callee_node_id == callee
            && (self.function_name == WILDCARD || self.function_name == function)
    }

    /// Exactness of a match, for reporting only: exact fields outrank
    /// wildcards, effect is identical.
    fn specificity(&self) -> u8 {
        u8::from(self.caller_node_id != WILDCARD) + u8::from(self.function_name != WILDCARD)
    }
}

/// Typed view of a registry block payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegistryPayload {
    Software(SoftwareManifest),
    Review(ExpertReview),
    Revocation(Revocation),
    Device(DeviceRegistration),
    Policy(PolicyRule),
}

impl RegistryPayload {
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            RegistryPayload::Software(m) => {
                w.put_u8(TAG_SOFTWARE_MANIFEST)
                    .put_text(&m.component_id)
                    .put_text(&m.version)
                    .put_fixed(&m.code_digest.0)
                    .put_text(&m.publisher_id)
                    .put_fixed(&m.publisher_signature.0)
                    .put_text(&m.metadata);
            }
            RegistryPayload::Review(r) => {
                w.put_u8(TAG_EXPERT_REVIEW)
                    .put_text(&r.component_id)
                    .put_text(&r.version)
                    .put_text(&r.expert_id)
                    .put_u8(r.verdict.as_byte())
                    .put_fixed(&r.expert_signature.0);
            }
            RegistryPayload::Revocation(r) => {
                w.put_u8(TAG_REVOCATION)
                    .put_text(&r.component_id)
                    .put_text(&r.version)
                    .put_text(&r.authority_id)
                    .put_text(&r.reason)
                    .put_fixed(&r.authority_signature.0);
            }
            RegistryPayload::Device(d) => {
                w.put_u8(TAG_DEVICE_REGISTRATION)
                    .put_text(&d.device_id)
                    .put_fixed(&d.device_public_key.0)
                    .put_fixed(&d.expected_boot_digest.0)
                    .put_u8(d.role.as_byte())
                    .put_text(&d.registrar_id)
                    .put_fixed(&d.registrar_signature.0);
            }
            RegistryPayload::Policy(p) => {
                w.put_u8(TAG_POLICY_RULE)
                    .put_text(&p.caller_node_id)
                    .put_text(&p.callee_node_id)
                    .put_text(&p.function_name)
                    .put_text(&p.authority_id)
                    .put_fixed(&p.authority_signature.0);
            }
        }
        w.finish()
    }

    pub fn canonical_decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let payload = match tag {
            TAG_SOFTWARE_MANIFEST => RegistryPayload::Software(SoftwareManifest {
                component_id: r.text()?,
                version: r.text()?,
                code_digest: Digest32(r.fixed::<32>()?),
                publisher_id: r.text()?,
                publisher_signature: Sig64(r.fixed::<64>()?),
                metadata: r.text()?,
            }),
            TAG_EXPERT_REVIEW => RegistryPayload::Review(ExpertReview {
                component_id: r.text()?,
                version: r.text()?,
                expert_id: r.text()?,
                verdict: Verdict::from_byte(r.u8()?)?,
                expert_signature: Sig64(r.fixed::<64>()?),
            }),
            TAG_REVOCATION => RegistryPayload::Revocation(Revocation {
                component_id: r.text()?,
                version: r.text()?,
                authority_id: r.text()?,
                reason: r.text()?,
                authority_signature: Sig64(r.fixed::<64>()?),
            }),
            TAG_DEVICE_REGISTRATION => RegistryPayload::Device(DeviceRegistration {
                device_id: r.text()?,
                device_public_key: PublicKey(r.fixed::<32>()?),
                expected_boot_digest: Digest32(r.fixed::<32>()?),
                role: Role::from_byte(r.u8()?)?,
                registrar_id: r.text()?,
                registrar_signature: Sig64(r.fixed::<64>()?),
            }),
            TAG_POLICY_RULE => RegistryPayload::Policy(PolicyRule {
                caller_node_id: r.text()?,
                callee_node_id: r.text()?,
                function_name: r.text()?,
                authority_id: r.text()?,
                authority_signature: Sig64(r.fixed::<64>()?),
            }),
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(payload)
    }

    /// Canonical bytes up to (not including) the trailing signature field.
    /// This is the signing preimage for payload kinds whose signature
    /// covers the whole record rather than a named digest.
    pub fn unsigned_prefix(&self) -> Vec<u8> {
        let full = self.canonical_encode();
        match self {
            // Signature is the final 64-byte fixed field.
            RegistryPayload::Revocation(_) | RegistryPayload::Device(_) | RegistryPayload::Policy(_) => {
                full[..full.len() - 64].to_vec()
            }
            // Manifest signature covers the code digest only, review
            // signature covers digest plus verdict byte; neither uses the
            // record prefix.
            RegistryPayload::Software(_) | RegistryPayload::Review(_) => {
                unreachable!("prefix signing does not apply to this payload kind")
            }
        }
    }
}

/// Reference to an approving review: the block that holds it and the
/// expert who signed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewRef {
    pub block_index: u64,
    pub expert_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApprovalState {
    /// No manifest with this digest is on the chain.
    Unknown,
    Pending,
    Approved { approving_reviews: Vec<ReviewRef> },
    Revoked,
}

impl ApprovalState {
    pub fn as_str(&self) -> &'static str {
        match self {
            ApprovalState::Unknown => "unknown",
            ApprovalState::Pending => "pending",
            ApprovalState::Approved { .. } => "approved",
            ApprovalState::Revoked => "revoked",
        }
    }

    pub fn is_approved(&self) -> bool {
        matches!(self, ApprovalState::Approved { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SoftwareRecord {
    manifest: SoftwareManifest,
    block_index: u64,
    // expert_id -> (verdict, block index), first review per expert wins
    reviews: BTreeMap<String, (Verdict, u64)>,
    revoked: bool,
}

impl SoftwareRecord {
    fn approving_reviews(&self) -> Vec<ReviewRef> {
        self.reviews
            .iter()
            .filter(|(_, (v, _))| *v == Verdict::Approve)
            .map(|(expert, (_, idx))| ReviewRef {
                block_index: *idx,
                expert_id: expert.clone(),
            })
            .collect()
    }
}

/// Registered identity as seen by queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRecord {
    pub public_key: PublicKey,
    pub expected_boot_digest: Digest32,
    pub role: Role,
    pub block_index: u64,
}

/// Pure fold of registry chain contents. Entries that would violate an
/// admission precondition are ignored rather than failing, so the fold is
/// total over any decodable chain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegistryView {
    software: BTreeMap<(String, String), SoftwareRecord>,
    identities: BTreeMap<String, IdentityRecord>,
    policies: Vec<PolicyRule>,
    policy_keys: BTreeSet<(String, String, String)>,
}

impl RegistryView {
    /// Recompute the view by folding every post-genesis block.
    pub fn from_ledger(ledger: &Ledger) -> Self {
        let mut view = RegistryView::default();
        for block in ledger.blocks() {
            if block.header.payload_tag == TAG_DEPLOYMENT_MANIFEST {
                continue;
            }
            if let Ok(payload) = RegistryPayload::canonical_decode(&block.payload) {
                view.apply(block.header.index, &payload);
            }
        }
        view
    }

    pub fn apply(&mut self, block_index: u64, payload: &RegistryPayload) {
        match payload {
            RegistryPayload::Software(m) => {
                let key = (m.component_id.clone(), m.version.clone());
                self.software.entry(key).or_insert_with(|| SoftwareRecord {
                    manifest: m.clone(),
                    block_index,
                    reviews: BTreeMap::new(),
                    revoked: false,
                });
            }
            RegistryPayload::Review(r) => {
                let key = (r.component_id.clone(), r.version.clone());
                if let Some(rec) = self.software.get_mut(&key) {
                    rec.reviews
                        .entry(r.expert_id.clone())
                        .or_insert((r.verdict, block_index));
                }
            }
            RegistryPayload::Revocation(r) => {
                let key = (r.component_id.clone(), r.version.clone());
                if let Some(rec) = self.software.get_mut(&key) {
                    rec.revoked = true;
                }
            }
            RegistryPayload::Device(d) => {
                self.identities
                    .entry(d.device_id.clone())
                    .or_insert(IdentityRecord {
                        public_key: d.device_public_key,
                        expected_boot_digest: d.expected_boot_digest,
                        role: d.role,
                        block_index,
                    });
            }
            RegistryPayload::Policy(p) => {
                let key = (
                    p.caller_node_id.clone(),
                    p.callee_node_id.clone(),
                    p.function_name.clone(),
                );
                if self.policy_keys.insert(key) {
                    self.policies.push(p.clone());
                }
            }
        }
    }

    pub fn software(&self, component_id: &str, version: &str) -> Option<&SoftwareManifest> {
        self.software
            .get(&(component_id.to_string(), version.to_string()))
            .map(|r| &r.manifest)
    }

    pub fn identity(&self, id: &str) -> Option<&IdentityRecord> {
        self.identities.get(id)
    }

    pub fn identity_with_role(&self, id: &str, role: Role) -> Option<&IdentityRecord> {
        self.identities.get(id).filter(|r| r.role == role)
    }

    pub fn policies(&self) -> &[PolicyRule] {
        &self.policies
    }

    /// Approval state for a code digest, folding every manifest that
    /// carries it. Any revocation is absorbing across all of them.
    pub fn approval_status(&self, code_digest: &Digest32, quorum: u64) -> ApprovalState {
        let mut seen = false;
        let mut approved: Option<Vec<ReviewRef>> = None;
        for rec in self.software.values() {
            if rec.manifest.code_digest != *code_digest {
                continue;
            }
            seen = true;
            if rec.revoked {
                return ApprovalState::Revoked;
            }
            let approving = rec.approving_reviews();
            if (approving.len() as u64) >= quorum && approved.is_none() {
                approved = Some(approving);
            }
        }
        match (seen, approved) {
            (false, _) => ApprovalState::Unknown,
            (true, Some(approving_reviews)) => ApprovalState::Approved { approving_reviews },
            (true, None) => ApprovalState::Pending,
        }
    }

    /// Approval state addressed by (component, version) instead of digest.
    pub fn component_status(&self, component_id: &str, version: &str, quorum: u64) -> ApprovalState {
        match self
            .software
            .get(&(component_id.to_string(), version.to_string()))
        {
            None => ApprovalState::Unknown,
            Some(rec) if rec.revoked => ApprovalState::Revoked,
            Some(rec) => {
                let approving = rec.approving_reviews();
                if (approving.len() as u64) >= quorum {
                    ApprovalState::Approved {
                        approving_reviews: approving,
                    }
                } else {
                    ApprovalState::Pending
                }
            }
        }
    }

    /// Default deny; allow iff some rule matches.
    pub fn is_call_allowed(&self, caller: &str, callee: &str, function: &str) -> bool {
        self.matching_rule(caller, callee, function).is_some()
    }

    /// Most specific matching rule, for reporting.
    pub fn matching_rule(&self, caller: &str, callee: &str, function: &str) -> Option<&PolicyRule> {
        self.policies
            .iter()
            .filter(|p| p.matches(caller, callee, function))
            .max_by_key(|p| p.specificity())
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("authorization: {0}")]
    Unauthorized(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Registry chain plus its incrementally maintained view. The store owns
/// the anchor identity that authors blocks; payload signatures come from
/// the acting identities passed per call.
pub struct RegistryStore {
    ledger: Ledger,
    view: RegistryView,
    author: SigningIdentity,
    clock: Arc<dyn TimeSource>,
}

impl RegistryStore {
    pub fn create(
        path: &Path,
        deployment_id: &str,
        quorum: u64,
        author: SigningIdentity,
        clock: Arc<dyn TimeSource>,
    ) -> Result<Self, RegistryError> {
        let manifest = Self::manifest(deployment_id, quorum, &author);
        let ledger = Ledger::create(path, manifest, &author, clock.as_ref())?;
        Ok(Self::wrap(ledger, author, clock))
    }

    pub fn create_in_memory(
        deployment_id: &str,
        quorum: u64,
        author: SigningIdentity,
        clock: Arc<dyn TimeSource>,
    ) -> Result<Self, RegistryError> {
        let manifest = Self::manifest(deployment_id, quorum, &author);
        let ledger = Ledger::create_in_memory(manifest, &author, clock.as_ref())?;
        Ok(Self::wrap(ledger, author, clock))
    }

    fn manifest(deployment_id: &str, quorum: u64, author: &SigningIdentity) -> DeploymentManifest {
        DeploymentManifest {
            deployment_id: deployment_id.to_string(),
            kind: LedgerKind::Registry,
            quorum,
            anchors: vec![(author.id().to_string(), author.public_key())],
        }
    }

    /// Open an existing chain and rebuild the view from scratch.
    pub fn open(
        path: &Path,
        author: SigningIdentity,
        clock: Arc<dyn TimeSource>,
    ) -> Result<Self, RegistryError> {
        let ledger = Ledger::open(path)?;
        Ok(Self::wrap(ledger, author, clock))
    }

    fn wrap(ledger: Ledger, author: SigningIdentity, clock: Arc<dyn TimeSource>) -> Self {
        let view = RegistryView::from_ledger(&ledger);
        RegistryStore {
            ledger,
            view,
            author,
            clock,
        }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn view(&self) -> &RegistryView {
        &self.view
    }

    pub fn author(&self) -> &SigningIdentity {
        &self.author
    }

    pub fn quorum(&self) -> u64 {
        self.ledger.quorum()
    }

    fn append(&mut self, payload: RegistryPayload) -> Result<BlockRef, RegistryError> {
        let bytes = payload.canonical_encode();
        let block_ref = self
            .ledger
            .append(&bytes, &self.author, self.clock.as_ref())?;
        self.view.apply(block_ref.index, &payload);
        Ok(block_ref)
    }

    fn is_anchor(&self, identity: &SigningIdentity) -> bool {
        self.ledger
            .trust_anchors()
            .get(identity.id())
            .is_some_and(|k| *k == identity.public_key())
    }

    /// Registered identity whose stored key matches the presented one.
    fn registered_as(&self, identity: &SigningIdentity, role: Role) -> bool {
        self.view
            .identity_with_role(identity.id(), role)
            .is_some_and(|r| r.public_key == identity.public_key())
    }

    /// An authority for revocations and policy rules: the chain anchor or a
    /// registered expert.
    fn is_authority(&self, identity: &SigningIdentity) -> bool {
        self.is_anchor(identity) || self.registered_as(identity, Role::Expert)
    }

    /// Register any identity: devices carry their expected boot digest,
    /// experts and publishers a zero digest. Registrar must be the anchor.
    pub fn register_identity(
        &mut self,
        device_id: &str,
        device_public_key: PublicKey,
        expected_boot_digest: Digest32,
        role: Role,
        registrar: &SigningIdentity,
    ) -> Result<BlockRef, RegistryError> {
        if !self.is_anchor(registrar) {
            return Err(RegistryError::Unauthorized(format!(
                "registrar '{}' is not a trust anchor",
                registrar.id()
            )));
        }
        if self.view.identity(device_id).is_some() {
            return Err(RegistryError::Conflict(format!(
                "identity '{device_id}' already registered"
            )));
        }
        let mut reg = DeviceRegistration {
            device_id: device_id.to_string(),
            device_public_key,
            expected_boot_digest,
            role,
            registrar_id: registrar.id().to_string(),
            registrar_signature: Sig64([0; 64]),
        };
        let preimage = RegistryPayload::Device(reg.clone()).unsigned_prefix();
        reg.registrar_signature = registrar.sign(&preimage);
        self.append(RegistryPayload::Device(reg))
    }

    pub fn register_software(
        &mut self,
        component_id: &str,
        version: &str,
        code_digest: Digest32,
        metadata: &str,
        publisher: &SigningIdentity,
    ) -> Result<BlockRef, RegistryError> {
        if !self.registered_as(publisher, Role::Publisher) {
            return Err(RegistryError::Unauthorized(format!(
                "publisher '{}' is not registered",
                publisher.id()
            )));
        }
        if self.view.software(component_id, version).is_some() {
            return Err(RegistryError::Conflict(format!(
                "component '{component_id}' version '{version}' already registered"
            )));
        }
        let manifest = SoftwareManifest {
            component_id: component_id.to_string(),
            version: version.to_string(),
            code_digest,
            publisher_id: publisher.id().to_string(),
            publisher_signature: publisher.sign(&code_digest.0),
            metadata: metadata.to_string(),
        };
        self.append(RegistryPayload::Software(manifest))
    }

    /// Admit an externally signed manifest, re-checking the signature
    /// against the registered publisher key.
    pub fn register_signed_manifest(
        &mut self,
        manifest: SoftwareManifest,
    ) -> Result<BlockRef, RegistryError> {
        let publisher = self
            .view
            .identity_with_role(&manifest.publisher_id, Role::Publisher)
            .ok_or_else(|| {
                RegistryError::Unauthorized(format!(
                    "publisher '{}' is not registered",
                    manifest.publisher_id
                ))
            })?;
        if !publisher
            .public_key
            .verify(&manifest.code_digest.0, &manifest.publisher_signature)
        {
            return Err(RegistryError::Unauthorized(
                "publisher signature does not verify".into(),
            ));
        }
        if self
            .view
            .software(&manifest.component_id, &manifest.version)
            .is_some()
        {
            return Err(RegistryError::Conflict(format!(
                "component '{}' version '{}' already registered",
                manifest.component_id, manifest.version
            )));
        }
        self.append(RegistryPayload::Software(manifest))
    }

    pub fn submit_review(
        &mut self,
        component_id: &str,
        version: &str,
        verdict: Verdict,
        expert: &SigningIdentity,
    ) -> Result<BlockRef, RegistryError> {
        let manifest = self
            .view
            .software(component_id, version)
            .ok_or_else(|| {
                RegistryError::NotFound(format!(
                    "component '{component_id}' version '{version}'"
                ))
            })?
            .clone();
        if !self.registered_as(expert, Role::Expert) {
            return Err(RegistryError::Unauthorized(format!(
                "expert '{}' is not registered",
                expert.id()
            )));
        }
        let key = (component_id.to_string(), version.to_string());
        if self
            .view
            .software
            .get(&key)
            .is_some_and(|r| r.reviews.contains_key(expert.id()))
        {
            return Err(RegistryError::Conflict(format!(
                "expert '{}' already reviewed '{component_id}' '{version}'",
                expert.id()
            )));
        }
        let signature =
            expert.sign(&ExpertReview::signing_bytes(&manifest.code_digest, verdict));
        let review = ExpertReview {
            component_id: component_id.to_string(),
            version: version.to_string(),
            expert_id: expert.id().to_string(),
            verdict,
            expert_signature: signature,
        };
        self.append(RegistryPayload::Review(review))
    }

    pub fn revoke_software(
        &mut self,
        component_id: &str,
        version: &str,
        reason: &str,
        authority: &SigningIdentity,
    ) -> Result<BlockRef, RegistryError> {
        if self.view.software(component_id, version).is_none() {
            return Err(RegistryError::NotFound(format!(
                "component '{component_id}' version '{version}'"
            )));
        }
        if !self.is_authority(authority) {
            return Err(RegistryError::Unauthorized(format!(
                "'{}' may not revoke",
                authority.id()
            )));
        }
        let mut revocation = Revocation {
            component_id: component_id.to_string(),
            version: version.to_string(),
            authority_id: authority.id().to_string(),
            reason: reason.to_string(),
            authority_signature: Sig64([0; 64]),
        };
        let preimage = RegistryPayload::Revocation(revocation.clone()).unsigned_prefix();
        revocation.authority_signature = authority.sign(&preimage);
        self.append(RegistryPayload::Revocation(revocation))
    }

    pub fn add_policy_rule(
        &mut self,
        caller: &str,
        callee: &str,
        function: &str,
        authority: &SigningIdentity,
    ) -> Result<BlockRef, RegistryError> {
        if !self.is_authority(authority) {
            return Err(RegistryError::Unauthorized(format!(
                "'{}' may not add policy rules",
                authority.id()
            )));
        }
        let key = (caller.to_string(), callee.to_string(), function.to_string());
        if self.view.policy_keys.contains(&key) {
            return Err(RegistryError::Conflict(format!(
                "rule ({caller}, {callee}, {function}) already active"
            )));
        }
        let mut rule = PolicyRule {
            caller_node_id: caller.to_string(),
            callee_node_id: callee.to_string(),
            function_name: function.to_string(),
            authority_id: authority.id().to_string(),
            authority_signature: Sig64([0; 64]),
        };
        let preimage = RegistryPayload::Policy(rule.clone()).unsigned_prefix();
        rule.authority_signature = authority.sign(&preimage);
        self.append(RegistryPayload::Policy(rule))
    }

    pub fn approval_status(&self, code_digest: &Digest32) -> ApprovalState {
        self.view.approval_status(code_digest, self.quorum())
    }

    pub fn component_status(&self, component_id: &str, version: &str) -> ApprovalState {
        self.view
            .component_status(component_id, version, self.quorum())
    }

    pub fn is_call_allowed(&self, caller: &str, callee: &str, function: &str) -> bool {
        self.view.is_call_allowed(caller, callee, function)
    }
}
