//! Guard-node logic: admit devices via attestation, screen every
//! cross-node call, decide, and drive flow-ledger recording.
//!
//! Screening checks run in a fixed order so denial reasons are audit
//! stable: session validity, approval re-check of the sender's attested
//! software, policy, parameter plausibility, then nonce freshness. The
//! first failing check names the reason. A decision, its ledger record,
//! and its nonce registration commit atomically under the flow-ledger
//! lock.
//!
//! Lock order throughout: guard state, then registry, then flow ledger,
//! then RNG. Workers may hold at most a prefix of that chain.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::attestation::{self, Attestation, RejectReason};
use crate::clock::TimeSource;
use crate::crypto::{DataKey, Digest32, Nonce16, SigningIdentity};
use crate::flowlog::{
    AppendedRecord, CallInput, Decision, FlowError, FlowLedger, LeaseEntry, ADMIT_FUNCTION,
};
use crate::ledger::BlockRef;
use crate::registry::RegistryStore;
use crate::wire::{Reader, Writer};

/// Receiver id recorded on `system.admit` records.
pub const GUARD_RECEIVER: &str = "guard";

/// Closed set of denial reasons. These strings appear in ledger records
/// and reports; renaming any of them is a format break.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenialReason {
    UnknownDevice,
    SoftwareNotApproved,
    Policy,
    ImplausibleInput,
    Replay,
    NoSession,
}

impl DenialReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenialReason::UnknownDevice => "unknown_device",
            DenialReason::SoftwareNotApproved => "software_not_approved",
            DenialReason::Policy => "policy",
            DenialReason::ImplausibleInput => "implausible_input",
            DenialReason::Replay => "replay",
            DenialReason::NoSession => "no_session",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unknown_device" => DenialReason::UnknownDevice,
            "software_not_approved" => DenialReason::SoftwareNotApproved,
            "policy" => DenialReason::Policy,
            "implausible_input" => DenialReason::ImplausibleInput,
            "replay" => DenialReason::Replay,
            "no_session" => DenialReason::NoSession,
            _ => return None,
        })
    }
}

impl fmt::Display for DenialReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A guard decision: reason is `ok` iff approved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardVerdict {
    Approved,
    Denied(DenialReason),
}

impl GuardVerdict {
    pub fn is_approved(self) -> bool {
        matches!(self, GuardVerdict::Approved)
    }

    pub fn reason_str(self) -> &'static str {
        match self {
            GuardVerdict::Approved => "ok",
            GuardVerdict::Denied(reason) => reason.as_str(),
        }
    }

    pub fn to_decision(self) -> Decision {
        match self {
            GuardVerdict::Approved => Decision::Approved,
            GuardVerdict::Denied(reason) => Decision::Denied(reason.as_str().to_string()),
        }
    }
}

/// One cross-node call as submitted for screening.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRequest {
    pub sender_node_id: String,
    pub receiver_node_id: String,
    pub function_name: String,
    pub params: Vec<u8>,
    /// Chosen by the sender; 16 bytes.
    pub replay_nonce: Nonce16,
    /// Device whose admission session authorizes this sender.
    pub session_device: String,
}

/// Admission record: exists only after verify_attestation accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub device_id: String,
    pub admitted_at_ms: u64,
    pub code_digest: Digest32,
}

/// Time-boxed screening bypass for one (caller, callee) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub caller_node_id: String,
    pub callee_node_id: String,
    pub granted_at_ms: u64,
    pub duration_ms: u64,
    pub guard_id: String,
}

impl Lease {
    /// Active iff granted_at <= now < granted_at + duration.
    pub fn active_at(&self, now_ms: u64) -> bool {
        now_ms >= self.granted_at_ms && now_ms < self.granted_at_ms + self.duration_ms
    }

    pub fn matches(&self, caller: &str, callee: &str) -> bool {
        self.caller_node_id == caller && self.callee_node_id == callee
    }

    pub fn to_entry(&self) -> LeaseEntry {
        LeaseEntry {
            start_ms: self.granted_at_ms,
            duration_ms: self.duration_ms,
            caller: self.caller_node_id.clone(),
            callee: self.callee_node_id.clone(),
        }
    }
}

/// Field kinds and bounds for parameter plausibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    Integer { min: i64, max: i64 },
    Text { max_len: u64 },
    Bytes { max_len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
}

/// Ordered field descriptors for one (receiver, function).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterSchema {
    pub fields: Vec<FieldSchema>,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("field '{0}': integer bounds inverted")]
    InvertedBounds(String),
}

impl ParameterSchema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self, SchemaError> {
        for f in &fields {
            if let FieldKind::Integer { min, max } = f.kind {
                if min > max {
                    return Err(SchemaError::InvertedBounds(f.name.clone()));
                }
            }
        }
        Ok(ParameterSchema { fields })
    }

    /// Canonical param bytes conform iff every field decodes in order
    /// within bounds and nothing trails.
    pub fn validate(&self, params: &[u8]) -> Result<(), String> {
        let mut r = Reader::new(params);
        for f in &self.fields {
            match &f.kind {
                FieldKind::Integer { min, max } => {
                    let v = r.i64().map_err(|e| format!("field '{}': {e}", f.name))?;
                    if v < *min || v > *max {
                        return Err(format!(
                            "field '{}': {v} outside [{min}, {max}]",
                            f.name
                        ));
                    }
                }
                FieldKind::Text { max_len } => {
                    let v = r.text().map_err(|e| format!("field '{}': {e}", f.name))?;
                    if v.len() as u64 > *max_len {
                        return Err(format!(
                            "field '{}': length {} exceeds {max_len}",
                            f.name,
                            v.len()
                        ));
                    }
                }
                FieldKind::Bytes { max_len } => {
                    let v = r.bytes().map_err(|e| format!("field '{}': {e}", f.name))?;
                    if v.len() as u64 > *max_len {
                        return Err(format!(
                            "field '{}': length {} exceeds {max_len}",
                            f.name,
                            v.len()
                        ));
                    }
                }
            }
        }
        r.finish().map_err(|e| e.to_string())
    }
}

/// Typed parameter values, encoded in schema field order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamValue {
    Integer(i64),
    Text(String),
    Bytes(Vec<u8>),
}

pub fn encode_params(values: &[ParamValue]) -> Vec<u8> {
    let mut w = Writer::new();
    for v in values {
        match v {
            ParamValue::Integer(i) => w.put_i64(*i),
            ParamValue::Text(s) => w.put_text(s),
            ParamValue::Bytes(b) => w.put_bytes(b),
        };
    }
    w.finish()
}

/// Mutable guard-group state shared by all workers.
#[derive(Debug, Default)]
pub struct GuardState {
    sessions: HashMap<String, Session>,
    issued_challenges: HashSet<Nonce16>,
    leases: Vec<Lease>,
    schemas: HashMap<(String, String), ParameterSchema>,
}

impl GuardState {
    pub fn session(&self, device_id: &str) -> Option<&Session> {
        self.sessions.get(device_id)
    }

    pub fn schema(&self, receiver: &str, function: &str) -> Option<&ParameterSchema> {
        self.schemas
            .get(&(receiver.to_string(), function.to_string()))
    }

    pub fn lease_entries(&self) -> Vec<LeaseEntry> {
        self.leases.iter().map(Lease::to_entry).collect()
    }

    fn active_lease(&self, caller: &str, callee: &str, now_ms: u64) -> Option<&Lease> {
        self.leases
            .iter()
            .find(|l| l.matches(caller, callee) && l.active_at(now_ms))
    }
}

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("policy: cannot lease edge ({caller} -> {callee}); no rule allows it")]
    LeaseNotAllowed { caller: String, callee: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Everything a guard worker needs, shared across the group.
pub struct GuardHub {
    state: Mutex<GuardState>,
    registry: Arc<RwLock<RegistryStore>>,
    flow: Arc<Mutex<FlowLedger>>,
    rng: Arc<Mutex<ChaCha20Rng>>,
    data_key: DataKey,
    clock: Arc<dyn TimeSource>,
    /// Chain author for flow blocks; individual workers are named in the
    /// records' guard_id field.
    author: SigningIdentity,
}

impl fmt::Debug for GuardHub {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GuardHub")
    }
}

/// Per-worker handle: the hub plus this worker's name.
#[derive(Clone, Debug)]
pub struct GuardNode {
    pub guard_id: String,
    hub: Arc<GuardHub>,
}

/// What screening produced: the verdict, the nonce actually recorded
/// (fresh if the request's nonce was already taken), and the record's
/// position and timestamp.
#[derive(Debug, Clone, Copy)]
pub struct ScreenOutcome {
    pub verdict: GuardVerdict,
    pub recorded_nonce: Nonce16,
    pub timestamp_ms: u64,
    pub block: BlockRef,
}

/// Admission attempt result; the session exists only on approval.
#[derive(Debug, Clone)]
pub struct AdmitOutcome {
    pub verdict: GuardVerdict,
    pub session: Option<Session>,
    pub timestamp_ms: u64,
    pub recorded_nonce: Nonce16,
    pub block: BlockRef,
    /// The plaintext sealed into the admission record.
    pub params: Vec<u8>,
}

/// A granted lease together with its on-chain grant record.
#[derive(Debug, Clone)]
pub struct LeaseGrant {
    pub lease: Lease,
    pub block: BlockRef,
}

impl GuardHub {
    pub fn new(
        registry: Arc<RwLock<RegistryStore>>,
        flow: Arc<Mutex<FlowLedger>>,
        rng: Arc<Mutex<ChaCha20Rng>>,
        data_key: DataKey,
        clock: Arc<dyn TimeSource>,
        author: SigningIdentity,
    ) -> Arc<Self> {
        Arc::new(GuardHub {
            state: Mutex::new(GuardState::default()),
            registry,
            flow,
            rng,
            data_key,
            clock,
            author,
        })
    }

    /// Install the schema screening consults for (receiver, function).
    pub fn install_schema(&self, receiver: &str, function: &str, schema: ParameterSchema) {
        self.state()
            .schemas
            .insert((receiver.to_string(), function.to_string()), schema);
    }

    pub fn node(self: &Arc<Self>, index: usize) -> GuardNode {
        GuardNode {
            guard_id: format!("guard-{index}"),
            hub: Arc::clone(self),
        }
    }

    pub fn state(&self) -> std::sync::MutexGuard<'_, GuardState> {
        self.state.lock().expect("guard state lock poisoned")
    }

    /// True if an active lease covers (caller, callee) right now.
    pub fn lease_active(&self, caller: &str, callee: &str) -> bool {
        let now = self.clock.now_ms();
        self.state().active_lease(caller, callee, now).is_some()
    }
}

impl GuardNode {
    pub fn hub(&self) -> &Arc<GuardHub> {
        &self.hub
    }

    /// Fresh admission challenge, tracked as issued-unused.
    pub fn issue_challenge(&self) -> Nonce16 {
        let challenge = {
            let mut rng = self.hub.rng.lock().expect("rng lock poisoned");
            Nonce16::random(&mut *rng)
        };
        self.hub.state().issued_challenges.insert(challenge);
        challenge
    }

    /// Admit a device from its load attestation. The challenge inside the
    /// attestation must have been issued here and never used; challenges
    /// are consumed by the attempt regardless of outcome. Every attempt is
    /// recorded as a `system.admit` call record.
    pub fn admit_device(&self, attestation: &Attestation) -> Result<AdmitOutcome, FlowError> {
        let challenge_fresh = self
            .hub
            .state()
            .issued_challenges
            .remove(&attestation.challenge);
        let verdict = if !challenge_fresh {
            GuardVerdict::Denied(DenialReason::Replay)
        } else {
            let check = {
                let reg = self.hub.registry.read().expect("registry lock poisoned");
                attestation::verify_attestation(
                    reg.view(),
                    reg.quorum(),
                    attestation,
                    &attestation.challenge,
                )
            };
            match check {
                Ok(()) => GuardVerdict::Approved,
                Err(reason) => GuardVerdict::Denied(map_attestation_reject(reason)),
            }
        };

        // Admission record params: the measured digests, sealed.
        let mut w = Writer::new();
        w.put_fixed(&attestation.boot_digest.0)
            .put_fixed(&attestation.code_digest.0);
        let params = w.finish();

        let (recorded, nonce) = {
            let mut flow = self.hub.flow.lock().expect("flow lock poisoned");
            let mut rng = self.hub.rng.lock().expect("rng lock poisoned");
            // The challenge doubles as the record nonce when it is still
            // unique; a reused challenge gets a fresh one.
            let nonce = if flow.nonce_seen(&attestation.challenge) {
                Nonce16::random(&mut *rng)
            } else {
                attestation.challenge
            };
            let recorded = flow.record_call(
                CallInput {
                    sender: &attestation.device_id,
                    receiver: GUARD_RECEIVER,
                    function: ADMIT_FUNCTION,
                    params: &params,
                    replay_nonce: nonce,
                    decision: verdict.to_decision(),
                    guard_id: &self.guard_id,
                },
                &self.hub.data_key,
                &mut *rng,
                &self.hub.author,
            )?;
            (recorded, nonce)
        };

        let session = if verdict.is_approved() {
            let session = Session {
                device_id: attestation.device_id.clone(),
                admitted_at_ms: recorded.timestamp_ms,
                code_digest: attestation.code_digest,
            };
            self.hub
                .state()
                .sessions
                .insert(attestation.device_id.clone(), session.clone());
            Some(session)
        } else {
            None
        };
        Ok(AdmitOutcome {
            verdict,
            session,
            timestamp_ms: recorded.timestamp_ms,
            recorded_nonce: nonce,
            block: recorded.block,
            params,
        })
    }

    /// Screen one request and record the decision. Checks 1 through 4 run
    /// against shared state; the nonce check, the record append, and the
    /// nonce registration commit together under the flow lock, so
    /// concurrent duplicates cannot both pass.
    pub fn screen_and_record(&self, request: &CallRequest) -> Result<ScreenOutcome, FlowError> {
        let precheck = self.precheck(request);

        let mut flow = self.hub.flow.lock().expect("flow lock poisoned");
        let mut rng = self.hub.rng.lock().expect("rng lock poisoned");
        let nonce_taken = flow.nonce_seen(&request.replay_nonce);
        let verdict = match precheck {
            Some(reason) => GuardVerdict::Denied(reason),
            None if nonce_taken => GuardVerdict::Denied(DenialReason::Replay),
            None => GuardVerdict::Approved,
        };
        let recorded_nonce = if nonce_taken {
            // Keep the offending request on the record without breaking
            // chain-wide nonce uniqueness.
            loop {
                let n = Nonce16::random(&mut *rng);
                if !flow.nonce_seen(&n) {
                    break n;
                }
            }
        } else {
            request.replay_nonce
        };
        let recorded: AppendedRecord = flow.record_call(
            CallInput {
                sender: &request.sender_node_id,
                receiver: &request.receiver_node_id,
                function: &request.function_name,
                params: &request.params,
                replay_nonce: recorded_nonce,
                decision: verdict.to_decision(),
                guard_id: &self.guard_id,
            },
            &self.hub.data_key,
            &mut *rng,
            &self.hub.author,
        )?;
        Ok(ScreenOutcome {
            verdict,
            recorded_nonce,
            timestamp_ms: recorded.timestamp_ms,
            block: recorded.block,
        })
    }

    /// Checks 1 through 4 in fixed order; None means all passed.
    fn precheck(&self, request: &CallRequest) -> Option<DenialReason> {
        // 1. Session validity.
        let session_digest = self
            .hub
            .state()
            .sessions
            .get(&request.session_device)
            .map(|s| s.code_digest);
        let Some(code_digest) = session_digest else {
            return Some(DenialReason::NoSession);
        };
        {
            let reg = self.hub.registry.read().expect("registry lock poisoned");
            // 2. Approval re-check: revocations take effect immediately.
            if !reg.approval_status(&code_digest).is_approved() {
                return Some(DenialReason::SoftwareNotApproved);
            }
            // 3. Policy.
            if !reg.is_call_allowed(
                &request.sender_node_id,
                &request.receiver_node_id,
                &request.function_name,
            ) {
                return Some(DenialReason::Policy);
            }
        }
        // 4. Plausibility: unknown functions have no schema and fail here.
        let state = self.hub.state();
        match state.schema(&request.receiver_node_id, &request.function_name) {
            Some(schema) if schema.validate(&request.params).is_ok() => None,
            _ => Some(DenialReason::ImplausibleInput),
        }
    }

    /// Record the response paired to an approved, screened call.
    pub fn record_response(
        &self,
        call_sender: &str,
        call_nonce: Nonce16,
        responder: &str,
        result: &[u8],
        handler_ok: bool,
    ) -> Result<AppendedRecord, FlowError> {
        let mut flow = self.hub.flow.lock().expect("flow lock poisoned");
        let mut rng = self.hub.rng.lock().expect("rng lock poisoned");
        flow.record_response(
            call_sender,
            call_nonce,
            responder,
            result,
            handler_ok,
            &self.guard_id,
            &self.hub.data_key,
            &mut *rng,
            &self.hub.author,
        )
    }

    /// Grant a screening lease. Requires that policy currently allows some
    /// function on the edge; a lease weakens auditing, never authorization.
    pub fn grant_lease(
        &self,
        caller: &str,
        callee: &str,
        duration_ms: u64,
    ) -> Result<LeaseGrant, GuardError> {
        let edge_allowed = {
            let reg = self.hub.registry.read().expect("registry lock poisoned");
            reg.view().policies().iter().any(|p| {
                (p.caller_node_id == "*" || p.caller_node_id == caller)
                    && p.callee_node_id == callee
            })
        };
        if !edge_allowed {
            return Err(GuardError::LeaseNotAllowed {
                caller: caller.to_string(),
                callee: callee.to_string(),
            });
        }
        let recorded = {
            let mut flow = self.hub.flow.lock().expect("flow lock poisoned");
            let mut rng = self.hub.rng.lock().expect("rng lock poisoned");
            flow.record_lease_grant(
                caller,
                callee,
                duration_ms,
                &self.guard_id,
                &self.hub.data_key,
                &mut *rng,
                &self.hub.author,
            )?
        };
        let lease = Lease {
            caller_node_id: caller.to_string(),
            callee_node_id: callee.to_string(),
            granted_at_ms: recorded.timestamp_ms,
            duration_ms,
            guard_id: self.guard_id.clone(),
        };
        self.hub.state().leases.push(lease.clone());
        Ok(LeaseGrant {
            lease,
            block: recorded.block,
        })
    }
}

fn map_attestation_reject(reason: RejectReason) -> DenialReason {
    match reason {
        RejectReason::UnknownDevice
        | RejectReason::BadSignature
        | RejectReason::BootMismatch => DenialReason::UnknownDevice,
        RejectReason::ChallengeMismatch => DenialReason::Replay,
        RejectReason::NotApproved => DenialReason::SoftwareNotApproved,
    }
}
