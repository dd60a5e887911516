//! The non-public flow chain: every guard decision, call, and response,
//! with parameter and result bytes sealed under the deployment data key.
//!
//! Record headers (sender, receiver, function, decision) stay plaintext so
//! audits can count and index without the key; only parameter and result
//! bytes are confidential. Calls pair with responses through
//! `call_id = (sender, replay_nonce)`, which is collision-free because
//! replay nonces are unique across the whole chain.
//!
//! Two function names are reserved: `system.admit` records device admission
//! attempts and `system.lease` records approval leases, which mark
//! intervals where calls may have bypassed recording.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::clock::TimeSource;
use crate::crypto::{DataKey, Nonce16, PublicKey, SigningIdentity};
use crate::ledger::{
    Block, BlockRef, DeploymentManifest, Ledger, LedgerError, LedgerKind, TAG_DEPLOYMENT_MANIFEST,
    TAG_FLOW_CALL, TAG_FLOW_RESPONSE,
};
use crate::wire::{Reader, WireError, Writer};

/// Reserved function name for device admission records.
pub const ADMIT_FUNCTION: &str = "system.admit";
/// Reserved function name for approval-lease grant records.
pub const LEASE_FUNCTION: &str = "system.lease";

/// Guard verdict carried on every call record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Approved,
    Denied(String),
}

impl Decision {
    pub fn is_approved(&self) -> bool {
        matches!(self, Decision::Approved)
    }

    pub fn reason(&self) -> &str {
        match self {
            Decision::Approved => "ok",
            Decision::Denied(reason) => reason,
        }
    }

    fn encode(&self, w: &mut Writer) {
        match self {
            Decision::Approved => w.put_u8(1).put_text("ok"),
            Decision::Denied(reason) => w.put_u8(0).put_text(reason),
        };
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let flag = r.u8()?;
        let reason = r.text()?;
        match flag {
            1 => Ok(Decision::Approved),
            0 => Ok(Decision::Denied(reason)),
            other => Err(WireError::InvalidValue {
                field: "decision",
                detail: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Approved => f.write_str("approved"),
            Decision::Denied(reason) => write!(f, "denied:{reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub sender: String,
    pub receiver: String,
    pub function: String,
    pub replay_nonce: Nonce16,
    pub timestamp_ms: u64,
    pub decision: Decision,
    pub guard_id: String,
    /// Sealed parameter bytes.
    pub ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseRecord {
    pub call_sender: String,
    pub call_nonce: Nonce16,
    pub responder: String,
    pub timestamp_ms: u64,
    /// Whether the handler completed normally; the sealed bytes carry its
    /// result either way.
    pub handler_ok: bool,
    pub guard_id: String,
    pub ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowPayload {
    Call(CallRecord),
    Response(ResponseRecord),
}

impl FlowPayload {
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            FlowPayload::Call(c) => {
                w.put_u8(TAG_FLOW_CALL)
                    .put_text(&c.sender)
                    .put_text(&c.receiver)
                    .put_text(&c.function)
                    .put_fixed(&c.replay_nonce.0)
                    .put_u64(c.timestamp_ms);
                c.decision.encode(&mut w);
                w.put_text(&c.guard_id).put_bytes(&c.ciphertext);
            }
            FlowPayload::Response(r) => {
                w.put_u8(TAG_FLOW_RESPONSE)
                    .put_text(&r.call_sender)
                    .put_fixed(&r.call_nonce.0)
                    .put_text(&r.responder)
                    .put_u64(r.timestamp_ms)
                    .put_u8(u8::from(r.handler_ok))
                    .put_text(&r.guard_id)
                    .put_bytes(&r.ciphertext);
            }
        }
        w.finish()
    }

    pub fn canonical_decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let payload = match tag {
            TAG_FLOW_CALL => FlowPayload::Call(CallRecord {
                sender: r.text()?,
                receiver: r.text()?,
                function: r.text()?,
                replay_nonce: Nonce16(r.fixed::<16>()?),
                timestamp_ms: r.u64()?,
                decision: Decision::decode(&mut r)?,
                guard_id: r.text()?,
                ciphertext: r.bytes()?,
            }),
            TAG_FLOW_RESPONSE => FlowPayload::Response(ResponseRecord {
                call_sender: r.text()?,
                call_nonce: Nonce16(r.fixed::<16>()?),
                responder: r.text()?,
                timestamp_ms: r.u64()?,
                handler_ok: match r.u8()? {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(WireError::InvalidValue {
                            field: "handler_ok",
                            detail: other.to_string(),
                        })
                    }
                },
                guard_id: r.text()?,
                ciphertext: r.bytes()?,
            }),
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(payload)
    }
}

/// Decrypted view of one response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseTrace {
    pub responder: String,
    pub timestamp_ms: u64,
    pub handler_ok: bool,
    pub result: Vec<u8>,
}

/// Decrypted view of one call record with its paired response, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallTrace {
    pub sender: String,
    pub receiver: String,
    pub function: String,
    pub replay_nonce: Nonce16,
    pub timestamp_ms: u64,
    pub decision: Decision,
    pub guard_id: String,
    pub params: Vec<u8>,
    pub response: Option<ResponseTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEntry {
    Call(CallTrace),
    /// Interval during which calls between the pair may have bypassed
    /// recording.
    LeaseGap {
        caller: String,
        callee: String,
        start_ms: u64,
        end_ms: u64,
    },
}

/// Ordered decrypted history: every call record in chain order, lease
/// grants rendered as gap markers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlowTrace {
    pub entries: Vec<TraceEntry>,
}

impl FlowTrace {
    pub fn calls(&self) -> impl Iterator<Item = &CallTrace> {
        self.entries.iter().filter_map(|e| match e {
            TraceEntry::Call(c) => Some(c),
            TraceEntry::LeaseGap { .. } => None,
        })
    }

    /// Stable text rendering, one line per entry.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            match entry {
                TraceEntry::Call(c) => {
                    out.push_str(&format!(
                        "call sender={} receiver={} function={} nonce={} ts={} decision={} guard={} params={}",
                        c.sender,
                        c.receiver,
                        c.function,
                        c.replay_nonce.to_hex(),
                        c.timestamp_ms,
                        c.decision,
                        c.guard_id,
                        hex::encode(&c.params),
                    ));
                    match &c.response {
                        Some(r) => out.push_str(&format!(
                            " response responder={} ts={} ok={} result={}\n",
                            r.responder,
                            r.timestamp_ms,
                            r.handler_ok,
                            hex::encode(&r.result),
                        )),
                        None => out.push('\n'),
                    }
                }
                TraceEntry::LeaseGap {
                    caller,
                    callee,
                    start_ms,
                    end_ms,
                } => {
                    out.push_str(&format!(
                        "lease_gap caller={caller} callee={callee} start={start_ms} end={end_ms}\n"
                    ));
                }
            }
        }
        out
    }
}

/// One approval-lease grant, as persisted in the lease log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaseEntry {
    pub start_ms: u64,
    pub duration_ms: u64,
    pub caller: String,
    pub callee: String,
}

impl LeaseEntry {
    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.duration_ms
    }
}

/// Lease log line format: `<start_ms> <duration_ms> <caller> <callee>`.
pub fn render_lease_log(entries: &[LeaseEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{} {} {} {}\n",
            e.start_ms, e.duration_ms, e.caller, e.callee
        ));
    }
    out
}

pub fn parse_lease_log(text: &str) -> Result<Vec<LeaseEntry>, FlowError> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(FlowError::BadLeaseLog(format!(
                "line {}: expected 4 fields",
                lineno + 1
            )));
        }
        let start_ms = fields[0].parse().map_err(|_| {
            FlowError::BadLeaseLog(format!("line {}: bad start", lineno + 1))
        })?;
        let duration_ms = fields[1].parse().map_err(|_| {
            FlowError::BadLeaseLog(format!("line {}: bad duration", lineno + 1))
        })?;
        entries.push(LeaseEntry {
            start_ms,
            duration_ms,
            caller: fields[2].to_string(),
            callee: fields[3].to_string(),
        });
    }
    Ok(entries)
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("replay: nonce already recorded; denial appended at block {}", denial.index)]
    Replay { denial: BlockRef },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("state: call {0} was denied and takes no response")]
    RespondingToDenied(String),
    #[error("decryption failed at block {block_index}: wrong data key or corrupt envelope")]
    Decryption { block_index: u64 },
    #[error("integrity: chain invalid at block {index} ({check})")]
    Integrity { index: u64, check: &'static str },
    #[error("lease log: {0}")]
    BadLeaseLog(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Key for pairing calls and responses.
type CallId = (String, Nonce16);

#[derive(Debug, Clone, Copy)]
struct CallState {
    approved: bool,
    responded: bool,
}

/// Inputs for one call record; plaintext params are sealed inside.
#[derive(Debug, Clone)]
pub struct CallInput<'a> {
    pub sender: &'a str,
    pub receiver: &'a str,
    pub function: &'a str,
    pub params: &'a [u8],
    pub replay_nonce: Nonce16,
    pub decision: Decision,
    pub guard_id: &'a str,
}

/// Result of a successful append: where the block landed and the record
/// timestamp, which live trace capture reuses verbatim.
#[derive(Debug, Clone, Copy)]
pub struct AppendedRecord {
    pub block: BlockRef,
    pub timestamp_ms: u64,
}

/// Flow chain plus the pairing and nonce state needed to enforce record
/// invariants on append.
pub struct FlowLedger {
    ledger: Ledger,
    nonces: HashSet<Nonce16>,
    calls: HashMap<CallId, CallState>,
    clock: Arc<dyn TimeSource>,
}

impl FlowLedger {
    pub fn create(
        path: &Path,
        deployment_id: &str,
        quorum: u64,
        anchors: Vec<(String, PublicKey)>,
        genesis_author: &SigningIdentity,
        clock: Arc<dyn TimeSource>,
    ) -> Result<Self, FlowError> {
        let manifest = DeploymentManifest {
            deployment_id: deployment_id.to_string(),
            kind: LedgerKind::Flow,
            quorum,
            anchors,
        };
        let ledger = Ledger::create(path, manifest, genesis_author, clock.as_ref())?;
        Ok(Self::wrap(ledger, clock))
    }

    pub fn create_in_memory(
        deployment_id: &str,
        quorum: u64,
        anchors: Vec<(String, PublicKey)>,
        genesis_author: &SigningIdentity,
        clock: Arc<dyn TimeSource>,
    ) -> Result<Self, FlowError> {
        let manifest = DeploymentManifest {
            deployment_id: deployment_id.to_string(),
            kind: LedgerKind::Flow,
            quorum,
            anchors,
        };
        let ledger = Ledger::create_in_memory(manifest, genesis_author, clock.as_ref())?;
        Ok(Self::wrap(ledger, clock))
    }

    /// Open an existing flow chain, rebuilding nonce and pairing state from
    /// the records.
    pub fn open(path: &Path, clock: Arc<dyn TimeSource>) -> Result<Self, FlowError> {
        let ledger = Ledger::open(path)?;
        Ok(Self::wrap(ledger, clock))
    }

    fn wrap(ledger: Ledger, clock: Arc<dyn TimeSource>) -> Self {
        let mut nonces = HashSet::new();
        let mut calls = HashMap::new();
        for block in ledger.blocks() {
            if block.header.payload_tag == TAG_DEPLOYMENT_MANIFEST {
                continue;
            }
            if let Ok(payload) = FlowPayload::canonical_decode(&block.payload) {
                match payload {
                    FlowPayload::Call(c) => {
                        nonces.insert(c.replay_nonce);
                        calls.insert(
                            (c.sender, c.replay_nonce),
                            CallState {
                                approved: c.decision == Decision::Approved,
                                responded: false,
                            },
                        );
                    }
                    FlowPayload::Response(r) => {
                        if let Some(state) = calls.get_mut(&(r.call_sender, r.call_nonce)) {
                            state.responded = true;
                        }
                    }
                }
            }
        }
        FlowLedger {
            ledger,
            nonces,
            calls,
            clock,
        }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// True if this nonce already appears on a call record.
    pub fn nonce_seen(&self, nonce: &Nonce16) -> bool {
        self.nonces.contains(nonce)
    }

    /// Append one call record. Parameters are sealed before anything is
    /// written. A duplicate nonce is itself evidence: the attempt is
    /// recorded as a denied call with reason `replay` under a fresh nonce
    /// (the offending nonce stays unique on the chain), and an error is
    /// returned.
    pub fn record_call(
        &mut self,
        input: CallInput<'_>,
        key: &DataKey,
        rng: &mut (impl RngCore + CryptoRng),
        author: &SigningIdentity,
    ) -> Result<AppendedRecord, FlowError> {
        if self.nonces.contains(&input.replay_nonce) {
            let fresh = loop {
                let n = Nonce16::random(rng);
                if !self.nonces.contains(&n) {
                    break n;
                }
            };
            let denial = self.append_call(
                CallInput {
                    replay_nonce: fresh,
                    decision: Decision::Denied("replay".into()),
                    ..input
                },
                key,
                rng,
                author,
            )?;
            return Err(FlowError::Replay {
                denial: denial.block,
            });
        }
        self.append_call(input, key, rng, author)
    }

    fn append_call(
        &mut self,
        input: CallInput<'_>,
        key: &DataKey,
        rng: &mut (impl RngCore + CryptoRng),
        author: &SigningIdentity,
    ) -> Result<AppendedRecord, FlowError> {
        let timestamp_ms = self.clock.now_ms();
        let record = CallRecord {
            sender: input.sender.to_string(),
            receiver: input.receiver.to_string(),
            function: input.function.to_string(),
            replay_nonce: input.replay_nonce,
            timestamp_ms,
            decision: input.decision.clone(),
            guard_id: input.guard_id.to_string(),
            ciphertext: key.seal(rng, input.params),
        };
        let payload = FlowPayload::Call(record).canonical_encode();
        let block = self
            .ledger
            .append(&payload, author, self.clock.as_ref())?;
        self.nonces.insert(input.replay_nonce);
        self.calls.insert(
            (input.sender.to_string(), input.replay_nonce),
            CallState {
                approved: input.decision.is_approved(),
                responded: false,
            },
        );
        Ok(AppendedRecord {
            block,
            timestamp_ms,
        })
    }

    /// Append the response paired to an earlier approved call.
    #[allow(clippy::too_many_arguments)]
    pub fn record_response(
        &mut self,
        call_sender: &str,
        call_nonce: Nonce16,
        responder: &str,
        result: &[u8],
        handler_ok: bool,
        guard_id: &str,
        key: &DataKey,
        rng: &mut (impl RngCore + CryptoRng),
        author: &SigningIdentity,
    ) -> Result<AppendedRecord, FlowError> {
        let call_id = (call_sender.to_string(), call_nonce);
        let state = self.calls.get(&call_id).copied().ok_or_else(|| {
            FlowError::NotFound(format!(
                "no call from '{call_sender}' with nonce {}",
                call_nonce.to_hex()
            ))
        })?;
        if !state.approved {
            return Err(FlowError::RespondingToDenied(format!(
                "('{call_sender}', {})",
                call_nonce.to_hex()
            )));
        }
        if state.responded {
            return Err(FlowError::Conflict(format!(
                "call ('{call_sender}', {}) already has a response",
                call_nonce.to_hex()
            )));
        }
        let timestamp_ms = self.clock.now_ms();
        let record = ResponseRecord {
            call_sender: call_sender.to_string(),
            call_nonce,
            responder: responder.to_string(),
            timestamp_ms,
            handler_ok,
            guard_id: guard_id.to_string(),
            ciphertext: key.seal(rng, result),
        };
        let payload = FlowPayload::Response(record).canonical_encode();
        let block = self
            .ledger
            .append(&payload, author, self.clock.as_ref())?;
        self.calls.get_mut(&call_id).unwrap().responded = true;
        Ok(AppendedRecord {
            block,
            timestamp_ms,
        })
    }

    /// Record a lease grant as an approved `system.lease` call whose sealed
    /// params carry the duration, so replays reproduce the coverage gap.
    #[allow(clippy::too_many_arguments)]
    pub fn record_lease_grant(
        &mut self,
        caller: &str,
        callee: &str,
        duration_ms: u64,
        guard_id: &str,
        key: &DataKey,
        rng: &mut (impl RngCore + CryptoRng),
        author: &SigningIdentity,
    ) -> Result<AppendedRecord, FlowError> {
        let mut w = Writer::new();
        w.put_u64(duration_ms);
        let params = w.finish();
        let nonce = loop {
            let n = Nonce16::random(rng);
            if !self.nonces.contains(&n) {
                break n;
            }
        };
        self.record_call(
            CallInput {
                sender: caller,
                receiver: callee,
                function: LEASE_FUNCTION,
                params: &params,
                replay_nonce: nonce,
                decision: Decision::Approved,
                guard_id,
            },
            key,
            rng,
            author,
        )
    }

    pub fn replay(&self, key: &DataKey) -> Result<FlowTrace, FlowError> {
        replay_flow(&self.ledger, key)
    }
}

impl fmt::Debug for FlowLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FlowLedger({}, {} blocks)",
            self.ledger.deployment_id(),
            self.ledger.len()
        )
    }
}

fn decode_flow_block(block: &Block) -> Result<FlowPayload, FlowError> {
    FlowPayload::canonical_decode(&block.payload).map_err(FlowError::from)
}

/// Decrypt the whole chain into an ordered trace. The chain is verified
/// first; replay refuses to interpret a tampered history.
pub fn replay_flow(ledger: &Ledger, key: &DataKey) -> Result<FlowTrace, FlowError> {
    let report = ledger.verify();
    if let Some((index, check)) = report.first_failure {
        return Err(FlowError::Integrity {
            index,
            check: check.as_str(),
        });
    }
    let mut entries: Vec<TraceEntry> = Vec::new();
    let mut index_of: HashMap<CallId, usize> = HashMap::new();
    for block in ledger.blocks() {
        if block.header.payload_tag == TAG_DEPLOYMENT_MANIFEST {
            continue;
        }
        let block_index = block.header.index;
        match decode_flow_block(block)? {
            FlowPayload::Call(c) => {
                let params = key
                    .open(&c.ciphertext)
                    .map_err(|_| FlowError::Decryption { block_index })?;
                if c.function == LEASE_FUNCTION && c.decision == Decision::Approved {
                    let mut r = Reader::new(&params);
                    let duration_ms = r.u64()?;
                    r.finish()?;
                    entries.push(TraceEntry::LeaseGap {
                        caller: c.sender,
                        callee: c.receiver,
                        start_ms: c.timestamp_ms,
                        end_ms: c.timestamp_ms + duration_ms,
                    });
                    continue;
                }
                index_of.insert((c.sender.clone(), c.replay_nonce), entries.len());
                entries.push(TraceEntry::Call(CallTrace {
                    sender: c.sender,
                    receiver: c.receiver,
                    function: c.function,
                    replay_nonce: c.replay_nonce,
                    timestamp_ms: c.timestamp_ms,
                    decision: c.decision,
                    guard_id: c.guard_id,
                    params,
                    response: None,
                }));
            }
            FlowPayload::Response(r) => {
                let result = key
                    .open(&r.ciphertext)
                    .map_err(|_| FlowError::Decryption { block_index })?;
                let Some(&at) = index_of.get(&(r.call_sender.clone(), r.call_nonce)) else {
                    return Err(FlowError::NotFound(format!(
                        "response at block {block_index} pairs no call"
                    )));
                };
                if let TraceEntry::Call(call) = &mut entries[at] {
                    call.response = Some(ResponseTrace {
                        responder: r.responder,
                        timestamp_ms: r.timestamp_ms,
                        handler_ok: r.handler_ok,
                        result,
                    });
                }
            }
        }
    }
    Ok(FlowTrace { entries })
}

/// Coverage summary of a flow chain against its lease log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletenessReport {
    /// Call records, excluding the reserved system functions.
    pub total_calls: u64,
    pub approved: u64,
    pub denied_by_reason: BTreeMap<String, u64>,
    pub responses: u64,
    pub admissions: u64,
    pub admissions_denied: u64,
    pub lease_grants: u64,
    pub gaps: Vec<LeaseEntry>,
}

impl CompletenessReport {
    pub fn denied_total(&self) -> u64 {
        self.denied_by_reason.values().sum()
    }

    pub fn complete(&self) -> bool {
        self.gaps.is_empty()
    }

    /// One record per line; final line is the verdict.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("calls={}\n", self.total_calls));
        out.push_str(&format!("approved={}\n", self.approved));
        for (reason, count) in &self.denied_by_reason {
            out.push_str(&format!("denied.{reason}={count}\n"));
        }
        out.push_str(&format!("responses={}\n", self.responses));
        out.push_str(&format!("admissions={}\n", self.admissions));
        out.push_str(&format!("admissions_denied={}\n", self.admissions_denied));
        out.push_str(&format!("lease_grants={}\n", self.lease_grants));
        for gap in &self.gaps {
            out.push_str(&format!(
                "gap start={} end={} caller={} callee={}\n",
                gap.start_ms,
                gap.end_ms(),
                gap.caller,
                gap.callee
            ));
        }
        if self.complete() {
            out.push_str("verdict=complete\n");
        } else {
            out.push_str(&format!("verdict=gaps:{}\n", self.gaps.len()));
        }
        out
    }
}

/// Count records and flag lease intervals as coverage gaps. Needs no data
/// key: decisions and function names are plaintext header fields.
pub fn completeness_report(
    ledger: &Ledger,
    leases: &[LeaseEntry],
) -> Result<CompletenessReport, FlowError> {
    let mut report = CompletenessReport {
        total_calls: 0,
        approved: 0,
        denied_by_reason: BTreeMap::new(),
        responses: 0,
        admissions: 0,
        admissions_denied: 0,
        lease_grants: 0,
        gaps: leases.to_vec(),
    };
    for block in ledger.blocks() {
        if block.header.payload_tag == TAG_DEPLOYMENT_MANIFEST {
            continue;
        }
        match decode_flow_block(block)? {
            FlowPayload::Call(c) if c.function == ADMIT_FUNCTION => {
                if c.decision.is_approved() {
                    report.admissions += 1;
                } else {
                    report.admissions_denied += 1;
                }
            }
            FlowPayload::Call(c) if c.function == LEASE_FUNCTION => {
                report.lease_grants += 1;
            }
            FlowPayload::Call(c) => {
                report.total_calls += 1;
                match &c.decision {
                    Decision::Approved => report.approved += 1,
                    Decision::Denied(reason) => {
                        *report.denied_by_reason.entry(reason.clone()).or_insert(0) += 1;
                    }
                }
            }
            FlowPayload::Response(_) => report.responses += 1,
        }
    }
    Ok(report)
}
