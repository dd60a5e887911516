//! Application runtime: node registration with handlers, a shared
//! request queue consumed by a pool of guard workers, call forwarding,
//! and truth-value responses.
//!
//! Callers block until their request is screened, recorded, and (when
//! approved) executed, so every invoke observes its own decision. The
//! queue is multi-producer multi-consumer; dequeue grants exclusive
//! ownership of a request. Handlers for different receivers may run
//! concurrently; calls to the same receiver serialize on that node's
//! handler lock.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::Attestation;
use crate::clock::{LogicalClock, TimeSource, WallClock};
use crate::crypto::{CryptoError, DataKey, Nonce16, SigningIdentity};
use crate::flowlog::{
    CallTrace, FlowError, FlowLedger, FlowTrace, LeaseEntry, ResponseTrace, TraceEntry,
};
use crate::guard::{
    AdmitOutcome, CallRequest, GuardError, GuardHub, GuardNode, Lease, ParameterSchema,
};
use crate::ledger::{chain_file_name, verify_chain_file, LedgerError, LedgerKind};
use crate::registry::{RegistryError, RegistryStore};

/// Clock selection for a deployment. Logical time is the deterministic
/// mode used by scripted scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Wall,
    Logical,
}

/// Deployment configuration. The serialized form uses exactly these
/// keys: deployment_id, guard_workers, quorum, leases_enabled,
/// data_key_hex, registry_path, flow_path, clock, rng_seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationConfig {
    pub deployment_id: String,
    pub guard_workers: u64,
    pub quorum: u64,
    pub leases_enabled: bool,
    pub data_key_hex: String,
    pub registry_path: PathBuf,
    pub flow_path: PathBuf,
    pub clock: ClockMode,
    pub rng_seed: u64,
}

impl ApplicationConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self, RuntimeError> {
        let config: ApplicationConfig =
            toml::from_str(doc).map_err(|e| RuntimeError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.deployment_id.is_empty() {
            return Err(RuntimeError::Config("deployment_id must be set".into()));
        }
        if self.guard_workers == 0 {
            return Err(RuntimeError::Config("guard_workers must be >= 1".into()));
        }
        if self.quorum == 0 {
            return Err(RuntimeError::Config("quorum must be >= 1".into()));
        }
        self.data_key()?;
        Ok(())
    }

    pub fn data_key(&self) -> Result<DataKey, RuntimeError> {
        DataKey::from_hex(&self.data_key_hex)
            .map_err(|e| RuntimeError::Config(format!("data_key_hex: {e}")))
    }

    /// Conventional chain file paths under one deployment directory.
    pub fn for_deployment(dir: &Path, deployment_id: &str) -> (PathBuf, PathBuf) {
        (
            dir.join(chain_file_name(deployment_id, LedgerKind::Registry)),
            dir.join(chain_file_name(deployment_id, LedgerKind::Flow)),
        )
    }
}

/// Signing identities that author ledger blocks: the registry root
/// anchor and the guard-group flow author.
#[derive(Clone, Debug)]
pub struct AppIdentities {
    pub root: SigningIdentity,
    pub guard: SigningIdentity,
}

/// Handler over decrypted parameter bytes. An Err is an execution
/// failure, recorded as approved-with-error; the guard's decision is not
/// retroactively changed by it.
pub type Handler = Box<dyn Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync>;

/// One declared function: schema and handler travel together, so every
/// declared function has a schema by construction.
pub struct FunctionSpec {
    pub function_name: String,
    pub schema: ParameterSchema,
    pub handler: Handler,
}

/// A node: id, hosting device, and its function table.
pub struct NodeSpec {
    pub node_id: String,
    pub device_id: String,
    pub functions: Vec<FunctionSpec>,
}

struct NodeRuntime {
    device_id: String,
    /// Holding this lock while a handler runs serializes calls per
    /// receiver.
    handlers: Mutex<HashMap<String, Handler>>,
}

/// The truth-value answer to an invoke: exactly one of result or reason.
/// The result is sealed with the deployment data key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallResponse {
    Approved { result: Vec<u8>, handler_ok: bool },
    Denied { reason: String },
}

impl CallResponse {
    pub fn approved(&self) -> bool {
        matches!(self, CallResponse::Approved { .. })
    }

    /// Stable expectation string: `approved` or `denied:<reason>`.
    pub fn decision_str(&self) -> String {
        match self {
            CallResponse::Approved { .. } => "approved".to_string(),
            CallResponse::Denied { reason } => format!("denied:{reason}"),
        }
    }

    /// Decrypt the sealed result; None when the call was denied.
    pub fn open_result(&self, key: &DataKey) -> Option<Result<Vec<u8>, CryptoError>> {
        match self {
            CallResponse::Approved { result, .. } => Some(key.open(result)),
            CallResponse::Denied { .. } => None,
        }
    }
}

/// Invoke result plus the replay nonce the sender used, so a captured
/// request can be resubmitted verbatim.
#[derive(Debug, Clone)]
pub struct InvokeReceipt {
    pub response: CallResponse,
    pub replay_nonce: Nonce16,
}

/// Counters the harness reports per run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub approvals: u64,
    pub denials_by_reason: BTreeMap<String, u64>,
    pub lease_bypassed: u64,
    pub max_queue_depth: u64,
}

impl MetricsSnapshot {
    pub fn denials_total(&self) -> u64 {
        self.denials_by_reason.values().sum()
    }

    /// Conservation: every request ends as an approval, a denial, or a
    /// lease bypass.
    pub fn conserved(&self) -> bool {
        self.requests == self.approvals + self.denials_total() + self.lease_bypassed
    }
}

#[derive(Default)]
struct Metrics {
    inner: Mutex<MetricsSnapshot>,
}

impl Metrics {
    fn on_request(&self, queue_depth: u64) {
        let mut m = self.inner.lock().expect("metrics lock poisoned");
        m.requests += 1;
        m.max_queue_depth = m.max_queue_depth.max(queue_depth);
    }

    fn on_lease_bypass(&self) {
        self.inner.lock().expect("metrics lock poisoned").lease_bypassed += 1;
    }

    fn on_decision(&self, response: &CallResponse) {
        let mut m = self.inner.lock().expect("metrics lock poisoned");
        match response {
            CallResponse::Approved { .. } => m.approvals += 1,
            CallResponse::Denied { reason } => {
                *m.denials_by_reason.entry(reason.clone()).or_insert(0) += 1;
            }
        }
    }

    fn snapshot(&self) -> MetricsSnapshot {
        self.inner.lock().expect("metrics lock poisoned").clone()
    }
}

/// Live trace keyed by flow-ledger block index so its order matches an
/// audit replay of the same chain.
#[derive(Default)]
struct LiveTrace {
    entries: BTreeMap<u64, TraceEntry>,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("config: {0}")]
    Config(String),
    #[error("startup integrity: {path}: block {index} failed {check} check")]
    StartupIntegrity {
        path: String,
        index: u64,
        check: &'static str,
    },
    #[error("node '{0}' already registered")]
    DuplicateNode(String),
    #[error("device '{0}' has no admission session")]
    NoSession(String),
    #[error("leases are disabled for this deployment")]
    LeasesDisabled,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

struct Job {
    request: CallRequest,
    reply: Sender<CallResponse>,
}

/// One running deployment: ledgers, guard pool, node table, queue.
pub struct Application {
    config: ApplicationConfig,
    registry: Arc<RwLock<RegistryStore>>,
    flow: Arc<Mutex<FlowLedger>>,
    hub: Arc<GuardHub>,
    admin: GuardNode,
    nodes: Arc<RwLock<HashMap<String, Arc<NodeRuntime>>>>,
    rng: Arc<Mutex<ChaCha20Rng>>,
    clock: Arc<dyn TimeSource>,
    logical: Option<Arc<LogicalClock>>,
    data_key: DataKey,
    queue: Option<Sender<Job>>,
    in_flight: Arc<AtomicU64>,
    metrics: Arc<Metrics>,
    live: Arc<Mutex<LiveTrace>>,
    identities: AppIdentities,
    workers: Vec<JoinHandle<()>>,
}

impl fmt::Debug for Application {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Application")
            .field("deployment_id", &self.config.deployment_id)
            .field("workers", &self.workers.len())
            .finish()
    }
}

impl Application {
    /// Start a deployment. Existing chain files are verified first and a
    /// failing block refuses startup; fresh files are created with a
    /// genesis manifest. Existing ledgers need the original identities to
    /// author further blocks, so `identities` is mandatory for them; for
    /// a fresh deployment None generates identities from the seeded RNG.
    pub fn start(
        config: ApplicationConfig,
        identities: Option<AppIdentities>,
    ) -> Result<Self, RuntimeError> {
        config.validate()?;
        let data_key = config.data_key()?;

        let (clock, logical): (Arc<dyn TimeSource>, Option<Arc<LogicalClock>>) =
            match config.clock {
                ClockMode::Wall => (Arc::new(WallClock), None),
                ClockMode::Logical => {
                    let l = LogicalClock::new();
                    (l.clone(), Some(l))
                }
            };

        let registry_exists = config.registry_path.exists();
        let flow_exists = config.flow_path.exists();
        for (exists, path) in [
            (registry_exists, &config.registry_path),
            (flow_exists, &config.flow_path),
        ] {
            if !exists {
                continue;
            }
            let report = verify_chain_file(path)?;
            if let Some((index, check)) = report.first_failure {
                return Err(RuntimeError::StartupIntegrity {
                    path: path.display().to_string(),
                    index,
                    check: check.as_str(),
                });
            }
        }
        if (registry_exists || flow_exists) && identities.is_none() {
            return Err(RuntimeError::Config(
                "existing ledgers require their signing identities".into(),
            ));
        }

        let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed);
        let identities = identities.unwrap_or_else(|| AppIdentities {
            root: SigningIdentity::generate("root", &mut rng),
            guard: SigningIdentity::generate("guard", &mut rng),
        });

        let registry = if registry_exists {
            RegistryStore::open(&config.registry_path, identities.root.clone(), clock.clone())?
        } else {
            RegistryStore::create(
                &config.registry_path,
                &config.deployment_id,
                config.quorum,
                identities.root.clone(),
                clock.clone(),
            )?
        };
        let flow = if flow_exists {
            FlowLedger::open(&config.flow_path, clock.clone())?
        } else {
            FlowLedger::create(
                &config.flow_path,
                &config.deployment_id,
                config.quorum,
                vec![
                    (identities.root.id().to_string(), identities.root.public_key()),
                    (
                        identities.guard.id().to_string(),
                        identities.guard.public_key(),
                    ),
                ],
                &identities.root,
                clock.clone(),
            )?
        };

        let registry = Arc::new(RwLock::new(registry));
        let flow = Arc::new(Mutex::new(flow));
        let rng = Arc::new(Mutex::new(rng));
        let hub = GuardHub::new(
            Arc::clone(&registry),
            Arc::clone(&flow),
            Arc::clone(&rng),
            data_key,
            clock.clone(),
            identities.guard.clone(),
        );
        let admin = hub.node(0);
        let nodes: Arc<RwLock<HashMap<String, Arc<NodeRuntime>>>> =
            Arc::new(RwLock::new(HashMap::new()));
        let (tx, rx) = unbounded::<Job>();
        let in_flight = Arc::new(AtomicU64::new(0));
        let metrics = Arc::new(Metrics::default());
        let live = Arc::new(Mutex::new(LiveTrace::default()));

        let mut workers = Vec::new();
        for i in 0..config.guard_workers {
            let ctx = WorkerCtx {
                guard: hub.node(i as usize),
                rx: rx.clone(),
                nodes: Arc::clone(&nodes),
                rng: Arc::clone(&rng),
                data_key,
                in_flight: Arc::clone(&in_flight),
                metrics: Arc::clone(&metrics),
                live: Arc::clone(&live),
            };
            workers.push(
                std::thread::Builder::new()
                    .name(format!("guard-{i}"))
                    .spawn(move || worker_loop(ctx))
                    .expect("spawn guard worker"),
            );
        }

        Ok(Application {
            config,
            registry,
            flow,
            hub,
            admin,
            nodes,
            rng,
            clock,
            logical,
            data_key,
            queue: Some(tx),
            in_flight,
            metrics,
            live,
            identities,
            workers,
        })
    }

    pub fn config(&self) -> &ApplicationConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<RwLock<RegistryStore>> {
        &self.registry
    }

    pub fn flow(&self) -> &Arc<Mutex<FlowLedger>> {
        &self.flow
    }

    pub fn rng(&self) -> &Arc<Mutex<ChaCha20Rng>> {
        &self.rng
    }

    pub fn identities(&self) -> &AppIdentities {
        &self.identities
    }

    pub fn data_key(&self) -> DataKey {
        self.data_key
    }

    /// The logical clock handle when running in logical mode.
    pub fn logical_clock(&self) -> Option<Arc<LogicalClock>> {
        self.logical.clone()
    }

    pub fn clock(&self) -> Arc<dyn TimeSource> {
        self.clock.clone()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    /// The trace captured live, ordered like an audit replay.
    pub fn live_trace(&self) -> FlowTrace {
        let live = self.live.lock().expect("live trace lock poisoned");
        FlowTrace {
            entries: live.entries.values().cloned().collect(),
        }
    }

    pub fn lease_entries(&self) -> Vec<LeaseEntry> {
        self.hub.state().lease_entries()
    }

    /// Register a node. Its hosting device must hold an admission
    /// session; the node's schemas are installed into guard state.
    pub fn register_node(&self, spec: NodeSpec) -> Result<(), RuntimeError> {
        if self.hub.state().session(&spec.device_id).is_none() {
            return Err(RuntimeError::NoSession(spec.device_id));
        }
        let mut nodes = self.nodes.write().expect("node table lock poisoned");
        if nodes.contains_key(&spec.node_id) {
            return Err(RuntimeError::DuplicateNode(spec.node_id));
        }
        let mut handlers = HashMap::new();
        for f in spec.functions {
            self.hub
                .install_schema(&spec.node_id, &f.function_name, f.schema);
            handlers.insert(f.function_name, f.handler);
        }
        nodes.insert(
            spec.node_id,
            Arc::new(NodeRuntime {
                device_id: spec.device_id,
                handlers: Mutex::new(handlers),
            }),
        );
        Ok(())
    }

    pub fn issue_challenge(&self) -> Nonce16 {
        self.admin.issue_challenge()
    }

    /// Admit a device through the guard group and capture the admission
    /// on the live trace.
    pub fn admit_device(&self, attestation: &Attestation) -> Result<AdmitOutcome, RuntimeError> {
        let outcome = self.admin.admit_device(attestation)?;
        let entry = CallTrace {
            sender: attestation.device_id.clone(),
            receiver: crate::guard::GUARD_RECEIVER.to_string(),
            function: crate::flowlog::ADMIT_FUNCTION.to_string(),
            replay_nonce: outcome.recorded_nonce,
            timestamp_ms: outcome.timestamp_ms,
            decision: outcome.verdict.to_decision(),
            guard_id: self.admin.guard_id.clone(),
            params: outcome.params.clone(),
            response: None,
        };
        self.live
            .lock()
            .expect("live trace lock poisoned")
            .entries
            .insert(outcome.block.index, TraceEntry::Call(entry));
        Ok(outcome)
    }

    /// Grant a lease when the deployment allows them; the grant record's
    /// audit gap marker is mirrored onto the live trace.
    pub fn grant_lease(
        &self,
        caller: &str,
        callee: &str,
        duration_ms: u64,
    ) -> Result<Lease, RuntimeError> {
        if !self.config.leases_enabled {
            return Err(RuntimeError::LeasesDisabled);
        }
        let grant = self.admin.grant_lease(caller, callee, duration_ms)?;
        self.live
            .lock()
            .expect("live trace lock poisoned")
            .entries
            .insert(
                grant.block.index,
                TraceEntry::LeaseGap {
                    caller: caller.to_string(),
                    callee: callee.to_string(),
                    start_ms: grant.lease.granted_at_ms,
                    end_ms: grant.lease.granted_at_ms + grant.lease.duration_ms,
                },
            );
        Ok(grant.lease)
    }

    /// Invoke with a sender-chosen fresh nonce.
    pub fn invoke(
        &self,
        caller_node_id: &str,
        callee_node_id: &str,
        function_name: &str,
        params: &[u8],
    ) -> InvokeReceipt {
        let nonce = {
            let mut rng = self.rng.lock().expect("rng lock poisoned");
            Nonce16::random(&mut *rng)
        };
        let response =
            self.invoke_with_nonce(caller_node_id, callee_node_id, function_name, params, nonce);
        InvokeReceipt {
            response,
            replay_nonce: nonce,
        }
    }

    /// Invoke with an explicit nonce; resubmitting a captured request
    /// verbatim goes through here.
    pub fn invoke_with_nonce(
        &self,
        caller_node_id: &str,
        callee_node_id: &str,
        function_name: &str,
        params: &[u8],
        replay_nonce: Nonce16,
    ) -> CallResponse {
        // Active leases bypass screening and recording entirely.
        if self.config.leases_enabled && self.hub.lease_active(caller_node_id, callee_node_id) {
            self.metrics.on_request(0);
            self.metrics.on_lease_bypass();
            let (bytes, handler_ok) = execute_handler(&self.nodes, callee_node_id, function_name, params);
            let sealed = {
                let mut rng = self.rng.lock().expect("rng lock poisoned");
                self.data_key.seal(&mut *rng, &bytes)
            };
            return CallResponse::Approved {
                result: sealed,
                handler_ok,
            };
        }

        let session_device = self
            .nodes
            .read()
            .expect("node table lock poisoned")
            .get(caller_node_id)
            .map(|n| n.device_id.clone())
            .unwrap_or_default();
        let request = CallRequest {
            sender_node_id: caller_node_id.to_string(),
            receiver_node_id: callee_node_id.to_string(),
            function_name: function_name.to_string(),
            params: params.to_vec(),
            replay_nonce,
            session_device,
        };
        let (reply_tx, reply_rx) = bounded(1);
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let queue = self.queue.as_ref().expect("queue open");
        queue
            .send(Job {
                request,
                reply: reply_tx,
            })
            .expect("guard workers alive");
        self.metrics.on_request(queue.len() as u64);
        reply_rx.recv().expect("guard worker replied")
    }

    /// Block until the queue is empty and every in-flight request has
    /// its decision recorded.
    pub fn drain(&self) {
        while self.in_flight.load(Ordering::SeqCst) > 0
            || self.queue.as_ref().map(|q| q.len()).unwrap_or(0) > 0
        {
            std::thread::yield_now();
        }
    }

    /// Drain, stop the workers, and release the ledgers.
    pub fn shutdown(mut self) {
        self.drain();
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.queue.take();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for Application {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

struct WorkerCtx {
    guard: GuardNode,
    rx: Receiver<Job>,
    nodes: Arc<RwLock<HashMap<String, Arc<NodeRuntime>>>>,
    rng: Arc<Mutex<ChaCha20Rng>>,
    data_key: DataKey,
    in_flight: Arc<AtomicU64>,
    metrics: Arc<Metrics>,
    live: Arc<Mutex<LiveTrace>>,
}

fn worker_loop(ctx: WorkerCtx) {
    while let Ok(job) = ctx.rx.recv() {
        let outcome = ctx
            .guard
            .screen_and_record(&job.request)
            .expect("flow ledger append");
        let entry = CallTrace {
            sender: job.request.sender_node_id.clone(),
            receiver: job.request.receiver_node_id.clone(),
            function: job.request.function_name.clone(),
            replay_nonce: outcome.recorded_nonce,
            timestamp_ms: outcome.timestamp_ms,
            decision: outcome.verdict.to_decision(),
            guard_id: ctx.guard.guard_id.clone(),
            params: job.request.params.clone(),
            response: None,
        };
        ctx.live
            .lock()
            .expect("live trace lock poisoned")
            .entries
            .insert(outcome.block.index, TraceEntry::Call(entry));

        let response = if outcome.verdict.is_approved() {
            let (bytes, handler_ok) = execute_handler(
                &ctx.nodes,
                &job.request.receiver_node_id,
                &job.request.function_name,
                &job.request.params,
            );
            let recorded = ctx
                .guard
                .record_response(
                    &job.request.sender_node_id,
                    outcome.recorded_nonce,
                    &job.request.receiver_node_id,
                    &bytes,
                    handler_ok,
                )
                .expect("flow ledger append");
            {
                let mut live = ctx.live.lock().expect("live trace lock poisoned");
                if let Some(TraceEntry::Call(call)) = live.entries.get_mut(&outcome.block.index) {
                    call.response = Some(ResponseTrace {
                        responder: job.request.receiver_node_id.clone(),
                        timestamp_ms: recorded.timestamp_ms,
                        handler_ok,
                        result: bytes.clone(),
                    });
                }
            }
            let sealed = {
                let mut rng = ctx.rng.lock().expect("rng lock poisoned");
                ctx.data_key.seal(&mut *rng, &bytes)
            };
            CallResponse::Approved {
                result: sealed,
                handler_ok,
            }
        } else {
            CallResponse::Denied {
                reason: outcome.verdict.reason_str().to_string(),
            }
        };
        ctx.metrics.on_decision(&response);
        let _ = job.reply.send(response);
        ctx.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Run the receiver's handler under its serialization lock. A missing
/// node or function yields an error marker; screening normally filters
/// those before execution.
fn execute_handler(
    nodes: &Arc<RwLock<HashMap<String, Arc<NodeRuntime>>>>,
    callee: &str,
    function: &str,
    params: &[u8],
) -> (Vec<u8>, bool) {
    let node = {
        let table = nodes.read().expect("node table lock poisoned");
        table.get(callee).cloned()
    };
    let Some(node) = node else {
        return (format!("error: no node '{callee}'").into_bytes(), false);
    };
    let handlers = node.handlers.lock().expect("handler lock poisoned");
    let Some(handler) = handlers.get(function) else {
        return (
            format!("error: no function '{function}'").into_bytes(),
            false,
        );
    };
    match handler(params) {
        Ok(bytes) => (bytes, true),
        Err(msg) => (format!("error: {msg}").into_bytes(), false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{attest_load, initialize_device, measure_boot_chain, DeviceState};
    use crate::crypto::{sha256, Digest32};
    use crate::flowlog::replay_flow;
    use crate::guard::{encode_params, FieldKind, FieldSchema, ParamValue};
    use crate::registry::{Role, Verdict};
    use std::collections::HashSet;
    use tempfile::TempDir;

    fn test_config(dir: &Path, seed: u64, workers: u64) -> ApplicationConfig {
        let (registry_path, flow_path) = ApplicationConfig::for_deployment(dir, "dep-rt");
        ApplicationConfig {
            deployment_id: "dep-rt".into(),
            guard_workers: workers,
            quorum: 2,
            leases_enabled: true,
            data_key_hex: "11".repeat(32),
            registry_path,
            flow_path,
            clock: ClockMode::Logical,
            rng_seed: seed,
        }
    }

    struct Rig {
        app: Application,
        _dir: TempDir,
        device: DeviceState,
    }

    fn echo_spec(node_id: &str, device_id: &str) -> NodeSpec {
        NodeSpec {
            node_id: node_id.into(),
            device_id: device_id.into(),
            functions: vec![
                FunctionSpec {
                    function_name: "echo".into(),
                    schema: ParameterSchema::new(vec![FieldSchema {
                        name: "payload".into(),
                        kind: FieldKind::Bytes { max_len: 1024 },
                    }])
                    .unwrap(),
                    handler: Box::new(|params: &[u8]| Ok(params.to_vec())),
                },
                FunctionSpec {
                    function_name: "boom".into(),
                    schema: ParameterSchema::new(vec![]).unwrap(),
                    handler: Box::new(|_: &[u8]| Err("handler exploded".into())),
                },
            ],
        }
    }

    fn rig_with(seed: u64, workers: u64) -> Rig {
        let dir = TempDir::new().unwrap();
        let app = Application::start(test_config(dir.path(), seed, workers), None).unwrap();
        let code = b"node software build".to_vec();
        let (device, _) = provision(&app, "dev-1", &code);
        admit(&app, "dev-1", &code, &device);
        Rig {
            app,
            _dir: dir,
            device,
        }
    }

    /// Registers experts, a publisher, the device, approved software,
    /// and a wildcard-function policy edge a -> b.
    fn provision(app: &Application, device_id: &str, code: &[u8]) -> (DeviceState, Digest32) {
        let root = app.identities().root.clone();
        let (alice, bob, posco, device) = {
            let mut rng = app.rng().lock().unwrap();
            (
                SigningIdentity::generate("alice", &mut *rng),
                SigningIdentity::generate("bob", &mut *rng),
                SigningIdentity::generate("posco", &mut *rng),
                initialize_device(device_id, vec![("fw".into(), sha256(b"fw"))], &mut *rng)
                    .unwrap(),
            )
        };
        let boot = measure_boot_chain(&device);
        let mut reg = app.registry().write().unwrap();
        for (who, role) in [
            (&alice, Role::Expert),
            (&bob, Role::Expert),
            (&posco, Role::Publisher),
        ] {
            let _ = reg.register_identity(who.id(), who.public_key(), Digest32::ZERO, role, &root);
        }
        reg.register_identity(device_id, device.public_key(), boot, Role::Device, &root)
            .unwrap();
        let digest = sha256(code);
        if reg.register_software("node-sw", "1.0", digest, "", &posco).is_ok() {
            reg.submit_review("node-sw", "1.0", Verdict::Approve, &alice).unwrap();
            reg.submit_review("node-sw", "1.0", Verdict::Approve, &bob).unwrap();
        }
        let _ = reg.add_policy_rule("node-a", "node-b", "*", &root);
        (device, digest)
    }

    fn admit(app: &Application, _device_id: &str, code: &[u8], device: &DeviceState) {
        let mut device = device.clone();
        let challenge = app.issue_challenge();
        let att = attest_load(&mut device, code, &challenge.0).unwrap();
        let outcome = app.admit_device(&att).unwrap();
        assert!(outcome.verdict.is_approved(), "{:?}", outcome.verdict);
        app.register_node(echo_spec("node-a", device.device_id())).unwrap();
        app.register_node(echo_spec("node-b", device.device_id())).unwrap();
    }

    fn echo_params(payload: &[u8]) -> Vec<u8> {
        encode_params(&[ParamValue::Bytes(payload.to_vec())])
    }

    #[test]
    fn fresh_start_creates_two_genesis_ledgers() {
        let dir = TempDir::new().unwrap();
        let config = test_config(dir.path(), 1, 1);
        let app = Application::start(config.clone(), None).unwrap();
        assert_eq!(app.registry().read().unwrap().ledger().len(), 1);
        assert_eq!(app.flow().lock().unwrap().ledger().len(), 1);
        drop(app);
        assert!(config.registry_path.exists());
        assert!(config.flow_path.exists());
    }

    #[test]
    fn corrupt_flow_file_refuses_startup_with_index() {
        let dir = TempDir::new().unwrap();
        let config = test_config(dir.path(), 1, 1);
        let identities = {
            let app = Application::start(config.clone(), None).unwrap();
            app.identities().clone()
        };
        let mut bytes = std::fs::read(&config.flow_path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&config.flow_path, bytes).unwrap();
        let err = Application::start(config, Some(identities)).unwrap_err();
        match err {
            RuntimeError::StartupIntegrity { index, .. } => assert_eq!(index, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn existing_ledgers_without_identities_rejected() {
        let dir = TempDir::new().unwrap();
        let config = test_config(dir.path(), 1, 1);
        drop(Application::start(config.clone(), None).unwrap());
        let err = Application::start(config, None).unwrap_err();
        assert!(matches!(err, RuntimeError::Config(_)));
    }

    #[test]
    fn echo_call_roundtrips_through_guard() {
        let rig = rig_with(1, 2);
        let payload = b"hello across nodes";
        let receipt = rig
            .app
            .invoke("node-a", "node-b", "echo", &echo_params(payload));
        assert!(receipt.response.approved());
        let opened = receipt
            .response
            .open_result(&rig.app.data_key())
            .unwrap()
            .unwrap();
        assert_eq!(opened, echo_params(payload));
    }

    #[test]
    fn edge_without_policy_denied() {
        let rig = rig_with(2, 1);
        let receipt = rig
            .app
            .invoke("node-b", "node-a", "echo", &echo_params(b"x"));
        assert_eq!(receipt.response.decision_str(), "denied:policy");
    }

    #[test]
    fn undeclared_function_denied_implausible() {
        let rig = rig_with(3, 1);
        let receipt = rig.app.invoke("node-a", "node-b", "vanish", &[]);
        assert_eq!(
            receipt.response.decision_str(),
            "denied:implausible_input"
        );
    }

    #[test]
    fn duplicate_node_conflicts() {
        let rig = rig_with(4, 1);
        let err = rig
            .app
            .register_node(echo_spec("node-a", rig.device.device_id()))
            .unwrap_err();
        assert!(matches!(err, RuntimeError::DuplicateNode(_)));
    }

    #[test]
    fn register_without_admission_rejected() {
        let dir = TempDir::new().unwrap();
        let app = Application::start(test_config(dir.path(), 5, 1), None).unwrap();
        let err = app.register_node(echo_spec("node-a", "ghost")).unwrap_err();
        assert!(matches!(err, RuntimeError::NoSession(_)));
    }

    #[test]
    fn handler_failure_is_approved_with_error_marker() {
        let rig = rig_with(6, 1);
        let receipt = rig.app.invoke("node-a", "node-b", "boom", &[]);
        match &receipt.response {
            CallResponse::Approved { handler_ok, .. } => assert!(!handler_ok),
            other => panic!("expected approved, got {other:?}"),
        }
        let opened = receipt
            .response
            .open_result(&rig.app.data_key())
            .unwrap()
            .unwrap();
        assert_eq!(opened, b"error: handler exploded");
        let trace = rig.app.live_trace();
        let call = trace.calls().find(|c| c.function == "boom").unwrap();
        assert!(call.decision.is_approved());
        assert!(!call.response.as_ref().unwrap().handler_ok);
    }

    #[test]
    fn drain_idle_returns_immediately() {
        let rig = rig_with(7, 2);
        rig.app.drain();
    }

    #[test]
    fn burst_then_drain_verifies_both_ledgers() {
        let rig = rig_with(8, 4);
        for i in 0..40u8 {
            let receipt = rig
                .app
                .invoke("node-a", "node-b", "echo", &echo_params(&[i]));
            assert!(receipt.response.approved());
        }
        rig.app.drain();
        assert!(rig.app.registry().read().unwrap().ledger().verify().valid());
        assert!(rig.app.flow().lock().unwrap().ledger().verify().valid());
    }

    #[test]
    fn concurrent_invokes_exactly_once() {
        let rig = rig_with(9, 4);
        let app = Arc::new(rig.app);
        let mut joins = Vec::new();
        for t in 0..8 {
            let app = Arc::clone(&app);
            joins.push(std::thread::spawn(move || {
                for i in 0..25u8 {
                    let receipt =
                        app.invoke("node-a", "node-b", "echo", &echo_params(&[t, i]));
                    assert!(receipt.response.approved());
                }
            }));
        }
        for j in joins {
            j.join().unwrap();
        }
        app.drain();
        let flow = app.flow().lock().unwrap();
        let trace = replay_flow(flow.ledger(), &app.data_key()).unwrap();
        let calls: Vec<_> = trace.calls().filter(|c| c.function == "echo").collect();
        assert_eq!(calls.len(), 200);
        let nonces: HashSet<_> = calls.iter().map(|c| c.replay_nonce).collect();
        assert_eq!(nonces.len(), 200);
        // One call record and one response per invoke, plus genesis and
        // the admission record.
        assert_eq!(flow.ledger().len(), 1 + 1 + 400);
    }

    #[test]
    fn same_seed_single_worker_runs_are_bit_identical() {
        let run = |seed: u64| -> Vec<u8> {
            let dir = TempDir::new().unwrap();
            let config = test_config(dir.path(), seed, 1);
            let app = Application::start(config.clone(), None).unwrap();
            let code = b"node software build".to_vec();
            let (device, _) = provision(&app, "dev-1", &code);
            admit(&app, "dev-1", &code, &device);
            app.logical_clock().unwrap().set(50);
            for i in 0..10u8 {
                app.invoke("node-a", "node-b", "echo", &echo_params(&[i]));
            }
            app.shutdown();
            std::fs::read(&config.flow_path).unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a, b);
        let c = run(43);
        assert_ne!(a, c);
    }

    #[test]
    fn k1_and_k4_produce_same_decision_multiset() {
        let run = |workers: u64| -> Vec<(String, String)> {
            let dir = TempDir::new().unwrap();
            let app =
                Application::start(test_config(dir.path(), 11, workers), None).unwrap();
            let code = b"node software build".to_vec();
            let (device, _) = provision(&app, "dev-1", &code);
            admit(&app, "dev-1", &code, &device);
            let app = Arc::new(app);
            let mut joins = Vec::new();
            for t in 0..4 {
                let app = Arc::clone(&app);
                joins.push(std::thread::spawn(move || {
                    for i in 0..10u8 {
                        // Every fourth call breaks the schema bound.
                        let params = if i % 4 == 0 {
                            encode_params(&[ParamValue::Bytes(vec![0; 2048])])
                        } else {
                            echo_params(&[t, i])
                        };
                        app.invoke("node-a", "node-b", "echo", &params);
                    }
                }));
            }
            for j in joins {
                j.join().unwrap();
            }
            app.drain();
            let mut decisions: Vec<(String, String)> = app
                .live_trace()
                .calls()
                .filter(|c| c.function == "echo")
                .map(|c| (c.function.clone(), c.decision.reason().to_string()))
                .collect();
            decisions.sort();
            decisions
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn lease_bypasses_recording_and_metrics_conserve() {
        let rig = rig_with(12, 2);
        rig.app.logical_clock().unwrap().set(100);
        rig.app.grant_lease("node-a", "node-b", 50).unwrap();
        let before = rig.app.flow().lock().unwrap().ledger().len();
        let receipt = rig
            .app
            .invoke("node-a", "node-b", "echo", &echo_params(b"quiet"));
        assert!(receipt.response.approved());
        assert_eq!(rig.app.flow().lock().unwrap().ledger().len(), before);
        rig.app.logical_clock().unwrap().set(150);
        let receipt = rig
            .app
            .invoke("node-a", "node-b", "echo", &echo_params(b"loud"));
        assert!(receipt.response.approved());
        assert_eq!(rig.app.flow().lock().unwrap().ledger().len(), before + 2);
        let m = rig.app.metrics();
        assert_eq!(m.lease_bypassed, 1);
        assert!(m.conserved(), "{m:?}");
    }

    #[test]
    fn leases_disabled_is_an_error() {
        let dir = TempDir::new().unwrap();
        let mut config = test_config(dir.path(), 13, 1);
        config.leases_enabled = false;
        let app = Application::start(config, None).unwrap();
        let err = app.grant_lease("node-a", "node-b", 50).unwrap_err();
        assert!(matches!(err, RuntimeError::LeasesDisabled));
    }

    #[test]
    fn live_trace_matches_audit_replay() {
        let rig = rig_with(14, 1);
        rig.app.logical_clock().unwrap().set(10);
        for i in 0..6u8 {
            rig.app.logical_clock().unwrap().advance(5);
            let params = if i == 3 {
                vec![0xff] // malformed: implausible
            } else {
                echo_params(&[i])
            };
            rig.app.invoke("node-a", "node-b", "echo", &params);
        }
        rig.app.drain();
        let live = rig.app.live_trace();
        let flow = rig.app.flow().lock().unwrap();
        let replayed = replay_flow(flow.ledger(), &rig.app.data_key()).unwrap();
        assert_eq!(live, replayed);
    }

    #[test]
    fn config_document_roundtrip() {
        let doc = r#"
deployment_id = "dep-a"
guard_workers = 4
quorum = 2
leases_enabled = true
data_key_hex = "2222222222222222222222222222222222222222222222222222222222222222"
registry_path = "/tmp/dep-a.registry.chain"
flow_path = "/tmp/dep-a.flow.chain"
clock = "logical"
rng_seed = 7
"#;
        let config = ApplicationConfig::from_toml_str(doc).unwrap();
        assert_eq!(config.guard_workers, 4);
        assert_eq!(config.clock, ClockMode::Logical);
        let round = ApplicationConfig::from_toml_str(&config.to_toml_string()).unwrap();
        assert_eq!(round, config);
    }

    #[test]
    fn config_rejects_zero_workers_and_unknown_keys() {
        let dir = TempDir::new().unwrap();
        let mut config = test_config(dir.path(), 1, 0);
        assert!(matches!(
            Application::start(config.clone(), None).unwrap_err(),
            RuntimeError::Config(_)
        ));
        config.guard_workers = 1;
        config.quorum = 0;
        assert!(matches!(
            Application::start(config, None).unwrap_err(),
            RuntimeError::Config(_)
        ));
        assert!(ApplicationConfig::from_toml_str("deployment_id = \"x\"\nbogus = 1").is_err());
    }
}
