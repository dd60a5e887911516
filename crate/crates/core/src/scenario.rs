//! Scripted scenarios: a structured-text description of a deployment
//! (software, reviews, devices, nodes, policies) plus a tick-ordered
//! event script with per-step expectations and optional fault
//! directives. Running a scenario drives a full application under the
//! logical clock and reports a live trace, metrics, and expectation
//! results.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::attestation::{attest_load, initialize_device, measure_boot_chain, DeviceState};
use crate::crypto::{sha256, DataKey, Digest32, Nonce16, SigningIdentity};
use crate::flowlog::{completeness_report, render_lease_log, CompletenessReport, FlowTrace};
use crate::guard::{encode_params, FieldKind, FieldSchema, ParamValue, ParameterSchema};
use crate::ledger::LedgerError;
use crate::registry::{Role, Verdict};
use crate::runtime::{
    Application, ApplicationConfig, ClockMode, FunctionSpec, Handler, MetricsSnapshot, NodeSpec,
    RuntimeError,
};
use crate::wire::Writer;

/// Declared reviewer or publisher identity.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct IdentityDecl {
    pub id: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ReviewDecl {
    pub expert: String,
    pub verdict: String,
}

/// One software unit: its bytes, publisher, and scripted reviews.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SoftwareDecl {
    pub component: String,
    pub version: String,
    pub publisher: String,
    pub content: String,
    #[serde(default)]
    pub reviews: Vec<ReviewDecl>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DeviceDecl {
    pub id: String,
    pub boot_stages: Vec<String>,
    pub software: String,
    pub version: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FieldDecl {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub min: Option<i64>,
    #[serde(default)]
    pub max: Option<i64>,
    #[serde(default)]
    pub max_len: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FunctionDecl {
    pub name: String,
    pub handler: String,
    #[serde(default)]
    pub params: Vec<FieldDecl>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub id: String,
    pub device: String,
    pub functions: Vec<FunctionDecl>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PolicyDecl {
    pub caller: String,
    pub callee: String,
    pub function: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AdmissionStep {
    pub tick: u64,
    pub device: String,
    pub expect: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RevocationStep {
    pub tick: u64,
    pub component: String,
    pub version: String,
    pub reason: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct LeaseStep {
    pub tick: u64,
    pub caller: String,
    pub callee: String,
    pub duration_ms: u64,
}

/// Typed parameter literal: exactly one of int, text, bytes (hex).
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    #[serde(default)]
    pub int: Option<i64>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub bytes: Option<String>,
}

impl ParamDecl {
    fn to_value(&self) -> Result<ParamValue, String> {
        match (&self.int, &self.text, &self.bytes) {
            (Some(i), None, None) => Ok(ParamValue::Integer(*i)),
            (None, Some(t), None) => Ok(ParamValue::Text(t.clone())),
            (None, None, Some(h)) => hex::decode(h)
                .map(ParamValue::Bytes)
                .map_err(|e| format!("bad hex literal: {e}")),
            _ => Err("exactly one of int, text, bytes".to_string()),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct CallStep {
    pub tick: u64,
    pub caller: String,
    pub callee: String,
    pub function: String,
    #[serde(default)]
    pub params: Vec<ParamDecl>,
    pub expect: String,
}

/// Fault directives. Base expectations stay benign; each directive
/// carries the outcome it forces, so stripping faults yields the benign
/// run.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FaultDecl {
    /// Mutate the device's code bytes after review, before attestation.
    TamperBinary { device: String, expect: String },
    /// Resubmit a scripted call verbatim after the script ends.
    ReplayRequest { call: usize, expect: String },
    /// Issue an extra call on an edge no policy rule allows.
    UnauthorizedCall {
        caller: String,
        callee: String,
        function: String,
        #[serde(default)]
        params: Vec<ParamDecl>,
        expect: String,
    },
    /// Skip the device's registration entirely.
    UnregisteredDevice { device: String, expect: String },
    /// Flip one byte of the named flow-ledger block after the run.
    TamperLedger { block: u64 },
}

/// A validated scenario document.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub deployment_id: String,
    #[serde(default = "default_quorum")]
    pub quorum: u64,
    #[serde(default)]
    pub experts: Vec<IdentityDecl>,
    #[serde(default)]
    pub publishers: Vec<IdentityDecl>,
    #[serde(default)]
    pub software: Vec<SoftwareDecl>,
    #[serde(default)]
    pub devices: Vec<DeviceDecl>,
    #[serde(default)]
    pub nodes: Vec<NodeDecl>,
    #[serde(default)]
    pub policies: Vec<PolicyDecl>,
    #[serde(default)]
    pub admissions: Vec<AdmissionStep>,
    #[serde(default)]
    pub revocations: Vec<RevocationStep>,
    #[serde(default)]
    pub leases: Vec<LeaseStep>,
    #[serde(default)]
    pub calls: Vec<CallStep>,
    #[serde(default)]
    pub faults: Vec<FaultDecl>,
}

fn default_quorum() -> u64 {
    2
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario validation: {element}: {detail}")]
    Validation { element: String, detail: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
    #[error(transparent)]
    Flow(#[from] crate::flowlog::FlowError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(element: impl Into<String>, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        element: element.into(),
        detail: detail.into(),
    }
}

/// Parse and validate a scenario document.
pub fn load_scenario(doc: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(doc)?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario_file(path: &Path) -> Result<Scenario, ScenarioError> {
    let doc = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_scenario(&doc)
}

impl Scenario {
    /// The same scenario with every fault directive removed.
    pub fn without_faults(&self) -> Scenario {
        let mut benign = self.clone();
        benign.faults.clear();
        benign
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.deployment_id.is_empty() {
            return Err(invalid("deployment_id", "must be set"));
        }
        if self.quorum == 0 {
            return Err(invalid("quorum", "must be >= 1"));
        }
        let experts: HashSet<_> = self.experts.iter().map(|e| e.id.as_str()).collect();
        let publishers: HashSet<_> = self.publishers.iter().map(|p| p.id.as_str()).collect();
        let software: HashSet<(&str, &str)> = self
            .software
            .iter()
            .map(|s| (s.component.as_str(), s.version.as_str()))
            .collect();
        let devices: HashSet<_> = self.devices.iter().map(|d| d.id.as_str()).collect();
        let nodes: HashSet<_> = self.nodes.iter().map(|n| n.id.as_str()).collect();

        for (i, s) in self.software.iter().enumerate() {
            if !publishers.contains(s.publisher.as_str()) {
                return Err(invalid(
                    format!("software[{i}]"),
                    format!("undefined publisher '{}'", s.publisher),
                ));
            }
            for (j, r) in s.reviews.iter().enumerate() {
                if !experts.contains(r.expert.as_str()) {
                    return Err(invalid(
                        format!("software[{i}].reviews[{j}]"),
                        format!("undefined expert '{}'", r.expert),
                    ));
                }
                if Verdict::parse(&r.verdict).is_none() {
                    return Err(invalid(
                        format!("software[{i}].reviews[{j}]"),
                        format!("bad verdict '{}'", r.verdict),
                    ));
                }
            }
        }
        for (i, d) in self.devices.iter().enumerate() {
            if !software.contains(&(d.software.as_str(), d.version.as_str())) {
                return Err(invalid(
                    format!("devices[{i}]"),
                    format!("undefined software '{} {}'", d.software, d.version),
                ));
            }
            if d.boot_stages.is_empty() {
                return Err(invalid(format!("devices[{i}]"), "boot_stages empty"));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !devices.contains(n.device.as_str()) {
                return Err(invalid(
                    format!("nodes[{i}]"),
                    format!("undefined device '{}'", n.device),
                ));
            }
            for (j, f) in n.functions.iter().enumerate() {
                build_schema(f).map_err(|detail| {
                    invalid(format!("nodes[{i}].functions[{j}]"), detail)
                })?;
                if builtin_handler(&f.handler).is_none() {
                    return Err(invalid(
                        format!("nodes[{i}].functions[{j}]"),
                        format!("unknown handler spec '{}'", f.handler),
                    ));
                }
            }
        }
        for (i, a) in self.admissions.iter().enumerate() {
            if !devices.contains(a.device.as_str()) {
                return Err(invalid(
                    format!("admissions[{i}]"),
                    format!("undefined device '{}'", a.device),
                ));
            }
        }
        for (i, r) in self.revocations.iter().enumerate() {
            if !software.contains(&(r.component.as_str(), r.version.as_str())) {
                return Err(invalid(
                    format!("revocations[{i}]"),
                    format!("undefined software '{} {}'", r.component, r.version),
                ));
            }
        }
        for (i, l) in self.leases.iter().enumerate() {
            for end in [&l.caller, &l.callee] {
                if !nodes.contains(end.as_str()) {
                    return Err(invalid(
                        format!("leases[{i}]"),
                        format!("undefined node '{end}'"),
                    ));
                }
            }
        }
        for (i, c) in self.calls.iter().enumerate() {
            for end in [&c.caller, &c.callee] {
                if !nodes.contains(end.as_str()) {
                    return Err(invalid(
                        format!("calls[{i}]"),
                        format!("undefined node '{end}'"),
                    ));
                }
            }
            for (j, p) in c.params.iter().enumerate() {
                p.to_value()
                    .map_err(|detail| invalid(format!("calls[{i}].params[{j}]"), detail))?;
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            match f {
                FaultDecl::TamperBinary { device, .. }
                | FaultDecl::UnregisteredDevice { device, .. } => {
                    if !devices.contains(device.as_str()) {
                        return Err(invalid(
                            format!("faults[{i}]"),
                            format!("undefined device '{device}'"),
                        ));
                    }
                }
                FaultDecl::ReplayRequest { call, .. } => {
                    if *call >= self.calls.len() {
                        return Err(invalid(
                            format!("faults[{i}]"),
                            format!("call index {call} out of range"),
                        ));
                    }
                }
                FaultDecl::UnauthorizedCall { caller, callee, .. } => {
                    for end in [caller, callee] {
                        if !nodes.contains(end.as_str()) {
                            return Err(invalid(
                                format!("faults[{i}]"),
                                format!("undefined node '{end}'"),
                            ));
                        }
                    }
                }
                FaultDecl::TamperLedger { .. } => {}
            }
        }

        // Ticks must strictly increase across the merged event stream.
        let mut ticks: Vec<(u64, String)> = Vec::new();
        for (i, a) in self.admissions.iter().enumerate() {
            ticks.push((a.tick, format!("admissions[{i}]")));
        }
        for (i, r) in self.revocations.iter().enumerate() {
            ticks.push((r.tick, format!("revocations[{i}]")));
        }
        for (i, l) in self.leases.iter().enumerate() {
            ticks.push((l.tick, format!("leases[{i}]")));
        }
        for (i, c) in self.calls.iter().enumerate() {
            ticks.push((c.tick, format!("calls[{i}]")));
        }
        let mut seen: BTreeMap<u64, &str> = BTreeMap::new();
        for (tick, element) in &ticks {
            if let Some(first) = seen.get(tick) {
                return Err(invalid(
                    element.clone(),
                    format!("tick {tick} already used by {first}"),
                ));
            }
            seen.insert(*tick, element);
        }
        Ok(())
    }
}

fn build_schema(f: &FunctionDecl) -> Result<ParameterSchema, String> {
    let mut fields = Vec::new();
    for p in &f.params {
        let kind = match p.kind.as_str() {
            "integer" => FieldKind::Integer {
                min: p.min.unwrap_or(i64::MIN),
                max: p.max.unwrap_or(i64::MAX),
            },
            "text" => FieldKind::Text {
                max_len: p.max_len.unwrap_or(u64::MAX),
            },
            "bytes" => FieldKind::Bytes {
                max_len: p.max_len.unwrap_or(u64::MAX),
            },
            other => return Err(format!("field '{}': unknown kind '{other}'", p.name)),
        };
        fields.push(FieldSchema {
            name: p.name.clone(),
            kind,
        });
    }
    ParameterSchema::new(fields).map_err(|e| e.to_string())
}

/// Built-in handlers available to scenario nodes: `echo`, `reverse`,
/// `const:<text>`, `fail:<message>`.
pub fn builtin_handler(spec: &str) -> Option<Handler> {
    if spec == "echo" {
        return Some(Box::new(|params: &[u8]| Ok(params.to_vec())));
    }
    if spec == "reverse" {
        return Some(Box::new(|params: &[u8]| {
            Ok(params.iter().rev().copied().collect())
        }));
    }
    if let Some(text) = spec.strip_prefix("const:") {
        let bytes = text.as_bytes().to_vec();
        return Some(Box::new(move |_: &[u8]| Ok(bytes.clone())));
    }
    if let Some(msg) = spec.strip_prefix("fail:") {
        let msg = msg.to_string();
        return Some(Box::new(move |_: &[u8]| Err(msg.clone())));
    }
    None
}

/// One expectation comparison from a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectationResult {
    pub label: String,
    pub expected: String,
    pub actual: String,
}

impl ExpectationResult {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

/// Everything a scenario run produces.
#[derive(Debug)]
pub struct RunResult {
    pub live_trace: FlowTrace,
    pub registry_path: PathBuf,
    pub flow_path: PathBuf,
    pub leases_path: PathBuf,
    pub metrics: MetricsSnapshot,
    pub elapsed_ms: u128,
    pub throughput_per_sec: f64,
    pub workers: u64,
    pub expectations: Vec<ExpectationResult>,
    pub report: CompletenessReport,
    pub data_key: DataKey,
    pub identities: crate::runtime::AppIdentities,
    pub tampered_block: Option<u64>,
}

impl RunResult {
    pub fn all_expectations_met(&self) -> bool {
        self.expectations.iter().all(ExpectationResult::passed)
    }

    pub fn failed_expectations(&self) -> Vec<&ExpectationResult> {
        self.expectations.iter().filter(|e| !e.passed()).collect()
    }
}

enum Event<'a> {
    Admit(usize, &'a AdmissionStep),
    Revoke(&'a RevocationStep),
    Lease(&'a LeaseStep),
    Call(usize, &'a CallStep),
}

impl Event<'_> {
    fn tick(&self) -> u64 {
        match self {
            Event::Admit(_, a) => a.tick,
            Event::Revoke(r) => r.tick,
            Event::Lease(l) => l.tick,
            Event::Call(_, c) => c.tick,
        }
    }
}

/// Derive the deployment data key from the seed, domain-separated from
/// the runtime RNG stream.
pub fn derive_data_key(seed: u64) -> DataKey {
    let mut w = Writer::new();
    w.put_text("bbx.data-key").put_u64(seed);
    let digest = sha256(&w.finish());
    let mut rng = ChaCha20Rng::from_seed(digest.0);
    DataKey::random(&mut rng)
}

/// Execute a scenario: build the registry, admit devices, run the
/// scripted calls at their ticks, inject faults, and collect results.
/// Expectation mismatches are result content, not errors.
pub fn run_scenario(
    scenario: &Scenario,
    seed: u64,
    workers: u64,
    out_dir: &Path,
) -> Result<RunResult, ScenarioError> {
    scenario.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| ScenarioError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let (registry_path, flow_path) =
        ApplicationConfig::for_deployment(out_dir, &scenario.deployment_id);
    let data_key = derive_data_key(seed);
    let config = ApplicationConfig {
        deployment_id: scenario.deployment_id.clone(),
        guard_workers: workers,
        quorum: scenario.quorum,
        leases_enabled: true,
        data_key_hex: data_key.to_hex(),
        registry_path: registry_path.clone(),
        flow_path: flow_path.clone(),
        clock: ClockMode::Logical,
        rng_seed: seed,
    };
    let app = Application::start(config, None)?;
    let clock = app.logical_clock().expect("logical clock");
    let started = std::time::Instant::now();

    // Registration order is fixed by the document so identity key
    // derivation is deterministic for a given seed.
    let root = app.identities().root.clone();
    let mut identities: HashMap<String, SigningIdentity> = HashMap::new();
    {
        let mut reg = app.registry().write().expect("registry lock");
        for decl in self_chain(&scenario.experts, &scenario.publishers) {
            let (id, role) = decl;
            let identity = {
                let mut rng = app.rng().lock().expect("rng lock");
                SigningIdentity::generate(&id, &mut *rng)
            };
            reg.register_identity(&id, identity.public_key(), Digest32::ZERO, role, &root)?;
            identities.insert(id, identity);
        }
    }

    let skipped_devices: HashSet<&str> = scenario
        .faults
        .iter()
        .filter_map(|f| match f {
            FaultDecl::UnregisteredDevice { device, .. } => Some(device.as_str()),
            _ => None,
        })
        .collect();
    let tampered_devices: HashSet<&str> = scenario
        .faults
        .iter()
        .filter_map(|f| match f {
            FaultDecl::TamperBinary { device, .. } => Some(device.as_str()),
            _ => None,
        })
        .collect();

    let mut device_states: HashMap<String, DeviceState> = HashMap::new();
    {
        let mut reg = app.registry().write().expect("registry lock");
        for d in &scenario.devices {
            let stages: Vec<(String, Digest32)> = d
                .boot_stages
                .iter()
                .map(|s| (s.clone(), sha256(s.as_bytes())))
                .collect();
            let device = {
                let mut rng = app.rng().lock().expect("rng lock");
                initialize_device(&d.id, stages, &mut *rng).expect("nonempty boot stages")
            };
            if !skipped_devices.contains(d.id.as_str()) {
                let boot = measure_boot_chain(&device);
                reg.register_identity(&d.id, device.public_key(), boot, Role::Device, &root)?;
            }
            device_states.insert(d.id.clone(), device);
        }
        for s in &scenario.software {
            let publisher = identities.get(&s.publisher).expect("validated publisher");
            reg.register_software(
                &s.component,
                &s.version,
                sha256(s.content.as_bytes()),
                "",
                publisher,
            )?;
            for r in &s.reviews {
                let expert = identities.get(&r.expert).expect("validated expert");
                let verdict = Verdict::parse(&r.verdict).expect("validated verdict");
                reg.submit_review(&s.component, &s.version, verdict, expert)?;
            }
        }
        for p in &scenario.policies {
            reg.add_policy_rule(&p.caller, &p.callee, &p.function, &root)?;
        }
    }

    // Effective code bytes per device, with tamper-binary applied after
    // the reviews above signed the honest digest.
    let mut device_code: HashMap<String, Vec<u8>> = HashMap::new();
    for d in &scenario.devices {
        let sw = scenario
            .software
            .iter()
            .find(|s| s.component == d.software && s.version == d.version)
            .expect("validated software ref");
        let mut code = sw.content.as_bytes().to_vec();
        if tampered_devices.contains(d.id.as_str()) {
            code[0] ^= 0xff;
        }
        device_code.insert(d.id.clone(), code);
    }

    let nodes_by_device: HashMap<&str, Vec<&NodeDecl>> = {
        let mut m: HashMap<&str, Vec<&NodeDecl>> = HashMap::new();
        for n in &scenario.nodes {
            m.entry(n.device.as_str()).or_default().push(n);
        }
        m
    };

    // Merge the scripted steps into one tick-ordered stream.
    let mut events: Vec<Event> = Vec::new();
    for (i, a) in scenario.admissions.iter().enumerate() {
        events.push(Event::Admit(i, a));
    }
    for r in &scenario.revocations {
        events.push(Event::Revoke(r));
    }
    for l in &scenario.leases {
        events.push(Event::Lease(l));
    }
    for (i, c) in scenario.calls.iter().enumerate() {
        events.push(Event::Call(i, c));
    }
    events.sort_by_key(Event::tick);

    let fault_expectation = |device: &str| -> Option<&str> {
        scenario.faults.iter().find_map(|f| match f {
            FaultDecl::TamperBinary { device: d, expect } if d == device => Some(expect.as_str()),
            FaultDecl::UnregisteredDevice { device: d, expect } if d == device => {
                Some(expect.as_str())
            }
            _ => None,
        })
    };

    let mut expectations: Vec<ExpectationResult> = Vec::new();
    let mut registered_nodes: HashSet<String> = HashSet::new();
    let mut call_receipts: Vec<(CallStep, Nonce16, Vec<u8>)> = Vec::new();
    let mut last_tick = 0u64;

    for event in events {
        clock.set(event.tick());
        last_tick = last_tick.max(event.tick());
        match event {
            Event::Admit(i, step) => {
                let device = device_states.get_mut(&step.device).expect("validated device");
                let code = device_code.get(&step.device).expect("validated device");
                let challenge = app.issue_challenge();
                let att = attest_load(device, code, &challenge.0).expect("well-formed challenge");
                let outcome = app.admit_device(&att)?;
                let expected = fault_expectation(&step.device)
                    .unwrap_or(step.expect.as_str())
                    .to_string();
                let actual = if outcome.verdict.is_approved() {
                    "approved".to_string()
                } else {
                    format!("denied:{}", outcome.verdict.reason_str())
                };
                expectations.push(ExpectationResult {
                    label: format!("admissions[{i}]"),
                    expected,
                    actual,
                });
                if outcome.verdict.is_approved() {
                    for n in nodes_by_device.get(step.device.as_str()).into_iter().flatten() {
                        if !registered_nodes.insert(n.id.clone()) {
                            continue;
                        }
                        let functions = n
                            .functions
                            .iter()
                            .map(|f| FunctionSpec {
                                function_name: f.name.clone(),
                                schema: build_schema(f).expect("validated schema"),
                                handler: builtin_handler(&f.handler).expect("validated handler"),
                            })
                            .collect();
                        app.register_node(NodeSpec {
                            node_id: n.id.clone(),
                            device_id: n.device.clone(),
                            functions,
                        })?;
                    }
                }
            }
            Event::Revoke(step) => {
                let mut reg = app.registry().write().expect("registry lock");
                reg.revoke_software(&step.component, &step.version, &step.reason, &root)?;
            }
            Event::Lease(step) => {
                app.grant_lease(&step.caller, &step.callee, step.duration_ms)?;
            }
            Event::Call(i, step) => {
                let params = encode_call_params(step);
                let receipt = app.invoke(&step.caller, &step.callee, &step.function, &params);
                expectations.push(ExpectationResult {
                    label: format!("calls[{i}]"),
                    expected: step.expect.clone(),
                    actual: receipt.response.decision_str(),
                });
                call_receipts.push((step.clone(), receipt.replay_nonce, params));
            }
        }
    }

    // Fault extras run after the script, one tick apart.
    let mut extra_tick = last_tick;
    for (i, fault) in scenario.faults.iter().enumerate() {
        match fault {
            FaultDecl::ReplayRequest { call, expect } => {
                extra_tick += 1;
                clock.set(extra_tick);
                let (step, nonce, params) = &call_receipts[*call];
                let response = app.invoke_with_nonce(
                    &step.caller,
                    &step.callee,
                    &step.function,
                    params,
                    *nonce,
                );
                expectations.push(ExpectationResult {
                    label: format!("faults[{i}]"),
                    expected: expect.clone(),
                    actual: response.decision_str(),
                });
            }
            FaultDecl::UnauthorizedCall {
                caller,
                callee,
                function,
                params,
                expect,
            } => {
                extra_tick += 1;
                clock.set(extra_tick);
                let values: Vec<ParamValue> = params
                    .iter()
                    .map(|p| p.to_value().expect("validated params"))
                    .collect();
                let receipt = app.invoke(caller, callee, function, &encode_params(&values));
                expectations.push(ExpectationResult {
                    label: format!("faults[{i}]"),
                    expected: expect.clone(),
                    actual: receipt.response.decision_str(),
                });
            }
            _ => {}
        }
    }

    app.drain();
    let elapsed = started.elapsed();
    let metrics = app.metrics();
    let live_trace = app.live_trace();
    let lease_entries = app.lease_entries();
    let report = {
        let flow = app.flow().lock().expect("flow lock");
        completeness_report(flow.ledger(), &lease_entries)?
    };
    let throughput_per_sec = if elapsed.as_secs_f64() > 0.0 {
        metrics.requests as f64 / elapsed.as_secs_f64()
    } else {
        0.0
    };
    let identities = app.identities().clone();
    app.shutdown();

    let leases_path = out_dir.join(format!("{}.leases.txt", scenario.deployment_id));
    fs::write(&leases_path, render_lease_log(&lease_entries)).map_err(|source| {
        ScenarioError::Io {
            path: leases_path.clone(),
            source,
        }
    })?;

    let mut tampered_block = None;
    for fault in &scenario.faults {
        if let FaultDecl::TamperLedger { block } = fault {
            tamper_chain_file(&flow_path, *block)?;
            tampered_block = Some(*block);
        }
    }

    Ok(RunResult {
        live_trace,
        registry_path,
        flow_path,
        leases_path,
        metrics,
        elapsed_ms: elapsed.as_millis(),
        throughput_per_sec,
        workers,
        expectations,
        report,
        data_key,
        identities,
        tampered_block,
    })
}

fn encode_call_params(step: &CallStep) -> Vec<u8> {
    let values: Vec<ParamValue> = step
        .params
        .iter()
        .map(|p| p.to_value().expect("validated params"))
        .collect();
    encode_params(&values)
}

fn self_chain(
    experts: &[IdentityDecl],
    publishers: &[IdentityDecl],
) -> Vec<(String, Role)> {
    let mut out = Vec::new();
    for e in experts {
        out.push((e.id.clone(), Role::Expert));
    }
    for p in publishers {
        out.push((p.id.clone(), Role::Publisher));
    }
    out
}

/// Flip the last byte of the framed block at `block_index` in a chain
/// file; used by the tamper-ledger fault and tamper-evidence tests.
pub fn tamper_chain_file(path: &Path, block_index: u64) -> Result<(), ScenarioError> {
    let bytes = fs::read(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut offset = 0usize;
    let mut index = 0u64;
    let mut out = bytes.clone();
    while offset + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        let start = offset + 4;
        let end = start + len;
        if end > bytes.len() {
            break;
        }
        if index == block_index {
            out[end - 1] ^= 0x01;
            fs::write(path, out).map_err(|source| ScenarioError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            return Ok(());
        }
        offset = end;
        index += 1;
    }
    Err(invalid(
        "faults",
        format!("tamper-ledger block {block_index} beyond chain length {index}"),
    ))
}
