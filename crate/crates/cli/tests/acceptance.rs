//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N (<name>): pass|fail` line (visible with `--nocapture`).

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use bbx_core::attestation::{
    attest_load, initialize_device, make_verification_code, measure_boot_chain,
};
use bbx_core::crypto::sha256;
use bbx_core::flowlog::{replay_flow, CallTrace, Decision, TraceEntry, ADMIT_FUNCTION};
use bbx_core::guard::AdmitOutcome;
use bbx_core::ledger::{verify_chain_file, DeploymentManifest, Ledger, LedgerKind};
use bbx_core::registry::{RegistryStore, Role, Verdict};
use bbx_core::runtime::{Application, ApplicationConfig, ClockMode, FunctionSpec, NodeSpec};
use bbx_core::scenario::{load_scenario, load_scenario_file, run_scenario};
use bbx_core::{
    encode_params, Digest32, FieldKind, FieldSchema, LogicalClock, ParamValue, ParameterSchema,
    SigningIdentity, TimeSource, WallClock,
};

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

/// The two criteria with wall-clock budgets take this lock so parallel
/// test scheduling cannot inflate their measured runtime.
static TIMED: Mutex<()> = Mutex::new(());

/// Write one line straight to fd 1, bypassing libtest's capture, so
/// the verdict lines appear in plain `cargo test` output.
fn emit(line: &str) {
    let bytes = format!("{line}\n");
    let _ = unsafe { libc::write(1, bytes.as_ptr() as *const libc::c_void, bytes.len()) };
}

fn criterion(number: u32, name: &str, run: impl FnOnce() -> Result<(), String>) {
    let outcome = catch_unwind(AssertUnwindSafe(run));
    let failure = match outcome {
        Ok(Ok(())) => None,
        Ok(Err(detail)) => Some(detail),
        Err(payload) => Some(
            payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panicked".to_string()),
        ),
    };
    match &failure {
        None => emit(&format!("criterion {number} ({name}): pass")),
        Some(_) => emit(&format!("criterion {number} ({name}): fail")),
    }
    if let Some(detail) = failure {
        panic!("criterion {number} ({name}): {detail}");
    }
}

/// A running application with one admitted-capable device and the expert
/// identities needed to move its software through review.
struct Lab {
    app: Application,
    device: bbx_core::DeviceState,
    code: Vec<u8>,
    alice: SigningIdentity,
    bob: SigningIdentity,
    _dir: tempfile::TempDir,
}

impl Lab {
    /// Start with `reviews` approve-verdicts (0..=2) already on the chain.
    fn start(seed: u64, workers: u64, reviews: usize) -> Lab {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = ApplicationConfig {
            deployment_id: "lab".to_string(),
            guard_workers: workers,
            quorum: 2,
            leases_enabled: true,
            data_key_hex: "11".repeat(32),
            registry_path: dir.path().join("lab.registry.chain"),
            flow_path: dir.path().join("lab.flow.chain"),
            clock: ClockMode::Logical,
            rng_seed: seed,
        };
        let app = Application::start(config, None).expect("start");
        let code = b"lab node software build 1".to_vec();
        let root = app.identities().root.clone();
        let (alice, bob, posco, device) = {
            let mut rng = app.rng().lock().expect("rng lock");
            (
                SigningIdentity::generate("alice", &mut *rng),
                SigningIdentity::generate("bob", &mut *rng),
                SigningIdentity::generate("posco", &mut *rng),
                initialize_device("unit-1", vec![("rom".to_string(), sha256(b"rom"))], &mut *rng)
                    .expect("boot stages"),
            )
        };
        {
            let mut reg = app.registry().write().expect("registry lock");
            reg.register_identity("alice", alice.public_key(), Digest32::ZERO, Role::Expert, &root)
                .expect("alice");
            reg.register_identity("bob", bob.public_key(), Digest32::ZERO, Role::Expert, &root)
                .expect("bob");
            reg.register_identity("posco", posco.public_key(), Digest32::ZERO, Role::Publisher, &root)
                .expect("posco");
            reg.register_identity(
                "unit-1",
                device.public_key(),
                measure_boot_chain(&device),
                Role::Device,
                &root,
            )
            .expect("device");
            reg.register_software("lab-sw", "1.0", sha256(&code), "", &posco)
                .expect("software");
            for expert in [&alice, &bob].into_iter().take(reviews) {
                reg.submit_review("lab-sw", "1.0", Verdict::Approve, expert)
                    .expect("review");
            }
            reg.add_policy_rule("node-a", "node-b", "*", &root).expect("policy");
        }
        Lab {
            app,
            device,
            code,
            alice,
            bob,
            _dir: dir,
        }
    }

    fn admit(&mut self) -> AdmitOutcome {
        let challenge = self.app.issue_challenge();
        let att = attest_load(&mut self.device, &self.code, &challenge.0).expect("attest");
        self.app.admit_device(&att).expect("admit")
    }

    fn review(&self, expert: &SigningIdentity) {
        let mut reg = self.app.registry().write().expect("registry lock");
        reg.submit_review("lab-sw", "1.0", Verdict::Approve, expert)
            .expect("review");
    }

    /// node-a calls, node-b serves `put(v: 0..=1_000_000)` echoing the
    /// raw parameter bytes back.
    fn register_nodes(&self) {
        self.app
            .register_node(NodeSpec {
                node_id: "node-a".to_string(),
                device_id: "unit-1".to_string(),
                functions: vec![],
            })
            .expect("node-a");
        let schema = ParameterSchema::new(vec![FieldSchema {
            name: "v".to_string(),
            kind: FieldKind::Integer {
                min: 0,
                max: 1_000_000,
            },
        }])
        .expect("schema");
        self.app
            .register_node(NodeSpec {
                node_id: "node-b".to_string(),
                device_id: "unit-1".to_string(),
                functions: vec![FunctionSpec {
                    function_name: "put".to_string(),
                    schema,
                    handler: Box::new(|p: &[u8]| Ok(p.to_vec())),
                }],
            })
            .expect("node-b");
    }
}

fn flow_trace(app: &Application) -> Result<bbx_core::FlowTrace, String> {
    let flow = app.flow().lock().expect("flow lock");
    replay_flow(flow.ledger(), &app.data_key()).map_err(|e| format!("replay: {e}"))
}

fn flow_block_count(app: &Application) -> u64 {
    let flow = app.flow().lock().expect("flow lock");
    flow.ledger().len()
}

fn frame_bounds(raw: &[u8]) -> Vec<(usize, usize)> {
    let mut bounds = Vec::new();
    let mut pos = 0usize;
    while pos + 4 <= raw.len() {
        let len = u32::from_be_bytes(raw[pos..pos + 4].try_into().unwrap()) as usize;
        let end = pos + 4 + len;
        bounds.push((pos, end));
        pos = end;
    }
    bounds
}

#[test]
fn tamper_evidence() {
    criterion(1, "tamper evidence", || {
        let _serial = TIMED.lock().unwrap();
        let started = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let clock = LogicalClock::new();
        let mut flips = 0u32;
        for ledger_i in 0..20 {
            let root =
                SigningIdentity::generate(format!("root-{ledger_i}"), &mut rng);
            let manifest = DeploymentManifest {
                deployment_id: format!("tev-{ledger_i}"),
                kind: LedgerKind::Flow,
                quorum: 2,
                anchors: vec![(root.id().to_string(), root.public_key())],
            };
            let path = dir.path().join(format!("tev-{ledger_i}.flow.chain"));
            let mut ledger = Ledger::create(&path, manifest, &root, clock.as_ref())
                .map_err(|e| format!("create: {e}"))?;
            for _ in 0..49 {
                let len = rng.gen_range(24..160);
                let mut payload = vec![0u8; len];
                rng.fill(&mut payload[..]);
                ledger
                    .append(&payload, &root, clock.as_ref())
                    .map_err(|e| format!("append: {e}"))?;
            }
            let pristine = fs::read(&path).expect("read chain");
            let bounds = frame_bounds(&pristine);
            check!(bounds.len() == 50, "ledger {ledger_i}: {} frames", bounds.len());
            let tampered_path = dir.path().join("tampered.chain");
            for _ in 0..50 {
                let offset = rng.gen_range(0..pristine.len());
                let bit = 1u8 << rng.gen_range(0..8u32);
                let mut copy = pristine.clone();
                copy[offset] ^= bit;
                fs::write(&tampered_path, &copy).expect("write tampered");
                let report =
                    verify_chain_file(&tampered_path).map_err(|e| format!("verify: {e}"))?;
                let flipped_index = bounds
                    .iter()
                    .position(|(s, e)| offset >= *s && offset < *e)
                    .expect("offset in some frame") as u64;
                let Some((failed_index, _)) = report.first_failure else {
                    return Err(format!(
                        "flip of bit {bit:#04x} at byte {offset} (block {flipped_index}) verified as valid"
                    ));
                };
                check!(
                    failed_index <= flipped_index,
                    "failing index {failed_index} > flipped block {flipped_index}"
                );
                flips += 1;
            }
        }
        check!(flips >= 1000, "only {flips} flips exercised");
        let elapsed = started.elapsed();
        check!(
            elapsed < Duration::from_secs(10),
            "took {elapsed:?}, budget 10s"
        );
        Ok(())
    });
}

#[test]
fn approval_gate() {
    criterion(2, "approval gate", || {
        let mut lab = Lab::start(5, 1, 0);

        let zero = lab.admit();
        check!(
            zero.verdict.reason_str() == "software_not_approved",
            "0 reviews: {}",
            zero.verdict.reason_str()
        );
        lab.review(&lab.alice.clone());
        let one = lab.admit();
        check!(
            one.verdict.reason_str() == "software_not_approved",
            "1 review: {}",
            one.verdict.reason_str()
        );
        lab.review(&lab.bob.clone());
        let two = lab.admit();
        check!(
            two.verdict.is_approved(),
            "2 reviews: {}",
            two.verdict.reason_str()
        );
        check!(two.session.is_some(), "approved admission carries no session");

        lab.app.drain();
        let trace = flow_trace(&lab.app)?;
        let admissions: Vec<&CallTrace> = trace
            .calls()
            .filter(|c| c.function == ADMIT_FUNCTION)
            .collect();
        check!(admissions.len() == 3, "{} admission records", admissions.len());
        let decisions: Vec<String> = admissions.iter().map(|c| c.decision.to_string()).collect();
        check!(
            decisions
                == vec![
                    "denied:software_not_approved",
                    "denied:software_not_approved",
                    "approved"
                ],
            "{decisions:?}"
        );
        Ok(())
    });
}

#[test]
fn replay_prevention() {
    criterion(3, "replay prevention", || {
        let mut lab = Lab::start(6, 2, 2);
        let admitted = lab.admit();
        check!(admitted.verdict.is_approved(), "admission denied");
        lab.register_nodes();

        let mut rng = ChaCha20Rng::seed_from_u64(303);
        let mut receipts = Vec::new();
        for i in 0..100 {
            let v: i64 = rng.gen_range(0..=1_000_000);
            let params = encode_params(&[ParamValue::Integer(v)]);
            let receipt = lab.app.invoke("node-a", "node-b", "put", &params);
            check!(
                receipt.response.approved(),
                "call {i}: {}",
                receipt.response.decision_str()
            );
            receipts.push((receipt.replay_nonce, params));
        }
        for (i, (nonce, params)) in receipts.iter().enumerate() {
            let response = lab
                .app
                .invoke_with_nonce("node-a", "node-b", "put", params, *nonce);
            check!(
                response.decision_str() == "denied:replay",
                "replay {i}: {}",
                response.decision_str()
            );
        }
        lab.app.drain();

        let trace = flow_trace(&lab.app)?;
        let calls: Vec<&CallTrace> = trace.calls().collect();
        check!(calls.len() == 201, "{} call records", calls.len());
        let replays = calls
            .iter()
            .filter(|c| c.decision == Decision::Denied("replay".to_string()))
            .count();
        check!(replays == 100, "{replays} replay denials");
        for (i, (nonce, params)) in receipts.iter().enumerate() {
            let originals = calls
                .iter()
                .filter(|c| {
                    c.replay_nonce == *nonce && c.decision.is_approved() && c.params == *params
                })
                .count();
            check!(originals == 1, "original record for call {i}: {originals}");
        }
        Ok(())
    });
}

/// A single-device scenario whose script issues `calls` calls with a mix
/// of approvals, schema violations, and policy denials.
fn relay_scenario(calls: usize) -> String {
    let mut doc = String::from(
        r#"
deployment_id = "relay"
quorum = 2

[[experts]]
id = "alice"

[[experts]]
id = "bob"

[[publishers]]
id = "posco"

[[software]]
component = "relay-sw"
version = "1.0"
publisher = "posco"
content = "relay build 1"
reviews = [
    { expert = "alice", verdict = "approve" },
    { expert = "bob", verdict = "approve" },
]

[[devices]]
id = "relay-1"
boot_stages = ["rom", "loader"]
software = "relay-sw"
version = "1.0"

[[nodes]]
id = "pump"
device = "relay-1"

[[nodes.functions]]
name = "drive"
handler = "echo"
params = [{ name = "data", kind = "bytes", max_len = 64 }]

[[nodes]]
id = "valve"
device = "relay-1"

[[nodes.functions]]
name = "set"
handler = "const:ok"
params = [{ name = "level", kind = "integer", min = 0, max = 1000 }]

[[nodes]]
id = "meter"
device = "relay-1"

[[nodes.functions]]
name = "read"
handler = "const:17"
params = []

[[policies]]
caller = "pump"
callee = "valve"
function = "*"

[[policies]]
caller = "pump"
callee = "meter"
function = "read"

[[admissions]]
tick = 1
device = "relay-1"
expect = "approved"
"#,
    );
    for i in 0..calls {
        let tick = 10 + i;
        let step = match i % 4 {
            0 => format!(
                "\n[[calls]]\ntick = {tick}\ncaller = \"pump\"\ncallee = \"valve\"\nfunction = \"set\"\nparams = [{{ int = {} }}]\nexpect = \"approved\"\n",
                (i * 13) % 1001
            ),
            1 => format!(
                "\n[[calls]]\ntick = {tick}\ncaller = \"pump\"\ncallee = \"meter\"\nfunction = \"read\"\nparams = []\nexpect = \"approved\"\n"
            ),
            2 => format!(
                "\n[[calls]]\ntick = {tick}\ncaller = \"pump\"\ncallee = \"valve\"\nfunction = \"set\"\nparams = [{{ int = 5000 }}]\nexpect = \"denied:implausible_input\"\n"
            ),
            _ => format!(
                "\n[[calls]]\ntick = {tick}\ncaller = \"valve\"\ncallee = \"pump\"\nfunction = \"drive\"\nparams = [{{ bytes = \"00\" }}]\nexpect = \"denied:policy\"\n"
            ),
        };
        doc.push_str(&step);
    }
    doc
}

#[test]
fn flow_reproducibility() {
    criterion(4, "flow reproducibility", || {
        let doc = relay_scenario(56);
        let scenario = load_scenario(&doc).map_err(|e| format!("scenario: {e}"))?;
        check!(scenario.calls.len() >= 50, "{} calls", scenario.calls.len());
        let d1 = tempfile::tempdir().expect("tempdir");
        let d2 = tempfile::tempdir().expect("tempdir");
        let r1 = run_scenario(&scenario, 77, 1, d1.path()).map_err(|e| format!("run 1: {e}"))?;
        let r2 = run_scenario(&scenario, 77, 1, d2.path()).map_err(|e| format!("run 2: {e}"))?;
        check!(
            r1.all_expectations_met(),
            "expectation mismatch: {:?}",
            r1.failed_expectations()
        );

        let f1 = fs::read(&r1.flow_path).expect("read flow 1");
        let f2 = fs::read(&r2.flow_path).expect("read flow 2");
        check!(f1 == f2, "same-seed flow files differ");

        let ledger = Ledger::open(&r1.flow_path).map_err(|e| format!("open: {e}"))?;
        let replayed = replay_flow(&ledger, &r1.data_key).map_err(|e| format!("replay: {e}"))?;
        check!(
            replayed == r1.live_trace,
            "audit replay differs from live trace"
        );

        let output = Command::new(env!("CARGO_BIN_EXE_bbx"))
            .args([
                "audit",
                "replay",
                "--chain",
                r1.flow_path.to_str().unwrap(),
                "--key",
                &r1.data_key.to_hex(),
            ])
            .output()
            .expect("spawn bbx");
        check!(output.status.success(), "audit replay exited nonzero");
        let stdout = String::from_utf8_lossy(&output.stdout);
        check!(
            stdout == r1.live_trace.render(),
            "CLI replay output differs from live trace rendering"
        );
        Ok(())
    });
}

#[test]
fn exactly_once_under_concurrency() {
    criterion(5, "exactly-once under concurrency", || {
        let _serial = TIMED.lock().unwrap();
        let started = Instant::now();
        for k in [1u64, 2, 8] {
            for trial in 0..20u64 {
                let mut lab = Lab::start(9000 + k * 100 + trial, k, 2);
                let admitted = lab.admit();
                check!(admitted.verdict.is_approved(), "admission denied");
                lab.register_nodes();
                std::thread::scope(|s| {
                    for t in 0..8u64 {
                        let app = &lab.app;
                        s.spawn(move || {
                            for j in 0..125u64 {
                                let v = ((t * 1000 + j) % 1000) as i64;
                                let params = encode_params(&[ParamValue::Integer(v)]);
                                let receipt = app.invoke("node-a", "node-b", "put", &params);
                                assert!(
                                    receipt.response.approved(),
                                    "k={k} trial={trial}: {}",
                                    receipt.response.decision_str()
                                );
                            }
                        });
                    }
                });
                lab.app.drain();

                let trace = flow_trace(&lab.app)?;
                let calls: Vec<&CallTrace> = trace.calls().collect();
                let invokes = calls.iter().filter(|c| c.function == "put").count();
                check!(
                    invokes == 1000,
                    "k={k} trial={trial}: {invokes} call records"
                );
                let nonces: HashSet<[u8; 16]> =
                    calls.iter().map(|c| c.replay_nonce.0).collect();
                check!(
                    nonces.len() == calls.len(),
                    "k={k} trial={trial}: duplicate nonce"
                );
                // Genesis, admission, 1000 calls, 1000 responses; replay
                // already verified hash-chain contiguity over them.
                let blocks = flow_block_count(&lab.app);
                check!(
                    blocks == 2002,
                    "k={k} trial={trial}: {blocks} blocks"
                );
            }
        }
        let elapsed = started.elapsed();
        check!(
            elapsed < Duration::from_secs(60),
            "took {elapsed:?}, budget 60s"
        );
        Ok(())
    });
}

#[test]
fn lease_audit_gap() {
    criterion(6, "lease audit gap", || {
        let mut doc = relay_scenario(0);
        doc.push_str(
            r#"
[[leases]]
tick = 10
caller = "pump"
callee = "valve"
duration_ms = 20

[[calls]]
tick = 5
caller = "pump"
callee = "valve"
function = "set"
params = [{ int = 1 }]
expect = "approved"

[[calls]]
tick = 12
caller = "pump"
callee = "valve"
function = "set"
params = [{ int = 2 }]
expect = "approved"

[[calls]]
tick = 15
caller = "pump"
callee = "valve"
function = "set"
params = [{ int = 3 }]
expect = "approved"

[[calls]]
tick = 35
caller = "pump"
callee = "valve"
function = "set"
params = [{ int = 4 }]
expect = "approved"
"#,
        );
        let scenario = load_scenario(&doc).map_err(|e| format!("scenario: {e}"))?;
        let dir = tempfile::tempdir().expect("tempdir");
        let result = run_scenario(&scenario, 21, 1, dir.path()).map_err(|e| format!("run: {e}"))?;
        check!(
            result.all_expectations_met(),
            "expectation mismatch: {:?}",
            result.failed_expectations()
        );
        check!(
            result.report.gaps.len() == 1,
            "{} flagged gaps",
            result.report.gaps.len()
        );
        let gap = &result.report.gaps[0];
        check!(gap.start_ms == 10, "gap start {}", gap.start_ms);
        check!(gap.end_ms() == 30, "gap end {}", gap.end_ms());
        check!(
            gap.caller == "pump" && gap.callee == "valve",
            "gap edge {}->{}",
            gap.caller,
            gap.callee
        );

        let m = &result.metrics;
        let scripted = scenario.calls.len() as u64;
        check!(
            m.approvals + m.denials_total() + m.lease_bypassed == scripted,
            "approvals {} + denials {} + bypassed {} != scripted {scripted}",
            m.approvals,
            m.denials_total(),
            m.lease_bypassed
        );
        check!(m.lease_bypassed == 2, "{} bypassed", m.lease_bypassed);
        Ok(())
    });
}

#[test]
fn revocation_latency() {
    criterion(7, "revocation latency", || {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/revocation-drill.toml");
        let scenario = load_scenario_file(&path).map_err(|e| format!("scenario: {e}"))?;
        let dir = tempfile::tempdir().expect("tempdir");
        let result = run_scenario(&scenario, 3, 1, dir.path()).map_err(|e| format!("run: {e}"))?;
        let actual = |label: &str| -> Result<&str, String> {
            result
                .expectations
                .iter()
                .find(|e| e.label == label)
                .map(|e| e.actual.as_str())
                .ok_or_else(|| format!("no step {label}"))
        };
        check!(
            actual("admissions[0]")? == "approved",
            "pre-revocation admission: {}",
            actual("admissions[0]")?
        );
        check!(
            actual("admissions[1]")? == "denied:software_not_approved",
            "post-revocation admission: {}",
            actual("admissions[1]")?
        );
        check!(
            result.all_expectations_met(),
            "expectation mismatch: {:?}",
            result.failed_expectations()
        );
        Ok(())
    });
}

#[test]
fn verification_code_states_and_mutations() {
    criterion(8, "verification code", || {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut rng = ChaCha20Rng::seed_from_u64(88);
        let root = SigningIdentity::generate("root", &mut rng);
        let clock: Arc<dyn TimeSource> = Arc::new(WallClock);
        let mut store = RegistryStore::create(
            &dir.path().join("lab.registry.chain"),
            "lab",
            2,
            root.clone(),
            clock,
        )
        .map_err(|e| format!("create: {e}"))?;
        let alice = SigningIdentity::generate("alice", &mut rng);
        let bob = SigningIdentity::generate("bob", &mut rng);
        let posco = SigningIdentity::generate("posco", &mut rng);
        store
            .register_identity("alice", alice.public_key(), Digest32::ZERO, Role::Expert, &root)
            .unwrap();
        store
            .register_identity("bob", bob.public_key(), Digest32::ZERO, Role::Expert, &root)
            .unwrap();
        store
            .register_identity("posco", posco.public_key(), Digest32::ZERO, Role::Publisher, &root)
            .unwrap();
        let code_bytes = b"metered dispenser firmware";
        let mut device = initialize_device(
            "disp-1",
            vec![("rom".to_string(), sha256(b"rom"))],
            &mut rng,
        )
        .unwrap();
        store
            .register_identity(
                "disp-1",
                device.public_key(),
                measure_boot_chain(&device),
                Role::Device,
                &root,
            )
            .unwrap();
        store
            .register_software("disp-fw", "1.0", sha256(code_bytes), "", &posco)
            .unwrap();
        attest_load(&mut device, code_bytes, &[0u8; 16]).unwrap();
        let token = make_verification_code(&device, &WallClock).unwrap().render();

        let dir_arg = dir.path().display().to_string();
        let run_check = |token: &str| -> (i32, String) {
            let output = Command::new(env!("CARGO_BIN_EXE_bbx"))
                .args(["code", "check", "--dir", &dir_arg, "--token", token])
                .output()
                .expect("spawn bbx");
            (
                output.status.code().expect("exit code"),
                String::from_utf8_lossy(&output.stdout).into_owned(),
            )
        };

        let (exit, stdout) = run_check(&token);
        check!(
            exit == 1 && stdout.contains("status=pending"),
            "pending: exit {exit}, {stdout}"
        );

        store.submit_review("disp-fw", "1.0", Verdict::Approve, &alice).unwrap();
        store.submit_review("disp-fw", "1.0", Verdict::Approve, &bob).unwrap();
        let (exit, stdout) = run_check(&token);
        check!(
            exit == 0 && stdout.contains("result=accept"),
            "approved: exit {exit}, {stdout}"
        );

        // Any one-character corruption must be a format error, never a
        // pass or a mere state rejection.
        let chars: Vec<char> = token.chars().collect();
        for i in 0..100 {
            let pos = rng.gen_range(0..chars.len());
            let replacement = loop {
                let c = char::from(rng.gen_range(0x21u8..0x7f));
                if c != chars[pos] {
                    break c;
                }
            };
            let mut mutated = chars.clone();
            mutated[pos] = replacement;
            let mutated: String = mutated.into_iter().collect();
            let (exit, _) = run_check(&mutated);
            check!(
                exit == 2,
                "mutation {i} at {pos} ({:?} -> {replacement:?}): exit {exit}",
                chars[pos]
            );
        }

        store
            .revoke_software("disp-fw", "1.0", "field recall", &root)
            .unwrap();
        let (exit, stdout) = run_check(&token);
        check!(
            exit == 1 && stdout.contains("status=revoked"),
            "revoked: exit {exit}, {stdout}"
        );
        Ok(())
    });
}

const FAULT_LAB: &str = r#"
deployment_id = "fault-lab"
quorum = 2

[[experts]]
id = "alice"

[[experts]]
id = "bob"

[[publishers]]
id = "posco"

[[software]]
component = "core-sw"
version = "1.0"
publisher = "posco"
content = "fault lab core build"
reviews = [
    { expert = "alice", verdict = "approve" },
    { expert = "bob", verdict = "approve" },
]

[[software]]
component = "aux-sw"
version = "1.0"
publisher = "posco"
content = "fault lab aux build"
reviews = [
    { expert = "alice", verdict = "approve" },
    { expert = "bob", verdict = "approve" },
]

[[devices]]
id = "main-1"
boot_stages = ["rom"]
software = "core-sw"
version = "1.0"

[[devices]]
id = "aux-1"
boot_stages = ["rom"]
software = "aux-sw"
version = "1.0"

[[nodes]]
id = "left"
device = "main-1"

[[nodes.functions]]
name = "go"
handler = "echo"
params = [{ name = "data", kind = "bytes", max_len = 32 }]

[[nodes]]
id = "right"
device = "main-1"

[[nodes.functions]]
name = "put"
handler = "const:ok"
params = [{ name = "v", kind = "integer", min = 0, max = 100 }]

[[nodes]]
id = "idle"
device = "aux-1"

[[nodes.functions]]
name = "noop"
handler = "const:zzz"
params = []

[[policies]]
caller = "left"
callee = "right"
function = "*"

[[admissions]]
tick = 1
device = "main-1"
expect = "approved"

[[admissions]]
tick = 2
device = "aux-1"
expect = "approved"

[[calls]]
tick = 5
caller = "left"
callee = "right"
function = "put"
params = [{ int = 7 }]
expect = "approved"

[[calls]]
tick = 6
caller = "left"
callee = "right"
function = "put"
params = [{ int = 8 }]
expect = "approved"

[[calls]]
tick = 7
caller = "left"
callee = "right"
function = "put"
params = [{ int = 9 }]
expect = "approved"
"#;

fn call_at(entries: &[TraceEntry], i: usize) -> Result<&CallTrace, String> {
    match entries.get(i) {
        Some(TraceEntry::Call(c)) => Ok(c),
        other => Err(format!("entry {i} is {other:?}")),
    }
}

fn diff_positions(a: &[TraceEntry], b: &[TraceEntry]) -> Vec<usize> {
    a.iter()
        .zip(b.iter())
        .enumerate()
        .filter_map(|(i, (x, y))| (x != y).then_some(i))
        .collect()
}

#[test]
fn fault_differential() {
    criterion(9, "fault differential", || {
        let root_dir = tempfile::tempdir().expect("tempdir");
        let subdir = |name: &str| {
            let path = root_dir.path().join(name);
            fs::create_dir(&path).expect("subdir");
            path
        };
        let benign_scenario = load_scenario(FAULT_LAB).map_err(|e| format!("scenario: {e}"))?;
        let benign = run_scenario(&benign_scenario, 11, 1, &subdir("benign"))
            .map_err(|e| format!("benign run: {e}"))?;
        check!(
            benign.all_expectations_met(),
            "benign mismatch: {:?}",
            benign.failed_expectations()
        );
        let bt = &benign.live_trace.entries;
        check!(bt.len() == 5, "benign trace has {} entries", bt.len());

        let run_fault = |name: &str, suffix: &str| -> Result<bbx_core::RunResult, String> {
            let doc = format!("{FAULT_LAB}{suffix}");
            let scenario = load_scenario(&doc).map_err(|e| format!("fault scenario: {e}"))?;
            let result = run_scenario(&scenario, 11, 1, &subdir(name))
                .map_err(|e| format!("fault run: {e}"))?;
            check!(
                result.all_expectations_met(),
                "fault expectations: {:?}",
                result.failed_expectations()
            );
            Ok(result)
        };

        // tamper-binary: only the tampered device's admission flips.
        let r = run_fault(
            "tamper-binary",
            "\n[[faults]]\nkind = \"tamper-binary\"\ndevice = \"aux-1\"\nexpect = \"denied:software_not_approved\"\n",
        )?;
        let ft = &r.live_trace.entries;
        check!(ft.len() == bt.len(), "tamper-binary: {} entries", ft.len());
        check!(
            diff_positions(bt, ft) == vec![1],
            "tamper-binary diff at {:?}",
            diff_positions(bt, ft)
        );
        let changed = call_at(ft, 1)?;
        check!(
            changed.sender == "aux-1" && changed.function == ADMIT_FUNCTION,
            "tamper-binary changed {} {}",
            changed.sender,
            changed.function
        );
        check!(
            changed.decision == Decision::Denied("software_not_approved".to_string()),
            "tamper-binary decision {}",
            changed.decision
        );

        // replay-request: one extra denied record after an unchanged script.
        let r = run_fault(
            "replay-request",
            "\n[[faults]]\nkind = \"replay-request\"\ncall = 0\nexpect = \"denied:replay\"\n",
        )?;
        let ft = &r.live_trace.entries;
        check!(ft.len() == bt.len() + 1, "replay: {} entries", ft.len());
        check!(
            diff_positions(bt, ft).is_empty(),
            "replay changed scripted records at {:?}",
            diff_positions(bt, ft)
        );
        let extra = call_at(ft, bt.len())?;
        check!(
            extra.decision == Decision::Denied("replay".to_string()),
            "replay extra decision {}",
            extra.decision
        );
        check!(
            extra.params == call_at(bt, 2)?.params,
            "replay extra params differ from call 0"
        );

        // unauthorized-call: one extra policy denial on a ruleless edge.
        let r = run_fault(
            "unauthorized-call",
            "\n[[faults]]\nkind = \"unauthorized-call\"\ncaller = \"right\"\ncallee = \"left\"\nfunction = \"go\"\nparams = [{ bytes = \"00\" }]\nexpect = \"denied:policy\"\n",
        )?;
        let ft = &r.live_trace.entries;
        check!(ft.len() == bt.len() + 1, "unauthorized: {} entries", ft.len());
        check!(
            diff_positions(bt, ft).is_empty(),
            "unauthorized changed scripted records at {:?}",
            diff_positions(bt, ft)
        );
        let extra = call_at(ft, bt.len())?;
        check!(
            extra.sender == "right"
                && extra.receiver == "left"
                && extra.decision == Decision::Denied("policy".to_string()),
            "unauthorized extra {} -> {} {}",
            extra.sender,
            extra.receiver,
            extra.decision
        );
        check!(extra.response.is_none(), "denied call has a response");

        // unregistered-device: admission denied, same attested content.
        let r = run_fault(
            "unregistered-device",
            "\n[[faults]]\nkind = \"unregistered-device\"\ndevice = \"aux-1\"\nexpect = \"denied:unknown_device\"\n",
        )?;
        let ft = &r.live_trace.entries;
        check!(ft.len() == bt.len(), "unregistered: {} entries", ft.len());
        check!(
            diff_positions(bt, ft) == vec![1],
            "unregistered diff at {:?}",
            diff_positions(bt, ft)
        );
        let changed = call_at(ft, 1)?;
        check!(
            changed.decision == Decision::Denied("unknown_device".to_string()),
            "unregistered decision {}",
            changed.decision
        );
        check!(
            changed.params == call_at(bt, 1)?.params,
            "unregistered attestation params differ"
        );

        // tamper-ledger: the run itself is untouched; verification of the
        // named block is what changes.
        let r = run_fault(
            "tamper-ledger",
            "\n[[faults]]\nkind = \"tamper-ledger\"\nblock = 3\n",
        )?;
        let ft = &r.live_trace.entries;
        check!(
            diff_positions(bt, ft).is_empty() && ft.len() == bt.len(),
            "tamper-ledger changed the live trace"
        );
        check!(r.tampered_block == Some(3), "tampered_block {:?}", r.tampered_block);
        let benign_report =
            verify_chain_file(&benign.flow_path).map_err(|e| format!("verify: {e}"))?;
        check!(benign_report.valid(), "benign chain reported invalid");
        let fault_report =
            verify_chain_file(&r.flow_path).map_err(|e| format!("verify: {e}"))?;
        check!(
            fault_report.first_failure.map(|(i, _)| i) == Some(3),
            "tamper-ledger failure at {:?}",
            fault_report.first_failure
        );
        Ok(())
    });
}
