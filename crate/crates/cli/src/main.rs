//! Operator command line: registry governance, scenario execution, and
//! audit tooling over the two ledgers.
//!
//! Every failure exits nonzero with a final `error: <slug>: <detail>`
//! line on standard error. `audit verify` exits 1 on an invalid chain;
//! `code check` exits 1 on a rejected token and 2 on a malformed one.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bbx_core::attestation::{check_verification_code, CodeCheckOutcome};
use bbx_core::crypto::{DataKey, Digest32, PublicKey, Sig64, SigningIdentity};
use bbx_core::flowlog::{completeness_report, parse_lease_log, replay_flow};
use bbx_core::ledger::{verify_chain_file, Ledger, LedgerKind};
use bbx_core::registry::{RegistryStore, RegistryView, Role, SoftwareManifest, Verdict};
use bbx_core::scenario::{load_scenario_file, run_scenario};
use bbx_core::{TimeSource, WallClock};

#[derive(Parser)]
#[command(name = "bbx", about = "Guarded cross-node call framework", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Govern the public registry ledger.
    Registry {
        #[command(subcommand)]
        command: RegistryCommand,
    },
    /// Execute a scripted scenario.
    Run(RunArgs),
    /// Verify, replay, and summarize recorded chains.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Verification-code operations.
    Code {
        #[command(subcommand)]
        command: CodeCommand,
    },
}

#[derive(Args)]
struct DirArg {
    /// Deployment directory holding the chain files and keystore.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// Append a published software manifest.
    RegisterSoftware {
        #[command(flatten)]
        dir: DirArg,
        /// Manifest document (component, version, publisher, digest, signature).
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Append an expert review.
    Review {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        component: String,
        #[arg(long)]
        version: String,
        /// approve or reject
        #[arg(long)]
        verdict: String,
        /// Expert key document (id, secret_hex).
        #[arg(long)]
        key: PathBuf,
    },
    /// Append a revocation.
    Revoke {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        component: String,
        #[arg(long)]
        version: String,
        #[arg(long)]
        reason: String,
    },
    /// Append a device (or expert/publisher) registration.
    RegisterDevice {
        #[command(flatten)]
        dir: DirArg,
        /// Registration document (device_id, public_key_hex, boot_digest_hex, role).
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Append a policy rule allowing caller -> callee for a function.
    PolicyAllow {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        caller: String,
        #[arg(long)]
        callee: String,
        #[arg(long)]
        function: String,
    },
    /// Report the approval status of a code digest.
    Status {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        digest: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario document.
    #[arg(long)]
    scenario: PathBuf,
    /// RNG seed; fixes keys, nonces, and (at one worker) the ledger bytes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Guard worker count.
    #[arg(long, default_value_t = 1)]
    workers: u64,
    /// Output directory for chains, keystore, trace, and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Verify a chain file block by block.
    Verify {
        #[arg(long)]
        chain: PathBuf,
    },
    /// Decrypt and print the recorded flow, one record per line.
    Replay {
        #[arg(long)]
        chain: PathBuf,
        /// Data key hex.
        #[arg(long)]
        key: String,
    },
    /// Completeness report over a flow chain and its lease log.
    Report {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        leases: PathBuf,
    },
}

#[derive(Subcommand)]
enum CodeCommand {
    /// Check a verification token against the registry.
    Check {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        token: String,
    },
}

/// Keystore written by `bbx run`; holds the block-author secrets and the
/// data key for one deployment.
#[derive(Serialize, Deserialize)]
struct KeystoreDoc {
    deployment_id: String,
    root_secret_hex: String,
    guard_secret_hex: String,
    data_key_hex: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SoftwareManifestDoc {
    component: String,
    version: String,
    publisher: String,
    code_digest_hex: String,
    #[serde(default)]
    metadata: String,
    /// Publisher's signature over the code digest, if signed offline.
    #[serde(default)]
    signature_hex: Option<String>,
    /// Publisher secret for inline signing when no signature is given.
    #[serde(default)]
    publisher_key_hex: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceManifestDoc {
    device_id: String,
    public_key_hex: String,
    #[serde(default)]
    boot_digest_hex: Option<String>,
    #[serde(default = "default_role")]
    role: String,
}

fn default_role() -> String {
    "device".to_string()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyDoc {
    id: String,
    secret_hex: String,
}

struct Failure {
    slug: &'static str,
    detail: String,
    exit: u8,
}

impl Failure {
    fn new(slug: &'static str, detail: impl Display) -> Self {
        Failure {
            slug,
            detail: detail.to_string(),
            exit: 1,
        }
    }

    fn with_exit(slug: &'static str, detail: impl Display, exit: u8) -> Self {
        Failure {
            slug,
            detail: detail.to_string(),
            exit,
        }
    }
}

type CliResult = Result<u8, Failure>;

fn main() -> ExitCode {
    // Die quietly on a closed pipe (e.g. piping a long report into
    // head) instead of panicking on the failed write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) =>
        {
            print!("{}", e.render());
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            let first = rendered.lines().next().unwrap_or("bad arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}: {}", f.slug, f.detail);
            ExitCode::from(f.exit)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Registry { command } => registry_command(command),
        Command::Run(args) => run_command(args),
        Command::Audit { command } => audit_command(command),
        Command::Code { command } => code_command(command),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let doc = read_file(path)?;
    toml::from_str(&doc).map_err(|e| Failure::new("parse", format!("{}: {e}", path.display())))
}

fn digest_from_hex(hex_str: &str, what: &str) -> Result<Digest32, Failure> {
    Digest32::from_hex(hex_str).map_err(|e| Failure::new("parse", format!("{what}: {e}")))
}

/// Locate the single registry chain in a deployment directory.
fn find_registry_chain(dir: &Path) -> Result<(PathBuf, String), Failure> {
    let mut found: Vec<(PathBuf, String)> = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Failure::new("io", e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".registry.chain") {
            found.push((entry.path(), stem.to_string()));
        }
    }
    match found.len() {
        0 => Err(Failure::new(
            "registry",
            format!("no *.registry.chain file in {}", dir.display()),
        )),
        1 => Ok(found.into_iter().next().unwrap()),
        n => Err(Failure::new(
            "registry",
            format!("{n} registry chains in {}; keep one per directory", dir.display()),
        )),
    }
}

fn load_keystore(dir: &Path, deployment_id: &str) -> Result<KeystoreDoc, Failure> {
    let path = dir.join(format!("{deployment_id}.keys.toml"));
    parse_toml(&path).map_err(|f| Failure::new("keystore", f.detail))
}

fn open_store(dir: &Path) -> Result<RegistryStore, Failure> {
    let (chain_path, deployment_id) = find_registry_chain(dir)?;
    let keys = load_keystore(dir, &deployment_id)?;
    let root = SigningIdentity::from_secret_hex("root", &keys.root_secret_hex)
        .map_err(|e| Failure::new("keystore", e))?;
    let clock: Arc<dyn TimeSource> = Arc::new(WallClock);
    RegistryStore::open(&chain_path, root, clock).map_err(|e| Failure::new("registry", e))
}

/// Read-only registry view plus the deployment quorum.
fn open_view(dir: &Path) -> Result<(RegistryView, u64), Failure> {
    let (chain_path, _) = find_registry_chain(dir)?;
    let ledger = Ledger::open(&chain_path).map_err(|e| Failure::new("ledger", e))?;
    let quorum = ledger.quorum();
    Ok((RegistryView::from_ledger(&ledger), quorum))
}

fn registry_command(command: RegistryCommand) -> CliResult {
    match command {
        RegistryCommand::RegisterSoftware { dir, manifest } => {
            let doc: SoftwareManifestDoc = parse_toml(&manifest)?;
            let digest = digest_from_hex(&doc.code_digest_hex, "code_digest_hex")?;
            let mut store = open_store(&dir.dir)?;
            let block = match (&doc.signature_hex, &doc.publisher_key_hex) {
                (Some(sig_hex), _) => {
                    let sig_bytes: [u8; 64] = hex::decode(sig_hex)
                        .ok()
                        .and_then(|v| v.try_into().ok())
                        .ok_or_else(|| Failure::new("parse", "signature_hex: want 64 bytes"))?;
                    store
                        .register_signed_manifest(SoftwareManifest {
                            component_id: doc.component.clone(),
                            version: doc.version.clone(),
                            code_digest: digest,
                            publisher_id: doc.publisher.clone(),
                            publisher_signature: Sig64(sig_bytes),
                            metadata: doc.metadata.clone(),
                        })
                        .map_err(|e| Failure::new("registry", e))?
                }
                (None, Some(key_hex)) => {
                    let publisher = SigningIdentity::from_secret_hex(&doc.publisher, key_hex)
                        .map_err(|e| Failure::new("keystore", e))?;
                    store
                        .register_software(
                            &doc.component,
                            &doc.version,
                            digest,
                            &doc.metadata,
                            &publisher,
                        )
                        .map_err(|e| Failure::new("registry", e))?
                }
                (None, None) => {
                    return Err(Failure::new(
                        "parse",
                        "manifest needs signature_hex or publisher_key_hex",
                    ))
                }
            };
            println!(
                "registered component={} version={} block={}",
                doc.component, doc.version, block.index
            );
            Ok(0)
        }
        RegistryCommand::Review {
            dir,
            component,
            version,
            verdict,
            key,
        } => {
            let verdict = Verdict::parse(&verdict)
                .ok_or_else(|| Failure::new("parse", "verdict must be approve or reject"))?;
            let key_doc: KeyDoc = parse_toml(&key)?;
            let expert = SigningIdentity::from_secret_hex(&key_doc.id, &key_doc.secret_hex)
                .map_err(|e| Failure::new("keystore", e))?;
            let mut store = open_store(&dir.dir)?;
            let block = store
                .submit_review(&component, &version, verdict, &expert)
                .map_err(|e| Failure::new("registry", e))?;
            let status = store.component_status(&component, &version);
            println!(
                "reviewed component={component} version={version} verdict={verdict} status={} block={}",
                status.as_str(),
                block.index
            );
            Ok(0)
        }
        RegistryCommand::Revoke {
            dir,
            component,
            version,
            reason,
        } => {
            let mut store = open_store(&dir.dir)?;
            let author = store.author().clone();
            let block = store
                .revoke_software(&component, &version, &reason, &author)
                .map_err(|e| Failure::new("registry", e))?;
            println!("revoked component={component} version={version} block={}", block.index);
            Ok(0)
        }
        RegistryCommand::RegisterDevice { dir, manifest } => {
            let doc: DeviceManifestDoc = parse_toml(&manifest)?;
            let key_bytes: [u8; 32] = hex::decode(&doc.public_key_hex)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| Failure::new("parse", "public_key_hex: want 32 bytes"))?;
            let boot = match &doc.boot_digest_hex {
                Some(h) => digest_from_hex(h, "boot_digest_hex")?,
                None => Digest32::ZERO,
            };
            let role = match doc.role.as_str() {
                "device" => Role::Device,
                "expert" => Role::Expert,
                "publisher" => Role::Publisher,
                other => {
                    return Err(Failure::new(
                        "parse",
                        format!("role '{other}' not one of device, expert, publisher"),
                    ))
                }
            };
            let mut store = open_store(&dir.dir)?;
            let author = store.author().clone();
            let block = store
                .register_identity(&doc.device_id, PublicKey(key_bytes), boot, role, &author)
                .map_err(|e| Failure::new("registry", e))?;
            println!(
                "registered id={} role={} block={}",
                doc.device_id,
                role.as_str(),
                block.index
            );
            Ok(0)
        }
        RegistryCommand::PolicyAllow {
            dir,
            caller,
            callee,
            function,
        } => {
            let mut store = open_store(&dir.dir)?;
            let author = store.author().clone();
            let block = store
                .add_policy_rule(&caller, &callee, &function, &author)
                .map_err(|e| Failure::new("registry", e))?;
            println!("allowed caller={caller} callee={callee} function={function} block={}", block.index);
            Ok(0)
        }
        RegistryCommand::Status { dir, digest } => {
            let digest = digest_from_hex(&digest, "digest")?;
            let (view, quorum) = open_view(&dir.dir)?;
            let status = view.approval_status(&digest, quorum);
            println!("digest={} status={}", digest.to_hex(), status.as_str());
            Ok(0)
        }
    }
}

fn run_command(args: RunArgs) -> CliResult {
    let scenario = load_scenario_file(&args.scenario).map_err(|e| Failure::new("scenario", e))?;
    let result = run_scenario(&scenario, args.seed, args.workers, &args.out)
        .map_err(|e| Failure::new("scenario", e))?;

    let keystore = KeystoreDoc {
        deployment_id: scenario.deployment_id.clone(),
        root_secret_hex: result.identities.root.secret_hex(),
        guard_secret_hex: result.identities.guard.secret_hex(),
        data_key_hex: result.data_key.to_hex(),
    };
    let keystore_path = args
        .out
        .join(format!("{}.keys.toml", scenario.deployment_id));
    fs::write(
        &keystore_path,
        toml::to_string(&keystore).expect("keystore serializes"),
    )
    .map_err(|e| Failure::new("io", format!("{}: {e}", keystore_path.display())))?;

    let trace_path = args.out.join(format!("{}.trace.txt", scenario.deployment_id));
    fs::write(&trace_path, result.live_trace.render())
        .map_err(|e| Failure::new("io", format!("{}: {e}", trace_path.display())))?;
    let report_path = args.out.join(format!("{}.report.txt", scenario.deployment_id));
    fs::write(&report_path, result.report.render())
        .map_err(|e| Failure::new("io", format!("{}: {e}", report_path.display())))?;
    let metrics_path = args.out.join(format!("{}.metrics.json", scenario.deployment_id));
    let metrics_json = serde_json::json!({
        "requests": result.metrics.requests,
        "approvals": result.metrics.approvals,
        "denials_by_reason": result.metrics.denials_by_reason,
        "lease_bypassed": result.metrics.lease_bypassed,
        "max_queue_depth": result.metrics.max_queue_depth,
        "workers": result.workers,
        "elapsed_ms": result.elapsed_ms as u64,
        "throughput_per_sec": result.throughput_per_sec,
    });
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics_json).expect("metrics serialize"),
    )
    .map_err(|e| Failure::new("io", format!("{}: {e}", metrics_path.display())))?;

    for e in &result.expectations {
        println!(
            "step={} expected={} actual={} result={}",
            e.label,
            e.expected,
            e.actual,
            if e.passed() { "pass" } else { "fail" }
        );
    }
    let failed = result.failed_expectations().len();
    println!(
        "requests={} approvals={} denials={} lease_bypassed={} max_queue_depth={} workers={} elapsed_ms={} throughput_per_sec={:.0}",
        result.metrics.requests,
        result.metrics.approvals,
        result.metrics.denials_total(),
        result.metrics.lease_bypassed,
        result.metrics.max_queue_depth,
        result.workers,
        result.elapsed_ms,
        result.throughput_per_sec,
    );
    println!("expectations={} failed={failed}", result.expectations.len());
    if failed > 0 {
        return Err(Failure::new(
            "expectations",
            format!("{failed} of {} steps mismatched", result.expectations.len()),
        ));
    }
    Ok(0)
}

fn audit_command(command: AuditCommand) -> CliResult {
    match command {
        AuditCommand::Verify { chain } => {
            let report = verify_chain_file(&chain).map_err(|e| Failure::new("ledger", e))?;
            print!("{}", report.render());
            Ok(if report.valid() { 0 } else { 1 })
        }
        AuditCommand::Replay { chain, key } => {
            let key = DataKey::from_hex(&key).map_err(|e| Failure::new("parse", e))?;
            let ledger = Ledger::open(&chain).map_err(|e| Failure::new("ledger", e))?;
            if ledger.kind() != LedgerKind::Flow {
                return Err(Failure::new("audit", "not a flow chain"));
            }
            let trace = replay_flow(&ledger, &key).map_err(|e| Failure::new("audit", e))?;
            print!("{}", trace.render());
            Ok(0)
        }
        AuditCommand::Report { chain, leases } => {
            let lease_text = read_file(&leases)?;
            let lease_entries =
                parse_lease_log(&lease_text).map_err(|e| Failure::new("parse", e))?;
            let ledger = Ledger::open(&chain).map_err(|e| Failure::new("ledger", e))?;
            let report = completeness_report(&ledger, &lease_entries)
                .map_err(|e| Failure::new("audit", e))?;
            print!("{}", report.render());
            Ok(0)
        }
    }
}

fn code_command(command: CodeCommand) -> CliResult {
    match command {
        CodeCommand::Check { dir, token } => {
            let (view, quorum) = open_view(&dir.dir)?;
            match check_verification_code(&view, quorum, &token) {
                CodeCheckOutcome::Accept {
                    device_id,
                    code_digest,
                    timestamp_ms,
                } => {
                    println!(
                        "result=accept device={device_id} code={} ts={timestamp_ms}",
                        code_digest.to_hex()
                    );
                    Ok(0)
                }
                CodeCheckOutcome::NotApproved { device_id, state } => {
                    println!("result=reject device={device_id} status={}", state.as_str());
                    Ok(1)
                }
                CodeCheckOutcome::Invalid(fault) => Err(Failure::with_exit(
                    "token",
                    fault,
                    2,
                )),
            }
        }
    }
}
