//! Core library for the bbx runtime: hash-chained ledgers, the public
//! registry, simulated platform attestation, guarded call screening, the
//! encrypted flow log, and the deterministic scenario harness.

pub mod attestation;
pub mod clock;
pub mod crypto;
pub mod flowlog;
pub mod guard;
pub mod ledger;
pub mod registry;
pub mod runtime;
pub mod scenario;
pub mod wire;

pub use attestation::{
    check_verification_code, CodeCheckOutcome, DeviceState, TokenFault, VerificationCode,
};
pub use clock::{LogicalClock, TimeSource, WallClock};
pub use crypto::{CryptoError, DataKey, Digest32, Nonce16, PublicKey, Sig64, SigningIdentity};
pub use flowlog::{
    completeness_report, replay_flow, CompletenessReport, Decision, FlowError, FlowLedger,
    FlowTrace, LeaseEntry, TraceEntry,
};
pub use guard::{
    encode_params, CallRequest, DenialReason, FieldKind, FieldSchema, GuardError, GuardHub,
    GuardNode, GuardVerdict, Lease, ParamValue, ParameterSchema, ScreenOutcome, Session,
};
pub use ledger::{
    chain_file_name, verify_chain_file, Block, BlockRef, CheckKind, DeploymentManifest, Ledger,
    LedgerError, LedgerKind, VerificationReport,
};
pub use registry::{
    ApprovalState, RegistryError, RegistryPayload, RegistryStore, RegistryView, Role, Verdict,
};
pub use runtime::{
    AppIdentities, Application, ApplicationConfig, CallResponse, ClockMode, FunctionSpec,
    Handler, InvokeReceipt, MetricsSnapshot, NodeSpec, RuntimeError,
};
pub use scenario::{
    load_scenario, load_scenario_file, run_scenario, tamper_chain_file, ExpectationResult,
    RunResult, Scenario, ScenarioError,
};
pub use wire::{Reader, WireError, Writer};
