//! Provisioning shared by the benchmark targets: a running application
//! with approved software, one admitted device, and a callable node
//! pair, so benchmarks measure the steady-state call path rather than
//! deployment setup.

use std::path::Path;

use bbx_core::attestation::{attest_load, initialize_device, measure_boot_chain};
use bbx_core::crypto::sha256;
use bbx_core::registry::{Role, Verdict};
use bbx_core::runtime::{Application, ApplicationConfig, ClockMode, FunctionSpec, NodeSpec};
use bbx_core::{Digest32, FieldKind, FieldSchema, ParameterSchema, SigningIdentity};

/// Start an application in `dir` whose device `unit-1` is admitted and
/// where `node-a` is authorized to call `node-b`'s `put` function.
pub fn provisioned_app(dir: &Path, workers: u64) -> Application {
    let config = ApplicationConfig {
        deployment_id: "bench".to_string(),
        guard_workers: workers,
        quorum: 2,
        leases_enabled: true,
        data_key_hex: "11".repeat(32),
        registry_path: dir.join("bench.registry.chain"),
        flow_path: dir.join("bench.flow.chain"),
        clock: ClockMode::Logical,
        rng_seed: 1,
    };
    let app = Application::start(config, None).expect("start");
    let code = b"bench node software".to_vec();
    let root = app.identities().root.clone();
    let (alice, bob, posco, mut device) = {
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
        reg.register_software("bench-sw", "1.0", sha256(&code), "", &posco)
            .expect("software");
        reg.submit_review("bench-sw", "1.0", Verdict::Approve, &alice).expect("review");
        reg.submit_review("bench-sw", "1.0", Verdict::Approve, &bob).expect("review");
        reg.add_policy_rule("node-a", "node-b", "*", &root).expect("policy");
    }
    let challenge = app.issue_challenge();
    let attestation = attest_load(&mut device, &code, &challenge.0).expect("attest");
    let outcome = app.admit_device(&attestation).expect("admit");
    assert!(outcome.verdict.is_approved(), "{}", outcome.verdict.reason_str());

    app.register_node(NodeSpec {
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
    app.register_node(NodeSpec {
        node_id: "node-b".to_string(),
        device_id: "unit-1".to_string(),
        functions: vec![FunctionSpec {
            function_name: "put".to_string(),
            schema,
            handler: Box::new(|p: &[u8]| Ok(p.to_vec())),
        }],
    })
    .expect("node-b");
    app
}
