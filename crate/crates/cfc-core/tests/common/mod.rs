//! Shared fixture: a complete little world with a hardware root, a running
//! ledger, a transparency log, an endorsing service provider, and a
//! select-then-DP-histogram policy over the two-histogram query.

// Each test binary uses a different slice of this fixture.
#![allow(dead_code)]

use ed25519_dalek::SigningKey;

use cfc_core::aggcore::{ClientTable, TableRow};
use cfc_core::attestation::{
    endorse, measurements, DigestAllowlist, Endorsement, HardwareRoot, InclusionAttachment,
    ReferenceValues, SubjectKind,
};
use cfc_core::client::{DeviceState, Summarization, SworPeriod, TaskAssignment, DEFAULT_SKEW_TOLERANCE_MS};
use cfc_core::crypto::{Digest32, VerifyingKeyBytes};
use cfc_core::dpquery::{lower, parse, DpQueryConfig};
use cfc_core::envelope::EncryptedBlob;
use cfc_core::ledger::{Ledger, LedgerConfig, LedgerHandle, PublicKeyBundle};
use cfc_core::pipeline::{
    DpHistogramSpec, PipelineRun, SelectSpec, StagePlan, TransformConfig, TransformSpec,
    DP_HISTOGRAM_BEHAVIOR, SELECT_BEHAVIOR,
};
use cfc_core::policy::{AccessPolicy, EdgeConstraints, PolicyEdge};
use cfc_core::rng::SeededRandomness;
use cfc_core::transparency::TransparencyLog;

pub const EPOCH_MS: u64 = 1_700_000_000_000;
pub const DAY_MS: u64 = 86_400_000;
pub const WEEK_MS: u64 = 7 * DAY_MS;

pub const QUERY_TEXT: &str = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS \
     (epsilon=1, delta=1e-8, max_groups_contributed=2) \
     color, food, \
     SUM(num_purchased_weekdays) @{L_inf = 3} AS total_num_purchased_weekdays, \
     SUM(num_purchased_weekends) @{L_inf = 4.5, L_1 = 8, L_2 = 6} AS total_num_purchased_weekends \
     FROM uploaded_device_data GROUP BY color, food;";

pub fn fixture_query() -> DpQueryConfig {
    lower(&parse(QUERY_TEXT).unwrap()).unwrap()
}

pub fn select_then_dp_policy(usage_limit: u32) -> AccessPolicy {
    AccessPolicy {
        name: "select-then-dp-histogram".into(),
        nodes: vec!["upload".into(), "selected".into(), "released".into()],
        edges: vec![
            PolicyEdge {
                edge_id: "select".into(),
                src_node: 0,
                dst_node: 1,
                required_application_digest: measurements::transform_application(SELECT_BEHAVIOR),
                constraints: EdgeConstraints::default(),
                usage_limit,
                terminal: false,
            },
            PolicyEdge {
                edge_id: "dp-histogram".into(),
                src_node: 1,
                dst_node: 2,
                required_application_digest: measurements::transform_application(
                    DP_HISTOGRAM_BEHAVIOR,
                ),
                constraints: EdgeConstraints { epsilon_max: Some(1.0), delta_max: Some(1e-8) },
                usage_limit,
                terminal: true,
            },
        ],
    }
}

pub struct TestWorld {
    pub root: HardwareRoot,
    pub ledger: LedgerHandle,
    pub log: TransparencyLog,
    pub provider: SigningKey,
    pub bundle: PublicKeyBundle,
    pub policy: AccessPolicy,
    pub policy_digest: Digest32,
    pub client_rv: ReferenceValues,
    pub query: DpQueryConfig,
    pub ledger_endorsement: Endorsement,
    pub policy_endorsement: Endorsement,
    pub now_ms: u64,
    pub rng: SeededRandomness,
}

pub fn attach_inclusion_proof(mut endorsement: Endorsement, log: &mut TransparencyLog) -> Endorsement {
    let (index, head) = log.append(&endorsement);
    let proof = log.prove_inclusion(index, head.tree_size).unwrap();
    endorsement.inclusion = Some(InclusionAttachment { proof, head });
    endorsement
}

impl TestWorld {
    pub fn new(seed: [u8; 32], noise_off: bool) -> Self {
        Self::with_policy(seed, noise_off, select_then_dp_policy(1))
    }

    pub fn with_policy(seed: [u8; 32], noise_off: bool, policy: AccessPolicy) -> Self {
        let mut rng = SeededRandomness::test(seed, noise_off);
        let root = HardwareRoot::generate(&mut rng);
        let provider = SigningKey::generate(&mut rng);
        let mut log = TransparencyLog::new(&mut rng);
        let query = fixture_query();
        let policy_digest = cfc_core::policy::canonical_digest(&policy).unwrap();

        let transform_rv = ReferenceValues {
            trusted_hardware_roots: vec![root.public_key()],
            firmware: Some(DigestAllowlist::of([measurements::firmware()])),
            kernel: Some(DigestAllowlist::of([measurements::kernel()])),
            application: None, // the policy pins transform binaries per edge
            config: None,      // matched against the policy constraints instead
            ..ReferenceValues::default()
        };
        let ledger =
            Ledger::spawn(LedgerConfig { transform_reference_values: transform_rv }, &root, rng.fork("ledger"));
        let now_ms = EPOCH_MS;
        let bundle = ledger.create_key(now_ms, WEEK_MS);

        let ledger_endorsement = attach_inclusion_proof(
            endorse(measurements::ledger_application(), SubjectKind::ApplicationBinary, &provider),
            &mut log,
        );
        let policy_endorsement = attach_inclusion_proof(
            endorse(policy_digest, SubjectKind::AccessPolicy, &provider),
            &mut log,
        );

        let client_rv = ReferenceValues {
            trusted_hardware_roots: vec![root.public_key()],
            firmware: Some(DigestAllowlist::of([measurements::firmware()])),
            kernel: Some(DigestAllowlist::of([measurements::kernel()])),
            application: Some(DigestAllowlist::of([measurements::ledger_application()])),
            config: None,
            endorser_keys: vec![VerifyingKeyBytes::of(&provider.verifying_key())],
            require_inclusion_proofs: true,
            log_public_key: Some(log.public_key()),
        };

        Self {
            root,
            ledger,
            log,
            provider,
            bundle,
            policy,
            policy_digest,
            client_rv,
            query,
            ledger_endorsement,
            policy_endorsement,
            now_ms,
            rng,
        }
    }

    pub fn task(&self) -> TaskAssignment {
        TaskAssignment {
            task_id: "task/heavy-hitters".into(),
            summarization: Summarization::Projection {
                key_columns: vec!["color".into(), "food".into()],
                value_columns: vec![
                    "num_purchased_weekdays".into(),
                    "num_purchased_weekends".into(),
                ],
            },
            eligibility: SworPeriod::Window { period_ms: DAY_MS },
            policy: self.policy.clone(),
            policy_endorsement: self.policy_endorsement.clone(),
            ledger_bundle: self.bundle.clone(),
            ledger_evidence: self.ledger.describe().evidence,
            ledger_endorsements: vec![self.ledger_endorsement.clone()],
            skew_tolerance_ms: DEFAULT_SKEW_TOLERANCE_MS,
        }
    }

    /// Deterministic device with a small purchase table. Key counts stay
    /// within the query's l0 bound so noise-off runs are oracle-comparable.
    pub fn device(&mut self, index: usize) -> DeviceState {
        let mut rng = self.rng.fork(&format!("device/{index}"));
        let colors = ["red", "green", "blue", "white"];
        let foods = ["apple", "eggs", "grape", "kiwi"];
        let distinct = 1 + (rng.uniform() * 2.0) as usize; // 1..=2 keys
        let mut rows = Vec::new();
        for k in 0..distinct {
            let color = colors[(rng.uniform() * colors.len() as f64) as usize % colors.len()];
            let food = foods[(k + index) % foods.len()];
            // A couple of raw rows per key to exercise dedup.
            for _ in 0..=(rng.uniform() * 1.9) as usize {
                rows.push(TableRow {
                    key: vec![color.to_string(), food.to_string()],
                    values: vec![(rng.uniform() * 4.0).round(), (rng.uniform() * 6.0).round() / 2.0],
                });
            }
        }
        let table = ClientTable {
            key_columns: vec!["color".into(), "food".into()],
            value_columns: vec!["num_purchased_weekdays".into(), "num_purchased_weekends".into()],
            rows,
        };
        DeviceState::new(format!("device-{index:02}"), table, rng.fork("uploads"))
    }

    pub fn upload_devices(&mut self, count: usize) -> (Vec<DeviceState>, Vec<EncryptedBlob>) {
        let task = self.task();
        let rv = self.client_rv.clone();
        let now = self.now_ms;
        let mut devices = Vec::with_capacity(count);
        let mut blobs = Vec::with_capacity(count);
        for index in 0..count {
            let mut device = self.device(index);
            let blob = cfc_core::client::verify_and_upload(&mut device, &task, &rv, now)
                .expect("honest upload succeeds");
            devices.push(device);
            blobs.push(blob);
        }
        (devices, blobs)
    }

    pub fn histogram_run(&self, blobs: Vec<EncryptedBlob>) -> PipelineRun {
        PipelineRun {
            policy: self.policy.clone(),
            plan: vec![
                StagePlan {
                    src_node: 0,
                    spec: TransformSpec::new(
                        TransformConfig::Select(SelectSpec {
                            key_columns: vec!["color".into(), "food".into()],
                            value_columns: vec![
                                "num_purchased_weekdays".into(),
                                "num_purchased_weekends".into(),
                            ],
                        }),
                        false,
                    ),
                },
                StagePlan {
                    src_node: 1,
                    spec: TransformSpec::new(
                        TransformConfig::DpHistogram(DpHistogramSpec {
                            query: self.query.clone(),
                            per_user_function: None,
                        }),
                        true,
                    ),
                },
            ],
            input_blobs: blobs,
        }
    }
}
