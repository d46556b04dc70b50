//! Scenario world: hardware root, provider, transparency log, running
//! ledger, endorsed policy, and a fleet of synthetic devices.

use ed25519_dalek::SigningKey;
use sha2::{Digest as _, Sha256};

use cfc_core::aggcore::{ClientTable, TableRow};
use cfc_core::attestation::{
    endorse, measurements, DigestAllowlist, Endorsement, HardwareRoot, InclusionAttachment,
    ReferenceValues, SubjectKind,
};
use cfc_core::client::{
    verify_and_upload, DeviceState, Summarization, SworPeriod, TaskAssignment,
    DEFAULT_SKEW_TOLERANCE_MS,
};
use cfc_core::crypto::{Digest32, VerifyingKeyBytes};
use cfc_core::dpquery::DpQueryConfig;
use cfc_core::envelope::EncryptedBlob;
use cfc_core::ledger::{Ledger, LedgerConfig, LedgerHandle, PublicKeyBundle};
use cfc_core::pipeline::{
    DpHistogramSpec, OrchestrateError, OrchestrateOutcome, PipelineRun, SelectSpec, StagePlan,
    TransformConfig, TransformSpec, VectorSumSpec, DP_HISTOGRAM_BEHAVIOR, DP_VECTOR_SUM_BEHAVIOR,
    SELECT_BEHAVIOR,
};
use cfc_core::policy::{canonical_digest, AccessPolicy, EdgeConstraints, PolicyEdge};
use cfc_core::rng::SeededRandomness;
use cfc_core::transparency::TransparencyLog;

pub const EPOCH_MS: u64 = 1_700_000_000_000;
pub const DAY_MS: u64 = 86_400_000;
pub const DEFAULT_TTL_MS: u64 = 7 * DAY_MS;
pub const FL_DIMENSION: usize = 16;

/// Expands a scenario seed into key material for the deterministic stream.
pub fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"cfc/scenario-seed/v1");
    hasher.update(seed.to_le_bytes());
    hasher.finalize().into()
}

pub const DEFAULT_QUERY_TEXT: &str = "\
-- Two DP histograms of purchase counts, keyed by (color, food).
SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS
      (epsilon=1, delta=1e-8, max_groups_contributed=2)
  color, food,
  SUM(weekday_count) @{L_inf = 3} AS total_weekday_count,
  SUM(weekend_count) @{L_inf = 4.5, L_1 = 8, L_2 = 6} AS total_weekend_count,
FROM
  device_uploads
GROUP BY
  color, food;
";

pub fn default_query() -> DpQueryConfig {
    cfc_core::dpquery::lower(&cfc_core::dpquery::parse(DEFAULT_QUERY_TEXT).unwrap())
        .expect("built-in query lowers")
}

/// Two-stage default policy: an exact-projection SELECT feeding a terminal
/// DP histogram bounded at (epsilon <= 1, delta <= 1e-8), one use per edge.
pub fn default_policy(usage_limit: u32) -> AccessPolicy {
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

/// Single terminal edge for the synchronous FL round: a DP vector sum over
/// uploaded model updates.
pub fn default_fl_policy(usage_limit: u32) -> AccessPolicy {
    AccessPolicy {
        name: "dp-vector-sum-round".into(),
        nodes: vec!["upload".into(), "released".into()],
        edges: vec![PolicyEdge {
            edge_id: "dp-vector-sum".into(),
            src_node: 0,
            dst_node: 1,
            required_application_digest: measurements::transform_application(
                DP_VECTOR_SUM_BEHAVIOR,
            ),
            constraints: EdgeConstraints { epsilon_max: Some(1.0), delta_max: Some(1e-8) },
            usage_limit,
            terminal: true,
        }],
    }
}

pub fn default_vector_sum_spec() -> VectorSumSpec {
    VectorSumSpec { dimension: FL_DIMENSION, l2_clip: 1.0, epsilon: 1.0, delta: 1e-8 }
}

#[derive(Clone)]
pub enum Workload {
    Histogram(DpQueryConfig),
    VectorSum(VectorSumSpec),
}

pub fn attach_inclusion_proof(
    mut endorsement: Endorsement,
    log: &mut TransparencyLog,
) -> Endorsement {
    let (index, head) = log.append(&endorsement);
    let proof = log.prove_inclusion(index, head.tree_size).unwrap();
    endorsement.inclusion = Some(InclusionAttachment { proof, head });
    endorsement
}

pub struct ScenarioWorld {
    pub root: HardwareRoot,
    pub provider: SigningKey,
    pub log: TransparencyLog,
    pub ledger: LedgerHandle,
    pub bundle: PublicKeyBundle,
    pub policy: AccessPolicy,
    pub policy_digest: Digest32,
    pub workload: Workload,
    pub client_rv: ReferenceValues,
    pub ledger_endorsement: Endorsement,
    pub policy_endorsement: Endorsement,
    pub now_ms: u64,
    pub skew_tolerance_ms: u64,
    /// Fixed salt for device derivation, so device data is a pure function
    /// of (world seed, device index) and oracles can regenerate it.
    device_salt: [u8; 32],
    pub rng: SeededRandomness,
}

pub struct WorldParams {
    pub seed: [u8; 32],
    pub noise_off: bool,
    pub policy: AccessPolicy,
    pub workload: Workload,
    pub ttl_ms: u64,
    pub skew_tolerance_ms: Option<u64>,
}

impl ScenarioWorld {
    pub fn build(params: WorldParams) -> Self {
        let mut rng = SeededRandomness::test(params.seed, params.noise_off);
        let root = HardwareRoot::generate(&mut rng);
        let provider = SigningKey::generate(&mut rng);
        let mut log = TransparencyLog::new(&mut rng);
        let policy_digest = canonical_digest(&params.policy).expect("scenario policy validates");

        let transform_rv = ReferenceValues {
            trusted_hardware_roots: vec![root.public_key()],
            firmware: Some(DigestAllowlist::of([measurements::firmware()])),
            kernel: Some(DigestAllowlist::of([measurements::kernel()])),
            application: None,
            config: None,
            ..ReferenceValues::default()
        };
        let ledger = Ledger::spawn(
            LedgerConfig { transform_reference_values: transform_rv },
            &root,
            rng.fork("ledger"),
        );
        let now_ms = EPOCH_MS;
        let bundle = ledger.create_key(now_ms, params.ttl_ms);

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

        let device_salt = rng.seed32();
        Self {
            root,
            provider,
            log,
            ledger,
            bundle,
            policy: params.policy,
            policy_digest,
            workload: params.workload,
            client_rv,
            ledger_endorsement,
            policy_endorsement,
            now_ms,
            skew_tolerance_ms: params.skew_tolerance_ms.unwrap_or(DEFAULT_SKEW_TOLERANCE_MS),
            device_salt,
            rng,
        }
    }

    pub fn task(&self) -> TaskAssignment {
        let (task_id, summarization) = match &self.workload {
            Workload::Histogram(query) => (
                "task/dp-histogram".to_string(),
                Summarization::Projection {
                    key_columns: query.key_columns.clone(),
                    value_columns: value_columns_of(query),
                },
            ),
            Workload::VectorSum(spec) => (
                "task/fl-round".to_string(),
                Summarization::VectorUpdate { dimension: spec.dimension },
            ),
        };
        TaskAssignment {
            task_id,
            summarization,
            eligibility: SworPeriod::Window { period_ms: DAY_MS },
            policy: self.policy.clone(),
            policy_endorsement: self.policy_endorsement.clone(),
            ledger_bundle: self.bundle.clone(),
            ledger_evidence: self.ledger.describe().evidence,
            ledger_endorsements: vec![self.ledger_endorsement.clone()],
            skew_tolerance_ms: self.skew_tolerance_ms,
        }
    }

    fn device_rng(&self, index: usize) -> SeededRandomness {
        let mut hasher = Sha256::new();
        hasher.update(b"cfc/scenario-device/v1");
        hasher.update(self.device_salt);
        hasher.update((index as u64).to_le_bytes());
        SeededRandomness::test(hasher.finalize().into(), false)
    }

    /// Synthesizes one device. Histogram devices hold small purchase-style
    /// tables matching the query schema, with distinct key counts within
    /// the query's l0 bound; vector devices hold no table.
    pub fn device(&self, index: usize) -> DeviceState {
        let mut rng = self.device_rng(index);
        let table = match &self.workload {
            Workload::Histogram(query) => {
                let mut gen = rng.fork("table");
                synth_table(query, index, &mut gen)
            }
            Workload::VectorSum(_) => ClientTable::empty(Vec::new(), Vec::new()),
        };
        DeviceState::new(format!("device-{index:03}"), table, rng.fork("uploads"))
    }

    /// Re-derives the exact table `device(index)` holds, for oracle checks.
    pub fn regenerate_device_table(&self, index: usize) -> ClientTable {
        let mut rng = self.device_rng(index);
        match &self.workload {
            Workload::Histogram(query) => {
                let mut gen = rng.fork("table");
                synth_table(query, index, &mut gen)
            }
            Workload::VectorSum(_) => ClientTable::empty(Vec::new(), Vec::new()),
        }
    }

    /// Devices verify and upload concurrently; results keep device order.
    pub fn upload_fleet(
        &mut self,
        count: usize,
    ) -> (Vec<DeviceState>, Vec<Result<EncryptedBlob, cfc_core::client::UploadError>>) {
        let task = self.task();
        let rv = self.client_rv.clone();
        let now = self.now_ms;
        let mut devices: Vec<DeviceState> = (0..count).map(|i| self.device(i)).collect();
        let mut outcomes: Vec<Option<Result<EncryptedBlob, cfc_core::client::UploadError>>> =
            (0..count).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (device, slot) in devices.iter_mut().zip(outcomes.iter_mut()) {
                let task = &task;
                let rv = &rv;
                scope.spawn(move || {
                    *slot = Some(verify_and_upload(device, task, rv, now));
                });
            }
        });
        (devices, outcomes.into_iter().map(|o| o.expect("upload ran")).collect())
    }

    pub fn plan(&self) -> PipelineRun {
        let plan = match &self.workload {
            Workload::Histogram(query) => vec![
                StagePlan {
                    src_node: 0,
                    spec: TransformSpec::new(
                        TransformConfig::Select(SelectSpec {
                            key_columns: query.key_columns.clone(),
                            value_columns: value_columns_of(query),
                        }),
                        false,
                    ),
                },
                StagePlan {
                    src_node: 1,
                    spec: TransformSpec::new(
                        TransformConfig::DpHistogram(DpHistogramSpec {
                            query: query.clone(),
                            per_user_function: None,
                        }),
                        true,
                    ),
                },
            ],
            Workload::VectorSum(spec) => vec![StagePlan {
                src_node: 0,
                spec: TransformSpec::new(TransformConfig::DpVectorSum(spec.clone()), true),
            }],
        };
        PipelineRun { policy: self.policy.clone(), plan, input_blobs: Vec::new() }
    }

    pub fn run_pipeline(
        &mut self,
        blobs: Vec<EncryptedBlob>,
        label: &str,
    ) -> Result<OrchestrateOutcome, OrchestrateError> {
        let mut run = self.plan();
        run.input_blobs = blobs;
        let mut rng = self.rng.fork(label);
        cfc_core::pipeline::orchestrate(
            &run,
            &self.ledger,
            &self.root,
            &self.bundle,
            self.now_ms,
            &mut rng,
            None,
        )
    }
}

/// Distinct value columns referenced by the query's aggregations, in order.
pub fn value_columns_of(query: &DpQueryConfig) -> Vec<String> {
    let mut columns = Vec::new();
    for agg in &query.aggregations {
        if let Some(input) = &agg.input_column {
            if !columns.contains(input) {
                columns.push(input.clone());
            }
        }
    }
    columns
}

const KEY_VOCAB: [&[&str]; 3] = [
    &["red", "green", "blue", "white"],
    &["apple", "eggs", "grape", "kiwi"],
    &["north", "south", "east", "west"],
];

fn synth_table(query: &DpQueryConfig, device_index: usize, rng: &mut SeededRandomness) -> ClientTable {
    let value_columns = value_columns_of(query);
    // Distinct keys stay within l0 so noise-off runs compare against the
    // clip-and-sum oracle without modeling the random subset step.
    let max_distinct = (query.max_groups_contributed as usize).min(3);
    let distinct = 1 + (rng.uniform() * max_distinct as f64) as usize;
    let mut rows = Vec::new();
    for k in 0..distinct.min(max_distinct) {
        let key: Vec<String> = query
            .key_columns
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let vocab = KEY_VOCAB[i % KEY_VOCAB.len()];
                let pick = ((rng.uniform() * vocab.len() as f64) as usize + device_index + k)
                    % vocab.len();
                vocab[pick].to_string()
            })
            .collect();
        let raw_rows = 1 + (rng.uniform() * 1.9) as usize;
        for _ in 0..raw_rows {
            rows.push(TableRow {
                key: key.clone(),
                values: value_columns
                    .iter()
                    .map(|_| (rng.uniform() * 8.0).round() / 2.0)
                    .collect(),
            });
        }
    }
    ClientTable { key_columns: query.key_columns.clone(), value_columns, rows }
}
