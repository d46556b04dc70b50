//! End-to-end scenarios and the adversary harness.
//!
//! Honest scenarios (`phh`, `fl_round`) drive devices through verification,
//! upload, and a full pipeline to a DP release. Each attack scenario
//! exercises one threat-model capability (replay, triangulation, rollback
//! via restart, Sybil cohorts, binary and policy tampering, clock skew) and
//! passes iff the documented defense blocks it.

use std::str::FromStr;

use cfc_core::aggcore::{aggregate, bound_contributions, build_local_histogram, ClientTable, TableRow};
use cfc_core::client::{synth_vector_update, verify_and_upload, UploadError};
use cfc_core::crypto::Digest32;
use cfc_core::dpquery::{lower, parse, DpQueryConfig};
use cfc_core::envelope::{decrypt_blob, EncryptedBlob};
use cfc_core::ledger::{AuthorizeRequest, LedgerError};
use cfc_core::pipeline::{
    process_stage, spawn_transform, OrchestrateError, ReleasedOutput, StageContext, StageError,
    StageOutput, TrustedTransformInstance,
};
use cfc_core::policy::AccessPolicy;
use cfc_core::rng::SeededRandomness;
use cfc_core::transparency::LogSnapshot;

use crate::report::ScenarioReport;
use crate::world::{
    attach_inclusion_proof, default_fl_policy, default_policy, default_query,
    default_vector_sum_spec, seed_bytes, value_columns_of, ScenarioWorld, Workload, WorldParams,
    DEFAULT_TTL_MS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Phh,
    FlRound,
    AttackReplay,
    AttackTriangulate,
    AttackRollback,
    AttackSybil,
    AttackTamperBinary,
    AttackTamperPolicy,
    AttackClockSkew,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::Phh,
        Scenario::FlRound,
        Scenario::AttackReplay,
        Scenario::AttackTriangulate,
        Scenario::AttackRollback,
        Scenario::AttackSybil,
        Scenario::AttackTamperBinary,
        Scenario::AttackTamperPolicy,
        Scenario::AttackClockSkew,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Phh => "phh",
            Scenario::FlRound => "fl_round",
            Scenario::AttackReplay => "attack-replay",
            Scenario::AttackTriangulate => "attack-triangulate",
            Scenario::AttackRollback => "attack-rollback",
            Scenario::AttackSybil => "attack-sybil",
            Scenario::AttackTamperBinary => "attack-tamper-binary",
            Scenario::AttackTamperPolicy => "attack-tamper-policy",
            Scenario::AttackClockSkew => "attack-clock-skew",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|scenario| scenario.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
                format!("unknown scenario {s:?}; expected one of: {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub devices: usize,
    /// Query text (`--query` file contents); `None` uses the built-in.
    pub query_text: Option<String>,
    /// Policy document (`--policy` file contents); `None` uses the built-in.
    pub policy_json: Option<String>,
    pub seed: u64,
    pub noise_off: bool,
    pub skew_ms: Option<u64>,
    pub ttl_ms: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            devices: 8,
            query_text: None,
            policy_json: None,
            seed: 7,
            noise_off: false,
            skew_ms: None,
            ttl_ms: DEFAULT_TTL_MS,
        }
    }
}

/// Side artifacts a run exports for the offline auditor path.
pub struct ScenarioArtifacts {
    /// Line-delimited attestation verification records from every device.
    pub verification_records: String,
    pub log_snapshot: LogSnapshot,
    pub reference_values: cfc_core::attestation::ReferenceValues,
    /// Policy digests some device accepted during the scenario.
    pub accepted_policy_digests: Vec<Digest32>,
}

#[derive(Debug)]
pub enum ScenarioError {
    /// Bad inputs: unknown scenario, unparseable query or policy. Exit 2.
    Config(String),
}

impl std::fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioError::Config(message) => write!(f, "configuration error: {message}"),
        }
    }
}

pub fn run_scenario(
    config: &ScenarioConfig,
) -> Result<(ScenarioReport, ScenarioArtifacts), ScenarioError> {
    let mut report =
        ScenarioReport::new(config.scenario.name(), config.seed, config.noise_off);
    let mut world = build_world(config)?;
    match config.scenario {
        Scenario::Phh => phh(config, &mut world, &mut report),
        Scenario::FlRound => fl_round(config, &mut world, &mut report),
        Scenario::AttackReplay => attack_replay(config, &mut world, &mut report),
        Scenario::AttackTriangulate => attack_triangulate(config, &mut world, &mut report),
        Scenario::AttackRollback => attack_rollback(config, &mut world, &mut report),
        Scenario::AttackSybil => attack_sybil(config, &mut world, &mut report),
        Scenario::AttackTamperBinary => attack_tamper_binary(config, &mut world, &mut report),
        Scenario::AttackTamperPolicy => attack_tamper_policy(config, &mut world, &mut report),
        Scenario::AttackClockSkew => attack_clock_skew(config, &mut world, &mut report),
    }
    report.ledger = world.ledger.dump();

    let accepted = world.accepted_digests.clone();
    let artifacts = ScenarioArtifacts {
        verification_records: world.verification_records.clone(),
        log_snapshot: world.world.log.snapshot(),
        reference_values: world.world.client_rv.clone(),
        accepted_policy_digests: accepted,
    };
    Ok((report, artifacts))
}

/// World plus scenario-lifetime bookkeeping.
struct RunState {
    world: ScenarioWorld,
    verification_records: String,
    accepted_digests: Vec<Digest32>,
}

impl std::ops::Deref for RunState {
    type Target = ScenarioWorld;

    fn deref(&self) -> &ScenarioWorld {
        &self.world
    }
}

impl std::ops::DerefMut for RunState {
    fn deref_mut(&mut self) -> &mut ScenarioWorld {
        &mut self.world
    }
}

fn build_world(config: &ScenarioConfig) -> Result<RunState, ScenarioError> {
    let query = match &config.query_text {
        Some(text) => {
            let ast = parse(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
            lower(&ast).map_err(|e| ScenarioError::Config(e.to_string()))?
        }
        None => default_query(),
    };
    // Attack scenarios pin their own policy parameters; honest scenarios
    // honor --policy.
    let (policy, workload) = match config.scenario {
        Scenario::FlRound => {
            (default_fl_policy(1), Workload::VectorSum(default_vector_sum_spec()))
        }
        Scenario::AttackReplay => (default_policy(2), Workload::Histogram(query)),
        Scenario::Phh => {
            let policy = match &config.policy_json {
                Some(text) => {
                    let parsed: AccessPolicy = serde_json::from_str(text)
                        .map_err(|e| ScenarioError::Config(format!("policy does not parse: {e}")))?;
                    cfc_core::policy::validate(&parsed)
                        .map_err(|e| ScenarioError::Config(format!("policy invalid: {e}")))?;
                    parsed
                }
                None => default_policy(1),
            };
            (policy, Workload::Histogram(query))
        }
        _ => (default_policy(1), Workload::Histogram(query)),
    };
    let world = ScenarioWorld::build(WorldParams {
        seed: seed_bytes(config.seed),
        noise_off: config.noise_off,
        policy,
        workload,
        ttl_ms: config.ttl_ms.max(1),
        skew_tolerance_ms: config.skew_ms,
    });
    Ok(RunState { world, verification_records: String::new(), accepted_digests: Vec::new() })
}

/// Uploads the fleet, records artifacts, and returns the blobs of the
/// successful uploads.
fn upload_fleet(state: &mut RunState, report: &mut ScenarioReport, count: usize) -> Vec<EncryptedBlob> {
    let (devices, outcomes) = state.world.upload_fleet(count);
    let accepted = outcomes.iter().filter(|o| o.is_ok()).count();
    report.check_eq("uploads_accepted", count, accepted);
    for device in &devices {
        state.verification_records.push_str(&cfc_core::client::export_verification_records(device));
    }
    if accepted > 0 {
        let digest = state.world.policy_digest;
        state.accepted_digests.push(digest);
    }
    outcomes.into_iter().filter_map(Result::ok).collect()
}

// ---------------------------------------------------------------------------
// Honest scenarios

fn phh(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let blobs = upload_fleet(state, report, config.devices);
    let outcome = state.world.run_pipeline(blobs.clone(), "phh");
    match outcome {
        Ok(outcome) => {
            report.check_eq("pipeline_released_outputs", 1usize, outcome.released.len());
            report.check_eq("data_loss_events", 0u32, outcome.data_loss_events);
            report.released = outcome.released;
        }
        Err(error) => {
            report.check("pipeline_completed", "release", format!("failed: {error}"), false);
        }
    }

    let dump = state.world.ledger.dump();
    report.check_eq("ledger_authorizations", 2 * blobs.len() as u64, dump.authorizations);
    let within_limits = dump.access_records.iter().all(|r| {
        state
            .world
            .policy
            .edges
            .iter()
            .find(|e| e.edge_id == r.edge_id)
            .is_some_and(|e| r.access_count <= e.usage_limit)
    });
    report.check("usage_within_limits", true, within_limits, within_limits);

    let monitored = state
        .world
        .log
        .monitor_by_signer(cfc_core::crypto::VerifyingKeyBytes::of(&state.world.provider.verifying_key()).key_id());
    let covered = state
        .accepted_digests
        .iter()
        .all(|digest| monitored.iter().any(|entry| entry.endorsement.subject_digest == *digest));
    report.check("monitor_covers_accepted_policies", true, covered, covered);

    #[cfg(feature = "testing")]
    if config.noise_off {
        oracle_check_histogram(state, report, &blobs);
    }
}

/// Noise-off cross-check of the released histogram against the independent
/// clip-and-sum oracle, keyed by blob id exactly as the aggregation is.
#[cfg(feature = "testing")]
fn oracle_check_histogram(
    state: &mut RunState,
    report: &mut ScenarioReport,
    blobs: &[EncryptedBlob],
) {
    let Workload::Histogram(query) = state.world.workload.clone() else {
        return;
    };
    // Rebuild the device tables deterministically (generator is a pure
    // function of the world seed and device index).
    let mut clients: Vec<(String, ClientTable)> = Vec::new();
    let devices = blobs.len();
    let regenerated = regenerate_tables(state, devices);
    for (blob, table) in blobs.iter().zip(regenerated) {
        clients.push((blob.header.blob_id.to_string(), table));
    }
    let expected = cfc_core::oracle::clip_and_sum_release(&clients, &query);
    let observed = report.released.iter().find_map(|r| match r {
        ReleasedOutput::Histogram(h) => Some(h.rows.clone()),
        _ => None,
    });
    let matches = observed.as_deref() == Some(&expected[..]);
    report.check(
        "release_matches_oracle",
        format!("{} oracle rows", expected.len()),
        match &observed {
            Some(rows) if matches => format!("{} identical rows", rows.len()),
            Some(rows) => format!("{} differing rows", rows.len()),
            None => "no released histogram".into(),
        },
        matches,
    );
}

#[cfg(feature = "testing")]
fn regenerate_tables(state: &mut RunState, count: usize) -> Vec<ClientTable> {
    (0..count).map(|i| state.world.regenerate_device_table(i)).collect()
}

fn fl_round(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let blobs = upload_fleet(state, report, config.devices);
    let outcome = state.world.run_pipeline(blobs.clone(), "fl-round");
    match outcome {
        Ok(outcome) => {
            report.check_eq("pipeline_released_outputs", 1usize, outcome.released.len());
            report.released = outcome.released;
        }
        Err(error) => {
            report.check("pipeline_completed", "release", format!("failed: {error}"), false);
        }
    }

    let Workload::VectorSum(spec) = &state.world.workload else { unreachable!() };
    if let Some(ReleasedOutput::Vector { values }) = report.released.first() {
        report.check_eq("released_dimension", spec.dimension, values.len());
    }

    #[cfg(feature = "testing")]
    if config.noise_off {
        // Updates are deterministic in (device id, task id); blob order is
        // upload order, and the stage re-sorts by blob id internally, which
        // does not change the clipped sum beyond float addition order; the
        // oracle applies the same normative order (sorted blob id).
        let task_id = state.world.task().task_id;
        let mut by_blob: Vec<(cfc_core::crypto::Id16, Vec<f64>)> = blobs
            .iter()
            .enumerate()
            .map(|(i, blob)| {
                (blob.header.blob_id, synth_vector_update(&format!("device-{i:03}"), &task_id, spec.dimension))
            })
            .collect();
        by_blob.sort_by_key(|(id, _)| *id);
        let updates: Vec<Vec<f64>> = by_blob.into_iter().map(|(_, update)| update).collect();
        let expected = cfc_core::oracle::clipped_vector_sum(&updates, spec.l2_clip);
        let observed = match report.released.first() {
            Some(ReleasedOutput::Vector { values }) => values.clone(),
            _ => Vec::new(),
        };
        let close = expected.len() == observed.len()
            && expected.iter().zip(&observed).all(|(e, o)| {
                let scale = e.abs().max(1.0);
                (e - o).abs() <= 1e-9 * scale
            });
        report.check(
            "release_matches_oracle",
            format!("sum of {} clipped updates", updates.len()),
            if close { "within 1e-9 relative".to_string() } else { "diverged".to_string() },
            close,
        );
    }
}

// ---------------------------------------------------------------------------
// Attack scenarios

/// Captured authorization responses and repeated requests must both be
/// rejected via nonce tracking, independent of usage budgets.
fn attack_replay(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let blobs = upload_fleet(state, report, config.devices.max(1));
    let blob = &blobs[0];
    let run = state.world.plan();
    let mut select =
        spawn_transform(&run.plan[0].spec, &state.world.root, state.world.rng.fork("replay-select"));

    let request = manual_request(blob, &state.world.policy, 0, &mut select);
    let now = state.world.now_ms;
    let response = state
        .world
        .ledger
        .authorize_access(request.clone(), now)
        .expect("first authorization is legitimate");

    // Consume legitimately once.
    let first = select.accept_rewrapped_key(&response).is_ok();
    report.check("legitimate_response_accepted_once", true, first, first);

    // Replay of the captured response to the same instance.
    let replayed = select.accept_rewrapped_key(&response);
    let blocked = matches!(replayed, Err(StageError::NonceReplayDetected { .. }));
    report.check("response_replay_blocked", "NonceReplayDetected", describe(&replayed), blocked);

    // Replay of the captured response to a fresh instance.
    let mut fresh =
        spawn_transform(&run.plan[0].spec, &state.world.root, state.world.rng.fork("replay-fresh"));
    let foreign = fresh.accept_rewrapped_key(&response);
    let blocked = matches!(foreign, Err(StageError::NonceReplayDetected { .. }));
    report.check(
        "response_replay_to_fresh_instance_blocked",
        "NonceReplayDetected",
        describe(&foreign),
        blocked,
    );

    // Replay of the exact request at the ledger (budget still available:
    // the select edge allows two uses in this scenario's policy).
    let repeated = state.world.ledger.authorize_access(request, now);
    let blocked = matches!(repeated, Err(LedgerError::NonceReplay));
    report.check("request_replay_blocked", "NonceReplay", describe(&repeated), blocked);
}

/// Running the full pipeline twice must yield exactly one release; the
/// second run is denied per blob with an exhausted budget.
fn attack_triangulate(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let blobs = upload_fleet(state, report, config.devices);
    let first = state.world.run_pipeline(blobs.clone(), "triangulate-1");
    let released_once = matches!(&first, Ok(outcome) if outcome.released.len() == 1);
    report.check("first_run_releases", true, released_once, released_once);
    if let Ok(outcome) = first {
        report.released = outcome.released;
    }

    let second = state.world.run_pipeline(blobs.clone(), "triangulate-2");
    let (zero_releases, denial_count) = match &second {
        Err(OrchestrateError::StageFailed { failure, .. }) => {
            let budget_denials = failure
                .causes
                .iter()
                .filter(|c| {
                    matches!(c, StageError::Ledger { error: LedgerError::BudgetExhausted, .. })
                })
                .count();
            (true, budget_denials)
        }
        _ => (false, 0),
    };
    report.check("second_run_zero_releases", true, zero_releases, zero_releases);
    report.check_eq("second_run_budget_denials", blobs.len(), denial_count);

    let dump = state.world.ledger.dump();
    let single_use = dump.access_records.iter().all(|r| r.access_count == 1);
    report.check("all_access_counts_exactly_one", true, single_use, single_use);
}

/// Restarting the ledger resets usage counters, but the reset also erases
/// the private key: nothing uploaded before the rollback is recoverable.
fn attack_rollback(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let blobs = upload_fleet(state, report, config.devices);
    let run = state.world.plan();

    // Run the first (non-terminal) stage, producing intermediates.
    let mut select =
        spawn_transform(&run.plan[0].spec, &state.world.root, state.world.rng.fork("rollback-select"));
    let ctx = StageContext {
        policy: &state.world.policy,
        bundle: &state.world.bundle,
        now_ms: state.world.now_ms,
        public_state: None,
    };
    let staged = process_stage(&mut select, &blobs, &state.world.ledger, 0, &ctx);
    let derived = match staged {
        Ok(StageOutput::Encrypted(derived)) => derived,
        _ => Vec::new(),
    };
    report.check_eq("intermediates_produced", blobs.len(), derived.len());
    let pre_restart_authorizations = state.world.ledger.dump().authorizations;

    // The rollback: restart mid-pipeline to wipe the usage history.
    state.world.ledger.restart();
    let counters_reset = state.world.ledger.dump().authorizations == 0;
    report.check("restart_wiped_usage_history", true, counters_reset, counters_reset);
    report.check_eq("authorizations_before_restart", blobs.len() as u64, pre_restart_authorizations);

    // Re-running consumes nothing: every key lookup now fails.
    let mut denied = 0usize;
    for blob in blobs.iter().chain(&derived) {
        let src = if blob.header.blob_id == blobs.first().map(|b| b.header.blob_id).unwrap_or_default()
            || blobs.iter().any(|b| b.header.blob_id == blob.header.blob_id)
        {
            0
        } else {
            1
        };
        let spec = &run.plan[src as usize].spec;
        let mut instance =
            spawn_transform(spec, &state.world.root, state.world.rng.fork("rollback-retry"));
        let request = manual_request(blob, &state.world.policy, src, &mut instance);
        if matches!(
            state.world.ledger.authorize_access(request, state.world.now_ms),
            Err(LedgerError::UnknownKey)
        ) {
            denied += 1;
        }
    }
    report.check_eq("post_restart_unknown_key_denials", blobs.len() + derived.len(), denied);

    // Direct decryption attempts recover nothing either.
    let mut recovered = 0usize;
    for blob in blobs.iter().chain(&derived) {
        for guess in [[0u8; 32], [0xaa; 32], state.world.rng.seed32()] {
            if decrypt_blob(blob, &cfc_core::crypto::DataKey(guess)).is_ok() {
                recovered += 1;
            }
        }
    }
    report.check_eq("plaintexts_recovered_after_rollback", 0usize, recovered);
}

/// With every other device adversarial, the honest client's pre-noise
/// influence on any column stays within the calibrated L1 sensitivity.
fn attack_sybil(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let Workload::Histogram(query) = state.world.workload.clone() else { unreachable!() };
    let devices = config.devices.max(2);
    let columns = query.aggregations.len();
    let sensitivities: Vec<f64> = query
        .aggregations
        .iter()
        .map(|agg| {
            let cap = query.max_groups_contributed as f64 * agg.l_inf;
            agg.l_1.map_or(cap, |l1| l1.min(cap))
        })
        .collect();

    let mut rng = state.world.rng.fork("sybil");
    let mut worst = vec![0.0f64; columns];
    let cohorts = 10usize;
    for cohort in 0..cohorts {
        // Honest device: ordinary data. Adversaries: extreme values over
        // many keys, trying to drown or frame the honest contribution.
        let honest = state.world.regenerate_device_table(cohort);
        let mut bounded = Vec::new();
        let mut honest_bounded = None;
        for sybil in 0..devices - 1 {
            let table = adversarial_table(&query, &mut rng);
            let local = build_local_histogram(&table).unwrap();
            let mut client_rng = rng.fork(&format!("sybil/{cohort}/{sybil}"));
            bounded.push((
                format!("sybil-{sybil:03}"),
                bound_contributions(&local, &query, &mut client_rng).unwrap(),
            ));
        }
        {
            let aligned = honest;
            let local = build_local_histogram(&aligned).unwrap();
            let mut client_rng = rng.fork(&format!("honest/{cohort}"));
            let b = bound_contributions(&local, &query, &mut client_rng).unwrap();
            honest_bounded = Some(b);
        }
        let with_honest: Vec<_> = bounded
            .iter()
            .cloned()
            .chain([("honest".to_string(), honest_bounded.clone().unwrap())])
            .collect();
        let merged_with = aggregate(&with_honest).unwrap();
        let merged_without = aggregate(&bounded).unwrap();

        for j in 0..columns {
            let mut influence = 0.0;
            for (key, values) in &merged_with.entries {
                let absent = merged_without.entries.get(key).map_or(0.0, |v| v[j]);
                influence += (values[j] - absent).abs();
            }
            worst[j] = worst[j].max(influence);
        }
    }

    for (j, (observed, bound)) in worst.iter().zip(&sensitivities).enumerate() {
        let ok = *observed <= bound * (1.0 + 1e-9);
        report.check(
            &format!("honest_influence_within_sensitivity_col{j}"),
            format!("<= {bound}"),
            format!("{observed}"),
            ok,
        );
    }

    // The mechanism still runs end to end under the Sybil cohort.
    let blobs = upload_fleet(state, report, devices.min(4));
    let outcome = state.world.run_pipeline(blobs, "sybil-release");
    let released = matches!(&outcome, Ok(o) if o.released.len() == 1);
    report.check("release_still_produced", true, released, released);
    if let Ok(outcome) = outcome {
        report.released = outcome.released;
    }
}

fn adversarial_table(query: &DpQueryConfig, rng: &mut SeededRandomness) -> ClientTable {
    let value_columns = value_columns_of(query);
    let keys = 1 + (rng.uniform() * 12.0) as usize;
    let mut rows = Vec::new();
    for k in 0..keys {
        rows.push(TableRow {
            key: query
                .key_columns
                .iter()
                .enumerate()
                .map(|(i, _)| format!("sybil-{i}-{k}-{}", (rng.uniform() * 4.0) as u32))
                .collect(),
            values: value_columns.iter().map(|_| (rng.uniform() - 0.5) * 1e6).collect(),
        });
    }
    ClientTable { key_columns: query.key_columns.clone(), value_columns, rows }
}

/// Tampered binaries: clients refuse doctored ledger evidence, and the
/// ledger refuses transforms whose measured binary is not on any edge.
fn attack_tamper_binary(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let _ = config;
    // (a) Client side: serve evidence with a mutated application digest.
    let mut task = state.world.task();
    task.ledger_evidence.chain.application_digest.0[3] ^= 1;
    let rv = state.world.client_rv.clone();
    let now = state.world.now_ms;
    let mut device = state.world.device(0);
    let outcome = verify_and_upload(&mut device, &task, &rv, now);
    let blocked = matches!(outcome, Err(UploadError::EvidenceRejected(_)));
    report.check("client_rejects_tampered_ledger_binary", "EvidenceRejected", describe(&outcome), blocked);
    let no_contribution = device.opstats().count() == 0;
    report.check("no_contribution_recorded", true, no_contribution, no_contribution);
    state.verification_records.push_str(&cfc_core::client::export_verification_records(&device));

    // (b) Ledger side: an honest upload, then an unregistered binary asks
    // for access (properly attested, wrong measurement).
    let blobs = upload_fleet(state, report, 1);
    let rogue_config = cfc_core::pipeline::TransformConfig::Select(cfc_core::pipeline::SelectSpec {
        key_columns: vec![],
        value_columns: vec![],
    });
    let rogue_spec = cfc_core::pipeline::TransformSpec {
        application_digest: cfc_core::attestation::measurements::transform_application(
            "transform/exfiltrate/v1",
        ),
        config: rogue_config,
        terminal: false,
    };
    let mut rogue =
        spawn_transform(&rogue_spec, &state.world.root, state.world.rng.fork("rogue"));
    let request = manual_request(&blobs[0], &state.world.policy, 0, &mut rogue);
    let outcome = state.world.ledger.authorize_access(request, state.world.now_ms);
    let blocked = matches!(outcome, Err(LedgerError::NoMatchingEdge));
    report.check("ledger_rejects_unregistered_binary", "NoMatchingEdge", describe(&outcome), blocked);

    // (c) Ledger side: registered binary but broken measurement chain.
    let run = state.world.plan();
    let mut honest =
        spawn_transform(&run.plan[0].spec, &state.world.root, state.world.rng.fork("tampered"));
    let mut request = manual_request(&blobs[0], &state.world.policy, 0, &mut honest);
    request.evidence.chain.kernel_digest.0[0] ^= 1;
    let outcome = state.world.ledger.authorize_access(request, state.world.now_ms);
    let blocked = matches!(outcome, Err(LedgerError::BadEvidence(_)));
    report.check("ledger_rejects_broken_chain", "BadEvidence", describe(&outcome), blocked);
}

/// Tampered policies: clients refuse unendorsed policies; the ledger
/// refuses any policy whose digest differs from the one bound at upload.
fn attack_tamper_policy(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let _ = config;
    let rv = state.world.client_rv.clone();
    let now = state.world.now_ms;

    // (a) Serve a loosened policy with the original endorsement.
    let mut task = state.world.task();
    task.policy.edges[1].constraints.epsilon_max = Some(100.0);
    let mut device = state.world.device(0);
    let outcome = verify_and_upload(&mut device, &task, &rv, now);
    let blocked = matches!(outcome, Err(UploadError::PolicyNotEndorsed(_)));
    report.check("client_rejects_unendorsed_policy", "PolicyNotEndorsed", describe(&outcome), blocked);
    state.verification_records.push_str(&cfc_core::client::export_verification_records(&device));

    // (b) Endorse the loosened policy with a rogue key: still refused.
    let mut rogue_rng = state.world.rng.fork("rogue-signer");
    let rogue_signer = ed25519_dalek::SigningKey::generate(&mut rogue_rng);
    let mut task = state.world.task();
    task.policy.edges[1].constraints.epsilon_max = Some(100.0);
    let loosened_digest = cfc_core::policy::canonical_digest(&task.policy).unwrap();
    task.policy_endorsement = attach_inclusion_proof(
        cfc_core::attestation::endorse(
            loosened_digest,
            cfc_core::attestation::SubjectKind::AccessPolicy,
            &rogue_signer,
        ),
        &mut state.world.log,
    );
    let mut device = state.world.device(1);
    let outcome = verify_and_upload(&mut device, &task, &rv, now);
    let blocked = matches!(outcome, Err(UploadError::PolicyNotEndorsed(_)));
    report.check("client_rejects_rogue_endorsement", "PolicyNotEndorsed", describe(&outcome), blocked);

    // (c) Ledger side: swap the policy after upload.
    let blobs = upload_fleet(state, report, 1);
    let run = state.world.plan();
    let mut select =
        spawn_transform(&run.plan[0].spec, &state.world.root, state.world.rng.fork("swap"));
    let mut loosened = state.world.policy.clone();
    loosened.edges[0].usage_limit = 1000;
    let request = manual_request_with_policy(&blobs[0], &loosened, 0, &mut select);
    let outcome = state.world.ledger.authorize_access(request, now);
    let blocked = matches!(outcome, Err(LedgerError::PolicyDigestMismatch));
    report.check("ledger_rejects_swapped_policy", "PolicyDigestMismatch", describe(&outcome), blocked);
}

/// Skewed ledger clocks: devices refuse keys issued too far in the future
/// or already expired, and accept at the tolerance boundary.
fn attack_clock_skew(config: &ScenarioConfig, state: &mut RunState, report: &mut ScenarioReport) {
    let _ = config;
    let rv = state.world.client_rv.clone();
    let now = state.world.now_ms;
    let tolerance = state.world.skew_tolerance_ms;

    // Ledger clock running ahead: issued_at beyond device now + tolerance.
    let mut task = state.world.task();
    task.ledger_bundle = state.world.ledger.create_key(now + 2 * tolerance, state.world.bundle.expiration - now);
    let mut device = state.world.device(0);
    let outcome = verify_and_upload(&mut device, &task, &rv, now);
    let blocked = matches!(outcome, Err(UploadError::ClockSkew(_)));
    report.check("device_rejects_future_key", "ClockSkew", describe(&outcome), blocked);
    state.verification_records.push_str(&cfc_core::client::export_verification_records(&device));

    // Ledger clock running behind: the served key reads as expired.
    let mut task = state.world.task();
    task.ledger_bundle = state.world.ledger.create_key(now, 1);
    let mut device = state.world.device(1);
    let outcome = verify_and_upload(&mut device, &task, &rv, now + 10);
    let blocked = matches!(outcome, Err(UploadError::ClockSkew(_)));
    report.check("device_rejects_expired_key", "ClockSkew", describe(&outcome), blocked);

    // Boundary: issued_at exactly at device now + tolerance is accepted.
    let mut task = state.world.task();
    task.ledger_bundle = state.world.ledger.create_key(now + tolerance, DEFAULT_TTL_MS);
    let mut device = state.world.device(2);
    let outcome = verify_and_upload(&mut device, &task, &rv, now);
    let accepted = outcome.is_ok();
    report.check("boundary_skew_accepted", true, accepted, accepted);
}

// ---------------------------------------------------------------------------
// Helpers

fn describe<T, E: std::fmt::Debug>(outcome: &Result<T, E>) -> String {
    match outcome {
        Ok(_) => "accepted".to_string(),
        Err(e) => format!("{e:?}"),
    }
}

fn manual_request(
    blob: &EncryptedBlob,
    policy: &AccessPolicy,
    src_node: u32,
    instance: &mut TrustedTransformInstance,
) -> AuthorizeRequest {
    manual_request_with_policy(blob, policy, src_node, instance)
}

fn manual_request_with_policy(
    blob: &EncryptedBlob,
    policy: &AccessPolicy,
    src_node: u32,
    instance: &mut TrustedTransformInstance,
) -> AuthorizeRequest {
    AuthorizeRequest {
        ledger_key_id: blob.header.ledger_key_id,
        blob_id: blob.header.blob_id,
        policy_digest: blob.header.policy_digest,
        encapsulated_key: blob.header.encapsulated_key.clone(),
        wrapped_data_key: blob.header.wrapped_data_key.clone(),
        policy: policy.clone(),
        src_node,
        evidence: instance.evidence().clone(),
        config: instance.spec().config.clone(),
        nonce: instance.issue_nonce(),
        recipient_public_key: instance.evidence().app_public_keys.encryption.clone(),
    }
}
