//! Untrusted orchestration over trusted transforms.
//!
//! A transform instance generates a recipient keypair at spawn and attests
//! it (together with its configuration digest) in its evidence. To process
//! a blob it picks a fresh nonce, asks the ledger for the data key, opens
//! the rewrapped key with that nonce bound as associated data, decrypts,
//! and applies its function. Non-terminal outputs are re-encrypted under
//! the same ledger key id and policy digest before leaving the instance, so
//! derived data dies with the source key. Only terminal stages release
//! plaintext, and only the DP-protected aggregate.
//!
//! The "TEE boundary" is the type boundary: orchestrator-visible values are
//! [`EncryptedBlob`]s and [`StageOutput`]s, never payload bytes of a
//! non-terminal stage.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggcore::{
    add_noise_and_threshold, aggregate, bound_contributions, build_local_histogram, dp_vector_sum,
    derive_noise_plan, AggError, ClientTable, ReleasedHistogram, TableRow,
};
use crate::attestation::{
    generate_evidence, measurements, AppPublicKeys, AttestationEvidence, HardwareRoot,
    VerifiedIdentity,
};
use crate::canonical::{self, CanonicalError};
use crate::crypto::{hybrid_keypair, hybrid_open, Digest32, HybridPrivateKey, Id16, VerifyingKeyBytes};
use crate::dpquery::DpQueryConfig;
use crate::envelope::{decrypt_blob, encrypt_blob, EncryptedBlob, WrapRequest};
use crate::ledger::{AuthorizeRequest, LedgerError, LedgerHandle, PublicKeyBundle, RewrappedKey, REWRAP_INFO};
use crate::policy::{self, AccessPolicy, ConfigBounds};
use crate::rng::SeededRandomness;

pub const SELECT_BEHAVIOR: &str = "transform/select/v1";
pub const DP_HISTOGRAM_BEHAVIOR: &str = "transform/dp-histogram/v1";
pub const DP_VECTOR_SUM_BEHAVIOR: &str = "transform/dp-vector-sum/v1";

// ---------------------------------------------------------------------------
// Payloads and configs

/// What travels inside a blob: a client summarization table or a model
/// update vector. Serialized in the canonical text format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Payload {
    Table { table: ClientTable },
    Vector { values: Vec<f64> },
}

impl Payload {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CanonicalError> {
        canonical::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSpec {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpHistogramSpec {
    pub query: DpQueryConfig,
    /// Registered id of an optional proprietary per-user function, applied
    /// to each user's record before any DP bounding.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_user_function: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorSumSpec {
    pub dimension: usize,
    pub l2_clip: f64,
    pub epsilon: f64,
    pub delta: f64,
}

/// The privacy-relevant configuration a transform attests to; its canonical
/// digest is the config layer of the instance's measurement chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformConfig {
    Select(SelectSpec),
    DpHistogram(DpHistogramSpec),
    DpVectorSum(VectorSumSpec),
}

impl TransformConfig {
    pub fn behavior_id(&self) -> &'static str {
        match self {
            TransformConfig::Select(_) => SELECT_BEHAVIOR,
            TransformConfig::DpHistogram(_) => DP_HISTOGRAM_BEHAVIOR,
            TransformConfig::DpVectorSum(_) => DP_VECTOR_SUM_BEHAVIOR,
        }
    }

    pub fn digest(&self) -> Result<Digest32, CanonicalError> {
        canonical::digest(self)
    }

    /// Declared privacy budget, for policy constraint matching.
    pub fn bounds(&self) -> ConfigBounds {
        match self {
            TransformConfig::Select(_) => ConfigBounds::default(),
            TransformConfig::DpHistogram(spec) => ConfigBounds {
                epsilon: Some(spec.query.epsilon),
                delta: Some(spec.query.delta),
            },
            TransformConfig::DpVectorSum(spec) => {
                ConfigBounds { epsilon: Some(spec.epsilon), delta: Some(spec.delta) }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub application_digest: Digest32,
    pub config: TransformConfig,
    pub terminal: bool,
}

impl TransformSpec {
    pub fn new(config: TransformConfig, terminal: bool) -> Self {
        Self {
            application_digest: measurements::transform_application(config.behavior_id()),
            config,
            terminal,
        }
    }
}

// ---------------------------------------------------------------------------
// Trusted transform instance

/// A simulated TEE-hosted transform. The recipient private key and decrypted
/// payloads never leave this type.
pub struct TrustedTransformInstance {
    spec: TransformSpec,
    evidence: AttestationEvidence,
    recipient_private: HybridPrivateKey,
    recipient_public: Vec<u8>,
    outstanding_nonces: HashSet<Id16>,
    rng: SeededRandomness,
}

/// Starts a transform: fresh recipient keypair, evidence embedding the
/// config digest.
pub fn spawn_transform(
    spec: &TransformSpec,
    hardware_root: &HardwareRoot,
    mut rng: SeededRandomness,
) -> TrustedTransformInstance {
    let (recipient_private, recipient_public) = hybrid_keypair(&mut rng);
    let recipient_public = recipient_public.to_bytes();
    let signing = ed25519_dalek::SigningKey::generate(&mut rng);
    let chain = crate::attestation::MeasurementChain {
        firmware_digest: measurements::firmware(),
        kernel_digest: measurements::kernel(),
        application_digest: spec.application_digest,
        config_digest: spec.config.digest().expect("transform config serializes"),
    };
    let app_keys = AppPublicKeys {
        signing: VerifyingKeyBytes::of(&signing.verifying_key()),
        encryption: recipient_public.clone(),
    };
    let evidence = generate_evidence(&chain, &app_keys, hardware_root, &mut rng);
    TrustedTransformInstance {
        spec: spec.clone(),
        evidence,
        recipient_private,
        recipient_public,
        outstanding_nonces: HashSet::new(),
        rng,
    }
}

impl TrustedTransformInstance {
    pub fn evidence(&self) -> &AttestationEvidence {
        &self.evidence
    }

    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }

    fn identity(&self) -> VerifiedIdentity {
        VerifiedIdentity {
            chain: self.evidence.chain,
            app_public_keys: self.evidence.app_public_keys.clone(),
        }
    }

    /// Issues a fresh authorization nonce. The instance tracks it as
    /// outstanding until the matching response is consumed; instances never
    /// reuse nonces.
    pub fn issue_nonce(&mut self) -> Id16 {
        let nonce = self.rng.id16();
        self.outstanding_nonces.insert(nonce);
        nonce
    }

    /// Opens a rewrapped key from the ledger. The response nonce must be one
    /// this instance issued and not yet consumed; anything else is a replay.
    pub fn accept_rewrapped_key(
        &mut self,
        rewrapped: &RewrappedKey,
    ) -> Result<crate::crypto::DataKey, StageError> {
        if !self.outstanding_nonces.remove(&rewrapped.nonce) {
            return Err(StageError::NonceReplayDetected { nonce: rewrapped.nonce });
        }
        let raw = hybrid_open(
            &self.recipient_private,
            &rewrapped.encapsulated,
            REWRAP_INFO,
            &rewrapped.nonce.0,
            &rewrapped.ciphertext,
        )
        .map_err(|_| StageError::RewrappedKeyRejected { nonce: rewrapped.nonce })?;
        let raw: [u8; 32] =
            raw.try_into().map_err(|_| StageError::RewrappedKeyRejected { nonce: rewrapped.nonce })?;
        Ok(crate::crypto::DataKey(raw))
    }
}

// ---------------------------------------------------------------------------
// Stage execution

/// Stage outputs as the orchestrator sees them: non-terminal stages hand
/// back ciphertext only.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutput {
    Encrypted(Vec<EncryptedBlob>),
    Released(ReleasedOutput),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReleasedOutput {
    Histogram(ReleasedHistogram),
    Vector { values: Vec<f64> },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StageError {
    #[error("blob {blob_id}: {error}")]
    Ledger { blob_id: Id16, error: LedgerError },
    #[error("authorization response nonce {nonce} was not outstanding (replay?)")]
    NonceReplayDetected { nonce: Id16 },
    #[error("rewrapped key for nonce {nonce} failed to open")]
    RewrappedKeyRejected { nonce: Id16 },
    #[error("blob {blob_id}: payload rejected: {message}")]
    Payload { blob_id: Id16, message: String },
    #[error("blob {blob_id} is not wrapped under the stage's ledger key")]
    KeyMismatch { blob_id: Id16 },
    #[error("terminal release attempted on a non-terminal edge")]
    ReleaseForbidden,
    #[error("per-user function {id} emitted {emitted} records instead of 1")]
    FunctionMisbehavior { id: String, emitted: usize },
    #[error("unknown per-user function {0}")]
    UnknownFunction(String),
    #[error("aggregation failed: {0}")]
    Aggregation(AggError),
    #[error("policy does not admit this stage: {0}")]
    PolicyRejected(String),
}

/// A stage failure with its per-blob causes. `authorized_then_lost` counts
/// blobs whose authorization succeeded (budget consumed) but whose output
/// was never produced; with usage limits this is unrecoverable data loss,
/// surfaced rather than papered over.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("stage failed: {causes:?} ({authorized_then_lost} authorized-then-lost)")]
pub struct StageFailed {
    pub causes: Vec<StageError>,
    pub authorized_then_lost: u32,
}

/// Ambient inputs a stage needs besides the blobs.
pub struct StageContext<'a> {
    pub policy: &'a AccessPolicy,
    /// Bundle for the key the inputs are wrapped under; re-encryption reuses
    /// it so derived data inherits the source key's erasure.
    pub bundle: &'a PublicKeyBundle,
    pub now_ms: u64,
    /// Already-released public state for per-user functions.
    pub public_state: Option<&'a ReleasedOutput>,
}

/// Runs one stage over blobs sharing a policy digest. For every blob:
/// fresh nonce, ledger authorization, nonce-bound unwrap, decrypt, apply.
/// Non-terminal outputs re-encrypt under the same key id and policy digest;
/// terminal stages release plaintext only on a terminal edge.
pub fn process_stage(
    instance: &mut TrustedTransformInstance,
    blobs: &[EncryptedBlob],
    ledger: &LedgerHandle,
    src_node: u32,
    ctx: &StageContext<'_>,
) -> Result<StageOutput, StageFailed> {
    // The release decision comes from the policy edge this stage matches,
    // not from the spec alone.
    let edge = policy::match_edge(
        ctx.policy,
        src_node,
        &instance.identity(),
        &instance.spec.config.bounds(),
    )
    .map_err(|e| StageFailed { causes: vec![StageError::PolicyRejected(e.to_string())], authorized_then_lost: 0 })?;
    if instance.spec.terminal && !edge.terminal {
        return Err(StageFailed { causes: vec![StageError::ReleaseForbidden], authorized_then_lost: 0 });
    }

    let mut sorted: Vec<&EncryptedBlob> = blobs.iter().collect();
    sorted.sort_by_key(|b| b.header.blob_id);
    // Inputs of one stage share a policy digest; intermediates re-bind it.
    let shared_digest = sorted.first().map(|b| b.header.policy_digest);

    let mut decrypted: Vec<(Id16, Payload)> = Vec::new();
    let mut causes: Vec<StageError> = Vec::new();
    let mut authorized_then_lost = 0u32;
    for blob in sorted {
        match fetch_and_decrypt(instance, blob, ledger, src_node, ctx) {
            Ok(payload) => decrypted.push((blob.header.blob_id, payload)),
            Err(FetchError { error, was_authorized }) => {
                if was_authorized {
                    authorized_then_lost += 1;
                }
                causes.push(error);
            }
        }
    }
    if !causes.is_empty() {
        return Err(StageFailed { causes, authorized_then_lost });
    }

    apply_transform(instance, decrypted, ctx, shared_digest)
        .map_err(|e| StageFailed { causes: vec![e], authorized_then_lost: 0 })
}

struct FetchError {
    error: StageError,
    was_authorized: bool,
}

fn fetch_and_decrypt(
    instance: &mut TrustedTransformInstance,
    blob: &EncryptedBlob,
    ledger: &LedgerHandle,
    src_node: u32,
    ctx: &StageContext<'_>,
) -> Result<Payload, FetchError> {
    let blob_id = blob.header.blob_id;
    let fail = |error: StageError, was_authorized: bool| FetchError { error, was_authorized };

    if blob.header.ledger_key_id != ctx.bundle.key_id {
        return Err(fail(StageError::KeyMismatch { blob_id }, false));
    }
    let nonce = instance.issue_nonce();
    let request = AuthorizeRequest {
        ledger_key_id: blob.header.ledger_key_id,
        blob_id,
        policy_digest: blob.header.policy_digest,
        encapsulated_key: blob.header.encapsulated_key.clone(),
        wrapped_data_key: blob.header.wrapped_data_key.clone(),
        policy: ctx.policy.clone(),
        src_node,
        evidence: instance.evidence.clone(),
        config: instance.spec.config.clone(),
        nonce,
        recipient_public_key: instance.recipient_public.clone(),
    };
    let rewrapped = ledger
        .authorize_access(request, ctx.now_ms)
        .map_err(|error| fail(StageError::Ledger { blob_id, error }, false))?;
    let data_key =
        instance.accept_rewrapped_key(&rewrapped).map_err(|e| fail(e, true))?;
    let payload_bytes = decrypt_blob(blob, &data_key)
        .map_err(|e| fail(StageError::Payload { blob_id, message: e.to_string() }, true))?;
    Payload::from_bytes(&payload_bytes)
        .map_err(|e| fail(StageError::Payload { blob_id, message: e.to_string() }, true))
}

fn apply_transform(
    instance: &mut TrustedTransformInstance,
    inputs: Vec<(Id16, Payload)>,
    ctx: &StageContext<'_>,
    shared_digest: Option<Digest32>,
) -> Result<StageOutput, StageError> {
    match &instance.spec.config {
        TransformConfig::Select(spec) => {
            let spec = spec.clone();
            let mut outputs = Vec::with_capacity(inputs.len());
            for (blob_id, payload) in inputs {
                let Payload::Table { table } = payload else {
                    return Err(StageError::Payload {
                        blob_id,
                        message: "select stage expects table payloads".into(),
                    });
                };
                let projected = project_table(&table, &spec)
                    .map_err(|message| StageError::Payload { blob_id, message })?;
                let digest = shared_digest.expect("non-empty inputs carry a policy digest");
                outputs.push(reencrypt(
                    instance,
                    &Payload::Table { table: projected },
                    ctx,
                    blob_id,
                    digest,
                )?);
            }
            Ok(StageOutput::Encrypted(outputs))
        }
        TransformConfig::DpHistogram(spec) => {
            let spec = spec.clone();
            let function = spec
                .per_user_function
                .as_deref()
                .map(|id| PerUserFunction::registered(id).ok_or_else(|| StageError::UnknownFunction(id.into())))
                .transpose()?;
            let mut bounded = Vec::with_capacity(inputs.len());
            for (blob_id, payload) in inputs {
                let Payload::Table { table } = payload else {
                    return Err(StageError::Payload {
                        blob_id,
                        message: "histogram stage expects table payloads".into(),
                    });
                };
                // Proprietary code runs strictly before any DP bounding.
                let table = match &function {
                    Some(f) => run_per_user_function(f, &table, ctx.public_state)?,
                    None => table,
                };
                let aligned = align_to_query(&table, &spec.query)
                    .map_err(|message| StageError::Payload { blob_id, message })?;
                let local = build_local_histogram(&aligned).map_err(StageError::Aggregation)?;
                let mut blob_rng = instance.rng.fork(&format!("bound/{blob_id}"));
                let local = bound_contributions(&local, &spec.query, &mut blob_rng)
                    .map_err(StageError::Aggregation)?;
                bounded.push((blob_id.to_string(), local));
            }
            let merged = aggregate(&bounded).map_err(StageError::Aggregation)?;
            let plan = derive_noise_plan(&spec.query).map_err(StageError::Aggregation)?;
            let mut noise_rng = instance.rng.fork("release-noise");
            let released = add_noise_and_threshold(&merged, &plan, &mut noise_rng)
                .map_err(StageError::Aggregation)?;
            Ok(StageOutput::Released(ReleasedOutput::Histogram(released)))
        }
        TransformConfig::DpVectorSum(spec) => {
            let spec = spec.clone();
            let mut updates = Vec::with_capacity(inputs.len());
            for (blob_id, payload) in inputs {
                let Payload::Vector { values } = payload else {
                    return Err(StageError::Payload {
                        blob_id,
                        message: "vector-sum stage expects vector payloads".into(),
                    });
                };
                if values.len() != spec.dimension {
                    return Err(StageError::Aggregation(AggError::DimensionMismatch {
                        expected: spec.dimension,
                        got: values.len(),
                    }));
                }
                updates.push(values);
            }
            let mut noise_rng = instance.rng.fork("release-noise");
            let sum = dp_vector_sum(&updates, spec.l2_clip, spec.epsilon, spec.delta, &mut noise_rng)
                .map_err(StageError::Aggregation)?;
            Ok(StageOutput::Released(ReleasedOutput::Vector { values: sum }))
        }
    }
}

fn reencrypt(
    instance: &mut TrustedTransformInstance,
    payload: &Payload,
    ctx: &StageContext<'_>,
    blob_id: Id16,
    policy_digest: Digest32,
) -> Result<EncryptedBlob, StageError> {
    let bytes = payload
        .to_bytes()
        .map_err(|e| StageError::Payload { blob_id, message: e.to_string() })?;
    let request = WrapRequest {
        plaintext: &bytes,
        policy_digest,
        ledger_public_key: &ctx.bundle.public_key,
        ledger_key_id: ctx.bundle.key_id,
    };
    encrypt_blob(&request, &mut instance.rng)
        .map_err(|e| StageError::Payload { blob_id, message: e.to_string() })
}

pub(crate) fn project_table(table: &ClientTable, spec: &SelectSpec) -> Result<ClientTable, String> {
    let key_indices: Vec<usize> = spec
        .key_columns
        .iter()
        .map(|name| {
            table
                .key_columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| format!("missing key column {name}"))
        })
        .collect::<Result<_, _>>()?;
    let value_indices: Vec<usize> = spec
        .value_columns
        .iter()
        .map(|name| {
            table
                .value_columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| format!("missing value column {name}"))
        })
        .collect::<Result<_, _>>()?;
    Ok(ClientTable {
        key_columns: spec.key_columns.clone(),
        value_columns: spec.value_columns.clone(),
        rows: table
            .rows
            .iter()
            .map(|row| TableRow {
                key: key_indices.iter().map(|&i| row.key[i].clone()).collect(),
                values: value_indices.iter().map(|&i| row.values[i]).collect(),
            })
            .collect(),
    })
}

/// Reorders a table to the query's column layout, synthesizing the implicit
/// all-ones column for COUNT aggregations.
fn align_to_query(table: &ClientTable, query: &DpQueryConfig) -> Result<ClientTable, String> {
    if table.key_columns != query.key_columns {
        let select = SelectSpec {
            key_columns: query.key_columns.clone(),
            value_columns: table.value_columns.clone(),
        };
        return align_to_query(&project_table(table, &select)?, query);
    }
    let mut value_columns = Vec::with_capacity(query.aggregations.len());
    let mut sources: Vec<Option<usize>> = Vec::with_capacity(query.aggregations.len());
    for agg in &query.aggregations {
        value_columns.push(agg.output_name.clone());
        match &agg.input_column {
            Some(name) => {
                let index = table
                    .value_columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| format!("missing value column {name}"))?;
                sources.push(Some(index));
            }
            None => sources.push(None),
        }
    }
    Ok(ClientTable {
        key_columns: table.key_columns.clone(),
        value_columns,
        rows: table
            .rows
            .iter()
            .map(|row| TableRow {
                key: row.key.clone(),
                values: sources
                    .iter()
                    .map(|source| source.map_or(1.0, |i| row.values[i]))
                    .collect(),
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Per-user functions

/// Scratch state created fresh for every invocation; whatever a function
/// stores here is gone on the next call.
#[derive(Debug, Default)]
pub struct FunctionContext {
    pub scratch: BTreeMap<String, f64>,
}

type FunctionBehavior =
    fn(&mut FunctionContext, &ClientTable, Option<&ReleasedOutput>) -> Vec<ClientTable>;

/// A proprietary per-user function, identified by a registered id. Plain
/// function pointers keep behaviors from capturing environment, so the only
/// state a function could retain is the per-invocation context.
#[derive(Clone)]
pub struct PerUserFunction {
    pub id: String,
    behavior: FunctionBehavior,
}

impl PerUserFunction {
    pub fn registered(id: &str) -> Option<Self> {
        let behavior: FunctionBehavior = match id {
            "identity" => |_, record, _| vec![record.clone()],
            // Adversarial probe: tries to accumulate a counter across
            // invocations and writes the value it observed into the record.
            "probe/counter" => |ctx, record, _| {
                let seen = *ctx.scratch.get("counter").unwrap_or(&0.0);
                ctx.scratch.insert("counter".into(), seen + 1.0);
                let mut out = record.clone();
                for row in &mut out.rows {
                    for value in &mut row.values {
                        *value = seen;
                    }
                }
                vec![out]
            },
            // Misbehaving functions for the harness.
            "emit-twice" => |_, record, _| vec![record.clone(), record.clone()],
            "emit-none" => |_, _, _| Vec::new(),
            _ => return None,
        };
        Some(Self { id: id.to_string(), behavior })
    }
}

/// Invokes a per-user function on exactly one user's record with a fresh
/// execution context. Anything other than exactly one output record is
/// misbehavior.
pub fn run_per_user_function(
    function: &PerUserFunction,
    record: &ClientTable,
    public_state: Option<&ReleasedOutput>,
) -> Result<ClientTable, StageError> {
    let mut context = FunctionContext::default();
    let mut outputs = (function.behavior)(&mut context, record, public_state);
    if outputs.len() != 1 {
        return Err(StageError::FunctionMisbehavior {
            id: function.id.clone(),
            emitted: outputs.len(),
        });
    }
    Ok(outputs.remove(0))
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub src_node: u32,
    pub spec: TransformSpec,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub policy: AccessPolicy,
    pub plan: Vec<StagePlan>,
    pub input_blobs: Vec<EncryptedBlob>,
}

#[derive(Debug, Clone, Default)]
pub struct OrchestrateOutcome {
    pub released: Vec<ReleasedOutput>,
    /// Blob count entering each stage, in plan order.
    pub stage_input_counts: Vec<usize>,
    pub data_loss_events: u32,
}

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error("plan stage {stage} does not follow the policy graph: {message}")]
    PlanInvalid { stage: usize, message: String },
    #[error("stage {stage} failed: {failure}")]
    StageFailed { stage: usize, failure: StageFailed },
}

/// Executes the plan in order, spawning one transform per stage. Encrypted
/// outputs of each stage feed the next; only terminal releases leave the
/// run. Failed stages may be retried by re-running the plan, with the
/// ledger's usage accounting as the arbiter of what a retry may redo.
pub fn orchestrate(
    run: &PipelineRun,
    ledger: &LedgerHandle,
    hardware_root: &HardwareRoot,
    bundle: &PublicKeyBundle,
    now_ms: u64,
    rng: &mut SeededRandomness,
    public_state: Option<&ReleasedOutput>,
) -> Result<OrchestrateOutcome, OrchestrateError> {
    let mut outcome = OrchestrateOutcome::default();
    let mut blobs = run.input_blobs.clone();
    let mut expected_src: Option<u32> = Some(0);
    for (index, stage) in run.plan.iter().enumerate() {
        if expected_src != Some(stage.src_node) {
            return Err(OrchestrateError::PlanInvalid {
                stage: index,
                message: format!(
                    "stage consumes node {} but the previous stage produced node {:?}",
                    stage.src_node, expected_src
                ),
            });
        }
        let edge = run
            .policy
            .edges
            .iter()
            .find(|e| {
                e.src_node == stage.src_node
                    && e.required_application_digest == stage.spec.application_digest
            })
            .ok_or_else(|| OrchestrateError::PlanInvalid {
                stage: index,
                message: "no policy edge admits the planned transform".into(),
            })?;

        let mut instance =
            spawn_transform(&stage.spec, hardware_root, rng.fork(&format!("stage/{index}")));
        outcome.stage_input_counts.push(blobs.len());
        let ctx = StageContext { policy: &run.policy, bundle, now_ms, public_state };
        match process_stage(&mut instance, &blobs, ledger, stage.src_node, &ctx) {
            Ok(StageOutput::Encrypted(next)) => {
                blobs = next;
                expected_src = Some(edge.dst_node);
            }
            Ok(StageOutput::Released(output)) => {
                outcome.released.push(output);
                blobs = Vec::new();
                expected_src = None;
            }
            Err(failure) => {
                outcome.data_loss_events += failure.authorized_then_lost;
                return Err(OrchestrateError::StageFailed { stage: index, failure });
            }
        }
    }
    Ok(outcome)
}
