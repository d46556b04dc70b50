//! Simulated end-user device.
//!
//! A device holds local rows and an append-only operational-stats log of
//! past contributions. Before uploading it verifies, in order: the ledger's
//! attestation evidence, the key bundle signature, the policy endorsement
//! (with inclusion proof when required), and the ledger clock skew. No
//! ciphertext is produced unless every check passes, and failed attempts
//! leave no contribution record; every attempt appends an attestation
//! verification record that an auditor can re-verify offline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggcore::ClientTable;
use crate::attestation::{
    verify_endorsement_inclusion, verify_evidence, AttestationEvidence, Endorsement,
    ReferenceValues, SubjectKind,
};
use crate::canonical;
use crate::crypto::Digest32;
use crate::envelope::{encrypt_blob, EncryptedBlob, WrapRequest};
use crate::ledger::PublicKeyBundle;
use crate::pipeline::{project_table, Payload, SelectSpec};
use crate::policy::{self, AccessPolicy};
use crate::rng::SeededRandomness;

/// Default tolerance for the ledger-clock skew check: five minutes.
pub const DEFAULT_SKEW_TOLERANCE_MS: u64 = 5 * 60 * 1000;

/// Sampling-without-replacement rule for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SworPeriod {
    /// At most one contribution per window of this length.
    Window { period_ms: u64 },
    /// At most one contribution ever.
    Lifetime,
}

/// How the device condenses local data before upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Summarization {
    /// Project named columns of the local table.
    Projection { key_columns: Vec<String>, value_columns: Vec<String> },
    /// Upload a model-update vector of the given dimension.
    VectorUpdate { dimension: usize },
}

#[derive(Debug, Clone)]
pub struct TaskAssignment {
    pub task_id: String,
    pub summarization: Summarization,
    pub eligibility: SworPeriod,
    pub policy: AccessPolicy,
    pub policy_endorsement: Endorsement,
    pub ledger_bundle: PublicKeyBundle,
    pub ledger_evidence: AttestationEvidence,
    pub ledger_endorsements: Vec<Endorsement>,
    pub skew_tolerance_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStatsEntry {
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Accepted,
    Rejected { check: String },
}

/// What the device logs about every upload attempt; enough for an auditor
/// to re-run the same verification offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationVerificationRecord {
    pub device_id: String,
    pub task_id: String,
    pub ledger_evidence: AttestationEvidence,
    pub ledger_endorsements: Vec<Endorsement>,
    pub policy_digest: Digest32,
    pub policy_endorsement: Endorsement,
    pub verdict: Verdict,
    pub device_clock_ms: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum UploadError {
    #[error("ledger evidence rejected: {0}")]
    EvidenceRejected(String),
    #[error("key bundle signature is invalid")]
    BundleSignatureInvalid,
    #[error("policy is not endorsed: {0}")]
    PolicyNotEndorsed(String),
    #[error("policy endorsement lacks a required inclusion proof")]
    MissingInclusionProof,
    #[error("ledger clock is too skewed: {0}")]
    ClockSkew(String),
    #[error("local rows do not match the task schema: {0}")]
    SchemaMismatch(String),
}

impl UploadError {
    fn check_name(&self) -> &'static str {
        match self {
            UploadError::EvidenceRejected(_) => "evidence",
            UploadError::BundleSignatureInvalid => "bundle_signature",
            UploadError::PolicyNotEndorsed(_) => "policy_endorsement",
            UploadError::MissingInclusionProof => "inclusion_proof",
            UploadError::ClockSkew(_) => "clock_skew",
            UploadError::SchemaMismatch(_) => "summarization",
        }
    }
}

pub struct DeviceState {
    pub device_id: String,
    pub rows: ClientTable,
    opstats: Vec<(String, OpStatsEntry)>,
    records: Vec<AttestationVerificationRecord>,
    rng: SeededRandomness,
}

impl DeviceState {
    pub fn new(device_id: impl Into<String>, rows: ClientTable, rng: SeededRandomness) -> Self {
        Self { device_id: device_id.into(), rows, opstats: Vec::new(), records: Vec::new(), rng }
    }

    pub fn opstats(&self) -> impl Iterator<Item = (&str, OpStatsEntry)> {
        self.opstats.iter().map(|(task, entry)| (task.as_str(), *entry))
    }

    pub fn records(&self) -> &[AttestationVerificationRecord] {
        &self.records
    }
}

/// SWOR check: ineligible iff the opstats log shows a contribution to this
/// task within `period` of `now` (or ever, for lifetime tasks).
pub fn check_eligibility(device: &DeviceState, task: &TaskAssignment, now_ms: u64) -> bool {
    device.opstats.iter().filter(|(task_id, _)| task_id == &task.task_id).all(|(_, entry)| {
        match task.eligibility {
            SworPeriod::Lifetime => false,
            SworPeriod::Window { period_ms } => now_ms.saturating_sub(entry.timestamp_ms) > period_ms,
        }
    })
}

/// Deterministic projection of local rows into the task's schema.
pub fn run_summarization(
    device: &DeviceState,
    task: &TaskAssignment,
) -> Result<ClientTable, UploadError> {
    match &task.summarization {
        Summarization::Projection { key_columns, value_columns } => {
            let spec =
                SelectSpec { key_columns: key_columns.clone(), value_columns: value_columns.clone() };
            project_table(&device.rows, &spec).map_err(UploadError::SchemaMismatch)
        }
        Summarization::VectorUpdate { .. } => Err(UploadError::SchemaMismatch(
            "vector-update tasks produce no summarization table".into(),
        )),
    }
}

fn prepare_payload(device: &mut DeviceState, task: &TaskAssignment) -> Result<Payload, UploadError> {
    match &task.summarization {
        Summarization::Projection { .. } => {
            Ok(Payload::Table { table: run_summarization(device, task)? })
        }
        Summarization::VectorUpdate { dimension } => {
            Ok(Payload::Vector {
                values: synth_vector_update(&device.device_id, &task.task_id, *dimension),
            })
        }
    }
}

/// Stand-in for on-device gradient computation: a pseudo-update in
/// [-1, 1]^dimension, deterministic in (device, task) so test oracles can
/// reproduce it.
pub fn synth_vector_update(device_id: &str, task_id: &str, dimension: usize) -> Vec<f64> {
    let mut hasher = sha2::Sha256::new();
    use sha2::Digest as _;
    hasher.update(b"cfc/device-update/v1");
    hasher.update(device_id.as_bytes());
    hasher.update([0]);
    hasher.update(task_id.as_bytes());
    let mut rng = SeededRandomness::test(hasher.finalize().into(), false);
    (0..dimension).map(|_| rng.uniform() * 2.0 - 1.0).collect()
}

/// Verifies the served artifacts and uploads the encrypted summarization.
///
/// Check order: (1) ledger evidence against the device's reference values,
/// (2) key bundle signature under the evidence-bound app key, (3) policy
/// endorsement (signature, and inclusion proof when the reference values
/// require one), (4) ledger clock skew, (5) summarize and encrypt. The
/// opstats entry and an accepted verification record are appended only on
/// success; failures append a record naming the failed check.
pub fn verify_and_upload(
    device: &mut DeviceState,
    task: &TaskAssignment,
    reference_values: &ReferenceValues,
    now_ms: u64,
) -> Result<EncryptedBlob, UploadError> {
    match try_upload(device, task, reference_values, now_ms) {
        Ok(blob) => {
            device.opstats.push((task.task_id.clone(), OpStatsEntry { timestamp_ms: now_ms }));
            push_record(device, task, Verdict::Accepted, now_ms);
            Ok(blob)
        }
        Err(error) => {
            push_record(
                device,
                task,
                Verdict::Rejected { check: error.check_name().to_string() },
                now_ms,
            );
            Err(error)
        }
    }
}

fn try_upload(
    device: &mut DeviceState,
    task: &TaskAssignment,
    reference_values: &ReferenceValues,
    now_ms: u64,
) -> Result<EncryptedBlob, UploadError> {
    // (1) Attestation: the ledger binary, rooted in trusted hardware.
    let identity =
        verify_evidence(&task.ledger_evidence, reference_values, &task.ledger_endorsements)
            .map_err(|e| UploadError::EvidenceRejected(e.to_string()))?;

    // (2) The served key must come from that attested binary.
    if !task.ledger_bundle.verify(&identity.app_public_keys.signing) {
        return Err(UploadError::BundleSignatureInvalid);
    }

    // (3) The policy must be endorsed (and transparently logged, when the
    // reference values demand proofs).
    let policy_digest = policy::canonical_digest(&task.policy)
        .map_err(|e| UploadError::PolicyNotEndorsed(format!("policy invalid: {e}")))?;
    let endorsement = &task.policy_endorsement;
    if endorsement.subject_kind != SubjectKind::AccessPolicy
        || endorsement.subject_digest != policy_digest
    {
        return Err(UploadError::PolicyNotEndorsed(
            "endorsement does not cover the served policy".into(),
        ));
    }
    let signer = reference_values
        .endorser_keys
        .iter()
        .find(|k| k.key_id() == endorsement.signer_key_id)
        .ok_or_else(|| UploadError::PolicyNotEndorsed("signer is not allowed".into()))?;
    if !endorsement.verify_signature(signer) {
        return Err(UploadError::PolicyNotEndorsed("endorsement signature invalid".into()));
    }
    if reference_values.require_inclusion_proofs
        && !verify_endorsement_inclusion(endorsement, reference_values)
    {
        return Err(UploadError::MissingInclusionProof);
    }

    // (4) Clock skew: a ledger running far ahead serves keys not yet
    // issued; one running far behind serves keys already expired.
    let bundle = &task.ledger_bundle;
    if bundle.issued_at > now_ms.saturating_add(task.skew_tolerance_ms) {
        return Err(UploadError::ClockSkew(format!(
            "bundle issued_at {} is beyond device time {} + tolerance",
            bundle.issued_at, now_ms
        )));
    }
    if bundle.expiration <= now_ms {
        return Err(UploadError::ClockSkew(format!(
            "bundle expired at {} by device time {}",
            bundle.expiration, now_ms
        )));
    }

    // (5) Summarize, serialize, encrypt.
    let payload = prepare_payload(device, task)?;
    let bytes = payload
        .to_bytes()
        .map_err(|e| UploadError::SchemaMismatch(format!("payload serialization: {e}")))?;
    let request = WrapRequest {
        plaintext: &bytes,
        policy_digest,
        ledger_public_key: &bundle.public_key,
        ledger_key_id: bundle.key_id,
    };
    encrypt_blob(&request, &mut device.rng)
        .map_err(|e| UploadError::SchemaMismatch(format!("encryption failed: {e}")))
}

fn push_record(device: &mut DeviceState, task: &TaskAssignment, verdict: Verdict, now_ms: u64) {
    let policy_digest =
        policy::canonical_digest(&task.policy).unwrap_or(Digest32([0; 32]));
    device.records.push(AttestationVerificationRecord {
        device_id: device.device_id.clone(),
        task_id: task.task_id.clone(),
        ledger_evidence: task.ledger_evidence.clone(),
        ledger_endorsements: task.ledger_endorsements.clone(),
        policy_digest,
        policy_endorsement: task.policy_endorsement.clone(),
        verdict,
        device_clock_ms: now_ms,
    });
}

/// Eligibility-gated participation: the composition scenarios use.
pub fn participate(
    device: &mut DeviceState,
    task: &TaskAssignment,
    reference_values: &ReferenceValues,
    now_ms: u64,
) -> Option<Result<EncryptedBlob, UploadError>> {
    if !check_eligibility(device, task, now_ms) {
        return None;
    }
    Some(verify_and_upload(device, task, reference_values, now_ms))
}

/// Line-delimited canonical dump of the device's verification records.
pub fn export_verification_records(device: &DeviceState) -> String {
    device
        .records
        .iter()
        .map(|record| canonical::to_string(record).expect("record serializes"))
        .fold(String::new(), |mut out, line| {
            out.push_str(&line);
            out.push('\n');
            out
        })
}

pub fn parse_verification_records(
    text: &str,
) -> Result<Vec<AttestationVerificationRecord>, serde_json::Error> {
    text.lines().filter(|line| !line.trim().is_empty()).map(serde_json::from_str).collect()
}
