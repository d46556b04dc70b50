//! Simulated layered measurement-and-signing chain and its verification.
//!
//! A software "hardware root" signing key stands in for the TEE vendor's
//! root of trust. Evidence carries one certificate per boot layer
//! (firmware, kernel, application, config): each layer's key signs the next
//! layer's measurement and key, and the final layer key signs the
//! application's public keys. Verification walks the chain from a
//! configured root and then checks every measured digest against reference
//! values, falling back to endorsements from allowed signers (optionally
//! requiring transparency-log inclusion proofs).

use std::collections::BTreeSet;

use ed25519_dalek::SigningKey;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::crypto::{sign, verify, Digest32, Id16, VerifyingKeyBytes};
use crate::transparency::{self, InclusionProof, SignedTreeHead};

const LAYER_CERT_DOMAIN: &str = "cfc/attestation/layer-cert/v1";
const APP_KEYS_DOMAIN: &str = "cfc/attestation/app-keys/v1";
const ENDORSEMENT_DOMAIN: &str = "cfc/attestation/endorsement/v1";

/// The four measured boot layers, in chain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Firmware,
    Kernel,
    Application,
    Config,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Firmware, Layer::Kernel, Layer::Application, Layer::Config];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Firmware => "firmware",
            Layer::Kernel => "kernel",
            Layer::Application => "application",
            Layer::Config => "config",
        }
    }
}

/// SHA-256 measurements of the simulated boot chain. The config digest
/// covers the privacy-relevant transform configuration so policy constraints
/// can be matched against what the instance actually runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementChain {
    pub firmware_digest: Digest32,
    pub kernel_digest: Digest32,
    pub application_digest: Digest32,
    pub config_digest: Digest32,
}

impl MeasurementChain {
    pub fn layer(&self, layer: Layer) -> Digest32 {
        match layer {
            Layer::Firmware => self.firmware_digest,
            Layer::Kernel => self.kernel_digest,
            Layer::Application => self.application_digest,
            Layer::Config => self.config_digest,
        }
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut Digest32 {
        match layer {
            Layer::Firmware => &mut self.firmware_digest,
            Layer::Kernel => &mut self.kernel_digest,
            Layer::Application => &mut self.application_digest,
            Layer::Config => &mut self.config_digest,
        }
    }
}

/// Application-level keys bound by the evidence: a signing key for records
/// the instance emits, and the hybrid encryption key it receives data under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppPublicKeys {
    pub signing: VerifyingKeyBytes,
    #[serde(with = "crate::encoding::b64vec")]
    pub encryption: Vec<u8>,
}

/// One link of the chain: the parent layer's key signs this layer's
/// measurement together with the key that will sign the next layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCert {
    pub layer: Layer,
    pub measurement: Digest32,
    pub subject_public_key: VerifyingKeyBytes,
    #[serde(with = "crate::encoding::b64arr")]
    pub signature: [u8; 64],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationEvidence {
    pub chain: MeasurementChain,
    pub app_public_keys: AppPublicKeys,
    pub layer_certs: Vec<LayerCert>,
    #[serde(with = "crate::encoding::b64arr")]
    pub app_keys_signature: [u8; 64],
}

#[derive(Serialize)]
struct LayerStatement<'a> {
    layer: Layer,
    measurement: &'a Digest32,
    subject_public_key: &'a VerifyingKeyBytes,
}

#[derive(Serialize)]
struct EndorsementStatement<'a> {
    subject_kind: SubjectKind,
    subject_digest: &'a Digest32,
}

/// Well-known measurements of the simulated platform. Real deployments
/// measure binaries; here the "artifact bytes" are stable behavior ids.
pub mod measurements {
    use super::Digest32;

    pub fn firmware() -> Digest32 {
        Digest32::of(b"cfc-sim/firmware/v1")
    }

    pub fn kernel() -> Digest32 {
        Digest32::of(b"cfc-sim/kernel/v1")
    }

    pub fn ledger_application() -> Digest32 {
        Digest32::of(b"cfc-sim/ledger/v1")
    }

    /// Application digest of a transform behavior, e.g. "transform/select/v1".
    pub fn transform_application(behavior_id: &str) -> Digest32 {
        Digest32::of(behavior_id.as_bytes())
    }
}

/// The simulated hardware root of trust. Only evidence chains signed by a
/// root the verifier trusts will be accepted.
#[derive(Clone)]
pub struct HardwareRoot {
    key: SigningKey,
}

impl HardwareRoot {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self { key: SigningKey::generate(rng) }
    }

    pub fn public_key(&self) -> VerifyingKeyBytes {
        VerifyingKeyBytes::of(&self.key.verifying_key())
    }
}

/// Produces evidence for a measurement chain, binding `app_keys` under the
/// final layer key. Simulation only: real hardware would never expose the
/// root signing operation like this.
pub fn generate_evidence(
    chain: &MeasurementChain,
    app_keys: &AppPublicKeys,
    hardware_root: &HardwareRoot,
    rng: &mut (impl RngCore + CryptoRng),
) -> AttestationEvidence {
    let mut certs = Vec::with_capacity(Layer::ALL.len());
    let mut parent = hardware_root.key.clone();
    for layer in Layer::ALL {
        let subject = SigningKey::generate(rng);
        let subject_public_key = VerifyingKeyBytes::of(&subject.verifying_key());
        let statement = LayerStatement {
            layer,
            measurement: &chain.layer(layer),
            subject_public_key: &subject_public_key,
        };
        let message = canonical::to_bytes(&statement).expect("layer statement serializes");
        certs.push(LayerCert {
            layer,
            measurement: chain.layer(layer),
            subject_public_key,
            signature: sign(&parent, LAYER_CERT_DOMAIN, &message),
        });
        parent = subject;
    }
    let app_message = canonical::to_bytes(app_keys).expect("app keys serialize");
    AttestationEvidence {
        chain: *chain,
        app_public_keys: app_keys.clone(),
        layer_certs: certs,
        app_keys_signature: sign(&parent, APP_KEYS_DOMAIN, &app_message),
    }
}

// ---------------------------------------------------------------------------
// Reference values and endorsements

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestAllowlist {
    pub allowed: BTreeSet<Digest32>,
}

impl DigestAllowlist {
    pub fn of(digests: impl IntoIterator<Item = Digest32>) -> Self {
        Self { allowed: digests.into_iter().collect() }
    }
}

/// The verifier's acceptance policy: trusted roots, per-layer digest
/// allowlists (layers set to `None` are not checked), allowed endorsement
/// signers, and whether endorsements must carry inclusion proofs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub trusted_hardware_roots: Vec<VerifyingKeyBytes>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub firmware: Option<DigestAllowlist>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<DigestAllowlist>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub application: Option<DigestAllowlist>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<DigestAllowlist>,
    pub endorser_keys: Vec<VerifyingKeyBytes>,
    pub require_inclusion_proofs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_public_key: Option<VerifyingKeyBytes>,
}

impl ReferenceValues {
    fn layer_policy(&self, layer: Layer) -> Option<&DigestAllowlist> {
        match layer {
            Layer::Firmware => self.firmware.as_ref(),
            Layer::Kernel => self.kernel.as_ref(),
            Layer::Application => self.application.as_ref(),
            Layer::Config => self.config.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectKind {
    ApplicationBinary,
    AccessPolicy,
}

/// A service-provider signature over `(subject_kind || subject_digest)`,
/// optionally accompanied by a transparency-log inclusion proof.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub subject_kind: SubjectKind,
    pub subject_digest: Digest32,
    pub signer_key_id: Id16,
    #[serde(with = "crate::encoding::b64arr")]
    pub signature: [u8; 64],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inclusion: Option<InclusionAttachment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionAttachment {
    pub proof: InclusionProof,
    pub head: SignedTreeHead,
}

impl Endorsement {
    /// The endorsement without its inclusion attachment; this is what gets
    /// logged and hashed into transparency-log leaves.
    pub fn core(&self) -> Endorsement {
        Endorsement { inclusion: None, ..self.clone() }
    }

    pub fn verify_signature(&self, signer_public_key: &VerifyingKeyBytes) -> bool {
        let statement = EndorsementStatement {
            subject_kind: self.subject_kind,
            subject_digest: &self.subject_digest,
        };
        let Ok(message) = canonical::to_bytes(&statement) else {
            return false;
        };
        verify(&signer_public_key.0, ENDORSEMENT_DOMAIN, &message, &self.signature)
    }
}

/// Signs a digest as an approved binary or access policy.
pub fn endorse(subject_digest: Digest32, subject_kind: SubjectKind, signer: &SigningKey) -> Endorsement {
    let statement = EndorsementStatement { subject_kind, subject_digest: &subject_digest };
    let message = canonical::to_bytes(&statement).expect("endorsement statement serializes");
    Endorsement {
        subject_kind,
        subject_digest,
        signer_key_id: VerifyingKeyBytes::of(&signer.verifying_key()).key_id(),
        signature: sign(signer, ENDORSEMENT_DOMAIN, &message),
        inclusion: None,
    }
}

// ---------------------------------------------------------------------------
// Verification

/// Identity extracted from evidence that passed every check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedIdentity {
    pub chain: MeasurementChain,
    pub app_public_keys: AppPublicKeys,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttestationError {
    #[error("signature chain broken at layer {layer}")]
    BrokenChain { layer: String },
    #[error("digest for layer {layer} is not allowed")]
    DigestNotAllowed { layer: String },
    #[error("endorsement for layer {layer} lacks a valid inclusion proof")]
    MissingInclusionProof { layer: String },
    #[error("endorsement signature for layer {layer} is invalid")]
    BadEndorsementSignature { layer: String },
}

/// Verifies evidence against reference values and endorsements.
///
/// Accepts iff (a) the signature chain is valid from a trusted hardware
/// root, (b) every checked layer digest is allowlisted or endorsed by an
/// allowed signer, and (c) when required, each such endorsement carries a
/// valid inclusion proof. Pure: same inputs, same verdict.
pub fn verify_evidence(
    evidence: &AttestationEvidence,
    reference_values: &ReferenceValues,
    endorsements: &[Endorsement],
) -> Result<VerifiedIdentity, AttestationError> {
    verify_chain(evidence, reference_values)?;
    for layer in Layer::ALL {
        let Some(policy) = reference_values.layer_policy(layer) else {
            continue;
        };
        let digest = evidence.chain.layer(layer);
        if policy.allowed.contains(&digest) {
            continue;
        }
        check_endorsed(layer, digest, reference_values, endorsements)?;
    }
    Ok(VerifiedIdentity {
        chain: evidence.chain,
        app_public_keys: evidence.app_public_keys.clone(),
    })
}

fn verify_chain(
    evidence: &AttestationEvidence,
    reference_values: &ReferenceValues,
) -> Result<(), AttestationError> {
    let broken = |layer: &str| AttestationError::BrokenChain { layer: layer.to_string() };
    if evidence.layer_certs.len() != Layer::ALL.len() {
        return Err(broken("firmware"));
    }
    let mut parents: Vec<[u8; 32]> =
        reference_values.trusted_hardware_roots.iter().map(|k| k.0).collect();
    if parents.is_empty() {
        return Err(broken("firmware"));
    }
    for (cert, layer) in evidence.layer_certs.iter().zip(Layer::ALL) {
        if cert.layer != layer || cert.measurement != evidence.chain.layer(layer) {
            return Err(broken(layer.name()));
        }
        let statement = LayerStatement {
            layer,
            measurement: &cert.measurement,
            subject_public_key: &cert.subject_public_key,
        };
        let message =
            canonical::to_bytes(&statement).map_err(|_| broken(layer.name()))?;
        let ok = parents
            .iter()
            .any(|parent| verify(parent, LAYER_CERT_DOMAIN, &message, &cert.signature));
        if !ok {
            return Err(broken(layer.name()));
        }
        parents = vec![cert.subject_public_key.0];
    }
    let app_message =
        canonical::to_bytes(&evidence.app_public_keys).map_err(|_| broken("application-keys"))?;
    if !verify(&parents[0], APP_KEYS_DOMAIN, &app_message, &evidence.app_keys_signature) {
        return Err(broken("application-keys"));
    }
    Ok(())
}

fn check_endorsed(
    layer: Layer,
    digest: Digest32,
    reference_values: &ReferenceValues,
    endorsements: &[Endorsement],
) -> Result<(), AttestationError> {
    let layer_name = || layer.name().to_string();
    let candidates: Vec<&Endorsement> = endorsements
        .iter()
        .filter(|e| e.subject_kind == SubjectKind::ApplicationBinary && e.subject_digest == digest)
        .collect();
    if candidates.is_empty() {
        return Err(AttestationError::DigestNotAllowed { layer: layer_name() });
    }
    for endorsement in candidates {
        let Some(signer) = reference_values
            .endorser_keys
            .iter()
            .find(|k| k.key_id() == endorsement.signer_key_id)
        else {
            // Endorsed, but not by a signer this verifier accepts.
            continue;
        };
        if !endorsement.verify_signature(signer) {
            return Err(AttestationError::BadEndorsementSignature { layer: layer_name() });
        }
        if reference_values.require_inclusion_proofs {
            return verify_endorsement_inclusion(endorsement, reference_values)
                .then_some(())
                .ok_or(AttestationError::MissingInclusionProof { layer: layer_name() });
        }
        return Ok(());
    }
    Err(AttestationError::DigestNotAllowed { layer: layer_name() })
}

/// Checks an endorsement's inclusion attachment: the head must be signed by
/// the configured log operator and the proof must bind the endorsement's
/// leaf to that head.
pub fn verify_endorsement_inclusion(
    endorsement: &Endorsement,
    reference_values: &ReferenceValues,
) -> bool {
    let (Some(attachment), Some(log_key)) =
        (&endorsement.inclusion, &reference_values.log_public_key)
    else {
        return false;
    };
    transparency::verify_head(&attachment.head, log_key)
        && transparency::verify_inclusion(&endorsement.core(), &attachment.proof, &attachment.head)
}
