//! The stateful key store and policy engine.
//!
//! The ledger issues TTL-bounded hybrid keypairs, and releases a blob's
//! data key only to an attested transform whose identity and configuration
//! match an edge of the blob's bound access policy, rewrapping the key to
//! the transform's evidence-bound recipient key with the request nonce as
//! associated data. Access counts and used nonces are colocated with the
//! key record, so erasing the key (on expiry or restart) erases the
//! accounting state along with the only way to read the data: restart
//! equals cryptographic erasure.
//!
//! All mutations pass through a single command queue owned by one thread;
//! the queue is the linearization point for usage accounting under
//! concurrent callers. The clock is never read from the system: callers
//! supply readings, regressions are clamped and counted, and a key is
//! expired once `now >= expiration`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::mpsc;
use std::thread;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{
    generate_evidence, measurements, verify_evidence, AppPublicKeys, AttestationEvidence,
    HardwareRoot, MeasurementChain, ReferenceValues,
};
use crate::canonical;
use crate::crypto::{
    hybrid_keypair, hybrid_seal, sign, verify, Digest32, HybridPrivateKey, HybridPublicKey, Id16,
    VerifyingKeyBytes,
};
use crate::envelope;
use crate::pipeline::TransformConfig;
use crate::policy::{self, AccessPolicy, MatchError};
use crate::rng::SeededRandomness;

const BUNDLE_DOMAIN: &str = "cfc/ledger/key-bundle/v1";
/// Info string for the authorize-path rewrap; the transform opens the
/// rewrapped key with its request nonce as associated data.
pub const REWRAP_INFO: &[u8] = b"cfc/rewrapped-data-key/v1";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("key id is unknown or erased")]
    UnknownKey,
    #[error("key has expired")]
    KeyExpired,
    #[error("supplied policy does not match the digest bound to the blob")]
    PolicyDigestMismatch,
    #[error("transform evidence rejected: {0}")]
    BadEvidence(String),
    #[error("no policy edge admits this transform from the source node")]
    NoMatchingEdge,
    #[error("policy constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("ambiguous policy match: {0}")]
    AmbiguousEdge(String),
    #[error("usage limit reached for this blob and edge")]
    BudgetExhausted,
    #[error("nonce was already used for this blob and edge")]
    NonceReplay,
    #[error("wrapped data key failed to unwrap")]
    UnwrapFailure,
}

impl LedgerError {
    /// Stable label for denial statistics.
    pub fn cause(&self) -> &'static str {
        match self {
            LedgerError::UnknownKey => "unknown_key",
            LedgerError::KeyExpired => "key_expired",
            LedgerError::PolicyDigestMismatch => "policy_digest_mismatch",
            LedgerError::BadEvidence(_) => "bad_evidence",
            LedgerError::NoMatchingEdge => "no_matching_edge",
            LedgerError::ConstraintViolation(_) => "constraint_violation",
            LedgerError::AmbiguousEdge(_) => "ambiguous_edge",
            LedgerError::BudgetExhausted => "budget_exhausted",
            LedgerError::NonceReplay => "nonce_replay",
            LedgerError::UnwrapFailure => "unwrap_failure",
        }
    }
}

/// Signed advertisement of one rotating ledger key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyBundle {
    pub key_id: Id16,
    #[serde(with = "crate::encoding::b64vec")]
    pub public_key: Vec<u8>,
    pub issued_at: u64,
    pub expiration: u64,
    #[serde(with = "crate::encoding::b64arr")]
    pub signature: [u8; 64],
}

#[derive(Serialize)]
struct BundleStatement<'a> {
    key_id: Id16,
    #[serde(with = "crate::encoding::b64vec")]
    public_key: &'a [u8],
    issued_at: u64,
    expiration: u64,
}

impl PublicKeyBundle {
    pub fn verify(&self, ledger_app_signing_key: &VerifyingKeyBytes) -> bool {
        let statement = BundleStatement {
            key_id: self.key_id,
            public_key: &self.public_key,
            issued_at: self.issued_at,
            expiration: self.expiration,
        };
        let Ok(message) = canonical::to_bytes(&statement) else {
            return false;
        };
        verify(&ledger_app_signing_key.0, BUNDLE_DOMAIN, &message, &self.signature)
    }
}

/// Everything a transform must present to get a blob's data key released.
/// There is deliberately no payload field: the ledger never touches
/// ciphertexts, so authorization cost is independent of blob size.
#[derive(Debug, Clone)]
pub struct AuthorizeRequest {
    pub ledger_key_id: Id16,
    pub blob_id: Id16,
    pub policy_digest: Digest32,
    pub encapsulated_key: Vec<u8>,
    pub wrapped_data_key: Vec<u8>,
    /// Full policy; the ledger recomputes and matches its digest.
    pub policy: AccessPolicy,
    pub src_node: u32,
    pub evidence: AttestationEvidence,
    pub config: TransformConfig,
    /// Chosen by the transform, never reused by it.
    pub nonce: Id16,
    pub recipient_public_key: Vec<u8>,
}

/// The data key, re-encrypted to the transform's recipient key with the
/// request nonce bound as associated data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewrappedKey {
    pub encapsulated: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub nonce: Id16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerIdentity {
    pub evidence: AttestationEvidence,
}

/// Debug view: counters and key/access summaries, no private material.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerDump {
    pub clock_ms: u64,
    pub authorizations: u64,
    pub denials_by_cause: BTreeMap<String, u64>,
    pub erased_keys: u64,
    pub clock_regressions: u64,
    pub keys: Vec<KeySummary>,
    pub access_records: Vec<AccessSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySummary {
    pub key_id: Id16,
    pub issued_at: u64,
    pub expiration: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessSummary {
    pub key_id: Id16,
    pub blob_id: Id16,
    pub edge_id: String,
    pub access_count: u32,
}

pub struct LedgerConfig {
    /// Acceptance policy the ledger applies to transform evidence.
    pub transform_reference_values: ReferenceValues,
}

// ---------------------------------------------------------------------------
// Actor

enum Command {
    CreateKey { now: u64, ttl_ms: u64, reply: mpsc::SyncSender<PublicKeyBundle> },
    Authorize {
        request: Box<AuthorizeRequest>,
        now: u64,
        reply: mpsc::SyncSender<Result<RewrappedKey, LedgerError>>,
    },
    AdvanceTime { now: u64, reply: mpsc::SyncSender<Vec<Id16>> },
    Restart { reply: mpsc::SyncSender<()> },
    Describe { reply: mpsc::SyncSender<LedgerIdentity> },
    Dump { reply: mpsc::SyncSender<LedgerDump> },
}

/// Cloneable handle; every call funnels into the single ledger thread.
#[derive(Clone)]
pub struct LedgerHandle {
    commands: mpsc::Sender<Command>,
}

pub struct Ledger;

impl Ledger {
    pub fn spawn(
        config: LedgerConfig,
        hardware_root: &HardwareRoot,
        rng: SeededRandomness,
    ) -> LedgerHandle {
        let (tx, rx) = mpsc::channel::<Command>();
        let root = hardware_root.clone();
        thread::Builder::new()
            .name("cfc-ledger".into())
            .spawn(move || {
                let mut state = LedgerState::fresh(config, root, rng);
                while let Ok(command) = rx.recv() {
                    state.handle(command);
                }
            })
            .expect("ledger thread spawns");
        LedgerHandle { commands: tx }
    }
}

impl LedgerHandle {
    fn call<T>(&self, build: impl FnOnce(mpsc::SyncSender<T>) -> Command) -> T {
        let (reply_tx, reply_rx) = mpsc::sync_channel(1);
        self.commands.send(build(reply_tx)).expect("ledger thread is alive");
        reply_rx.recv().expect("ledger thread replies")
    }

    /// Generates a fresh TTL-bounded keypair; concurrently valid keys are
    /// permitted (rotation).
    pub fn create_key(&self, now: u64, ttl_ms: u64) -> PublicKeyBundle {
        self.call(|reply| Command::CreateKey { now, ttl_ms, reply })
    }

    pub fn authorize_access(
        &self,
        request: AuthorizeRequest,
        now: u64,
    ) -> Result<RewrappedKey, LedgerError> {
        self.call(|reply| Command::Authorize { request: Box::new(request), now, reply })
    }

    /// Feeds a clock reading; returns the ids of keys erased by expiry.
    pub fn advance_time(&self, now: u64) -> Vec<Id16> {
        self.call(|reply| Command::AdvanceTime { now, reply })
    }

    /// Wipes all state, as a process restart would. Previously issued
    /// bundles become unusable and all data wrapped under them unreadable.
    pub fn restart(&self) {
        self.call(|reply| Command::Restart { reply })
    }

    pub fn describe(&self) -> LedgerIdentity {
        self.call(|reply| Command::Describe { reply })
    }

    pub fn dump(&self) -> LedgerDump {
        self.call(|reply| Command::Dump { reply })
    }
}

// ---------------------------------------------------------------------------
// State machine

struct KeyRecord {
    private: HybridPrivateKey,
    issued_at: u64,
    expiration: u64,
}

#[derive(Default)]
struct AccessEntry {
    count: u32,
    nonces: HashSet<Id16>,
}

struct LedgerState {
    root: HardwareRoot,
    transform_rv: ReferenceValues,
    rng: SeededRandomness,
    app_signing: SigningKey,
    evidence: AttestationEvidence,
    clock_ms: u64,
    keys: HashMap<Id16, KeyRecord>,
    access: HashMap<(Id16, Id16, String), AccessEntry>,
    authorizations: u64,
    denials: BTreeMap<String, u64>,
    erased_keys: u64,
    clock_regressions: u64,
}

impl LedgerState {
    fn fresh(config: LedgerConfig, root: HardwareRoot, mut rng: SeededRandomness) -> Self {
        let app_signing = SigningKey::generate(&mut rng);
        let (_, app_encryption) = hybrid_keypair(&mut rng);
        let chain = MeasurementChain {
            firmware_digest: measurements::firmware(),
            kernel_digest: measurements::kernel(),
            application_digest: measurements::ledger_application(),
            config_digest: canonical::digest(&config.transform_reference_values)
                .expect("reference values serialize"),
        };
        let app_keys = AppPublicKeys {
            signing: VerifyingKeyBytes::of(&app_signing.verifying_key()),
            encryption: app_encryption.to_bytes(),
        };
        let evidence = generate_evidence(&chain, &app_keys, &root, &mut rng);
        Self {
            root,
            transform_rv: config.transform_reference_values,
            rng,
            app_signing,
            evidence,
            clock_ms: 0,
            keys: HashMap::new(),
            access: HashMap::new(),
            authorizations: 0,
            denials: BTreeMap::new(),
            erased_keys: 0,
            clock_regressions: 0,
        }
    }

    fn handle(&mut self, command: Command) {
        match command {
            Command::CreateKey { now, ttl_ms, reply } => {
                let bundle = self.create_key(now, ttl_ms);
                let _ = reply.send(bundle);
            }
            Command::Authorize { request, now, reply } => {
                let outcome = self.authorize(&request, now);
                match &outcome {
                    Ok(_) => self.authorizations += 1,
                    Err(e) => {
                        *self.denials.entry(e.cause().to_string()).or_insert(0) += 1;
                    }
                }
                let _ = reply.send(outcome);
            }
            Command::AdvanceTime { now, reply } => {
                let erased = self.advance_time(now);
                let _ = reply.send(erased);
            }
            Command::Restart { reply } => {
                let config =
                    LedgerConfig { transform_reference_values: self.transform_rv.clone() };
                *self = LedgerState::fresh(config, self.root.clone(), self.rng.fork("restart"));
                let _ = reply.send(());
            }
            Command::Describe { reply } => {
                let _ = reply.send(LedgerIdentity { evidence: self.evidence.clone() });
            }
            Command::Dump { reply } => {
                let _ = reply.send(self.dump());
            }
        }
    }

    /// Monotonic clamp: readings never move the clock backwards; regressions
    /// are absorbed into a counter.
    fn observe_clock(&mut self, now: u64) -> u64 {
        if now < self.clock_ms {
            self.clock_regressions += 1;
        } else {
            self.clock_ms = now;
        }
        self.clock_ms
    }

    fn create_key(&mut self, now: u64, ttl_ms: u64) -> PublicKeyBundle {
        let now = self.observe_clock(now);
        let (private, public) = hybrid_keypair(&mut self.rng);
        let public_bytes = public.to_bytes();
        let key_id = Id16::random(&mut self.rng);
        let expiration = now.saturating_add(ttl_ms.max(1));
        self.keys.insert(key_id, KeyRecord { private, issued_at: now, expiration });
        let statement =
            BundleStatement { key_id, public_key: &public_bytes, issued_at: now, expiration };
        let message = canonical::to_bytes(&statement).expect("bundle statement serializes");
        PublicKeyBundle {
            key_id,
            public_key: public_bytes,
            issued_at: now,
            expiration,
            signature: sign(&self.app_signing, BUNDLE_DOMAIN, &message),
        }
    }

    fn authorize(
        &mut self,
        request: &AuthorizeRequest,
        now: u64,
    ) -> Result<RewrappedKey, LedgerError> {
        let now = self.observe_clock(now);
        let record = self.keys.get(&request.ledger_key_id).ok_or(LedgerError::UnknownKey)?;
        if now >= record.expiration {
            return Err(LedgerError::KeyExpired);
        }

        // An invalid policy has no canonical digest, so it cannot be the
        // policy the uploader bound.
        let digest = policy::canonical_digest(&request.policy)
            .map_err(|_| LedgerError::PolicyDigestMismatch)?;
        if digest != request.policy_digest {
            return Err(LedgerError::PolicyDigestMismatch);
        }

        let identity = verify_evidence(&request.evidence, &self.transform_rv, &[])
            .map_err(|e| LedgerError::BadEvidence(e.to_string()))?;
        let config_digest = request
            .config
            .digest()
            .map_err(|e| LedgerError::BadEvidence(format!("unserializable config: {e}")))?;
        if config_digest != identity.chain.config_digest {
            return Err(LedgerError::BadEvidence(
                "config digest does not match the measured configuration".into(),
            ));
        }
        if request.recipient_public_key != identity.app_public_keys.encryption {
            return Err(LedgerError::BadEvidence(
                "recipient key is not the evidence-bound encryption key".into(),
            ));
        }

        let edge = policy::match_edge(
            &request.policy,
            request.src_node,
            &identity,
            &request.config.bounds(),
        )
        .map_err(|e| match e {
            MatchError::NoMatchingEdge => LedgerError::NoMatchingEdge,
            MatchError::ConstraintViolation { bound, .. } => {
                LedgerError::ConstraintViolation(bound)
            }
            MatchError::AmbiguousEdge(ids) => LedgerError::AmbiguousEdge(ids.join(", ")),
        })?;
        let usage_limit = edge.usage_limit;
        let access_key = (request.ledger_key_id, request.blob_id, edge.edge_id.clone());

        let entry = self.access.entry(access_key.clone()).or_default();
        if entry.count >= usage_limit {
            return Err(LedgerError::BudgetExhausted);
        }
        if entry.nonces.contains(&request.nonce) {
            return Err(LedgerError::NonceReplay);
        }

        let data_key = envelope::unwrap_wrapped_key(
            &request.encapsulated_key,
            &request.wrapped_data_key,
            request.policy_digest,
            &record.private,
        )
        .map_err(|_| LedgerError::UnwrapFailure)?;
        let recipient = HybridPublicKey::from_bytes(&request.recipient_public_key)
            .map_err(|e| LedgerError::BadEvidence(format!("malformed recipient key: {e}")))?;
        let sealed =
            hybrid_seal(&recipient, REWRAP_INFO, &request.nonce.0, &data_key.0, &mut self.rng)
                .map_err(|_| LedgerError::UnwrapFailure)?;

        // Budget and nonce commit only together with a success reply; failed
        // authorizations consume nothing.
        let entry = self.access.get_mut(&access_key).expect("entry inserted above");
        entry.count += 1;
        entry.nonces.insert(request.nonce);
        Ok(RewrappedKey {
            encapsulated: sealed.encapsulated,
            ciphertext: sealed.ciphertext,
            nonce: request.nonce,
        })
    }

    fn advance_time(&mut self, now: u64) -> Vec<Id16> {
        let now = self.observe_clock(now);
        let mut erased: Vec<Id16> = self
            .keys
            .iter()
            .filter(|(_, record)| record.expiration <= now)
            .map(|(id, _)| *id)
            .collect();
        erased.sort();
        for key_id in &erased {
            self.keys.remove(key_id);
        }
        // Access records and nonce sets are colocated with the key record
        // and die with it.
        self.access.retain(|(key_id, _, _), _| !erased.contains(key_id));
        self.erased_keys += erased.len() as u64;
        erased
    }

    fn dump(&self) -> LedgerDump {
        let mut keys: Vec<KeySummary> = self
            .keys
            .iter()
            .map(|(id, record)| KeySummary {
                key_id: *id,
                issued_at: record.issued_at,
                expiration: record.expiration,
            })
            .collect();
        keys.sort_by_key(|k| k.key_id);
        let mut access_records: Vec<AccessSummary> = self
            .access
            .iter()
            .map(|((key_id, blob_id, edge_id), entry)| AccessSummary {
                key_id: *key_id,
                blob_id: *blob_id,
                edge_id: edge_id.clone(),
                access_count: entry.count,
            })
            .collect();
        access_records
            .sort_by(|a, b| (a.key_id, a.blob_id, &a.edge_id).cmp(&(b.key_id, b.blob_id, &b.edge_id)));
        LedgerDump {
            clock_ms: self.clock_ms,
            authorizations: self.authorizations,
            denials_by_cause: self.denials.clone(),
            erased_keys: self.erased_keys,
            clock_regressions: self.clock_regressions,
            keys,
            access_records,
        }
    }
}
