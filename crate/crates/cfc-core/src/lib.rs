//! Desk-scale confidential federated computation runtime.
//!
//! The crate models the full server-side trust chain for private federated
//! analytics: clients wrap uploads with two-layer envelope encryption bound
//! to a data access policy, a stateful key ledger releases data keys only to
//! attested transforms within per-edge usage limits, endorsements are
//! published to an append-only transparency log, and terminal pipeline
//! stages release only differentially private aggregates.
//!
//! TEE hardware is simulated: a software "hardware root" signing key stands
//! in for the real root of trust, and the trusted/untrusted boundary is the
//! type boundary between transform internals and orchestrator-visible
//! values. Everything else (wire formats, policy enforcement, usage
//! accounting, cryptographic erasure, DP calibration) is real.

pub mod aggcore;
pub mod attestation;
pub mod canonical;
pub mod client;
pub mod crypto;
pub mod dpquery;
pub mod encoding;
pub mod envelope;
pub mod ledger;
#[cfg(feature = "testsupport")]
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod transparency;
