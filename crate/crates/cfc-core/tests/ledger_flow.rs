//! Ledger behavior: key lifecycle, every authorize denial path, clock
//! handling, and usage accounting under concurrency.

mod common;

use common::{select_then_dp_policy, TestWorld, DAY_MS, EPOCH_MS, WEEK_MS};

use cfc_core::attestation::verify_evidence;
use cfc_core::envelope::EncryptedBlob;
use cfc_core::ledger::{AuthorizeRequest, LedgerError};
use cfc_core::pipeline::{spawn_transform, TransformConfig, TrustedTransformInstance};
use cfc_core::policy::AccessPolicy;

fn request_for(
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

#[test]
fn created_keys_have_requested_lifetime_and_verifiable_bundles() {
    let world = TestWorld::new([60; 32], true);
    let bundle = world.ledger.create_key(EPOCH_MS, WEEK_MS);
    assert_eq!(bundle.issued_at, EPOCH_MS);
    assert_eq!(bundle.expiration, EPOCH_MS + WEEK_MS);

    let other = world.ledger.create_key(EPOCH_MS, WEEK_MS);
    assert_ne!(bundle.key_id, other.key_id);
    assert_ne!(bundle.public_key, other.public_key);

    // The bundle signature verifies against the app key bound in the
    // ledger's own attestation evidence.
    let identity = verify_evidence(
        &world.ledger.describe().evidence,
        &world.client_rv,
        &[world.ledger_endorsement.clone()],
    )
    .unwrap();
    assert!(bundle.verify(&identity.app_public_keys.signing));
    assert!(other.verify(&identity.app_public_keys.signing));

    // A different ledger's key does not verify the bundle.
    let rogue = TestWorld::new([61; 32], true);
    let rogue_identity = verify_evidence(
        &rogue.ledger.describe().evidence,
        &rogue.client_rv,
        &[rogue.ledger_endorsement.clone()],
    )
    .unwrap();
    assert!(!bundle.verify(&rogue_identity.app_public_keys.signing));
}

#[test]
fn authorize_denial_paths() {
    let mut world = TestWorld::with_policy([62; 32], true, select_then_dp_policy(2));
    let (_, blobs) = world.upload_devices(1);
    let blob = &blobs[0];
    let run = world.histogram_run(vec![]);
    let select_spec = run.plan[0].spec.clone();
    let now = world.now_ms;

    // Unknown key id.
    let mut t = spawn_transform(&select_spec, &world.root, world.rng.fork("t0"));
    let mut req = request_for(blob, &world.policy, 0, &mut t);
    req.ledger_key_id = cfc_core::crypto::Id16([0xee; 16]);
    assert_eq!(world.ledger.authorize_access(req, now).unwrap_err(), LedgerError::UnknownKey);

    // Policy whose digest differs from the one bound to the blob.
    let mut t = spawn_transform(&select_spec, &world.root, world.rng.fork("t1"));
    let mut altered = world.policy.clone();
    altered.edges[0].usage_limit = 7;
    let req = request_for(blob, &altered, 0, &mut t);
    assert_eq!(
        world.ledger.authorize_access(req, now).unwrap_err(),
        LedgerError::PolicyDigestMismatch
    );

    // Invalid policy: also a digest mismatch (it has no canonical digest).
    let mut t = spawn_transform(&select_spec, &world.root, world.rng.fork("t2"));
    let mut invalid = world.policy.clone();
    invalid.edges[0].dst_node = 99;
    let req = request_for(blob, &invalid, 0, &mut t);
    assert_eq!(
        world.ledger.authorize_access(req, now).unwrap_err(),
        LedgerError::PolicyDigestMismatch
    );

    // Evidence signed by an impostor root.
    let mut impostor_rng = world.rng.fork("impostor");
    let impostor = cfc_core::attestation::HardwareRoot::generate(&mut impostor_rng);
    let mut t = spawn_transform(&select_spec, &impostor, world.rng.fork("t3"));
    let req = request_for(blob, &world.policy, 0, &mut t);
    assert!(matches!(
        world.ledger.authorize_access(req, now).unwrap_err(),
        LedgerError::BadEvidence(_)
    ));

    // Recipient key swap: evidence is honest but the request asks for the
    // rewrap to land on a different key.
    let mut t = spawn_transform(&select_spec, &world.root, world.rng.fork("t4"));
    let mut swap_rng = world.rng.fork("swap");
    let (_, foreign) = cfc_core::crypto::hybrid_keypair(&mut swap_rng);
    let mut req = request_for(blob, &world.policy, 0, &mut t);
    req.recipient_public_key = foreign.to_bytes();
    assert!(matches!(
        world.ledger.authorize_access(req, now).unwrap_err(),
        LedgerError::BadEvidence(_)
    ));

    // Transform binary digest on no edge from this node.
    let mut t = spawn_transform(&run.plan[1].spec, &world.root, world.rng.fork("t5"));
    let req = request_for(blob, &world.policy, 0, &mut t);
    assert_eq!(world.ledger.authorize_access(req, now).unwrap_err(), LedgerError::NoMatchingEdge);

    // Constraint violation: an attested DP config over the edge budget.
    let mut greedy_query = world.query.clone();
    greedy_query.epsilon = 2.0;
    let greedy_spec = cfc_core::pipeline::TransformSpec::new(
        TransformConfig::DpHistogram(cfc_core::pipeline::DpHistogramSpec {
            query: greedy_query,
            per_user_function: None,
        }),
        true,
    );
    let mut t = spawn_transform(&greedy_spec, &world.root, world.rng.fork("t6"));
    let req = request_for(blob, &world.policy, 1, &mut t);
    assert_eq!(
        world.ledger.authorize_access(req, now).unwrap_err(),
        LedgerError::ConstraintViolation("epsilon_max".into())
    );

    // Tampered wrapped key fails to unwrap; the failure consumes no budget.
    let mut t = spawn_transform(&select_spec, &world.root, world.rng.fork("t7"));
    let mut req = request_for(blob, &world.policy, 0, &mut t);
    req.wrapped_data_key[0] ^= 1;
    assert_eq!(world.ledger.authorize_access(req, now).unwrap_err(), LedgerError::UnwrapFailure);
    assert!(world
        .ledger
        .dump()
        .access_records
        .iter()
        .all(|r| r.access_count == 0));

    // Budget and nonce interplay under usage_limit = 2: an identical
    // request replays its nonce; a fresh nonce consumes the second use;
    // after that the budget is exhausted.
    let mut t = spawn_transform(&select_spec, &world.root, world.rng.fork("t8"));
    let req = request_for(blob, &world.policy, 0, &mut t);
    world.ledger.authorize_access(req.clone(), now).unwrap();
    assert_eq!(world.ledger.authorize_access(req, now).unwrap_err(), LedgerError::NonceReplay);
    let req = request_for(blob, &world.policy, 0, &mut t);
    world.ledger.authorize_access(req.clone(), now).unwrap();
    let mut exhausted = req.clone();
    exhausted.nonce = t.issue_nonce();
    assert_eq!(
        world.ledger.authorize_access(exhausted, now).unwrap_err(),
        LedgerError::BudgetExhausted
    );
    // An identical replay with the budget gone reports exhaustion, which is
    // what a triangulating data scientist observes.
    assert_eq!(world.ledger.authorize_access(req, now).unwrap_err(), LedgerError::BudgetExhausted);

    let denials = world.ledger.dump().denials_by_cause;
    assert_eq!(denials.get("unknown_key"), Some(&1));
    assert_eq!(denials.get("policy_digest_mismatch"), Some(&2));
    assert_eq!(denials.get("bad_evidence"), Some(&2));
    assert_eq!(denials.get("no_matching_edge"), Some(&1));
    assert_eq!(denials.get("constraint_violation"), Some(&1));
    assert_eq!(denials.get("unwrap_failure"), Some(&1));
    assert_eq!(denials.get("nonce_replay"), Some(&1));
    assert_eq!(denials.get("budget_exhausted"), Some(&2));
}

#[test]
fn expiry_boundary_and_clock_regressions() {
    let mut world = TestWorld::new([63; 32], true);
    let (_, blobs) = world.upload_devices(1);
    let run = world.histogram_run(vec![]);
    let expiration = world.bundle.expiration;

    // now == expiration - 1: still valid.
    let mut t = spawn_transform(&run.plan[0].spec, &world.root, world.rng.fork("a"));
    let req = request_for(&blobs[0], &world.policy, 0, &mut t);
    assert!(world.ledger.authorize_access(req, expiration - 1).is_ok());

    // now == expiration: expired (closed boundary), record not yet swept.
    let mut world2 = TestWorld::new([64; 32], true);
    let (_, blobs2) = world2.upload_devices(1);
    let mut t2 = spawn_transform(&run.plan[0].spec, &world2.root, world2.rng.fork("b"));
    let req = request_for(&blobs2[0], &world2.policy, 0, &mut t2);
    assert_eq!(
        world2.ledger.authorize_access(req, world2.bundle.expiration).unwrap_err(),
        LedgerError::KeyExpired
    );
    // After the sweep the same request reports an unknown key.
    world2.ledger.advance_time(world2.bundle.expiration);
    let req = request_for(&blobs2[0], &world2.policy, 0, &mut t2);
    assert_eq!(
        world2.ledger.authorize_access(req, world2.bundle.expiration).unwrap_err(),
        LedgerError::UnknownKey
    );

    // Clock regressions are clamped and counted, and erase nothing.
    let before = world2.ledger.dump();
    let erased = world2.ledger.advance_time(EPOCH_MS - DAY_MS);
    assert!(erased.is_empty());
    let after = world2.ledger.dump();
    assert_eq!(after.clock_regressions, before.clock_regressions + 1);
    assert_eq!(after.clock_ms, before.clock_ms);
}

#[test]
fn concurrent_authorizations_never_exceed_the_usage_limit() {
    const LIMIT: u32 = 3;
    const THREADS: usize = 8;

    let mut world = TestWorld::with_policy([65; 32], true, select_then_dp_policy(LIMIT));
    let (_, blobs) = world.upload_devices(1);
    let blob = blobs[0].clone();
    let run = world.histogram_run(vec![]);
    let select_spec = run.plan[0].spec.clone();
    let now = world.now_ms;

    let successes = std::sync::atomic::AtomicU32::new(0);
    std::thread::scope(|scope| {
        for i in 0..THREADS {
            let ledger = world.ledger.clone();
            let policy = world.policy.clone();
            let root = world.root.clone();
            let spec = select_spec.clone();
            let blob = blob.clone();
            let successes = &successes;
            let mut rng = world.rng.fork(&format!("racer/{i}"));
            scope.spawn(move || {
                let mut instance = spawn_transform(&spec, &root, rng.fork("instance"));
                let request = request_for(&blob, &policy, 0, &mut instance);
                if ledger.authorize_access(request, now).is_ok() {
                    successes.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                }
            });
        }
    });

    assert_eq!(successes.load(std::sync::atomic::Ordering::SeqCst), LIMIT);
    let dump = world.ledger.dump();
    assert_eq!(dump.authorizations, u64::from(LIMIT));
    assert!(dump.access_records.iter().all(|r| r.access_count <= LIMIT));
}
