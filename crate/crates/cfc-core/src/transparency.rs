//! Append-only Merkle-tree log of endorsements.
//!
//! RFC 6962 structure: leaves hash as `SHA-256(0x00 || canonical
//! endorsement bytes)`, interior nodes as `SHA-256(0x01 || left || right)`,
//! and a tree of size n splits at the largest power of two strictly below
//! n. Inclusion and consistency verification follow the iterative
//! algorithms so they stay independent of the recursive proof generation.

use ed25519_dalek::SigningKey;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::attestation::Endorsement;
use crate::canonical;
use crate::crypto::{sign, verify, Digest32, Id16, VerifyingKeyBytes};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;
const HEAD_DOMAIN: &str = "cfc/transparency/tree-head/v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransparencyError {
    #[error("index {index} out of range for tree size {tree_size}")]
    OutOfRange { index: u64, tree_size: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: u64,
    pub endorsement: Endorsement,
    pub leaf_hash: Digest32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTreeHead {
    pub tree_size: u64,
    pub root_hash: Digest32,
    #[serde(with = "crate::encoding::b64arr")]
    pub signature: [u8; 64],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub audit_path: Vec<Digest32>,
}

/// Exported view of the log for offline auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSnapshot {
    pub log_public_key: VerifyingKeyBytes,
    pub entries: Vec<LogEntry>,
    pub head: SignedTreeHead,
}

#[derive(Serialize)]
struct HeadStatement<'a> {
    tree_size: u64,
    root_hash: &'a Digest32,
}

pub fn leaf_hash(endorsement: &Endorsement) -> Digest32 {
    let bytes = canonical::to_bytes(&endorsement.core()).expect("endorsement serializes");
    let mut hasher = Sha256::new();
    hasher.update([LEAF_PREFIX]);
    hasher.update(&bytes);
    Digest32(hasher.finalize().into())
}

fn node_hash(left: &Digest32, right: &Digest32) -> Digest32 {
    let mut hasher = Sha256::new();
    hasher.update([NODE_PREFIX]);
    hasher.update(left.0);
    hasher.update(right.0);
    Digest32(hasher.finalize().into())
}

fn empty_root() -> Digest32 {
    Digest32(Sha256::digest([]).into())
}

/// Largest power of two strictly less than n (n >= 2).
fn split_point(n: u64) -> u64 {
    let mut k = 1u64;
    while k * 2 < n {
        k *= 2;
    }
    k
}

/// Merkle tree head over a slice of leaf hashes.
fn merkle_root(leaves: &[Digest32]) -> Digest32 {
    match leaves.len() {
        0 => empty_root(),
        1 => leaves[0],
        n => {
            let k = split_point(n as u64) as usize;
            node_hash(&merkle_root(&leaves[..k]), &merkle_root(&leaves[k..]))
        }
    }
}

fn audit_path(index: u64, leaves: &[Digest32]) -> Vec<Digest32> {
    if leaves.len() <= 1 {
        return Vec::new();
    }
    let k = split_point(leaves.len() as u64) as usize;
    if (index as usize) < k {
        let mut path = audit_path(index, &leaves[..k]);
        path.push(merkle_root(&leaves[k..]));
        path
    } else {
        let mut path = audit_path(index - k as u64, &leaves[k..]);
        path.push(merkle_root(&leaves[..k]));
        path
    }
}

fn consistency_subproof(m: u64, leaves: &[Digest32], complete: bool) -> Vec<Digest32> {
    let n = leaves.len() as u64;
    if m == n {
        return if complete { Vec::new() } else { vec![merkle_root(leaves)] };
    }
    let k = split_point(n);
    if m <= k {
        let mut path = consistency_subproof(m, &leaves[..k as usize], complete);
        path.push(merkle_root(&leaves[k as usize..]));
        path
    } else {
        let mut path = consistency_subproof(m - k, &leaves[k as usize..], false);
        path.push(merkle_root(&leaves[..k as usize]));
        path
    }
}

pub struct TransparencyLog {
    signing: SigningKey,
    entries: Vec<LogEntry>,
    leaf_hashes: Vec<Digest32>,
}

impl TransparencyLog {
    /// A fresh log with its own operator key, distinct from any
    /// service-provider key.
    pub fn new(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self { signing: SigningKey::generate(rng), entries: Vec::new(), leaf_hashes: Vec::new() }
    }

    pub fn public_key(&self) -> VerifyingKeyBytes {
        VerifyingKeyBytes::of(&self.signing.verifying_key())
    }

    pub fn size(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Appends an endorsement and returns its index with the new head.
    pub fn append(&mut self, endorsement: &Endorsement) -> (u64, SignedTreeHead) {
        let index = self.size();
        let leaf = leaf_hash(endorsement);
        self.entries.push(LogEntry {
            index,
            endorsement: endorsement.core(),
            leaf_hash: leaf,
        });
        self.leaf_hashes.push(leaf);
        (index, self.signed_head_at(self.size()).expect("current size is in range"))
    }

    /// Head for any historical tree size (Ed25519 signing is deterministic,
    /// so re-signing a past head reproduces identical bytes).
    pub fn signed_head_at(&self, tree_size: u64) -> Result<SignedTreeHead, TransparencyError> {
        if tree_size > self.size() {
            return Err(TransparencyError::OutOfRange { index: tree_size, tree_size: self.size() });
        }
        let root_hash = merkle_root(&self.leaf_hashes[..tree_size as usize]);
        let statement = HeadStatement { tree_size, root_hash: &root_hash };
        let message = canonical::to_bytes(&statement).expect("head statement serializes");
        Ok(SignedTreeHead {
            tree_size,
            root_hash,
            signature: sign(&self.signing, HEAD_DOMAIN, &message),
        })
    }

    pub fn head(&self) -> SignedTreeHead {
        self.signed_head_at(self.size()).expect("own size is in range")
    }

    pub fn prove_inclusion(
        &self,
        index: u64,
        tree_size: u64,
    ) -> Result<InclusionProof, TransparencyError> {
        if index >= tree_size || tree_size > self.size() {
            return Err(TransparencyError::OutOfRange { index, tree_size });
        }
        Ok(InclusionProof {
            leaf_index: index,
            tree_size,
            audit_path: audit_path(index, &self.leaf_hashes[..tree_size as usize]),
        })
    }

    pub fn prove_consistency(
        &self,
        old_size: u64,
        new_size: u64,
    ) -> Result<Vec<Digest32>, TransparencyError> {
        if old_size > new_size || new_size > self.size() {
            return Err(TransparencyError::OutOfRange { index: old_size, tree_size: new_size });
        }
        if old_size == new_size || old_size == 0 {
            return Ok(Vec::new());
        }
        Ok(consistency_subproof(old_size, &self.leaf_hashes[..new_size as usize], true))
    }

    /// Every entry endorsed by the given signer key id, in log order. This
    /// is the auditor's view of all processing steps that signer approved.
    pub fn monitor_by_signer(&self, signer_key_id: Id16) -> Vec<&LogEntry> {
        self.entries
            .iter()
            .filter(|e| e.endorsement.signer_key_id == signer_key_id)
            .collect()
    }

    pub fn snapshot(&self) -> LogSnapshot {
        LogSnapshot {
            log_public_key: self.public_key(),
            entries: self.entries.clone(),
            head: self.head(),
        }
    }
}

/// Verifies the operator signature on a head.
pub fn verify_head(head: &SignedTreeHead, log_public_key: &VerifyingKeyBytes) -> bool {
    let statement = HeadStatement { tree_size: head.tree_size, root_hash: &head.root_hash };
    let Ok(message) = canonical::to_bytes(&statement) else {
        return false;
    };
    verify(&log_public_key.0, HEAD_DOMAIN, &message, &head.signature)
}

/// True iff the endorsement is a leaf of the tree the head commits to.
pub fn verify_inclusion(
    endorsement: &Endorsement,
    proof: &InclusionProof,
    head: &SignedTreeHead,
) -> bool {
    proof.tree_size == head.tree_size
        && verify_inclusion_of_leaf(leaf_hash(endorsement), proof, head.root_hash)
}

fn verify_inclusion_of_leaf(leaf: Digest32, proof: &InclusionProof, root: Digest32) -> bool {
    if proof.leaf_index >= proof.tree_size {
        return false;
    }
    let mut fn_ = proof.leaf_index;
    let mut sn = proof.tree_size - 1;
    let mut r = leaf;
    for c in &proof.audit_path {
        if sn == 0 {
            return false;
        }
        if fn_ & 1 == 1 || fn_ == sn {
            r = node_hash(c, &r);
            if fn_ & 1 == 0 {
                while fn_ & 1 == 0 && fn_ != 0 {
                    fn_ >>= 1;
                    sn >>= 1;
                }
            }
        } else {
            r = node_hash(&r, c);
        }
        fn_ >>= 1;
        sn >>= 1;
    }
    sn == 0 && r == root
}

/// True iff the new head's tree is an append-only extension of the old
/// head's tree, per the supplied consistency path.
pub fn verify_consistency(
    old_head: &SignedTreeHead,
    new_head: &SignedTreeHead,
    consistency_path: &[Digest32],
) -> bool {
    let (first, second) = (old_head.tree_size, new_head.tree_size);
    if first > second {
        return false;
    }
    if first == second {
        return consistency_path.is_empty() && old_head.root_hash == new_head.root_hash;
    }
    if first == 0 {
        // Any tree extends the empty tree.
        return consistency_path.is_empty() && old_head.root_hash == empty_root();
    }
    let mut path = consistency_path.iter();
    let mut fn_ = first - 1;
    let mut sn = second - 1;
    while fn_ & 1 == 1 {
        fn_ >>= 1;
        sn >>= 1;
    }
    let (mut fr, mut sr) = if fn_ == 0 {
        // `first` is an exact power of two: the old root itself seeds both sides.
        (old_head.root_hash, old_head.root_hash)
    } else {
        let Some(&seed) = path.next() else { return false };
        (seed, seed)
    };
    for &c in path {
        if sn == 0 {
            return false;
        }
        if fn_ & 1 == 1 || fn_ == sn {
            fr = node_hash(&c, &fr);
            sr = node_hash(&c, &sr);
            if fn_ & 1 == 0 {
                while fn_ & 1 == 0 && fn_ != 0 {
                    fn_ >>= 1;
                    sn >>= 1;
                }
            }
        } else {
            sr = node_hash(&sr, &c);
        }
        fn_ >>= 1;
        sn >>= 1;
    }
    sn == 0 && fr == old_head.root_hash && sr == new_head.root_hash
}
