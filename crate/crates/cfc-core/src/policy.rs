//! Data access policies: directed graphs of permitted transforms.
//!
//! Node 0 is the uploaded-data stage; each edge names the transform binary
//! digest allowed to consume data at its source node, the privacy bounds
//! its configuration must satisfy, and how many times the edge may be used
//! per blob. The canonical digest of a policy is what uploads bind to, so
//! canonicalization (sorted keys, sorted edges, normalized numbers) is
//! normative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::VerifiedIdentity;
use crate::canonical;
use crate::crypto::Digest32;

pub type PolicyDigest = Digest32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessPolicy {
    /// Human-readable policy name.
    pub name: String,
    /// Data-stage names; index 0 is the client upload stage.
    pub nodes: Vec<String>,
    pub edges: Vec<PolicyEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEdge {
    pub edge_id: String,
    pub src_node: u32,
    pub dst_node: u32,
    /// Application-layer measurement of the only binary this edge admits.
    pub required_application_digest: Digest32,
    #[serde(default)]
    pub constraints: EdgeConstraints,
    pub usage_limit: u32,
    /// Terminal edges release unencrypted (DP-protected) output.
    #[serde(default)]
    pub terminal: bool,
}

/// Closed set of named bounds; unknown keys fail at parse time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConstraints {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_max: Option<f64>,
}

/// Privacy-relevant values a transform declares in its attested config.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConfigBounds {
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy graph contains a cycle")]
    CyclicPolicy,
    #[error("edge {edge_id} references a missing node")]
    DanglingEdge { edge_id: String },
    #[error("bad constraint: {0}")]
    BadConstraint(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("no edge admits this transform digest from the source node")]
    NoMatchingEdge,
    #[error("edge {edge_id} violates bound {bound}")]
    ConstraintViolation { edge_id: String, bound: String },
    #[error("ambiguous match: edges {0:?} all admit the transform")]
    AmbiguousEdge(Vec<String>),
}

/// Structural and range validation: DAG rooted at node 0, valid node
/// references, sane constraint ranges, unique edge ids.
pub fn validate(policy: &AccessPolicy) -> Result<(), PolicyError> {
    let node_count = policy.nodes.len() as u32;
    if node_count == 0 {
        return Err(PolicyError::BadConstraint("policy has no nodes".into()));
    }
    let mut seen_ids = std::collections::BTreeSet::new();
    for edge in &policy.edges {
        if edge.src_node >= node_count || edge.dst_node >= node_count {
            return Err(PolicyError::DanglingEdge { edge_id: edge.edge_id.clone() });
        }
        if !seen_ids.insert(&edge.edge_id) {
            return Err(PolicyError::BadConstraint(format!("duplicate edge_id {}", edge.edge_id)));
        }
        if edge.usage_limit < 1 {
            return Err(PolicyError::BadConstraint(format!(
                "edge {}: usage_limit must be >= 1",
                edge.edge_id
            )));
        }
        if let Some(eps) = edge.constraints.epsilon_max {
            if !eps.is_finite() || eps < 0.0 {
                return Err(PolicyError::BadConstraint(format!(
                    "edge {}: epsilon_max {eps} out of range",
                    edge.edge_id
                )));
            }
        }
        if let Some(delta) = edge.constraints.delta_max {
            if !delta.is_finite() || !(0.0..=1.0).contains(&delta) {
                return Err(PolicyError::BadConstraint(format!(
                    "edge {}: delta_max {delta} out of range",
                    edge.edge_id
                )));
            }
        }
        if edge.terminal
            && (edge.constraints.epsilon_max.is_none() || edge.constraints.delta_max.is_none())
        {
            return Err(PolicyError::BadConstraint(format!(
                "edge {}: terminal edges must carry epsilon_max and delta_max",
                edge.edge_id
            )));
        }
    }
    check_acyclic(policy)
}

fn check_acyclic(policy: &AccessPolicy) -> Result<(), PolicyError> {
    // Kahn's algorithm over node indices.
    let n = policy.nodes.len();
    let mut in_degree = vec![0usize; n];
    let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); n];
    for edge in &policy.edges {
        outgoing[edge.src_node as usize].push(edge.dst_node as usize);
        in_degree[edge.dst_node as usize] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| in_degree[i] == 0).collect();
    let mut visited = 0;
    while let Some(node) = ready.pop() {
        visited += 1;
        for &next in &outgoing[node] {
            in_degree[next] -= 1;
            if in_degree[next] == 0 {
                ready.push(next);
            }
        }
    }
    if visited == n {
        Ok(())
    } else {
        Err(PolicyError::CyclicPolicy)
    }
}

/// SHA-256 of the canonical serialization. Edge order in the input text is
/// not semantic, so edges are sorted by their own canonical bytes first.
pub fn canonical_digest(policy: &AccessPolicy) -> Result<PolicyDigest, PolicyError> {
    validate(policy)?;
    let mut tree = serde_json::to_value(policy)
        .map_err(|e| PolicyError::BadConstraint(format!("unserializable policy: {e}")))?;
    if let Some(edges) = tree.get_mut("edges").and_then(|v| v.as_array_mut()) {
        edges.sort_by_cached_key(|e| serde_json::to_vec(e).expect("edge value serializes"));
    }
    canonical::digest(&tree)
        .map_err(|e| PolicyError::BadConstraint(format!("non-canonical policy: {e}")))
}

/// Finds the unique edge from `src_node` that admits the verified transform:
/// the edge's required digest must equal the identity's application digest
/// and every declared bound must dominate the transform's config.
pub fn match_edge<'p>(
    policy: &'p AccessPolicy,
    src_node: u32,
    transform_identity: &VerifiedIdentity,
    transform_config: &ConfigBounds,
) -> Result<&'p PolicyEdge, MatchError> {
    let app_digest = transform_identity.chain.application_digest;
    let candidates: Vec<&PolicyEdge> = policy
        .edges
        .iter()
        .filter(|e| e.src_node == src_node && e.required_application_digest == app_digest)
        .collect();
    if candidates.is_empty() {
        return Err(MatchError::NoMatchingEdge);
    }
    let mut admitted = Vec::new();
    let mut first_violation: Option<MatchError> = None;
    for edge in candidates {
        match check_bounds(edge, transform_config) {
            Ok(()) => admitted.push(edge),
            Err(violation) => {
                first_violation.get_or_insert(violation);
            }
        }
    }
    match admitted.len() {
        1 => Ok(admitted[0]),
        0 => Err(first_violation.expect("at least one candidate was checked")),
        _ => Err(MatchError::AmbiguousEdge(
            admitted.iter().map(|e| e.edge_id.clone()).collect(),
        )),
    }
}

fn check_bounds(edge: &PolicyEdge, config: &ConfigBounds) -> Result<(), MatchError> {
    let violation = |bound: &str| MatchError::ConstraintViolation {
        edge_id: edge.edge_id.clone(),
        bound: bound.to_string(),
    };
    if let Some(max) = edge.constraints.epsilon_max {
        match config.epsilon {
            Some(eps) if eps <= max => {}
            _ => return Err(violation("epsilon_max")),
        }
    }
    if let Some(max) = edge.constraints.delta_max {
        match config.delta {
            Some(delta) if delta <= max => {}
            _ => return Err(violation("delta_max")),
        }
    }
    Ok(())
}
