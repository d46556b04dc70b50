//! Independent reference implementations used only by tests.
//!
//! These recompute the aggregation results from scratch with different data
//! structures and code paths than the production modules, so tests can
//! compare two derivations of the same contract. Summation follows the same
//! normative ordering (sorted composite key, then client id) because the
//! ordering is part of the reproducibility contract, not an implementation
//! detail.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::aggcore::{ClientTable, TableRow};
use crate::dpquery::DpQueryConfig;

/// Noise-off release oracle: per-client clip (l_inf clamp, l_1/l_2
/// rescale), cross-client sum, and threshold drop. Callers must ensure each
/// client has at most `max_groups_contributed` distinct keys; the random
/// subset step is not modeled here.
pub fn clip_and_sum_release(
    clients: &[(String, ClientTable)],
    query: &DpQueryConfig,
) -> Vec<TableRow> {
    let columns = query.aggregations.len();
    let mut contributions: Vec<(Vec<String>, String, Vec<f64>)> = Vec::new();
    for (client_id, table) in clients {
        let local = dedup(table);
        assert!(
            local.len() <= query.max_groups_contributed as usize,
            "oracle requires per-client key count within the l0 bound"
        );
        let bounded = clip(local, query);
        for (key, values) in bounded {
            contributions.push((key, client_id.clone(), values));
        }
    }
    contributions.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));

    let mut sums: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for (key, _, values) in contributions {
        match sums.iter_mut().find(|(k, _)| *k == key) {
            Some((_, acc)) => {
                for j in 0..columns {
                    acc[j] += values[j];
                }
            }
            None => sums.push((key, values)),
        }
    }
    sums.sort_by(|a, b| a.0.cmp(&b.0));

    let thresholds = release_thresholds(query);
    sums.into_iter()
        .filter(|(_, values)| values.iter().zip(&thresholds).all(|(v, t)| v.abs() >= *t))
        .map(|(key, values)| TableRow { key, values })
        .collect()
}

fn dedup(table: &ClientTable) -> Vec<(Vec<String>, Vec<f64>)> {
    let mut local: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for row in &table.rows {
        match local.iter_mut().find(|(k, _)| *k == row.key) {
            Some((_, acc)) => {
                for (j, v) in row.values.iter().enumerate() {
                    acc[j] += v;
                }
            }
            None => local.push((row.key.clone(), row.values.clone())),
        }
    }
    // Sorted iteration keeps norm accumulation order identical to the
    // production path.
    local.sort_by(|a, b| a.0.cmp(&b.0));
    local
}

fn clip(
    mut local: Vec<(Vec<String>, Vec<f64>)>,
    query: &DpQueryConfig,
) -> Vec<(Vec<String>, Vec<f64>)> {
    for (j, agg) in query.aggregations.iter().enumerate() {
        for (_, values) in local.iter_mut() {
            if values[j] > agg.l_inf {
                values[j] = agg.l_inf;
            } else if values[j] < -agg.l_inf {
                values[j] = -agg.l_inf;
            }
        }
        if let Some(l1) = agg.l_1 {
            let mut norm = 0.0;
            for (_, values) in local.iter() {
                norm += values[j].abs();
            }
            if norm > l1 {
                let scale = l1 / norm;
                for (_, values) in local.iter_mut() {
                    values[j] *= scale;
                }
            }
        }
        if let Some(l2) = agg.l_2 {
            let mut sumsq = 0.0;
            for (_, values) in local.iter() {
                sumsq += values[j] * values[j];
            }
            let norm = sumsq.sqrt();
            if norm > l2 {
                let scale = l2 / norm;
                for (_, values) in local.iter_mut() {
                    values[j] *= scale;
                }
            }
        }
    }
    local
}

/// Per-column release thresholds, recomputed from the query parameters:
/// per-column budget split, L1/L2 sensitivities, lower-variance mechanism,
/// and tail quantile at delta_threshold / l0 above l_inf.
pub fn release_thresholds(query: &DpQueryConfig) -> Vec<f64> {
    let p = query.aggregations.len() as f64;
    let l0 = query.max_groups_contributed as f64;
    let eps_j = query.epsilon / p;
    let delta_half = query.delta / (2.0 * p);
    query
        .aggregations
        .iter()
        .map(|agg| {
            let sens_l1 = match agg.l_1 {
                Some(l1) if l1 < l0 * agg.l_inf => l1,
                _ => l0 * agg.l_inf,
            };
            let sens_l2 = match agg.l_2 {
                Some(l2) if l2 < l0.sqrt() * agg.l_inf => l2,
                _ => l0.sqrt() * agg.l_inf,
            };
            let b = sens_l1 / eps_j;
            let laplace_threshold = agg.l_inf + b * (l0 / (2.0 * delta_half)).ln();
            if eps_j < 1.0 {
                let sigma = sens_l2 * (2.0 * (1.25 / delta_half).ln()).sqrt() / eps_j;
                if sigma * sigma < 2.0 * b * b {
                    let normal = Normal::new(0.0, 1.0).unwrap();
                    return agg.l_inf + sigma * normal.inverse_cdf(1.0 - delta_half / l0);
                }
            }
            laplace_threshold
        })
        .collect()
}

/// Reference clipped vector sum (noise-off).
pub fn clipped_vector_sum(updates: &[Vec<f64>], l2_clip: f64) -> Vec<f64> {
    let Some(first) = updates.first() else {
        return Vec::new();
    };
    let mut total = vec![0.0; first.len()];
    for update in updates {
        let mut sumsq = 0.0;
        for v in update {
            sumsq += v * v;
        }
        let norm = sumsq.sqrt();
        let scale = if norm > l2_clip { l2_clip / norm } else { 1.0 };
        for (j, v) in update.iter().enumerate() {
            total[j] += v * scale;
        }
    }
    total
}
