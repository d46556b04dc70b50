//! Aggregation cores: the open-set DP histogram pipeline and a DP vector
//! sum.
//!
//! The histogram path runs per client (dedup into a local histogram, then
//! contribution bounding) and then across clients (group-by sum, calibrated
//! noise, release thresholding). Bounding caps a client's influence at
//! `min(l0 * l_inf, l_1)` in L1 and `min(sqrt(l0) * l_inf, l_2)` in L2 per
//! column, which is what the noise scales are calibrated against.

mod noise;

pub use noise::{
    add_noise_and_threshold,derive_noise_plan, dp_vector_sum, ColumnNoisePlan, NoiseDistribution,
    NoisePlan,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpquery::DpQueryConfig;
use crate::rng::SeededRandomness;

pub type CompositeKey = Vec<String>;
pub type ClientId = String;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AggError {
    #[error("row arity mismatch: expected {expected} {what}, got {got}")]
    ArityMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Per-client input: rows of composite keys with one value per aggregation
/// column. This is also the upload payload schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientTable {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub key: CompositeKey,
    pub values: Vec<f64>,
}

impl ClientTable {
    pub fn empty(key_columns: Vec<String>, value_columns: Vec<String>) -> Self {
        Self { key_columns, value_columns, rows: Vec::new() }
    }
}

/// De-duplicated per-client view: one value vector per composite key.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHistogram {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub entries: BTreeMap<CompositeKey, Vec<f64>>,
}

/// Exact cross-client sums, pre-noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossClientHistogram {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub entries: BTreeMap<CompositeKey, Vec<f64>>,
}

/// Released output rows, sorted by composite key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleasedHistogram {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

/// Sums value vectors per composite key.
pub fn build_local_histogram(table: &ClientTable) -> Result<LocalHistogram, AggError> {
    let key_arity = table.key_columns.len();
    let value_arity = table.value_columns.len();
    let mut entries: BTreeMap<CompositeKey, Vec<f64>> = BTreeMap::new();
    for row in &table.rows {
        if row.key.len() != key_arity {
            return Err(AggError::ArityMismatch {
                what: "key columns",
                expected: key_arity,
                got: row.key.len(),
            });
        }
        if row.values.len() != value_arity {
            return Err(AggError::ArityMismatch {
                what: "value columns",
                expected: value_arity,
                got: row.values.len(),
            });
        }
        match entries.get_mut(&row.key) {
            Some(acc) => {
                for (slot, v) in acc.iter_mut().zip(&row.values) {
                    *slot += v;
                }
            }
            None => {
                entries.insert(row.key.clone(), row.values.clone());
            }
        }
    }
    Ok(LocalHistogram {
        key_columns: table.key_columns.clone(),
        value_columns: table.value_columns.clone(),
        entries,
    })
}

/// Contribution bounding, in order: keep a uniformly random `l0`-subset of
/// keys when there are more, clamp every value to [-l_inf, l_inf] per
/// column, then rescale columns whose cross-key L1/L2 norms exceed the
/// declared l_1/l_2 bounds.
pub fn bound_contributions(
    histogram: &LocalHistogram,
    config: &DpQueryConfig,
    rng: &mut SeededRandomness,
) -> Result<LocalHistogram, AggError> {
    let columns = config.aggregations.len();
    if histogram.value_columns.len() != columns {
        return Err(AggError::ArityMismatch {
            what: "value columns",
            expected: columns,
            got: histogram.value_columns.len(),
        });
    }

    let l0 = config.max_groups_contributed as usize;
    let mut entries: BTreeMap<CompositeKey, Vec<f64>> = if histogram.entries.len() > l0 {
        let keys: Vec<&CompositeKey> = histogram.entries.keys().collect();
        rng.choose_subset(keys.len(), l0)
            .into_iter()
            .map(|i| (keys[i].clone(), histogram.entries[keys[i]].clone()))
            .collect()
    } else {
        histogram.entries.clone()
    };

    for (j, agg) in config.aggregations.iter().enumerate() {
        for values in entries.values_mut() {
            values[j] = values[j].clamp(-agg.l_inf, agg.l_inf);
        }
        if let Some(l1) = agg.l_1 {
            let norm: f64 = entries.values().map(|v| v[j].abs()).sum();
            if norm > l1 {
                let scale = l1 / norm;
                for values in entries.values_mut() {
                    values[j] *= scale;
                }
            }
        }
        if let Some(l2) = agg.l_2 {
            let norm: f64 = entries.values().map(|v| v[j] * v[j]).sum::<f64>().sqrt();
            if norm > l2 {
                let scale = l2 / norm;
                for values in entries.values_mut() {
                    values[j] *= scale;
                }
            }
        }
    }

    Ok(LocalHistogram {
        key_columns: histogram.key_columns.clone(),
        value_columns: histogram.value_columns.clone(),
        entries,
    })
}

/// Group-by sum across clients. Contributions are added in sorted
/// (composite_key, client_id) order so the result is bit-reproducible under
/// any input permutation.
pub fn aggregate(
    histograms: &[(ClientId, LocalHistogram)],
) -> Result<CrossClientHistogram, AggError> {
    let Some((_, first)) = histograms.first() else {
        return Ok(CrossClientHistogram {
            key_columns: Vec::new(),
            value_columns: Vec::new(),
            entries: BTreeMap::new(),
        });
    };
    let value_arity = first.value_columns.len();

    let mut contributions: Vec<(&CompositeKey, &ClientId, &Vec<f64>)> = Vec::new();
    for (client_id, histogram) in histograms {
        if histogram.value_columns.len() != value_arity {
            return Err(AggError::ArityMismatch {
                what: "value columns",
                expected: value_arity,
                got: histogram.value_columns.len(),
            });
        }
        for (key, values) in &histogram.entries {
            contributions.push((key, client_id, values));
        }
    }
    contributions.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut entries: BTreeMap<CompositeKey, Vec<f64>> = BTreeMap::new();
    for (key, _, values) in contributions {
        match entries.get_mut(key) {
            Some(acc) => {
                for (slot, v) in acc.iter_mut().zip(values) {
                    *slot += v;
                }
            }
            None => {
                entries.insert(key.clone(), values.clone());
            }
        }
    }
    Ok(CrossClientHistogram {
        key_columns: first.key_columns.clone(),
        value_columns: first.value_columns.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpquery::{lower, parse};
    use proptest::prelude::*;

    /// The worked four-row example: two value columns (weight, price) and a
    /// repeated (red, apple) key.
    pub(crate) fn four_row_table() -> ClientTable {
        ClientTable {
            key_columns: vec!["color".into(), "food".into()],
            value_columns: vec!["weight".into(), "price".into()],
            rows: vec![
                TableRow { key: vec!["green".into(), "eggs".into()], values: vec![3.2, 2.99] },
                TableRow { key: vec!["red".into(), "apple".into()], values: vec![3.0, 3.99] },
                TableRow { key: vec!["white".into(), "grape".into()], values: vec![2.0, 3.49] },
                TableRow { key: vec!["red".into(), "apple".into()], values: vec![1.0, 2.99] },
            ],
        }
    }

    pub(crate) fn bounds_config(l0: u32) -> DpQueryConfig {
        let text = format!(
            "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
             max_groups_contributed={l0}) color, food, \
             SUM(weight) @{{L_inf = 3}} AS total_weight, \
             SUM(price) @{{L_inf = 4.5, L_1 = 8, L_2 = 6}} AS total_price \
             FROM uploads GROUP BY color, food;"
        );
        lower(&parse(&text).unwrap()).unwrap()
    }

    #[test]
    fn local_histogram_deduplicates_keys() {
        let histogram = build_local_histogram(&four_row_table()).unwrap();
        assert_eq!(histogram.entries.len(), 3);
        let red_apple = &histogram.entries[&vec!["red".to_string(), "apple".to_string()]];
        assert_eq!(red_apple, &vec![4.0, 6.98]);
    }

    #[test]
    fn empty_and_distinct_tables() {
        let empty = ClientTable::empty(vec!["k".into()], vec!["v".into()]);
        assert!(build_local_histogram(&empty).unwrap().entries.is_empty());

        let distinct = ClientTable {
            key_columns: vec!["k".into()],
            value_columns: vec!["v".into()],
            rows: vec![
                TableRow { key: vec!["a".into()], values: vec![1.0] },
                TableRow { key: vec!["b".into()], values: vec![2.0] },
            ],
        };
        let histogram = build_local_histogram(&distinct).unwrap();
        assert_eq!(histogram.entries.len(), 2);
        assert_eq!(histogram.entries[&vec!["a".to_string()]], vec![1.0]);
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let mut table = four_row_table();
        table.rows[1].values.pop();
        assert!(matches!(
            build_local_histogram(&table).unwrap_err(),
            AggError::ArityMismatch { what: "value columns", .. }
        ));
    }

    /// Isolates the clamp step: l0 = 3 keeps every key and the config
    /// carries no cross-key bounds.
    #[test]
    fn clamping_applies_the_l_inf_bounds() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=3) color, food, \
                    SUM(weight) @{L_inf = 3}, SUM(price) @{L_inf = 4.5} \
                    FROM uploads GROUP BY color, food;";
        let config = lower(&parse(text).unwrap()).unwrap();
        let histogram = build_local_histogram(&four_row_table()).unwrap();
        let mut rng = SeededRandomness::from_seed([1; 32]);
        let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();
        let green_eggs = &bounded.entries[&vec!["green".to_string(), "eggs".to_string()]];
        assert_eq!(green_eggs[0], 3.0, "weight 3.2 clamps to 3");
        let red_apple = &bounded.entries[&vec!["red".to_string(), "apple".to_string()]];
        assert_eq!(red_apple[1], 4.5, "price 6.98 clamps to 4.5");
        assert_eq!(red_apple[0], 3.0, "deduplicated weight 4 clamps to 3");
    }

    /// Full bounding with the two-histogram query parameters: after the l0
    /// step keeps two keys, the surviving prices sum below L_1 = 8, so the
    /// clamped values stand exactly.
    #[test]
    fn worked_example_bounds_under_full_config() {
        let histogram = build_local_histogram(&four_row_table()).unwrap();
        let config = bounds_config(2);
        // Seed chosen so the survivors are (green, eggs) and (red, apple).
        let survivors_seed = (0..=255u8)
            .find(|&s| {
                let mut rng = SeededRandomness::from_seed([s; 32]);
                let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();
                bounded.entries.contains_key(&vec!["green".to_string(), "eggs".to_string()])
                    && bounded.entries.contains_key(&vec!["red".to_string(), "apple".to_string()])
            })
            .expect("some seed keeps both keys of interest");
        let mut rng = SeededRandomness::from_seed([survivors_seed; 32]);
        let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();
        assert_eq!(bounded.entries.len(), 2);
        assert_eq!(
            bounded.entries[&vec!["green".to_string(), "eggs".to_string()]],
            vec![3.0, 2.99]
        );
        assert_eq!(
            bounded.entries[&vec!["red".to_string(), "apple".to_string()]],
            vec![3.0, 4.5]
        );
    }

    #[test]
    fn l0_keeps_a_random_subset_with_values_untouched() {
        let histogram = build_local_histogram(&four_row_table()).unwrap();
        let config = bounds_config(2);
        for seed in 0..16u8 {
            let mut rng = SeededRandomness::from_seed([seed; 32]);
            let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();
            assert_eq!(bounded.entries.len(), 2);
            for (key, values) in &bounded.entries {
                // Survivors come from the original key set; the l0 step
                // itself does not alter values (clamping may).
                let original = &histogram.entries[key];
                assert_eq!(values.len(), original.len());
                for (j, v) in values.iter().enumerate() {
                    assert!(v.abs() <= original[j].abs() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn l1_rescale_hits_the_bound_exactly() {
        let table = ClientTable {
            key_columns: vec!["k".into()],
            value_columns: vec!["v".into()],
            rows: vec![
                TableRow { key: vec!["a".into()], values: vec![3.0] },
                TableRow { key: vec!["b".into()], values: vec![3.0] },
                TableRow { key: vec!["c".into()], values: vec![3.0] },
            ],
        };
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=3) k, SUM(v) @{L_inf=3, L_1=6} FROM t GROUP BY k;";
        let config = lower(&parse(text).unwrap()).unwrap();
        let histogram = build_local_histogram(&table).unwrap();
        let mut rng = SeededRandomness::from_seed([2; 32]);
        let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();
        let values: Vec<f64> = bounded.entries.values().map(|v| v[0]).collect();
        assert_eq!(values, vec![2.0, 2.0, 2.0]);
        let l1: f64 = values.iter().map(|v| v.abs()).sum();
        assert!((l1 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_sums_across_clients() {
        let histogram = |v: f64| LocalHistogram {
            key_columns: vec!["color".into(), "food".into()],
            value_columns: vec!["weight".into()],
            entries: BTreeMap::from([(vec!["red".to_string(), "apple".to_string()], vec![v])]),
        };
        let merged = aggregate(&[
            ("device-a".to_string(), histogram(3.0)),
            ("device-b".to_string(), histogram(3.0)),
        ])
        .unwrap();
        assert_eq!(merged.entries[&vec!["red".to_string(), "apple".to_string()]], vec![6.0]);
    }

    #[test]
    fn aggregate_is_order_invariant_bit_for_bit() {
        let mut rng = SeededRandomness::from_seed([3; 32]);
        let mut inputs = Vec::new();
        for i in 0..12 {
            let mut entries = BTreeMap::new();
            for k in 0..4 {
                entries.insert(
                    vec![format!("key-{}", (i + k) % 5)],
                    vec![rng.uniform() * 10.0 - 5.0, rng.uniform()],
                );
            }
            inputs.push((
                format!("client-{i:02}"),
                LocalHistogram {
                    key_columns: vec!["k".into()],
                    value_columns: vec!["a".into(), "b".into()],
                    entries,
                },
            ));
        }
        let forward = aggregate(&inputs).unwrap();
        let mut reversed = inputs.clone();
        reversed.reverse();
        assert_eq!(aggregate(&reversed).unwrap(), forward);
    }

    /// Independent re-summation oracle over random inputs.
    #[test]
    fn aggregate_matches_naive_oracle() {
        let mut rng = SeededRandomness::from_seed([4; 32]);
        for _ in 0..20 {
            let clients = 1 + (rng.uniform() * 50.0) as usize;
            let mut inputs = Vec::new();
            for c in 0..clients {
                let mut entries = BTreeMap::new();
                let keys = 1 + (rng.uniform() * 8.0) as usize;
                for _ in 0..keys {
                    let key = vec![format!("k{}", (rng.uniform() * 10.0) as u32)];
                    entries.insert(key, vec![(rng.uniform() * 7.0).round()]);
                }
                inputs.push((
                    format!("c{c:03}"),
                    LocalHistogram {
                        key_columns: vec!["k".into()],
                        value_columns: vec!["v".into()],
                        entries,
                    },
                ));
            }
            let merged = aggregate(&inputs).unwrap();

            // Oracle: blunt nested loop accumulation into a fresh map.
            let mut expected: BTreeMap<CompositeKey, f64> = BTreeMap::new();
            for (_, histogram) in &inputs {
                for (key, values) in &histogram.entries {
                    *expected.entry(key.clone()).or_insert(0.0) += values[0];
                }
            }
            assert_eq!(merged.entries.len(), expected.len());
            for (key, total) in expected {
                assert_eq!(merged.entries[&key][0], total, "mismatch at {key:?}");
            }
        }
    }

    proptest! {
        /// Post-bounding norms respect min(l0*l_inf, l_1) and
        /// min(sqrt(l0)*l_inf, l_2) per column.
        #[test]
        fn bounded_influence_property(
            rows in proptest::collection::vec(
                (0u32..12, -40.0f64..40.0, -40.0f64..40.0),
                0..24,
            ),
            l0 in 1u32..6,
            seed in any::<[u8; 32]>(),
        ) {
            let table = ClientTable {
                key_columns: vec!["k".into()],
                value_columns: vec!["x".into(), "y".into()],
                rows: rows
                    .iter()
                    .map(|(k, x, y)| TableRow { key: vec![format!("k{k}")], values: vec![*x, *y] })
                    .collect(),
            };
            let text = format!(
                "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                 max_groups_contributed={l0}) k, SUM(x) @{{L_inf=3}}, \
                 SUM(y) @{{L_inf=4.5, L_1=8, L_2=6}} FROM t GROUP BY k;"
            );
            let config = lower(&parse(&text).unwrap()).unwrap();
            let histogram = build_local_histogram(&table).unwrap();
            let mut rng = SeededRandomness::test(seed, false);
            let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();

            prop_assert!(bounded.entries.len() <= l0 as usize);
            let tolerance = 1.0 + 1e-9;
            for (j, agg) in config.aggregations.iter().enumerate() {
                let l0f = l0 as f64;
                let l1_bound = agg.l_1.map_or(l0f * agg.l_inf, |l1| l1.min(l0f * agg.l_inf));
                let l2_bound =
                    agg.l_2.map_or(l0f.sqrt() * agg.l_inf, |l2| l2.min(l0f.sqrt() * agg.l_inf));
                let l1: f64 = bounded.entries.values().map(|v| v[j].abs()).sum();
                let l2: f64 = bounded.entries.values().map(|v| v[j] * v[j]).sum::<f64>().sqrt();
                prop_assert!(l1 <= l1_bound * tolerance, "L1 {l1} > {l1_bound}");
                prop_assert!(l2 <= l2_bound * tolerance, "L2 {l2} > {l2_bound}");
                for values in bounded.entries.values() {
                    prop_assert!(values[j].abs() <= agg.l_inf * tolerance);
                }
            }
        }
    }
}
