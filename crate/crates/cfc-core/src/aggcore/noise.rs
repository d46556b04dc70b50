//! Noise calibration, release thresholding, and the DP vector sum.
//!
//! The privacy budget splits evenly: epsilon across the p value columns,
//! delta between noise (Gaussian only) and thresholding, then across
//! columns. Per column the mechanism is Laplace at scale `sens_l1 / eps_j`
//! or the classical Gaussian at
//! `sens_l2 * sqrt(2 ln(1.25/delta_noise)) / eps_j` (valid for eps_j < 1),
//! whichever has lower variance. The release threshold adds to l_inf the
//! noise tail quantile at `delta_threshold / l0`, since one client can
//! create up to l0 keys.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{AggError, CrossClientHistogram, ReleasedHistogram, TableRow};
use crate::dpquery::DpQueryConfig;
use crate::rng::SeededRandomness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    Laplace,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNoisePlan {
    pub distribution: NoiseDistribution,
    /// Laplace scale b, or Gaussian sigma.
    pub scale: f64,
    /// Rows whose noisy value has magnitude below this are dropped.
    pub threshold: f64,
    pub sensitivity_l1: f64,
    pub sensitivity_l2: f64,
    pub epsilon: f64,
    /// Delta consumed by the noise itself (zero for Laplace).
    pub delta_noise: f64,
    pub delta_threshold: f64,
}

impl ColumnNoisePlan {
    pub fn variance(&self) -> f64 {
        match self.distribution {
            NoiseDistribution::Laplace => 2.0 * self.scale * self.scale,
            NoiseDistribution::Gaussian => self.scale * self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub max_groups_contributed: u32,
    pub columns: Vec<ColumnNoisePlan>,
}

/// Calibrates per-column noise and thresholds for a query.
pub fn derive_noise_plan(config: &DpQueryConfig) -> Result<NoisePlan, AggError> {
    if !(config.epsilon.is_finite() && config.epsilon > 0.0) {
        return Err(AggError::InvalidBudget(format!("epsilon {} must be positive", config.epsilon)));
    }
    if !(config.delta.is_finite() && config.delta > 0.0 && config.delta < 1.0) {
        return Err(AggError::InvalidBudget(format!("delta {} must be in (0, 1)", config.delta)));
    }
    let p = config.aggregations.len();
    if p == 0 {
        return Err(AggError::InvalidBudget("no aggregation columns".into()));
    }
    let l0 = config.max_groups_contributed as f64;
    let epsilon_j = config.epsilon / p as f64;
    let delta_half_j = config.delta / (2.0 * p as f64);

    let mut columns = Vec::with_capacity(p);
    for agg in &config.aggregations {
        let sensitivity_l1 = agg.l_1.map_or(l0 * agg.l_inf, |l1| l1.min(l0 * agg.l_inf));
        let sensitivity_l2 = agg.l_2.map_or(l0.sqrt() * agg.l_inf, |l2| l2.min(l0.sqrt() * agg.l_inf));
        let per_key_tail = delta_half_j / l0;

        let laplace_scale = sensitivity_l1 / epsilon_j;
        let laplace = ColumnNoisePlan {
            distribution: NoiseDistribution::Laplace,
            scale: laplace_scale,
            threshold: agg.l_inf + laplace_scale * (l0 / (2.0 * delta_half_j)).ln(),
            sensitivity_l1,
            sensitivity_l2,
            epsilon: epsilon_j,
            delta_noise: 0.0,
            delta_threshold: delta_half_j,
        };

        // The classical Gaussian calibration only holds for eps_j < 1.
        let chosen = if epsilon_j < 1.0 {
            let sigma = sensitivity_l2 * (2.0 * (1.25 / delta_half_j).ln()).sqrt() / epsilon_j;
            let unit_normal = Normal::new(0.0, 1.0).expect("unit normal is well formed");
            let gaussian = ColumnNoisePlan {
                distribution: NoiseDistribution::Gaussian,
                scale: sigma,
                threshold: agg.l_inf + sigma * unit_normal.inverse_cdf(1.0 - per_key_tail),
                sensitivity_l1,
                sensitivity_l2,
                epsilon: epsilon_j,
                delta_noise: delta_half_j,
                delta_threshold: delta_half_j,
            };
            if gaussian.variance() < laplace.variance() {
                gaussian
            } else {
                laplace
            }
        } else {
            laplace
        };

        debug_assert!(chosen.scale.is_finite() && chosen.scale > 0.0);
        debug_assert!(chosen.threshold.is_finite() && chosen.threshold > 0.0);
        columns.push(chosen);
    }
    Ok(NoisePlan { max_groups_contributed: config.max_groups_contributed, columns })
}

/// Adds independent noise per (key, column) and drops any row whose noisy
/// value in some column has magnitude below that column's threshold. With
/// noise off (test mode only) thresholding applies to the exact values.
pub fn add_noise_and_threshold(
    histogram: &CrossClientHistogram,
    plan: &NoisePlan,
    rng: &mut SeededRandomness,
) -> Result<ReleasedHistogram, AggError> {
    if let Some(values) = histogram.entries.values().next() {
        if values.len() != plan.columns.len() {
            return Err(AggError::ArityMismatch {
                what: "value columns",
                expected: plan.columns.len(),
                got: values.len(),
            });
        }
    }
    let noise_off = rng.noise_off();
    let mut rows = Vec::new();
    for (key, values) in &histogram.entries {
        let mut noisy = Vec::with_capacity(values.len());
        let mut release = true;
        for (value, column) in values.iter().zip(&plan.columns) {
            let sample = if noise_off {
                *value
            } else {
                match column.distribution {
                    NoiseDistribution::Laplace => value + rng.laplace(column.scale),
                    NoiseDistribution::Gaussian => value + rng.gaussian(column.scale),
                }
            };
            if sample.abs() < column.threshold {
                release = false;
            }
            noisy.push(sample);
        }
        if release {
            rows.push(TableRow { key: key.clone(), values: noisy });
        }
    }
    Ok(ReleasedHistogram {
        key_columns: histogram.key_columns.clone(),
        value_columns: histogram.value_columns.clone(),
        rows,
    })
}

/// Clips every update to L2 norm `l2_clip`, sums them in the given order
/// (callers supply sorted client order for reproducibility), and adds
/// per-coordinate Gaussian noise at sigma = l2_clip*sqrt(2 ln(1.25/delta))/eps.
pub fn dp_vector_sum(
    updates: &[Vec<f64>],
    l2_clip: f64,
    epsilon: f64,
    delta: f64,
    rng: &mut SeededRandomness,
) -> Result<Vec<f64>, AggError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(AggError::InvalidBudget(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta.is_finite() && delta > 0.0 && delta < 1.0) {
        return Err(AggError::InvalidBudget(format!("delta {delta} must be in (0, 1)")));
    }
    if !(l2_clip.is_finite() && l2_clip > 0.0) {
        return Err(AggError::InvalidBudget(format!("l2_clip {l2_clip} must be positive")));
    }
    let Some(first) = updates.first() else {
        return Ok(Vec::new());
    };
    let dimension = first.len();
    let mut sum = vec![0.0; dimension];
    for update in updates {
        if update.len() != dimension {
            return Err(AggError::DimensionMismatch { expected: dimension, got: update.len() });
        }
        let norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > l2_clip { l2_clip / norm } else { 1.0 };
        for (slot, v) in sum.iter_mut().zip(update) {
            *slot += v * scale;
        }
    }
    if !rng.noise_off() {
        let sigma = l2_clip * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon;
        for slot in sum.iter_mut() {
            *slot += rng.gaussian(sigma);
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::super::tests::bounds_config;
    use super::super::{aggregate, build_local_histogram, bound_contributions, ClientTable, TableRow};
    use super::*;
    use crate::dpquery::{lower, parse};

    fn single_column_config(l0: u32, l_inf: f64, epsilon: f64, delta: f64) -> DpQueryConfig {
        let text = format!(
            "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon={epsilon}, delta={delta}, \
             max_groups_contributed={l0}) k, SUM(v) @{{L_inf={l_inf}}} FROM t GROUP BY k;"
        );
        lower(&parse(&text).unwrap()).unwrap()
    }

    #[test]
    fn unit_sensitivity_yields_unit_laplace() {
        // eps_j = 1 makes the Gaussian calibration inapplicable, so Laplace
        // must win regardless of variance.
        let plan = derive_noise_plan(&single_column_config(1, 1.0, 1.0, 1e-8)).unwrap();
        let column = &plan.columns[0];
        assert_eq!(column.distribution, NoiseDistribution::Laplace);
        assert_eq!(column.sensitivity_l1, 1.0);
        assert_eq!(column.scale, 1.0);
        assert_eq!(column.variance(), 2.0);
    }

    #[test]
    fn charted_l1_caps_the_sensitivity() {
        // Second column of the two-histogram query: l0*l_inf = 9 but L_1 = 8.
        let plan = derive_noise_plan(&bounds_config(2)).unwrap();
        assert_eq!(plan.columns[1].sensitivity_l1, 8.0);
        assert_eq!(plan.columns[1].sensitivity_l2, 6.0f64.min(2.0f64.sqrt() * 4.5));
        // First column has no L_1 hint: sensitivity is l0 * l_inf = 6.
        assert_eq!(plan.columns[0].sensitivity_l1, 6.0);
    }

    #[test]
    fn splitting_epsilon_across_columns_doubles_laplace_scale() {
        let one = derive_noise_plan(&single_column_config(2, 3.0, 1.0, 1e-8)).unwrap();
        let two_text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                        max_groups_contributed=2) k, SUM(v) @{L_inf=3}, SUM(w) @{L_inf=3} \
                        FROM t GROUP BY k;";
        let two = derive_noise_plan(&lower(&parse(two_text).unwrap()).unwrap()).unwrap();
        assert_eq!(two.columns[0].epsilon, one.columns[0].epsilon / 2.0);
        assert_eq!(two.columns[0].scale, 2.0 * one.columns[0].scale);
    }

    #[test]
    fn gaussian_wins_when_its_variance_is_lower() {
        // Large l0 with a tight L_2 favors Gaussian; small eps keeps it valid.
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=0.5, delta=1e-6, \
                    max_groups_contributed=100) k, SUM(v) @{L_inf=1, L_2=2} FROM t GROUP BY k;";
        let config = lower(&parse(text).unwrap()).unwrap();
        let plan = derive_noise_plan(&config).unwrap();
        let column = &plan.columns[0];
        assert_eq!(column.distribution, NoiseDistribution::Gaussian);

        // Verify the choice numerically against both candidates.
        let eps_j = 0.5;
        let delta_half = 1e-6 / 2.0;
        let laplace_variance = 2.0 * (100.0f64 / eps_j).powi(2);
        let sigma = 2.0 * (2.0 * (1.25f64 / delta_half).ln()).sqrt() / eps_j;
        assert!(sigma * sigma < laplace_variance);
        assert!((column.scale - sigma).abs() < 1e-12);
    }

    #[test]
    fn laplace_threshold_matches_the_tail_formula() {
        let plan = derive_noise_plan(&single_column_config(2, 3.0, 1.0, 1e-8)).unwrap();
        let column = &plan.columns[0];
        let b = 6.0; // sens_l1 / eps_j = 2*3 / 1
        let delta_thr = 1e-8 / 2.0;
        let expected = 3.0 + b * (2.0f64 / (2.0 * delta_thr)).ln();
        assert!((column.threshold - expected).abs() < 1e-9);
    }

    #[test]
    fn invalid_budgets_are_rejected() {
        assert!(matches!(
            derive_noise_plan(&single_column_config(1, 1.0, 1.0, 1e-8).clone_with(|c| c.epsilon = 0.0)),
            Err(AggError::InvalidBudget(_))
        ));
        assert!(matches!(
            derive_noise_plan(&single_column_config(1, 1.0, 1.0, 1e-8).clone_with(|c| c.delta = 1.0)),
            Err(AggError::InvalidBudget(_))
        ));
    }

    #[test]
    fn noise_off_release_above_threshold_is_identity() {
        let config = bounds_config(3);
        let plan = derive_noise_plan(&config).unwrap();
        let mut rng = SeededRandomness::test([7; 32], true);
        // Values far above any threshold for these parameters.
        let big = 1e9;
        let table = ClientTable {
            key_columns: config.key_columns.clone(),
            value_columns: vec!["total_weight".into(), "total_price".into()],
            rows: vec![TableRow {
                key: vec!["red".into(), "apple".into()],
                values: vec![big, big],
            }],
        };
        let merged = aggregate(&[("c".into(), build_local_histogram(&table).unwrap())]).unwrap();
        let released = add_noise_and_threshold(&merged, &plan, &mut rng).unwrap();
        assert_eq!(released.rows.len(), 1);
        assert_eq!(released.rows[0].values, vec![big, big]);
    }

    #[test]
    fn noise_off_thresholding_drops_small_rows() {
        let config = single_column_config(1, 1.0, 1.0, 1e-4);
        let plan = derive_noise_plan(&config).unwrap();
        let threshold = plan.columns[0].threshold;
        let mut entries = std::collections::BTreeMap::new();
        entries.insert(vec!["low".to_string()], vec![threshold - 1e-9]);
        entries.insert(vec!["high".to_string()], vec![threshold + 1.0]);
        let histogram = CrossClientHistogram {
            key_columns: vec!["k".into()],
            value_columns: vec!["v".into()],
            entries,
        };
        let mut rng = SeededRandomness::test([8; 32], true);
        let released = add_noise_and_threshold(&histogram, &plan, &mut rng).unwrap();
        assert_eq!(released.rows.len(), 1);
        assert_eq!(released.rows[0].key, vec!["high".to_string()]);
    }

    #[test]
    fn fixed_seed_gives_identical_noisy_releases() {
        let config = bounds_config(2);
        let plan = derive_noise_plan(&config).unwrap();
        // Values far above both thresholds so rows actually release.
        let base: f64 = 10.0 * plan.columns.iter().map(|c| c.threshold).fold(0.0, f64::max);
        let mut entries = std::collections::BTreeMap::new();
        for i in 0..6 {
            entries.insert(vec![format!("k{i}")], vec![base + i as f64, base + 10.0 + i as f64]);
        }
        let histogram = CrossClientHistogram {
            key_columns: vec!["k".into()],
            value_columns: vec!["a".into(), "b".into()],
            entries,
        };
        let a = add_noise_and_threshold(&histogram, &plan, &mut SeededRandomness::test([9; 32], false))
            .unwrap();
        let b = add_noise_and_threshold(&histogram, &plan, &mut SeededRandomness::test([9; 32], false))
            .unwrap();
        assert_eq!(a, b);
        let c = add_noise_and_threshold(&histogram, &plan, &mut SeededRandomness::test([10; 32], false))
            .unwrap();
        assert_ne!(a, c, "different seed should perturb the release");
    }

    #[test]
    fn vector_clipping_rescales_to_the_bound() {
        let mut rng = SeededRandomness::test([11; 32], true);
        let vector = vec![6.0, 8.0]; // norm 10
        let sum = dp_vector_sum(&[vector], 1.0, 1.0, 1e-8, &mut rng).unwrap();
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((sum[0] - 0.6).abs() < 1e-12 && (sum[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn noise_off_vector_sum_is_exact() {
        let mut rng = SeededRandomness::test([12; 32], true);
        let sum =
            dp_vector_sum(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2.0, 1.0, 1e-8, &mut rng).unwrap();
        assert_eq!(sum, vec![1.0, 1.0]);
    }

    #[test]
    fn vector_dimension_mismatch_is_rejected() {
        let mut rng = SeededRandomness::test([13; 32], true);
        let err = dp_vector_sum(&[vec![1.0], vec![1.0, 2.0]], 1.0, 1.0, 1e-8, &mut rng).unwrap_err();
        assert_eq!(err, AggError::DimensionMismatch { expected: 1, got: 2 });
    }

    #[test]
    fn bounded_then_aggregated_worked_example_stays_clipped() {
        // End-to-end through the per-client path with the worked table. The
        // l0 step keeps two of three keys; whichever survive, the surviving
        // price mass stays below L_1 = 8, so clamped values pass through.
        let table = super::super::tests::four_row_table();
        let config = bounds_config(2);
        let histogram = build_local_histogram(&table).unwrap();
        let mut rng = SeededRandomness::from_seed([14; 32]);
        let bounded = bound_contributions(&histogram, &config, &mut rng).unwrap();
        let merged = aggregate(&[("only".into(), bounded)]).unwrap();
        assert_eq!(merged.entries.len(), 2);
        for (key, values) in &merged.entries {
            let expected = match key[0].as_str() {
                "green" => vec![3.0, 2.99],
                "red" => vec![3.0, 4.5],
                "white" => vec![2.0, 3.49],
                other => panic!("unexpected key {other}"),
            };
            assert_eq!(values, &expected);
        }
    }

    // Small helper so the invalid-budget test can tweak one field inline.
    trait CloneWith: Sized + Clone {
        fn clone_with(&self, f: impl FnOnce(&mut Self)) -> Self {
            let mut copy = self.clone();
            f(&mut copy);
            copy
        }
    }
    impl CloneWith for DpQueryConfig {}
}
