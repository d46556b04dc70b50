//! Parser and compiler for the SQL-subset DP query language.
//!
//! Query files (`.dpsql`) declare one SELECT with a DIFFERENTIAL_PRIVACY
//! OPTIONS clause, SUM/COUNT aggregates carrying sensitivity hints, a
//! single source table, and a GROUP BY list. Lowering produces the
//! [`DpQueryConfig`] consumed by the aggregation core; its canonical bytes
//! are what gets digested into a transform's measured configuration.

mod ast;
mod parser;
mod token;

pub use ast::{AggFunc, Aggregate, Query, SelectItem};
pub use parser::parse;
pub use token::{Span, Token, TokenKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyEdge;

/// File extension for query files.
pub const QUERY_FILE_EXTENSION: &str = "dpsql";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("syntax error at {line}:{col}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub line: u32,
    pub col: u32,
    pub found: String,
    pub expected: String,
}

impl SyntaxError {
    pub(crate) fn new(span: Span, found: &str, expected: &str) -> Self {
        Self { line: span.line, col: span.col, found: found.to_string(), expected: expected.to_string() }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SemanticError {
    #[error("unknown hint {0}")]
    UnknownHint(String),
    #[error("unknown option {0}")]
    UnknownOption(String),
    #[error("duplicate output name {0}")]
    DuplicateOutputName(String),
    #[error("GROUP BY column {0} is also aggregated")]
    GroupByColumnAggregated(String),
    #[error("aggregate {0} is missing the L_inf hint")]
    MissingLInfHint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdmissionError {
    #[error("query epsilon {epsilon} exceeds the edge bound {bound}")]
    Epsilon { epsilon: f64, bound: f64 },
    #[error("query delta {delta} exceeds the edge bound {bound}")]
    Delta { delta: f64, bound: f64 },
}

/// One aggregation column: where the values come from, what the output is
/// called, and the per-client sensitivity bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    /// `None` means the implicit all-ones column (COUNT desugars to SUM).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_column: Option<String>,
    pub output_name: String,
    pub l_inf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_2: Option<f64>,
}

/// Lowered query: the complete DP aggregation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpQueryConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// The l0 bound: how many distinct keys one client may influence.
    pub max_groups_contributed: u32,
    pub key_columns: Vec<String>,
    pub aggregations: Vec<AggregationSpec>,
    pub source_table: String,
}

impl DpQueryConfig {
    /// Range and consistency checks. Also applied to configs received over
    /// the wire, not just ones produced by `lower`.
    pub fn validate(&self) -> Result<(), SemanticError> {
        let bad = |msg: String| Err(SemanticError::InvalidConfig(msg));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(self.delta.is_finite() && self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} must be in (0, 1)", self.delta));
        }
        if self.max_groups_contributed < 1 {
            return bad("max_groups_contributed must be >= 1".into());
        }
        if self.aggregations.is_empty() {
            return bad("query aggregates no columns".into());
        }
        for agg in &self.aggregations {
            if !(agg.l_inf.is_finite() && agg.l_inf > 0.0) {
                return bad(format!("{}: L_inf must be positive", agg.output_name));
            }
            for (name, bound) in [("L_1", agg.l_1), ("L_2", agg.l_2)] {
                if let Some(value) = bound {
                    if !(value.is_finite() && value > 0.0) {
                        return bad(format!("{}: {name} must be positive", agg.output_name));
                    }
                    // A cross-key bound tighter than a single value's bound
                    // is inconsistent.
                    if value < agg.l_inf {
                        return bad(format!(
                            "{}: {name} {value} is below L_inf {}",
                            agg.output_name, agg.l_inf
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Compiles a parsed query to its aggregation configuration. Aggregations
/// keep SELECT order; GROUP BY columns become the key columns; COUNT turns
/// into a SUM over an implicit all-ones column.
pub fn lower(query: &Query) -> Result<DpQueryConfig, SemanticError> {
    let mut epsilon = None;
    let mut delta = None;
    let mut max_groups = None;
    for (name, value) in &query.options {
        match name.to_ascii_lowercase().as_str() {
            "epsilon" => set_once(&mut epsilon, *value, name)?,
            "delta" => set_once(&mut delta, *value, name)?,
            "max_groups_contributed" => {
                if value.fract() != 0.0 || *value < 1.0 || *value > u32::MAX as f64 {
                    return Err(SemanticError::InvalidConfig(format!(
                        "max_groups_contributed {value} must be a positive integer"
                    )));
                }
                set_once(&mut max_groups, *value, name)?;
            }
            _ => return Err(SemanticError::UnknownOption(name.clone())),
        }
    }
    let epsilon = epsilon
        .ok_or_else(|| SemanticError::InvalidConfig("missing option epsilon".into()))?;
    let delta =
        delta.ok_or_else(|| SemanticError::InvalidConfig("missing option delta".into()))?;
    let max_groups_contributed = max_groups
        .ok_or_else(|| SemanticError::InvalidConfig("missing option max_groups_contributed".into()))?
        as u32;

    let mut key_columns = Vec::new();
    let mut aggregations = Vec::new();
    for item in &query.items {
        match item {
            SelectItem::Column(name) => {
                if !query.group_by.iter().any(|g| g == name) {
                    return Err(SemanticError::InvalidConfig(format!(
                        "column {name} is selected without aggregation but not grouped by"
                    )));
                }
                key_columns.push(name.clone());
            }
            SelectItem::Aggregate(agg) => {
                if let Some(input) = &agg.input {
                    if query.group_by.iter().any(|g| g == input) {
                        return Err(SemanticError::GroupByColumnAggregated(input.clone()));
                    }
                }
                aggregations.push(lower_aggregate(agg)?);
            }
        }
    }

    // GROUP BY keys and plain select columns must agree; key order follows
    // the GROUP BY clause.
    for group_col in &query.group_by {
        if !key_columns.iter().any(|k| k == group_col) {
            return Err(SemanticError::InvalidConfig(format!(
                "GROUP BY column {group_col} does not appear in the select list"
            )));
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    for agg in &aggregations {
        if !seen.insert(agg.output_name.clone()) {
            return Err(SemanticError::DuplicateOutputName(agg.output_name.clone()));
        }
    }

    let config = DpQueryConfig {
        epsilon,
        delta,
        max_groups_contributed,
        key_columns: query.group_by.clone(),
        aggregations,
        source_table: query.source_table.clone(),
    };
    config.validate()?;
    Ok(config)
}

fn set_once(slot: &mut Option<f64>, value: f64, name: &str) -> Result<(), SemanticError> {
    if slot.replace(value).is_some() {
        return Err(SemanticError::InvalidConfig(format!("option {name} given twice")));
    }
    Ok(())
}

fn lower_aggregate(agg: &Aggregate) -> Result<AggregationSpec, SemanticError> {
    let output_name = agg
        .alias
        .clone()
        .or_else(|| agg.input.clone())
        .unwrap_or_else(|| "count".to_string());
    let mut l_inf = None;
    let mut l_1 = None;
    let mut l_2 = None;
    for (name, value) in &agg.hints {
        let slot = match name.to_ascii_lowercase().as_str() {
            "l_inf" => &mut l_inf,
            "l_1" => &mut l_1,
            "l_2" => &mut l_2,
            _ => return Err(SemanticError::UnknownHint(name.clone())),
        };
        if slot.replace(*value).is_some() {
            return Err(SemanticError::InvalidConfig(format!(
                "{output_name}: hint {name} given twice"
            )));
        }
    }
    let l_inf = l_inf.ok_or_else(|| SemanticError::MissingLInfHint(output_name.clone()))?;
    Ok(AggregationSpec { input_column: agg.input.clone(), output_name, l_inf, l_1, l_2 })
}

/// Checks a lowered query against a policy edge: admitted iff the query's
/// privacy budget is dominated by the edge's bounds.
pub fn admit(config: &DpQueryConfig, edge: &PolicyEdge) -> Result<(), AdmissionError> {
    if let Some(bound) = edge.constraints.epsilon_max {
        if config.epsilon > bound {
            return Err(AdmissionError::Epsilon { epsilon: config.epsilon, bound });
        }
    }
    if let Some(bound) = edge.constraints.delta_max {
        if config.delta > bound {
            return Err(AdmissionError::Delta { delta: config.delta, bound });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{EdgeConstraints, PolicyEdge};
    use crate::crypto::Digest32;
    use proptest::prelude::*;

    const TWO_HISTOGRAM_QUERY: &str = r#"SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS
      (epsilon=1, delta=1e-8, max_groups_contributed=2)
  color, food,
  SUM(num_purchased_weekdays) @{L_inf = 3} AS total_num_purchased_weekdays,
  SUM(num_purchased_weekends) @{L_inf = 4.5, L_1 = 8, L_2 = 6}
      AS total_num_purchased_weekends,
FROM
  -- table representing all uploaded data with columns
  -- color, food, num_purchased_weekdays, num_purchased_weekends
  uploaded_device_data
GROUP BY
  color, food;
"#;

    fn edge(epsilon_max: f64, delta_max: f64) -> PolicyEdge {
        PolicyEdge {
            edge_id: "dp".into(),
            src_node: 0,
            dst_node: 1,
            required_application_digest: Digest32::of(b"dp"),
            constraints: EdgeConstraints { epsilon_max: Some(epsilon_max), delta_max: Some(delta_max) },
            usage_limit: 1,
            terminal: true,
        }
    }

    #[test]
    fn two_histogram_query_parses_and_lowers() {
        let config = lower(&parse(TWO_HISTOGRAM_QUERY).unwrap()).unwrap();
        assert_eq!(config.epsilon, 1.0);
        assert_eq!(config.delta, 1e-8);
        assert_eq!(config.max_groups_contributed, 2);
        assert_eq!(config.key_columns, vec!["color", "food"]);
        assert_eq!(config.source_table, "uploaded_device_data");
        assert_eq!(config.aggregations.len(), 2);

        let weekdays = &config.aggregations[0];
        assert_eq!(weekdays.input_column.as_deref(), Some("num_purchased_weekdays"));
        assert_eq!(weekdays.output_name, "total_num_purchased_weekdays");
        assert_eq!((weekdays.l_inf, weekdays.l_1, weekdays.l_2), (3.0, None, None));

        let weekends = &config.aggregations[1];
        assert_eq!(weekends.output_name, "total_num_purchased_weekends");
        assert_eq!((weekends.l_inf, weekends.l_1, weekends.l_2), (4.5, Some(8.0), Some(6.0)));
    }

    #[test]
    fn hint_attaches_to_the_preceding_aggregate() {
        let query = parse(TWO_HISTOGRAM_QUERY).unwrap();
        let SelectItem::Aggregate(first_sum) = &query.items[2] else {
            panic!("expected aggregate at position 2");
        };
        assert_eq!(first_sum.hints, vec![("L_inf".to_string(), 3.0)]);
    }

    #[test]
    fn missing_options_clause_errors_at_select() {
        let err = parse("SELECT color FROM t GROUP BY color;").unwrap_err();
        assert_eq!((err.line, err.col), (1, 1));
        assert_eq!(err.found, "SELECT");
    }

    #[test]
    fn count_star_desugars_to_ones_column_sum() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=1) key, COUNT(*) @{L_inf=1} FROM t GROUP BY key;";
        let config = lower(&parse(text).unwrap()).unwrap();
        assert_eq!(config.aggregations.len(), 1);
        assert_eq!(config.aggregations[0].input_column, None);
        assert_eq!(config.aggregations[0].output_name, "count");
        assert_eq!(config.aggregations[0].l_inf, 1.0);
    }

    #[test]
    fn unknown_hint_is_rejected() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=1) key, SUM(v) @{L_3 = 1} FROM t GROUP BY key;";
        let err = lower(&parse(text).unwrap()).unwrap_err();
        assert_eq!(err, SemanticError::UnknownHint("L_3".into()));
    }

    #[test]
    fn missing_l_inf_hint_is_rejected() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=1) key, SUM(v) @{L_1 = 4} FROM t GROUP BY key;";
        let err = lower(&parse(text).unwrap()).unwrap_err();
        assert_eq!(err, SemanticError::MissingLInfHint("v".into()));
    }

    #[test]
    fn duplicate_output_names_are_rejected() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=1) key, SUM(a) @{L_inf=1} AS x, SUM(b) @{L_inf=1} AS x \
                    FROM t GROUP BY key;";
        let err = lower(&parse(text).unwrap()).unwrap_err();
        assert_eq!(err, SemanticError::DuplicateOutputName("x".into()));
    }

    #[test]
    fn aggregating_a_group_by_column_is_rejected() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=1) key, SUM(key) @{L_inf=1} FROM t GROUP BY key;";
        let err = lower(&parse(text).unwrap()).unwrap_err();
        assert_eq!(err, SemanticError::GroupByColumnAggregated("key".into()));
    }

    #[test]
    fn tight_cross_key_bound_is_inconsistent() {
        let text = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, \
                    max_groups_contributed=2) key, SUM(v) @{L_inf=4.5, L_1=2} FROM t GROUP BY key;";
        let err = lower(&parse(text).unwrap()).unwrap_err();
        assert!(matches!(err, SemanticError::InvalidConfig(_)));
    }

    #[test]
    fn keywords_are_case_insensitive_and_comments_ignored() {
        let text = "select with differential_privacy options (EPSILON=0.5, Delta=1e-9, \
                    MAX_GROUPS_CONTRIBUTED=3)\n-- a comment\nkey, sum(v) @{l_inf=2} from t group by key";
        let config = lower(&parse(text).unwrap()).unwrap();
        assert_eq!(config.epsilon, 0.5);
        assert_eq!(config.max_groups_contributed, 3);
    }

    #[test]
    fn admission_matches_the_conjunction_of_bounds() {
        let config = lower(&parse(TWO_HISTOGRAM_QUERY).unwrap()).unwrap();
        admit(&config, &edge(1.0, 1e-8)).unwrap();
        assert!(matches!(
            admit(&config, &edge(0.9999, 1e-8)).unwrap_err(),
            AdmissionError::Epsilon { .. }
        ));
        assert!(matches!(
            admit(&config, &edge(1.0, 0.99e-8)).unwrap_err(),
            AdmissionError::Delta { .. }
        ));
        // Strictly smaller budget is still admitted.
        let mut smaller = config.clone();
        smaller.epsilon = 0.5;
        smaller.delta = 1e-9;
        admit(&smaller, &edge(1.0, 1e-8)).unwrap();
    }

    #[test]
    fn pretty_print_reparses_to_the_same_ast() {
        let corpus = [
            TWO_HISTOGRAM_QUERY.to_string(),
            "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=0.25, delta=1e-12, \
             max_groups_contributed=5) a, b, COUNT(*) @{L_inf=1} AS n, SUM(x) @{L_inf=0.5} \
             FROM source GROUP BY a, b;"
                .to_string(),
        ];
        for text in corpus {
            let ast = parse(&text).unwrap();
            let reparsed = parse(&ast.pretty()).unwrap();
            assert_eq!(reparsed, ast, "pretty-print round trip failed for:\n{text}");
        }
    }

    proptest! {
        /// Decimal literals with <= 15 significant digits survive parsing,
        /// pretty-printing, and lowering without precision loss.
        #[test]
        fn numbers_preserved_exactly(
            mantissa in 1u64..=999_999_999_999_999,
            scale in -12i32..6,
        ) {
            let value = mantissa as f64 * 10f64.powi(scale);
            prop_assume!(value.is_finite() && value > 0.0 && value < 1e15);
            let text = format!(
                "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon={value}, delta=1e-8, \
                 max_groups_contributed=2) key, SUM(v) @{{L_inf={value}}} FROM t GROUP BY key;"
            );
            let ast = parse(&text).unwrap();
            let config = lower(&ast).unwrap();
            prop_assert_eq!(config.epsilon, value);
            prop_assert_eq!(config.aggregations[0].l_inf, value);
            let reparsed = lower(&parse(&ast.pretty()).unwrap()).unwrap();
            prop_assert_eq!(reparsed.epsilon, value);
        }

        /// Admission is exactly two <= comparisons over a randomized grid.
        #[test]
        fn admission_grid(
            eps in 0.01f64..3.0,
            delta in 1e-12f64..0.1,
            eps_max in 0.01f64..3.0,
            delta_max in 1e-12f64..0.1,
        ) {
            let mut config = lower(&parse(TWO_HISTOGRAM_QUERY).unwrap()).unwrap();
            config.epsilon = eps;
            config.delta = delta;
            let admitted = admit(&config, &edge(eps_max, delta_max)).is_ok();
            prop_assert_eq!(admitted, eps <= eps_max && delta <= delta_max);
        }
    }
}
