//! Query AST and its canonical pretty-printer.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    /// DP options in source order, uninterpreted until lowering.
    pub options: Vec<(String, f64)>,
    pub items: Vec<SelectItem>,
    pub source_table: String,
    pub group_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectItem {
    Column(String),
    Aggregate(Aggregate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Sum,
    Count,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub func: AggFunc,
    /// `None` for `COUNT(*)`.
    pub input: Option<String>,
    pub hints: Vec<(String, f64)>,
    pub alias: Option<String>,
}

impl Query {
    /// Renders the query in a fixed layout that reparses to the same AST.
    /// Numbers print with the shortest representation that round-trips.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        out.push_str("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (");
        for (i, (name, value)) in self.options.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{name}={value}");
        }
        out.push_str(")\n");
        for (i, item) in self.items.iter().enumerate() {
            out.push_str("  ");
            match item {
                SelectItem::Column(name) => out.push_str(name),
                SelectItem::Aggregate(agg) => {
                    match (&agg.func, &agg.input) {
                        (AggFunc::Sum, Some(column)) => {
                            let _ = write!(out, "SUM({column})");
                        }
                        (AggFunc::Count, _) => out.push_str("COUNT(*)"),
                        (AggFunc::Sum, None) => unreachable!("SUM always has an input column"),
                    }
                    if !agg.hints.is_empty() {
                        out.push_str(" @{");
                        for (j, (name, value)) in agg.hints.iter().enumerate() {
                            if j > 0 {
                                out.push_str(", ");
                            }
                            let _ = write!(out, "{name} = {value}");
                        }
                        out.push('}');
                    }
                    if let Some(alias) = &agg.alias {
                        let _ = write!(out, " AS {alias}");
                    }
                }
            }
            if i + 1 < self.items.len() {
                out.push(',');
            }
            out.push('\n');
        }
        let _ = write!(out, "FROM {}\n", self.source_table);
        let _ = write!(out, "GROUP BY {};\n", self.group_by.join(", "));
        out
    }
}
