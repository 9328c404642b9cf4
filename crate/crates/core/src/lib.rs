//! Rule-graph labeling of chest X-ray reports.
//!
//! Reports arrive as RadGraph-style knowledge graphs ([`kg`]). Pathology
//! mentions are found by matching small rule graphs ([`rules`], [`matcher`])
//! against them, classified from the entities' uncertainty attributes,
//! adjusted by negation and uncertainty rules and aggregated per pathology
//! ([`labeler`]). The [`radprompt`] module wraps the labeler around a chat
//! model in a two-turn hinting loop, and [`eval`] scores label files with
//! sub-task F1 and bootstrap confidence intervals.

pub mod eval;
pub mod exec;
pub mod kg;
pub mod labeler;
pub mod labels;
pub mod matcher;
pub mod radprompt;
pub mod rules;

pub use kg::{parse_corpus, parse_document, validate_graph, ReportGraph};

pub use labeler::{label_corpus, label_report, LabelOptions, LabelRecord};
pub use labels::{LabelRow, Pathology, PathologyMap, UncertaintyClass};
pub use matcher::{find_matches, MatchMode};
pub use rules::{default_rules, parse_rule_file, RuleSet};
