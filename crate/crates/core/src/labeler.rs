//! The four-stage labeling pipeline: mention extraction, initial
//! classification from observation attributes, negation/uncertainty
//! modifiers, and priority aggregation.

use std::collections::{HashSet, VecDeque};

use thiserror::Error;

use crate::exec::{self, Execution};
use crate::kg::{Attribute, DocumentError, ReportGraph};
use crate::labels::{LabelRow, Pathology, PathologyMap, UncertaintyClass};
use crate::matcher::{GraphIndex, Match, MatchMode};
use crate::rules::{RuleGraph, RuleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelOptions {
    pub mode: MatchMode,
    /// How many relation hops a modifier rule's anchor may sit from the
    /// mention's matched entities.
    pub modifier_hops: usize,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            mode: MatchMode::Monomorphism,
            modifier_hops: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub pathology: Pathology,
    pub rule_id: String,
    pub matched: Match,
    pub anchor_entity: String,
    pub anchor_start_token: usize,
    pub initial_class: UncertaintyClass,
    /// Modifier rules that fired.
    pub applied_rules: Vec<String>,
    pub final_class: UncertaintyClass,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    pub sentence_index: usize,
    pub sentence_text: String,
    pub entity_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub report_id: String,
    pub labels: PathologyMap<UncertaintyClass>,
    /// Present exactly for non-Null labels.
    pub evidence: PathologyMap<Option<Evidence>>,
    pub mentions: PathologyMap<Vec<Mention>>,
}

impl LabelRecord {
    pub fn row(&self) -> LabelRow {
        LabelRow {
            report_id: self.report_id.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("mention classes must not contain Null")]
    ContainsNull,
}

fn class_of(attribute: Attribute) -> UncertaintyClass {
    match attribute {
        Attribute::DefinitelyPresent => UncertaintyClass::Positive,
        Attribute::DefinitelyAbsent => UncertaintyClass::Negative,
        Attribute::Uncertain => UncertaintyClass::Uncertain,
    }
}

/// Class of a fresh mention: the attribute of the anchor if it is an
/// observation, else of the first observation joined to the anchor by a rule
/// edge, else of the first observation in the match. Anatomy-only matches
/// are Positive.
pub fn initial_class(rule: &RuleGraph, matched: &Match, graph: &ReportGraph) -> UncertaintyClass {
    let anchor = rule.anchor().unwrap_or(0);
    let attribute_of = |node: usize| graph.entities[matched.assignment[node]].label.attribute();
    if let Some(a) = attribute_of(anchor) {
        return class_of(a);
    }
    let bound = (0..rule.nodes.len()).filter(|&n| {
        rule.edges
            .iter()
            .any(|e| (e.from == anchor && e.to == n) || (e.to == anchor && e.from == n))
    });
    if let Some(a) = bound.filter_map(attribute_of).next() {
        return class_of(a);
    }
    (0..rule.nodes.len())
        .filter_map(attribute_of)
        .next()
        .map(class_of)
        .unwrap_or(UncertaintyClass::Positive)
}

fn extract_with_index(index: &GraphIndex<'_>, rules: &RuleSet, pathology: Pathology, mode: MatchMode) -> Vec<Mention> {
    let graph = index.graph();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rule in &rules.for_pathology(pathology).mention {
        let anchor = rule.anchor().unwrap_or(0);
        for m in index.find(rule, mode) {
            let anchor_ix = m.assignment[anchor];
            if !seen.insert(anchor_ix) {
                continue;
            }
            let entity = &graph.entities[anchor_ix];
            let class = initial_class(rule, &m, graph);
            let sentence_index = graph
                .sentence_spans
                .iter()
                .position(|s| s.contains(entity.start_token))
                .unwrap_or(0);
            out.push((
                anchor_ix,
                Mention {
                    pathology,
                    rule_id: rule.id.clone(),
                    anchor_entity: entity.id.clone(),
                    anchor_start_token: entity.start_token,
                    matched: m,
                    initial_class: class,
                    applied_rules: Vec::new(),
                    final_class: class,
                    sentence_index,
                },
            ));
        }
    }
    out.sort_by_key(|(ix, m)| (m.anchor_start_token, *ix));
    out.into_iter().map(|(_, m)| m).collect()
}

/// One mention per distinct anchor entity over all mention rules of
/// `pathology`; the earliest-declared rule wins a shared anchor. Modifiers
/// are not applied yet.
pub fn extract_mentions(
    graph: &ReportGraph,
    rules: &RuleSet,
    pathology: Pathology,
    options: &LabelOptions,
) -> Vec<Mention> {
    extract_with_index(&GraphIndex::new(graph), rules, pathology, options.mode)
}

/// Entities within `hops` relation steps of `seeds`, ignoring direction.
fn neighbourhood(index: &GraphIndex<'_>, seeds: &[usize], hops: usize) -> HashSet<usize> {
    let mut reached: HashSet<usize> = seeds.iter().copied().collect();
    let mut queue: VecDeque<(usize, usize)> = seeds.iter().map(|&s| (s, 0)).collect();
    while let Some((entity, depth)) = queue.pop_front() {
        if depth == hops {
            continue;
        }
        for &next in index.neighbours(entity) {
            if reached.insert(next) {
                queue.push_back((next, depth + 1));
            }
        }
    }
    reached
}

fn firing_rules(index: &GraphIndex<'_>, rules: &[RuleGraph], scope: &HashSet<usize>, mode: MatchMode) -> Vec<String> {
    rules
        .iter()
        .filter(|rule| {
            let anchor = rule.anchor().unwrap_or(0);
            index
                .find(rule, mode)
                .iter()
                .any(|m| scope.contains(&m.assignment[anchor]))
        })
        .map(|rule| rule.id.clone())
        .collect()
}

fn apply_with_index(mention: &Mention, index: &GraphIndex<'_>, rules: &RuleSet, options: &LabelOptions) -> Mention {
    let bucket = rules.for_pathology(mention.pathology);
    let scope = neighbourhood(index, &mention.matched.assignment, options.modifier_hops);
    let mut out = mention.clone();

    let uncertain = firing_rules(index, &bucket.uncertainty, &scope, options.mode);
    if !uncertain.is_empty() {
        out.final_class = UncertaintyClass::Uncertain;
        out.applied_rules = uncertain;
        return out;
    }
    let negations = firing_rules(index, &bucket.negation, &scope, options.mode);
    if !negations.is_empty() {
        out.final_class = mention.initial_class.flip();
        out.applied_rules = negations;
        return out;
    }
    out.final_class = mention.initial_class;
    out.applied_rules.clear();
    out
}

/// Uncertainty rules take precedence; otherwise any firing negation rule
/// flips the initial class once.
pub fn apply_modifiers(mention: &Mention, graph: &ReportGraph, rules: &RuleSet, options: &LabelOptions) -> Mention {
    apply_with_index(mention, &GraphIndex::new(graph), rules, options)
}

/// Highest class under Positive > Uncertain > Negative; Null when empty.
pub fn aggregate(classes: &[UncertaintyClass]) -> Result<UncertaintyClass, LabelError> {
    if classes.contains(&UncertaintyClass::Null) {
        return Err(LabelError::ContainsNull);
    }
    Ok(classes.iter().copied().max().unwrap_or(UncertaintyClass::Null))
}

pub fn label_report(graph: &ReportGraph, rules: &RuleSet, options: &LabelOptions) -> LabelRecord {
    let index = GraphIndex::new(graph);
    let mut labels = PathologyMap::default();
    let mut evidence = PathologyMap::default();
    let mut mentions = PathologyMap::default();
    for pathology in Pathology::ALL {
        let resolved: Vec<Mention> = extract_with_index(&index, rules, pathology, options.mode)
            .iter()
            .map(|m| apply_with_index(m, &index, rules, options))
            .collect();
        let classes: Vec<UncertaintyClass> = resolved.iter().map(|m| m.final_class).collect();
        let label = aggregate(&classes).expect("resolved mentions are never Null");
        labels[pathology] = label;
        // Mentions are sorted by anchor position, so the first hit is the earliest.
        evidence[pathology] = resolved.iter().find(|m| m.final_class == label).map(|m| Evidence {
            sentence_index: m.sentence_index,
            sentence_text: graph.sentence_text(m.sentence_index).unwrap_or_default(),
            entity_id: m.anchor_entity.clone(),
        });
        mentions[pathology] = resolved;
    }
    LabelRecord {
        report_id: graph.report_id.clone(),
        labels,
        evidence,
        mentions,
    }
}

/// Labels every graph; output order follows input order.
pub fn label_corpus(
    graphs: &[ReportGraph],
    rules: &RuleSet,
    options: &LabelOptions,
    exec: Execution,
) -> Vec<LabelRecord> {
    exec::map_slice(exec, graphs, |g| label_report(g, rules, options))
}

/// Like [`label_corpus`] over ingestion results, passing failed documents
/// through as error records.
pub fn label_documents(
    docs: &[Result<ReportGraph, DocumentError>],
    rules: &RuleSet,
    options: &LabelOptions,
    exec: Execution,
) -> Vec<Result<LabelRecord, DocumentError>> {
    exec::map_slice(exec, docs, |doc| match doc {
        Ok(g) => Ok(label_report(g, rules, options)),
        Err(e) => Err(e.clone()),
    })
}
