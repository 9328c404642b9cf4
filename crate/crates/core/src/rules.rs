//! Rule graphs and the line-oriented rule file format.
//!
//! ```text
//! # comment
//! rule cardiomegaly_enlarged_heart cardiomegaly mention
//! node heart ANAT ".*heart.*" anchor
//! node enlarged OBS ".*enlarge.*"
//! edge enlarged -located_at-> heart
//! ```
//!
//! A rule block starts at a `rule <id> <pathology> <kind>` header and ends at
//! a blank line, the next header or the end of the file. Pathologies are
//! written as slugs (`pleural_effusion`) or quoted names. Patterns are quoted
//! literals whose only metacharacters are a leading and/or trailing `.*`;
//! `".*"` on its own matches any entity.

use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::kg::{Attribute, Entity, EntityClass, EntityLabel, RelationKind};
use crate::labels::{Pathology, PathologyMap};

/// Largest rule the matcher and the brute-force oracle accept.
pub const MAX_RULE_NODES: usize = 4;

const DEFAULT_RULES: &str = include_str!("../data/default.rules");

/// Case-insensitive whole-token pattern with optional prefix/suffix wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextPattern {
    /// Lowercase; may hold several space-separated words.
    pub literal: String,
    pub allow_prefix: bool,
    pub allow_suffix: bool,
    pub match_any: bool,
}

impl TextPattern {
    pub fn any() -> Self {
        TextPattern {
            literal: String::new(),
            allow_prefix: false,
            allow_suffix: false,
            match_any: true,
        }
    }

    pub fn exact(literal: &str) -> Self {
        TextPattern {
            literal: literal.to_lowercase(),
            allow_prefix: false,
            allow_suffix: false,
            match_any: false,
        }
    }

    /// Parses the unquoted pattern body, e.g. `.*enlarge.*`.
    pub fn parse(body: &str) -> Result<Self, String> {
        if body == ".*" {
            return Ok(TextPattern::any());
        }
        let mut rest = body;
        let allow_prefix = rest.starts_with(".*");
        if allow_prefix {
            rest = &rest[2..];
        }
        let allow_suffix = rest.ends_with(".*");
        if allow_suffix {
            rest = &rest[..rest.len() - 2];
        }
        if rest.contains(".*") {
            return Err(format!("`.*` may only lead or trail the pattern `{body}`"));
        }
        let words: Vec<&str> = rest.split_whitespace().collect();
        if words.is_empty() {
            return Err("empty pattern".to_string());
        }
        Ok(TextPattern {
            literal: words.join(" ").to_lowercase(),
            allow_prefix,
            allow_suffix,
            match_any: false,
        })
    }

    /// True iff the literal occurs at token boundaries of `text`, where the
    /// wildcards let the first word extend leftwards and the last rightwards.
    pub fn matches(&self, text: &str) -> bool {
        if self.match_any {
            return true;
        }
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        let words: Vec<&str> = self.literal.split_whitespace().collect();
        if words.is_empty() || tokens.len() < words.len() {
            return false;
        }
        let last = words.len() - 1;
        tokens.windows(words.len()).any(|window| {
            window.iter().zip(&words).enumerate().all(|(i, (token, word))| {
                let free_left = i == 0 && self.allow_prefix;
                let free_right = i == last && self.allow_suffix;
                match (free_left, free_right) {
                    (true, true) => token.contains(word),
                    (true, false) => token.ends_with(word),
                    (false, true) => token.starts_with(word),
                    (false, false) => token == word,
                }
            })
        })
    }
}

impl fmt::Display for TextPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.match_any {
            return f.write_str(".*");
        }
        let prefix = if self.allow_prefix { ".*" } else { "" };
        let suffix = if self.allow_suffix { ".*" } else { "" };
        write!(f, "{prefix}{}{suffix}", self.literal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    Anatomy,
    Observation,
    Any,
}

impl NodeClass {
    fn keyword(self) -> &'static str {
        match self {
            NodeClass::Anatomy => "ANAT",
            NodeClass::Observation => "OBS",
            NodeClass::Any => "ANY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeConstraint {
    pub name: String,
    pub class: NodeClass,
    pub attribute: Option<Attribute>,
    pub pattern: TextPattern,
    pub is_anchor: bool,
}

impl NodeConstraint {
    pub fn label_allowed(&self, label: EntityLabel) -> bool {
        let class_ok = match self.class {
            NodeClass::Any => true,
            NodeClass::Anatomy => label.class() == EntityClass::Anatomy,
            NodeClass::Observation => label.class() == EntityClass::Observation,
        };
        class_ok && self.attribute.is_none_or(|a| label.attribute() == Some(a))
    }

    pub fn accepts(&self, entity: &Entity) -> bool {
        self.label_allowed(entity.label) && self.pattern.matches(&entity.span_text)
    }
}

/// Edge colour: a specific relation kind, or any of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Any,
    Kind(RelationKind),
}

impl EdgeKind {
    pub fn admits(self, kind: RelationKind) -> bool {
        match self {
            EdgeKind::Any => true,
            EdgeKind::Kind(k) => k == kind,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            EdgeKind::Any => "any",
            EdgeKind::Kind(k) => k.as_str(),
        }
    }
}

/// Directed edge between rule nodes, by node position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuleEdge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    Mention,
    Negation,
    Uncertainty,
}

impl RuleKind {
    pub fn keyword(self) -> &'static str {
        match self {
            RuleKind::Mention => "mention",
            RuleKind::Negation => "negation",
            RuleKind::Uncertainty => "uncertainty",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleGraph {
    pub id: String,
    pub pathology: Pathology,
    pub kind: RuleKind,
    pub nodes: Vec<NodeConstraint>,
    pub edges: Vec<RuleEdge>,
}

impl RuleGraph {
    /// Position of the first anchor node.
    pub fn anchor(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.is_anchor)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathologyRules {
    pub mention: Vec<RuleGraph>,
    pub negation: Vec<RuleGraph>,
    pub uncertainty: Vec<RuleGraph>,
}

impl PathologyRules {
    pub fn bucket(&self, kind: RuleKind) -> &[RuleGraph] {
        match kind {
            RuleKind::Mention => &self.mention,
            RuleKind::Negation => &self.negation,
            RuleKind::Uncertainty => &self.uncertainty,
        }
    }

    fn bucket_mut(&mut self, kind: RuleKind) -> &mut Vec<RuleGraph> {
        match kind {
            RuleKind::Mention => &mut self.mention,
            RuleKind::Negation => &mut self.negation,
            RuleKind::Uncertainty => &mut self.uncertainty,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    buckets: PathologyMap<PathologyRules>,
}

impl RuleSet {
    pub fn new() -> Self {
        RuleSet::default()
    }

    pub fn for_pathology(&self, pathology: Pathology) -> &PathologyRules {
        &self.buckets[pathology]
    }

    pub fn push(&mut self, rule: RuleGraph) {
        self.buckets[rule.pathology].bucket_mut(rule.kind).push(rule);
    }

    /// All rules in file order: pathology, then mention/negation/uncertainty.
    pub fn iter(&self) -> impl Iterator<Item = &RuleGraph> {
        self.buckets
            .values()
            .flat_map(|b| b.mention.iter().chain(b.negation.iter()).chain(b.uncertainty.iter()))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_rule_file(&self) -> String {
        let mut out = String::new();
        for rule in self.iter() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format_rule(rule));
        }
        out
    }
}

pub fn format_rule(rule: &RuleGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "rule {} {} {}",
        rule.id,
        rule.pathology.slug(),
        rule.kind.keyword()
    );
    for node in &rule.nodes {
        let attribute = node.attribute.map(|a| format!(":{}", a.code())).unwrap_or_default();
        let anchor = if node.is_anchor { " anchor" } else { "" };
        let _ = writeln!(
            out,
            "node {} {}{} \"{}\"{}",
            node.name,
            node.class.keyword(),
            attribute,
            node.pattern,
            anchor
        );
    }
    for edge in &rule.edges {
        let _ = writeln!(
            out,
            "edge {} -{}-> {}",
            rule.nodes[edge.from].name,
            edge.kind.keyword(),
            rule.nodes[edge.to].name
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    EmptyRule { rule: String },
    TooManyNodes { rule: String, count: usize },
    Disconnected { rule: String },
    MissingAnchor { rule: String },
    MultipleAnchors { rule: String, count: usize },
    AttributeOnAnatomy { rule: String, node: String },
    AttributeOnAny { rule: String, node: String },
    SelfEdge { rule: String, node: String },
    DuplicateRuleId { rule: String },
}

impl Diagnostic {
    pub fn rule_id(&self) -> &str {
        match self {
            Diagnostic::EmptyRule { rule }
            | Diagnostic::TooManyNodes { rule, .. }
            | Diagnostic::Disconnected { rule }
            | Diagnostic::MissingAnchor { rule }
            | Diagnostic::MultipleAnchors { rule, .. }
            | Diagnostic::AttributeOnAnatomy { rule, .. }
            | Diagnostic::AttributeOnAny { rule, .. }
            | Diagnostic::SelfEdge { rule, .. }
            | Diagnostic::DuplicateRuleId { rule } => rule,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyRule { rule } => write!(f, "rule {rule}: no nodes"),
            Diagnostic::TooManyNodes { rule, count } => {
                write!(f, "rule {rule}: {count} nodes exceeds the limit of {MAX_RULE_NODES}")
            }
            Diagnostic::Disconnected { rule } => write!(f, "rule {rule}: graph is not connected"),
            Diagnostic::MissingAnchor { rule } => write!(f, "rule {rule}: no anchor node"),
            Diagnostic::MultipleAnchors { rule, count } => write!(f, "rule {rule}: {count} anchor nodes, expected 1"),
            Diagnostic::AttributeOnAnatomy { rule, node } => {
                write!(
                    f,
                    "rule {rule}: node {node} puts an uncertainty attribute on an anatomy"
                )
            }
            Diagnostic::AttributeOnAny { rule, node } => {
                write!(
                    f,
                    "rule {rule}: node {node} puts an uncertainty attribute on an ANY node"
                )
            }
            Diagnostic::SelfEdge { rule, node } => write!(f, "rule {rule}: edge from {node} to itself"),
            Diagnostic::DuplicateRuleId { rule } => write!(f, "rule id {rule} is used more than once"),
        }
    }
}

fn is_connected(rule: &RuleGraph) -> bool {
    let n = rule.nodes.len();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for e in &rule.edges {
            let next = if e.from == u {
                e.to
            } else if e.to == u {
                e.from
            } else {
                continue;
            };
            if next < n && !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn validate_rule(rule: &RuleGraph) -> Vec<Diagnostic> {
    let id = || rule.id.clone();
    let mut out = Vec::new();
    if rule.nodes.is_empty() {
        out.push(Diagnostic::EmptyRule { rule: id() });
        return out;
    }
    if rule.nodes.len() > MAX_RULE_NODES {
        out.push(Diagnostic::TooManyNodes {
            rule: id(),
            count: rule.nodes.len(),
        });
    }
    if !is_connected(rule) {
        out.push(Diagnostic::Disconnected { rule: id() });
    }
    match rule.nodes.iter().filter(|n| n.is_anchor).count() {
        0 => out.push(Diagnostic::MissingAnchor { rule: id() }),
        1 => {}
        count => out.push(Diagnostic::MultipleAnchors { rule: id(), count }),
    }
    for node in &rule.nodes {
        if node.attribute.is_some() {
            match node.class {
                NodeClass::Anatomy => out.push(Diagnostic::AttributeOnAnatomy {
                    rule: id(),
                    node: node.name.clone(),
                }),
                NodeClass::Any => out.push(Diagnostic::AttributeOnAny {
                    rule: id(),
                    node: node.name.clone(),
                }),
                NodeClass::Observation => {}
            }
        }
    }
    for edge in &rule.edges {
        if edge.from == edge.to {
            out.push(Diagnostic::SelfEdge {
                rule: id(),
                node: rule.nodes[edge.from].name.clone(),
            });
        }
    }
    out
}

/// All diagnostics of a rule set; empty means valid.
pub fn validate_rules(rules: &RuleSet) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for rule in rules.iter() {
        if !ids.insert(rule.id.as_str()) {
            out.push(Diagnostic::DuplicateRuleId { rule: rule.id.clone() });
        }
        out.extend(validate_rule(rule));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: unknown pathology `{name}`")]
    UnknownPathology { line: usize, name: String },
    #[error("line {line}: unknown relation kind `{name}`")]
    UnknownRelationKind { line: usize, name: String },
    #[error("line {line}: rule {rule} is not connected")]
    DisconnectedRule { line: usize, rule: String },
    #[error("line {line}: rule {rule} needs exactly one anchor node")]
    MissingAnchor { line: usize, rule: String },
    #[error("line {line}: duplicate rule id {rule}")]
    DuplicateRuleId { line: usize, rule: String },
    #[error("line {line}: {diagnostic}")]
    Invalid { line: usize, diagnostic: Diagnostic },
}

/// Parses and validates a rule file.
pub fn parse_rule_file(text: &str) -> Result<RuleSet, RuleError> {
    let parsed = parse_rules_with_lines(text)?;
    let mut ids = std::collections::HashSet::new();
    for (rule, line) in &parsed {
        if !ids.insert(rule.id.clone()) {
            return Err(RuleError::DuplicateRuleId {
                line: *line,
                rule: rule.id.clone(),
            });
        }
        if let Some(diagnostic) = validate_rule(rule).into_iter().next() {
            let line = *line;
            let rule = rule.id.clone();
            return Err(match diagnostic {
                Diagnostic::Disconnected { .. } => RuleError::DisconnectedRule { line, rule },
                Diagnostic::MissingAnchor { .. } | Diagnostic::MultipleAnchors { .. } => {
                    RuleError::MissingAnchor { line, rule }
                }
                diagnostic => RuleError::Invalid { line, diagnostic },
            });
        }
    }
    let mut set = RuleSet::new();
    for (rule, _) in parsed {
        set.push(rule);
    }
    Ok(set)
}

/// Parses syntax only; structural problems are left for [`validate_rules`].
pub fn parse_rule_file_unchecked(text: &str) -> Result<RuleSet, RuleError> {
    let mut set = RuleSet::new();
    for (rule, _) in parse_rules_with_lines(text)? {
        set.push(rule);
    }
    Ok(set)
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> RuleError {
    RuleError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// Splits a line into words, keeping double-quoted strings whole and
/// dropping `#` comments. Returns (word, column, was_quoted).
fn split_line(line: &str, line_no: usize) -> Result<Vec<(String, usize, bool)>, RuleError> {
    let mut words = Vec::new();
    let mut chars = line.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '"' {
            chars.next();
            let mut word = String::new();
            let mut closed = false;
            for (_, c) in chars.by_ref() {
                if c == '"' {
                    closed = true;
                    break;
                }
                word.push(c);
            }
            if !closed {
                return Err(syntax(line_no, i + 1, "unterminated quoted string"));
            }
            words.push((word, i + 1, true));
        } else {
            let mut word = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_whitespace() || c == '"' || c == '#' {
                    break;
                }
                word.push(c);
                chars.next();
            }
            words.push((word, i + 1, false));
        }
    }
    Ok(words)
}

fn is_identifier(word: &str) -> bool {
    !word.is_empty()
        && word
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

struct PendingRule {
    rule: RuleGraph,
    line: usize,
}

fn parse_rules_with_lines(text: &str) -> Result<Vec<(RuleGraph, usize)>, RuleError> {
    let mut out = Vec::new();
    let mut current: Option<PendingRule> = None;

    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let words = split_line(raw, line_no)?;
        if words.is_empty() {
            // A blank line closes the block; a comment-only line does not.
            if raw.trim().is_empty() {
                if let Some(p) = current.take() {
                    out.push((p.rule, p.line));
                }
            }
            continue;
        }
        let (keyword, keyword_col, _) = &words[0];
        match keyword.as_str() {
            "rule" => {
                if let Some(p) = current.take() {
                    out.push((p.rule, p.line));
                }
                if words.len() != 4 {
                    return Err(syntax(line_no, *keyword_col, "expected `rule <id> <pathology> <kind>`"));
                }
                let (id, id_col, _) = &words[1];
                if !is_identifier(id) {
                    return Err(syntax(line_no, *id_col, format!("invalid rule id `{id}`")));
                }
                let pathology = Pathology::parse(&words[2].0).ok_or_else(|| RuleError::UnknownPathology {
                    line: line_no,
                    name: words[2].0.clone(),
                })?;
                let kind = match words[3].0.to_ascii_lowercase().as_str() {
                    "mention" => RuleKind::Mention,
                    "negation" => RuleKind::Negation,
                    "uncertainty" => RuleKind::Uncertainty,
                    other => {
                        return Err(syntax(line_no, words[3].1, format!("unknown rule kind `{other}`")));
                    }
                };
                current = Some(PendingRule {
                    rule: RuleGraph {
                        id: id.clone(),
                        pathology,
                        kind,
                        nodes: Vec::new(),
                        edges: Vec::new(),
                    },
                    line: line_no,
                });
            }
            "node" => {
                let pending = current
                    .as_mut()
                    .ok_or_else(|| syntax(line_no, *keyword_col, "`node` outside a rule block"))?;
                parse_node_line(&words, line_no, &mut pending.rule)?;
            }
            "edge" => {
                let pending = current
                    .as_mut()
                    .ok_or_else(|| syntax(line_no, *keyword_col, "`edge` outside a rule block"))?;
                parse_edge_line(&words, line_no, &mut pending.rule)?;
            }
            other => return Err(syntax(line_no, *keyword_col, format!("unexpected `{other}`"))),
        }
    }
    if let Some(p) = current.take() {
        out.push((p.rule, p.line));
    }
    Ok(out)
}

fn parse_node_line(words: &[(String, usize, bool)], line: usize, rule: &mut RuleGraph) -> Result<(), RuleError> {
    if !(words.len() == 4 || words.len() == 5) {
        return Err(syntax(
            line,
            words[0].1,
            "expected `node <name> <ANAT|OBS|ANY>[:<DP|DA|U>] \"<pattern>\" [anchor]`",
        ));
    }
    let (name, name_col, _) = &words[1];
    if !is_identifier(name) {
        return Err(syntax(line, *name_col, format!("invalid node name `{name}`")));
    }
    if rule.nodes.iter().any(|n| &n.name == name) {
        return Err(syntax(line, *name_col, format!("node `{name}` declared twice")));
    }
    let (class_word, class_col, _) = &words[2];
    let (class_text, attribute_text) = match class_word.split_once(':') {
        Some((c, a)) => (c, Some(a)),
        None => (class_word.as_str(), None),
    };
    let class = match class_text {
        "ANAT" => NodeClass::Anatomy,
        "OBS" => NodeClass::Observation,
        "ANY" => NodeClass::Any,
        other => return Err(syntax(line, *class_col, format!("unknown entity class `{other}`"))),
    };
    let attribute = match attribute_text {
        None => None,
        Some(code) => Some(
            Attribute::from_code(code)
                .ok_or_else(|| syntax(line, *class_col, format!("unknown attribute `{code}`")))?,
        ),
    };
    let (pattern_text, pattern_col, quoted) = &words[3];
    if !quoted {
        return Err(syntax(line, *pattern_col, "pattern must be double-quoted"));
    }
    let pattern = TextPattern::parse(pattern_text).map_err(|m| syntax(line, *pattern_col, m))?;
    let is_anchor = match words.get(4) {
        None => false,
        Some((w, _, false)) if w == "anchor" => true,
        Some((w, col, _)) => return Err(syntax(line, *col, format!("unexpected `{w}`"))),
    };
    rule.nodes.push(NodeConstraint {
        name: name.clone(),
        class,
        attribute,
        pattern,
        is_anchor,
    });
    Ok(())
}

fn parse_edge_line(words: &[(String, usize, bool)], line: usize, rule: &mut RuleGraph) -> Result<(), RuleError> {
    if words.len() != 4 {
        return Err(syntax(line, words[0].1, "expected `edge <from> -<kind>-> <to>`"));
    }
    let lookup = |(name, col, _): &(String, usize, bool)| {
        rule.nodes
            .iter()
            .position(|n| &n.name == name)
            .ok_or_else(|| syntax(line, *col, format!("undeclared node `{name}`")))
    };
    let from = lookup(&words[1])?;
    let to = lookup(&words[3])?;
    let (arrow, arrow_col, _) = &words[2];
    let kind_text = arrow
        .strip_prefix('-')
        .and_then(|a| a.strip_suffix("->"))
        .ok_or_else(|| syntax(line, *arrow_col, format!("malformed arrow `{arrow}`")))?;
    let kind = if kind_text == "any" {
        EdgeKind::Any
    } else {
        EdgeKind::Kind(
            RelationKind::parse(kind_text).ok_or_else(|| RuleError::UnknownRelationKind {
                line,
                name: kind_text.to_string(),
            })?,
        )
    };
    rule.edges.push(RuleEdge { from, to, kind });
    Ok(())
}

/// The bundled starter rule set.
pub fn default_rules() -> RuleSet {
    parse_rule_file(DEFAULT_RULES).expect("bundled rule file is valid")
}

pub fn default_rules_text() -> &'static str {
    DEFAULT_RULES
}
