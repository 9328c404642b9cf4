//! Report knowledge graphs in the RadGraph schema.
//!
//! A [`ReportGraph`] holds the whitespace tokens of a report, its sentence
//! segmentation, and the Anatomy/Observation entities with their directed
//! relations. Documents are ingested from the public RadGraph release layout:
//!
//! ```json
//! {"report-1": {"text": "No effusion .",
//!               "entities": {"1": {"tokens": "effusion", "label": "OBS-DA",
//!                                  "start_ix": 1, "end_ix": 1, "relations": []}}}}
//! ```
//!
//! Ingestion is lenient about schema violations that real extractor output
//! produces (cross-type `modify`, duplicate or self-loop relations): they are
//! recorded in [`ReportGraph::warnings`] instead of failing the document.

use std::collections::HashSet;
use std::fmt;

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityClass {
    Anatomy,
    Observation,
}

/// Observation uncertainty attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    DefinitelyPresent,
    DefinitelyAbsent,
    Uncertain,
}

impl Attribute {
    pub fn code(self) -> &'static str {
        match self {
            Attribute::DefinitelyPresent => "DP",
            Attribute::DefinitelyAbsent => "DA",
            Attribute::Uncertain => "U",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "DP" => Some(Attribute::DefinitelyPresent),
            "DA" => Some(Attribute::DefinitelyAbsent),
            "U" => Some(Attribute::Uncertain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityLabel {
    AnatDp,
    ObsDp,
    ObsDa,
    ObsU,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 4] = [
        EntityLabel::AnatDp,
        EntityLabel::ObsDp,
        EntityLabel::ObsDa,
        EntityLabel::ObsU,
    ];

    pub fn class(self) -> EntityClass {
        match self {
            EntityLabel::AnatDp => EntityClass::Anatomy,
            _ => EntityClass::Observation,
        }
    }

    /// Uncertainty attribute of an observation; `None` for anatomy.
    pub fn attribute(self) -> Option<Attribute> {
        match self {
            EntityLabel::AnatDp => None,
            EntityLabel::ObsDp => Some(Attribute::DefinitelyPresent),
            EntityLabel::ObsDa => Some(Attribute::DefinitelyAbsent),
            EntityLabel::ObsU => Some(Attribute::Uncertain),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::AnatDp => "ANAT-DP",
            EntityLabel::ObsDp => "OBS-DP",
            EntityLabel::ObsDa => "OBS-DA",
            EntityLabel::ObsU => "OBS-U",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        EntityLabel::ALL.into_iter().find(|l| l.as_str() == text)
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationKind {
    SuggestiveOf,
    LocatedAt,
    Modify,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [
        RelationKind::SuggestiveOf,
        RelationKind::LocatedAt,
        RelationKind::Modify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::SuggestiveOf => "suggestive_of",
            RelationKind::LocatedAt => "located_at",
            RelationKind::Modify => "modify",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        RelationKind::ALL.into_iter().find(|k| k.as_str() == text)
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub span_text: String,
    pub start_token: usize,
    /// Inclusive.
    pub end_token: usize,
    pub label: EntityLabel,
}

impl Entity {
    pub fn class(&self) -> EntityClass {
        self.label.class()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    pub source: String,
    pub target: String,
    pub kind: RelationKind,
}

/// Half-open token range `[start, end)` of one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// `modify` between an anatomy and an observation.
    SameTypeModify {
        source: String,
        target: String,
    },
    DanglingRelation {
        source: String,
        target: String,
    },
    SelfLoop {
        entity: String,
    },
    DuplicateRelation {
        source: String,
        target: String,
        kind: RelationKind,
    },
    EntityOutOfBounds {
        entity: String,
    },
    InvertedSpan {
        entity: String,
    },
    EmptySpan {
        entity: String,
    },
    DuplicateEntity {
        entity: String,
    },
    BadSentencePartition,
}

impl Violation {
    pub fn severity(&self) -> Severity {
        match self {
            Violation::SameTypeModify { .. } | Violation::DuplicateRelation { .. } => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SameTypeModify { source, target } => {
                write!(
                    f,
                    "modify relation {source} -> {target} joins an anatomy and an observation"
                )
            }
            Violation::DanglingRelation { source, target } => {
                write!(f, "relation {source} -> {target} has a missing endpoint")
            }
            Violation::SelfLoop { entity } => write!(f, "self-loop relation on entity {entity}"),
            Violation::DuplicateRelation { source, target, kind } => {
                write!(f, "duplicate {kind} relation {source} -> {target}")
            }
            Violation::EntityOutOfBounds { entity } => write!(f, "entity {entity} lies outside the token range"),
            Violation::InvertedSpan { entity } => write!(f, "entity {entity} ends before it starts"),
            Violation::EmptySpan { entity } => write!(f, "entity {entity} has empty text"),
            Violation::DuplicateEntity { entity } => write!(f, "entity id {entity} is declared twice"),
            Violation::BadSentencePartition => f.write_str("sentence spans do not partition the tokens"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum KgError {
    #[error("malformed document at byte {offset}: {message}")]
    MalformedDocument { offset: usize, message: String },
    #[error("entity {entity}: unknown label `{label}`")]
    UnknownLabel { entity: String, label: String },
    #[error("entity {entity}: unknown relation kind `{kind}`")]
    UnknownRelationKind { entity: String, kind: String },
    #[error("relation {from} -> {to}: endpoint does not exist")]
    DanglingRelation { from: String, to: String },
    #[error("entity {entity}: token range {start}..={end} outside 0..{len}")]
    IndexOutOfBounds {
        entity: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("invalid entity {entity}: {message}")]
    InvalidEntity { entity: String, message: String },
}

/// A report's knowledge graph. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportGraph {
    pub report_id: String,
    pub raw_text: String,
    pub tokens: Vec<String>,
    pub sentence_spans: Vec<SentenceSpan>,
    /// Document order.
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    /// Issues tolerated during ingestion.
    pub warnings: Vec<Violation>,
}

impl ReportGraph {
    pub fn builder(report_id: impl Into<String>, raw_text: impl Into<String>) -> GraphBuilder {
        GraphBuilder {
            report_id: report_id.into(),
            raw_text: raw_text.into(),
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn entity_position(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.id == id)
    }

    pub fn sentence_text(&self, index: usize) -> Option<String> {
        self.sentence_spans
            .get(index)
            .map(|s| self.tokens[s.start..s.end].join(" "))
    }

    /// Sentence holding the entity's first token.
    pub fn sentence_of(&self, entity_id: &str) -> Result<(usize, String), KgError> {
        let entity = self
            .entity(entity_id)
            .ok_or_else(|| KgError::UnknownEntity(entity_id.to_string()))?;
        let index = self
            .sentence_spans
            .iter()
            .position(|s| s.contains(entity.start_token))
            .ok_or_else(|| KgError::UnknownEntity(entity_id.to_string()))?;
        Ok((index, self.sentence_text(index).unwrap_or_default()))
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Splits after every token ending in `.`, `!` or `?`, which is where the
/// raw text has sentence punctuation followed by whitespace or the end.
pub fn segment_sentences(tokens: &[String]) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, token) in tokens.iter().enumerate() {
        if token.ends_with(['.', '!', '?']) {
            spans.push(SentenceSpan { start, end: i + 1 });
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push(SentenceSpan {
            start,
            end: tokens.len(),
        });
    }
    spans
}

pub struct GraphBuilder {
    report_id: String,
    raw_text: String,
    entities: Vec<Entity>,
    relations: Vec<Relation>,
}

impl GraphBuilder {
    pub fn entity(
        mut self,
        id: impl Into<String>,
        span_text: impl Into<String>,
        start_token: usize,
        end_token: usize,
        label: EntityLabel,
    ) -> Self {
        self.entities.push(Entity {
            id: id.into(),
            span_text: span_text.into(),
            start_token,
            end_token,
            label,
        });
        self
    }

    pub fn relation(mut self, source: impl Into<String>, target: impl Into<String>, kind: RelationKind) -> Self {
        self.relations.push(Relation {
            source: source.into(),
            target: target.into(),
            kind,
        });
        self
    }

    /// Checks entities and relation endpoints, drops self-loops and duplicate
    /// relations (recording warnings) and segments sentences.
    pub fn build(self) -> Result<ReportGraph, KgError> {
        let tokens = tokenize(&self.raw_text);
        let mut seen_ids = HashSet::new();
        for e in &self.entities {
            if !seen_ids.insert(e.id.as_str()) {
                return Err(KgError::InvalidEntity {
                    entity: e.id.clone(),
                    message: "duplicate entity id".into(),
                });
            }
            if e.span_text.trim().is_empty() {
                return Err(KgError::InvalidEntity {
                    entity: e.id.clone(),
                    message: "empty span text".into(),
                });
            }
            if e.start_token > e.end_token || e.end_token >= tokens.len() {
                return Err(KgError::IndexOutOfBounds {
                    entity: e.id.clone(),
                    start: e.start_token,
                    end: e.end_token,
                    len: tokens.len(),
                });
            }
        }

        let mut warnings = Vec::new();
        let mut relations: Vec<Relation> = Vec::with_capacity(self.relations.len());
        let mut seen_relations = HashSet::new();
        for r in self.relations {
            if !seen_ids.contains(r.target.as_str()) || !seen_ids.contains(r.source.as_str()) {
                return Err(KgError::DanglingRelation {
                    from: r.source,
                    to: r.target,
                });
            }
            if r.source == r.target {
                warnings.push(Violation::SelfLoop { entity: r.source });
                continue;
            }
            if !seen_relations.insert(r.clone()) {
                warnings.push(Violation::DuplicateRelation {
                    source: r.source,
                    target: r.target,
                    kind: r.kind,
                });
                continue;
            }
            relations.push(r);
        }

        let sentence_spans = segment_sentences(&tokens);
        let mut graph = ReportGraph {
            report_id: self.report_id,
            raw_text: self.raw_text,
            tokens,
            sentence_spans,
            entities: self.entities,
            relations,
            warnings,
        };
        let schema_warnings: Vec<Violation> = validate_graph(&graph)
            .into_iter()
            .filter(|v| v.severity() == Severity::Warning)
            .collect();
        graph.warnings.extend(schema_warnings);
        Ok(graph)
    }
}

/// Lists every invariant violation of `graph`; an empty list means valid.
pub fn validate_graph(graph: &ReportGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for e in &graph.entities {
        if !ids.insert(e.id.as_str()) {
            out.push(Violation::DuplicateEntity { entity: e.id.clone() });
        }
        if e.span_text.trim().is_empty() {
            out.push(Violation::EmptySpan { entity: e.id.clone() });
        }
        if e.start_token > e.end_token {
            out.push(Violation::InvertedSpan { entity: e.id.clone() });
        } else if e.end_token >= graph.tokens.len() {
            out.push(Violation::EntityOutOfBounds { entity: e.id.clone() });
        }
    }

    let mut seen = HashSet::new();
    for r in &graph.relations {
        let (Some(source), Some(target)) = (graph.entity(&r.source), graph.entity(&r.target)) else {
            out.push(Violation::DanglingRelation {
                source: r.source.clone(),
                target: r.target.clone(),
            });
            continue;
        };
        if r.source == r.target {
            out.push(Violation::SelfLoop {
                entity: r.source.clone(),
            });
        }
        if !seen.insert(r) {
            out.push(Violation::DuplicateRelation {
                source: r.source.clone(),
                target: r.target.clone(),
                kind: r.kind,
            });
        }
        if r.kind == RelationKind::Modify && source.class() != target.class() {
            out.push(Violation::SameTypeModify {
                source: r.source.clone(),
                target: r.target.clone(),
            });
        }
    }

    let mut cursor = 0;
    let mut partition_ok = true;
    for span in &graph.sentence_spans {
        if span.start != cursor || span.end <= span.start {
            partition_ok = false;
        }
        cursor = span.end;
    }
    if !partition_ok || cursor != graph.tokens.len() {
        out.push(Violation::BadSentencePartition);
    }
    out
}

/// A document that failed to ingest, keyed by its report id.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("report {report_id}: {error}")]
pub struct DocumentError {
    pub report_id: String,
    pub error: KgError,
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for _ in 1..line {
        match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => return bytes.len(),
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

fn parse_json(bytes: &[u8]) -> Result<Value, KgError> {
    let text = std::str::from_utf8(bytes).map_err(|e| KgError::MalformedDocument {
        offset: e.valid_up_to(),
        message: "input is not valid UTF-8".into(),
    })?;
    serde_json::from_str(text).map_err(|e| KgError::MalformedDocument {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn is_report_object(map: &Map<String, Value>) -> bool {
    map.contains_key("text") && map.contains_key("entities")
}

fn malformed(message: impl Into<String>) -> KgError {
    KgError::MalformedDocument {
        offset: 0,
        message: message.into(),
    }
}

fn report_from_value(report_id: &str, value: &Value) -> Result<ReportGraph, KgError> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(format!("report {report_id} is not an object")))?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("report {report_id} has no string `text`")))?;
    let entities = obj
        .get("entities")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed(format!("report {report_id} has no object `entities`")))?;

    let mut builder = ReportGraph::builder(report_id, text);
    for (id, record) in entities {
        let field = |name: &str| {
            record
                .get(name)
                .ok_or_else(|| malformed(format!("entity {id} lacks `{name}`")))
        };
        let span = field("tokens")?
            .as_str()
            .ok_or_else(|| malformed(format!("entity {id}: `tokens` is not a string")))?;
        let label_text = field("label")?
            .as_str()
            .ok_or_else(|| malformed(format!("entity {id}: `label` is not a string")))?;
        let label = EntityLabel::parse(label_text).ok_or_else(|| KgError::UnknownLabel {
            entity: id.clone(),
            label: label_text.to_string(),
        })?;
        let index = |name: &str| -> Result<usize, KgError> {
            field(name)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| malformed(format!("entity {id}: `{name}` is not a non-negative integer")))
        };
        builder = builder.entity(id.clone(), span, index("start_ix")?, index("end_ix")?, label);

        let relations = match record.get("relations") {
            None | Some(Value::Null) => continue,
            Some(Value::Array(items)) => items,
            Some(_) => return Err(malformed(format!("entity {id}: `relations` is not a list"))),
        };
        for item in relations {
            let pair = item
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| malformed(format!("entity {id}: relation is not a [kind, target] pair")))?;
            let kind_text = pair[0]
                .as_str()
                .ok_or_else(|| malformed(format!("entity {id}: relation kind is not a string")))?;
            let kind = RelationKind::parse(kind_text).ok_or_else(|| KgError::UnknownRelationKind {
                entity: id.clone(),
                kind: kind_text.to_string(),
            })?;
            let target = match &pair[1] {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                _ => return Err(malformed(format!("entity {id}: relation target is not an id"))),
            };
            builder = builder.relation(id.clone(), target, kind);
        }
    }
    builder.build()
}

/// Parses a document holding exactly one report, either as a bare report
/// object or as a single-entry map.
pub fn parse_document(bytes: &[u8]) -> Result<ReportGraph, KgError> {
    let mut docs = parse_corpus(bytes)?;
    if docs.len() != 1 {
        return Err(malformed(format!("expected one report, found {}", docs.len())));
    }
    docs.pop().unwrap().map_err(|e| e.error)
}

/// Parses a single-report object or a multi-report map. Syntax errors fail the
/// whole input; per-report schema errors are returned in place so the rest of
/// the corpus can proceed. Input order is preserved.
pub fn parse_corpus(bytes: &[u8]) -> Result<Vec<Result<ReportGraph, DocumentError>>, KgError> {
    let value = parse_json(bytes)?;
    let map = value
        .as_object()
        .ok_or_else(|| malformed("top-level value must be an object"))?;
    if is_report_object(map) {
        let report_id = map
            .get("report_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| "doc-0".to_string());
        let graph = report_from_value(&report_id, &value).map_err(|error| DocumentError {
            report_id: report_id.clone(),
            error,
        });
        return Ok(vec![graph]);
    }
    Ok(map
        .iter()
        .enumerate()
        .map(|(ordinal, (key, report))| {
            let report_id = if key.is_empty() {
                format!("doc-{ordinal}")
            } else {
                key.clone()
            };
            report_from_value(&report_id, report).map_err(|error| DocumentError {
                report_id: report_id.clone(),
                error,
            })
        })
        .collect())
}

/// Report object in the ingestion layout (without the id).
pub fn to_document_value(graph: &ReportGraph) -> Value {
    let mut entities = Map::new();
    for e in &graph.entities {
        let relations: Vec<Value> = graph
            .relations
            .iter()
            .filter(|r| r.source == e.id)
            .map(|r| Value::Array(vec![Value::from(r.kind.as_str()), Value::from(r.target.clone())]))
            .collect();
        let mut record = Map::new();
        record.insert("tokens".into(), Value::from(e.span_text.clone()));
        record.insert("label".into(), Value::from(e.label.as_str()));
        record.insert("start_ix".into(), Value::from(e.start_token));
        record.insert("end_ix".into(), Value::from(e.end_token));
        record.insert("relations".into(), Value::Array(relations));
        entities.insert(e.id.clone(), Value::Object(record));
    }
    let mut obj = Map::new();
    obj.insert("text".into(), Value::from(graph.raw_text.clone()));
    obj.insert("entities".into(), Value::Object(entities));
    Value::Object(obj)
}

/// Multi-report map keyed by report id.
pub fn to_corpus_value(graphs: &[ReportGraph]) -> Value {
    Value::Object(
        graphs
            .iter()
            .map(|g| (g.report_id.clone(), to_document_value(g)))
            .collect(),
    )
}
