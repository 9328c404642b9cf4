//! Two-turn prompting of a chat model, with labeler hints in the second turn.
//!
//! Turn one asks the model to fill a fixed 13-finding template for the
//! report. The labeler then labels the same report and each pathology gets a
//! hint: agreement, a grouped "no mention" note, a suggestion of
//! "Undefined", or a disagreement quoting the evidence sentence. Turn two
//! sends those hints with the full history and its parsed answer is final.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::kg::ReportGraph;
use crate::labeler::{label_report, LabelOptions, LabelRecord};
use crate::labels::{Pathology, PathologyMap, UncertaintyClass};
use crate::rules::RuleSet;

#[cfg(feature = "http")]
pub mod http;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams {
            model: "gpt-4-turbo".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout: Duration::from_secs(120),
        }
    }
}

/// One call to the backend. `turn` is 1 or 2; `attempt` is 0 for the
/// first ask and 1 for the corrective re-ask.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub report_id: &'a str,
    pub turn: u8,
    pub attempt: u32,
    pub messages: &'a [ChatMessage],
    pub params: &'a ChatParams,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("no canned answer for report {report_id}, turn {turn}, attempt {attempt}")]
    MissingFixture { report_id: String, turn: u8, attempt: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// A chat model. Calls carry the full history and may arrive concurrently.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, BackendError>;
}

/// One line of a mock fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub report_id: String,
    pub turn: u8,
    #[serde(default)]
    pub attempt: u32,
    pub answer: String,
}

/// Replays canned answers keyed by `(report_id, turn, attempt)`.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    answers: HashMap<(String, u8, u32), String>,
}

impl MockBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        MockBackend {
            answers: entries
                .into_iter()
                .map(|e| ((e.report_id, e.turn, e.attempt), e.answer))
                .collect(),
        }
    }

    /// Reads line-delimited JSON [`FixtureEntry`] records; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<FixtureEntry>, _>>()?;
        Ok(Self::new(entries))
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        self.answers
            .get(&(request.report_id.to_string(), request.turn, request.attempt))
            .cloned()
            .ok_or_else(|| BackendError::MissingFixture {
                report_id: request.report_id.to_string(),
                turn: request.turn,
                attempt: request.attempt,
            })
    }
}

fn finding_list() -> String {
    Pathology::TEMPLATE_ORDER
        .iter()
        .map(|p| p.name())
        .collect::<Vec<_>>()
        .join(", ")
}

/// The fenced answer template with `[ANSWER]` placeholders.
pub fn template_skeleton() -> String {
    render_template(|_| "[ANSWER]".to_string())
}

fn render_template(mut value: impl FnMut(Pathology) -> String) -> String {
    let mut out = String::from("``` {");
    let last = Pathology::TEMPLATE_ORDER.len() - 1;
    for (i, &p) in Pathology::TEMPLATE_ORDER.iter().enumerate() {
        if i > 0 {
            out.push_str("     ");
        }
        out.push_str(&format!("\"{}\":\n    {}", p.name(), value(p)));
        out.push_str(if i == last { "\n" } else { ",\n" });
    }
    out.push_str("} ```");
    out
}

/// A filled template, as a well-behaved model would answer.
pub fn render_answer(labels: &PathologyMap<UncertaintyClass>) -> String {
    render_template(|p| format!("\"{}\"", labels[p].answer_word()))
}

pub fn build_first_turn_prompt(report_text: &str) -> String {
    let findings = finding_list();
    format!(
        "Please accurately classify radiology reports for the presence or absence of findings. \
For each report, you will classify for the presence or absence of the following findings: {findings}.

Structure your answer like the template I provided to you delimited by triple backticks and return this template and nothing else.

ALWAYS RETURN THE FULL TEMPLATE:

{template}

If the existence of a finding is mentioned, answer \"Yes\".
If a finding is mentioned as not existing, answer \"No\".
If it cannot be determined if the patient has the findings, answer \"Maybe\".
If a finding is not mentioned in the report, answer \"Undefined\".

Important steps to consider:
1. Read the radiology report and identify any mentions of {findings}.
2. For every mention, determine if it is a positive, a negative, or an uncertain one.
3. If a finding is not mentioned in the report, answer \"Undefined\".
4. For every finding, answer \"Yes\" if it is mentioned as existing (positive), \"Maybe\" if it is mentioned as uncertain, and \"No\" if it is mentioned as not existing (negative).

Classify the following radiology report according to the template. Always output the full template, even if a finding is not mentioned.

<START OF REPORT>
{report_text}
<END OF REPORT>
<ANSWER:>",
        template = template_skeleton(),
    )
}

/// Sent once per turn when an answer cannot be parsed.
pub fn build_corrective_prompt() -> String {
    format!(
        "Your previous answer did not follow the template. Please answer again using the full template and nothing else:\n\n{}",
        template_skeleton()
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum ParseError {
    #[error("no answer template found")]
    NoTemplateFound,
    #[error("unknown answer word {word:?} for {key}")]
    UnknownAnswerWord { key: String, word: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParsedAnswer {
    pub labels: PathologyMap<UncertaintyClass>,
    pub warnings: Vec<String>,
}

/// Body of the first fenced block, else of the first brace-balanced block.
fn answer_block(text: &str) -> Option<&str> {
    if let Some(start) = text.find("```") {
        let rest = &text[start + 3..];
        if let Some(end) = rest.find("```") {
            return Some(&rest[..end]);
        }
    }
    let start = text.find('{')?;
    let mut depth = 0usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""([^"\n]+)"\s*:\s*("[^"\n]*"|'[^'\n]*'|[^,}\s]+)"#).unwrap())
}

pub fn parse_answer(text: &str) -> Result<ParsedAnswer, ParseError> {
    let block = answer_block(text).ok_or(ParseError::NoTemplateFound)?;
    let mut found: PathologyMap<Option<UncertaintyClass>> = PathologyMap::default();
    let mut warnings = Vec::new();
    let mut pairs = 0;
    for cap in pair_regex().captures_iter(block) {
        pairs += 1;
        let key = cap[1].trim();
        let raw = cap[2].trim();
        let word = raw.trim_matches(|c| c == '"' || c == '\'').trim();
        let Some(pathology) = Pathology::parse(key) else {
            warnings.push(format!("ignored unknown finding {key:?}"));
            continue;
        };
        let class = UncertaintyClass::from_answer_word(word).ok_or_else(|| ParseError::UnknownAnswerWord {
            key: key.to_string(),
            word: word.to_string(),
        })?;
        if found[pathology].replace(class).is_some() {
            warnings.push(format!(
                "{} answered more than once; last answer kept",
                pathology.name()
            ));
        }
    }
    if pairs == 0 {
        return Err(ParseError::NoTemplateFound);
    }
    for p in Pathology::TEMPLATE_ORDER {
        if found[p].is_none() {
            warnings.push(format!("{} missing from answer; treated as Undefined", p.name()));
        }
    }
    Ok(ParsedAnswer {
        labels: found.map(|_, c| c.unwrap_or_default()),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HintKind {
    Agree,
    NoMentionGroup,
    UndefinedSuggestion,
    DisagreeWithEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hint {
    pub kind: HintKind,
    pub pathologies: Vec<Pathology>,
    pub answer_word: Option<String>,
    pub sentence: Option<String>,
    pub llm_previous: Option<String>,
}

impl Hint {
    /// The hint's sentence, without the list number.
    pub fn render(&self) -> String {
        let names = self.pathologies.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ");
        let word = self.answer_word.as_deref().unwrap_or("Undefined");
        match self.kind {
            HintKind::Agree => format!("The tool agrees that the overall report should be classified as \"{word}\" for {names}."),
            HintKind::NoMentionGroup => format!("In agreement with your previous answer, the tool detected no mentions of {names}."),
            HintKind::UndefinedSuggestion => format!(
                "The tool did not detect any explicit mentions for {names} and, thus, its suggested output is \"Undefined\" for {names}."
            ),
            HintKind::DisagreeWithEvidence => format!(
                "The tool considers {names} as \"{word}\" because of the sentence \"{}\". However, you previously classified the overall report as \"{}\" for {names}.",
                self.sentence.as_deref().unwrap_or_default(),
                self.llm_previous.as_deref().unwrap_or_default(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HintError {
    #[error("labeler gave {0} a non-null label without evidence")]
    MissingEvidence(Pathology),
}

/// Hints in prompt order: agreements, the no-mention group, "Undefined"
/// suggestions, then disagreements; template order within each kind.
pub fn diff_hints(llm: &PathologyMap<UncertaintyClass>, rad: &LabelRecord) -> Result<Vec<Hint>, HintError> {
    use UncertaintyClass::Null;
    let mut agree = Vec::new();
    let mut no_mention = Vec::new();
    let mut undefined = Vec::new();
    let mut disagree = Vec::new();
    for p in Pathology::TEMPLATE_ORDER {
        let (l, r) = (llm[p], rad.labels[p]);
        let hint = |kind, answer_word: Option<&str>| Hint {
            kind,
            pathologies: vec![p],
            answer_word: answer_word.map(str::to_string),
            sentence: None,
            llm_previous: None,
        };
        if l == r && r == Null {
            no_mention.push(p);
        } else if l == r {
            agree.push(hint(HintKind::Agree, Some(r.answer_word())));
        } else if r == Null {
            undefined.push(hint(HintKind::UndefinedSuggestion, Some(r.answer_word())));
        } else {
            let evidence = rad.evidence[p].as_ref().ok_or(HintError::MissingEvidence(p))?;
            disagree.push(Hint {
                sentence: Some(evidence.sentence_text.clone()),
                llm_previous: Some(l.answer_word().to_string()),
                ..hint(HintKind::DisagreeWithEvidence, Some(r.answer_word()))
            });
        }
    }
    let mut hints = agree;
    if !no_mention.is_empty() {
        hints.push(Hint {
            kind: HintKind::NoMentionGroup,
            pathologies: no_mention,
            answer_word: None,
            sentence: None,
            llm_previous: None,
        });
    }
    hints.extend(undefined);
    hints.extend(disagree);
    Ok(hints)
}

pub fn build_second_turn_prompt(hints: &[Hint]) -> String {
    let mut out = String::from(
        "I am using a rule-based expert model to verify your answer. Here are some insights. However, those suggestions may be wrong. \
Please give me your new answer after either accepting or rejecting some or all of these suggestions:\n\n",
    );
    for (i, hint) in hints.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, hint.render()));
    }
    out.push_str("\nPlease use the same template for your revised answer:\n\n");
    out.push_str(&template_skeleton());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadPromptParams {
    pub chat: ChatParams,
    pub label: LabelOptions,
    /// Corrective re-asks allowed over both turns (at most one per turn).
    pub max_retries: u32,
}

impl Default for RadPromptParams {
    fn default() -> Self {
        RadPromptParams {
            chat: ChatParams::default(),
            label: LabelOptions::default(),
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub report_id: String,
    pub messages: Vec<ChatMessage>,
    pub first_labels: PathologyMap<UncertaintyClass>,
    pub hints: Vec<Hint>,
    pub final_labels: PathologyMap<UncertaintyClass>,
    pub retries_used: u32,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadPromptError {
    #[error("report {report_id}: backend failed: {error}")]
    Backend { report_id: String, error: BackendError },
    #[error("report {report_id}: turn {turn} answer unparseable after retries: {error}")]
    UnparseableAfterRetries {
        report_id: String,
        turn: u8,
        error: ParseError,
    },
    #[error("report {report_id}: {error}")]
    Hint { report_id: String, error: HintError },
}

impl RadPromptError {
    pub fn report_id(&self) -> &str {
        match self {
            RadPromptError::Backend { report_id, .. }
            | RadPromptError::UnparseableAfterRetries { report_id, .. }
            | RadPromptError::Hint { report_id, .. } => report_id,
        }
    }
}

struct Conversation<'a> {
    report_id: &'a str,
    backend: &'a dyn ChatBackend,
    params: &'a RadPromptParams,
    messages: Vec<ChatMessage>,
    retries: u32,
    warnings: Vec<String>,
}

impl Conversation<'_> {
    fn ask(&mut self, turn: u8, prompt: String) -> Result<PathologyMap<UncertaintyClass>, RadPromptError> {
        self.messages.push(ChatMessage::user(prompt));
        let mut attempt = 0;
        loop {
            let request = ChatRequest {
                report_id: self.report_id,
                turn,
                attempt,
                messages: &self.messages,
                params: &self.params.chat,
            };
            let answer = self.backend.send(&request).map_err(|error| RadPromptError::Backend {
                report_id: self.report_id.to_string(),
                error,
            })?;
            self.messages.push(ChatMessage::assistant(answer.clone()));
            match parse_answer(&answer) {
                Ok(parsed) => {
                    self.warnings
                        .extend(parsed.warnings.into_iter().map(|w| format!("turn {turn}: {w}")));
                    return Ok(parsed.labels);
                }
                Err(error) if attempt > 0 || self.retries >= self.params.max_retries => {
                    return Err(RadPromptError::UnparseableAfterRetries {
                        report_id: self.report_id.to_string(),
                        turn,
                        error,
                    });
                }
                Err(_) => {
                    attempt += 1;
                    self.retries += 1;
                    self.messages.push(ChatMessage::user(build_corrective_prompt()));
                }
            }
        }
    }
}

/// Report text sent to the model; falls back to the tokens when the
/// document carried no raw text.
fn report_text(graph: &ReportGraph) -> String {
    if graph.raw_text.trim().is_empty() {
        graph.tokens.join(" ")
    } else {
        graph.raw_text.clone()
    }
}

pub fn run_radprompt(
    graph: &ReportGraph,
    rules: &RuleSet,
    backend: &dyn ChatBackend,
    params: &RadPromptParams,
) -> Result<Transcript, RadPromptError> {
    let mut conversation = Conversation {
        report_id: &graph.report_id,
        backend,
        params,
        messages: Vec::with_capacity(4),
        retries: 0,
        warnings: Vec::new(),
    };
    let first_labels = conversation.ask(1, build_first_turn_prompt(&report_text(graph)))?;
    let record = label_report(graph, rules, &params.label);
    let hints = diff_hints(&first_labels, &record).map_err(|error| RadPromptError::Hint {
        report_id: graph.report_id.clone(),
        error,
    })?;
    let final_labels = conversation.ask(2, build_second_turn_prompt(&hints))?;
    Ok(Transcript {
        report_id: graph.report_id.clone(),
        messages: conversation.messages,
        first_labels,
        hints,
        final_labels,
        retries_used: conversation.retries,
        warnings: conversation.warnings,
    })
}

/// Runs every report with at most `workers` in flight; results keep input order.
pub fn run_batch(
    graphs: &[ReportGraph],
    rules: &RuleSet,
    backend: &dyn ChatBackend,
    params: &RadPromptParams,
    workers: usize,
) -> Vec<Result<Transcript, RadPromptError>> {
    exec::map_slice(Execution::with_workers(workers), graphs, |g| {
        run_radprompt(g, rules, backend, params)
    })
}
