//! `radpert`: label report graphs, score label files, run the two-turn
//! prompting loop and manage rule files.
//!
//! Exit codes: 0 success, 1 failure, 2 partial failure (some reports could
//! not be processed). `radprompt` uses 3 for backend failures and 4 for
//! answers that stayed unparseable after retries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use radpert::eval::{self, BootstrapConfig, EvalOptions, Resampling};
use radpert::exec::Execution;
use radpert::labeler::{label_documents, LabelOptions};
use radpert::labels::{read_label_csv, write_label_csv, LabelRow};
use radpert::radprompt::{self, ChatBackend, ChatParams, MockBackend, RadPromptError, RadPromptParams};
use radpert::rules::{default_rules_text, parse_rule_file, parse_rule_file_unchecked, validate_rules, RuleSet};
use radpert::{parse_corpus, MatchMode, Pathology};

const EXIT_PARTIAL: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_PARSE: u8 = 4;

#[derive(Parser)]
#[command(name = "radpert", version, about = "Rule-graph labeling of chest X-ray reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label a corpus of report graphs.
    Label(LabelArgs),
    /// Score predicted labels against gold labels.
    Eval(EvalArgs),
    /// Two-turn prompting of a chat model with labeler hints.
    Radprompt(RadpromptArgs),
    /// Validate or export rule files.
    Rules {
        #[command(subcommand)]
        command: RulesCommand,
    },
}

#[derive(Args, Serialize)]
struct MatcherArgs {
    /// Rule file; the bundled starter set when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Induced matching: unmatched relations between matched entities are not allowed.
    #[arg(long)]
    induced: bool,
    /// Maximum undirected distance between a modifier and its mention.
    #[arg(long, default_value_t = 1)]
    modifier_hops: usize,
}

impl MatcherArgs {
    fn options(&self) -> LabelOptions {
        LabelOptions {
            mode: if self.induced {
                MatchMode::Induced
            } else {
                MatchMode::Monomorphism
            },
            modifier_hops: self.modifier_hops,
        }
    }

    fn load(&self) -> Result<(RuleSet, String)> {
        let text = match &self.rules {
            Some(path) => read_text(path)?,
            None => default_rules_text().to_string(),
        };
        let rules = parse_rule_file(&text).map_err(|e| anyhow!("rule file: {e}"))?;
        Ok((rules, sha256(text.as_bytes())))
    }
}

#[derive(Args, Serialize)]
struct LabelArgs {
    /// RadGraph-style JSON corpus.
    #[arg(long)]
    graphs: PathBuf,
    /// Labels CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON-lines file with the evidence sentence of every non-null label.
    #[arg(long)]
    evidence: Option<PathBuf>,
    #[command(flatten)]
    matcher: MatcherArgs,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Labels to compare against; adds improvement columns.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Interval level is `1 - alpha`.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Enumerate every resample instead of drawing `--replicates` (tiny corpora only).
    #[arg(long)]
    exhaustive: bool,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args, Serialize)]
struct RadpromptArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// JSON-lines answers for the mock backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value = "https://api.openai.com/v1")]
    base_url: String,
    #[arg(long, default_value = "gpt-4-turbo")]
    model: String,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// 0 disables rate limiting.
    #[arg(long, default_value_t = 0)]
    requests_per_minute: u32,
    /// Transport attempts per request.
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
    /// Corrective re-asks allowed per report.
    #[arg(long, default_value_t = 2)]
    max_retries: u32,
    /// Reports in flight at once.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// Record HTTP requests and responses as JSON lines (replayable as mock fixtures).
    #[arg(long)]
    record: Option<PathBuf>,
    #[command(flatten)]
    matcher: MatcherArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum RulesCommand {
    /// Check a rule file and print every diagnostic.
    Validate { file: PathBuf },
    /// Print the bundled starter rules.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    read_label_csv(read_bytes(path)?.as_slice()).with_context(|| format!("reading labels {}", path.display()))
}

fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_label_csv(&mut buf, rows)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_metadata(path: &Path, command: &str, config: &impl Serialize, extra: serde_json::Value) -> Result<()> {
    let mut meta = json!({
        "tool": "radpert",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    });
    if let (Some(meta), Some(extra)) = (meta.as_object_mut(), extra.as_object()) {
        meta.extend(extra.clone());
    }
    fs::write(path, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn class_counts(rows: &[LabelRow]) -> String {
    let mut out = format!(
        "{:<28}{:>6}{:>10}{:>11}{:>10}\n",
        "Pathology", "Null", "Negative", "Uncertain", "Positive"
    );
    for p in Pathology::ALL {
        let mut counts = [0usize; 4];
        for row in rows {
            counts[row.labels[p].index()] += 1;
        }
        out.push_str(&format!(
            "{:<28}{:>6}{:>10}{:>11}{:>10}\n",
            p.name(),
            counts[0],
            counts[1],
            counts[2],
            counts[3]
        ));
    }
    out
}

fn cmd_label(args: &LabelArgs) -> Result<u8> {
    let (rules, rules_hash) = args.matcher.load()?;
    let input = read_bytes(&args.graphs)?;
    let documents = parse_corpus(&input).map_err(|e| anyhow!("{}: {e}", args.graphs.display()))?;
    let options = args.matcher.options();
    let results = label_documents(&documents, &rules, &options, Execution::with_workers(args.workers));

    let mut rows = Vec::new();
    let mut evidence = String::new();
    let mut failures = 0;
    for result in &results {
        match result {
            Ok(record) => {
                rows.push(record.row());
                for (p, e) in record.evidence.iter() {
                    if let Some(e) = e {
                        let line = json!({
                            "report_id": record.report_id,
                            "pathology": p.name(),
                            "label": record.labels[p].name(),
                            "sentence_index": e.sentence_index,
                            "sentence": e.sentence_text,
                            "entity_id": e.entity_id,
                        });
                        evidence.push_str(&format!("{line}\n"));
                    }
                }
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {e}");
            }
        }
    }
    if !results.is_empty() && failures == results.len() {
        return Err(anyhow!("no report could be labeled"));
    }

    write_labels(&args.out, &rows)?;
    if let Some(path) = &args.evidence {
        fs::write(path, evidence).with_context(|| format!("writing {}", path.display()))?;
    }
    let meta_path = PathBuf::from(format!("{}.meta.json", args.out.display()));
    write_metadata(
        &meta_path,
        "label",
        args,
        json!({
            "matcher_mode": if args.matcher.induced { "induced" } else { "monomorphism" },
            "rules_sha256": rules_hash,
            "input_sha256": sha256(&input),
            "reports": results.len(),
            "failures": failures,
        }),
    )?;
    print!("{}", class_counts(&rows));
    println!("labeled {} of {} reports", rows.len(), results.len());
    Ok(if failures > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let pred = read_labels(&args.pred)?;
    let gold = read_labels(&args.gold)?;
    let baseline = args.baseline.as_deref().map(read_labels).transpose()?;
    let options = EvalOptions {
        baseline: baseline.as_deref(),
        bootstrap: BootstrapConfig {
            resampling: if args.exhaustive {
                Resampling::Exhaustive
            } else {
                Resampling::Random {
                    replicates: args.replicates,
                    seed: args.seed,
                }
            },
            alpha: args.alpha,
            exec: Execution::with_workers(args.workers),
        },
    };
    let report = eval::evaluate(&pred, &gold, &options)?;

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let table = eval::render_table(&report);
    fs::write(args.out_dir.join("results.csv"), eval::render_results_csv(&report))?;
    fs::write(args.out_dir.join("results.txt"), &table)?;
    fs::write(args.out_dir.join("confusion.csv"), eval::render_confusion_csv(&report))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("pred", sha256(&read_bytes(&args.pred)?));
    inputs.insert("gold", sha256(&read_bytes(&args.gold)?));
    if let Some(b) = &args.baseline {
        inputs.insert("baseline", sha256(&read_bytes(b)?));
    }
    write_metadata(
        &args.out_dir.join("run_metadata.json"),
        "eval",
        args,
        json!({ "seed": args.seed, "replicates": report.replicates, "reports": report.reports, "input_sha256": inputs }),
    )?;
    print!("{table}");
    Ok(0)
}

fn cmd_radprompt(args: &RadpromptArgs) -> Result<u8> {
    let (rules, rules_hash) = args.matcher.load()?;
    let backend: Box<dyn ChatBackend> = match args.backend {
        BackendKind::Mock => {
            let path = args
                .fixtures
                .as_ref()
                .ok_or_else(|| anyhow!("--backend mock needs --fixtures"))?;
            Box::new(MockBackend::from_jsonl(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?)
        }
        BackendKind::Http => http_backend(args)?,
    };
    let input = read_bytes(&args.graphs)?;
    let documents = parse_corpus(&input).map_err(|e| anyhow!("{}: {e}", args.graphs.display()))?;
    let mut graphs = Vec::new();
    for doc in documents {
        match doc {
            Ok(g) => graphs.push(g),
            Err(e) => return Err(anyhow!("{e}")),
        }
    }
    let params = RadPromptParams {
        chat: ChatParams {
            model: args.model.clone(),
            temperature: args.temperature,
            max_tokens: args.max_tokens,
            timeout: Duration::from_secs(args.timeout_secs),
        },
        label: args.matcher.options(),
        max_retries: args.max_retries,
    };
    let results = radprompt::run_batch(&graphs, &rules, backend.as_ref(), &params, args.concurrency.max(1));

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut transcripts = String::new();
    let mut first = Vec::new();
    let mut last = Vec::new();
    let (mut backend_failures, mut parse_failures, mut other_failures) = (0, 0, 0);
    for result in &results {
        match result {
            Ok(t) => {
                transcripts.push_str(&serde_json::to_string(t)?);
                transcripts.push('\n');
                first.push(LabelRow {
                    report_id: t.report_id.clone(),
                    labels: t.first_labels.clone(),
                });
                last.push(LabelRow {
                    report_id: t.report_id.clone(),
                    labels: t.final_labels.clone(),
                });
            }
            Err(e) => {
                eprintln!("error: {e}");
                match e {
                    RadPromptError::Backend { .. } => backend_failures += 1,
                    RadPromptError::UnparseableAfterRetries { .. } => parse_failures += 1,
                    RadPromptError::Hint { .. } => other_failures += 1,
                }
            }
        }
    }
    fs::write(args.out_dir.join("transcripts.jsonl"), transcripts)?;
    write_labels(&args.out_dir.join("first_turn_labels.csv"), &first)?;
    write_labels(&args.out_dir.join("final_labels.csv"), &last)?;
    write_metadata(
        &args.out_dir.join("run_metadata.json"),
        "radprompt",
        args,
        json!({
            "rules_sha256": rules_hash,
            "input_sha256": sha256(&input),
            "reports": results.len(),
            "backend_failures": backend_failures,
            "parse_failures": parse_failures,
        }),
    )?;
    println!("completed {} of {} reports", first.len(), results.len());
    Ok(if other_failures > 0 {
        1
    } else if backend_failures > 0 {
        EXIT_BACKEND
    } else if parse_failures > 0 {
        EXIT_PARSE
    } else {
        0
    })
}

#[cfg(feature = "http")]
fn http_backend(args: &RadpromptArgs) -> Result<Box<dyn ChatBackend>> {
    use radprompt::http::{HttpBackend, HttpConfig};
    let mut config = HttpConfig::from_env(&args.base_url, &args.api_key_env)?;
    config.requests_per_minute = args.requests_per_minute;
    config.max_attempts = args.max_attempts.max(1);
    let mut backend = HttpBackend::new(config)?;
    if let Some(path) = &args.record {
        backend = backend
            .record_to(path)
            .with_context(|| format!("creating {}", path.display()))?;
    }
    Ok(Box::new(backend))
}

#[cfg(not(feature = "http"))]
fn http_backend(_: &RadpromptArgs) -> Result<Box<dyn ChatBackend>> {
    Err(anyhow!("built without the `http` feature"))
}

fn cmd_rules(command: &RulesCommand) -> Result<u8> {
    match command {
        RulesCommand::Validate { file } => {
            let text = read_text(file)?;
            let rules = match parse_rule_file_unchecked(&text) {
                Ok(rules) => rules,
                Err(e) => {
                    println!("{}: {e}", file.display());
                    println!("1 errors");
                    return Ok(1);
                }
            };
            let diagnostics = validate_rules(&rules);
            for d in &diagnostics {
                println!("{}: {d}", file.display());
            }
            println!("{} rules, {} errors", rules.len(), diagnostics.len());
            Ok(if diagnostics.is_empty() { 0 } else { 1 })
        }
        RulesCommand::Export { out } => {
            match out {
                Some(path) => {
                    fs::write(path, default_rules_text()).with_context(|| format!("writing {}", path.display()))?
                }
                None => std::io::stdout().write_all(default_rules_text().as_bytes())?,
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Label(args) => cmd_label(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Radprompt(args) => cmd_radprompt(args),
        Command::Rules { command } => cmd_rules(command),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
