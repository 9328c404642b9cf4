//! Scoring of label files.
//!
//! Each pathology is scored on four binary sub-tasks derived from the
//! four-valued label: negation detection (Negative is the positive class),
//! positive-mention detection, uncertainty detection, and mention detection
//! (Null is the positive class). The per-pathology headline score is the F1
//! of the first three weighted by their gold supports.
//!
//! Confidence intervals come from a percentile bootstrap over reports.
//! Replicate `r` draws its indices from a ChaCha8 stream seeded with the
//! master seed and stream number `r`, so the replicate set is the same
//! whether replicates run sequentially or in parallel.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::labels::{LabelRow, Pathology, PathologyMap, UncertaintyClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SubTask {
    Negation,
    PositiveMention,
    Uncertainty,
    Mention,
}

impl SubTask {
    pub const ALL: [SubTask; 4] = [
        SubTask::Negation,
        SubTask::PositiveMention,
        SubTask::Uncertainty,
        SubTask::Mention,
    ];

    /// Sub-tasks entering the weighted F1.
    pub const WEIGHTED: [SubTask; 3] = [SubTask::Negation, SubTask::PositiveMention, SubTask::Uncertainty];

    pub fn name(self) -> &'static str {
        match self {
            SubTask::Negation => "negation",
            SubTask::PositiveMention => "positive_mention",
            SubTask::Uncertainty => "uncertainty",
            SubTask::Mention => "mention",
        }
    }
}

pub fn binarize(class: UncertaintyClass, task: SubTask) -> bool {
    match task {
        SubTask::Negation => class == UncertaintyClass::Negative,
        SubTask::PositiveMention => class == UncertaintyClass::Positive,
        SubTask::Uncertainty => class == UncertaintyClass::Uncertain,
        SubTask::Mention => class == UncertaintyClass::Null,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `2tp / (2tp + fp + fn)`, with 0/0 taken as 0.
pub fn f1(counts: &ConfusionCounts) -> f64 {
    let denominator = 2 * counts.tp + counts.fp + counts.fn_;
    if denominator == 0 {
        0.0
    } else {
        (2 * counts.tp) as f64 / denominator as f64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("all sub-task supports are zero")]
    AllZeroSupport,
    #[error("corpora are misaligned: missing {missing:?}, extra {extra:?}, duplicated {duplicated:?}")]
    MisalignedCorpora {
        missing: Vec<String>,
        extra: Vec<String>,
        duplicated: Vec<String>,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("replicate count must be at least 1")]
    NoReplicates,
}

/// Support-weighted mean of `(f1, support)` pairs.
pub fn weighted_f1(scores: &[(f64, u64)]) -> Result<f64, EvalError> {
    let total: u64 = scores.iter().map(|&(_, s)| s).sum();
    if total == 0 {
        return Err(EvalError::AllZeroSupport);
    }
    Ok(scores.iter().map(|&(f, s)| f * s as f64).sum::<f64>() / total as f64)
}

/// Percentage change from `base` to `new`; a rise from zero is `+inf`.
pub fn improvement(new: f64, base: f64) -> f64 {
    if base == 0.0 {
        if new > 0.0 {
            f64::INFINITY
        } else if new < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        100.0 * (new - base) / base
    }
}

/// Reorders `pred` to follow `gold`'s report ids.
pub fn align<'a>(pred: &'a [LabelRow], gold: &[LabelRow]) -> Result<Vec<&'a LabelRow>, EvalError> {
    let mut by_id: HashMap<&str, &LabelRow> = HashMap::new();
    let mut duplicated = Vec::new();
    for row in pred {
        if by_id.insert(row.report_id.as_str(), row).is_some() {
            duplicated.push(row.report_id.clone());
        }
    }
    let mut seen_gold = HashMap::new();
    for row in gold {
        if seen_gold.insert(row.report_id.as_str(), ()).is_some() {
            duplicated.push(row.report_id.clone());
        }
    }
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !by_id.contains_key(g.report_id.as_str()))
        .map(|g| g.report_id.clone())
        .collect();
    let extra: Vec<String> = pred
        .iter()
        .filter(|p| !seen_gold.contains_key(p.report_id.as_str()))
        .map(|p| p.report_id.clone())
        .collect();
    if !missing.is_empty() || !extra.is_empty() || !duplicated.is_empty() {
        return Err(EvalError::MisalignedCorpora {
            missing,
            extra,
            duplicated,
        });
    }
    Ok(gold.iter().map(|g| by_id[g.report_id.as_str()]).collect())
}

/// Rows are gold classes, columns predicted classes, both in
/// `Null, Negative, Uncertain, Positive` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix(pub [[u64; 4]; 4]);

impl ConfusionMatrix {
    pub fn add(&mut self, gold: UncertaintyClass, pred: UncertaintyClass, weight: u64) {
        self.0[gold.index()][pred.index()] += weight;
    }

    pub fn row_sums(&self) -> [u64; 4] {
        self.0.map(|row| row.iter().sum())
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> [[f64; 4]; 4] {
        self.0.map(|row| {
            let sum: u64 = row.iter().sum();
            row.map(|v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 })
        })
    }

    pub fn counts(&self, task: SubTask) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for gold in UncertaintyClass::ALL {
            for pred in UncertaintyClass::ALL {
                let n = self.0[gold.index()][pred.index()];
                match (binarize(gold, task), binarize(pred, task)) {
                    (true, true) => c.tp += n,
                    (false, true) => c.fp += n,
                    (true, false) => c.fn_ += n,
                    (false, false) => c.tn += n,
                }
            }
        }
        c
    }
}

pub fn confusion_matrix(
    pred: &[LabelRow],
    gold: &[LabelRow],
    pathology: Pathology,
) -> Result<ConfusionMatrix, EvalError> {
    let aligned = align(pred, gold)?;
    let mut m = ConfusionMatrix::default();
    for (p, g) in aligned.iter().zip(gold) {
        m.add(g.labels[pathology], p.labels[pathology], 1);
    }
    Ok(m)
}

/// Identifies one reported score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ScoreKey {
    SubTask(Pathology, SubTask),
    Weighted(Pathology),
    /// Unweighted mean of per-pathology weighted F1.
    Macro,
    /// Per-pathology weighted F1 weighted by each pathology's summed support.
    WeightedAvg,
}

impl ScoreKey {
    /// Fixed enumeration order of every score in a report.
    pub fn all() -> Vec<ScoreKey> {
        let mut keys = Vec::with_capacity(Pathology::COUNT * 5 + 2);
        for p in Pathology::ALL {
            keys.push(ScoreKey::Weighted(p));
            for t in SubTask::ALL {
                keys.push(ScoreKey::SubTask(p, t));
            }
        }
        keys.push(ScoreKey::Macro);
        keys.push(ScoreKey::WeightedAvg);
        keys
    }

    pub fn row_name(&self) -> String {
        match self {
            ScoreKey::SubTask(p, _) | ScoreKey::Weighted(p) => p.name().to_string(),
            ScoreKey::Macro => "Macro Avg.".into(),
            ScoreKey::WeightedAvg => "Weighted Avg.".into(),
        }
    }

    pub fn task_name(&self) -> &'static str {
        match self {
            ScoreKey::SubTask(_, t) => t.name(),
            _ => "weighted",
        }
    }
}

/// Every score for one (possibly resampled) corpus, in [`ScoreKey::all`]
/// order. A score is `None` when it is undefined: a weighted F1 without
/// support, or a sub-task with neither gold nor predicted positives.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<Option<f64>>,
    pub supports: Vec<u64>,
}

/// Per-report class pairs, precomputed for fast resampling.
#[derive(Debug, Clone)]
struct PairTable {
    /// `[report][pathology] = (gold, pred)`
    pairs: Vec<[(UncertaintyClass, UncertaintyClass); 13]>,
}

impl PairTable {
    fn new(pred: &[&LabelRow], gold: &[LabelRow]) -> Self {
        PairTable {
            pairs: pred
                .iter()
                .zip(gold)
                .map(|(p, g)| {
                    std::array::from_fn(|i| {
                        let pathology = Pathology::ALL[i];
                        (g.labels[pathology], p.labels[pathology])
                    })
                })
                .collect(),
        }
    }

    fn matrices(&self, multiplicity: &[u64]) -> PathologyMap<ConfusionMatrix> {
        let mut out: PathologyMap<ConfusionMatrix> = PathologyMap::default();
        for (row, &weight) in self.pairs.iter().zip(multiplicity) {
            if weight == 0 {
                continue;
            }
            for (i, &(g, p)) in row.iter().enumerate() {
                out[Pathology::ALL[i]].add(g, p, weight);
            }
        }
        out
    }
}

pub fn scores_from_matrices(matrices: &PathologyMap<ConfusionMatrix>) -> ScoreVector {
    let mut values = Vec::new();
    let mut supports = Vec::new();
    let mut macro_terms = Vec::new();
    let mut weighted_terms = Vec::new();
    for p in Pathology::ALL {
        let m = &matrices[p];
        let task_scores: Vec<(ConfusionCounts, f64)> = SubTask::ALL
            .iter()
            .map(|&t| {
                let c = m.counts(t);
                (c, f1(&c))
            })
            .collect();
        let weighted_input: Vec<(f64, u64)> = task_scores[..3].iter().map(|(c, f)| (*f, c.support())).collect();
        let total_support: u64 = weighted_input.iter().map(|&(_, s)| s).sum();
        let weighted = weighted_f1(&weighted_input).ok();
        if let Some(w) = weighted {
            macro_terms.push(w);
            weighted_terms.push((w, total_support));
        }
        values.push(weighted);
        supports.push(total_support);
        for (c, f) in task_scores {
            let defined = c.tp + c.fp + c.fn_ > 0;
            values.push(defined.then_some(f));
            supports.push(c.support());
        }
    }
    let macro_avg = (!macro_terms.is_empty()).then(|| macro_terms.iter().sum::<f64>() / macro_terms.len() as f64);
    values.push(macro_avg);
    supports.push(weighted_terms.iter().map(|&(_, s)| s).sum());
    values.push(weighted_f1(&weighted_terms).ok());
    supports.push(weighted_terms.iter().map(|&(_, s)| s).sum());
    ScoreVector { values, supports }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Random {
        replicates: usize,
        seed: u64,
    },
    /// Every one of the `n^n` index tuples, in lexicographic order.
    Exhaustive,
}

/// Indices of bootstrap replicate `replicate`.
pub fn resample_indices(n: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

fn exhaustive_tuple(n: usize, mut code: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for slot in out.iter_mut().rev() {
        *slot = code % n;
        code /= n;
    }
    out
}

fn replicate_count(n: usize, resampling: Resampling) -> usize {
    match resampling {
        Resampling::Random { replicates, .. } => replicates,
        Resampling::Exhaustive => n.pow(n as u32),
    }
}

fn replicate_tuple(n: usize, resampling: Resampling, r: usize) -> Vec<usize> {
    match resampling {
        Resampling::Random { seed, .. } => resample_indices(n, seed, r as u64),
        Resampling::Exhaustive => exhaustive_tuple(n, r),
    }
}

/// Evaluates `score` on every replicate's index tuple, in replicate order.
pub fn replicate_values<T, F>(n: usize, resampling: Resampling, exec: Execution, score: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[usize]) -> T + Sync + Send,
{
    let count = replicate_count(n, resampling);
    exec::map_indexed(exec, count, |r| score(&replicate_tuple(n, resampling, r)))
}

/// Mean and percentile interval of a replicate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let (a, b) = (sorted[lo], sorted[hi]);
    if frac == 0.0 || a == b {
        a
    } else {
        a + (b - a) * frac
    }
}

impl Estimate {
    /// `None` for an empty sample.
    pub fn from_samples(samples: &[f64], alpha: f64) -> Option<Estimate> {
        if samples.is_empty() {
            return None;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Estimate {
            mean,
            ci_low: percentile(&sorted, alpha / 2.0),
            ci_high: percentile(&sorted, 1.0 - alpha / 2.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub resampling: Resampling,
    pub alpha: f64,
    pub exec: Execution,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resampling: Resampling::Random {
                replicates: 1000,
                seed: 42,
            },
            alpha: 0.05,
            exec: Execution::default(),
        }
    }
}

/// Bootstraps an arbitrary score over aligned report rows.
pub fn bootstrap_score<F>(
    pred: &[LabelRow],
    gold: &[LabelRow],
    score: F,
    config: &BootstrapConfig,
) -> Result<Estimate, EvalError>
where
    F: Fn(&[LabelRow], &[LabelRow]) -> f64 + Sync + Send,
{
    if gold.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if replicate_count(gold.len(), config.resampling) == 0 {
        return Err(EvalError::NoReplicates);
    }
    let aligned = align(pred, gold)?;
    let samples = replicate_values(gold.len(), config.resampling, config.exec, |indices| {
        let p: Vec<LabelRow> = indices.iter().map(|&i| aligned[i].clone()).collect();
        let g: Vec<LabelRow> = indices.iter().map(|&i| gold[i].clone()).collect();
        score(&p, &g)
    });
    Ok(Estimate::from_samples(&samples, config.alpha).expect("at least one replicate"))
}

/// Point scores for an aligned corpus.
pub fn score_corpus(pred: &[LabelRow], gold: &[LabelRow]) -> Result<ScoreVector, EvalError> {
    let aligned = align(pred, gold)?;
    let table = PairTable::new(&aligned, gold);
    Ok(scores_from_matrices(&table.matrices(&vec![1; gold.len()])))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreEntry {
    pub key: ScoreKey,
    /// Full-corpus value; undefined weighted scores are reported as `None`.
    pub point: Option<f64>,
    pub support: u64,
    pub estimate: Option<Estimate>,
    pub improvement: Option<Estimate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub reports: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub entries: Vec<ScoreEntry>,
    pub confusion: Vec<(Pathology, ConfusionMatrix)>,
}

impl EvalReport {
    pub fn entry(&self, key: ScoreKey) -> &ScoreEntry {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .expect("every key is reported")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub baseline: Option<&'a [LabelRow]>,
    pub bootstrap: BootstrapConfig,
}

fn multiplicity(n: usize, indices: &[usize]) -> Vec<u64> {
    let mut m = vec![0u64; n];
    for &i in indices {
        m[i] += 1;
    }
    m
}

pub fn evaluate(pred: &[LabelRow], gold: &[LabelRow], options: &EvalOptions<'_>) -> Result<EvalReport, EvalError> {
    let n = gold.len();
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let config = &options.bootstrap;
    let replicates = replicate_count(n, config.resampling);
    if replicates == 0 {
        return Err(EvalError::NoReplicates);
    }
    let table = PairTable::new(&align(pred, gold)?, gold);
    let baseline = match options.baseline {
        Some(rows) => Some(PairTable::new(&align(rows, gold)?, gold)),
        None => None,
    };

    let full = table.matrices(&vec![1; n]);
    let point = scores_from_matrices(&full);

    let samples: Vec<(ScoreVector, Option<ScoreVector>)> =
        replicate_values(n, config.resampling, config.exec, |indices| {
            let weights = multiplicity(n, indices);
            let new = scores_from_matrices(&table.matrices(&weights));
            let base = baseline.as_ref().map(|b| scores_from_matrices(&b.matrices(&weights)));
            (new, base)
        });

    let keys = ScoreKey::all();
    let entries = keys
        .iter()
        .enumerate()
        .map(|(k, &key)| {
            let values: Vec<f64> = samples.iter().filter_map(|(s, _)| s.values[k]).collect();
            let improvement = baseline.as_ref().map(|_| {
                let deltas: Vec<f64> = samples
                    .iter()
                    .filter_map(|(s, b)| Some(improvement(s.values[k]?, b.as_ref()?.values[k]?)))
                    .collect();
                Estimate::from_samples(&deltas, config.alpha)
            });
            let point_value = match key {
                ScoreKey::SubTask(..) => point.values[k].or(Some(0.0)),
                _ => point.values[k],
            };
            ScoreEntry {
                key,
                point: point_value,
                support: point.supports[k],
                estimate: Estimate::from_samples(&values, config.alpha),
                improvement: improvement.flatten(),
            }
        })
        .collect();

    Ok(EvalReport {
        reports: n,
        replicates,
        alpha: config.alpha,
        entries,
        confusion: Pathology::ALL.iter().map(|&p| (p, full[p])).collect(),
    })
}

pub fn format_score(x: f64) -> String {
    format!("{x:.3}")
}

/// One decimal, with infinities written `Inf.`.
pub fn format_improvement(x: f64) -> String {
    if x == f64::INFINITY {
        "Inf.".into()
    } else if x == f64::NEG_INFINITY {
        "-Inf.".into()
    } else {
        format!("{x:.1}")
    }
}

pub fn format_estimate(e: &Estimate, improvement: bool) -> String {
    let f = if improvement { format_improvement } else { format_score };
    format!("{} ({}, {})", f(e.mean), f(e.ci_low), f(e.ci_high))
}

fn opt_num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Machine-readable results: one line per score.
pub fn render_results_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "pathology,task,point,support,mean,ci_low,ci_high,improvement,improvement_ci_low,improvement_ci_high\n",
    );
    for e in &report.entries {
        let est = e.estimate;
        let imp = e.improvement;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            e.key.row_name(),
            e.key.task_name(),
            opt_num(e.point),
            e.support,
            opt_num(est.map(|x| x.mean)),
            opt_num(est.map(|x| x.ci_low)),
            opt_num(est.map(|x| x.ci_high)),
            opt_num(imp.map(|x| x.mean)),
            opt_num(imp.map(|x| x.ci_low)),
            opt_num(imp.map(|x| x.ci_high)),
        );
    }
    out
}

/// Human-readable tables: weighted F1 per pathology, then each sub-task.
pub fn render_table(report: &EvalReport) -> String {
    let has_baseline = report.entries.iter().any(|e| e.improvement.is_some());
    let cell = |e: &ScoreEntry| {
        e.estimate
            .map(|x| format_estimate(&x, false))
            .unwrap_or_else(|| "n/a".into())
    };
    let imp_cell = |e: &ScoreEntry| {
        e.improvement
            .map(|x| format_estimate(&x, true))
            .unwrap_or_else(|| "n/a".into())
    };
    let mut out = String::new();
    let mut section = |title: &str, keys: Vec<ScoreKey>| {
        let _ = writeln!(out, "{title}");
        if has_baseline {
            let _ = writeln!(out, "{:<28}{:<26}Improvement % (95% CI)", "Pathology", "F1 (95% CI)");
        } else {
            let _ = writeln!(out, "{:<28}F1 (95% CI)", "Pathology");
        }
        for key in keys {
            let e = report.entry(key);
            if has_baseline {
                let _ = writeln!(out, "{:<28}{:<26}{}", key.row_name(), cell(e), imp_cell(e));
            } else {
                let _ = writeln!(out, "{:<28}{}", key.row_name(), cell(e));
            }
        }
        out.push('\n');
    };
    let mut weighted: Vec<ScoreKey> = Pathology::ALL.iter().map(|&p| ScoreKey::Weighted(p)).collect();
    weighted.push(ScoreKey::Macro);
    weighted.push(ScoreKey::WeightedAvg);
    section("Weighted F1 (negation, positive mention, uncertainty)", weighted);
    for t in SubTask::ALL {
        section(
            &format!("Sub-task: {}", t.name()),
            Pathology::ALL.iter().map(|&p| ScoreKey::SubTask(p, t)).collect(),
        );
    }
    out.truncate(out.trim_end().len());
    out.push('\n');
    out
}

/// Confusion matrices, raw counts and row-normalised, one row per gold class.
pub fn render_confusion_csv(report: &EvalReport) -> String {
    let mut out = String::from("pathology,gold,pred_null,pred_negative,pred_uncertain,pred_positive,norm_null,norm_negative,norm_uncertain,norm_positive\n");
    for (p, m) in &report.confusion {
        let norm = m.normalized();
        for gold in UncertaintyClass::ALL {
            let counts = m.0[gold.index()];
            let n = norm[gold.index()];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                p.name(),
                gold.name(),
                counts[0],
                counts[1],
                counts[2],
                counts[3],
                n[0],
                n[1],
                n[2],
                n[3]
            );
        }
    }
    out
}
