//! Acceptance checks, one per criterion. Runs without the libtest harness
//! so that every criterion prints a PASS/FAIL line.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radpert::eval::{
    binarize, evaluate, format_improvement, improvement, replicate_values, score_corpus, BootstrapConfig, EvalOptions,
    Resampling, ScoreKey, SubTask,
};
use radpert::exec::Execution;
use radpert::kg::{Attribute, EntityLabel, RelationKind, ReportGraph};
use radpert::labeler::{aggregate, extract_mentions};
use radpert::labels::{read_label_csv, LabelRow, PathologyMap};
use radpert::matcher::{brute_force_matches, find_matches, MatchMode};
use radpert::radprompt::{parse_answer, render_answer, run_radprompt, MockBackend, RadPromptParams};
use radpert::rules::{validate_rule, EdgeKind, NodeClass, NodeConstraint, RuleEdge, RuleGraph, RuleKind, TextPattern};
use radpert::{default_rules, label_report, LabelOptions, Pathology, UncertaintyClass};
use UncertaintyClass::*;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn synthetic(name: &str) -> PathBuf {
    manifest_dir().join("../core/data/synthetic").join(name)
}

fn fixture(name: &str) -> PathBuf {
    manifest_dir().join("tests/fixtures").join(name)
}

fn radpert(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_radpert"))
        .args(args)
        .env_remove("RADPERT_ACCEPTANCE_MISSING_KEY")
        .output()
        .expect("binary runs")
}

fn ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const VOCAB: [&str; 5] = ["heart", "normal", "enlarged", "size", "effusion"];
const LABELS: [EntityLabel; 4] = [
    EntityLabel::AnatDp,
    EntityLabel::ObsDp,
    EntityLabel::ObsDa,
    EntityLabel::ObsU,
];
const KINDS: [RelationKind; 3] = [
    RelationKind::SuggestiveOf,
    RelationKind::LocatedAt,
    RelationKind::Modify,
];

fn random_graph(rng: &mut ChaCha8Rng) -> ReportGraph {
    let n = rng.gen_range(1..=8);
    let words: Vec<&str> = (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
    let mut b = ReportGraph::builder("g", words.join(" "));
    for (i, w) in words.iter().enumerate() {
        b = b.entity(format!("e{i}"), *w, i, i, LABELS[rng.gen_range(0..4)]);
    }
    for _ in 0..rng.gen_range(0..=10) {
        let (s, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        b = b.relation(format!("e{s}"), format!("e{t}"), KINDS[rng.gen_range(0..3)]);
    }
    b.build().unwrap()
}

fn random_edge_kind(rng: &mut ChaCha8Rng) -> EdgeKind {
    if rng.gen_bool(0.5) {
        EdgeKind::Any
    } else {
        EdgeKind::Kind(KINDS[rng.gen_range(0..3)])
    }
}

fn random_rule(rng: &mut ChaCha8Rng) -> RuleGraph {
    let n = rng.gen_range(1..=3);
    let nodes = (0..n)
        .map(|i| {
            let class = [NodeClass::Anatomy, NodeClass::Observation, NodeClass::Any][rng.gen_range(0..3)];
            let attribute = match (class, rng.gen_range(0..6)) {
                (NodeClass::Observation, 0) => Some(Attribute::DefinitelyPresent),
                (NodeClass::Observation, 1) => Some(Attribute::DefinitelyAbsent),
                (NodeClass::Observation, 2) => Some(Attribute::Uncertain),
                _ => None,
            };
            let pattern = match rng.gen_range(0..3) {
                0 => TextPattern::any(),
                1 => TextPattern::exact(VOCAB[rng.gen_range(0..VOCAB.len())]),
                _ => TextPattern::parse(&format!(".*{}.*", &VOCAB[rng.gen_range(0..VOCAB.len())][1..3])).unwrap(),
            };
            NodeConstraint {
                name: format!("n{i}"),
                class,
                attribute,
                pattern,
                is_anchor: i == 0,
            }
        })
        .collect();
    let mut edges = Vec::new();
    for child in 1..n {
        let parent = rng.gen_range(0..child);
        let (from, to) = if rng.gen_bool(0.5) {
            (parent, child)
        } else {
            (child, parent)
        };
        edges.push(RuleEdge {
            from,
            to,
            kind: random_edge_kind(rng),
        });
    }
    if n > 1 && rng.gen_bool(0.3) {
        let (from, to) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if from != to {
            edges.push(RuleEdge {
                from,
                to,
                kind: random_edge_kind(rng),
            });
        }
    }
    RuleGraph {
        id: "random".into(),
        pathology: Pathology::Cardiomegaly,
        kind: RuleKind::Mention,
        nodes,
        edges,
    }
}

fn criterion_1() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cases, mut with_matches) = (0, 0);
    while cases < 1000 {
        let graph = random_graph(&mut rng);
        let rule = random_rule(&mut rng);
        assert!(validate_rule(&rule).is_empty());
        for mode in [MatchMode::Monomorphism, MatchMode::Induced] {
            let mut found = find_matches(&rule, &graph, mode);
            let mut oracle = brute_force_matches(&rule, &graph, mode).unwrap();
            found.sort();
            oracle.sort();
            assert_eq!(found, oracle, "{mode:?} {rule:?} {graph:?}");
            with_matches += usize::from(!found.is_empty());
        }
        cases += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0);
    format!(
        "{cases} pairs x 2 modes agree, {with_matches} non-empty, {:.2}s",
        elapsed.as_secs_f64()
    )
}

fn criterion_2() -> String {
    use EntityLabel::*;
    use RelationKind::*;
    let rules = default_rules();
    let opts = LabelOptions::default();
    let cardio = |g: &ReportGraph| label_report(g, &rules, &opts).labels[Pathology::Cardiomegaly];

    let normal = ReportGraph::builder("a", "Heart size is normal .")
        .entity("heart", "Heart", 0, 0, AnatDp)
        .entity("size", "size", 1, 1, AnatDp)
        .entity("normal", "normal", 3, 3, ObsDp)
        .relation("size", "heart", Modify)
        .relation("normal", "heart", LocatedAt)
        .build()
        .unwrap();
    let record = label_report(&normal, &rules, &opts);
    assert_eq!(record.labels[Pathology::Cardiomegaly], Negative);
    assert_eq!(
        record.evidence[Pathology::Cardiomegaly]
            .as_ref()
            .unwrap()
            .sentence_index,
        0
    );

    let absent = ReportGraph::builder("b", "Heart is not enlarged .")
        .entity("heart", "Heart", 0, 0, AnatDp)
        .entity("enlarged", "enlarged", 3, 3, ObsDa)
        .relation("enlarged", "heart", LocatedAt)
        .build()
        .unwrap();
    let mentions = extract_mentions(&absent, &rules, Pathology::Cardiomegaly, &opts);
    assert_eq!(
        mentions.iter().map(|m| m.initial_class).collect::<Vec<_>>(),
        vec![Negative]
    );

    let double = ReportGraph::builder("c", "The heart is not enlarged but not normal .")
        .entity("heart", "heart", 1, 1, AnatDp)
        .entity("enlarged", "enlarged", 4, 4, ObsDa)
        .entity("normal", "normal", 7, 7, ObsDp)
        .relation("enlarged", "heart", LocatedAt)
        .relation("normal", "heart", LocatedAt)
        .build()
        .unwrap();
    assert_eq!(cardio(&double), Positive);

    let cofire = ReportGraph::builder("d", "Heart size is top normal .")
        .entity("heart", "Heart", 0, 0, AnatDp)
        .entity("size", "size", 1, 1, AnatDp)
        .entity("top", "top normal", 3, 4, ObsDp)
        .relation("size", "heart", Modify)
        .relation("top", "heart", LocatedAt)
        .build()
        .unwrap();
    assert_eq!(cardio(&cofire), Uncertain);

    let empty = ReportGraph::builder("e", "").build().unwrap();
    assert!(label_report(&empty, &rules, &opts).labels.values().all(|&c| c == Null));
    "5 fixtures exact".into()
}

fn criterion_3() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classes = [Negative, Uncertain, Positive];
    let n = 10_000;
    for _ in 0..n {
        let len = rng.gen_range(1..10);
        let xs: Vec<UncertaintyClass> = (0..len).map(|_| classes[rng.gen_range(0..3)]).collect();
        let agg = |v: &[UncertaintyClass]| aggregate(v).unwrap();
        assert_eq!(agg(&xs), *xs.iter().max().unwrap());
        let mut shuffled = xs.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(agg(&shuffled), agg(&xs));
        let cut = rng.gen_range(0..=len);
        let (a, b) = xs.split_at(cut);
        let parts: Vec<UncertaintyClass> = [a, b].iter().filter(|p| !p.is_empty()).map(|p| agg(p)).collect();
        assert_eq!(agg(&parts), agg(&xs));
        let doubled: Vec<UncertaintyClass> = xs.iter().chain(&xs).copied().collect();
        assert_eq!(agg(&doubled), agg(&xs));
    }
    assert_eq!(aggregate(&[]).unwrap(), Null);
    format!("{n} random lists; empty -> NULL")
}

fn criterion_4() -> String {
    let expected = [
        (Null, [false, false, false, true]),
        (Negative, [true, false, false, false]),
        (Uncertain, [false, false, true, false]),
        (Positive, [false, true, false, false]),
    ];
    let tasks = [
        SubTask::Negation,
        SubTask::PositiveMention,
        SubTask::Uncertainty,
        SubTask::Mention,
    ];
    for (class, row) in expected {
        for (task, want) in tasks.iter().zip(row) {
            assert_eq!(binarize(class, *task), want, "{class} {task:?}");
        }
    }
    "16 cells".into()
}

fn rows(columns: &[(Pathology, &[UncertaintyClass])]) -> Vec<LabelRow> {
    (0..columns[0].1.len())
        .map(|i| {
            let mut labels = PathologyMap::default();
            for &(p, classes) in columns {
                labels[p] = classes[i];
            }
            LabelRow {
                report_id: format!("r{i}"),
                labels,
            }
        })
        .collect()
}

fn criterion_5() -> String {
    let gold = rows(&[
        (
            Pathology::Edema,
            &[Positive, Positive, Negative, Uncertain, Null, Negative],
        ),
        (
            Pathology::Pneumonia,
            &[Null, Positive, Positive, Negative, Uncertain, Uncertain],
        ),
        (Pathology::Fracture, &[Positive, Null, Null, Null, Null, Null]),
    ]);
    let pred = rows(&[
        (
            Pathology::Edema,
            &[Positive, Uncertain, Negative, Positive, Negative, Null],
        ),
        (
            Pathology::Pneumonia,
            &[Null, Positive, Positive, Negative, Uncertain, Negative],
        ),
        (Pathology::Fracture, &[Positive, Null, Null, Null, Null, Null]),
    ]);
    // Reference values computed by hand from the confusion counts.
    let reference = [
        (ScoreKey::SubTask(Pathology::Edema, SubTask::Negation), 0.5),
        (ScoreKey::SubTask(Pathology::Edema, SubTask::PositiveMention), 0.5),
        (ScoreKey::SubTask(Pathology::Edema, SubTask::Uncertainty), 0.0),
        (ScoreKey::SubTask(Pathology::Edema, SubTask::Mention), 0.0),
        (ScoreKey::Weighted(Pathology::Edema), 0.4),
        (ScoreKey::SubTask(Pathology::Pneumonia, SubTask::Negation), 2.0 / 3.0),
        (ScoreKey::SubTask(Pathology::Pneumonia, SubTask::PositiveMention), 1.0),
        (ScoreKey::SubTask(Pathology::Pneumonia, SubTask::Uncertainty), 2.0 / 3.0),
        (ScoreKey::SubTask(Pathology::Pneumonia, SubTask::Mention), 1.0),
        (ScoreKey::Weighted(Pathology::Pneumonia), 0.8),
        (ScoreKey::SubTask(Pathology::Fracture, SubTask::PositiveMention), 1.0),
        (ScoreKey::SubTask(Pathology::Fracture, SubTask::Mention), 1.0),
        (ScoreKey::Weighted(Pathology::Fracture), 1.0),
        (ScoreKey::Macro, 2.2 / 3.0),
        (ScoreKey::WeightedAvg, 7.0 / 11.0),
    ];
    let scores = score_corpus(&pred, &gold).unwrap();
    let keys = ScoreKey::all();
    for (key, want) in reference {
        let got = scores.values[keys.iter().position(|&k| k == key).unwrap()].unwrap();
        assert!((got - want).abs() < 1e-12, "{key:?}: {got} vs {want}");
    }
    let options = EvalOptions {
        baseline: None,
        bootstrap: BootstrapConfig {
            resampling: Resampling::Random {
                replicates: 10,
                seed: 0,
            },
            ..Default::default()
        },
    };
    let report = evaluate(&pred, &gold, &options).unwrap();
    for (p, m) in &report.confusion {
        let mut counts = [0u64; 4];
        for g in &gold {
            counts[g.labels[*p].index()] += 1;
        }
        assert_eq!(m.row_sums(), counts);
    }
    format!("{} reference values within 1e-12; row sums match", reference.len())
}

fn criterion_6() -> String {
    let gold_path = synthetic("gold.csv");
    let gold = read_label_csv(fs::read(&gold_path).unwrap().as_slice()).unwrap();
    let options = EvalOptions::default();
    let report = evaluate(&gold, &gold, &options).unwrap();
    let mut checked = 0;
    for e in &report.entries {
        if e.support > 0 {
            let est = e.estimate.unwrap();
            assert_eq!((est.mean, est.ci_low, est.ci_high), (1.0, 1.0, 1.0), "{:?}", e.key);
            checked += 1;
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.csv");
    // Noisy predictions so that the intervals are not degenerate.
    let mut noisy = gold.clone();
    for (i, row) in noisy.iter_mut().enumerate() {
        if i % 3 == 0 {
            row.labels[Pathology::Cardiomegaly] = Positive;
        }
    }
    let mut buf = Vec::new();
    radpert::labels::write_label_csv(&mut buf, &noisy).unwrap();
    fs::write(&pred, buf).unwrap();
    let run = |name: &str, workers: &str| {
        let out_dir = dir.path().join(name);
        ok(&radpert(&[
            "eval",
            "--pred",
            s(&pred),
            "--gold",
            s(&gold_path),
            "--out-dir",
            s(&out_dir),
            "--seed",
            "7",
            "--workers",
            workers,
        ]));
        ["results.csv", "results.txt", "confusion.csv"].map(|f| fs::read(out_dir.join(f)).unwrap())
    };
    let first = run("a", "1");
    assert_eq!(first, run("b", "1"));
    assert_eq!(first, run("c", "4"));

    let small_gold = rows(&[(Pathology::Edema, &[Positive, Negative, Uncertain])]);
    let small_pred = rows(&[(Pathology::Edema, &[Positive, Positive, Uncertain])]);
    let key = ScoreKey::all()
        .iter()
        .position(|&k| k == ScoreKey::Weighted(Pathology::Edema))
        .unwrap();
    let score = |idx: &[usize]| {
        let pick = |rows: &[LabelRow]| -> Vec<LabelRow> {
            idx.iter()
                .enumerate()
                .map(|(slot, &i)| LabelRow {
                    report_id: slot.to_string(),
                    labels: rows[i].labels.clone(),
                })
                .collect()
        };
        score_corpus(&pick(&small_pred), &pick(&small_gold)).unwrap().values[key].unwrap()
    };
    let mut enumerated = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                enumerated.push(score(&[i, j, k]));
            }
        }
    }
    let exhaustive = replicate_values(3, Resampling::Exhaustive, Execution::Sequential, score);
    assert_eq!(exhaustive, enumerated);
    format!("{checked} supported scores at 1.0 [1.0, 1.0]; outputs byte-identical across reruns and 1 vs 4 workers; 27 resamples match")
}

fn criterion_7() -> String {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, rows: &[LabelRow]| {
        let path = dir.path().join(name);
        let mut buf = Vec::new();
        radpert::labels::write_label_csv(&mut buf, rows).unwrap();
        fs::write(&path, buf).unwrap();
        path
    };
    let gold_rows = rows(&[(
        Pathology::Edema,
        &[Negative, Negative, Null, Null, Null, Null, Null, Null, Null, Null],
    )]);
    let mut new_rows = gold_rows.clone();
    new_rows[1].labels[Pathology::Edema] = Null;
    let base_rows = rows(&[(Pathology::Edema, &[Null; 10])]);
    let (gold, new, base) = (
        write("gold.csv", &gold_rows),
        write("new.csv", &new_rows),
        write("base.csv", &base_rows),
    );
    let out_dir = dir.path().join("out");
    ok(&radpert(&[
        "eval",
        "--pred",
        s(&new),
        "--gold",
        s(&gold),
        "--baseline",
        s(&base),
        "--out-dir",
        s(&out_dir),
    ]));
    let table = fs::read_to_string(out_dir.join("results.txt")).unwrap();
    let line = table.lines().find(|l| l.starts_with("Edema")).unwrap();
    assert!(line.ends_with("Inf. (0.0, Inf.)"), "{line}");

    let sanity = improvement(0.816, 0.789);
    assert!((sanity - 3.4).abs() <= 0.1);
    assert_eq!(format_improvement(sanity), "3.4");
    format!(
        "zero baseline -> \"Inf. (0.0, Inf.)\"; 0.816 vs 0.789 -> {}",
        format_improvement(sanity)
    )
}

fn criterion_8() -> String {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, concurrency: &str| {
        let out_dir = dir.path().join(name);
        ok(&radpert(&[
            "radprompt",
            "--backend",
            "mock",
            "--graphs",
            s(&fixture("radprompt_reports.json")),
            "--fixtures",
            s(&fixture("radprompt_mock.jsonl")),
            "--concurrency",
            concurrency,
            "--out-dir",
            s(&out_dir),
        ]));
        out_dir
    };
    let one = run("one", "1");
    let four = run("four", "4");
    for file in ["transcripts.jsonl", "first_turn_labels.csv", "final_labels.csv"] {
        let golden = fs::read(fixture("golden").join(file)).unwrap();
        assert!(
            fs::read(one.join(file)).unwrap() == golden,
            "{file} differs from golden"
        );
        assert!(
            fs::read(four.join(file)).unwrap() == golden,
            "{file} differs at concurrency 4"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let labels = PathologyMap::from_fn(|_| UncertaintyClass::ALL[rng.gen_range(0..4)]);
        assert_eq!(parse_answer(&render_answer(&labels)).unwrap().labels, labels);
    }

    let backend = MockBackend::from_jsonl(&fs::read_to_string(fixture("radprompt_mock.jsonl")).unwrap()).unwrap();
    let graphs = radpert::parse_corpus(&fs::read(fixture("radprompt_reports.json")).unwrap()).unwrap();
    let r07 = graphs
        .into_iter()
        .map(Result::unwrap)
        .find(|g| g.report_id == "r07")
        .unwrap();
    let t = run_radprompt(&r07, &default_rules(), &backend, &RadPromptParams::default()).unwrap();
    assert_eq!(t.retries_used, 1);
    assert_eq!(t.messages.len(), 6);

    let out = radpert(&[
        "radprompt",
        "--backend",
        "http",
        "--base-url",
        "http://127.0.0.1:9",
        "--api-key-env",
        "RADPERT_ACCEPTANCE_MISSING_KEY",
        "--graphs",
        s(&fixture("radprompt_reports.json")),
        "--out-dir",
        s(&dir.path().join("http")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RADPERT_ACCEPTANCE_MISSING_KEY is not set"));
    "golden transcripts byte-identical (concurrency 1 and 4); 1000 round-trips; malformed-then-valid uses 1 retry"
        .into()
}

fn criterion_9() -> String {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.csv");
    let out_dir = dir.path().join("eval");
    let start = Instant::now();
    ok(&radpert(&[
        "label",
        "--graphs",
        s(&synthetic("reports.json")),
        "--out",
        s(&pred),
    ]));
    ok(&radpert(&[
        "eval",
        "--pred",
        s(&pred),
        "--gold",
        s(&synthetic("gold.csv")),
        "--out-dir",
        s(&out_dir),
    ]));
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "{elapsed}s");

    let csv = fs::read_to_string(&pred).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 21);
    assert!(lines.iter().all(|l| l.split(',').count() == 14));

    let table = fs::read_to_string(out_dir.join("results.txt")).unwrap();
    let weighted = table.lines().find(|l| l.starts_with("Weighted Avg.")).unwrap();
    assert!(weighted.ends_with("1.000 (1.000, 1.000)"), "{weighted}");

    let gold = read_label_csv(fs::read(synthetic("gold.csv")).unwrap().as_slice()).unwrap();
    for task in SubTask::ALL {
        let cells: Vec<bool> = gold
            .iter()
            .flat_map(|r| r.labels.values().map(|&c| binarize(c, task)).collect::<Vec<_>>())
            .collect();
        assert!(cells.contains(&true) && cells.contains(&false), "{task:?}");
    }
    for class in UncertaintyClass::ALL {
        assert!(gold.iter().any(|r| r.labels.values().any(|&c| c == class)));
    }
    format!("weighted avg 1.000 (1.000, 1.000); label + eval in {elapsed:.2}s")
}

type Check = (&'static str, fn() -> String);

fn main() {
    let criteria: [Check; 9] = [
        ("matcher equals brute-force oracle", criterion_1),
        ("pipeline golden fixtures", criterion_2),
        ("aggregation algebra", criterion_3),
        ("binarization table", criterion_4),
        ("metric fidelity", criterion_5),
        ("bootstrap", criterion_6),
        ("improvement rendering", criterion_7),
        ("prompting loop offline", criterion_8),
        ("end-to-end synthetic corpus", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(e) => {
                failures += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {}: FAIL  {name}: {msg}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
