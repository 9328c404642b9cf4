#![allow(dead_code)]

use proptest::prelude::*;
use radpert::kg::Attribute;
use radpert::kg::{EntityLabel, RelationKind, ReportGraph};
use radpert::labels::Pathology;
use radpert::rules::{EdgeKind, NodeClass, NodeConstraint, RuleEdge, RuleGraph, RuleKind, TextPattern};

pub const VOCAB: [&str; 5] = ["heart", "normal", "enlarged", "size", "effusion"];

pub fn label() -> impl Strategy<Value = EntityLabel> {
    prop_oneof![
        Just(EntityLabel::AnatDp),
        Just(EntityLabel::ObsDp),
        Just(EntityLabel::ObsDa),
        Just(EntityLabel::ObsU),
    ]
}

pub fn relation_kind() -> impl Strategy<Value = RelationKind> {
    prop_oneof![
        Just(RelationKind::SuggestiveOf),
        Just(RelationKind::LocatedAt),
        Just(RelationKind::Modify),
    ]
}

/// One single-token entity per word, up to `max_entities`, and up to
/// `max_relations` random relations (self-loops and duplicates are dropped
/// by the builder).
pub fn graph(max_entities: usize, max_relations: usize) -> impl Strategy<Value = ReportGraph> {
    (1..=max_entities)
        .prop_flat_map(move |n| {
            (
                prop::collection::vec((0..VOCAB.len(), label()), n),
                prop::collection::vec((0..n, 0..n, relation_kind()), 0..=max_relations),
            )
        })
        .prop_map(|(entities, relations)| {
            let words: Vec<&str> = entities.iter().map(|&(w, _)| VOCAB[w]).collect();
            let mut b = ReportGraph::builder("g", words.join(" "));
            for (i, &(w, l)) in entities.iter().enumerate() {
                b = b.entity(format!("e{i}"), VOCAB[w], i, i, l);
            }
            for (s, t, k) in relations {
                b = b.relation(format!("e{s}"), format!("e{t}"), k);
            }
            b.build().expect("generated graphs are valid")
        })
}

fn node(i: usize) -> impl Strategy<Value = NodeConstraint> {
    let class = prop_oneof![
        Just(NodeClass::Anatomy),
        Just(NodeClass::Observation),
        Just(NodeClass::Any)
    ];
    let attribute = prop_oneof![
        3 => Just(None),
        1 => Just(Some(Attribute::DefinitelyPresent)),
        1 => Just(Some(Attribute::DefinitelyAbsent)),
        1 => Just(Some(Attribute::Uncertain)),
    ];
    let pattern = prop_oneof![
        2 => Just(TextPattern::any()),
        2 => (0..VOCAB.len()).prop_map(|w| TextPattern::exact(VOCAB[w])),
        1 => (0..VOCAB.len()).prop_map(|w| TextPattern::parse(&format!(".*{}.*", &VOCAB[w][1..3])).unwrap()),
    ];
    (class, attribute, pattern).prop_map(move |(class, attribute, pattern)| NodeConstraint {
        name: format!("n{i}"),
        class,
        attribute: if class == NodeClass::Observation {
            attribute
        } else {
            None
        },
        pattern,
        is_anchor: i == 0,
    })
}

fn edge_kind() -> impl Strategy<Value = EdgeKind> {
    prop_oneof![
        2 => Just(EdgeKind::Any),
        1 => relation_kind().prop_map(EdgeKind::Kind),
    ]
}

/// Connected rules of up to `max_nodes` nodes with node 0 as anchor: a
/// random spanning tree plus optional extra edges.
pub fn rule(max_nodes: usize) -> impl Strategy<Value = RuleGraph> {
    (1..=max_nodes).prop_flat_map(|n| {
        let nodes: Vec<_> = (0..n).map(node).collect();
        let tree = (1..n).map(|i| (0..i, any::<bool>(), edge_kind())).collect::<Vec<_>>();
        let extra = prop::collection::vec((0..n, 0..n, edge_kind()), 0..=1);
        (nodes, tree, extra).prop_map(move |(nodes, tree, extra)| {
            let mut edges = Vec::new();
            for (i, (parent, forward, kind)) in tree.into_iter().enumerate() {
                let child = i + 1;
                let (from, to) = if forward { (parent, child) } else { (child, parent) };
                edges.push(RuleEdge { from, to, kind });
            }
            for (from, to, kind) in extra {
                if from != to {
                    edges.push(RuleEdge { from, to, kind });
                }
            }
            RuleGraph {
                id: "random".into(),
                pathology: Pathology::Cardiomegaly,
                kind: RuleKind::Mention,
                nodes,
                edges,
            }
        })
    })
}
