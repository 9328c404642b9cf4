//! Node- and edge-coloured subgraph matching of rule graphs against report
//! graphs.
//!
//! A match maps every rule node to a distinct entity that satisfies the
//! node's class, attribute and text pattern, such that every rule edge
//! `u -k-> v` is realised by a relation of kind `k` (any kind for `ANY`) from
//! the image of `u` to the image of `v`. Under [`MatchMode::Induced`] the
//! matched entities may additionally carry no relation that is not explained
//! by a rule edge between the corresponding nodes in the same direction.

use std::collections::HashMap;

use thiserror::Error;

use crate::kg::{RelationKind, ReportGraph};
use crate::rules::{EdgeKind, RuleGraph, MAX_RULE_NODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    #[default]
    Monomorphism,
    Induced,
}

/// Rule node `i` maps to `graph.entities[assignment[i]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Match {
    pub assignment: Vec<usize>,
}

impl Match {
    pub fn entity_ids<'g>(&self, graph: &'g ReportGraph) -> Vec<&'g str> {
        self.assignment.iter().map(|&i| graph.entities[i].id.as_str()).collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("rule {rule} has {nodes} nodes; exhaustive search supports at most {MAX_RULE_NODES}")]
    RuleTooLarge { rule: String, nodes: usize },
}

fn kind_bit(kind: RelationKind) -> u8 {
    match kind {
        RelationKind::SuggestiveOf => 1,
        RelationKind::LocatedAt => 2,
        RelationKind::Modify => 4,
    }
}

fn edge_mask(kind: EdgeKind) -> u8 {
    match kind {
        EdgeKind::Any => 0b111,
        EdgeKind::Kind(k) => kind_bit(k),
    }
}

/// Relation lookup tables for one report, reusable across rules.
#[derive(Debug)]
pub struct GraphIndex<'g> {
    graph: &'g ReportGraph,
    /// Bitmask of relation kinds per ordered entity pair.
    kinds: HashMap<(usize, usize), u8>,
    /// Entities joined to each entity by a relation in either direction.
    neighbours: Vec<Vec<usize>>,
}

impl<'g> GraphIndex<'g> {
    pub fn new(graph: &'g ReportGraph) -> Self {
        let positions: HashMap<&str, usize> = graph
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        let mut kinds: HashMap<(usize, usize), u8> = HashMap::new();
        let mut neighbours = vec![Vec::new(); graph.entities.len()];
        for r in &graph.relations {
            let (Some(&s), Some(&t)) = (positions.get(r.source.as_str()), positions.get(r.target.as_str())) else {
                continue;
            };
            *kinds.entry((s, t)).or_default() |= kind_bit(r.kind);
            neighbours[s].push(t);
            neighbours[t].push(s);
        }
        for list in &mut neighbours {
            list.sort_unstable();
            list.dedup();
        }
        GraphIndex {
            graph,
            kinds,
            neighbours,
        }
    }

    pub fn graph(&self) -> &'g ReportGraph {
        self.graph
    }

    pub fn relation_kinds(&self, source: usize, target: usize) -> u8 {
        self.kinds.get(&(source, target)).copied().unwrap_or(0)
    }

    pub fn neighbours(&self, entity: usize) -> &[usize] {
        &self.neighbours[entity]
    }

    /// All matches of `rule`, deduplicated and ordered by the anchor's start
    /// token, then by assignment.
    pub fn find(&self, rule: &RuleGraph, mode: MatchMode) -> Vec<Match> {
        let n = rule.nodes.len();
        if n == 0 {
            return Vec::new();
        }
        let candidates: Vec<Vec<usize>> = rule
            .nodes
            .iter()
            .map(|node| {
                self.graph
                    .entities
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| node.accepts(e))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        if candidates.iter().any(Vec::is_empty) {
            return Vec::new();
        }

        // Most constrained node first.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&u| (candidates[u].len(), u));

        // required[u][v]: masks of rule edges u -> v, each needing a relation.
        let mut required: Vec<Vec<Vec<u8>>> = vec![vec![Vec::new(); n]; n];
        let mut allowed = vec![vec![0u8; n]; n];
        for e in &rule.edges {
            required[e.from][e.to].push(edge_mask(e.kind));
            allowed[e.from][e.to] |= edge_mask(e.kind);
        }

        let mut search = Search {
            index: self,
            mode,
            candidates: &candidates,
            order: &order,
            required: &required,
            allowed: &allowed,
            assignment: vec![usize::MAX; n],
            used: vec![false; self.graph.entities.len()],
            found: Vec::new(),
        };
        search.extend(0);
        let mut found = search.found;
        sort_matches(rule, self.graph, &mut found);
        found
    }
}

struct Search<'a, 'g> {
    index: &'a GraphIndex<'g>,
    mode: MatchMode,
    candidates: &'a [Vec<usize>],
    order: &'a [usize],
    required: &'a [Vec<Vec<u8>>],
    allowed: &'a [Vec<u8>],
    assignment: Vec<usize>,
    used: Vec<bool>,
    found: Vec<Match>,
}

impl Search<'_, '_> {
    fn extend(&mut self, depth: usize) {
        if depth == self.order.len() {
            self.found.push(Match {
                assignment: self.assignment.clone(),
            });
            return;
        }
        let node = self.order[depth];
        for &entity in &self.candidates[node] {
            if self.used[entity] || !self.consistent(depth, node, entity) {
                continue;
            }
            self.used[entity] = true;
            self.assignment[node] = entity;
            self.extend(depth + 1);
            self.assignment[node] = usize::MAX;
            self.used[entity] = false;
        }
    }

    /// Checks the edges between `node` (placed on `entity`) and every node
    /// already assigned at a shallower depth.
    fn consistent(&self, depth: usize, node: usize, entity: usize) -> bool {
        for &other in &self.order[..depth] {
            let image = self.assignment[other];
            let forward = self.index.relation_kinds(entity, image);
            let backward = self.index.relation_kinds(image, entity);
            if self.required[node][other].iter().any(|&m| forward & m == 0)
                || self.required[other][node].iter().any(|&m| backward & m == 0)
            {
                return false;
            }
            if self.mode == MatchMode::Induced
                && (forward & !self.allowed[node][other] != 0 || backward & !self.allowed[other][node] != 0)
            {
                return false;
            }
        }
        true
    }
}

fn sort_matches(rule: &RuleGraph, graph: &ReportGraph, matches: &mut Vec<Match>) {
    let anchor = rule.anchor().unwrap_or(0);
    matches.sort_by(|a, b| {
        let ka = graph.entities[a.assignment[anchor]].start_token;
        let kb = graph.entities[b.assignment[anchor]].start_token;
        ka.cmp(&kb).then_with(|| a.assignment.cmp(&b.assignment))
    });
    matches.dedup();
}

pub fn find_matches(rule: &RuleGraph, graph: &ReportGraph, mode: MatchMode) -> Vec<Match> {
    GraphIndex::new(graph).find(rule, mode)
}

/// Checks every match invariant directly against the graph's relation list.
/// Shares no code with the backtracking search.
pub fn verify_match(rule: &RuleGraph, graph: &ReportGraph, m: &Match, mode: MatchMode) -> Result<(), String> {
    if m.assignment.len() != rule.nodes.len() {
        return Err("assignment is not total".into());
    }
    for (i, &a) in m.assignment.iter().enumerate() {
        if a >= graph.entities.len() {
            return Err(format!("node {i} maps outside the graph"));
        }
        if m.assignment[..i].contains(&a) {
            return Err(format!("node {i} reuses entity {a}"));
        }
        if !rule.nodes[i].accepts(&graph.entities[a]) {
            return Err(format!("node {i} constraint fails on entity {a}"));
        }
    }
    let ids: Vec<&str> = m.assignment.iter().map(|&a| graph.entities[a].id.as_str()).collect();
    for e in &rule.edges {
        let present = graph
            .relations
            .iter()
            .any(|r| r.source == ids[e.from] && r.target == ids[e.to] && e.kind.admits(r.kind));
        if !present {
            return Err(format!("rule edge {} -> {} has no relation", e.from, e.to));
        }
    }
    if mode == MatchMode::Induced {
        for r in &graph.relations {
            let (Some(s), Some(t)) = (
                ids.iter().position(|id| *id == r.source),
                ids.iter().position(|id| *id == r.target),
            ) else {
                continue;
            };
            let explained = rule
                .edges
                .iter()
                .any(|e| e.from == s && e.to == t && e.kind.admits(r.kind));
            if !explained {
                return Err(format!("relation {} -> {} is not in the rule", r.source, r.target));
            }
        }
    }
    Ok(())
}

/// Enumerates every injective assignment and keeps those passing
/// [`verify_match`]. Exponential in rule size; capped at
/// [`MAX_RULE_NODES`] nodes.
pub fn brute_force_matches(rule: &RuleGraph, graph: &ReportGraph, mode: MatchMode) -> Result<Vec<Match>, MatchError> {
    if rule.nodes.len() > MAX_RULE_NODES {
        return Err(MatchError::RuleTooLarge {
            rule: rule.id.clone(),
            nodes: rule.nodes.len(),
        });
    }
    if rule.nodes.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(rule.nodes.len());
    enumerate_injective(
        graph.entities.len(),
        rule.nodes.len(),
        &mut current,
        &mut |assignment| {
            let m = Match {
                assignment: assignment.to_vec(),
            };
            if verify_match(rule, graph, &m, mode).is_ok() {
                out.push(m);
            }
        },
    );
    sort_matches(rule, graph, &mut out);
    Ok(out)
}

fn enumerate_injective(n: usize, k: usize, current: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if current.len() == k {
        visit(current);
        return;
    }
    for e in 0..n {
        if !current.contains(&e) {
            current.push(e);
            enumerate_injective(n, k, current, visit);
            current.pop();
        }
    }
}
