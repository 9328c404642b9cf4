mod common;

use proptest::prelude::*;
use radpert::matcher::{brute_force_matches, find_matches, verify_match, MatchMode};
use radpert::rules::validate_rule;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn search_equals_brute_force(graph in common::graph(8, 10), rule in common::rule(3)) {
        prop_assert!(validate_rule(&rule).is_empty());
        for mode in [MatchMode::Monomorphism, MatchMode::Induced] {
            let mut found = find_matches(&rule, &graph, mode);
            let mut oracle = brute_force_matches(&rule, &graph, mode).unwrap();
            for m in &found {
                prop_assert!(verify_match(&rule, &graph, m, mode).is_ok());
            }
            found.sort();
            oracle.sort();
            prop_assert_eq!(found, oracle);
        }
    }

    #[test]
    fn induced_matches_are_monomorphisms(graph in common::graph(6, 8), rule in common::rule(3)) {
        let mono = find_matches(&rule, &graph, MatchMode::Monomorphism);
        for m in find_matches(&rule, &graph, MatchMode::Induced) {
            prop_assert!(mono.contains(&m));
        }
    }
}
