//! Randomized properties over generated instances.

use proptest::prelude::*;

use relmark::automata::{compile, CompileLimits, TreeAutomaton};
use relmark::decomp::{decode, parse_tree_from_td, tree_decomposition, WidthMode};
use relmark::harness::acceptance::random_sigma_tree;
use relmark::harness::catalog::{gnf_queries, mso_queries};
use relmark::harness::{generate, trial, Generator, Scheme};
use relmark::logic::{Formula, QuerySpec};
use relmark::scheme_mso::{embed, parse_mark, plan_mso, MsoOptions, PlanStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kind() -> impl Strategy<Value = Generator> {
    prop_oneof![
        Just(Generator::Path),
        Just(Generator::CycleFree),
        Just(Generator::Grid),
        Just(Generator::Outerplanar),
        Just(Generator::RandomTw(2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn decompositions_are_valid(k in kind(), n in 1usize..30, seed in 0u64..1000) {
        let s = generate(k, n, seed).unwrap();
        let g = s.gaifman();
        let td = tree_decomposition(&g, WidthMode::Heuristic).unwrap();
        td.validate(&g).unwrap();
        let pt = parse_tree_from_td(&s, &td).unwrap();
        let back = decode(&pt).unwrap();
        prop_assert!(back.same_by_ids(&s));
        prop_assert_eq!(back.weights(), s.weights());
    }

    #[test]
    fn generation_is_deterministic(k in kind(), n in 1usize..30, seed in 0u64..1000) {
        let a = generate(k, n, seed).unwrap();
        let b = generate(k, n, seed).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert!(a.weights().iter().all(|w| matches!(w, Some(1..=100_000))));
    }

    #[test]
    fn direct_plans_round_trip(k in kind(), n in 2usize..16, seed in 0u64..1000, qi in 0usize..5) {
        let s = generate(k, n, seed).unwrap();
        let o = trial(&s, &mso_queries()[qi], Scheme::Mso(PlanStrategy::Direct), seed);
        prop_assert!(o.passed(), "{:?}", o);
    }

    #[test]
    fn fo_plans_round_trip(n in 4usize..40, seed in 0u64..1000, qi in 0usize..4) {
        let s = generate(Generator::Grid, n, seed).unwrap();
        let o = trial(&s, &QuerySpec::Gnf(gnf_queries()[qi].clone()), Scheme::Fo, seed);
        prop_assert!(o.passed(), "{:?}", o);
    }

    #[test]
    fn marks_change_only_pair_weights(n in 2usize..20, seed in 0u64..1000) {
        let s = generate(Generator::Path, n, seed).unwrap();
        let q = relmark::harness::catalog::has_neighbour();
        let opts = MsoOptions { strategy: PlanStrategy::Direct, ..MsoOptions::default() };
        let plan = plan_mso(&s, &q, &opts).unwrap();
        let bits: String = (0..plan.pairs.len()).map(|i| if (seed >> (i % 64)) & 1 == 1 { '1' } else { '0' }).collect();
        let m = embed(&s, &plan, &parse_mark(&bits).unwrap()).unwrap();
        let touched = plan.marked_elements(plan.pairs.len());
        for e in m.changed() {
            prop_assert!(touched.contains(&e));
        }
    }

    #[test]
    fn automaton_files_round_trip(n in 1usize..25, seed in 0u64..1000) {
        let alpha = vec!["a".to_string(), "b".to_string()];
        let f = Formula::from_json(r#"["exists","z",["and",["P_b","z"],["anc","z","y"]]]"#).unwrap();
        let vars = vec!["x".to_string(), "y".to_string()];
        let a = compile(&f, &alpha, &vars, CompileLimits::default()).unwrap();
        let b = TreeAutomaton::from_json(&a.to_json()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_sigma_tree(n, &alpha, &mut rng);
        for y in 0..n {
            prop_assert_eq!(a.accepts(&t, &[0, y]).unwrap(), b.accepts(&t, &[0, y]).unwrap());
        }
    }
}
