//! Pair selection over a pebbled tree automaton: disjoint regions, each with
//! two nodes the automaton cannot tell apart from outside the region.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::automata::{Automaton, Runner, SigmaTree};
use crate::error::Result;

/// `m^m` saturating at `u128::MAX`.
pub fn self_power(m: u128) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..m {
        acc = match acc.checked_mul(m) {
            Some(v) => v,
            None => return u128::MAX,
        };
    }
    acc
}

/// Pair count guaranteed for `y` candidates and `m` states.
pub fn lemma_floor(y: usize, m: u128) -> usize {
    let den = self_power(m).saturating_mul(4).saturating_add(4);
    (y as u128 / den) as usize
}

/// Smallest candidate count for which the selection is attempted.
pub fn lemma_minimum(m: u128) -> u128 {
    self_power(m).saturating_mul(2).saturating_add(2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub members: Vec<usize>,
    pub lca: usize,
    /// Forest parent and children, as indices into the group list.
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Repeatedly removes a minimal subtree holding at least `threshold` of the
/// remaining candidates, in post-order, then links groups by lca ancestry.
pub fn harvest_groups(tree: &SigmaTree, y: &BTreeSet<usize>, threshold: u128) -> Vec<Group> {
    let n = tree.len();
    let mut remaining: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut groups: Vec<Group> = Vec::new();
    if threshold == 0 || (y.len() as u128) < threshold {
        return groups;
    }
    for &u in tree.postorder() {
        let node = tree.node(u);
        let mut here = Vec::new();
        for c in [node.left, node.right].into_iter().flatten() {
            here.append(&mut remaining[c]);
        }
        if y.contains(&u) {
            here.push(u);
        }
        if here.len() as u128 >= threshold {
            here.sort_unstable();
            let lca = here[1..].iter().fold(here[0], |a, &b| tree.lca(a, b));
            groups.push(Group {
                members: here,
                lca,
                parent: None,
                children: Vec::new(),
            });
        } else {
            remaining[u] = here;
        }
    }
    let depth = depths(tree);
    for j in 0..groups.len() {
        let parent = (0..groups.len())
            .filter(|&i| i != j && tree.is_ancestor(groups[i].lca, groups[j].lca))
            .max_by_key(|&i| depth[groups[i].lca]);
        groups[j].parent = parent;
        if let Some(p) = parent {
            groups[p].children.push(j);
        }
    }
    groups
}

fn depths(tree: &SigmaTree) -> Vec<usize> {
    let mut d = vec![0usize; tree.len()];
    for &u in tree.postorder().iter().rev() {
        let node = tree.node(u);
        for c in [node.left, node.right].into_iter().flatten() {
            d[c] = d[u] + 1;
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairCase {
    Leaf,
    Chain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePair {
    pub b: usize,
    pub bp: usize,
    pub region: Vec<usize>,
    pub lca: usize,
    /// Root of the excised child subtree in the chain case.
    pub excised: Option<usize>,
    pub case: PairCase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub pairs: Vec<NodePair>,
    pub automaton_hash: String,
    pub r: usize,
    pub states: u128,
    pub candidates: usize,
    pub groups: usize,
    pub discarded_groups: usize,
    pub floor: usize,
    pub diagnostic: Option<String>,
}

impl PairPlan {
    pub fn empty(automaton_hash: String, r: usize, states: u128, candidates: usize, diagnostic: Option<String>) -> Self {
        PairPlan {
            pairs: Vec::new(),
            automaton_hash,
            r,
            states,
            candidates,
            groups: 0,
            discarded_groups: 0,
            floor: 0,
            diagnostic,
        }
    }

    pub fn regions_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.pairs
            .iter()
            .all(|p| p.region.iter().all(|&u| seen.insert(u)))
    }
}

fn flags_for<A: Automaton + ?Sized>(a: &A, tree: &SigmaTree, b: usize) -> Vec<u32> {
    let mut f = vec![0u32; tree.len()];
    f[b] = 1 << (a.pebbles() - 1);
    f
}

fn region(tree: &SigmaTree, lca: usize, excised: Option<usize>) -> Vec<usize> {
    let mut v: Vec<usize> = tree
        .subtree(lca)
        .into_iter()
        .filter(|&u| excised.is_none_or(|c| !tree.is_ancestor(c, u)))
        .collect();
    v.sort_unstable();
    v
}

/// Lexicographically smallest pair inside any class of equal keys.
fn smallest_pair<K: Ord>(keyed: Vec<(usize, K)>) -> Option<(usize, usize)> {
    let mut classes: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (b, k) in keyed {
        classes.entry(k).or_default().push(b);
    }
    classes
        .into_values()
        .filter(|c| c.len() >= 2)
        .map(|mut c| {
            c.sort_unstable();
            (c[0], c[1])
        })
        .min()
}

/// Chain function `q ↦ state at lca` with `b` pebbled and the child subtree
/// replaced by `q`.
pub fn chain_table<A: Automaton + ?Sized>(
    runner: &Runner<A>,
    lca: usize,
    excised: usize,
    b: usize,
) -> Result<Vec<u64>> {
    let a = runner.automaton;
    let flags = flags_for(a, runner.tree, b);
    let m = u64::try_from(a.state_count()).unwrap_or(u64::MAX);
    (0..m)
        .map(|q| runner.state_with_flags(lca, &flags, Some((excised, q))))
        .collect()
}

fn leaf_state<A: Automaton + ?Sized>(runner: &Runner<A>, lca: usize, b: usize) -> Result<u64> {
    let flags = flags_for(runner.automaton, runner.tree, b);
    runner.state_with_flags(lca, &flags, None)
}

/// Selects indistinguishable pairs for an automaton whose last pebble is the
/// output position and whose first `r` pebbles are parameters.
pub fn select_pairs<A: Automaton + ?Sized>(
    automaton: &A,
    tree: &SigmaTree,
    y: &BTreeSet<usize>,
    r: usize,
) -> Result<PairPlan> {
    let hash = automaton.fingerprint();
    if automaton.pebbles() != r + 1 {
        return Err(crate::Error::Automaton(format!(
            "automaton has {} pebbles, expected {}",
            automaton.pebbles(),
            r + 1
        )));
    }
    let m = automaton.state_count();
    let needed = lemma_minimum(m);
    if (y.len() as u128) < needed {
        return Ok(PairPlan::empty(
            hash,
            r,
            m,
            y.len(),
            Some(format!(
                "capacity 0: {} candidates, {} states need at least {}",
                y.len(),
                m,
                fmt_count(needed)
            )),
        ));
    }
    let runner = Runner::new(automaton, tree)?;
    let groups = harvest_groups(tree, y, self_power(m) + 1);
    let mut pairs = Vec::new();
    let mut discarded = 0;
    for g in &groups {
        let (case, excised) = match g.children.as_slice() {
            [] => (PairCase::Leaf, None),
            [c] => (PairCase::Chain, Some(groups[*c].lca)),
            _ => {
                discarded += 1;
                continue;
            }
        };
        let found = match excised {
            None => smallest_pair(
                g.members
                    .iter()
                    .map(|&b| Ok((b, leaf_state(&runner, g.lca, b)?)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(c) => smallest_pair(
                g.members
                    .iter()
                    .map(|&b| Ok((b, chain_table(&runner, g.lca, c, b)?)))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        if let Some((b, bp)) = found {
            pairs.push(NodePair {
                b,
                bp,
                region: region(tree, g.lca, excised),
                lca: g.lca,
                excised,
                case,
            });
        }
    }
    Ok(PairPlan {
        pairs,
        automaton_hash: hash,
        r,
        states: m,
        candidates: y.len(),
        groups: groups.len(),
        discarded_groups: discarded,
        floor: lemma_floor(y.len(), m),
        diagnostic: None,
    })
}

pub(crate) fn fmt_count(x: u128) -> String {
    if x == u128::MAX {
        "more than 2^128".into()
    } else {
        x.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairViolation {
    pub pair: usize,
    pub params: Vec<usize>,
    /// Seed state for a chain-table mismatch.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PairReport {
    pub pairs: usize,
    pub placements_checked: u64,
    pub chain_seeds_checked: u64,
    pub violations: Vec<PairViolation>,
    pub disjoint: bool,
}

impl PairReport {
    pub fn passed(&self) -> bool {
        self.disjoint && self.violations.is_empty()
    }
}

/// Checks every parameter tuple avoiding each region, plus the chain tables.
pub fn verify_pair_plan<A: Automaton + ?Sized>(
    automaton: &A,
    tree: &SigmaTree,
    plan: &PairPlan,
) -> Result<PairReport> {
    let runner = Runner::new(automaton, tree)?;
    let r = plan.r;
    let n = tree.len();
    let mut report = PairReport {
        pairs: plan.pairs.len(),
        disjoint: plan.regions_disjoint(),
        ..PairReport::default()
    };
    for (i, p) in plan.pairs.iter().enumerate() {
        let inside: BTreeSet<usize> = p.region.iter().copied().collect();
        let outside: Vec<usize> = (0..n).filter(|u| !inside.contains(u)).collect();
        if !inside.contains(&p.b) || !inside.contains(&p.bp) || p.b == p.bp {
            report.violations.push(PairViolation {
                pair: i,
                params: Vec::new(),
                seed: None,
            });
            continue;
        }
        let mut idx = vec![0usize; r];
        let total = (outside.len() as u64).pow(r as u32);
        if !outside.is_empty() || r == 0 {
            for _ in 0..total {
                let mut peb: Vec<usize> = idx.iter().map(|&k| outside[k]).collect();
                peb.push(p.b);
                let q1 = runner.root_state(&peb)?;
                peb[r] = p.bp;
                let q2 = runner.root_state(&peb)?;
                report.placements_checked += 1;
                if q1 != q2 {
                    report.violations.push(PairViolation {
                        pair: i,
                        params: peb[..r].to_vec(),
                        seed: None,
                    });
                }
                for k in idx.iter_mut() {
                    *k += 1;
                    if *k < outside.len() {
                        break;
                    }
                    *k = 0;
                }
            }
        }
        if let Some(c) = p.excised {
            let t1 = chain_table(&runner, p.lca, c, p.b)?;
            let t2 = chain_table(&runner, p.lca, c, p.bp)?;
            for (q, (a, b)) in t1.iter().zip(&t2).enumerate() {
                report.chain_seeds_checked += 1;
                if a != b {
                    report.violations.push(PairViolation {
                        pair: i,
                        params: Vec::new(),
                        seed: Some(q as u64),
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GrossGroup {
    pub lca: usize,
    pub members: Vec<usize>,
    pub case: PairCase,
    /// One pair per seed state, chosen from members not used by earlier states.
    pub per_state: Vec<Option<(usize, usize)>>,
    /// A single pair agreeing on every seed state, if one exists.
    pub uniform: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GrossAudit {
    pub threshold: u128,
    pub groups: Vec<GrossGroup>,
    /// Chain groups without a uniform pair.
    pub flagged: usize,
    /// Groups where the per-state induction ran out of members.
    pub per_state_failures: usize,
}

impl GrossAudit {
    pub fn clean(&self) -> bool {
        self.flagged == 0
    }
}

/// The per-state selection with groups of at least `threshold` candidates
/// (`2m` in the original variant), audited for a pair valid for all seeds.
pub fn gross_select_pairs<A: Automaton + ?Sized>(
    automaton: &A,
    tree: &SigmaTree,
    y: &BTreeSet<usize>,
    threshold: u128,
) -> Result<GrossAudit> {
    let runner = Runner::new(automaton, tree)?;
    let groups = harvest_groups(tree, y, threshold);
    let mut out = Vec::new();
    let (mut flagged, mut failures) = (0, 0);
    for g in &groups {
        match g.children.as_slice() {
            [] => {
                let keyed = g
                    .members
                    .iter()
                    .map(|&b| Ok((b, leaf_state(&runner, g.lca, b)?)))
                    .collect::<Result<Vec<_>>>()?;
                let pair = smallest_pair(keyed);
                if pair.is_none() {
                    failures += 1;
                }
                out.push(GrossGroup {
                    lca: g.lca,
                    members: g.members.clone(),
                    case: PairCase::Leaf,
                    per_state: vec![pair],
                    uniform: pair,
                });
            }
            [c] => {
                let c = groups[*c].lca;
                let tables: BTreeMap<usize, Vec<u64>> = g
                    .members
                    .iter()
                    .map(|&b| Ok((b, chain_table(&runner, g.lca, c, b)?)))
                    .collect::<Result<_>>()?;
                let mut used = BTreeSet::new();
                let mut per_state = Vec::new();
                for q in 0..tables.values().next().map_or(0, Vec::len) {
                    let keyed: Vec<(usize, u64)> = tables
                        .iter()
                        .filter(|(b, _)| !used.contains(*b))
                        .map(|(&b, t)| (b, t[q]))
                        .collect();
                    let pair = smallest_pair(keyed);
                    match pair {
                        Some((b, _)) => {
                            used.insert(b);
                        }
                        None => failures += 1,
                    }
                    per_state.push(pair);
                }
                let uniform = smallest_pair(tables.into_iter().collect());
                if uniform.is_none() {
                    flagged += 1;
                }
                out.push(GrossGroup {
                    lca: g.lca,
                    members: g.members.clone(),
                    case: PairCase::Chain,
                    per_state,
                    uniform,
                });
            }
            _ => {}
        }
    }
    Ok(GrossAudit {
        threshold,
        groups: out,
        flagged,
        per_state_failures: failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::{compile, CompileLimits, TreeAutomaton};
    use crate::logic::Formula;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn complete(depth: u32) -> SigmaTree {
        let n = (1usize << (depth + 1)) - 1;
        let spec = (0..n)
            .map(|u| {
                let l = 2 * u + 1;
                if l < n {
                    (0, Some(l), Some(l + 1))
                } else {
                    (0, None, None)
                }
            })
            .collect();
        SigmaTree::new(vec!["a".into()], spec).unwrap()
    }

    pub(crate) fn random_tree(n: usize, seed: u64) -> SigmaTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec: Vec<(usize, Option<usize>, Option<usize>)> = vec![(0, None, None); n];
        for u in 1..n {
            loop {
                let p = rng.gen_range(0..u);
                if spec[p].1.is_none() {
                    spec[p].1 = Some(u);
                    break;
                }
                if spec[p].2.is_none() {
                    spec[p].2 = Some(u);
                    break;
                }
            }
            spec[u].0 = rng.gen_range(0..2);
        }
        SigmaTree::new(vec!["a".into(), "b".into()], spec).unwrap()
    }

    #[test]
    fn floors() {
        assert_eq!(self_power(1), 1);
        assert_eq!(self_power(2), 4);
        assert_eq!(self_power(3), 27);
        assert_eq!(self_power(40), u128::MAX);
        assert_eq!(lemma_floor(8, 1), 1);
        assert_eq!(lemma_floor(7, 1), 0);
    }

    #[test]
    fn harvest_examples() {
        let t = complete(3);
        let leaves: BTreeSet<usize> = (7..15).collect();
        assert!(harvest_groups(&t, &leaves, 9).is_empty());
        let g = harvest_groups(&t, &leaves, 2);
        assert_eq!(g.len(), 4);
        assert!(g.iter().all(|g| g.members.len() == 2 && g.children.is_empty()));

        // caterpillar: spine nodes with one leaf each
        let n = 21;
        let mut spec = vec![(0, None, None); n];
        for i in 0..10 {
            spec[2 * i] = (0, Some(2 * i + 1), Some(2 * i + 2));
        }
        let t = SigmaTree::new(vec!["a".into()], spec).unwrap();
        let all: BTreeSet<usize> = (0..n).collect();
        for th in 2..6u128 {
            let groups = harvest_groups(&t, &all, th);
            assert!(!groups.is_empty());
            let mut seen = BTreeSet::new();
            for g in &groups {
                assert!((g.members.len() as u128) >= th && (g.members.len() as u128) < 2 * th);
                assert!(g.members.iter().all(|&u| seen.insert(u)));
            }
            assert!(groups.len() as u128 >= n as u128 / (2 * th));
        }
    }

    #[test]
    fn one_state_automaton() {
        let t = complete(3);
        let a = TreeAutomaton::constant(2, vec!["a".into()], true);
        let leaves: BTreeSet<usize> = (7..15).collect();
        let plan = select_pairs(&a, &t, &leaves, 1).unwrap();
        assert_eq!(plan.floor, 1);
        assert!(!plan.pairs.is_empty());
        assert!(verify_pair_plan(&a, &t, &plan).unwrap().passed());
        let few: BTreeSet<usize> = (7..10).collect();
        let plan = select_pairs(&a, &t, &few, 1).unwrap();
        assert!(plan.pairs.is_empty() && plan.diagnostic.is_some());
        assert!(verify_pair_plan(&a, &t, &plan).unwrap().passed());
        assert!(gross_select_pairs(&a, &t, &leaves, 2).unwrap().clean());
    }

    fn two_state_automaton() -> TreeAutomaton {
        let f = Formula::from_json(r#"["or",["P_b","y"],["P_b","x"]]"#).unwrap();
        compile(&f, &["a".into(), "b".into()], &["x".into(), "y".into()], CompileLimits::default()).unwrap()
    }

    #[test]
    fn compiled_two_state_pairs_verify() {
        let a = two_state_automaton();
        assert_eq!(a.nstates(), 2);
        for seed in 0..5 {
            let t = random_tree(30, seed);
            let y: BTreeSet<usize> = (0..30).collect();
            let plan = select_pairs(&a, &t, &y, 1).unwrap();
            assert!(plan.pairs.len() >= plan.floor);
            let rep = verify_pair_plan(&a, &t, &plan).unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn corrupted_pair_is_reported() {
        let a = two_state_automaton();
        for seed in 0..20 {
            let t = random_tree(30, seed);
            let y: BTreeSet<usize> = (0..30).collect();
            let mut plan = select_pairs(&a, &t, &y, 1).unwrap();
            let runner = Runner::new(&a, &t).unwrap();
            let Some(p) = plan.pairs.first().cloned() else { continue };
            // any region node whose state differs for some outside parameter
            let bad = p.region.iter().copied().find(|&u| {
                (0..t.len())
                    .filter(|v| !p.region.contains(v))
                    .any(|v| runner.root_state(&[v, u]).unwrap() != runner.root_state(&[v, p.b]).unwrap())
            });
            if let Some(u) = bad {
                plan.pairs[0].bp = u;
                let rep = verify_pair_plan(&a, &t, &plan).unwrap();
                assert!(!rep.passed());
                assert!(rep.violations.iter().any(|v| v.pair == 0));
                return;
            }
        }
        panic!("no corruptible plan found");
    }
}
