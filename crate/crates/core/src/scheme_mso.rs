//! Watermarking for unary queries on structures of small width: planning,
//! marking, detection. The plan and marking types are shared with the
//! first-order scheme.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::automata::{compile, Automaton, CompileLimits, TreeAutomaton};
use crate::decomp::{parse_tree_from_td, transduce, tree_decomposition, WidthMode};
use crate::error::{Error, Result};
use crate::logic::{for_each_tuple, QueryFile, QueryOutput, QuerySpec};
use crate::pairs::{select_pairs, PairPlan};
use crate::structures::{active_elements, Elem, WeightedStructure};

/// Parameter sweeps above this many tuples are refused.
pub const SWEEP_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStrategy {
    /// Automaton pigeonhole over a parse tree.
    Lemma,
    /// Pairs of candidates with identical membership over every parameter tuple.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeMode {
    Mso,
    Fo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkPair {
    pub b: Elem,
    pub bp: Elem,
    /// Parameters inside this set may split the pair.
    pub region: Vec<Elem>,
    /// Parameters under which `b` is in the output.
    pub witness: Vec<Elem>,
    pub provenance: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub universe: usize,
    pub active: usize,
    /// Active elements with a positive weight.
    pub candidates: usize,
    pub class_sizes: Vec<usize>,
    pub pairs: usize,
    /// Pairs guaranteed by the automaton pigeonhole bound.
    pub floor: usize,
    /// Floor computed from all active elements with the realized class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_active: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl CapacityReport {
    pub fn ratio(&self) -> f64 {
        if self.active == 0 {
            0.0
        } else {
            self.pairs as f64 / self.active as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub mode: SchemeMode,
    pub strategy: PlanStrategy,
    pub query: QuerySpec,
    pub r: usize,
    pub pairs: Vec<WatermarkPair>,
    pub automaton_hash: Option<String>,
    pub capacity: CapacityReport,
    /// Band bookkeeping of the first-order scheme.
    pub fo: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairFile {
    pub b: String,
    pub bp: String,
    pub region: Vec<String>,
    pub witness: Vec<String>,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub mode: SchemeMode,
    pub strategy: PlanStrategy,
    pub r: usize,
    pub query: QueryFile,
    pub pairs: Vec<PairFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub automaton_hash: Option<String>,
    #[serde(default)]
    pub capacity: CapacityReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fo: Option<Value>,
}

impl Plan {
    pub fn to_file(&self, s: &WeightedStructure) -> PlanFile {
        let names = |v: &[Elem]| v.iter().map(|&e| s.name(e).to_string()).collect();
        PlanFile {
            mode: self.mode,
            strategy: self.strategy,
            r: self.r,
            query: QueryFile::from_spec(&self.query),
            pairs: self
                .pairs
                .iter()
                .map(|p| PairFile {
                    b: s.name(p.b).to_string(),
                    bp: s.name(p.bp).to_string(),
                    region: names(&p.region),
                    witness: names(&p.witness),
                    provenance: p.provenance.clone(),
                })
                .collect(),
            automaton_hash: self.automaton_hash.clone(),
            capacity: self.capacity.clone(),
            fo: self.fo.clone(),
        }
    }

    pub fn from_file(file: PlanFile, s: &WeightedStructure) -> Result<Plan> {
        let elems = |v: &[String]| v.iter().map(|n| s.elem(n)).collect::<Result<Vec<_>>>();
        let query = file.query.into_spec()?;
        if query.r() != file.r {
            return Err(Error::Syntax("plan r differs from its query".into()));
        }
        let pairs = file
            .pairs
            .iter()
            .map(|p| {
                let witness = elems(&p.witness)?;
                if witness.len() != file.r {
                    return Err(Error::Syntax(format!("witness of `{}` has the wrong length", p.b)));
                }
                Ok(WatermarkPair {
                    b: s.elem(&p.b)?,
                    bp: s.elem(&p.bp)?,
                    region: elems(&p.region)?,
                    witness,
                    provenance: p.provenance.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Plan {
            mode: file.mode,
            strategy: file.strategy,
            query,
            r: file.r,
            pairs,
            automaton_hash: file.automaton_hash,
            capacity: file.capacity,
            fo: file.fo,
        })
    }

    pub fn to_json(&self, s: &WeightedStructure) -> String {
        serde_json::to_string_pretty(&self.to_file(s)).expect("plan serializes")
    }

    pub fn from_json(text: &str, s: &WeightedStructure) -> Result<Plan> {
        Plan::from_file(serde_json::from_str(text)?, s)
    }

    /// Elements touched by the first `len` pairs.
    pub fn marked_elements(&self, len: usize) -> BTreeSet<Elem> {
        self.pairs.iter().take(len).flat_map(|p| [p.b, p.bp]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MsoOptions {
    pub strategy: PlanStrategy,
    pub width: WidthMode,
    pub limits: CompileLimits,
    /// Use this automaton over the parse-tree alphabet instead of compiling.
    pub automaton: Option<TreeAutomaton>,
}

impl Default for MsoOptions {
    fn default() -> Self {
        MsoOptions {
            strategy: PlanStrategy::Lemma,
            width: WidthMode::Heuristic,
            limits: CompileLimits::default(),
            automaton: None,
        }
    }
}

/// Active elements with positive weight.
pub fn weighted_candidates(s: &WeightedStructure, active: &BTreeSet<Elem>) -> BTreeSet<Elem> {
    active
        .iter()
        .copied()
        .filter(|&e| s.weight(e).is_some_and(|w| w > 0))
        .collect()
}

fn check_sweep(n: usize, r: usize) -> Result<u128> {
    let needed = (n as u128).checked_pow(r as u32).unwrap_or(u128::MAX);
    if needed > SWEEP_CAP {
        return Err(Error::SweepCap {
            needed,
            cap: SWEEP_CAP,
        });
    }
    Ok(needed)
}

/// Membership profile of every element over all parameter tuples.
pub fn membership_profiles(s: &WeightedStructure, query: &QuerySpec) -> Result<Vec<Vec<bool>>> {
    check_sweep(s.len(), query.r())?;
    let p = query.prepare(s)?;
    let mut prof = vec![Vec::new(); s.len()];
    for_each_tuple(s.len(), query.r(), |params| {
        let out: BTreeSet<Elem> = p.output(s, params)?.into_iter().collect();
        for (e, v) in prof.iter_mut().enumerate() {
            v.push(out.contains(&Elem(e as u32)));
        }
        Ok(true)
    })?;
    Ok(prof)
}

/// Consecutive candidates of each identical-profile class, ordered by `b`.
pub fn direct_pairs(
    s: &WeightedStructure,
    query: &QuerySpec,
    candidates: &BTreeSet<Elem>,
) -> Result<Vec<(Elem, Elem)>> {
    let prof = membership_profiles(s, query)?;
    let mut classes: BTreeMap<&Vec<bool>, Vec<Elem>> = BTreeMap::new();
    for &e in candidates {
        classes.entry(&prof[e.idx()]).or_default().push(e);
    }
    let mut pairs: Vec<(Elem, Elem)> = classes
        .values()
        .flat_map(|c| c.chunks_exact(2).map(|w| (w[0], w[1])))
        .collect();
    pairs.sort();
    Ok(pairs)
}

pub fn plan_mso(s: &WeightedStructure, query: &QuerySpec, opts: &MsoOptions) -> Result<Plan> {
    let r = query.r();
    let (active, witness) = active_elements(s, query)?;
    let candidates = weighted_candidates(s, &active);
    let mut cap = CapacityReport {
        universe: s.len(),
        active: active.len(),
        candidates: candidates.len(),
        class_sizes: if active.is_empty() { vec![] } else { vec![active.len()] },
        ..CapacityReport::default()
    };
    if candidates.len() < active.len() {
        cap.diagnostics.push(format!(
            "{} active elements without positive weight excluded",
            active.len() - candidates.len()
        ));
    }
    let mut plan = Plan {
        mode: SchemeMode::Mso,
        strategy: opts.strategy,
        query: query.clone(),
        r,
        pairs: Vec::new(),
        automaton_hash: None,
        capacity: cap,
        fo: None,
    };
    if candidates.len() < 2 {
        plan.capacity.diagnostics.push("fewer than two candidates".into());
        return Ok(plan);
    }
    match opts.strategy {
        PlanStrategy::Direct => {
            for (b, bp) in direct_pairs(s, query, &candidates)? {
                plan.pairs.push(WatermarkPair {
                    b,
                    bp,
                    region: vec![b, bp],
                    witness: witness[&b].clone(),
                    provenance: "direct".into(),
                });
            }
        }
        PlanStrategy::Lemma => {
            let td = tree_decomposition(&s.gaifman(), opts.width)?;
            let pt = parse_tree_from_td(s, &td)?;
            plan.capacity.colors = Some(pt.colors);
            let tree = &pt.tree;
            let automaton = match &opts.automaton {
                Some(a) => a.clone(),
                None => {
                    let q = query.as_query();
                    let t = transduce(&q.formula, pt.colors, s.signature())?;
                    let mut free = q.params.clone();
                    free.push(q.output.clone());
                    compile(&t.formula, tree.alphabet(), &free, opts.limits)?
                }
            };
            let y: BTreeSet<usize> = candidates.iter().map(|&e| pt.leaf(e)).collect();
            let pp: PairPlan = select_pairs(&automaton, tree, &y, r)?;
            plan.automaton_hash = Some(pp.automaton_hash.clone());
            plan.capacity.states = Some(crate::pairs::fmt_count(automaton.state_count()));
            plan.capacity.floor = pp.floor;
            if let Some(d) = &pp.diagnostic {
                plan.capacity.diagnostics.push(d.clone());
            }
            for p in &pp.pairs {
                let elem = |u: usize| pt.elem_at[u].expect("candidates are leaves");
                let b = elem(p.b);
                plan.pairs.push(WatermarkPair {
                    b,
                    bp: elem(p.bp),
                    region: p.region.iter().filter_map(|&u| pt.elem_at[u]).collect::<BTreeSet<_>>().into_iter().collect(),
                    witness: witness[&b].clone(),
                    provenance: format!("{:?}", p.case).to_lowercase(),
                });
            }
        }
    }
    plan.capacity.pairs = plan.pairs.len();
    Ok(plan)
}

pub fn capacity(plan: &Plan) -> CapacityReport {
    plan.capacity.clone()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedWeights {
    pub base: Vec<Option<u64>>,
    pub delta: Vec<i8>,
    pub mark_len: usize,
}

impl MarkedWeights {
    pub fn weights(&self) -> Vec<Option<u64>> {
        self.base
            .iter()
            .zip(&self.delta)
            .map(|(w, &d)| w.map(|w| (w as i64 + d as i64) as u64))
            .collect()
    }

    pub fn changed(&self) -> Vec<Elem> {
        (0..self.delta.len())
            .filter(|&i| self.delta[i] != 0)
            .map(|i| Elem(i as u32))
            .collect()
    }
}

pub fn parse_mark(mark: &str) -> Result<Vec<bool>> {
    mark.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::InvalidMark(mark.to_string())),
        })
        .collect()
}

pub fn format_mark(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Bit `1` adds one to `b` and removes one from `b'`; bit `0` the reverse.
pub fn embed(s: &WeightedStructure, plan: &Plan, mark: &[bool]) -> Result<MarkedWeights> {
    if mark.len() > plan.pairs.len() {
        return Err(Error::MarkTooLong {
            len: mark.len(),
            capacity: plan.pairs.len(),
        });
    }
    let base = s.weights().to_vec();
    let mut delta = vec![0i8; s.len()];
    for (p, &bit) in plan.pairs.iter().zip(mark) {
        for e in [p.b, p.bp] {
            match s.weight(e) {
                Some(w) if w >= 1 => {}
                _ => return Err(Error::Unweighted(s.name(e).to_string())),
            }
            if delta[e.idx()] != 0 {
                return Err(Error::Precondition(format!("element `{}` is in two pairs", s.name(e))));
            }
        }
        let d = if bit { 1 } else { -1 };
        delta[p.b.idx()] = d;
        delta[p.bp.idx()] = -d;
    }
    Ok(MarkedWeights {
        base,
        delta,
        mark_len: mark.len(),
    })
}

/// Answers parameter tuples with the weighted output of the marked data.
pub trait QueryOracle {
    fn answer(&self, params: &[Elem]) -> Result<QueryOutput>;
}

/// In-process oracle over a marked structure.
pub struct StructureOracle<'a> {
    structure: &'a WeightedStructure,
    prepared: crate::logic::PreparedQuery<'a>,
}

impl<'a> StructureOracle<'a> {
    pub fn new(structure: &'a WeightedStructure, query: &QuerySpec) -> Result<Self> {
        Ok(StructureOracle {
            structure,
            prepared: query.prepare(structure)?,
        })
    }
}

impl QueryOracle for StructureOracle<'_> {
    fn answer(&self, params: &[Elem]) -> Result<QueryOutput> {
        crate::logic::weighted_output(self.structure, &self.prepared, params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerFile {
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Answer {
    pub params: Vec<String>,
    /// `(element, weight)` pairs.
    pub output: Vec<(String, Option<u64>)>,
}

/// Oracle backed by precomputed answers, keyed by element names.
pub struct AnswerOracle {
    answers: BTreeMap<Vec<Elem>, QueryOutput>,
}

impl AnswerOracle {
    pub fn new(file: &AnswerFile, s: &WeightedStructure) -> Result<Self> {
        let mut answers = BTreeMap::new();
        for a in &file.answers {
            let params = a.params.iter().map(|n| s.elem(n)).collect::<Result<Vec<_>>>()?;
            let members = a
                .output
                .iter()
                .map(|(n, w)| Ok((s.elem(n)?, *w)))
                .collect::<Result<Vec<_>>>()?;
            let total = members.iter().filter_map(|(_, w)| *w).sum();
            answers.insert(params, QueryOutput { members, total });
        }
        Ok(AnswerOracle { answers })
    }
}

impl QueryOracle for AnswerOracle {
    fn answer(&self, params: &[Elem]) -> Result<QueryOutput> {
        self.answers
            .get(params)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("no answer recorded for parameters {params:?}")))
    }
}

/// Answers for every witness of the plan, computed on `marked`.
pub fn record_answers(plan: &Plan, marked: &WeightedStructure) -> Result<AnswerFile> {
    let oracle = StructureOracle::new(marked, &plan.query)?;
    let witnesses: BTreeSet<&Vec<Elem>> = plan.pairs.iter().map(|p| &p.witness).collect();
    let mut answers = Vec::new();
    for w in witnesses {
        let out = oracle.answer(w)?;
        answers.push(Answer {
            params: w.iter().map(|&e| marked.name(e).to_string()).collect(),
            output: out
                .members
                .iter()
                .map(|&(e, wt)| (marked.name(e).to_string(), wt))
                .collect(),
        });
    }
    Ok(AnswerFile { answers })
}

/// Reads one bit per pair from the weight of `b` under its witness.
pub fn detect(
    s: &WeightedStructure,
    plan: &Plan,
    oracle: &dyn QueryOracle,
    len: Option<usize>,
) -> Result<Vec<bool>> {
    let len = len.unwrap_or(plan.pairs.len());
    if len > plan.pairs.len() {
        return Err(Error::MarkTooLong {
            len,
            capacity: plan.pairs.len(),
        });
    }
    let mut bits = Vec::with_capacity(len);
    for p in &plan.pairs[..len] {
        let out = oracle.answer(&p.witness)?;
        let observed = out
            .members
            .iter()
            .find(|(e, _)| *e == p.b)
            .ok_or_else(|| Error::WitnessInconsistent(s.name(p.b).to_string()))?
            .1
            .ok_or_else(|| Error::Unweighted(s.name(p.b).to_string()))?;
        let original = s.weight(p.b).ok_or_else(|| Error::Unweighted(s.name(p.b).to_string()))?;
        match observed as i64 - original as i64 {
            1 => bits.push(true),
            -1 => bits.push(false),
            d => {
                return Err(Error::Corrupted {
                    element: s.name(p.b).to_string(),
                    delta: d,
                })
            }
        }
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{RelSym, Signature, StructureBuilder};

    pub(crate) fn employees() -> WeightedStructure {
        let sig = Signature::new(vec![RelSym {
            name: "Emp".into(),
            arity: 3,
        }])
        .unwrap();
        let mut b = StructureBuilder::new(sig);
        let rows = [
            ("John", "Chennai", 10000),
            ("Arjun", "Coimbatore", 20000),
            ("Pooja", "Chennai", 15000),
            ("Neha", "Vellore", 30000),
            ("Padma", "Coimbatore", 20000),
        ];
        for (n, _, w) in rows {
            b.element(n);
            b.weight(n, w).unwrap();
        }
        for (_, c, w) in rows {
            b.element(c);
            b.element(&format!("s{w}"));
        }
        for (n, c, w) in rows {
            b.tuple("Emp", &[n, c, &format!("s{w}")]).unwrap();
        }
        b.build()
    }

    pub(crate) fn city_query() -> QuerySpec {
        QuerySpec::from_json(r#"{"r":1,"params":["x"],"formula":["exists","s",["Emp","y","x","s"]]}"#).unwrap()
    }

    fn direct() -> MsoOptions {
        MsoOptions {
            strategy: PlanStrategy::Direct,
            ..MsoOptions::default()
        }
    }

    #[test]
    fn employee_table_plan_and_mark() {
        let s = employees();
        let q = city_query();
        let plan = plan_mso(&s, &q, &direct()).unwrap();
        let names: Vec<(&str, &str)> = plan.pairs.iter().map(|p| (s.name(p.b), s.name(p.bp))).collect();
        assert_eq!(names, vec![("John", "Pooja"), ("Arjun", "Padma")]);
        let m = embed(&s, &plan, &parse_mark("10").unwrap()).unwrap();
        let w = m.weights();
        let get = |n: &str| w[s.elem(n).unwrap().idx()];
        assert_eq!(get("John"), Some(10001));
        assert_eq!(get("Pooja"), Some(14999));
        assert_eq!(get("Arjun"), Some(19999));
        assert_eq!(get("Padma"), Some(20001));
        assert_eq!(get("Neha"), Some(30000));
        for mark in ["00", "01", "10", "11"] {
            let bits = parse_mark(mark).unwrap();
            let marked = s.with_weights(embed(&s, &plan, &bits).unwrap().weights());
            let oracle = StructureOracle::new(&marked, &q).unwrap();
            assert_eq!(detect(&s, &plan, &oracle, None).unwrap(), bits);
            let file = record_answers(&plan, &marked).unwrap();
            let oracle = AnswerOracle::new(&file, &s).unwrap();
            assert_eq!(detect(&s, &plan, &oracle, None).unwrap(), bits);
        }
    }

    #[test]
    fn lemma_plan_on_employee_table_is_empty_with_diagnostic() {
        let s = employees();
        let plan = plan_mso(&s, &city_query(), &MsoOptions::default()).unwrap();
        assert!(plan.pairs.is_empty());
        assert_eq!(plan.capacity.floor, 0);
        assert!(!plan.capacity.diagnostics.is_empty());
    }

    #[test]
    fn plan_file_round_trip() {
        let s = employees();
        let plan = plan_mso(&s, &city_query(), &direct()).unwrap();
        let back = Plan::from_json(&plan.to_json(&s), &s).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn embed_errors_and_identity() {
        let s = employees();
        let plan = plan_mso(&s, &city_query(), &direct()).unwrap();
        let m = embed(&s, &plan, &[]).unwrap();
        assert_eq!(m.weights(), s.weights().to_vec());
        assert!(matches!(embed(&s, &plan, &[true; 3]), Err(Error::MarkTooLong { .. })));
        assert!(parse_mark("1x").is_err());
        let zero = s.with_weights(vec![Some(0); s.len()]);
        let p = plan_mso(&zero, &city_query(), &direct()).unwrap();
        assert!(p.pairs.is_empty());
        // untouched pair reads as corruption
        let oracle = StructureOracle::new(&s, &city_query()).unwrap();
        assert!(matches!(detect(&s, &plan, &oracle, None), Err(Error::Corrupted { delta: 0, .. })));
        assert!(detect(&s, &plan, &oracle, Some(0)).unwrap().is_empty());
    }
}
