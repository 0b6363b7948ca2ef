//! Instance generators, brute-force distortion checks, mark round trips,
//! capacity benchmarks and the acceptance suite.

pub mod acceptance;
pub mod catalog;

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::logic::{for_each_tuple, QuerySpec};
use crate::scheme_fo::{build_plan_fo, FoOptions};
use crate::scheme_mso::{
    detect, embed, plan_mso, MsoOptions, Plan, StructureOracle, SWEEP_CAP,
};
use crate::structures::{Elem, RelSym, Signature, StructureBuilder, WeightedStructure};

pub const MAX_WEIGHT: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Path,
    CycleFree,
    Grid,
    Outerplanar,
    RandomTw(usize),
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "path" => Generator::Path,
            "cycle-free" | "tree" => Generator::CycleFree,
            "grid" => Generator::Grid,
            "outerplanar" => Generator::Outerplanar,
            _ => {
                let k = s
                    .strip_prefix("random-tw(")
                    .and_then(|t| t.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("random-tw:"))
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::UnknownGenerator(s.to_string()))?;
                Generator::RandomTw(k)
            }
        })
    }
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Generator::Path => write!(f, "path"),
            Generator::CycleFree => write!(f, "cycle-free"),
            Generator::Grid => write!(f, "grid"),
            Generator::Outerplanar => write!(f, "outerplanar"),
            Generator::RandomTw(k) => write!(f, "random-tw({k})"),
        }
    }
}

pub fn edge_signature() -> Signature {
    Signature::new(vec![RelSym {
        name: "E".into(),
        arity: 2,
    }])
    .expect("valid signature")
}

/// Symmetric graph structure on `v0..v{n-1}` with weights in `[1, MAX_WEIGHT]`.
pub fn graph_structure(n: usize, edges: &[(usize, usize)], rng: &mut ChaCha8Rng) -> WeightedStructure {
    let mut b = StructureBuilder::new(edge_signature());
    for i in 0..n {
        let v = format!("v{i}");
        b.element(&v);
        b.weight(&v, rng.gen_range(1..=MAX_WEIGHT)).expect("declared");
    }
    for &(u, v) in edges {
        if u != v {
            b.tuple_elems("E", vec![Elem(u as u32), Elem(v as u32)]).expect("declared");
            b.tuple_elems("E", vec![Elem(v as u32), Elem(u as u32)]).expect("declared");
        }
    }
    b.build()
}

fn grid_edges(n: usize) -> Vec<(usize, usize)> {
    let w = (n as f64).sqrt().ceil().max(1.0) as usize;
    let mut edges = Vec::new();
    for v in 0..n {
        if (v + 1) % w != 0 && v + 1 < n {
            edges.push((v, v + 1));
        }
        if v + w < n {
            edges.push((v, v + w));
        }
    }
    edges
}

fn outerplanar_edges(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    if n >= 3 {
        edges.push((0, n - 1));
    }
    // non-crossing chords inside polygon intervals
    let mut stack = vec![(0usize, n.saturating_sub(1))];
    while let Some((a, b)) = stack.pop() {
        if b < a + 2 || !rng.gen_bool(0.7) {
            continue;
        }
        let c = rng.gen_range(a + 1..b);
        if c > a + 1 {
            edges.push((a, c));
        }
        if b > c + 1 {
            edges.push((c, b));
        }
        stack.push((a, c));
        stack.push((c, b));
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn ktree_edges(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let k = k.max(1);
    let base = n.min(k + 1);
    let mut edges = Vec::new();
    for i in 0..base {
        for j in i + 1..base {
            edges.push((i, j));
        }
    }
    let mut cliques: Vec<Vec<usize>> = if base == k + 1 {
        (0..base)
            .map(|drop| (0..base).filter(|&i| i != drop).collect())
            .collect()
    } else {
        vec![]
    };
    for v in base..n {
        let c = cliques.choose(rng).expect("cliques exist once the base is full").clone();
        for &u in &c {
            edges.push((u, v));
        }
        for drop in 0..c.len() {
            let mut d = c.clone();
            d[drop] = v;
            cliques.push(d);
        }
    }
    // keep a random spanning subset so the result is a partial k-tree
    edges.retain(|_| rng.gen_bool(0.8));
    edges
}

/// Deterministic instance of the given family.
pub fn generate(kind: Generator, n: usize, seed: u64) -> Result<WeightedStructure> {
    if n == 0 {
        return Err(Error::Precondition("generator needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = match kind {
        Generator::Path => (0..n - 1).map(|i| (i, i + 1)).collect(),
        Generator::CycleFree => (1..n).map(|i| (rng.gen_range(0..i), i)).collect(),
        Generator::Grid => grid_edges(n),
        Generator::Outerplanar => outerplanar_edges(n, &mut rng),
        Generator::RandomTw(k) => ktree_edges(n, k, &mut rng),
    };
    Ok(graph_structure(n, &edges, &mut rng))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistortionReport {
    pub c_local: u64,
    pub d_global: u64,
    pub argmax: Option<Vec<Elem>>,
    pub evaluations: u128,
    pub exhaustive: bool,
    pub r: usize,
}

impl DistortionReport {
    /// Within `(1, r)`.
    pub fn passed(&self) -> bool {
        self.c_local <= 1 && self.d_global <= self.r as u64
    }

    pub fn within(&self, c: u64, d: u64) -> bool {
        self.c_local <= c && self.d_global <= d
    }
}

/// Exact local and global distortion between two weightings. The sweep only
/// evaluates membership of elements whose weight changed; sweeps larger than
/// `cap` evaluations are sampled with a fixed seed and labelled as such.
pub fn verify_distortion(
    s: &WeightedStructure,
    w: &[Option<u64>],
    w2: &[Option<u64>],
    query: &QuerySpec,
    cap: u128,
) -> Result<DistortionReport> {
    if w.len() != s.len() || w2.len() != s.len() {
        return Err(Error::Precondition("weight vectors differ from the universe size".into()));
    }
    let diff = |e: usize| -> i64 { w2[e].unwrap_or(0) as i64 - w[e].unwrap_or(0) as i64 };
    let changed: Vec<(Elem, i64)> = (0..s.len())
        .filter(|&e| diff(e) != 0)
        .map(|e| (Elem(e as u32), diff(e)))
        .collect();
    let c_local = changed.iter().map(|(_, d)| d.unsigned_abs()).max().unwrap_or(0);
    let r = query.r();
    let mut report = DistortionReport {
        c_local,
        d_global: 0,
        argmax: None,
        evaluations: 0,
        exhaustive: true,
        r,
    };
    if changed.is_empty() {
        return Ok(report);
    }
    let p = query.prepare(s)?;
    let tuples = (s.len() as u128).checked_pow(r as u32).unwrap_or(u128::MAX);
    let per = changed.len() as u128;
    let check = |params: &[Elem], report: &mut DistortionReport| -> Result<()> {
        let mut point = params.to_vec();
        point.push(Elem(0));
        let mut total = 0i64;
        for &(e, d) in &changed {
            point[r] = e;
            if p.holds(&point)? {
                total += d;
            }
        }
        report.evaluations += per;
        let t = total.unsigned_abs();
        if t > report.d_global || report.argmax.is_none() {
            report.d_global = t;
            report.argmax = Some(params.to_vec());
        }
        Ok(())
    };
    if tuples.saturating_mul(per) <= cap {
        for_each_tuple(s.len(), r, |params| {
            check(params, &mut report)?;
            Ok(true)
        })?;
    } else {
        report.exhaustive = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = (cap / per).max(1);
        for _ in 0..samples {
            let params: Vec<Elem> = (0..r).map(|_| Elem(rng.gen_range(0..s.len() as u32))).collect();
            check(&params, &mut report)?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Mso(crate::scheme_mso::PlanStrategy),
    Fo,
}

pub fn plan_for(s: &WeightedStructure, query: &QuerySpec, scheme: Scheme) -> Result<Plan> {
    match (scheme, query) {
        (Scheme::Mso(strategy), _) => plan_mso(
            s,
            query,
            &MsoOptions {
                strategy,
                ..MsoOptions::default()
            },
        ),
        (Scheme::Fo, QuerySpec::Gnf(g)) => build_plan_fo(s, g, &FoOptions::default()),
        (Scheme::Fo, QuerySpec::Plain(_)) => Err(Error::Precondition("the first-order scheme needs a GNF query".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub n: usize,
    pub pairs: usize,
    pub recovered: bool,
    pub distortion: Option<DistortionReport>,
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn passed(&self) -> bool {
        self.recovered && self.error.is_none() && self.distortion.as_ref().is_some_and(|d| d.passed())
    }
}

/// Plan, mark with random bits at full capacity, check distortion, detect.
pub fn trial(s: &WeightedStructure, query: &QuerySpec, scheme: Scheme, seed: u64) -> TrialOutcome {
    let mut out = TrialOutcome {
        seed,
        n: s.len(),
        pairs: 0,
        recovered: false,
        distortion: None,
        error: None,
    };
    let run = |out: &mut TrialOutcome| -> Result<()> {
        let plan = plan_for(s, query, scheme)?;
        out.pairs = plan.pairs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mark: Vec<bool> = (0..plan.pairs.len()).map(|_| rng.gen_bool(0.5)).collect();
        let marked = embed(s, &plan, &mark)?;
        let w2 = marked.weights();
        out.distortion = Some(verify_distortion(s, s.weights(), &w2, query, SWEEP_CAP)?);
        let copy = s.with_weights(w2);
        let oracle = StructureOracle::new(&copy, query)?;
        out.recovered = detect(s, &plan, &oracle, None)? == mark;
        Ok(())
    };
    if let Err(e) = run(&mut out) {
        out.error = Some(e.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundtripSummary {
    pub trials: usize,
    pub passed: usize,
    pub marked_trials: usize,
    pub failures: Vec<TrialOutcome>,
}

impl RoundtripSummary {
    pub fn all_passed(&self) -> bool {
        self.passed == self.trials
    }
}

pub fn roundtrip(
    kind: Generator,
    sizes: &[usize],
    query: &QuerySpec,
    scheme: Scheme,
    seed: u64,
    trials: usize,
) -> Result<RoundtripSummary> {
    let mut sum = RoundtripSummary {
        trials,
        passed: 0,
        marked_trials: 0,
        failures: Vec::new(),
    };
    for t in 0..trials {
        let n = sizes[t % sizes.len().max(1)];
        let seed = seed.wrapping_add(t as u64);
        let s = generate(kind, n, seed)?;
        let o = trial(&s, query, scheme, seed);
        if o.pairs > 0 {
            sum.marked_trials += 1;
        }
        if o.passed() {
            sum.passed += 1;
        } else {
            sum.failures.push(o);
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub universe: usize,
    pub active: usize,
    pub uc: usize,
    pub capacity: usize,
    pub floor: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log capacity against log |U|.
    pub slope: Option<f64>,
    pub scalable: bool,
}

/// Capacity growth below this log-log slope is flagged.
pub const SCALABLE_SLOPE: f64 = 0.25;

pub fn scalability_bench(
    kind: Generator,
    sizes: &[usize],
    query: &QuerySpec,
    scheme: Scheme,
    seed: u64,
) -> Result<BenchReport> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Precondition("sizes must be ascending".into()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let s = generate(kind, n, seed)?;
        let plan = plan_for(&s, query, scheme)?;
        let uc = crate::scheme_fo::band_plan(&plan).map_or(plan.capacity.candidates, |b| b.uc);
        rows.push(BenchRow {
            size: n,
            universe: s.len(),
            active: plan.capacity.active,
            uc,
            capacity: plan.pairs.len(),
            floor: plan.capacity.floor,
            ratio: plan.capacity.ratio(),
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.capacity > 0 && r.active > 0)
        .map(|r| ((r.active as f64).ln(), (r.capacity as f64).ln()))
        .collect();
    let slope = (pts.len() == rows.len() && pts.len() >= 2).then(|| {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    });
    Ok(BenchReport {
        scalable: slope.is_some_and(|s| s >= SCALABLE_SLOPE),
        slope,
        rows,
    })
}

/// Random subset of `0..n` with at least `min` members.
pub fn random_subset(n: usize, min: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let k = rng.gen_range(min.min(n)..=n);
    all.into_iter().take(k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{treewidth, WidthMode};
    use crate::scheme_fo::layer_decompose;
    use crate::scheme_mso::PlanStrategy;

    #[test]
    fn generator_examples() {
        let p = generate(Generator::Path, 4, 1).unwrap();
        assert_eq!(treewidth(&p.gaifman(), WidthMode::Exact).unwrap(), 1);
        let g = generate(Generator::Grid, 25, 1).unwrap();
        assert_eq!(g.gaifman().edge_count(), 40);
        assert_eq!(layer_decompose(&g, Some(Elem(0))).unwrap().components[0].layers.len(), 9);
        for seed in 0..5 {
            let t = generate(Generator::RandomTw(2), 20, seed).unwrap();
            assert!(treewidth(&t.gaifman(), WidthMode::Exact).unwrap() <= 2);
            let o = generate(Generator::Outerplanar, 20, seed).unwrap();
            assert!(treewidth(&o.gaifman(), WidthMode::Exact).unwrap() <= 2);
            let c = generate(Generator::CycleFree, 20, seed).unwrap();
            assert_eq!(c.gaifman().edge_count(), 19);
        }
        let (a, b) = (generate(Generator::Grid, 9, 3).unwrap(), generate(Generator::Grid, 9, 3).unwrap());
        assert!(a.same_by_ids(&b) && a.weights() == b.weights());
        assert!(s_weights_in_range(&generate(Generator::Outerplanar, 30, 9).unwrap()));
        assert!("hyper".parse::<Generator>().is_err());
        assert_eq!("random-tw(3)".parse::<Generator>().unwrap(), Generator::RandomTw(3));
        assert!(generate(Generator::Path, 0, 0).is_err());
    }

    fn s_weights_in_range(s: &WeightedStructure) -> bool {
        s.weights().iter().all(|w| matches!(w, Some(w) if (1..=MAX_WEIGHT).contains(w)))
    }

    #[test]
    fn identical_weights_have_no_distortion() {
        let s = generate(Generator::Path, 6, 0).unwrap();
        let q = QuerySpec::from_json(r#"{"r":1,"formula":["E","x","y"]}"#).unwrap();
        let rep = verify_distortion(&s, s.weights(), s.weights(), &q, SWEEP_CAP).unwrap();
        assert_eq!((rep.c_local, rep.d_global), (0, 0));
    }

    #[test]
    fn sampled_sweeps_are_labelled() {
        let s = generate(Generator::Path, 6, 0).unwrap();
        let q = QuerySpec::from_json(r#"{"r":2,"formula":["E","x1","y"]}"#).unwrap();
        let mut w2 = s.weights().to_vec();
        w2[0] = w2[0].map(|w| w + 1);
        let rep = verify_distortion(&s, s.weights(), &w2, &q, 10).unwrap();
        assert!(!rep.exhaustive);
        let rep = verify_distortion(&s, s.weights(), &w2, &q, SWEEP_CAP).unwrap();
        assert!(rep.exhaustive && rep.c_local == 1 && rep.d_global == 1);
    }

    #[test]
    fn zero_trials_and_constant_capacity() {
        let q = QuerySpec::from_json(r#"{"r":1,"formula":["E","x","y"]}"#).unwrap();
        let sum = roundtrip(Generator::Path, &[8], &q, Scheme::Mso(PlanStrategy::Direct), 0, 0).unwrap();
        assert!(sum.all_passed());
        // the lemma strategy yields no pairs at these sizes: flagged
        let rep = scalability_bench(Generator::Path, &[8, 16], &q, Scheme::Mso(PlanStrategy::Lemma), 0).unwrap();
        assert!(!rep.scalable);
    }
}
