//! Watermarking for unary first-order queries in Gaifman normal form:
//! breadth-first layers, well-separated bands, sparse and dense pair harvests.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::automata::{compile, product, Automaton, CompileLimits};
use crate::decomp::{parse_tree_from_td, transduce, tree_decomposition, WidthMode};
use crate::error::{Error, Result};
use crate::logic::{GnfQuery, QuerySpec};
use crate::pairs::{fmt_count, lemma_minimum, self_power, select_pairs};
use crate::scheme_mso::{weighted_candidates, CapacityReport, Plan, PlanStrategy, SchemeMode, WatermarkPair};
use crate::structures::{active_elements, type_partition, Elem, WeightedStructure};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLayers {
    pub root: Elem,
    /// `layers[i]` holds the elements at distance exactly `i` from the root.
    pub layers: Vec<Vec<Elem>>,
}

impl ComponentLayers {
    /// Union of the layers within `w` of layer `j`.
    pub fn band(&self, j: usize, w: usize) -> BTreeSet<Elem> {
        let lo = j.saturating_sub(w);
        let hi = (j + w).min(self.layers.len().saturating_sub(1));
        (lo..=hi).flat_map(|i| self.layers[i].iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layering {
    pub components: Vec<ComponentLayers>,
}

/// Layers each component from its own root; `root` fixes the root of its
/// component, the others use their smallest element.
pub fn layer_decompose(s: &WeightedStructure, root: Option<Elem>) -> Result<Layering> {
    if let Some(r) = root {
        if r.idx() >= s.len() {
            return Err(Error::UnknownElement(r.to_string()));
        }
    }
    let g = s.gaifman();
    let mut components = Vec::new();
    for comp in g.components() {
        let root = match root {
            Some(r) if comp.binary_search(&r).is_ok() => r,
            _ => comp[0],
        };
        let d = g.distances(&[root]);
        let depth = comp.iter().filter_map(|e| d[e.idx()]).max().unwrap_or(0) as usize;
        let mut layers = vec![Vec::new(); depth + 1];
        for &e in &comp {
            layers[d[e.idx()].expect("same component") as usize].push(e);
        }
        components.push(ComponentLayers { root, layers });
    }
    Ok(Layering { components })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub index: usize,
    /// Selected layer indices `index + j(2θ+1)`, ascending.
    pub layers: Vec<usize>,
    pub covered: usize,
}

/// The residue class of layers mod `2θ+1` covering the most of `uc`.
pub fn choose_family(comp: &ComponentLayers, uc: &BTreeSet<Elem>, theta: usize) -> Family {
    let period = 2 * theta + 1;
    let mut best: Option<Family> = None;
    for i in 0..period {
        let layers: Vec<usize> = (i..comp.layers.len()).step_by(period).collect();
        let covered = layers
            .iter()
            .map(|&j| comp.layers[j].iter().filter(|e| uc.contains(e)).count())
            .sum();
        if best.as_ref().is_none_or(|b| covered > b.covered) {
            best = Some(Family {
                index: i,
                layers,
                covered,
            });
        }
    }
    best.expect("period is positive")
}

pub fn theta(r: usize, rho: u32) -> usize {
    (2 * (r + 1) + 2) * rho as usize
}

/// Guaranteed pair count from `uc` candidates with `m` states.
pub fn fo_floor(uc: usize, theta: usize, m: u128) -> usize {
    let den = ((2 * theta + 1) as u128)
        .saturating_mul(self_power(m).saturating_mul(4).saturating_add(4));
    (uc as u128 / den) as usize
}

/// `⌈uc / ((2θ+1)(4m^m+4))⌉`.
pub fn fo_floor_ceil(uc: usize, theta: usize, m: u128) -> usize {
    let den = ((2 * theta + 1) as u128)
        .saturating_mul(self_power(m).saturating_mul(4).saturating_add(4));
    (uc as u128).div_ceil(den) as usize
}

#[derive(Debug, Clone)]
pub struct FoOptions {
    pub width: WidthMode,
    pub limits: CompileLimits,
    /// Run the automaton pipeline on bands that might be dense.
    pub band_pipeline: bool,
    pub root: Option<Elem>,
}

impl Default for FoOptions {
    fn default() -> Self {
        FoOptions {
            width: WidthMode::Heuristic,
            // bands are compiled once per selected layer, so fail fast
            limits: CompileLimits {
                max_states: 1024,
                max_table: 1 << 20,
            },
            band_pipeline: true,
            root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandInfo {
    pub layer: usize,
    pub candidates: usize,
    pub dense: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treewidth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentPlan {
    pub root: String,
    pub layer_sizes: Vec<usize>,
    pub family: usize,
    pub bands: Vec<BandInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandPlanFo {
    pub theta: usize,
    pub rho: u32,
    pub q: u32,
    pub uc: usize,
    /// Largest band state count, or 1 when no band was compiled.
    pub m: String,
    pub components: Vec<ComponentPlan>,
}

struct Band {
    states: u128,
    treewidth: usize,
    colors: u32,
    pairs: Vec<(Elem, Elem, Vec<Elem>)>,
}

/// Band pipeline: decompose, rewrite every local, compile, take the product
/// and run pair selection on the band's candidates.
fn band_pairs(
    s: &WeightedStructure,
    gnf: &GnfQuery,
    band: &BTreeSet<Elem>,
    ycand: &[Elem],
    opts: &FoOptions,
) -> Result<Band> {
    let sub = s.induced(band)?;
    let n = &sub.structure;
    let td = tree_decomposition(&n.gaifman(), opts.width)?;
    let pt = parse_tree_from_td(n, &td)?;
    let mut free = gnf.params.clone();
    free.push(gnf.output.clone());
    let automata = gnf
        .locals
        .iter()
        .map(|f| {
            let t = transduce(f, pt.colors, n.signature())?;
            compile(&t.formula, pt.tree.alphabet(), &free, opts.limits)
        })
        .collect::<Result<Vec<_>>>()?;
    let prod = product(&automata)?;
    let states = prod.state_count();
    let mut band = Band {
        states,
        treewidth: td.width(),
        colors: pt.colors,
        pairs: Vec::new(),
    };
    if (ycand.len() as u128) < lemma_minimum(states) {
        return Ok(band);
    }
    let y: BTreeSet<usize> = ycand
        .iter()
        .map(|&e| pt.leaf(sub.local_of(e).expect("candidate in band")))
        .collect();
    let plan = select_pairs(&prod, &pt.tree, &y, gnf.r)?;
    for p in plan.pairs {
        let up = |u: usize| sub.parent_of(pt.elem_at[u].expect("candidates are leaves"));
        let region: BTreeSet<Elem> = p.region.iter().filter_map(|&u| pt.elem_at[u]).map(|e| sub.parent_of(e)).collect();
        band.pairs.push((up(p.b), up(p.bp), region.into_iter().collect()));
    }
    Ok(band)
}

pub fn build_plan_fo(s: &WeightedStructure, gnf: &GnfQuery, opts: &FoOptions) -> Result<Plan> {
    let query = QuerySpec::Gnf(gnf.clone());
    let r = gnf.r;
    let (active, witness) = active_elements(s, &query)?;
    let candidates = weighted_candidates(s, &active);
    let q = gnf.local_rank(s.signature())?;
    let partition = type_partition(s, q, &candidates)?;
    let uc: BTreeSet<Elem> = partition.largest().unwrap_or(&[]).iter().copied().collect();
    let th = theta(r, gnf.rho).max(1);
    let guard = 2 * gnf.rho as usize;
    let mut cap = CapacityReport {
        universe: s.len(),
        active: active.len(),
        candidates: candidates.len(),
        class_sizes: partition.class_sizes(),
        ..CapacityReport::default()
    };
    if candidates.len() < active.len() {
        cap.diagnostics.push(format!(
            "{} active elements without positive weight excluded",
            active.len() - candidates.len()
        ));
    }
    if gnf.rho == 0 {
        cap.diagnostics.push("radius 0: band half-width raised to 1".into());
    }
    let mut pairs = Vec::new();
    let mut comps = Vec::new();
    let mut max_m: u128 = 1;
    let layering = layer_decompose(s, opts.root)?;
    for comp in &layering.components {
        let fam = choose_family(comp, &uc, th);
        let mut bands = Vec::new();
        let mut sparse_reps: Vec<(usize, Elem)> = Vec::new();
        let mut m2: Vec<WatermarkPair> = Vec::new();
        for (k, &j) in fam.layers.iter().enumerate() {
            let ycand: Vec<Elem> = comp.layers[j].iter().copied().filter(|e| uc.contains(e)).collect();
            let mut info = BandInfo {
                layer: j,
                candidates: ycand.len(),
                dense: false,
                states: None,
                treewidth: None,
                colors: None,
                diagnostic: None,
            };
            if opts.band_pipeline && ycand.len() as u128 >= lemma_minimum(1) {
                match band_pairs(s, gnf, &comp.band(j, th), &ycand, opts) {
                    Ok(b) => {
                        max_m = max_m.max(b.states);
                        info.states = Some(fmt_count(b.states));
                        info.treewidth = Some(b.treewidth);
                        info.colors = Some(b.colors);
                        info.dense = ycand.len() as u128 >= lemma_minimum(b.states);
                        for (b, bp, region) in b.pairs {
                            m2.push(WatermarkPair {
                                b,
                                bp,
                                region,
                                witness: witness[&b].clone(),
                                provenance: format!("m2:band-{k}"),
                            });
                        }
                    }
                    Err(e) => info.diagnostic = Some(e.to_string()),
                }
            }
            if !info.dense {
                if let Some(&rep) = ycand.first() {
                    sparse_reps.push((j, rep));
                }
            }
            bands.push(info);
        }
        for w in sparse_reps.chunks_exact(2) {
            let (ja, a) = w[0];
            let (jb, b) = w[1];
            let mut region = comp.band(ja, guard);
            region.extend(comp.band(jb, guard));
            pairs.push(WatermarkPair {
                b: a,
                bp: b,
                region: region.into_iter().collect(),
                witness: witness[&a].clone(),
                provenance: "m1".into(),
            });
        }
        pairs.extend(m2);
        comps.push(ComponentPlan {
            root: s.name(comp.root).to_string(),
            layer_sizes: comp.layers.iter().map(Vec::len).collect(),
            family: fam.index,
            bands,
        });
    }
    cap.pairs = pairs.len();
    cap.states = Some(fmt_count(max_m));
    cap.floor = fo_floor(uc.len(), th, max_m);
    let classes = partition.classes.len().max(1);
    cap.floor_active = Some(fo_floor(active.len(), th, max_m) / classes);
    let fo = BandPlanFo {
        theta: th,
        rho: gnf.rho,
        q,
        uc: uc.len(),
        m: fmt_count(max_m),
        components: comps,
    };
    Ok(Plan {
        mode: SchemeMode::Fo,
        strategy: PlanStrategy::Lemma,
        query,
        r,
        pairs,
        automaton_hash: None,
        capacity: cap,
        fo: Some(serde_json::to_value(fo)?),
    })
}

/// Band bookkeeping stored in an FO plan.
pub fn band_plan(plan: &Plan) -> Option<BandPlanFo> {
    plan.fo.as_ref().and_then(|v| serde_json::from_value(v.clone()).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{for_each_tuple, Combiner, Formula};
    use crate::scheme_mso::{detect, embed, StructureOracle};
    use crate::structures::{RelSym, Signature, StructureBuilder, TypeIndex};

    fn graph(n: usize, edges: &[(usize, usize)], weight: u64) -> WeightedStructure {
        let sig = Signature::new(vec![RelSym {
            name: "E".into(),
            arity: 2,
        }])
        .unwrap();
        let mut b = StructureBuilder::new(sig);
        for i in 0..n {
            let v = format!("v{i}");
            b.element(&v);
            b.weight(&v, weight + i as u64).unwrap();
        }
        for &(u, v) in edges {
            b.tuple_elems("E", vec![Elem(u as u32), Elem(v as u32)]).unwrap();
            b.tuple_elems("E", vec![Elem(v as u32), Elem(u as u32)]).unwrap();
        }
        b.build()
    }

    fn grid(w: usize, h: usize) -> WeightedStructure {
        let mut edges = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = y * w + x;
                if x + 1 < w {
                    edges.push((v, v + 1));
                }
                if y + 1 < h {
                    edges.push((v, v + w));
                }
            }
        }
        graph(w * h, &edges, 100)
    }

    fn path(n: usize) -> WeightedStructure {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        graph(n, &edges, 100)
    }

    fn sizes(l: &Layering) -> Vec<usize> {
        l.components[0].layers.iter().map(Vec::len).collect()
    }

    #[test]
    fn layering_examples() {
        assert_eq!(sizes(&layer_decompose(&path(1), None).unwrap()), vec![1]);
        assert_eq!(sizes(&layer_decompose(&path(4), Some(Elem(0))).unwrap()), vec![1, 1, 1, 1]);
        assert_eq!(sizes(&layer_decompose(&grid(4, 4), Some(Elem(0))).unwrap()), vec![1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(layer_decompose(&grid(5, 5), None).unwrap().components[0].layers.len(), 9);
        let two = graph(4, &[(0, 1), (2, 3)], 1);
        let l = layer_decompose(&two, Some(Elem(3))).unwrap();
        assert_eq!(l.components.len(), 2);
        assert_eq!(l.components[0].root, Elem(0));
        assert_eq!(l.components[1].root, Elem(3));
        assert!(layer_decompose(&two, Some(Elem(9))).is_err());
    }

    #[test]
    fn family_examples() {
        let p = path(20);
        let l = layer_decompose(&p, Some(Elem(0))).unwrap();
        let c = &l.components[0];
        let uc: BTreeSet<Elem> = [Elem(3)].into();
        assert_eq!(choose_family(c, &uc, 6).index, 3);
        let all: BTreeSet<Elem> = p.elements().collect();
        let f = choose_family(c, &all, 6);
        assert!(f.covered >= all.len().div_ceil(13));
        assert_eq!(f.index, 0);
        let short = layer_decompose(&path(5), None).unwrap();
        let f = choose_family(&short.components[0], &BTreeSet::new(), 6);
        assert_eq!((f.index, f.layers.clone()), (0, vec![0]));
    }

    fn degree_query(r: usize) -> GnfQuery {
        // y has a neighbour; r parameters appear only through a distance test
        let local = if r == 0 {
            Formula::from_json(r#"["exists","z",["E","y","z"]]"#).unwrap()
        } else {
            Formula::from_json(r#"["or",["dist<=","x","y",1],["exists","z",["E","y","z"]]]"#).unwrap()
        };
        GnfQuery::new(r, 1, vec![local], vec![], Combiner::Slot(1)).unwrap()
    }

    #[test]
    fn grid_plan_is_sound() {
        let s = grid(4, 12);
        let gnf = degree_query(1);
        let plan = build_plan_fo(&s, &gnf, &FoOptions::default()).unwrap();
        let fo = band_plan(&plan).unwrap();
        assert_eq!(fo.theta, 6);
        assert!(plan.pairs.len() + 1 >= fo_floor_ceil(fo.uc, fo.theta, 1));
        // pair elements share one type
        let mut idx = TypeIndex::new(&s);
        let q = fo.q;
        let t0 = plan.pairs.first().map(|p| idx.type_id(q, &[p.b]));
        for p in &plan.pairs {
            assert_eq!(Some(idx.type_id(q, &[p.b])), t0);
            assert_eq!(Some(idx.type_id(q, &[p.bp])), t0);
        }
        // exhaustive guard check
        let prep = QuerySpec::Gnf(gnf.clone());
        let prepared = prep.prepare(&s).unwrap();
        for p in &plan.pairs {
            for_each_tuple(s.len(), 1, |a| {
                if !p.region.contains(&a[0]) {
                    assert_eq!(
                        prepared.holds(&[a[0], p.b]).unwrap(),
                        prepared.holds(&[a[0], p.bp]).unwrap()
                    );
                }
                Ok(true)
            })
            .unwrap();
        }
        let bits = vec![true; plan.pairs.len()];
        let marked = s.with_weights(embed(&s, &plan, &bits).unwrap().weights());
        let oracle = StructureOracle::new(&marked, &prep).unwrap();
        assert_eq!(detect(&s, &plan, &oracle, None).unwrap(), bits);
    }

    #[test]
    fn sparse_only_plan_pairs_consecutive_layers() {
        let s = path(40);
        let gnf = degree_query(0);
        let opts = FoOptions {
            band_pipeline: false,
            root: Some(Elem(0)),
            ..FoOptions::default()
        };
        let plan = build_plan_fo(&s, &gnf, &opts).unwrap();
        let fo = band_plan(&plan).unwrap();
        // θ = 4 for r = 0: period 9 over 40 layers
        assert_eq!(fo.theta, 4);
        let selected = fo.components[0].bands.iter().filter(|b| b.candidates > 0).count();
        assert_eq!(plan.pairs.len(), selected / 2);
        assert!(plan.pairs.iter().all(|p| p.provenance == "m1"));
    }

    #[test]
    fn floors() {
        assert_eq!(theta(1, 1), 6);
        assert_eq!(fo_floor(104, 6, 1), 1);
        assert_eq!(fo_floor_ceil(105, 6, 1), 2);
        assert_eq!(fo_floor(0, 6, 1), 0);
    }
}
