//! Finite relational structures with partial weights, their Gaifman graphs,
//! neighbourhoods, isomorphism search and rank-bounded type equivalence.
//!
//! Elements are dense indices into the universe list; the declaration order of
//! the universe is the total order used for every tie-break in the crate.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Elem(pub u32);

impl Elem {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Elem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelSym {
    pub name: String,
    pub arity: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Signature {
    rels: Vec<RelSym>,
    index: HashMap<String, usize>,
}

impl Signature {
    pub fn new(rels: Vec<RelSym>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, r) in rels.iter().enumerate() {
            if r.arity == 0 {
                return Err(Error::Signature(format!("relation `{}` has arity 0", r.name)));
            }
            if index.insert(r.name.clone(), i).is_some() {
                return Err(Error::Signature(format!("duplicate relation `{}`", r.name)));
            }
        }
        Ok(Signature { rels, index })
    }

    pub fn relations(&self) -> &[RelSym] {
        &self.rels
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn arity(&self, rel: usize) -> usize {
        self.rels[rel].arity
    }

    pub fn name(&self, rel: usize) -> &str {
        &self.rels[rel].name
    }

    pub fn len(&self) -> usize {
        self.rels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rels.is_empty()
    }
}

const DENSE_LIMIT: usize = 1 << 22;

/// Interpretation of one relation symbol.
#[derive(Debug, Clone)]
pub struct Relation {
    arity: usize,
    tuples: BTreeSet<Vec<Elem>>,
    lookup: HashSet<Vec<Elem>>,
    dense: Option<Vec<u64>>,
    n: usize,
}

impl Relation {
    fn new(arity: usize, tuples: BTreeSet<Vec<Elem>>, n: usize) -> Self {
        let cells = n.checked_pow(arity as u32).unwrap_or(usize::MAX);
        let dense = (arity <= 2 && cells <= DENSE_LIMIT).then(|| {
            let mut bits = vec![0u64; cells.div_ceil(64).max(1)];
            for t in &tuples {
                let c = Self::cell(t, n);
                bits[c / 64] |= 1 << (c % 64);
            }
            bits
        });
        let lookup = if dense.is_some() {
            HashSet::new()
        } else {
            tuples.iter().cloned().collect()
        };
        Relation {
            arity,
            tuples,
            lookup,
            dense,
            n,
        }
    }

    #[inline]
    fn cell(t: &[Elem], n: usize) -> usize {
        t.iter().fold(0usize, |acc, e| acc * n + e.idx())
    }

    #[inline]
    pub fn contains(&self, t: &[Elem]) -> bool {
        match &self.dense {
            Some(bits) => {
                let c = Self::cell(t, self.n);
                bits[c / 64] >> (c % 64) & 1 == 1
            }
            None => self.lookup.contains(t),
        }
    }

    pub fn tuples(&self) -> &BTreeSet<Vec<Elem>> {
        &self.tuples
    }

    pub fn arity(&self) -> usize {
        self.arity
    }
}

/// A finite structure `(G, W)` with `W` a partial map from elements to naturals.
#[derive(Debug, Clone)]
pub struct WeightedStructure {
    sig: Signature,
    names: Vec<String>,
    ids: HashMap<String, Elem>,
    rels: Vec<Relation>,
    weights: Vec<Option<u64>>,
}

/// JSON shape of a structure file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureFile {
    pub signature: Vec<RelSym>,
    pub universe: Vec<String>,
    #[serde(default)]
    pub relations: BTreeMap<String, Vec<Vec<String>>>,
    #[serde(default)]
    pub weights: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct StructureBuilder {
    sig: Signature,
    names: Vec<String>,
    ids: HashMap<String, Elem>,
    tuples: Vec<BTreeSet<Vec<Elem>>>,
    weights: Vec<Option<u64>>,
}

impl StructureBuilder {
    pub fn new(sig: Signature) -> Self {
        let tuples = vec![BTreeSet::new(); sig.len()];
        StructureBuilder {
            sig,
            names: Vec::new(),
            ids: HashMap::new(),
            tuples,
            weights: Vec::new(),
        }
    }

    /// Adds an element (idempotent) and returns its index.
    pub fn element(&mut self, name: &str) -> Elem {
        if let Some(&e) = self.ids.get(name) {
            return e;
        }
        let e = Elem(self.names.len() as u32);
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), e);
        self.weights.push(None);
        e
    }

    pub fn get(&self, name: &str) -> Result<Elem> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownElement(name.to_string()))
    }

    pub fn tuple(&mut self, rel: &str, elems: &[&str]) -> Result<&mut Self> {
        let es = elems.iter().map(|n| self.get(n)).collect::<Result<Vec<_>>>()?;
        self.tuple_elems(rel, es)
    }

    pub fn tuple_elems(&mut self, rel: &str, elems: Vec<Elem>) -> Result<&mut Self> {
        let r = self
            .sig
            .lookup(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.to_string()))?;
        if self.sig.arity(r) != elems.len() {
            return Err(Error::Arity {
                name: rel.to_string(),
                expected: self.sig.arity(r),
                got: elems.len(),
            });
        }
        if let Some(e) = elems.iter().find(|e| e.idx() >= self.names.len()) {
            return Err(Error::UnknownElement(e.to_string()));
        }
        self.tuples[r].insert(elems);
        Ok(self)
    }

    pub fn weight(&mut self, name: &str, w: u64) -> Result<&mut Self> {
        let e = self.get(name)?;
        self.weights[e.idx()] = Some(w);
        Ok(self)
    }

    pub fn build(self) -> WeightedStructure {
        let n = self.names.len();
        let rels = self
            .tuples
            .into_iter()
            .enumerate()
            .map(|(i, ts)| Relation::new(self.sig.arity(i), ts, n))
            .collect();
        WeightedStructure {
            sig: self.sig,
            names: self.names,
            ids: self.ids,
            rels,
            weights: self.weights,
        }
    }
}

impl WeightedStructure {
    pub fn from_file(file: &StructureFile) -> Result<Self> {
        let sig = Signature::new(file.signature.clone())?;
        let mut b = StructureBuilder::new(sig);
        for name in &file.universe {
            if b.ids.contains_key(name) {
                return Err(Error::Signature(format!("duplicate element `{name}`")));
            }
            b.element(name);
        }
        for (rel, tuples) in &file.relations {
            for t in tuples {
                let refs: Vec<&str> = t.iter().map(String::as_str).collect();
                b.tuple(rel, &refs)?;
            }
        }
        for (name, w) in &file.weights {
            b.weight(name, *w)?;
        }
        Ok(b.build())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    pub fn to_file(&self) -> StructureFile {
        let relations = self
            .sig
            .relations()
            .iter()
            .zip(&self.rels)
            .map(|(sym, rel)| {
                let ts = rel
                    .tuples
                    .iter()
                    .map(|t| t.iter().map(|e| self.name(*e).to_string()).collect())
                    .collect();
                (sym.name.clone(), ts)
            })
            .collect();
        let weights = self
            .elements()
            .filter_map(|e| self.weight(e).map(|w| (self.name(e).to_string(), w)))
            .collect();
        StructureFile {
            signature: self.sig.relations().to_vec(),
            universe: self.names.clone(),
            relations,
            weights,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("structure serializes")
    }

    pub fn signature(&self) -> &Signature {
        &self.sig
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn elements(&self) -> impl Iterator<Item = Elem> + '_ {
        (0..self.names.len() as u32).map(Elem)
    }

    pub fn name(&self, e: Elem) -> &str {
        &self.names[e.idx()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn elem(&self, name: &str) -> Result<Elem> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownElement(name.to_string()))
    }

    pub fn elems(&self, names: &[impl AsRef<str>]) -> Result<Vec<Elem>> {
        names.iter().map(|n| self.elem(n.as_ref())).collect()
    }

    pub fn relation(&self, rel: usize) -> &Relation {
        &self.rels[rel]
    }

    pub fn relation_by_name(&self, name: &str) -> Option<&Relation> {
        self.sig.lookup(name).map(|i| &self.rels[i])
    }

    #[inline]
    pub fn holds(&self, rel: usize, t: &[Elem]) -> bool {
        self.rels[rel].contains(t)
    }

    pub fn weight(&self, e: Elem) -> Option<u64> {
        self.weights[e.idx()]
    }

    pub fn weights(&self) -> &[Option<u64>] {
        &self.weights
    }

    /// Same relations, different weights. Panics if the length differs.
    pub fn with_weights(&self, weights: Vec<Option<u64>>) -> WeightedStructure {
        assert_eq!(weights.len(), self.len(), "weight vector length");
        WeightedStructure {
            weights,
            ..self.clone()
        }
    }

    pub fn gaifman(&self) -> GaifmanGraph {
        build_gaifman_graph(self)
    }

    fn check(&self, elems: impl IntoIterator<Item = Elem>) -> Result<()> {
        for e in elems {
            if e.idx() >= self.len() {
                return Err(Error::UnknownElement(e.to_string()));
            }
        }
        Ok(())
    }

    /// `S_radius(centers)` in the Gaifman graph.
    pub fn sphere(&self, centers: &[Elem], radius: u32) -> Result<BTreeSet<Elem>> {
        self.check(centers.iter().copied())?;
        Ok(self.gaifman().sphere(centers, radius))
    }

    /// Substructure induced on `elements`; names and weights are kept.
    pub fn induced(&self, elements: &BTreeSet<Elem>) -> Result<Substructure> {
        self.check(elements.iter().copied())?;
        let to_parent: Vec<Elem> = elements.iter().copied().collect();
        let mut local = vec![u32::MAX; self.len()];
        for (i, e) in to_parent.iter().enumerate() {
            local[e.idx()] = i as u32;
        }
        let mut b = StructureBuilder::new(self.sig.clone());
        for e in &to_parent {
            b.element(self.name(*e));
        }
        for (ri, rel) in self.rels.iter().enumerate() {
            for t in &rel.tuples {
                if t.iter().all(|e| local[e.idx()] != u32::MAX) {
                    b.tuples[ri].insert(t.iter().map(|e| Elem(local[e.idx()])).collect());
                }
            }
        }
        for (i, e) in to_parent.iter().enumerate() {
            b.weights[i] = self.weight(*e);
        }
        Ok(Substructure {
            structure: b.build(),
            to_parent,
        })
    }

    /// Names and relations agree exactly (identity on element ids).
    pub fn same_by_ids(&self, other: &WeightedStructure) -> bool {
        let a: BTreeSet<&String> = self.names.iter().collect();
        let b: BTreeSet<&String> = other.names.iter().collect();
        if a != b || self.sig.relations() != other.sig.relations() {
            return false;
        }
        (0..self.sig.len()).all(|r| {
            let ta: BTreeSet<Vec<&str>> = self.rels[r]
                .tuples
                .iter()
                .map(|t| t.iter().map(|e| self.name(*e)).collect())
                .collect();
            let tb: BTreeSet<Vec<&str>> = other.rels[r]
                .tuples
                .iter()
                .map(|t| t.iter().map(|e| other.name(*e)).collect())
                .collect();
            ta == tb
        })
    }

    /// Number of tuples across all relations.
    pub fn tuple_count(&self) -> usize {
        self.rels.iter().map(|r| r.tuples.len()).sum()
    }
}

/// An induced substructure together with its embedding into the parent.
#[derive(Debug, Clone)]
pub struct Substructure {
    pub structure: WeightedStructure,
    pub to_parent: Vec<Elem>,
}

impl Substructure {
    pub fn parent_of(&self, e: Elem) -> Elem {
        self.to_parent[e.idx()]
    }

    pub fn local_of(&self, parent: Elem) -> Option<Elem> {
        self.to_parent
            .binary_search(&parent)
            .ok()
            .map(|i| Elem(i as u32))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaifmanGraph {
    adj: Vec<BTreeSet<Elem>>,
}

pub fn build_gaifman_graph(s: &WeightedStructure) -> GaifmanGraph {
    let mut adj = vec![BTreeSet::new(); s.len()];
    for rel in &s.rels {
        for t in &rel.tuples {
            for (i, &u) in t.iter().enumerate() {
                for &v in &t[i + 1..] {
                    if u != v {
                        adj[u.idx()].insert(v);
                        adj[v.idx()].insert(u);
                    }
                }
            }
        }
    }
    GaifmanGraph { adj }
}

impl GaifmanGraph {
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Self {
        let mut adj = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u != v {
                adj[u as usize].insert(Elem(v));
                adj[v as usize].insert(Elem(u));
            }
        }
        GaifmanGraph { adj }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, v: Elem) -> &BTreeSet<Elem> {
        &self.adj[v.idx()]
    }

    pub fn edges(&self) -> Vec<(Elem, Elem)> {
        let mut out = Vec::new();
        for (u, ns) in self.adj.iter().enumerate() {
            for &v in ns {
                if (u as u32) < v.0 {
                    out.push((Elem(u as u32), v));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, u: Elem, v: Elem) -> bool {
        self.adj[u.idx()].contains(&v)
    }

    /// BFS distances from a set of sources; `None` = different component.
    pub fn distances(&self, sources: &[Elem]) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s.idx()].is_none() {
                dist[s.idx()] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[u.idx()].unwrap();
            for &v in &self.adj[u.idx()] {
                if dist[v.idx()].is_none() {
                    dist[v.idx()] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn sphere(&self, centers: &[Elem], radius: u32) -> BTreeSet<Elem> {
        self.distances(centers)
            .into_iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, Some(d) if *d <= radius))
            .map(|(i, _)| Elem(i as u32))
            .collect()
    }

    /// Connected components, each sorted, listed by smallest element.
    pub fn components(&self) -> Vec<Vec<Elem>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for s in 0..self.len() {
            if seen[s] {
                continue;
            }
            let d = self.distances(&[Elem(s as u32)]);
            let comp: Vec<Elem> = d
                .iter()
                .enumerate()
                .filter(|(_, d)| d.is_some())
                .map(|(i, _)| Elem(i as u32))
                .collect();
            for e in &comp {
                seen[e.idx()] = true;
            }
            out.push(comp);
        }
        out
    }

    /// Largest finite distance between two elements of the same component.
    pub fn diameter(&self) -> u32 {
        (0..self.len())
            .map(|s| {
                self.distances(&[Elem(s as u32)])
                    .into_iter()
                    .flatten()
                    .max()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }
}

/// Searches for an isomorphism between two structures over the same signature
/// that maps `ca[i]` to `cb[i]`. Returns the element map `a -> b`.
pub fn find_isomorphism(
    a: &WeightedStructure,
    ca: &[Elem],
    b: &WeightedStructure,
    cb: &[Elem],
) -> Option<Vec<Elem>> {
    if a.len() != b.len()
        || ca.len() != cb.len()
        || a.sig.relations() != b.sig.relations()
        || (0..a.sig.len()).any(|r| a.rels[r].tuples.len() != b.rels[r].tuples.len())
    {
        return None;
    }
    let ga = a.gaifman();
    let gb = b.gaifman();
    let n = a.len();
    let mut map = vec![None::<Elem>; n];
    let mut used = vec![false; n];
    for (x, y) in ca.iter().zip(cb) {
        match map[x.idx()] {
            Some(prev) if prev != *y => return None,
            Some(_) => {}
            None => {
                if used[y.idx()] {
                    return None;
                }
                map[x.idx()] = Some(*y);
                used[y.idx()] = true;
            }
        }
    }
    // Invariant used for pruning: degree plus per-relation occurrence count.
    let inv = |s: &WeightedStructure, g: &GaifmanGraph, e: Elem| -> Vec<usize> {
        let mut v = vec![g.neighbors(e).len()];
        for rel in &s.rels {
            v.push(rel.tuples.iter().filter(|t| t.contains(&e)).count());
        }
        v
    };
    let inv_a: Vec<Vec<usize>> = a.elements().map(|e| inv(a, &ga, e)).collect();
    let inv_b: Vec<Vec<usize>> = b.elements().map(|e| inv(b, &gb, e)).collect();
    for (x, y) in ca.iter().zip(cb) {
        if inv_a[x.idx()] != inv_b[y.idx()] {
            return None;
        }
    }
    // Order unmapped elements by BFS from the centres so adjacency prunes early.
    let mut order: Vec<Elem> = Vec::new();
    let mut placed = vec![false; n];
    for c in ca {
        placed[c.idx()] = true;
    }
    let dist = ga.distances(ca);
    let mut rest: Vec<Elem> = a.elements().filter(|e| !placed[e.idx()]).collect();
    rest.sort_by_key(|e| (dist[e.idx()].unwrap_or(u32::MAX), e.0));
    order.extend(rest);

    fn consistent(
        a: &WeightedStructure,
        b: &WeightedStructure,
        map: &[Option<Elem>],
        x: Elem,
    ) -> bool {
        for (ra, rb) in a.rels.iter().zip(&b.rels) {
            for t in &ra.tuples {
                if !t.contains(&x) {
                    continue;
                }
                if t.iter().all(|e| map[e.idx()].is_some()) {
                    let img: Vec<Elem> = t.iter().map(|e| map[e.idx()].unwrap()).collect();
                    if !rb.contains(&img) {
                        return false;
                    }
                }
            }
        }
        true
    }

    for c in ca {
        if !consistent(a, b, &map, *c) {
            return None;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        i: usize,
        order: &[Elem],
        a: &WeightedStructure,
        b: &WeightedStructure,
        inv_a: &[Vec<usize>],
        inv_b: &[Vec<usize>],
        map: &mut Vec<Option<Elem>>,
        used: &mut Vec<bool>,
    ) -> bool {
        if i == order.len() {
            return true;
        }
        let x = order[i];
        for y in b.elements() {
            if used[y.idx()] || inv_a[x.idx()] != inv_b[y.idx()] {
                continue;
            }
            map[x.idx()] = Some(y);
            used[y.idx()] = true;
            if consistent(a, b, map, x) && search(i + 1, order, a, b, inv_a, inv_b, map, used) {
                return true;
            }
            map[x.idx()] = None;
            used[y.idx()] = false;
        }
        false
    }

    // Tuple counts match, so an injective tuple-preserving map is an isomorphism.
    if search(0, &order, a, b, &inv_a, &inv_b, &mut map, &mut used) {
        Some(map.into_iter().map(Option::unwrap).collect())
    } else {
        None
    }
}

/// Whether `t1 -> t2` (positionwise) is a partial isomorphism.
pub fn partial_isomorphism(s: &WeightedStructure, t1: &[Elem], t2: &[Elem]) -> bool {
    let k = t1.len();
    for i in 0..k {
        for j in i + 1..k {
            if (t1[i] == t1[j]) != (t2[i] == t2[j]) {
                return false;
            }
        }
    }
    let mut idx = Vec::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (r, rel) in s.rels.iter().enumerate() {
        let ar = s.sig.arity(r);
        if k == 0 {
            continue;
        }
        idx.clear();
        idx.resize(ar, 0usize);
        loop {
            a.clear();
            b.clear();
            a.extend(idx.iter().map(|&i| t1[i]));
            b.extend(idx.iter().map(|&i| t2[i]));
            if rel.contains(&a) != rel.contains(&b) {
                return false;
            }
            // next index tuple in [0,k)^ar
            let mut p = 0;
            loop {
                if p == ar {
                    break;
                }
                idx[p] += 1;
                if idx[p] < k {
                    break;
                }
                idx[p] = 0;
                p += 1;
            }
            if p == ar {
                break;
            }
        }
    }
    true
}

/// Memoized `q`-round back-and-forth game.
pub struct EfGame<'a> {
    s: &'a WeightedStructure,
    memo: HashMap<(u32, Vec<Elem>, Vec<Elem>), bool>,
}

impl<'a> EfGame<'a> {
    pub fn new(s: &'a WeightedStructure) -> Self {
        EfGame {
            s,
            memo: HashMap::new(),
        }
    }

    /// Duplicator wins the `q`-round game on `(t1, t2)`.
    pub fn equivalent(&mut self, q: u32, t1: &[Elem], t2: &[Elem]) -> bool {
        assert_eq!(t1.len(), t2.len(), "tuple lengths");
        if !partial_isomorphism(self.s, t1, t2) {
            return false;
        }
        if q == 0 || t1 == t2 {
            return true;
        }
        let key = (q, t1.to_vec(), t2.to_vec());
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let n = self.s.len() as u32;
        let mut ext1 = t1.to_vec();
        let mut ext2 = t2.to_vec();
        ext1.push(Elem(0));
        ext2.push(Elem(0));
        let last = t1.len();
        let mut result = true;
        'forth: for a in 0..n {
            ext1[last] = Elem(a);
            for b in 0..n {
                ext2[last] = Elem(b);
                if self.equivalent(q - 1, &ext1.clone(), &ext2.clone()) {
                    continue 'forth;
                }
            }
            result = false;
            break;
        }
        if result {
            'back: for b in 0..n {
                ext2[last] = Elem(b);
                for a in 0..n {
                    ext1[last] = Elem(a);
                    if self.equivalent(q - 1, &ext1.clone(), &ext2.clone()) {
                        continue 'back;
                    }
                }
                result = false;
                break;
            }
        }
        self.memo.insert(key, result);
        result
    }
}

pub fn ef_equivalent(s: &WeightedStructure, q: u32, t1: &[Elem], t2: &[Elem]) -> Result<bool> {
    if t1.len() != t2.len() {
        return Err(Error::Arity {
            name: "tuple".into(),
            expected: t1.len(),
            got: t2.len(),
        });
    }
    s.check(t1.iter().chain(t2).copied())?;
    Ok(EfGame::new(s).equivalent(q, t1, t2))
}

/// Rank-`q` types computed as interned Hintikka descriptions:
/// `tp_0(t)` is the atomic type and `tp_q(t)` pairs the atomic type with the
/// set `{ tp_{q-1}(t a) : a in V }`. Two tuples have equal ids exactly when
/// Duplicator wins the `q`-round game on them.
pub struct TypeIndex<'a> {
    s: &'a WeightedStructure,
    levels: Vec<HashMap<Vec<Elem>, u32>>,
    atomic: HashMap<Vec<bool>, u32>,
    interned: HashMap<(u32, u32, Vec<u32>), u32>,
}

impl<'a> TypeIndex<'a> {
    pub fn new(s: &'a WeightedStructure) -> Self {
        TypeIndex {
            s,
            levels: Vec::new(),
            atomic: HashMap::new(),
            interned: HashMap::new(),
        }
    }

    fn atomic_id(&mut self, t: &[Elem]) -> u32 {
        let k = t.len();
        let mut bits = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                bits.push(t[i] == t[j]);
            }
        }
        let mut idx = Vec::new();
        let mut a = Vec::new();
        for (r, rel) in self.s.rels.iter().enumerate() {
            let ar = self.s.sig.arity(r);
            if k == 0 {
                break;
            }
            let total = k.pow(ar as u32);
            for code in 0..total {
                idx.clear();
                let mut c = code;
                for _ in 0..ar {
                    idx.push(c % k);
                    c /= k;
                }
                a.clear();
                a.extend(idx.iter().map(|&i| t[i]));
                bits.push(rel.contains(&a));
            }
        }
        bits.push(false);
        bits.extend(std::iter::repeat_n(true, k));
        let next = self.atomic.len() as u32;
        *self.atomic.entry(bits).or_insert(next)
    }

    pub fn type_id(&mut self, q: u32, t: &[Elem]) -> u32 {
        while self.levels.len() <= q as usize {
            self.levels.push(HashMap::new());
        }
        if let Some(&id) = self.levels[q as usize].get(t) {
            return id;
        }
        let atomic = self.atomic_id(t);
        let id = if q == 0 {
            atomic
        } else {
            let mut ext = t.to_vec();
            ext.push(Elem(0));
            let mut children = Vec::with_capacity(self.s.len());
            for a in 0..self.s.len() as u32 {
                *ext.last_mut().unwrap() = Elem(a);
                children.push(self.type_id(q - 1, &ext));
            }
            children.sort_unstable();
            children.dedup();
            let next = self.interned.len() as u32;
            *self
                .interned
                .entry((q, atomic, children))
                .or_insert(next)
        };
        self.levels[q as usize].insert(t.to_vec(), id);
        id
    }
}

/// Partition of a set of elements by `(q,1)`-type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypePartition {
    pub q: u32,
    pub classes: Vec<Vec<Elem>>,
}

impl TypePartition {
    pub fn largest(&self) -> Option<&[Elem]> {
        self.classes.first().map(Vec::as_slice)
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }
}

pub fn type_partition(
    s: &WeightedStructure,
    q: u32,
    elements: &BTreeSet<Elem>,
) -> Result<TypePartition> {
    s.check(elements.iter().copied())?;
    let mut index = TypeIndex::new(s);
    let mut by_type: BTreeMap<u32, Vec<Elem>> = BTreeMap::new();
    for &e in elements {
        by_type.entry(index.type_id(q, &[e])).or_default().push(e);
    }
    let mut classes: Vec<Vec<Elem>> = by_type.into_values().collect();
    classes.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(TypePartition { q, classes })
}

/// Active elements `U = union over params of psi(params, G)` with, for each, the
/// lexicographically smallest parameter tuple that produces it.
#[allow(clippy::type_complexity)]
pub fn active_elements(
    s: &WeightedStructure,
    query: &crate::logic::QuerySpec,
) -> Result<(BTreeSet<Elem>, BTreeMap<Elem, Vec<Elem>>)> {
    let p = query.prepare(s)?;
    let mut witness: BTreeMap<Elem, Vec<Elem>> = BTreeMap::new();
    crate::logic::for_each_tuple(s.len(), query.r(), |params| {
        for b in p.output(s, params)? {
            witness.entry(b).or_insert_with(|| params.to_vec());
        }
        Ok(witness.len() < s.len())
    })?;
    Ok((witness.keys().copied().collect(), witness))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn graph(n: usize, edges: &[(usize, usize)]) -> WeightedStructure {
        let sig = Signature::new(vec![RelSym {
            name: "E".into(),
            arity: 2,
        }])
        .unwrap();
        let mut b = StructureBuilder::new(sig);
        for i in 0..n {
            b.element(&format!("v{i}"));
        }
        for &(u, v) in edges {
            b.tuple_elems("E", vec![Elem(u as u32), Elem(v as u32)]).unwrap();
            b.tuple_elems("E", vec![Elem(v as u32), Elem(u as u32)]).unwrap();
        }
        b.build()
    }

    fn path4() -> WeightedStructure {
        graph(4, &[(0, 1), (1, 2), (2, 3)])
    }

    #[test]
    fn gaifman_of_empty_and_binary_and_ternary() {
        let sig = Signature::new(vec![
            RelSym {
                name: "E".into(),
                arity: 2,
            },
            RelSym {
                name: "T".into(),
                arity: 3,
            },
        ])
        .unwrap();
        let mut b = StructureBuilder::new(sig.clone());
        for n in ["a", "b", "c"] {
            b.element(n);
        }
        let empty = b.clone().build();
        assert_eq!(empty.gaifman().edge_count(), 0);

        let mut b2 = b.clone();
        b2.tuple("E", &["a", "b"]).unwrap();
        b2.tuple("E", &["b", "c"]).unwrap();
        let s = b2.build();
        let g = s.gaifman();
        assert_eq!(g.edges(), vec![(Elem(0), Elem(1)), (Elem(1), Elem(2))]);

        let mut b3 = b;
        b3.tuple("T", &["a", "b", "c"]).unwrap();
        let g3 = b3.build().gaifman();
        assert_eq!(g3.edge_count(), 3);
        assert!(g3.has_edge(Elem(0), Elem(2)));
    }

    #[test]
    fn self_loops_do_not_create_edges() {
        let s = graph(2, &[(0, 0)]);
        assert_eq!(s.gaifman().edge_count(), 0);
    }

    #[test]
    fn spheres() {
        let s = path4();
        let c = [Elem(0)];
        assert_eq!(s.sphere(&c, 0).unwrap(), BTreeSet::from([Elem(0)]));
        assert_eq!(
            s.sphere(&c, 2).unwrap(),
            BTreeSet::from([Elem(0), Elem(1), Elem(2)])
        );
        assert_eq!(s.sphere(&c, 3).unwrap().len(), 4);
        assert!(matches!(
            s.sphere(&[Elem(9)], 1),
            Err(Error::UnknownElement(_))
        ));
    }

    #[test]
    fn spheres_stay_in_component() {
        let s = graph(4, &[(0, 1), (2, 3)]);
        assert_eq!(s.sphere(&[Elem(0)], 10).unwrap().len(), 2);
        assert_eq!(s.gaifman().distances(&[Elem(0)])[3], None);
    }

    #[test]
    fn induced_substructures() {
        let s = path4();
        let all: BTreeSet<Elem> = s.elements().collect();
        assert!(s.induced(&all).unwrap().structure.same_by_ids(&s));
        assert!(s.induced(&BTreeSet::new()).unwrap().structure.is_empty());

        let sig = Signature::new(vec![RelSym {
            name: "T".into(),
            arity: 3,
        }])
        .unwrap();
        let mut b = StructureBuilder::new(sig);
        for n in ["a", "b", "c"] {
            b.element(n);
        }
        b.tuple("T", &["a", "b", "c"]).unwrap();
        let t = b.build();
        let sub = t.induced(&BTreeSet::from([Elem(0), Elem(1)])).unwrap();
        assert_eq!(sub.structure.tuple_count(), 0);
        assert_eq!(sub.structure.name(Elem(1)), "b");
        assert_eq!(sub.parent_of(Elem(1)), Elem(1));
    }

    #[test]
    fn ef_on_path() {
        let s = path4();
        assert!(ef_equivalent(&s, 3, &[Elem(1)], &[Elem(1)]).unwrap());
        assert!(ef_equivalent(&s, 1, &[Elem(0)], &[Elem(1)]).unwrap());
        assert!(!ef_equivalent(&s, 2, &[Elem(0)], &[Elem(1)]).unwrap());
        // automorphism a<->d, b<->c
        for q in 0..4 {
            assert!(ef_equivalent(&s, q, &[Elem(0), Elem(1)], &[Elem(3), Elem(2)]).unwrap());
        }
    }

    #[test]
    fn type_partitions() {
        let edgeless = graph(5, &[]);
        let all: BTreeSet<Elem> = edgeless.elements().collect();
        assert_eq!(type_partition(&edgeless, 2, &all).unwrap().classes.len(), 1);

        let s = path4();
        let all: BTreeSet<Elem> = s.elements().collect();
        let p = type_partition(&s, 2, &all).unwrap();
        assert_eq!(
            p.classes,
            vec![vec![Elem(0), Elem(3)], vec![Elem(1), Elem(2)]]
        );

        let star = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let all: BTreeSet<Elem> = star.elements().collect();
        let p = type_partition(&star, 2, &all).unwrap();
        assert_eq!(p.classes, vec![vec![Elem(1), Elem(2), Elem(3)], vec![Elem(0)]]);
    }

    #[test]
    fn hintikka_ids_match_game() {
        let s = graph(6, &[(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)]);
        let mut game = EfGame::new(&s);
        let mut idx = TypeIndex::new(&s);
        for q in 0..3 {
            for a in s.elements() {
                for b in s.elements() {
                    let via_ids = idx.type_id(q, &[a]) == idx.type_id(q, &[b]);
                    assert_eq!(via_ids, game.equivalent(q, &[a], &[b]), "q={q} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn isomorphism_search() {
        let s = path4();
        let m = find_isomorphism(&s, &[Elem(0)], &s, &[Elem(3)]).unwrap();
        assert_eq!(m, vec![Elem(3), Elem(2), Elem(1), Elem(0)]);
        assert!(find_isomorphism(&s, &[Elem(0)], &s, &[Elem(1)]).is_none());
        let star = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        assert!(find_isomorphism(&s, &[], &star, &[]).is_none());
    }

    #[test]
    fn json_roundtrip_and_errors() {
        let text = r#"{"signature":[{"name":"E","arity":2}], "universe":["a","b"],
            "relations":{"E":[["a","b"]]}, "weights":{"a":10000}}"#;
        let s = WeightedStructure::from_json(text).unwrap();
        assert_eq!(s.weight(Elem(0)), Some(10000));
        assert_eq!(s.weight(Elem(1)), None);
        let back = WeightedStructure::from_file(&s.to_file()).unwrap();
        assert!(back.same_by_ids(&s));
        let bad = r#"{"signature":[{"name":"E","arity":2}], "universe":["a"],
            "relations":{"E":[["a","z"]]}}"#;
        assert!(matches!(
            WeightedStructure::from_json(bad),
            Err(Error::UnknownElement(_))
        ));
        let bad_arity = r#"{"signature":[{"name":"E","arity":2}], "universe":["a"],
            "relations":{"E":[["a"]]}}"#;
        assert!(matches!(
            WeightedStructure::from_json(bad_arity),
            Err(Error::Arity { .. })
        ));
    }
}
