//! Tree decompositions, clique-width parse trees, decoding, and the rewriting
//! of structure formulas into formulas over parse trees.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::automata::SigmaTree;
use crate::error::{Error, Result};
use crate::logic::{Formula, Query};
use crate::structures::{Elem, GaifmanGraph, RelSym, Signature, StructureBuilder, WeightedStructure};

/// Vertex count above which exact treewidth is refused.
pub const EXACT_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthMode {
    Exact,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDecomposition {
    pub bags: Vec<BTreeSet<Elem>>,
    pub edges: Vec<(usize, usize)>,
}

impl TreeDecomposition {
    pub fn width(&self) -> usize {
        self.bags.iter().map(BTreeSet::len).max().unwrap_or(1).saturating_sub(1)
    }

    /// Checks the three bag axioms against `g`.
    pub fn validate(&self, g: &GaifmanGraph) -> Result<()> {
        let nb = self.bags.len();
        if g.is_empty() {
            return Ok(());
        }
        if nb == 0 {
            return Err(Error::Decomposition("no bags".into()));
        }
        if self.edges.len() + 1 != nb {
            return Err(Error::Decomposition("bag graph is not a tree".into()));
        }
        let mut adj = vec![Vec::new(); nb];
        for &(a, b) in &self.edges {
            if a >= nb || b >= nb {
                return Err(Error::Decomposition("edge to unknown bag".into()));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; nb];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Decomposition("bag graph is disconnected".into()));
        }
        for v in 0..g.len() as u32 {
            let holding: Vec<usize> = (0..nb).filter(|&i| self.bags[i].contains(&Elem(v))).collect();
            if holding.is_empty() {
                return Err(Error::Decomposition(format!("element {v} in no bag")));
            }
            // bags holding v must induce a connected subtree
            let mut seen = BTreeSet::from([holding[0]]);
            let mut stack = vec![holding[0]];
            while let Some(u) = stack.pop() {
                for &w in &adj[u] {
                    if self.bags[w].contains(&Elem(v)) && seen.insert(w) {
                        stack.push(w);
                    }
                }
            }
            if seen.len() != holding.len() {
                return Err(Error::Decomposition(format!("bags of element {v} are not connected")));
            }
        }
        for (u, v) in g.edges() {
            if !self.bags.iter().any(|b| b.contains(&u) && b.contains(&v)) {
                return Err(Error::Decomposition(format!("edge {u}-{v} in no bag")));
            }
        }
        Ok(())
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.bags.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// Decomposition from an elimination order: bag `i` holds `order[i]` and its
/// later neighbours in the filled graph.
pub fn decomposition_from_order(g: &GaifmanGraph, order: &[Elem]) -> TreeDecomposition {
    let n = g.len();
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|v| g.neighbors(Elem(v as u32)).iter().map(|e| e.idx()).collect())
        .collect();
    let mut pos = vec![0usize; n];
    for (i, v) in order.iter().enumerate() {
        pos[v.idx()] = i;
    }
    let mut bags = Vec::with_capacity(n);
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for (i, v) in order.iter().enumerate() {
        let later: Vec<usize> = adj[v.idx()].iter().copied().filter(|&u| pos[u] > i).collect();
        for (a, &x) in later.iter().enumerate() {
            for &y in &later[a + 1..] {
                adj[x].insert(y);
                adj[y].insert(x);
            }
        }
        let mut bag: BTreeSet<Elem> = later.iter().map(|&u| Elem(u as u32)).collect();
        bag.insert(*v);
        parent[i] = later.iter().map(|&u| pos[u]).min();
        bags.push(bag);
    }
    let mut edges = Vec::new();
    let mut roots = Vec::new();
    for (i, p) in parent.iter().enumerate() {
        match p {
            Some(p) => edges.push((i, *p)),
            None => roots.push(i),
        }
    }
    for w in roots.windows(2) {
        edges.push((w[0], w[1]));
    }
    TreeDecomposition { bags, edges }
}

fn min_fill_order(g: &GaifmanGraph) -> Vec<Elem> {
    let n = g.len();
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|v| g.neighbors(Elem(v as u32)).iter().map(|e| e.idx()).collect())
        .collect();
    let mut alive: BTreeSet<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    while !alive.is_empty() {
        let fill = |v: usize| -> usize {
            let ns: Vec<usize> = adj[v].iter().copied().collect();
            let mut missing = 0;
            for (a, &x) in ns.iter().enumerate() {
                for &y in &ns[a + 1..] {
                    if !adj[x].contains(&y) {
                        missing += 1;
                    }
                }
            }
            missing
        };
        let v = *alive
            .iter()
            .min_by_key(|&&v| (fill(v), adj[v].len(), v))
            .expect("non-empty");
        let ns: Vec<usize> = adj[v].iter().copied().collect();
        for (a, &x) in ns.iter().enumerate() {
            for &y in &ns[a + 1..] {
                adj[x].insert(y);
                adj[y].insert(x);
            }
        }
        for &x in &ns {
            adj[x].remove(&v);
        }
        adj[v].clear();
        alive.remove(&v);
        order.push(Elem(v as u32));
    }
    order
}

fn order_width(g: &GaifmanGraph, order: &[Elem]) -> usize {
    decomposition_from_order(g, order).width()
}

/// Branch and bound over elimination orders with memo on eliminated sets.
fn exact_order(g: &GaifmanGraph) -> Vec<Elem> {
    let n = g.len();
    let nbr: Vec<u32> = (0..n)
        .map(|v| g.neighbors(Elem(v as u32)).iter().fold(0u32, |m, e| m | 1 << e.0))
        .collect();
    // neighbours of v in the graph where the vertices of `gone` are eliminated
    let q = |gone: u32, v: usize| -> u32 {
        let mut seen = 1u32 << v;
        let mut frontier = 1u32 << v;
        let mut out = 0u32;
        while frontier != 0 {
            let u = frontier.trailing_zeros() as usize;
            frontier &= frontier - 1;
            let fresh = nbr[u] & !seen;
            seen |= fresh;
            out |= fresh & !gone;
            frontier |= fresh & gone;
        }
        out
    };
    struct Search<'a> {
        n: usize,
        q: &'a dyn Fn(u32, usize) -> u32,
        best: usize,
        best_order: Vec<usize>,
        memo: HashMap<u32, usize>,
        path: Vec<usize>,
    }
    impl Search<'_> {
        fn go(&mut self, gone: u32, width: usize) {
            let left = self.n - gone.count_ones() as usize;
            if width >= self.best {
                return;
            }
            if left == 0 || left - 1 <= width {
                let mut order = self.path.clone();
                order.extend((0..self.n).filter(|v| gone >> v & 1 == 0));
                self.best = width;
                self.best_order = order;
                return;
            }
            if let Some(&w) = self.memo.get(&gone) {
                if w <= width {
                    return;
                }
            }
            self.memo.insert(gone, width);
            let mut cands: Vec<(usize, usize, u32)> = (0..self.n)
                .filter(|v| gone >> v & 1 == 0)
                .map(|v| {
                    let nb = (self.q)(gone, v);
                    (nb.count_ones() as usize, v, nb)
                })
                .collect();
            cands.sort_unstable();
            // a simplicial vertex of low degree can be eliminated without branching
            for &(d, v, nb) in &cands {
                if d <= width.max(1) || self.is_clique(gone, nb) {
                    if d.max(width) >= self.best {
                        return;
                    }
                    self.path.push(v);
                    self.go(gone | 1 << v, width.max(d));
                    self.path.pop();
                    return;
                }
            }
            for (d, v, _) in cands {
                let w = width.max(d);
                if w >= self.best {
                    continue;
                }
                self.path.push(v);
                self.go(gone | 1 << v, w);
                self.path.pop();
            }
        }

        fn is_clique(&self, gone: u32, set: u32) -> bool {
            let mut rest = set;
            while rest != 0 {
                let u = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let nu = (self.q)(gone, u);
                if nu & rest != rest {
                    return false;
                }
            }
            true
        }
    }
    let heuristic = min_fill_order(g);
    let mut s = Search {
        n,
        q: &q,
        best: order_width(g, &heuristic) + 1,
        best_order: Vec::new(),
        memo: HashMap::new(),
        path: Vec::new(),
    };
    s.go(0, 0);
    if s.best_order.is_empty() {
        return heuristic;
    }
    s.best_order.into_iter().map(|v| Elem(v as u32)).collect()
}

pub fn tree_decomposition(g: &GaifmanGraph, mode: WidthMode) -> Result<TreeDecomposition> {
    let order = match mode {
        WidthMode::Exact => {
            if g.len() > EXACT_CAP {
                return Err(Error::Decomposition(format!(
                    "exact mode is limited to {EXACT_CAP} vertices, got {}",
                    g.len()
                )));
            }
            exact_order(g)
        }
        WidthMode::Heuristic => min_fill_order(g),
    };
    let td = decomposition_from_order(g, &order);
    td.validate(g)?;
    Ok(td)
}

pub fn treewidth(g: &GaifmanGraph, mode: WidthMode) -> Result<usize> {
    Ok(tree_decomposition(g, mode)?.width())
}

/// One operation of a clique-width expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Leaf(u32),
    Union,
    Recolor(u32, u32),
    Connect(String, Vec<u32>),
}

impl Op {
    pub fn label(&self) -> String {
        match self {
            Op::Leaf(c) => format!("leaf:{c}"),
            Op::Union => "union".into(),
            Op::Recolor(i, j) => format!("recolor:{i}:{j}"),
            Op::Connect(r, cs) => {
                let mut s = format!("connect:{r}");
                for c in cs {
                    s.push_str(&format!(":{c}"));
                }
                s
            }
        }
    }

    pub fn parse_label(label: &str) -> Result<Op> {
        let parts: Vec<&str> = label.split(':').collect();
        let num = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::ParseTree(format!("bad color in label `{label}`")))
        };
        match parts.as_slice() {
            ["leaf", c] => Ok(Op::Leaf(num(c)?)),
            ["union"] => Ok(Op::Union),
            ["recolor", i, j] => Ok(Op::Recolor(num(i)?, num(j)?)),
            ["connect", r, cs @ ..] if !cs.is_empty() => Ok(Op::Connect(
                r.to_string(),
                cs.iter().map(|c| num(c)).collect::<Result<_>>()?,
            )),
            _ => Err(Error::ParseTree(format!("unknown operation label `{label}`"))),
        }
    }
}

/// A clique-width expression over a signature; leaves are structure elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseTree {
    pub tree: SigmaTree,
    pub signature: Signature,
    /// Colors are `1..=colors`.
    pub colors: u32,
    /// Element names in universe order.
    pub elements: Vec<String>,
    pub weights: Vec<Option<u64>>,
    /// Node of each element's leaf.
    pub leaf_of: Vec<usize>,
    /// Element at each node (leaves only).
    pub elem_at: Vec<Option<Elem>>,
}

/// Mutable expression node used while building a parse tree.
#[derive(Debug, Clone)]
pub struct ExprNode {
    pub op: Op,
    pub element: Option<String>,
    pub weight: Option<u64>,
    pub children: Vec<usize>,
}

impl ParseTree {
    /// Assembles a parse tree from an arena of expression nodes.
    pub fn from_nodes(
        signature: Signature,
        nodes: Vec<ExprNode>,
        elements: Vec<String>,
    ) -> Result<ParseTree> {
        let mut labels: Vec<String> = nodes.iter().map(|n| n.op.label()).collect();
        labels.sort();
        labels.dedup();
        let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut spec = Vec::with_capacity(nodes.len());
        let mut colors = 0u32;
        for (u, n) in nodes.iter().enumerate() {
            let want = match n.op {
                Op::Leaf(_) => 0,
                Op::Union => 2,
                _ => 1,
            };
            if n.children.len() != want {
                return Err(Error::ParseTree(format!(
                    "node {u} ({}) has {} children, expected {want}",
                    n.op.label(),
                    n.children.len()
                )));
            }
            match &n.op {
                Op::Leaf(c) => colors = colors.max(*c),
                Op::Recolor(i, j) => colors = colors.max(*i).max(*j),
                Op::Connect(r, cs) => {
                    let ri = signature
                        .lookup(r)
                        .ok_or_else(|| Error::UnknownRelation(r.clone()))?;
                    if signature.arity(ri) != cs.len() {
                        return Err(Error::Arity {
                            name: r.clone(),
                            expected: signature.arity(ri),
                            got: cs.len(),
                        });
                    }
                    colors = colors.max(cs.iter().copied().max().unwrap_or(0));
                }
                Op::Union => {}
            }
            spec.push((index[n.op.label().as_str()], n.children.first().copied(), n.children.get(1).copied()));
        }
        let tree = SigmaTree::new(labels, spec)?;
        let eidx: HashMap<&str, usize> = elements.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let mut leaf_of = vec![usize::MAX; elements.len()];
        let mut elem_at = vec![None; nodes.len()];
        let mut weights = vec![None; elements.len()];
        for (u, n) in nodes.iter().enumerate() {
            if let Op::Leaf(c) = n.op {
                if c == 0 {
                    return Err(Error::ParseTree("color 0 is out of range".into()));
                }
                let name = n
                    .element
                    .as_ref()
                    .ok_or_else(|| Error::ParseTree(format!("leaf {u} has no element")))?;
                let &e = eidx
                    .get(name.as_str())
                    .ok_or_else(|| Error::UnknownElement(name.clone()))?;
                if leaf_of[e] != usize::MAX {
                    return Err(Error::ParseTree(format!("element `{name}` appears twice")));
                }
                leaf_of[e] = u;
                elem_at[u] = Some(Elem(e as u32));
                weights[e] = n.weight;
            }
        }
        if let Some(e) = leaf_of.iter().position(|&l| l == usize::MAX) {
            return Err(Error::ParseTree(format!("element `{}` has no leaf", elements[e])));
        }
        if colors == 0 {
            return Err(Error::ParseTree("no colors used".into()));
        }
        Ok(ParseTree {
            tree,
            signature,
            colors,
            elements,
            weights,
            leaf_of,
            elem_at,
        })
    }

    pub fn op(&self, u: usize) -> Op {
        Op::parse_label(self.tree.label(u)).expect("labels are generated from operations")
    }

    pub fn leaf(&self, e: Elem) -> usize {
        self.leaf_of[e.idx()]
    }

    /// All operation labels for `colors` colors over `sig`.
    pub fn full_alphabet(sig: &Signature, colors: u32) -> Vec<String> {
        let mut out: Vec<String> = (1..=colors).map(|c| Op::Leaf(c).label()).collect();
        out.push(Op::Union.label());
        for i in 1..=colors {
            for j in 1..=colors {
                out.push(Op::Recolor(i, j).label());
            }
        }
        for rel in sig.relations() {
            let mut pat = vec![1u32; rel.arity];
            loop {
                out.push(Op::Connect(rel.name.clone(), pat.clone()).label());
                let mut i = 0;
                while i < pat.len() {
                    pat[i] += 1;
                    if pat[i] <= colors {
                        break;
                    }
                    pat[i] = 1;
                    i += 1;
                }
                if i == pat.len() {
                    break;
                }
            }
        }
        out.sort();
        out
    }

    /// The tree as a structure over the full operation alphabet for `colors`.
    pub fn tree_structure(&self, colors: u32) -> WeightedStructure {
        self.tree
            .to_structure_over(&Self::full_alphabet(&self.signature, colors.max(self.colors)))
    }

    pub fn to_file(&self) -> ParseTreeFile {
        fn node(p: &ParseTree, u: usize) -> Value {
            let n = p.tree.node(u);
            match p.op(u) {
                Op::Leaf(c) => {
                    let e = p.elem_at[u].expect("leaf element");
                    let mut v = json!({"op": "leaf", "color": c, "element": p.elements[e.idx()]});
                    if let Some(w) = p.weights[e.idx()] {
                        v["weight"] = json!(w);
                    }
                    v
                }
                Op::Union => json!({"op": "union", "left": node(p, n.left.unwrap()), "right": node(p, n.right.unwrap())}),
                Op::Recolor(i, j) => json!({"op": "recolor", "from": i, "to": j, "child": node(p, n.left.unwrap())}),
                Op::Connect(r, cs) => json!({"op": "connect", "rel": r, "colors": cs, "child": node(p, n.left.unwrap())}),
            }
        }
        ParseTreeFile {
            signature: self.signature.relations().to_vec(),
            elements: self.elements.clone(),
            tree: node(self, self.tree.root()),
        }
    }

    pub fn from_file(file: &ParseTreeFile) -> Result<ParseTree> {
        let sig = Signature::new(file.signature.clone())?;
        let mut nodes = Vec::new();
        fn walk(v: &Value, nodes: &mut Vec<ExprNode>) -> Result<usize> {
            let op = v.get("op").and_then(Value::as_str).unwrap_or("");
            let num = |k: &str| -> Result<u32> {
                v.get(k)
                    .and_then(Value::as_u64)
                    .map(|c| c as u32)
                    .ok_or_else(|| Error::ParseTree(format!("`{op}` node needs `{k}`")))
            };
            let id = nodes.len();
            nodes.push(ExprNode {
                op: Op::Union,
                element: None,
                weight: None,
                children: Vec::new(),
            });
            let child = |k: &str, nodes: &mut Vec<ExprNode>| -> Result<usize> {
                let c = v
                    .get(k)
                    .ok_or_else(|| Error::ParseTree(format!("`{op}` node needs `{k}`")))?;
                walk(c, nodes)
            };
            let (op_val, children) = match op {
                "leaf" => {
                    nodes[id].element = Some(
                        v.get("element")
                            .and_then(Value::as_str)
                            .ok_or_else(|| Error::ParseTree("leaf needs `element`".into()))?
                            .to_string(),
                    );
                    nodes[id].weight = v.get("weight").and_then(Value::as_u64);
                    (Op::Leaf(num("color")?), vec![])
                }
                "union" => {
                    let l = child("left", nodes)?;
                    let r = child("right", nodes)?;
                    (Op::Union, vec![l, r])
                }
                "recolor" => {
                    let (i, j) = (num("from")?, num("to")?);
                    (Op::Recolor(i, j), vec![child("child", nodes)?])
                }
                "connect" => {
                    let rel = v
                        .get("rel")
                        .and_then(Value::as_str)
                        .ok_or_else(|| Error::ParseTree("connect needs `rel`".into()))?
                        .to_string();
                    let cs = v
                        .get("colors")
                        .and_then(Value::as_array)
                        .ok_or_else(|| Error::ParseTree("connect needs `colors`".into()))?
                        .iter()
                        .map(|c| c.as_u64().map(|c| c as u32).ok_or_else(|| Error::ParseTree("bad color".into())))
                        .collect::<Result<Vec<_>>>()?;
                    (Op::Connect(rel, cs), vec![child("child", nodes)?])
                }
                other => return Err(Error::ParseTree(format!("unknown op `{other}`"))),
            };
            nodes[id].op = op_val;
            nodes[id].children = children;
            Ok(id)
        }
        walk(&file.tree, &mut nodes)?;
        let elements = if file.elements.is_empty() {
            nodes.iter().filter_map(|n| n.element.clone()).collect()
        } else {
            file.elements.clone()
        };
        ParseTree::from_nodes(sig, nodes, elements)
    }

    pub fn from_json(text: &str) -> Result<ParseTree> {
        let mut de = serde_json::Deserializer::from_str(text);
        de.disable_recursion_limit();
        let file = ParseTreeFile::deserialize(&mut de)?;
        Self::from_file(&file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("parse tree serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseTreeFile {
    pub signature: Vec<RelSym>,
    #[serde(default)]
    pub elements: Vec<String>,
    pub tree: Value,
}

/// Builds a parse tree whose decoding is `s` (identity on element ids).
///
/// Elements are introduced one at a time in the order a depth-first walk of
/// the decomposition first meets them. Each new element gets a color no live
/// element holds, every tuple is connected when its last element arrives, and
/// elements with no pending tuple are recolored to a shared parking color.
pub fn parse_tree_from_td(s: &WeightedStructure, td: &TreeDecomposition) -> Result<ParseTree> {
    if s.is_empty() {
        return Err(Error::ParseTree("empty structure".into()));
    }
    td.validate(&s.gaifman())?;
    // vertex order from a DFS over bags, smaller subtrees first
    let adj = td.neighbours();
    let nb = td.bags.len();
    let mut size = vec![1usize; nb];
    let mut parent = vec![usize::MAX; nb];
    let mut order_bags = Vec::new();
    let mut stack = vec![0usize];
    let mut seen = vec![false; nb];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        order_bags.push(u);
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = u;
                stack.push(v);
            }
        }
    }
    for &u in order_bags.iter().rev() {
        if parent[u] != usize::MAX {
            size[parent[u]] += size[u];
        }
    }
    let mut order: Vec<Elem> = Vec::with_capacity(s.len());
    let mut placed = vec![false; s.len()];
    let mut stack = vec![0usize];
    while let Some(u) = stack.pop() {
        for &e in &td.bags[u] {
            if !placed[e.idx()] {
                placed[e.idx()] = true;
                order.push(e);
            }
        }
        let mut kids: Vec<usize> = adj[u].iter().copied().filter(|&v| parent[v] == u).collect();
        kids.sort_by_key(|&v| (std::cmp::Reverse(size[v]), std::cmp::Reverse(v)));
        stack.extend(kids);
    }
    for e in s.elements() {
        if !placed[e.idx()] {
            order.push(e);
        }
    }
    let mut pos = vec![0usize; s.len()];
    for (i, e) in order.iter().enumerate() {
        pos[e.idx()] = i;
    }
    // tuples grouped by the position of their last element; last use per element
    let mut due: Vec<Vec<(usize, Vec<Elem>)>> = vec![Vec::new(); s.len()];
    let mut last_use = vec![0usize; s.len()];
    for ri in 0..s.signature().len() {
        for t in s.relation(ri).tuples() {
            let last = t.iter().map(|e| pos[e.idx()]).max().unwrap();
            due[last].push((ri, t.clone()));
            for e in t {
                last_use[e.idx()] = last_use[e.idx()].max(last);
            }
        }
    }
    for (i, e) in order.iter().enumerate() {
        last_use[e.idx()] = last_use[e.idx()].max(i);
    }
    // live colors needed
    let mut max_live = 0usize;
    let mut live = 0usize;
    for i in 0..order.len() {
        live += 1;
        max_live = max_live.max(live);
        live -= order[..=i].iter().filter(|x| last_use[x.idx()] == i).count();
    }
    let park = max_live as u32 + 1;
    let mut nodes: Vec<ExprNode> = Vec::new();
    let push = |op: Op, element: Option<String>, weight: Option<u64>, children: Vec<usize>, nodes: &mut Vec<ExprNode>| {
        nodes.push(ExprNode {
            op,
            element,
            weight,
            children,
        });
        nodes.len() - 1
    };
    let mut color = vec![0u32; s.len()];
    let mut free: BTreeSet<u32> = (1..=max_live as u32).collect();
    let mut top: Option<usize> = None;
    for (i, &e) in order.iter().enumerate() {
        let c = *free.iter().next().expect("enough live colors");
        free.remove(&c);
        color[e.idx()] = c;
        let leaf = push(Op::Leaf(c), Some(s.name(e).to_string()), s.weight(e), vec![], &mut nodes);
        let mut cur = match top {
            None => leaf,
            Some(t) => push(Op::Union, None, None, vec![t, leaf], &mut nodes),
        };
        for (ri, t) in &due[i] {
            let cs = t.iter().map(|x| color[x.idx()]).collect();
            cur = push(Op::Connect(s.signature().name(*ri).to_string(), cs), None, None, vec![cur], &mut nodes);
        }
        if i + 1 < order.len() {
            let dying: Vec<Elem> = order[..=i].iter().copied().filter(|x| last_use[x.idx()] == i).collect();
            for x in dying {
                let c = color[x.idx()];
                cur = push(Op::Recolor(c, park), None, None, vec![cur], &mut nodes);
                color[x.idx()] = park;
                free.insert(c);
            }
        }
        top = Some(cur);
    }
    ParseTree::from_nodes(s.signature().clone(), nodes, s.names().to_vec())
}

/// Evaluates the expression bottom-up into a structure.
pub fn decode(p: &ParseTree) -> Result<WeightedStructure> {
    let t = &p.tree;
    let mut colored: Vec<Vec<(Elem, u32)>> = vec![Vec::new(); t.len()];
    let mut tuples: Vec<BTreeSet<Vec<Elem>>> = vec![BTreeSet::new(); p.signature.len()];
    let check = |c: u32| -> Result<()> {
        if c == 0 || c > p.colors {
            Err(Error::ParseTree(format!("color {c} out of range 1..={}", p.colors)))
        } else {
            Ok(())
        }
    };
    for &u in t.postorder() {
        let n = t.node(u);
        let out = match p.op(u) {
            Op::Leaf(c) => {
                check(c)?;
                vec![(p.elem_at[u].expect("leaf element"), c)]
            }
            Op::Union => {
                let mut a = std::mem::take(&mut colored[n.left.unwrap()]);
                let b = std::mem::take(&mut colored[n.right.unwrap()]);
                let left: BTreeSet<Elem> = a.iter().map(|x| x.0).collect();
                if let Some((e, _)) = b.iter().find(|x| left.contains(&x.0)) {
                    return Err(Error::ParseTree(format!(
                        "element `{}` on both sides of a union",
                        p.elements[e.idx()]
                    )));
                }
                a.extend(b);
                a
            }
            Op::Recolor(i, j) => {
                check(i)?;
                check(j)?;
                let mut a = std::mem::take(&mut colored[n.left.unwrap()]);
                for x in &mut a {
                    if x.1 == i {
                        x.1 = j;
                    }
                }
                a
            }
            Op::Connect(r, cs) => {
                for &c in &cs {
                    check(c)?;
                }
                let a = std::mem::take(&mut colored[n.left.unwrap()]);
                let ri = p.signature.lookup(&r).ok_or(Error::UnknownRelation(r))?;
                let by_color: Vec<Vec<Elem>> = cs
                    .iter()
                    .map(|&c| a.iter().filter(|x| x.1 == c).map(|x| x.0).collect())
                    .collect();
                let mut idx = vec![0usize; cs.len()];
                if by_color.iter().all(|v| !v.is_empty()) {
                    loop {
                        tuples[ri].insert(idx.iter().zip(&by_color).map(|(&i, v)| v[i]).collect());
                        let mut k = 0;
                        while k < idx.len() {
                            idx[k] += 1;
                            if idx[k] < by_color[k].len() {
                                break;
                            }
                            idx[k] = 0;
                            k += 1;
                        }
                        if k == idx.len() {
                            break;
                        }
                    }
                }
                a
            }
        };
        colored[u] = out;
    }
    let mut b = StructureBuilder::new(p.signature.clone());
    for name in &p.elements {
        b.element(name);
    }
    for (ri, ts) in tuples.into_iter().enumerate() {
        for t in ts {
            b.tuple_elems(p.signature.name(ri), t)?;
        }
    }
    for (i, w) in p.weights.iter().enumerate() {
        if let Some(w) = w {
            b.weight(&p.elements[i], *w)?;
        }
    }
    Ok(b.build())
}

/// A rewritten formula together with its size and rank growth.
#[derive(Debug, Clone)]
pub struct Transduction {
    pub formula: Formula,
    pub size_before: usize,
    pub size_after: usize,
    pub rank_before: u32,
    pub rank_after: u32,
}

fn all_names(f: &Formula, out: &mut BTreeSet<String>) {
    use Formula as F;
    match f {
        F::True | F::False => {}
        F::Eq(a, b) | F::DistLe(a, b, _) | F::DistGt(a, b, _) => {
            out.insert(a.clone());
            out.insert(b.clone());
        }
        F::ColorAt { leaf, node, .. } => {
            out.insert(leaf.clone());
            out.insert(node.clone());
        }
        F::Rel(_, args) => out.extend(args.iter().cloned()),
        F::Mem(x, e) => {
            out.insert(x.clone());
            out.insert(e.clone());
        }
        F::Not(g) => all_names(g, out),
        F::And(gs) | F::Or(gs) => gs.iter().for_each(|g| all_names(g, out)),
        F::Implies(a, b) | F::Iff(a, b) => {
            all_names(a, out);
            all_names(b, out);
        }
        F::Exists(x, g) | F::Forall(x, g) | F::ExistsSet(x, g) | F::ForallSet(x, g) => {
            out.insert(x.clone());
            all_names(g, out);
        }
        F::ExistsSetWithin {
            set,
            var,
            guard,
            body,
        } => {
            out.insert(set.clone());
            out.insert(var.clone());
            all_names(guard, out);
            all_names(body, out);
        }
    }
}

struct Rewriter<'a> {
    colors: u32,
    sig: &'a Signature,
    taken: BTreeSet<String>,
    counter: usize,
}

impl Rewriter<'_> {
    fn fresh(&mut self, stem: &str) -> String {
        loop {
            self.counter += 1;
            let name = format!("{stem}{}", self.counter);
            if self.taken.insert(name.clone()) {
                return name;
            }
        }
    }

    fn leaf(&self, x: &str) -> Formula {
        Formula::Or(
            (1..=self.colors)
                .map(|c| Formula::rel(&format!("P_{}", Op::Leaf(c).label()), &[x]))
                .collect(),
        )
    }

    fn atom(&mut self, r: &str, args: &[String]) -> Result<Formula> {
        let ri = self
            .sig
            .lookup(r)
            .ok_or_else(|| Error::UnknownRelation(r.to_string()))?;
        let arity = self.sig.arity(ri);
        if arity != args.len() {
            return Err(Error::Arity {
                name: r.to_string(),
                expected: arity,
                got: args.len(),
            });
        }
        let z = self.fresh("z");
        let mut alts = Vec::new();
        let mut pat = vec![1u32; arity];
        loop {
            let mut conj = vec![Formula::rel(&format!("P_{}", Op::Connect(r.to_string(), pat.clone()).label()), &[&z])];
            for (x, &c) in args.iter().zip(&pat) {
                conj.push(Formula::ColorAt {
                    leaf: x.clone(),
                    node: z.clone(),
                    color: c,
                });
            }
            alts.push(Formula::And(conj));
            let mut i = 0;
            while i < pat.len() {
                pat[i] += 1;
                if pat[i] <= self.colors {
                    break;
                }
                pat[i] = 1;
                i += 1;
            }
            if i == pat.len() {
                break;
            }
        }
        Ok(Formula::exists(&z, Formula::Or(alts)))
    }

    fn go(&mut self, f: &Formula) -> Result<Formula> {
        use Formula as F;
        Ok(match f {
            F::True | F::False | F::Eq(..) | F::Mem(..) => f.clone(),
            F::Rel(r, args) => self.atom(r, args)?,
            F::DistLe(..) | F::DistGt(..) => self.go(&f.expand_macros(self.sig)?)?,
            F::ColorAt { .. } => {
                return Err(Error::Unsupported("color-at is a parse-tree predicate".into()))
            }
            F::Not(g) => F::not(self.go(g)?),
            F::And(gs) => F::And(gs.iter().map(|g| self.go(g)).collect::<Result<_>>()?),
            F::Or(gs) => F::Or(gs.iter().map(|g| self.go(g)).collect::<Result<_>>()?),
            F::Implies(a, b) => F::implies(self.go(a)?, self.go(b)?),
            F::Iff(a, b) => F::Iff(Box::new(self.go(a)?), Box::new(self.go(b)?)),
            F::Exists(x, g) => F::exists(x, F::And(vec![self.leaf(x), self.go(g)?])),
            F::Forall(x, g) => F::forall(x, F::implies(self.leaf(x), self.go(g)?)),
            F::ExistsSet(x, g) => {
                let w = self.fresh("w");
                F::ExistsSetWithin {
                    set: x.clone(),
                    guard: Box::new(self.leaf(&w)),
                    var: w,
                    body: Box::new(self.go(g)?),
                }
            }
            F::ForallSet(x, g) => {
                let w = self.fresh("w");
                F::not(F::ExistsSetWithin {
                    set: x.clone(),
                    guard: Box::new(self.leaf(&w)),
                    var: w,
                    body: Box::new(F::not(self.go(g)?)),
                })
            }
            F::ExistsSetWithin {
                set,
                var,
                guard,
                body,
            } => F::ExistsSetWithin {
                set: set.clone(),
                var: var.clone(),
                guard: Box::new(F::And(vec![self.leaf(var), self.go(guard)?])),
                body: Box::new(self.go(body)?),
            },
        })
    }
}

/// Rewrites a formula over `sig` into one over parse trees with at most
/// `colors` colors: quantifiers range over leaves and each atom asks for a
/// connect node above its arguments whose color pattern they match.
pub fn transduce(formula: &Formula, colors: u32, sig: &Signature) -> Result<Transduction> {
    if let Some(x) = formula.free_set_vars().first() {
        return Err(Error::Unsupported(format!("free set variable `{x}`")));
    }
    let mut taken = BTreeSet::new();
    all_names(formula, &mut taken);
    let mut rw = Rewriter {
        colors,
        sig,
        taken,
        counter: 0,
    };
    let body = rw.go(formula)?;
    let mut conj: Vec<Formula> = formula.free_vars().iter().map(|x| rw.leaf(x)).collect();
    conj.push(body);
    let out = Formula::And(conj);
    Ok(Transduction {
        size_before: formula.size(),
        size_after: out.size(),
        rank_before: formula.rank(),
        rank_after: out.rank(),
        formula: out,
    })
}

pub fn transduce_query(q: &Query, colors: u32, sig: &Signature) -> Result<(Query, Transduction)> {
    let t = transduce(&q.formula, colors, sig)?;
    Ok((
        Query {
            formula: t.formula.clone(),
            params: q.params.clone(),
            output: q.output.clone(),
        },
        t,
    ))
}

/// Summary of a decomposition for reports.
pub fn td_summary(td: &TreeDecomposition) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([("bags", td.bags.len()), ("width", td.width())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{evaluate, Assignment, Binding};

    fn graph(n: usize, edges: &[(usize, usize)]) -> WeightedStructure {
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
        graph(w * h, &edges)
    }

    #[test]
    fn widths() {
        let tree = graph(6, &[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5)]);
        for mode in [WidthMode::Exact, WidthMode::Heuristic] {
            assert_eq!(treewidth(&tree.gaifman(), mode).unwrap(), 1);
        }
        let mut k5 = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                k5.push((i, j));
            }
        }
        assert_eq!(treewidth(&graph(5, &k5).gaifman(), WidthMode::Exact).unwrap(), 4);
        assert_eq!(treewidth(&grid(3, 3).gaifman(), WidthMode::Exact).unwrap(), 3);
        assert_eq!(treewidth(&grid(4, 4).gaifman(), WidthMode::Exact).unwrap(), 4);
        assert!(tree_decomposition(&graph(21, &[]).gaifman(), WidthMode::Exact).is_err());
    }

    #[test]
    fn single_element_parse_tree() {
        let s = graph(1, &[]);
        let td = tree_decomposition(&s.gaifman(), WidthMode::Exact).unwrap();
        let p = parse_tree_from_td(&s, &td).unwrap();
        assert_eq!(p.tree.len(), 1);
        assert_eq!(p.op(p.tree.root()), Op::Leaf(1));
    }

    #[test]
    fn single_edge_parse_tree() {
        let sig = Signature::new(vec![RelSym {
            name: "E".into(),
            arity: 2,
        }])
        .unwrap();
        let mut b = StructureBuilder::new(sig);
        b.element("a");
        b.element("b");
        b.tuple("E", &["a", "b"]).unwrap();
        let s = b.build();
        let td = tree_decomposition(&s.gaifman(), WidthMode::Exact).unwrap();
        let p = parse_tree_from_td(&s, &td).unwrap();
        let root = p.tree.root();
        assert_eq!(p.op(root), Op::Connect("E".into(), vec![1, 2]));
        let u = p.tree.node(root).left.unwrap();
        assert_eq!(p.op(u), Op::Union);
        let n = p.tree.node(u);
        assert_eq!(p.op(n.left.unwrap()), Op::Leaf(1));
        assert_eq!(p.op(n.right.unwrap()), Op::Leaf(2));
        assert!(decode(&p).unwrap().same_by_ids(&s));
    }

    #[test]
    fn path_round_trip_and_file() {
        let s = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let td = tree_decomposition(&s.gaifman(), WidthMode::Heuristic).unwrap();
        let p = parse_tree_from_td(&s, &td).unwrap();
        assert!(decode(&p).unwrap().same_by_ids(&s));
        let back = ParseTree::from_json(&p.to_json()).unwrap();
        assert!(decode(&back).unwrap().same_by_ids(&s));
    }

    fn handmade(nodes: Vec<ExprNode>) -> Result<WeightedStructure> {
        let sig = Signature::new(vec![RelSym {
            name: "E".into(),
            arity: 2,
        }])
        .unwrap();
        decode(&ParseTree::from_nodes(sig, nodes, vec!["a".into(), "b".into()])?)
    }

    fn leaf(e: &str, c: u32) -> ExprNode {
        ExprNode {
            op: Op::Leaf(c),
            element: Some(e.into()),
            weight: None,
            children: vec![],
        }
    }

    fn inner(op: Op, children: Vec<usize>) -> ExprNode {
        ExprNode {
            op,
            element: None,
            weight: None,
            children,
        }
    }

    #[test]
    fn decode_by_hand() {
        let s = handmade(vec![
            leaf("a", 1),
            leaf("b", 1),
            inner(Op::Union, vec![0, 1]),
            inner(Op::Connect("E".into(), vec![1, 1]), vec![2]),
        ])
        .unwrap();
        let ts: Vec<_> = s.relation(0).tuples().iter().cloned().collect();
        assert_eq!(ts.len(), 4);
        assert!(ts.contains(&vec![Elem(0), Elem(1)]) && ts.contains(&vec![Elem(1), Elem(0)]));

        let s = handmade(vec![
            leaf("a", 1),
            leaf("b", 1),
            inner(Op::Union, vec![0, 1]),
            inner(Op::Recolor(1, 2), vec![2]),
            inner(Op::Connect("E".into(), vec![1, 2]), vec![3]),
        ])
        .unwrap();
        assert_eq!(s.tuple_count(), 0);

        let dup = handmade(vec![leaf("a", 1), leaf("a", 2), inner(Op::Union, vec![0, 1])]);
        assert!(dup.is_err());
    }

    fn agree_on_placements(s: &WeightedStructure, formula: &Formula) {
        let td = tree_decomposition(&s.gaifman(), WidthMode::Heuristic).unwrap();
        let p = parse_tree_from_td(s, &td).unwrap();
        let t = transduce(formula, p.colors, s.signature()).unwrap();
        let ts = p.tree_structure(p.colors);
        let free = formula.free_vars();
        let n = s.len();
        let total = n.pow(free.len() as u32);
        for code in 0..total {
            let mut c = code;
            let mut a = Assignment::new();
            let mut at = Assignment::new();
            for v in &free {
                let e = Elem((c % n) as u32);
                c /= n;
                a.insert(v.clone(), Binding::Elem(e));
                at.insert(v.clone(), Binding::Elem(Elem(p.leaf(e) as u32)));
            }
            assert_eq!(
                evaluate(s, formula, &a).unwrap(),
                evaluate(&ts, &t.formula, &at).unwrap(),
                "{formula:?} at {a:?}"
            );
        }
    }

    #[test]
    fn transduce_examples() {
        let f = |t: &str| Formula::from_json(t).unwrap();
        let edge = graph(2, &[(0, 1)]);
        agree_on_placements(&edge, &f(r#"["=","x","y"]"#));
        agree_on_placements(&edge, &f(r#"["E","x","y"]"#));
        let path = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        agree_on_placements(&path, &f(r#"["exists","y",["E","x","y"]]"#));
        agree_on_placements(&path, &f(r#"["exists-set","X",["and",["X","x"],["forall","u",["implies",["X","u"],["not",["E","u","x"]]]]]]"#));
    }

    #[test]
    fn transduced_atoms_keep_free_variables_on_leaves() {
        let s = graph(2, &[(0, 1)]);
        let t = transduce(&Formula::eq("x", "y"), 2, s.signature()).unwrap();
        assert_eq!(t.formula.free_vars(), vec!["x".to_string(), "y".to_string()]);
        assert!(t.size_after > t.size_before);
    }
}
