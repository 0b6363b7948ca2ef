//! Labelled binary trees with pebbles and deterministic bottom-up tree
//! automata over `Sigma x {0,1}^k`.

mod compile;

pub use compile::{compile, compile_query, CompileLimits};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::structures::{RelSym, Signature, StructureBuilder, WeightedStructure};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: usize,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub parent: Option<usize>,
}

/// A rooted binary tree whose nodes carry labels from a finite alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigmaTree {
    alphabet: Vec<String>,
    nodes: Vec<TreeNode>,
    root: usize,
    postorder: Vec<usize>,
    pre: Vec<u32>,
    post: Vec<u32>,
}

impl SigmaTree {
    /// Builds a tree from `(label, left, right)` triples indexed by node id.
    pub fn new(alphabet: Vec<String>, spec: Vec<(usize, Option<usize>, Option<usize>)>) -> Result<Self> {
        let n = spec.len();
        if n == 0 {
            return Err(Error::ParseTree("empty tree".into()));
        }
        let mut nodes: Vec<TreeNode> = spec
            .iter()
            .map(|&(label, left, right)| TreeNode {
                label,
                left,
                right,
                parent: None,
            })
            .collect();
        for (u, &(label, left, right)) in spec.iter().enumerate() {
            if label >= alphabet.len() {
                return Err(Error::ParseTree(format!("node {u}: label index {label} out of range")));
            }
            for c in [left, right].into_iter().flatten() {
                if c >= n || c == u {
                    return Err(Error::ParseTree(format!("node {u}: bad child {c}")));
                }
                if nodes[c].parent.is_some() {
                    return Err(Error::ParseTree(format!("node {c} has two parents")));
                }
                nodes[c].parent = Some(u);
            }
            if left.is_some() && left == right {
                return Err(Error::ParseTree(format!("node {u}: identical children")));
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&u| nodes[u].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::ParseTree(format!("expected one root, found {}", roots.len())));
        }
        let root = roots[0];
        let mut t = SigmaTree {
            alphabet,
            nodes,
            root,
            postorder: Vec::with_capacity(n),
            pre: vec![0; n],
            post: vec![0; n],
        };
        t.index()?;
        Ok(t)
    }

    fn index(&mut self) -> Result<()> {
        let n = self.nodes.len();
        let mut stack = vec![(self.root, false)];
        let mut clock = 0u32;
        let mut seen = 0usize;
        while let Some((u, done)) = stack.pop() {
            if done {
                self.post[u] = clock;
                clock += 1;
                self.postorder.push(u);
                continue;
            }
            seen += 1;
            if seen > n {
                return Err(Error::ParseTree("cycle in tree".into()));
            }
            self.pre[u] = clock;
            clock += 1;
            stack.push((u, true));
            if let Some(r) = self.nodes[u].right {
                stack.push((r, false));
            }
            if let Some(l) = self.nodes[u].left {
                stack.push((l, false));
            }
        }
        if self.postorder.len() != n {
            return Err(Error::ParseTree("tree is not connected".into()));
        }
        Ok(())
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, u: usize) -> &TreeNode {
        &self.nodes[u]
    }

    pub fn label(&self, u: usize) -> &str {
        &self.alphabet[self.nodes[u].label]
    }

    /// Children before parents, left subtree before right.
    pub fn postorder(&self) -> &[usize] {
        &self.postorder
    }

    /// `u` is an ancestor of `v` or equal to it.
    #[inline]
    pub fn is_ancestor(&self, u: usize, v: usize) -> bool {
        self.pre[u] <= self.pre[v] && self.post[v] <= self.post[u]
    }

    /// Nodes of the subtree rooted at `u`, in postorder.
    pub fn subtree(&self, u: usize) -> Vec<usize> {
        self.postorder
            .iter()
            .copied()
            .filter(|&v| self.is_ancestor(u, v))
            .collect()
    }

    pub fn lca(&self, mut u: usize, v: usize) -> usize {
        while !self.is_ancestor(u, v) {
            u = self.nodes[u].parent.expect("root is a common ancestor");
        }
        u
    }

    /// Tree signature: `S1`, `S2`, `anc` (ancestor-or-self) and `P_<label>`.
    pub fn signature(alphabet: &[String]) -> Signature {
        let mut rels = vec![
            RelSym {
                name: "S1".into(),
                arity: 2,
            },
            RelSym {
                name: "S2".into(),
                arity: 2,
            },
            RelSym {
                name: "anc".into(),
                arity: 2,
            },
        ];
        rels.extend(alphabet.iter().map(|a| RelSym {
            name: format!("P_{a}"),
            arity: 1,
        }));
        Signature::new(rels).expect("tree signature is well formed")
    }

    /// The tree as a relational structure; element `i` is node `i`, named `n<i>`.
    pub fn to_structure(&self) -> WeightedStructure {
        self.to_structure_over(&self.alphabet)
    }

    /// Like `to_structure` but declaring a label predicate for each of `alphabet`
    /// (a superset of the tree's own alphabet).
    pub fn to_structure_over(&self, alphabet: &[String]) -> WeightedStructure {
        let mut b = StructureBuilder::new(Self::signature(alphabet));
        let names: Vec<String> = (0..self.len()).map(|i| format!("n{i}")).collect();
        for n in &names {
            b.element(n);
        }
        let e = |i: usize| crate::structures::Elem(i as u32);
        for (u, node) in self.nodes.iter().enumerate() {
            if let Some(l) = node.left {
                b.tuple_elems("S1", vec![e(u), e(l)]).expect("S1");
            }
            if let Some(r) = node.right {
                b.tuple_elems("S2", vec![e(u), e(r)]).expect("S2");
            }
            let rel = format!("P_{}", self.label(u));
            if alphabet.contains(&self.alphabet[node.label]) {
                b.tuple_elems(&rel, vec![e(u)]).expect("label");
            }
            for v in 0..self.len() {
                if self.is_ancestor(u, v) {
                    b.tuple_elems("anc", vec![e(u), e(v)]).expect("anc");
                }
            }
        }
        b.build()
    }

    /// All trees with at most `max_nodes` nodes over `alphabet`, every shape
    /// and every labelling.
    pub fn enumerate(alphabet: &[String], max_nodes: usize) -> Vec<SigmaTree> {
        fn shapes(n: usize, memo: &mut HashMap<usize, Vec<Shape>>) -> Vec<Shape> {
            if let Some(s) = memo.get(&n) {
                return s.clone();
            }
            let mut out = Vec::new();
            if n == 1 {
                out.push(Shape::Leaf);
            } else {
                for l in shapes(n - 1, memo) {
                    out.push(Shape::Node(Some(Box::new(l.clone())), None));
                    out.push(Shape::Node(None, Some(Box::new(l))));
                }
                for k in 1..n - 1 {
                    for l in shapes(k, memo) {
                        for r in shapes(n - 1 - k, memo) {
                            out.push(Shape::Node(Some(Box::new(l.clone())), Some(Box::new(r))));
                        }
                    }
                }
            }
            memo.insert(n, out.clone());
            out
        }
        fn flatten(s: &Shape, out: &mut Vec<(Option<usize>, Option<usize>)>) -> usize {
            let id = out.len();
            out.push((None, None));
            if let Shape::Node(l, r) = s {
                let li = l.as_ref().map(|l| flatten(l, out));
                let ri = r.as_ref().map(|r| flatten(r, out));
                out[id] = (li, ri);
            }
            id
        }
        let mut memo = HashMap::new();
        let mut trees = Vec::new();
        let k = alphabet.len();
        for n in 1..=max_nodes {
            for s in shapes(n, &mut memo) {
                let mut flat = Vec::new();
                flatten(&s, &mut flat);
                let total = k.pow(n as u32);
                for code in 0..total {
                    let mut c = code;
                    let spec = flat
                        .iter()
                        .map(|&(l, r)| {
                            let lab = c % k;
                            c /= k;
                            (lab, l, r)
                        })
                        .collect();
                    trees.push(SigmaTree::new(alphabet.to_vec(), spec).expect("enumerated tree"));
                }
            }
        }
        trees
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Leaf,
    Node(Option<Box<Shape>>, Option<Box<Shape>>),
}

/// Common interface of single automata and lazy products. States are dense
/// integers in `0..state_count`.
pub trait Automaton {
    fn pebbles(&self) -> usize;
    fn labels(&self) -> &[String];
    fn state_count(&self) -> u128;
    /// `None` encodes an absent child.
    fn step(&self, left: Option<u64>, right: Option<u64>, label: usize, flags: u32) -> Result<u64>;
    fn fingerprint(&self) -> String;

    /// Map from tree label indices to automaton label indices.
    fn label_map(&self, tree: &SigmaTree) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        tree.alphabet()
            .iter()
            .map(|l| {
                index
                    .get(l.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingTransition(l.clone()))
            })
            .collect()
    }
}

/// Per-node flag words for a pebble placement.
pub fn pebble_flags(n: usize, pebbles: &[usize]) -> Vec<u32> {
    let mut flags = vec![0u32; n];
    for (i, &p) in pebbles.iter().enumerate() {
        flags[p] |= 1 << i;
    }
    flags
}

/// A prepared run context: one tree, one automaton.
pub struct Runner<'a, A: Automaton + ?Sized> {
    pub automaton: &'a A,
    pub tree: &'a SigmaTree,
    map: Vec<usize>,
}

impl<'a, A: Automaton + ?Sized> Runner<'a, A> {
    pub fn new(automaton: &'a A, tree: &'a SigmaTree) -> Result<Self> {
        Ok(Runner {
            automaton,
            tree,
            map: automaton.label_map(tree)?,
        })
    }

    fn check_pebbles(&self, pebbles: &[usize]) -> Result<()> {
        if pebbles.len() != self.automaton.pebbles() {
            return Err(Error::Automaton(format!(
                "automaton expects {} pebbles, got {}",
                self.automaton.pebbles(),
                pebbles.len()
            )));
        }
        if let Some(p) = pebbles.iter().find(|&&p| p >= self.tree.len()) {
            return Err(Error::Automaton(format!("pebble on unknown node {p}")));
        }
        Ok(())
    }

    /// States of every node.
    pub fn states(&self, pebbles: &[usize]) -> Result<Vec<u64>> {
        self.check_pebbles(pebbles)?;
        let flags = pebble_flags(self.tree.len(), pebbles);
        let mut st = vec![0u64; self.tree.len()];
        for &u in self.tree.postorder() {
            let node = self.tree.node(u);
            st[u] = self.automaton.step(
                node.left.map(|c| st[c]),
                node.right.map(|c| st[c]),
                self.map[node.label],
                flags[u],
            )?;
        }
        Ok(st)
    }

    pub fn root_state(&self, pebbles: &[usize]) -> Result<u64> {
        Ok(self.states(pebbles)?[self.tree.root()])
    }

    /// State at `top` computed from its subtree only, with the subtree at
    /// `seed_node` (if any) replaced by the given state.
    pub fn state_at(
        &self,
        top: usize,
        pebbles: &[usize],
        seed: Option<(usize, u64)>,
    ) -> Result<u64> {
        self.check_pebbles(pebbles)?;
        let flags = pebble_flags(self.tree.len(), pebbles);
        self.state_with_flags(top, &flags, seed)
    }

    /// Like `state_at` with explicit per-node flag words.
    pub fn state_with_flags(
        &self,
        top: usize,
        flags: &[u32],
        seed: Option<(usize, u64)>,
    ) -> Result<u64> {
        let mut st: HashMap<usize, u64> = HashMap::new();
        for u in self.tree.subtree(top) {
            if let Some((s, q)) = seed {
                if self.tree.is_ancestor(s, u) {
                    if u == s {
                        st.insert(u, q);
                    }
                    continue;
                }
            }
            let node = self.tree.node(u);
            let q = self.automaton.step(
                node.left.map(|c| st[&c]),
                node.right.map(|c| st[&c]),
                self.map[node.label],
                flags[u],
            )?;
            st.insert(u, q);
        }
        Ok(st[&top])
    }
}

/// Result of running a single automaton on a pebbled tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub root_state: usize,
    pub accepted: bool,
    pub states: Vec<usize>,
}

/// Deterministic bottom-up automaton with an explicit transition table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeAutomaton {
    pebbles: usize,
    labels: Vec<String>,
    state_names: Vec<String>,
    accepting: Vec<bool>,
    /// Indexed by `((l * (m+1)) + r) * nsym + sym`, `0` standing for an absent
    /// child and `q+1` for state `q`; `u32::MAX` marks a missing entry.
    delta: Vec<u32>,
}

pub const MISSING: u32 = u32::MAX;

impl TreeAutomaton {
    /// Builds a total automaton from a transition function.
    pub fn from_fn(
        pebbles: usize,
        labels: Vec<String>,
        nstates: usize,
        accepting: Vec<bool>,
        f: impl Fn(Option<usize>, Option<usize>, usize, u32) -> usize,
    ) -> Result<Self> {
        if accepting.len() != nstates || nstates == 0 {
            return Err(Error::Automaton("accepting vector length".into()));
        }
        let nsym = labels.len() << pebbles;
        let m1 = nstates + 1;
        let mut delta = vec![MISSING; m1 * m1 * nsym];
        for l in 0..m1 {
            for r in 0..m1 {
                for sym in 0..nsym {
                    let q = f(
                        l.checked_sub(1),
                        r.checked_sub(1),
                        sym >> pebbles,
                        (sym & ((1 << pebbles) - 1)) as u32,
                    );
                    if q >= nstates {
                        return Err(Error::Automaton(format!("transition to unknown state {q}")));
                    }
                    delta[(l * m1 + r) * nsym + sym] = q as u32;
                }
            }
        }
        Ok(TreeAutomaton {
            pebbles,
            labels,
            state_names: (0..nstates).map(|i| format!("q{i}")).collect(),
            accepting,
            delta,
        })
    }

    pub(crate) fn from_table(
        pebbles: usize,
        labels: Vec<String>,
        accepting: Vec<bool>,
        delta: Vec<u32>,
    ) -> Self {
        let n = accepting.len();
        TreeAutomaton {
            pebbles,
            labels,
            state_names: (0..n).map(|i| format!("q{i}")).collect(),
            accepting,
            delta,
        }
    }

    pub fn nstates(&self) -> usize {
        self.accepting.len()
    }

    pub fn accepting(&self) -> &[bool] {
        &self.accepting
    }

    pub fn is_accepting(&self, q: usize) -> bool {
        self.accepting[q]
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    fn nsym(&self) -> usize {
        self.labels.len() << self.pebbles
    }

    #[inline]
    pub fn transition(&self, left: Option<usize>, right: Option<usize>, label: usize, flags: u32) -> Option<usize> {
        let m1 = self.nstates() + 1;
        let l = left.map_or(0, |q| q + 1);
        let r = right.map_or(0, |q| q + 1);
        let sym = (label << self.pebbles) | flags as usize;
        let q = self.delta[(l * m1 + r) * self.nsym() + sym];
        (q != MISSING).then_some(q as usize)
    }

    /// Runs on `tree` with pebble `i` on node `pebbles[i]`.
    pub fn run(&self, tree: &SigmaTree, pebbles: &[usize]) -> Result<Run> {
        let states: Vec<usize> = Runner::new(self, tree)?
            .states(pebbles)?
            .into_iter()
            .map(|q| q as usize)
            .collect();
        let root_state = states[tree.root()];
        Ok(Run {
            root_state,
            accepted: self.accepting[root_state],
            states,
        })
    }

    pub fn accepts(&self, tree: &SigmaTree, pebbles: &[usize]) -> Result<bool> {
        Ok(self.run(tree, pebbles)?.accepted)
    }

    /// A one-state automaton accepting everything or nothing.
    pub fn constant(pebbles: usize, labels: Vec<String>, accept: bool) -> Self {
        Self::from_fn(pebbles, labels, 1, vec![accept], |_, _, _, _| 0).expect("constant automaton")
    }

    pub fn to_file(&self) -> AutomatonFile {
        let mut delta = Vec::new();
        let m1 = self.nstates() + 1;
        let name = |x: usize| -> String {
            if x == 0 {
                "*".into()
            } else {
                self.state_names[x - 1].clone()
            }
        };
        for l in 0..m1 {
            for r in 0..m1 {
                for sym in 0..self.nsym() {
                    let q = self.delta[(l * m1 + r) * self.nsym() + sym];
                    if q == MISSING {
                        continue;
                    }
                    let flags: Vec<u8> = (0..self.pebbles).map(|i| (sym >> i & 1) as u8).collect();
                    delta.push(json!([
                        name(l),
                        name(r),
                        {"sym": self.labels[sym >> self.pebbles], "flags": flags},
                        self.state_names[q as usize]
                    ]));
                }
            }
        }
        AutomatonFile {
            pebbles: self.pebbles,
            alphabet: self.labels.clone(),
            states: self.state_names.clone(),
            accepting: self
                .state_names
                .iter()
                .zip(&self.accepting)
                .filter(|(_, a)| **a)
                .map(|(n, _)| n.clone())
                .collect(),
            delta,
        }
    }

    pub fn from_file(file: &AutomatonFile) -> Result<Self> {
        let index: HashMap<&str, usize> = file
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != file.states.len() || file.states.is_empty() {
            return Err(Error::Automaton("state names must be unique and non-empty".into()));
        }
        if index.contains_key("*") {
            return Err(Error::Automaton("`*` is reserved for absent children".into()));
        }
        let labels: HashMap<&str, usize> = file
            .alphabet
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let m1 = file.states.len() + 1;
        let nsym = file.alphabet.len() << file.pebbles;
        let mut delta = vec![MISSING; m1 * m1 * nsym];
        let child = |v: &Value| -> Result<usize> {
            let s = v
                .as_str()
                .ok_or_else(|| Error::Automaton(format!("bad child state {v}")))?;
            if s == "*" {
                Ok(0)
            } else {
                index
                    .get(s)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Automaton(format!("unknown state `{s}`")))
            }
        };
        for row in &file.delta {
            let row = row
                .as_array()
                .filter(|r| r.len() == 4)
                .ok_or_else(|| Error::Automaton(format!("bad transition {row}")))?;
            let l = child(&row[0])?;
            let r = child(&row[1])?;
            let sym = row[2]
                .get("sym")
                .and_then(Value::as_str)
                .and_then(|s| labels.get(s))
                .ok_or_else(|| Error::Automaton(format!("bad symbol {}", row[2])))?;
            let flags = row[2]
                .get("flags")
                .and_then(Value::as_array)
                .cloned()
                .unwrap_or_default();
            if flags.len() != file.pebbles {
                return Err(Error::Automaton(format!("flag vector length in {}", row[2])));
            }
            let mut fw = 0usize;
            for (i, b) in flags.iter().enumerate() {
                match b.as_u64() {
                    Some(0) => {}
                    Some(1) => fw |= 1 << i,
                    _ => return Err(Error::Automaton(format!("bad flag {b}"))),
                }
            }
            let target = row[3]
                .as_str()
                .and_then(|s| index.get(s))
                .ok_or_else(|| Error::Automaton(format!("bad target {}", row[3])))?;
            delta[(l * m1 + r) * nsym + ((sym << file.pebbles) | fw)] = *target as u32;
        }
        let mut accepting = vec![false; file.states.len()];
        for s in &file.accepting {
            let i = index
                .get(s.as_str())
                .ok_or_else(|| Error::Automaton(format!("unknown accepting state `{s}`")))?;
            accepting[*i] = true;
        }
        Ok(TreeAutomaton {
            pebbles: file.pebbles,
            labels: file.alphabet.clone(),
            state_names: file.states.clone(),
            accepting,
            delta,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("automaton serializes")
    }

    /// Same automaton with its alphabet re-indexed to `labels`; labels unknown
    /// to the automaton get no transitions.
    pub fn with_labels(&self, labels: &[String]) -> TreeAutomaton {
        let m1 = self.nstates() + 1;
        let old_nsym = self.nsym();
        let nsym = labels.len() << self.pebbles;
        let mut delta = vec![MISSING; m1 * m1 * nsym];
        for (new_i, lab) in labels.iter().enumerate() {
            let Some(old_i) = self.labels.iter().position(|l| l == lab) else {
                continue;
            };
            for ctx in 0..m1 * m1 {
                for f in 0..1usize << self.pebbles {
                    delta[ctx * nsym + ((new_i << self.pebbles) | f)] =
                        self.delta[ctx * old_nsym + ((old_i << self.pebbles) | f)];
                }
            }
        }
        TreeAutomaton {
            pebbles: self.pebbles,
            labels: labels.to_vec(),
            state_names: self.state_names.clone(),
            accepting: self.accepting.clone(),
            delta,
        }
    }
}

impl Automaton for TreeAutomaton {
    fn pebbles(&self) -> usize {
        self.pebbles
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn state_count(&self) -> u128 {
        self.nstates() as u128
    }

    fn step(&self, left: Option<u64>, right: Option<u64>, label: usize, flags: u32) -> Result<u64> {
        self.transition(left.map(|q| q as usize), right.map(|q| q as usize), label, flags)
            .map(|q| q as u64)
            .ok_or_else(|| {
                let bits: String = (0..self.pebbles).map(|i| if flags >> i & 1 == 1 { '1' } else { '0' }).collect();
                Error::MissingTransition(format!("{}/{}", self.labels[label], bits))
            })
    }

    fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// JSON shape of an automaton file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AutomatonFile {
    pub pebbles: usize,
    pub alphabet: Vec<String>,
    pub states: Vec<String>,
    pub accepting: Vec<String>,
    pub delta: Vec<Value>,
}

/// Product of automata with equal pebble arity and alphabet. States are
/// mixed-radix encodings of the component states; acceptance is per component.
#[derive(Debug, Clone)]
pub struct ProductAutomaton {
    parts: Vec<TreeAutomaton>,
    radix: Vec<u64>,
    count: u128,
}

pub fn product(automata: &[TreeAutomaton]) -> Result<ProductAutomaton> {
    let first = automata
        .first()
        .ok_or_else(|| Error::Automaton("product of no automata".into()))?;
    let mut parts = Vec::with_capacity(automata.len());
    for a in automata {
        if a.pebbles != first.pebbles {
            return Err(Error::Automaton(format!(
                "pebble arity mismatch: {} vs {}",
                a.pebbles, first.pebbles
            )));
        }
        let mut x = a.labels.clone();
        let mut y = first.labels.clone();
        x.sort();
        y.sort();
        if x != y {
            return Err(Error::Automaton("alphabet mismatch in product".into()));
        }
        parts.push(a.with_labels(&first.labels));
    }
    let mut radix = Vec::with_capacity(parts.len());
    let mut count: u128 = 1;
    for p in &parts {
        radix.push(p.nstates() as u64);
        count = count.saturating_mul(p.nstates() as u128);
    }
    if count > u64::MAX as u128 {
        return Err(Error::PipelineCap(format!("product has {count} states")));
    }
    Ok(ProductAutomaton {
        parts,
        radix,
        count,
    })
}

impl ProductAutomaton {
    pub fn components(&self) -> &[TreeAutomaton] {
        &self.parts
    }

    pub fn decode(&self, mut q: u64) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.radix.len());
        for &r in &self.radix {
            out.push((q % r) as usize);
            q /= r;
        }
        out
    }

    pub fn encode(&self, states: &[usize]) -> u64 {
        let mut q = 0u64;
        for (s, r) in states.iter().zip(&self.radix).rev() {
            q = q * r + *s as u64;
        }
        q
    }

    pub fn accepts_component(&self, q: u64, i: usize) -> bool {
        self.parts[i].is_accepting(self.decode(q)[i])
    }
}

impl Automaton for ProductAutomaton {
    fn pebbles(&self) -> usize {
        self.parts[0].pebbles
    }

    fn labels(&self) -> &[String] {
        &self.parts[0].labels
    }

    fn state_count(&self) -> u128 {
        self.count
    }

    fn step(&self, left: Option<u64>, right: Option<u64>, label: usize, flags: u32) -> Result<u64> {
        let l = left.map(|q| self.decode(q));
        let r = right.map(|q| self.decode(q));
        let mut out = Vec::with_capacity(self.parts.len());
        for (i, p) in self.parts.iter().enumerate() {
            out.push(p.step(
                l.as_ref().map(|v| v[i] as u64),
                r.as_ref().map(|v| v[i] as u64),
                label,
                flags,
            )? as usize);
        }
        Ok(self.encode(&out))
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.parts {
            h.update(p.fingerprint().as_bytes());
            h.update(b"|");
        }
        hex::encode(h.finalize())
    }
}

/// `A(params, T) = { b : A accepts T with pebbles params, b }`.
pub fn automaton_output(a: &TreeAutomaton, tree: &SigmaTree, params: &[usize]) -> Result<Vec<usize>> {
    if a.pebbles != params.len() + 1 {
        return Err(Error::Automaton(format!(
            "automaton has {} pebbles, expected {}",
            a.pebbles,
            params.len() + 1
        )));
    }
    if let Some(p) = params.iter().find(|&&p| p >= tree.len()) {
        return Err(Error::Automaton(format!("node {p} not in tree")));
    }
    let runner = Runner::new(a, tree)?;
    let mut peb = params.to_vec();
    peb.push(0);
    let mut out = Vec::new();
    for b in 0..tree.len() {
        peb[params.len()] = b;
        if a.is_accepting(runner.root_state(&peb)? as usize) {
            out.push(b);
        }
    }
    Ok(out)
}

/// Summary line for an automaton, used by the CLI.
pub fn describe(a: &TreeAutomaton) -> BTreeMap<&'static str, Value> {
    BTreeMap::from([
        ("pebbles", json!(a.pebbles)),
        ("states", json!(a.nstates())),
        ("alphabet", json!(a.labels.len())),
        ("hash", json!(a.fingerprint())),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn single_node_accepts() {
        let t = SigmaTree::new(ab(), vec![(0, None, None)]).unwrap();
        let a = TreeAutomaton::from_fn(0, ab(), 2, vec![true, false], |l, r, lab, _| {
            if l.is_none() && r.is_none() && lab == 0 {
                0
            } else {
                1
            }
        })
        .unwrap();
        assert!(a.accepts(&t, &[]).unwrap());
    }

    #[test]
    fn one_state_automaton_constant_root() {
        let a = TreeAutomaton::constant(0, ab(), true);
        for t in SigmaTree::enumerate(&ab(), 4) {
            assert_eq!(a.run(&t, &[]).unwrap().root_state, 0);
        }
    }

    fn parity() -> TreeAutomaton {
        // state = parity of the number of leaves in the subtree
        TreeAutomaton::from_fn(0, ab(), 2, vec![false, true], |l, r, _, _| match (l, r) {
            (None, None) => 1,
            (Some(x), None) | (None, Some(x)) => x,
            (Some(x), Some(y)) => x ^ y,
        })
        .unwrap()
    }

    #[test]
    fn parity_of_leaves() {
        // root 0 with children 1 and 2; 1 has a left child 3
        let t = SigmaTree::new(ab(), vec![(0, Some(1), Some(2)), (1, Some(3), None), (0, None, None), (1, None, None)])
            .unwrap();
        let run = parity().run(&t, &[]).unwrap();
        assert_eq!(run.states, vec![0, 1, 1, 1]);
        assert!(!run.accepted);
        let t3 = SigmaTree::new(ab(), vec![(0, Some(1), Some(2)), (1, None, None), (0, None, None)]).unwrap();
        assert!(!parity().accepts(&t3, &[]).unwrap());
        for t in SigmaTree::enumerate(&ab(), 5) {
            let leaves = (0..t.len())
                .filter(|&u| t.node(u).left.is_none() && t.node(u).right.is_none())
                .count();
            assert_eq!(parity().accepts(&t, &[]).unwrap(), leaves % 2 == 1);
        }
    }

    #[test]
    fn missing_transition_is_reported() {
        let file = AutomatonFile {
            pebbles: 0,
            alphabet: ab(),
            states: vec!["q".into()],
            accepting: vec!["q".into()],
            delta: vec![json!(["*", "*", {"sym": "a", "flags": []}, "q"])],
        };
        let a = TreeAutomaton::from_file(&file).unwrap();
        let ta = SigmaTree::new(ab(), vec![(0, None, None)]).unwrap();
        let tb = SigmaTree::new(ab(), vec![(1, None, None)]).unwrap();
        assert!(a.accepts(&ta, &[]).unwrap());
        assert!(matches!(a.run(&tb, &[]), Err(Error::MissingTransition(_))));
    }

    #[test]
    fn file_roundtrip() {
        let a = parity();
        let back = TreeAutomaton::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.fingerprint(), a.fingerprint());
    }

    #[test]
    fn product_cardinality_and_coherence() {
        let two = parity();
        let three = TreeAutomaton::from_fn(0, ab(), 3, vec![true, false, false], |l, r, lab, _| {
            (l.unwrap_or(0) + r.unwrap_or(0) + lab) % 3
        })
        .unwrap();
        let p = product(&[two.clone(), three.clone()]).unwrap();
        assert_eq!(p.state_count(), 6);
        let single = product(std::slice::from_ref(&two)).unwrap();
        let diag = product(&[two.clone(), two.clone()]).unwrap();
        for t in SigmaTree::enumerate(&ab(), 5) {
            let q = Runner::new(&p, &t).unwrap().root_state(&[]).unwrap();
            let parts = p.decode(q);
            assert_eq!(parts[0], two.run(&t, &[]).unwrap().root_state);
            assert_eq!(parts[1], three.run(&t, &[]).unwrap().root_state);
            let s = Runner::new(&single, &t).unwrap().root_state(&[]).unwrap();
            assert_eq!(s as usize, two.run(&t, &[]).unwrap().root_state);
            let d = diag.decode(Runner::new(&diag, &t).unwrap().root_state(&[]).unwrap());
            assert_eq!(d[0], d[1]);
        }
        let one_pebble = TreeAutomaton::constant(1, ab(), true);
        assert!(product(&[two, one_pebble]).is_err());
    }

    #[test]
    fn constant_outputs() {
        let t = SigmaTree::new(ab(), vec![(0, Some(1), None), (1, None, None)]).unwrap();
        let yes = TreeAutomaton::constant(2, ab(), true);
        let no = TreeAutomaton::constant(2, ab(), false);
        assert_eq!(automaton_output(&yes, &t, &[0]).unwrap(), vec![0, 1]);
        assert!(automaton_output(&no, &t, &[0]).unwrap().is_empty());
        assert!(automaton_output(&yes, &t, &[7]).is_err());
    }

    #[test]
    fn subtree_state_is_context_free() {
        let p = parity();
        for t in SigmaTree::enumerate(&ab(), 5) {
            let runner = Runner::new(&p, &t).unwrap();
            let full = runner.states(&[]).unwrap();
            for (u, &q) in full.iter().enumerate() {
                assert_eq!(runner.state_at(u, &[], None).unwrap(), q);
            }
        }
    }

    #[test]
    fn enumeration_count() {
        // Catalan(1..=3) = 1, 2, 5 shapes; times 2^n labellings
        assert_eq!(SigmaTree::enumerate(&ab(), 3).len(), 2 + 2 * 4 + 5 * 8);
    }
}
