//! Inductive translation of MSO formulas over the tree signature into
//! deterministic bottom-up automata.
//!
//! Every intermediate automaton reads only the flag tracks of its own free
//! variables and is correct on inputs where each free element variable marks
//! exactly one node. Existential element quantifiers intersect with a
//! singleton check before projecting the track away; projection is determinised
//! by a reachable-subset construction. Intermediate results are minimised and
//! renumbered in discovery order, which also makes the output canonical.

use std::collections::HashMap;
use std::hash::Hash;

use crate::automata::{SigmaTree, TreeAutomaton};
use crate::error::{Error, Result};
use crate::logic::{Formula, Query};

#[derive(Debug, Clone, Copy)]
pub struct CompileLimits {
    pub max_states: usize,
    /// Bound on `(states+1)^2 * symbols` for any intermediate table.
    pub max_table: usize,
}

impl Default for CompileLimits {
    fn default() -> Self {
        CompileLimits {
            max_states: 4096,
            max_table: 1 << 26,
        }
    }
}

#[derive(Debug, Clone)]
struct Dta {
    tracks: Vec<usize>,
    nlabels: usize,
    accept: Vec<bool>,
    delta: Vec<u32>,
}

impl Dta {
    fn m(&self) -> usize {
        self.accept.len()
    }

    fn nsym(&self) -> usize {
        self.nlabels << self.tracks.len()
    }

    /// `l`, `r` use `0` for an absent child and `q+1` for state `q`.
    #[inline]
    fn get(&self, l: usize, r: usize, sym: usize) -> u32 {
        self.delta[(l * (self.m() + 1) + r) * self.nsym() + sym]
    }
}

/// Symbol index over `tracks` mapped to the symbol over `sub` (a subset).
fn sym_map(tracks: &[usize], sub: &[usize], nlabels: usize) -> Vec<usize> {
    let k = tracks.len();
    let pos: Vec<usize> = sub
        .iter()
        .map(|v| tracks.iter().position(|t| t == v).expect("sub-track"))
        .collect();
    (0..nlabels << k)
        .map(|sym| {
            let label = sym >> k;
            let mut f = 0usize;
            for (i, &p) in pos.iter().enumerate() {
                f |= (sym >> p & 1) << i;
            }
            (label << sub.len()) | f
        })
        .collect()
}

/// Builds the automaton reachable from leaves under `step`.
fn explore<K: Clone + Eq + Hash>(
    tracks: Vec<usize>,
    nlabels: usize,
    limits: &CompileLimits,
    mut step: impl FnMut(Option<&K>, Option<&K>, usize) -> K,
    accept: impl Fn(&K) -> bool,
) -> Result<Dta> {
    let nsym = nlabels << tracks.len();
    let mut keys: Vec<K> = Vec::new();
    let mut index: HashMap<K, u32> = HashMap::new();
    let mut edges: Vec<(u32, u32, u32, u32)> = Vec::new();
    let mut intern = |k: K, keys: &mut Vec<K>| -> Result<u32> {
        if let Some(&i) = index.get(&k) {
            return Ok(i);
        }
        let i = keys.len() as u32;
        if keys.len() + 1 > limits.max_states {
            return Err(Error::PipelineCap(format!(
                "automaton exceeds {} states",
                limits.max_states
            )));
        }
        let m1 = keys.len() + 2;
        if m1.saturating_mul(m1).saturating_mul(nsym) > limits.max_table {
            return Err(Error::PipelineCap(format!(
                "transition table exceeds {} entries",
                limits.max_table
            )));
        }
        index.insert(k.clone(), i);
        keys.push(k);
        Ok(i)
    };
    for sym in 0..nsym {
        let k = step(None, None, sym);
        let t = intern(k, &mut keys)?;
        edges.push((0, 0, sym as u32, t));
    }
    let mut t = 0usize;
    while t < keys.len() {
        let ti = t + 1;
        for s in 0..=ti {
            let pairs: &[(usize, usize)] = if s == ti { &[(ti, ti)] } else { &[(ti, s), (s, ti)] };
            for &(l, r) in pairs {
                let kl = (l > 0).then(|| keys[l - 1].clone());
                let kr = (r > 0).then(|| keys[r - 1].clone());
                for sym in 0..nsym {
                    let k = step(kl.as_ref(), kr.as_ref(), sym);
                    let target = intern(k, &mut keys)?;
                    edges.push((l as u32, r as u32, sym as u32, target));
                }
            }
        }
        t += 1;
    }
    let m1 = keys.len() + 1;
    let mut delta = vec![0u32; m1 * m1 * nsym];
    for (l, r, sym, q) in edges {
        delta[(l as usize * m1 + r as usize) * nsym + sym as usize] = q;
    }
    Ok(Dta {
        tracks,
        nlabels,
        accept: keys.iter().map(accept).collect(),
        delta,
    })
}

/// Moore partition refinement followed by canonical renumbering.
fn minimize(a: &Dta, limits: &CompileLimits) -> Result<Dta> {
    let m = a.m();
    let nsym = a.nsym();
    let mut class: Vec<u32> = a.accept.iter().map(|&b| b as u32).collect();
    let mut count = if a.accept.iter().all(|&b| b) || a.accept.iter().all(|&b| !b) {
        1
    } else {
        2
    };
    if count == 1 {
        class.iter_mut().for_each(|c| *c = 0);
    }
    loop {
        let mut ids: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut next = vec![0u32; m];
        for q in 0..m {
            let mut sig = Vec::with_capacity(1 + 2 * (m + 1) * nsym);
            sig.push(class[q]);
            for p in 0..=m {
                for sym in 0..nsym {
                    sig.push(class[a.get(q + 1, p, sym) as usize]);
                    sig.push(class[a.get(p, q + 1, sym) as usize]);
                }
            }
            let n = ids.len() as u32;
            next[q] = *ids.entry(sig).or_insert(n);
        }
        let new_count = ids.len();
        class = next;
        if new_count == count {
            break;
        }
        count = new_count;
    }
    let mut rep = vec![usize::MAX; count];
    for q in 0..m {
        if rep[class[q] as usize] == usize::MAX {
            rep[class[q] as usize] = q;
        }
    }
    explore(
        a.tracks.clone(),
        a.nlabels,
        limits,
        |l: Option<&u32>, r: Option<&u32>, sym| {
            let l = l.map_or(0, |c| rep[*c as usize] + 1);
            let r = r.map_or(0, |c| rep[*c as usize] + 1);
            class[a.get(l, r, sym) as usize]
        },
        |c| a.accept[rep[*c as usize]],
    )
}

fn union_tracks(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut t: Vec<usize> = a.iter().chain(b).copied().collect();
    t.sort_unstable();
    t.dedup();
    t
}

fn combine(a: &Dta, b: &Dta, op: impl Fn(bool, bool) -> bool, limits: &CompileLimits) -> Result<Dta> {
    let tracks = union_tracks(&a.tracks, &b.tracks);
    let ma = sym_map(&tracks, &a.tracks, a.nlabels);
    let mb = sym_map(&tracks, &b.tracks, b.nlabels);
    let d = explore(
        tracks,
        a.nlabels,
        limits,
        |l: Option<&(u32, u32)>, r: Option<&(u32, u32)>, sym| {
            let la = l.map_or(0, |p| p.0 as usize + 1);
            let ra = r.map_or(0, |p| p.0 as usize + 1);
            let lb = l.map_or(0, |p| p.1 as usize + 1);
            let rb = r.map_or(0, |p| p.1 as usize + 1);
            (a.get(la, ra, ma[sym]), b.get(lb, rb, mb[sym]))
        },
        |p| op(a.accept[p.0 as usize], b.accept[p.1 as usize]),
    )?;
    minimize(&d, limits)
}

fn complement(a: &Dta) -> Dta {
    Dta {
        accept: a.accept.iter().map(|b| !b).collect(),
        ..a.clone()
    }
}

/// Existential projection of `track` with subset determinisation.
fn project(a: &Dta, track: usize, limits: &CompileLimits) -> Result<Dta> {
    let Some(pos) = a.tracks.iter().position(|&t| t == track) else {
        return Ok(a.clone());
    };
    let tracks: Vec<usize> = a.tracks.iter().copied().filter(|&t| t != track).collect();
    let k = tracks.len();
    // symbol over the reduced tracks with the projected bit inserted
    let lift = |sym: usize, bit: usize| -> usize {
        let label = sym >> k;
        let f = sym & ((1 << k) - 1);
        let lo = f & ((1 << pos) - 1);
        let hi = f >> pos;
        (label << (k + 1)) | (hi << (pos + 1)) | (bit << pos) | lo
    };
    let words = a.m().div_ceil(64);
    let members = |s: &Vec<u64>| -> Vec<usize> {
        let mut v = Vec::new();
        for (w, &bits) in s.iter().enumerate() {
            let mut b = bits;
            while b != 0 {
                let i = b.trailing_zeros() as usize;
                v.push(w * 64 + i);
                b &= b - 1;
            }
        }
        v
    };
    let d = explore(
        tracks,
        a.nlabels,
        limits,
        |l: Option<&Vec<u64>>, r: Option<&Vec<u64>>, sym| {
            let ls: Vec<usize> = l.map_or(vec![0], |s| members(s).into_iter().map(|q| q + 1).collect());
            let rs: Vec<usize> = r.map_or(vec![0], |s| members(s).into_iter().map(|q| q + 1).collect());
            let mut out = vec![0u64; words];
            for bit in 0..2 {
                let s = lift(sym, bit);
                for &x in &ls {
                    for &y in &rs {
                        let q = a.get(x, y, s) as usize;
                        out[q / 64] |= 1 << (q % 64);
                    }
                }
            }
            out
        },
        |s| members(s).into_iter().any(|q| a.accept[q]),
    )?;
    minimize(&d, limits)
}

/// Lowered formula over variable ids.
#[derive(Debug, Clone)]
enum Ir {
    Const(bool),
    Label(usize, usize),
    Eq(usize, usize),
    Mem(usize, usize),
    Anc(usize, usize),
    Child(bool, usize, usize),
    ColorAt(usize, usize, u32),
    Not(Box<Ir>),
    Bin(BinOp, Box<Ir>, Box<Ir>),
    Exists(usize, Box<Ir>),
    ExistsSet(usize, Box<Ir>),
}

#[derive(Debug, Clone, Copy)]
enum BinOp {
    And,
    Or,
    Implies,
    Iff,
}

impl BinOp {
    fn apply(self, a: bool, b: bool) -> bool {
        match self {
            BinOp::And => a && b,
            BinOp::Or => a || b,
            BinOp::Implies => !a || b,
            BinOp::Iff => a == b,
        }
    }
}

struct Lower<'a> {
    alphabet: &'a [String],
    scope: Vec<(String, usize)>,
    set_scope: Vec<(String, usize)>,
    next: usize,
}

impl Lower<'_> {
    fn var(&self, x: &str) -> Result<usize> {
        self.scope
            .iter()
            .rev()
            .find(|(n, _)| n == x)
            .map(|(_, i)| *i)
            .ok_or_else(|| Error::UnboundVariable(x.to_string()))
    }

    fn fresh(&mut self) -> usize {
        self.next += 1;
        self.next - 1
    }

    fn fold(&mut self, op: BinOp, fs: &[Formula], unit: bool) -> Result<Ir> {
        let mut it = fs.iter();
        let Some(first) = it.next() else {
            return Ok(Ir::Const(unit));
        };
        let mut acc = self.lower(first)?;
        for f in it {
            acc = Ir::Bin(op, Box::new(acc), Box::new(self.lower(f)?));
        }
        Ok(acc)
    }

    fn lower(&mut self, f: &Formula) -> Result<Ir> {
        use Formula as F;
        Ok(match f {
            F::True => Ir::Const(true),
            F::False => Ir::Const(false),
            F::Eq(a, b) => Ir::Eq(self.var(a)?, self.var(b)?),
            F::Rel(r, args) => {
                let arity_err = |want: usize| Error::Arity {
                    name: r.clone(),
                    expected: want,
                    got: args.len(),
                };
                match r.as_str() {
                    "S1" | "S2" | "anc" => {
                        if args.len() != 2 {
                            return Err(arity_err(2));
                        }
                        let (a, b) = (self.var(&args[0])?, self.var(&args[1])?);
                        match r.as_str() {
                            "anc" => Ir::Anc(a, b),
                            "S1" => Ir::Child(true, a, b),
                            _ => Ir::Child(false, a, b),
                        }
                    }
                    _ => {
                        let Some(lab) = r.strip_prefix("P_") else {
                            return Err(Error::Unsupported(format!("relation `{r}` over trees")));
                        };
                        if args.len() != 1 {
                            return Err(arity_err(1));
                        }
                        let v = self.var(&args[0])?;
                        match self.alphabet.iter().position(|a| a == lab) {
                            Some(i) => Ir::Label(i, v),
                            None => Ir::Const(false),
                        }
                    }
                }
            }
            F::Mem(x, e) => {
                let s = self
                    .set_scope
                    .iter()
                    .rev()
                    .find(|(n, _)| n == x)
                    .map(|(_, i)| *i)
                    .ok_or_else(|| Error::Unsupported(format!("free set variable `{x}`")))?;
                Ir::Mem(s, self.var(e)?)
            }
            F::Not(g) => Ir::Not(Box::new(self.lower(g)?)),
            F::And(gs) => self.fold(BinOp::And, gs, true)?,
            F::Or(gs) => self.fold(BinOp::Or, gs, false)?,
            F::Implies(a, b) => Ir::Bin(BinOp::Implies, Box::new(self.lower(a)?), Box::new(self.lower(b)?)),
            F::Iff(a, b) => Ir::Bin(BinOp::Iff, Box::new(self.lower(a)?), Box::new(self.lower(b)?)),
            F::Exists(x, g) | F::Forall(x, g) => {
                let id = self.fresh();
                self.scope.push((x.clone(), id));
                let body = self.lower(g);
                self.scope.pop();
                let body = body?;
                if matches!(f, F::Exists(..)) {
                    Ir::Exists(id, Box::new(body))
                } else {
                    Ir::Not(Box::new(Ir::Exists(id, Box::new(Ir::Not(Box::new(body))))))
                }
            }
            F::ExistsSet(x, g) | F::ForallSet(x, g) => {
                let id = self.fresh();
                self.set_scope.push((x.clone(), id));
                let body = self.lower(g);
                self.set_scope.pop();
                let body = body?;
                if matches!(f, F::ExistsSet(..)) {
                    Ir::ExistsSet(id, Box::new(body))
                } else {
                    Ir::Not(Box::new(Ir::ExistsSet(id, Box::new(Ir::Not(Box::new(body))))))
                }
            }
            F::ExistsSetWithin {
                set,
                var,
                guard,
                body,
            } => {
                let desugared = F::ExistsSet(
                    set.clone(),
                    Box::new(F::And(vec![
                        F::Forall(
                            var.clone(),
                            Box::new(F::implies(F::Mem(set.clone(), var.clone()), (**guard).clone())),
                        ),
                        (**body).clone(),
                    ])),
                );
                self.lower(&desugared)?
            }
            F::DistLe(..) | F::DistGt(..) => {
                let sig = SigmaTree::signature(self.alphabet);
                self.lower(&f.expand_macros(&sig)?)?
            }
            F::ColorAt { leaf, node, color } => Ir::ColorAt(self.var(leaf)?, self.var(node)?, *color),
        })
    }
}

struct Builder<'a> {
    alphabet: &'a [String],
    limits: CompileLimits,
}

impl Builder<'_> {
    fn nl(&self) -> usize {
        self.alphabet.len()
    }

    fn constant(&self, b: bool) -> Dta {
        Dta {
            tracks: Vec::new(),
            nlabels: self.nl(),
            accept: vec![b],
            delta: vec![0; 4 * self.nl()],
        }
    }

    /// Base automaton over `vars` (distinct); `f` sees flags indexed like `vars`.
    fn base(
        &self,
        vars: &[usize],
        f: impl Fn(Option<u32>, Option<u32>, usize, &[bool]) -> u32,
        accept: impl Fn(&u32) -> bool,
    ) -> Result<Dta> {
        let mut tracks = vars.to_vec();
        tracks.sort_unstable();
        let pos: Vec<usize> = vars
            .iter()
            .map(|v| tracks.iter().position(|t| t == v).unwrap())
            .collect();
        let k = tracks.len();
        let d = explore(
            tracks,
            self.nl(),
            &self.limits,
            |l: Option<&u32>, r: Option<&u32>, sym| {
                let flags: Vec<bool> = pos.iter().map(|&p| sym >> p & 1 == 1).collect();
                f(l.copied(), r.copied(), sym >> k, &flags)
            },
            accept,
        )?;
        minimize(&d, &self.limits)
    }

    fn singleton(&self, v: usize) -> Result<Dta> {
        self.base(
            &[v],
            |l, r, _, fl| (l.unwrap_or(0) + r.unwrap_or(0) + fl[0] as u32).min(2),
            |&q| q == 1,
        )
    }

    fn colors(&self) -> Vec<u32> {
        let mut cs: Vec<u32> = Vec::new();
        for a in self.alphabet {
            let parts: Vec<&str> = a.split(':').collect();
            match parts.as_slice() {
                ["leaf", c] => cs.extend(c.parse::<u32>().ok()),
                ["recolor", i, j] => {
                    cs.extend(i.parse::<u32>().ok());
                    cs.extend(j.parse::<u32>().ok());
                }
                _ => {}
            }
        }
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    fn build(&self, ir: &Ir) -> Result<Dta> {
        const NEUTRAL: u32 = 0;
        Ok(match ir {
            Ir::Const(b) => self.constant(*b),
            Ir::Label(lab, v) => {
                let lab = *lab;
                self.base(&[*v], move |l, r, a, fl| l.unwrap_or(0) | r.unwrap_or(0) | (fl[0] && a == lab) as u32, |&q| q == 1)?
            }
            Ir::Eq(a, b) if a == b => self.constant(true),
            Ir::Eq(a, b) => self.base(&[*a, *b], |l, r, _, fl| l.unwrap_or(0) | r.unwrap_or(0) | (fl[0] && fl[1]) as u32, |&q| q == 1)?,
            Ir::Mem(x, e) => self.base(&[*x, *e], |l, r, _, fl| l.unwrap_or(0) | r.unwrap_or(0) | (fl[0] && fl[1]) as u32, |&q| q == 1)?,
            Ir::Anc(a, b) if a == b => self.constant(true),
            Ir::Anc(a, b) => {
                // 0 nothing, 1 second pebble seen, 2 accept, 3 reject
                self.base(
                    &[*a, *b],
                    |l, r, _, fl| {
                        let kids = [l.unwrap_or(NEUTRAL), r.unwrap_or(NEUTRAL)];
                        if kids.contains(&2) {
                            return 2;
                        }
                        if kids.contains(&3) {
                            return 3;
                        }
                        let below = kids.contains(&1) || fl[1];
                        match (fl[0], below) {
                            (true, true) => 2,
                            (true, false) => 3,
                            (false, true) => 1,
                            (false, false) => 0,
                        }
                    },
                    |&q| q == 2,
                )?
            }
            Ir::Child(_, a, b) if a == b => self.constant(false),
            Ir::Child(left, a, b) => {
                let left = *left;
                // 0 nothing, 1 child pebble here, 2 child pebble deeper, 3 accept, 4 reject
                self.base(
                    &[*a, *b],
                    move |l, r, _, fl| {
                        let kids = [l.unwrap_or(NEUTRAL), r.unwrap_or(NEUTRAL)];
                        if kids.contains(&3) {
                            return 3;
                        }
                        if kids.contains(&4) {
                            return 4;
                        }
                        if fl[0] {
                            let side = if left { l } else { r };
                            return if side == Some(1) { 3 } else { 4 };
                        }
                        if fl[1] {
                            1
                        } else if kids.contains(&1) || kids.contains(&2) {
                            2
                        } else {
                            0
                        }
                    },
                    |&q| q == 3,
                )?
            }
            Ir::ColorAt(x, z, c) => {
                let colors = self.colors();
                let k = colors.len() as u32;
                let done = k + 1;
                let fail = k + 2;
                #[allow(clippy::type_complexity)]
                let label_info: Vec<(Option<u32>, Option<(u32, u32)>)> = self
                    .alphabet
                    .iter()
                    .map(|a| {
                        let parts: Vec<&str> = a.split(':').collect();
                        let idx = |s: &str| s.parse::<u32>().ok().and_then(|c| colors.iter().position(|&x| x == c)).map(|i| i as u32 + 1);
                        match parts.as_slice() {
                            ["leaf", c] => (idx(c), None),
                            ["recolor", i, j] => (None, idx(i).zip(idx(j))),
                            _ => (None, None),
                        }
                    })
                    .collect();
                let target = colors.iter().position(|&x| x == *c).map(|i| i as u32 + 1);
                let step = move |l: Option<u32>, r: Option<u32>, a: usize, fl: &[bool]| -> u32 {
                    let kids = [l.unwrap_or(NEUTRAL), r.unwrap_or(NEUTRAL)];
                    if kids.contains(&fail) {
                        return fail;
                    }
                    if kids.contains(&done) {
                        return done;
                    }
                    let mut cur = kids.iter().copied().find(|&s| (1..=k).contains(&s));
                    let (leaf, recolor) = label_info[a];
                    if fl[0] {
                        match leaf {
                            Some(col) => cur = Some(col),
                            None => return fail,
                        }
                    } else if let (Some(col), Some((i, j))) = (cur, recolor) {
                        if col == i {
                            cur = Some(j);
                        }
                    }
                    if fl[1] {
                        return if cur.is_some() && cur == target { done } else { fail };
                    }
                    cur.unwrap_or(NEUTRAL)
                };
                if x == z {
                    let same = match self.alphabet.iter().position(|a| *a == format!("leaf:{c}")) {
                        Some(i) => Ir::Label(i, *x),
                        None => Ir::Const(false),
                    };
                    return self.build(&same);
                }
                self.base(&[*x, *z], step, move |&q| q == done)?
            }
            Ir::Not(g) => complement(&self.build(g)?),
            Ir::Bin(op, a, b) => {
                let (a, b) = (self.build(a)?, self.build(b)?);
                let op = *op;
                combine(&a, &b, move |x, y| op.apply(x, y), &self.limits)?
            }
            Ir::Exists(v, g) => {
                let body = self.build(g)?;
                if !body.tracks.contains(v) {
                    body
                } else {
                    let guarded = combine(&self.singleton(*v)?, &body, |x, y| x && y, &self.limits)?;
                    project(&guarded, *v, &self.limits)?
                }
            }
            Ir::ExistsSet(v, g) => project(&self.build(g)?, *v, &self.limits)?,
        })
    }

    /// Widens `a` to read exactly `tracks` (a superset of its own).
    fn widen(&self, a: &Dta, tracks: Vec<usize>) -> Result<Dta> {
        let map = sym_map(&tracks, &a.tracks, a.nlabels);
        let d = explore(
            tracks,
            a.nlabels,
            &self.limits,
            |l: Option<&u32>, r: Option<&u32>, sym| {
                a.get(l.map_or(0, |q| *q as usize + 1), r.map_or(0, |q| *q as usize + 1), map[sym])
            },
            |q| a.accept[*q as usize],
        )?;
        minimize(&d, &self.limits)
    }
}

/// Compiles `formula` over the tree signature for `alphabet`. Pebble `i` of
/// the result carries `free_order[i]`.
pub fn compile(
    formula: &Formula,
    alphabet: &[String],
    free_order: &[String],
    limits: CompileLimits,
) -> Result<TreeAutomaton> {
    if let Some(x) = formula.free_set_vars().first() {
        return Err(Error::Unsupported(format!("free set variable `{x}`")));
    }
    for v in formula.free_vars() {
        if !free_order.contains(&v) {
            return Err(Error::UnboundVariable(v));
        }
    }
    if alphabet.is_empty() {
        return Err(Error::Automaton("empty alphabet".into()));
    }
    let mut lower = Lower {
        alphabet,
        scope: free_order.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect(),
        set_scope: Vec::new(),
        next: free_order.len(),
    };
    let ir = lower.lower(formula)?;
    let b = Builder { alphabet, limits };
    let d = b.build(&ir)?;
    let d = b.widen(&d, (0..free_order.len()).collect())?;
    Ok(TreeAutomaton::from_table(
        free_order.len(),
        alphabet.to_vec(),
        d.accept.clone(),
        d.delta.clone(),
    ))
}

/// Compiles a unary query: pebbles are the parameters followed by the output.
pub fn compile_query(q: &Query, alphabet: &[String], limits: CompileLimits) -> Result<TreeAutomaton> {
    let mut order = q.params.clone();
    order.push(q.output.clone());
    compile(&q.formula, alphabet, &order, limits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{evaluate, Assignment, Binding};
    use crate::structures::Elem;

    fn ab() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn f(text: &str) -> Formula {
        Formula::from_json(text).unwrap()
    }

    fn agree(formula: &Formula, vars: &[&str], max_nodes: usize) {
        let order: Vec<String> = vars.iter().map(|s| s.to_string()).collect();
        let a = compile(formula, &ab(), &order, CompileLimits::default()).unwrap();
        for t in SigmaTree::enumerate(&ab(), max_nodes) {
            let s = t.to_structure();
            let n = t.len();
            let mut peb = vec![0usize; vars.len()];
            loop {
                let asg: Assignment = vars
                    .iter()
                    .zip(&peb)
                    .map(|(v, p)| (v.to_string(), Binding::Elem(Elem(*p as u32))))
                    .collect();
                assert_eq!(
                    a.accepts(&t, &peb).unwrap(),
                    evaluate(&s, formula, &asg).unwrap(),
                    "{formula:?} on {t:?} at {peb:?}"
                );
                let mut i = 0;
                while i < peb.len() {
                    peb[i] += 1;
                    if peb[i] < n {
                        break;
                    }
                    peb[i] = 0;
                    i += 1;
                }
                if i == peb.len() {
                    break;
                }
            }
        }
    }

    #[test]
    fn label_atom_has_two_states() {
        let a = compile(&f(r#"["P_a","x"]"#), &ab(), &["x".into()], CompileLimits::default()).unwrap();
        assert_eq!(a.nstates(), 2);
        agree(&f(r#"["P_a","x"]"#), &["x"], 4);
    }

    #[test]
    fn ancestor_on_three_node_path() {
        let t = SigmaTree::new(ab(), vec![(0, Some(1), None), (0, Some(2), None), (1, None, None)]).unwrap();
        let phi = f(r#"["anc","x","y"]"#);
        let a = compile(&phi, &ab(), &["x".into(), "y".into()], CompileLimits::default()).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert_eq!(a.accepts(&t, &[x, y]).unwrap(), x <= y);
            }
        }
        agree(&phi, &["x", "y"], 4);
    }

    #[test]
    fn exists_label_over_all_small_trees() {
        agree(&f(r#"["exists","x",["P_a","x"]]"#), &[], 5);
    }

    #[test]
    fn children_and_sets() {
        agree(&f(r#"["S1","x","y"]"#), &["x", "y"], 4);
        agree(&f(r#"["S2","x","y"]"#), &["x", "y"], 4);
        agree(
            &f(r#"["exists-set","X",["and",["X","x"],["not",["X","y"]],["forall","z",["implies",["X","z"],["P_a","z"]]]]]"#),
            &["x", "y"],
            4,
        );
        agree(&f(r#"["forall","x",["exists","y",["anc","y","x"]]]"#), &[], 4);
    }

    #[test]
    fn free_set_variable_rejected() {
        let phi = Formula::parse_with_sets(&serde_json::json!(["X", "x"]), &["X"]).unwrap();
        assert!(matches!(
            compile(&phi, &ab(), &["x".into()], CompileLimits::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn unknown_relation_rejected() {
        assert!(matches!(
            compile(&f(r#"["E","x","y"]"#), &ab(), &["x".into(), "y".into()], CompileLimits::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn cap_is_enforced() {
        let limits = CompileLimits {
            max_states: 2,
            max_table: 1 << 20,
        };
        assert!(matches!(
            compile(&f(r#"["anc","x","y"]"#), &ab(), &["x".into(), "y".into()], limits),
            Err(Error::PipelineCap(_))
        ));
    }

    #[test]
    fn color_at_matches_expansion() {
        let alphabet: Vec<String> = ["leaf:1", "leaf:2", "union", "recolor:1:2", "recolor:2:1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let phi = Formula::ColorAt {
            leaf: "x".into(),
            node: "z".into(),
            color: 2,
        };
        let a = compile(&phi, &alphabet, &["x".into(), "z".into()], CompileLimits::default()).unwrap();
        for t in SigmaTree::enumerate(&alphabet, 4) {
            let s = t.to_structure();
            for x in 0..t.len() {
                for z in 0..t.len() {
                    let asg: Assignment = [
                        ("x".to_string(), Binding::Elem(Elem(x as u32))),
                        ("z".to_string(), Binding::Elem(Elem(z as u32))),
                    ]
                    .into_iter()
                    .collect();
                    assert_eq!(a.accepts(&t, &[x, z]).unwrap(), evaluate(&s, &phi, &asg).unwrap(), "{t:?} {x} {z}");
                }
            }
        }
    }
}
