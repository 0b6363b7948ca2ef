//! FO/MSO syntax over relational signatures, brute-force model checking,
//! unary query evaluation with weights, and Gaifman-normal-form packages.
//!
//! Formulas are written as JSON s-expressions, for example
//! `["exists","y",["and",["E","x","y"],["=","y","z"]]]`. A list whose head is a
//! set variable in scope (bound by a set quantifier or declared free) is a
//! membership atom `X(x)`; any other unknown head is a relation atom.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::structures::{Elem, Signature, WeightedStructure};

/// Largest domain a set quantifier may range over.
pub const SET_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    True,
    False,
    Eq(String, String),
    Rel(String, Vec<String>),
    /// `X(x)`: set variable, element variable.
    Mem(String, String),
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Iff(Box<Formula>, Box<Formula>),
    Exists(String, Box<Formula>),
    Forall(String, Box<Formula>),
    ExistsSet(String, Box<Formula>),
    ForallSet(String, Box<Formula>),
    /// `exists X . (forall w . X(w) -> guard(w)) and body`.
    ExistsSetWithin {
        set: String,
        var: String,
        guard: Box<Formula>,
        body: Box<Formula>,
    },
    /// Gaifman distance at most `d`; expands to first-order logic.
    DistLe(String, String, u32),
    /// Gaifman distance greater than `d`.
    DistGt(String, String, u32),
    /// Over a parse-tree signature: leaf `leaf` carries color `color` at node `node`.
    ColorAt {
        leaf: String,
        node: String,
        color: u32,
    },
}

fn as_str<'a>(v: &'a Value, what: &str) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Syntax(format!("expected {what}, got {v}")))
}

fn var_name(v: &Value) -> Result<String> {
    let s = as_str(v, "variable name")?;
    if s.is_empty() || s.starts_with('#') {
        return Err(Error::Syntax(format!("invalid variable name `{s}`")));
    }
    Ok(s.to_string())
}

fn nat(v: &Value) -> Result<u32> {
    v.as_u64()
        .and_then(|d| u32::try_from(d).ok())
        .ok_or_else(|| Error::Syntax(format!("expected natural number, got {v}")))
}

impl Formula {
    pub fn parse(v: &Value) -> Result<Formula> {
        Self::parse_with_sets(v, &[])
    }

    /// Parses with `sets` declared as free set variables.
    pub fn parse_with_sets(v: &Value, sets: &[&str]) -> Result<Formula> {
        let mut scope: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        parse_rec(v, &mut scope)
    }

    pub fn from_json(text: &str) -> Result<Formula> {
        Self::parse(&serde_json::from_str(text)?)
    }

    pub fn to_sexpr(&self) -> Value {
        use Formula::*;
        match self {
            True => json!("true"),
            False => json!("false"),
            Eq(a, b) => json!(["=", a, b]),
            Rel(r, args) => {
                let mut v = vec![json!(r)];
                v.extend(args.iter().map(|a| json!(a)));
                Value::Array(v)
            }
            Mem(x, e) => json!([x, e]),
            Not(f) => json!(["not", f.to_sexpr()]),
            And(fs) => {
                let mut v = vec![json!("and")];
                v.extend(fs.iter().map(Formula::to_sexpr));
                Value::Array(v)
            }
            Or(fs) => {
                let mut v = vec![json!("or")];
                v.extend(fs.iter().map(Formula::to_sexpr));
                Value::Array(v)
            }
            Implies(a, b) => json!(["implies", a.to_sexpr(), b.to_sexpr()]),
            Iff(a, b) => json!(["iff", a.to_sexpr(), b.to_sexpr()]),
            Exists(x, f) => json!(["exists", x, f.to_sexpr()]),
            Forall(x, f) => json!(["forall", x, f.to_sexpr()]),
            ExistsSet(x, f) => json!(["exists-set", x, f.to_sexpr()]),
            ForallSet(x, f) => json!(["forall-set", x, f.to_sexpr()]),
            ExistsSetWithin {
                set,
                var,
                guard,
                body,
            } => json!(["exists-set-within", set, var, guard.to_sexpr(), body.to_sexpr()]),
            DistLe(a, b, d) => json!(["dist<=", a, b, d]),
            DistGt(a, b, d) => json!(["dist>", a, b, d]),
            ColorAt { leaf, node, color } => json!(["color-at", leaf, node, color]),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn exists(x: &str, f: Formula) -> Formula {
        Formula::Exists(x.to_string(), Box::new(f))
    }

    pub fn forall(x: &str, f: Formula) -> Formula {
        Formula::Forall(x.to_string(), Box::new(f))
    }

    pub fn implies(a: Formula, b: Formula) -> Formula {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn rel(r: &str, args: &[&str]) -> Formula {
        Formula::Rel(r.to_string(), args.iter().map(|a| a.to_string()).collect())
    }

    pub fn eq(a: &str, b: &str) -> Formula {
        Formula::Eq(a.to_string(), b.to_string())
    }

    /// First-order free variables in order of first occurrence.
    pub fn free_vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_free(&mut Vec::new(), &mut Vec::new(), &mut out, &mut Vec::new());
        out
    }

    /// Free set variables in order of first occurrence.
    pub fn free_set_vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_free(&mut Vec::new(), &mut Vec::new(), &mut Vec::new(), &mut out);
        out
    }

    fn collect_free(
        &self,
        bound: &mut Vec<String>,
        bound_sets: &mut Vec<String>,
        out: &mut Vec<String>,
        out_sets: &mut Vec<String>,
    ) {
        use Formula::*;
        let var = |x: &String, bound: &Vec<String>, out: &mut Vec<String>| {
            if !bound.contains(x) && !out.contains(x) {
                out.push(x.clone());
            }
        };
        match self {
            True | False => {}
            Eq(a, b) | DistLe(a, b, _) | DistGt(a, b, _) => {
                var(a, bound, out);
                var(b, bound, out);
            }
            ColorAt { leaf, node, .. } => {
                var(leaf, bound, out);
                var(node, bound, out);
            }
            Rel(_, args) => {
                for a in args {
                    var(a, bound, out);
                }
            }
            Mem(x, e) => {
                if !bound_sets.contains(x) && !out_sets.contains(x) {
                    out_sets.push(x.clone());
                }
                var(e, bound, out);
            }
            Not(f) => f.collect_free(bound, bound_sets, out, out_sets),
            And(fs) | Or(fs) => {
                for f in fs {
                    f.collect_free(bound, bound_sets, out, out_sets);
                }
            }
            Implies(a, b) | Iff(a, b) => {
                a.collect_free(bound, bound_sets, out, out_sets);
                b.collect_free(bound, bound_sets, out, out_sets);
            }
            Exists(x, f) | Forall(x, f) => {
                bound.push(x.clone());
                f.collect_free(bound, bound_sets, out, out_sets);
                bound.pop();
            }
            ExistsSet(x, f) | ForallSet(x, f) => {
                bound_sets.push(x.clone());
                f.collect_free(bound, bound_sets, out, out_sets);
                bound_sets.pop();
            }
            ExistsSetWithin {
                set,
                var: w,
                guard,
                body,
            } => {
                bound.push(w.clone());
                guard.collect_free(bound, bound_sets, out, out_sets);
                bound.pop();
                bound_sets.push(set.clone());
                body.collect_free(bound, bound_sets, out, out_sets);
                bound_sets.pop();
            }
        }
    }

    /// Quantifier rank, counting element and set quantifiers. Macros count as
    /// their expansion over a binary signature.
    pub fn rank(&self) -> u32 {
        use Formula::*;
        match self {
            True | False | Eq(..) | Rel(..) | Mem(..) => 0,
            DistLe(_, _, d) | DistGt(_, _, d) => d.saturating_sub(1),
            ColorAt { .. } => {
                static R: OnceLock<u32> = OnceLock::new();
                *R.get_or_init(|| {
                    let sig = Signature::new(vec![crate::structures::RelSym {
                        name: "P_recolor:1:2".into(),
                        arity: 1,
                    }])
                    .expect("static signature");
                    color_at_formula("x", "z", 1, &sig).rank()
                })
            }
            Not(f) => f.rank(),
            And(fs) | Or(fs) => fs.iter().map(Formula::rank).max().unwrap_or(0),
            Implies(a, b) | Iff(a, b) => a.rank().max(b.rank()),
            Exists(_, f) | Forall(_, f) | ExistsSet(_, f) | ForallSet(_, f) => 1 + f.rank(),
            ExistsSetWithin { guard, body, .. } => 1 + (1 + guard.rank()).max(body.rank()),
        }
    }

    /// Number of AST nodes.
    pub fn size(&self) -> usize {
        use Formula::*;
        match self {
            True | False | Eq(..) | Rel(..) | Mem(..) | DistLe(..) | DistGt(..) | ColorAt { .. } => 1,
            Not(f) | Exists(_, f) | Forall(_, f) | ExistsSet(_, f) | ForallSet(_, f) => 1 + f.size(),
            And(fs) | Or(fs) => 1 + fs.iter().map(Formula::size).sum::<usize>(),
            Implies(a, b) | Iff(a, b) => 1 + a.size() + b.size(),
            ExistsSetWithin { guard, body, .. } => 1 + guard.size() + body.size(),
        }
    }

    /// Replaces distance and color macros by plain FO/MSO over `sig`.
    pub fn expand_macros(&self, sig: &Signature) -> Result<Formula> {
        use Formula::*;
        Ok(match self {
            DistLe(a, b, d) => dist_le_formula(a, b, *d, sig, 0)?,
            DistGt(a, b, d) => Formula::not(dist_le_formula(a, b, *d, sig, 0)?),
            ColorAt { leaf, node, color } => color_at_formula(leaf, node, *color, sig),
            True | False | Eq(..) | Rel(..) | Mem(..) => self.clone(),
            Not(f) => Formula::not(f.expand_macros(sig)?),
            And(fs) => And(fs.iter().map(|f| f.expand_macros(sig)).collect::<Result<_>>()?),
            Or(fs) => Or(fs.iter().map(|f| f.expand_macros(sig)).collect::<Result<_>>()?),
            Implies(a, b) => Implies(Box::new(a.expand_macros(sig)?), Box::new(b.expand_macros(sig)?)),
            Iff(a, b) => Iff(Box::new(a.expand_macros(sig)?), Box::new(b.expand_macros(sig)?)),
            Exists(x, f) => Exists(x.clone(), Box::new(f.expand_macros(sig)?)),
            Forall(x, f) => Forall(x.clone(), Box::new(f.expand_macros(sig)?)),
            ExistsSet(x, f) => ExistsSet(x.clone(), Box::new(f.expand_macros(sig)?)),
            ForallSet(x, f) => ForallSet(x.clone(), Box::new(f.expand_macros(sig)?)),
            ExistsSetWithin {
                set,
                var,
                guard,
                body,
            } => ExistsSetWithin {
                set: set.clone(),
                var: var.clone(),
                guard: Box::new(guard.expand_macros(sig)?),
                body: Box::new(body.expand_macros(sig)?),
            },
        })
    }
}

fn parse_rec(v: &Value, sets: &mut Vec<String>) -> Result<Formula> {
    if let Some(s) = v.as_str() {
        return match s {
            "true" => Ok(Formula::True),
            "false" => Ok(Formula::False),
            _ => Err(Error::Syntax(format!("bare symbol `{s}` is not a formula"))),
        };
    }
    if let Some(b) = v.as_bool() {
        return Ok(if b { Formula::True } else { Formula::False });
    }
    let items = v
        .as_array()
        .ok_or_else(|| Error::Syntax(format!("expected list, got {v}")))?;
    let (head, args) = items
        .split_first()
        .ok_or_else(|| Error::Syntax("empty list".into()))?;
    let head = as_str(head, "operator")?;
    let want = |n: usize| -> Result<()> {
        if args.len() == n {
            Ok(())
        } else {
            Err(Error::Syntax(format!(
                "`{head}` takes {n} arguments, got {}",
                args.len()
            )))
        }
    };
    let quantified = |sets: &mut Vec<String>, set_var: bool| -> Result<(Vec<String>, Formula)> {
        want(2)?;
        let vars = match &args[0] {
            Value::Array(vs) => vs.iter().map(var_name).collect::<Result<Vec<_>>>()?,
            other => vec![var_name(other)?],
        };
        let pushed = if set_var { vars.len() } else { 0 };
        if set_var {
            sets.extend(vars.iter().cloned());
        }
        let body = parse_rec(&args[1], sets);
        sets.truncate(sets.len() - pushed);
        Ok((vars, body?))
    };
    Ok(match head {
        "true" => Formula::True,
        "false" => Formula::False,
        "=" => {
            want(2)?;
            Formula::Eq(var_name(&args[0])?, var_name(&args[1])?)
        }
        "not" => {
            want(1)?;
            Formula::not(parse_rec(&args[0], sets)?)
        }
        "and" | "or" => {
            let fs = args
                .iter()
                .map(|a| parse_rec(a, sets))
                .collect::<Result<Vec<_>>>()?;
            if head == "and" {
                Formula::And(fs)
            } else {
                Formula::Or(fs)
            }
        }
        "implies" | "iff" => {
            want(2)?;
            let a = Box::new(parse_rec(&args[0], sets)?);
            let b = Box::new(parse_rec(&args[1], sets)?);
            if head == "implies" {
                Formula::Implies(a, b)
            } else {
                Formula::Iff(a, b)
            }
        }
        "exists" | "forall" | "exists-set" | "forall-set" => {
            let set_var = head.ends_with("-set");
            let (vars, body) = quantified(sets, set_var)?;
            vars.into_iter().rev().fold(body, |f, x| match head {
                "exists" => Formula::Exists(x, Box::new(f)),
                "forall" => Formula::Forall(x, Box::new(f)),
                "exists-set" => Formula::ExistsSet(x, Box::new(f)),
                _ => Formula::ForallSet(x, Box::new(f)),
            })
        }
        "exists-set-within" => {
            want(4)?;
            let set = var_name(&args[0])?;
            let var = var_name(&args[1])?;
            let guard = parse_rec(&args[2], sets)?;
            sets.push(set.clone());
            let body = parse_rec(&args[3], sets);
            sets.pop();
            Formula::ExistsSetWithin {
                set,
                var,
                guard: Box::new(guard),
                body: Box::new(body?),
            }
        }
        "dist<=" | "dist>" => {
            want(3)?;
            let a = var_name(&args[0])?;
            let b = var_name(&args[1])?;
            let d = nat(&args[2])?;
            if head == "dist<=" {
                Formula::DistLe(a, b, d)
            } else {
                Formula::DistGt(a, b, d)
            }
        }
        "color-at" => {
            want(3)?;
            Formula::ColorAt {
                leaf: var_name(&args[0])?,
                node: var_name(&args[1])?,
                color: nat(&args[2])?,
            }
        }
        "label" => {
            want(2)?;
            let a = as_str(&args[0], "label")?;
            Formula::Rel(format!("P_{a}"), vec![var_name(&args[1])?])
        }
        name if sets.iter().any(|s| s == name) => {
            want(1)?;
            Formula::Mem(name.to_string(), var_name(&args[0])?)
        }
        name => {
            if args.is_empty() {
                return Err(Error::Syntax(format!("relation atom `{name}` has no arguments")));
            }
            Formula::Rel(
                name.to_string(),
                args.iter().map(var_name).collect::<Result<_>>()?,
            )
        }
    })
}

/// Gaifman adjacency `u ~ v` (u and v co-occur in a tuple) as an FO formula.
fn adjacent_formula(u: &str, v: &str, sig: &Signature, depth: usize) -> Formula {
    let mut alts = Vec::new();
    for rel in sig.relations() {
        for i in 0..rel.arity {
            for j in 0..rel.arity {
                if i == j {
                    continue;
                }
                let others: Vec<String> = (0..rel.arity)
                    .filter(|p| *p != i && *p != j)
                    .map(|p| format!("#a{depth}_{p}"))
                    .collect();
                let args: Vec<String> = (0..rel.arity)
                    .map(|p| {
                        if p == i {
                            u.to_string()
                        } else if p == j {
                            v.to_string()
                        } else {
                            format!("#a{depth}_{p}")
                        }
                    })
                    .collect();
                let atom = Formula::Rel(rel.name.clone(), args);
                alts.push(
                    others
                        .into_iter()
                        .rev()
                        .fold(atom, |f, w| Formula::Exists(w, Box::new(f))),
                );
            }
        }
    }
    Formula::And(vec![Formula::not(Formula::eq(u, v)), Formula::Or(alts)])
}

fn dist_le_formula(a: &str, b: &str, d: u32, sig: &Signature, depth: usize) -> Result<Formula> {
    Ok(match d {
        0 => Formula::eq(a, b),
        1 => Formula::Or(vec![Formula::eq(a, b), adjacent_formula(a, b, sig, depth)]),
        _ => {
            let z = format!("#d{depth}");
            Formula::exists(
                &z,
                Formula::And(vec![
                    dist_le_formula(a, &z, d - 1, sig, depth + 1)?,
                    Formula::Or(vec![Formula::eq(&z, b), adjacent_formula(&z, b, sig, depth)]),
                ]),
            )
        }
    })
}

/// Recolor operations `(i, j)` with `i != j` named in a parse-tree signature.
pub fn recolor_pairs(sig: &Signature) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for rel in sig.relations() {
        if let Some(rest) = rel.name.strip_prefix("P_recolor:") {
            let mut it = rest.split(':').map(|s| s.parse::<u32>());
            if let (Some(Ok(i)), Some(Ok(j)), None) = (it.next(), it.next(), it.next()) {
                if i != j {
                    out.push((i, j));
                }
            }
        }
    }
    out
}

/// MSO definition of "leaf `x` has color `c` at ancestor-or-self node `z`".
///
/// The single set variable collects the recolor nodes on the path from `x` up
/// to `z` that actually change the color of `x`; the constraints force it to
/// be exactly that set.
pub fn color_at_formula(x: &str, z: &str, c: u32, sig: &Signature) -> Formula {
    use Formula as F;
    let recolors = recolor_pairs(sig);
    let anc = |a: &str, b: &str| F::rel("anc", &[a, b]);
    let mem = |e: &str| F::Mem("#X".into(), e.to_string());
    let strict_below = |lo: &str, hi: &str| F::And(vec![anc(hi, lo), F::not(F::eq(hi, lo))]);
    let recolor_atom = |i: u32, j: u32, v: &str| F::rel(&format!("P_recolor:{i}:{j}"), &[v]);
    let leaf_color = |i: u32| F::rel(&format!("P_leaf:{i}"), &[x]);
    let out_color = |i: u32, v: &str| {
        F::Or(
            recolors
                .iter()
                .filter(|(_, j)| *j == i)
                .map(|(a, j)| recolor_atom(*a, *j, v))
                .collect(),
        )
    };
    // color of x just below node `w`
    let before = |w: &str, i: u32| {
        let nearest = F::exists(
            "#p",
            F::And(vec![
                mem("#p"),
                strict_below("#p", w),
                F::not(F::exists(
                    "#u",
                    F::And(vec![mem("#u"), strict_below("#u", w), strict_below("#p", "#u")]),
                )),
                out_color(i, "#p"),
            ]),
        );
        let none_below = F::And(vec![
            F::not(F::exists("#p", F::And(vec![mem("#p"), strict_below("#p", w)]))),
            leaf_color(i),
        ]);
        F::Or(vec![nearest, none_below])
    };
    let on_path = |w: &str| F::And(vec![anc(z, w), anc(w, x), F::not(F::eq(w, x))]);
    let effective = F::And(
        recolors
            .iter()
            .map(|&(i, j)| F::implies(recolor_atom(i, j, "#w"), before("#w", i)))
            .collect(),
    );
    let ineffective = F::And(
        recolors
            .iter()
            .map(|&(i, j)| F::implies(recolor_atom(i, j, "#w"), F::not(before("#w", i))))
            .collect(),
    );
    let at_top = F::Or(vec![
        F::exists(
            "#p",
            F::And(vec![
                mem("#p"),
                F::not(F::exists("#u", F::And(vec![mem("#u"), strict_below("#p", "#u")]))),
                out_color(c, "#p"),
            ]),
        ),
        F::And(vec![F::not(F::exists("#p", mem("#p"))), leaf_color(c)]),
    ]);
    let guard = F::And(vec![
        on_path("#g"),
        F::Or(recolors.iter().map(|&(i, j)| recolor_atom(i, j, "#g")).collect()),
    ]);
    F::And(vec![
        anc(z, x),
        F::ExistsSetWithin {
            set: "#X".into(),
            var: "#g".into(),
            guard: Box::new(guard),
            body: Box::new(F::And(vec![
                F::forall("#w", F::implies(mem("#w"), effective)),
                F::forall(
                    "#w",
                    F::implies(F::And(vec![on_path("#w"), F::not(mem("#w"))]), ineffective),
                ),
                at_top,
            ])),
        },
    ])
}

/// Value bound to a variable during evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Elem(Elem),
    Set(BTreeSet<Elem>),
}

pub type Assignment = HashMap<String, Binding>;

/// Evaluates `formula` under `assignment` by brute force.
pub fn evaluate(s: &WeightedStructure, formula: &Formula, assignment: &Assignment) -> Result<bool> {
    let free = formula.free_vars();
    let free_sets = formula.free_set_vars();
    let p = Prepared::new(s, formula, &free, &free_sets)?;
    let mut elems = Vec::with_capacity(free.len());
    for v in &free {
        match assignment.get(v) {
            Some(Binding::Elem(e)) if e.idx() < s.len() => elems.push(*e),
            Some(Binding::Elem(e)) => return Err(Error::UnknownElement(e.to_string())),
            _ => return Err(Error::UnboundVariable(v.clone())),
        }
    }
    let mut sets = Vec::with_capacity(free_sets.len());
    for v in &free_sets {
        match assignment.get(v) {
            Some(Binding::Set(xs)) => sets.push(xs.clone()),
            _ => return Err(Error::UnboundVariable(v.clone())),
        }
    }
    p.eval_with_sets(&elems, &sets)
}

#[derive(Debug, Clone)]
enum P {
    Const(bool),
    Eq(usize, usize),
    Rel(usize, Vec<usize>),
    Mem(usize, usize),
    Not(Box<P>),
    And(Vec<P>),
    Or(Vec<P>),
    Quant {
        exists: bool,
        slot: usize,
        body: Box<P>,
    },
    SetQuant {
        exists: bool,
        slot: usize,
        guard: Option<(usize, Box<P>)>,
        body: Box<P>,
    },
    Dist {
        a: usize,
        b: usize,
        d: u32,
        le: bool,
    },
}

struct Env {
    vars: Vec<Elem>,
    sets: Vec<Vec<u64>>,
}

/// A formula compiled against one structure: variables resolved to slots,
/// relations to indices.
pub struct Prepared<'a> {
    s: &'a WeightedStructure,
    root: P,
    nfree: usize,
    nsets_free: usize,
    nslots: usize,
    nset_slots: usize,
    dist: OnceLock<Vec<u32>>,
}

struct Binder<'s> {
    sig: &'s Signature,
    vars: Vec<String>,
    sets: Vec<String>,
    nslots: usize,
    nset_slots: usize,
}

impl Binder<'_> {
    fn var(&self, x: &str) -> Result<usize> {
        self.vars
            .iter()
            .rposition(|v| v == x)
            .ok_or_else(|| Error::UnboundVariable(x.to_string()))
    }

    fn push_var(&mut self, x: &str) -> usize {
        self.vars.push(x.to_string());
        self.nslots = self.nslots.max(self.vars.len());
        self.vars.len() - 1
    }

    fn push_set(&mut self, x: &str) -> usize {
        self.sets.push(x.to_string());
        self.nset_slots = self.nset_slots.max(self.sets.len());
        self.sets.len() - 1
    }

    fn bind(&mut self, f: &Formula) -> Result<P> {
        use Formula as F;
        Ok(match f {
            F::True => P::Const(true),
            F::False => P::Const(false),
            F::Eq(a, b) => P::Eq(self.var(a)?, self.var(b)?),
            F::Rel(r, args) => {
                let ri = self
                    .sig
                    .lookup(r)
                    .ok_or_else(|| Error::UnknownRelation(r.clone()))?;
                if self.sig.arity(ri) != args.len() {
                    return Err(Error::Arity {
                        name: r.clone(),
                        expected: self.sig.arity(ri),
                        got: args.len(),
                    });
                }
                P::Rel(ri, args.iter().map(|a| self.var(a)).collect::<Result<_>>()?)
            }
            F::Mem(x, e) => {
                let set = self
                    .sets
                    .iter()
                    .rposition(|v| v == x)
                    .ok_or_else(|| Error::UnboundVariable(x.clone()))?;
                P::Mem(set, self.var(e)?)
            }
            F::Not(g) => P::Not(Box::new(self.bind(g)?)),
            F::And(gs) => P::And(gs.iter().map(|g| self.bind(g)).collect::<Result<_>>()?),
            F::Or(gs) => P::Or(gs.iter().map(|g| self.bind(g)).collect::<Result<_>>()?),
            F::Implies(a, b) => P::Or(vec![P::Not(Box::new(self.bind(a)?)), self.bind(b)?]),
            F::Iff(a, b) => {
                let (a, b) = (self.bind(a)?, self.bind(b)?);
                P::Or(vec![
                    P::And(vec![a.clone(), b.clone()]),
                    P::And(vec![P::Not(Box::new(a)), P::Not(Box::new(b))]),
                ])
            }
            F::Exists(x, g) | F::Forall(x, g) => {
                let slot = self.push_var(x);
                let body = self.bind(g);
                self.vars.pop();
                P::Quant {
                    exists: matches!(f, F::Exists(..)),
                    slot,
                    body: Box::new(body?),
                }
            }
            F::ExistsSet(x, g) | F::ForallSet(x, g) => {
                let slot = self.push_set(x);
                let body = self.bind(g);
                self.sets.pop();
                P::SetQuant {
                    exists: matches!(f, F::ExistsSet(..)),
                    slot,
                    guard: None,
                    body: Box::new(body?),
                }
            }
            F::ExistsSetWithin {
                set,
                var,
                guard,
                body,
            } => {
                let gslot = self.push_var(var);
                let g = self.bind(guard);
                self.vars.pop();
                let g = g?;
                let slot = self.push_set(set);
                let b = self.bind(body);
                self.sets.pop();
                P::SetQuant {
                    exists: true,
                    slot,
                    guard: Some((gslot, Box::new(g))),
                    body: Box::new(b?),
                }
            }
            F::DistLe(a, b, d) | F::DistGt(a, b, d) => P::Dist {
                a: self.var(a)?,
                b: self.var(b)?,
                d: *d,
                le: matches!(f, F::DistLe(..)),
            },
            F::ColorAt { leaf, node, color } => {
                let expanded = color_at_formula(leaf, node, *color, self.sig);
                self.bind(&expanded)?
            }
        })
    }
}

impl<'a> Prepared<'a> {
    /// `free` and `free_sets` fix the slot order of the arguments to `eval`.
    pub fn new(
        s: &'a WeightedStructure,
        f: &Formula,
        free: &[String],
        free_sets: &[String],
    ) -> Result<Self> {
        let mut b = Binder {
            sig: s.signature(),
            vars: free.to_vec(),
            sets: free_sets.to_vec(),
            nslots: free.len(),
            nset_slots: free_sets.len(),
        };
        let root = b.bind(f)?;
        Ok(Prepared {
            s,
            root,
            nfree: free.len(),
            nsets_free: free_sets.len(),
            nslots: b.nslots,
            nset_slots: b.nset_slots,
            dist: OnceLock::new(),
        })
    }

    pub fn eval(&self, args: &[Elem]) -> Result<bool> {
        self.eval_with_sets(args, &[])
    }

    pub fn eval_with_sets(&self, args: &[Elem], sets: &[BTreeSet<Elem>]) -> Result<bool> {
        if args.len() != self.nfree || sets.len() != self.nsets_free {
            return Err(Error::Arity {
                name: "assignment".into(),
                expected: self.nfree,
                got: args.len(),
            });
        }
        let words = self.s.len().div_ceil(64).max(1);
        let mut env = Env {
            vars: vec![Elem(0); self.nslots],
            sets: vec![vec![0u64; words]; self.nset_slots],
        };
        env.vars[..args.len()].copy_from_slice(args);
        for (i, xs) in sets.iter().enumerate() {
            for e in xs {
                env.sets[i][e.idx() / 64] |= 1 << (e.idx() % 64);
            }
        }
        self.go(&self.root, &mut env)
    }

    fn distance(&self, a: Elem, b: Elem) -> u32 {
        let n = self.s.len();
        let table = self.dist.get_or_init(|| {
            let g = self.s.gaifman();
            let mut t = vec![u32::MAX; n * n];
            for u in 0..n {
                for (v, d) in g.distances(&[Elem(u as u32)]).into_iter().enumerate() {
                    if let Some(d) = d {
                        t[u * n + v] = d;
                    }
                }
            }
            t
        });
        table[a.idx() * n + b.idx()]
    }

    fn go(&self, p: &P, env: &mut Env) -> Result<bool> {
        Ok(match p {
            P::Const(b) => *b,
            P::Eq(a, b) => env.vars[*a] == env.vars[*b],
            P::Rel(r, args) => {
                let mut buf = [Elem(0); 8];
                if args.len() <= 8 {
                    for (k, a) in args.iter().enumerate() {
                        buf[k] = env.vars[*a];
                    }
                    self.s.holds(*r, &buf[..args.len()])
                } else {
                    let t: Vec<Elem> = args.iter().map(|a| env.vars[*a]).collect();
                    self.s.holds(*r, &t)
                }
            }
            P::Mem(x, e) => {
                let i = env.vars[*e].idx();
                env.sets[*x][i / 64] >> (i % 64) & 1 == 1
            }
            P::Not(g) => !self.go(g, env)?,
            P::And(gs) => {
                for g in gs {
                    if !self.go(g, env)? {
                        return Ok(false);
                    }
                }
                true
            }
            P::Or(gs) => {
                for g in gs {
                    if self.go(g, env)? {
                        return Ok(true);
                    }
                }
                false
            }
            P::Quant { exists, slot, body } => {
                for e in 0..self.s.len() as u32 {
                    env.vars[*slot] = Elem(e);
                    if self.go(body, env)? == *exists {
                        return Ok(*exists);
                    }
                }
                !*exists
            }
            P::SetQuant {
                exists,
                slot,
                guard,
                body,
            } => {
                let domain: Vec<usize> = match guard {
                    None => (0..self.s.len()).collect(),
                    Some((g, gp)) => {
                        let mut d = Vec::new();
                        for e in 0..self.s.len() as u32 {
                            env.vars[*g] = Elem(e);
                            if self.go(gp, env)? {
                                d.push(e as usize);
                            }
                        }
                        d
                    }
                };
                if domain.len() > SET_CAP {
                    return Err(Error::SetCap {
                        size: domain.len(),
                        cap: SET_CAP,
                    });
                }
                let saved = env.sets[*slot].clone();
                let mut result = !*exists;
                for mask in 0u32..(1u32 << domain.len()) {
                    env.sets[*slot].iter_mut().for_each(|w| *w = 0);
                    for (k, &e) in domain.iter().enumerate() {
                        if mask >> k & 1 == 1 {
                            env.sets[*slot][e / 64] |= 1 << (e % 64);
                        }
                    }
                    if self.go(body, env)? == *exists {
                        result = *exists;
                        break;
                    }
                }
                env.sets[*slot] = saved;
                result
            }
            P::Dist { a, b, d, le } => {
                let dist = self.distance(env.vars[*a], env.vars[*b]);
                (dist <= *d) == *le
            }
        })
    }
}

/// A unary query `psi(params; output)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub formula: Formula,
    pub params: Vec<String>,
    pub output: String,
}

/// Default parameter names: `x` for one parameter, `x1..xr` otherwise.
pub fn default_params(r: usize) -> Vec<String> {
    if r == 1 {
        vec!["x".into()]
    } else {
        (1..=r).map(|i| format!("x{i}")).collect()
    }
}

impl Query {
    pub fn new(formula: Formula, params: &[&str], output: &str) -> Result<Self> {
        let q = Query {
            formula,
            params: params.iter().map(|s| s.to_string()).collect(),
            output: output.to_string(),
        };
        q.check()?;
        Ok(q)
    }

    fn check(&self) -> Result<()> {
        if !self.formula.free_set_vars().is_empty() {
            return Err(Error::Syntax("query has free set variables".into()));
        }
        for v in self.formula.free_vars() {
            if v != self.output && !self.params.contains(&v) {
                return Err(Error::UnboundVariable(v));
            }
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.params.len()
    }

    fn vars(&self) -> Vec<String> {
        let mut v = self.params.clone();
        v.push(self.output.clone());
        v
    }

    pub fn prepare<'a>(&self, s: &'a WeightedStructure) -> Result<PreparedQuery<'a>> {
        Ok(PreparedQuery::Plain(Prepared::new(s, &self.formula, &self.vars(), &[])?))
    }
}

/// Boolean combination over numbered slots (1-based: locals, then sentences).
#[derive(Debug, Clone, PartialEq)]
pub enum Combiner {
    Const(bool),
    Slot(usize),
    Not(Box<Combiner>),
    And(Vec<Combiner>),
    Or(Vec<Combiner>),
    Implies(Box<Combiner>, Box<Combiner>),
    Iff(Box<Combiner>, Box<Combiner>),
}

impl Combiner {
    pub fn parse(v: &Value) -> Result<Combiner> {
        if let Some(s) = v.as_str() {
            return match s {
                "true" => Ok(Combiner::Const(true)),
                "false" => Ok(Combiner::Const(false)),
                _ => Err(Error::Syntax(format!("bad combiner `{s}`"))),
            };
        }
        if let Some(b) = v.as_bool() {
            return Ok(Combiner::Const(b));
        }
        let items = v
            .as_array()
            .ok_or_else(|| Error::Syntax(format!("bad combiner {v}")))?;
        let (head, args) = items
            .split_first()
            .ok_or_else(|| Error::Syntax("empty combiner".into()))?;
        let sub = |i: usize| -> Result<Box<Combiner>> {
            args.get(i)
                .ok_or_else(|| Error::Syntax("missing combiner argument".into()))
                .and_then(Combiner::parse)
                .map(Box::new)
        };
        Ok(match as_str(head, "combiner operator")? {
            "true" => Combiner::Const(true),
            "false" => Combiner::Const(false),
            "slot" => Combiner::Slot(nat(args.first().unwrap_or(&Value::Null))? as usize),
            "not" => Combiner::Not(sub(0)?),
            "and" => Combiner::And(args.iter().map(Combiner::parse).collect::<Result<_>>()?),
            "or" => Combiner::Or(args.iter().map(Combiner::parse).collect::<Result<_>>()?),
            "implies" => Combiner::Implies(sub(0)?, sub(1)?),
            "iff" => Combiner::Iff(sub(0)?, sub(1)?),
            other => return Err(Error::Syntax(format!("bad combiner operator `{other}`"))),
        })
    }

    pub fn to_sexpr(&self) -> Value {
        match self {
            Combiner::Const(b) => json!(if *b { "true" } else { "false" }),
            Combiner::Slot(i) => json!(["slot", i]),
            Combiner::Not(c) => json!(["not", c.to_sexpr()]),
            Combiner::And(cs) => {
                let mut v = vec![json!("and")];
                v.extend(cs.iter().map(Combiner::to_sexpr));
                Value::Array(v)
            }
            Combiner::Or(cs) => {
                let mut v = vec![json!("or")];
                v.extend(cs.iter().map(Combiner::to_sexpr));
                Value::Array(v)
            }
            Combiner::Implies(a, b) => json!(["implies", a.to_sexpr(), b.to_sexpr()]),
            Combiner::Iff(a, b) => json!(["iff", a.to_sexpr(), b.to_sexpr()]),
        }
    }

    pub fn eval(&self, slots: &[bool]) -> bool {
        match self {
            Combiner::Const(b) => *b,
            Combiner::Slot(i) => slots[*i - 1],
            Combiner::Not(c) => !c.eval(slots),
            Combiner::And(cs) => cs.iter().all(|c| c.eval(slots)),
            Combiner::Or(cs) => cs.iter().any(|c| c.eval(slots)),
            Combiner::Implies(a, b) => !a.eval(slots) || b.eval(slots),
            Combiner::Iff(a, b) => a.eval(slots) == b.eval(slots),
        }
    }

    fn max_slot(&self) -> usize {
        match self {
            Combiner::Const(_) => 0,
            Combiner::Slot(i) => *i,
            Combiner::Not(c) => c.max_slot(),
            Combiner::And(cs) | Combiner::Or(cs) => cs.iter().map(Combiner::max_slot).max().unwrap_or(0),
            Combiner::Implies(a, b) | Combiner::Iff(a, b) => a.max_slot().max(b.max_slot()),
        }
    }

    fn has_zero_slot(&self) -> bool {
        match self {
            Combiner::Const(_) => false,
            Combiner::Slot(i) => *i == 0,
            Combiner::Not(c) => c.has_zero_slot(),
            Combiner::And(cs) | Combiner::Or(cs) => cs.iter().any(Combiner::has_zero_slot),
            Combiner::Implies(a, b) | Combiner::Iff(a, b) => a.has_zero_slot() || b.has_zero_slot(),
        }
    }

    /// Literal expansion with slot `i` replaced by `slots[i-1]`.
    pub fn expand(&self, slots: &[Formula]) -> Formula {
        match self {
            Combiner::Const(true) => Formula::True,
            Combiner::Const(false) => Formula::False,
            Combiner::Slot(i) => slots[*i - 1].clone(),
            Combiner::Not(c) => Formula::not(c.expand(slots)),
            Combiner::And(cs) => Formula::And(cs.iter().map(|c| c.expand(slots)).collect()),
            Combiner::Or(cs) => Formula::Or(cs.iter().map(|c| c.expand(slots)).collect()),
            Combiner::Implies(a, b) => Formula::implies(a.expand(slots), b.expand(slots)),
            Combiner::Iff(a, b) => Formula::Iff(Box::new(a.expand(slots)), Box::new(b.expand(slots))),
        }
    }
}

/// A unary query given as a Gaifman-normal-form package.
#[derive(Debug, Clone, PartialEq)]
pub struct GnfQuery {
    pub r: usize,
    pub rho: u32,
    pub params: Vec<String>,
    pub output: String,
    pub locals: Vec<Formula>,
    pub sentences: Vec<Formula>,
    pub combiner: Combiner,
}

impl GnfQuery {
    pub fn new(
        r: usize,
        rho: u32,
        locals: Vec<Formula>,
        sentences: Vec<Formula>,
        combiner: Combiner,
    ) -> Result<Self> {
        let g = GnfQuery {
            r,
            rho,
            params: default_params(r),
            output: "y".into(),
            locals,
            sentences,
            combiner,
        };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if self.params.len() != self.r {
            return Err(Error::Syntax("parameter list length differs from r".into()));
        }
        for f in &self.locals {
            if !f.free_set_vars().is_empty() {
                return Err(Error::Syntax("local formula has free set variables".into()));
            }
            for v in f.free_vars() {
                if v != self.output && !self.params.contains(&v) {
                    return Err(Error::UnboundVariable(v));
                }
            }
        }
        for f in &self.sentences {
            if let Some(v) = f.free_vars().into_iter().next() {
                return Err(Error::Syntax(format!("sentence has free variable `{v}`")));
            }
        }
        let slots = self.locals.len() + self.sentences.len();
        if self.combiner.has_zero_slot() || self.combiner.max_slot() > slots {
            return Err(Error::Syntax(format!(
                "combiner references a slot outside 1..={slots}"
            )));
        }
        Ok(())
    }

    /// Max quantifier rank over the locals, after macro expansion.
    pub fn local_rank(&self, sig: &Signature) -> Result<u32> {
        let mut q = 0;
        for f in &self.locals {
            q = q.max(f.expand_macros(sig)?.rank());
        }
        Ok(q)
    }

    /// The combined formula as a plain query.
    pub fn to_query(&self) -> Query {
        let mut slots = self.locals.clone();
        slots.extend(self.sentences.iter().cloned());
        Query {
            formula: self.combiner.expand(&slots),
            params: self.params.clone(),
            output: self.output.clone(),
        }
    }

    fn vars(&self) -> Vec<String> {
        let mut v = self.params.clone();
        v.push(self.output.clone());
        v
    }

    pub fn prepare<'a>(&self, s: &'a WeightedStructure) -> Result<PreparedQuery<'a>> {
        let vars = self.vars();
        let locals = self
            .locals
            .iter()
            .map(|f| Prepared::new(s, f, &vars, &[]))
            .collect::<Result<Vec<_>>>()?;
        let mut sentences = Vec::new();
        for f in &self.sentences {
            sentences.push(Prepared::new(s, f, &[], &[])?.eval(&[])?);
        }
        Ok(PreparedQuery::Gnf {
            locals,
            sentences,
            combiner: self.combiner.clone(),
        })
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        let file: QueryFile = serde_json::from_value(v.clone())?;
        match file.into_spec()? {
            QuerySpec::Gnf(g) => Ok(g),
            QuerySpec::Plain(_) => Err(Error::Syntax("expected a GNF query package".into())),
        }
    }
}

/// Slot values of a GNF query at one point.
pub fn gnf_slots(p: &PreparedQuery<'_>, point: &[Elem]) -> Result<Vec<bool>> {
    match p {
        PreparedQuery::Gnf {
            locals, sentences, ..
        } => {
            let mut v = Vec::with_capacity(locals.len() + sentences.len());
            for l in locals {
                v.push(l.eval(point)?);
            }
            v.extend(sentences.iter().copied());
            Ok(v)
        }
        PreparedQuery::Plain(_) => Err(Error::Syntax("not a GNF query".into())),
    }
}

/// Evaluates the combined GNF formula at `(params, candidate)`.
pub fn assemble_gnf(
    s: &WeightedStructure,
    gnf: &GnfQuery,
    params: &[Elem],
    candidate: Elem,
) -> Result<bool> {
    let p = gnf.prepare(s)?;
    let mut point = params.to_vec();
    point.push(candidate);
    p.holds(&point)
}

pub enum PreparedQuery<'a> {
    Plain(Prepared<'a>),
    Gnf {
        locals: Vec<Prepared<'a>>,
        sentences: Vec<bool>,
        combiner: Combiner,
    },
}

impl PreparedQuery<'_> {
    /// `point` = parameters followed by the candidate output element.
    pub fn holds(&self, point: &[Elem]) -> Result<bool> {
        match self {
            PreparedQuery::Plain(p) => p.eval(point),
            PreparedQuery::Gnf { combiner, .. } => Ok(combiner.eval(&gnf_slots(self, point)?)),
        }
    }

    fn structure_len(&self) -> usize {
        match self {
            PreparedQuery::Plain(p) => p.s.len(),
            PreparedQuery::Gnf { locals, .. } => locals.first().map(|p| p.s.len()).unwrap_or(0),
        }
    }

    /// `psi(params, G)` as a sorted list of elements.
    pub fn output(&self, s: &WeightedStructure, params: &[Elem]) -> Result<Vec<Elem>> {
        let mut point = params.to_vec();
        point.push(Elem(0));
        let last = params.len();
        let mut out = Vec::new();
        let n = if self.structure_len() == 0 { s.len() } else { self.structure_len() };
        for b in 0..n as u32 {
            point[last] = Elem(b);
            if self.holds(&point)? {
                out.push(Elem(b));
            }
        }
        Ok(out)
    }
}

/// Either kind of unary query.
#[derive(Debug, Clone, PartialEq)]
pub enum QuerySpec {
    Plain(Query),
    Gnf(GnfQuery),
}

impl QuerySpec {
    pub fn r(&self) -> usize {
        match self {
            QuerySpec::Plain(q) => q.r(),
            QuerySpec::Gnf(g) => g.r,
        }
    }

    pub fn prepare<'a>(&self, s: &'a WeightedStructure) -> Result<PreparedQuery<'a>> {
        match self {
            QuerySpec::Plain(q) => q.prepare(s),
            QuerySpec::Gnf(g) => g.prepare(s),
        }
    }

    /// The query as one formula (GNF packages are expanded through the combiner).
    pub fn as_query(&self) -> Query {
        match self {
            QuerySpec::Plain(q) => q.clone(),
            QuerySpec::Gnf(g) => g.to_query(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: QueryFile = serde_json::from_str(text)?;
        file.into_spec()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&QueryFile::from_spec(self)).expect("query serializes")
    }
}

/// JSON shape of a query file, plain or GNF.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryFile {
    pub r: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locals: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combiner: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl QueryFile {
    pub fn into_spec(self) -> Result<QuerySpec> {
        let params = self.params.unwrap_or_else(|| default_params(self.r));
        let output = self.output.unwrap_or_else(|| "y".into());
        if params.len() != self.r {
            return Err(Error::Syntax("parameter list length differs from r".into()));
        }
        if let Some(f) = self.formula {
            let q = Query {
                formula: Formula::parse(&f)?,
                params,
                output,
            };
            q.check()?;
            return Ok(QuerySpec::Plain(q));
        }
        let locals = self
            .locals
            .ok_or_else(|| Error::Syntax("query file needs `formula` or `locals`".into()))?
            .iter()
            .map(Formula::parse)
            .collect::<Result<Vec<_>>>()?;
        let sentences = self
            .sentences
            .unwrap_or_default()
            .iter()
            .map(Formula::parse)
            .collect::<Result<Vec<_>>>()?;
        let combiner = match self.combiner {
            Some(c) => Combiner::parse(&c)?,
            None => Combiner::And((1..=locals.len() + sentences.len()).map(Combiner::Slot).collect()),
        };
        let g = GnfQuery {
            r: self.r,
            rho: self.rho.unwrap_or(0),
            params,
            output,
            locals,
            sentences,
            combiner,
        };
        g.check()?;
        Ok(QuerySpec::Gnf(g))
    }

    pub fn from_spec(spec: &QuerySpec) -> Self {
        match spec {
            QuerySpec::Plain(q) => QueryFile {
                r: q.r(),
                formula: Some(q.formula.to_sexpr()),
                rho: None,
                locals: None,
                sentences: None,
                combiner: None,
                params: Some(q.params.clone()),
                output: Some(q.output.clone()),
            },
            QuerySpec::Gnf(g) => QueryFile {
                r: g.r,
                formula: None,
                rho: Some(g.rho),
                locals: Some(g.locals.iter().map(Formula::to_sexpr).collect()),
                sentences: Some(g.sentences.iter().map(Formula::to_sexpr).collect()),
                combiner: Some(g.combiner.to_sexpr()),
                params: Some(g.params.clone()),
                output: Some(g.output.clone()),
            },
        }
    }
}

/// Weighted output of a query at one parameter tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutput {
    pub members: Vec<(Elem, Option<u64>)>,
    pub total: u64,
}

/// `{(b, W(b)) : G |= psi(params, b)}` plus the total over weight-bearing members.
pub fn query_output(
    s: &WeightedStructure,
    query: &QuerySpec,
    params: &[Elem],
) -> Result<QueryOutput> {
    if params.len() != query.r() {
        return Err(Error::Arity {
            name: "params".into(),
            expected: query.r(),
            got: params.len(),
        });
    }
    let p = query.prepare(s)?;
    weighted_output(s, &p, params)
}

pub fn weighted_output(
    s: &WeightedStructure,
    p: &PreparedQuery<'_>,
    params: &[Elem],
) -> Result<QueryOutput> {
    let members: Vec<(Elem, Option<u64>)> = p
        .output(s, params)?
        .into_iter()
        .map(|b| (b, s.weight(b)))
        .collect();
    let total = members.iter().filter_map(|(_, w)| *w).sum();
    Ok(QueryOutput { members, total })
}

/// Iterates all tuples in `V^r` in lexicographic order.
pub fn for_each_tuple(n: usize, r: usize, mut f: impl FnMut(&[Elem]) -> Result<bool>) -> Result<()> {
    if r > 0 && n == 0 {
        return Ok(());
    }
    let mut t = vec![Elem(0); r];
    loop {
        if !f(&t)? {
            return Ok(());
        }
        let mut i = r;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            if (t[i].0 as usize) + 1 < n {
                t[i].0 += 1;
                for x in &mut t[i + 1..] {
                    *x = Elem(0);
                }
                break;
            }
        }
    }
}

/// Report of `validate_gnf`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct GnfReport {
    pub points_checked: usize,
    pub neighborhood_pairs_checked: usize,
    /// `(structure index, local index, point, point')` where the local disagrees
    /// on isomorphic neighbourhoods.
    pub locality_violations: Vec<(usize, usize, Vec<Elem>, Vec<Elem>)>,
    /// `(structure index, point)` where the package and the reference disagree.
    pub reference_mismatches: Vec<(usize, Vec<Elem>)>,
}

impl GnfReport {
    pub fn passed(&self) -> bool {
        self.locality_violations.is_empty() && self.reference_mismatches.is_empty()
    }
}

/// Cap on points per structure examined by `validate_gnf`.
pub const GNF_POINT_CAP: usize = 400;

/// Empirical audit of a GNF package: locality of each local formula on
/// isomorphic neighbourhoods, and agreement with an optional reference.
pub fn validate_gnf(
    samples: &[WeightedStructure],
    gnf: &GnfQuery,
    reference: Option<&Formula>,
) -> Result<GnfReport> {
    let mut report = GnfReport::default();
    let vars = gnf.vars();
    for (si, s) in samples.iter().enumerate() {
        let prepared = gnf.prepare(s)?;
        let reference = match reference {
            Some(f) => Some(Prepared::new(s, f, &vars, &[])?),
            None => None,
        };
        let mut points = Vec::new();
        for_each_tuple(s.len(), gnf.r + 1, |t| {
            points.push(t.to_vec());
            Ok(points.len() < GNF_POINT_CAP)
        })?;
        let g = s.gaifman();
        let mut hoods = Vec::with_capacity(points.len());
        let mut values = Vec::with_capacity(points.len());
        for p in &points {
            let slots = gnf_slots(&prepared, p)?;
            let combined = gnf.combiner.eval(&slots);
            if let Some(rf) = &reference {
                if rf.eval(p)? != combined {
                    report.reference_mismatches.push((si, p.clone()));
                }
            }
            values.push(slots[..gnf.locals.len()].to_vec());
            let ball = g.sphere(p, gnf.rho);
            let sub = s.induced(&ball)?;
            let local: Vec<Elem> = p.iter().map(|e| sub.local_of(*e).unwrap()).collect();
            hoods.push((sub, local));
            report.points_checked += 1;
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                if values[i] == values[j] {
                    continue;
                }
                let (a, la) = &hoods[i];
                let (b, lb) = &hoods[j];
                if a.structure.len() != b.structure.len()
                    || a.structure.tuple_count() != b.structure.tuple_count()
                {
                    continue;
                }
                report.neighborhood_pairs_checked += 1;
                if crate::structures::find_isomorphism(&a.structure, la, &b.structure, lb).is_some() {
                    for (k, (vi, vj)) in values[i].iter().zip(&values[j]).enumerate() {
                        if vi != vj {
                            report.locality_violations.push((
                                si,
                                k,
                                points[i].clone(),
                                points[j].clone(),
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{RelSym, StructureBuilder};

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

    fn assign(pairs: &[(&str, u32)]) -> Assignment {
        pairs
            .iter()
            .map(|(v, e)| (v.to_string(), Binding::Elem(Elem(*e))))
            .collect()
    }

    fn f(text: &str) -> Formula {
        Formula::from_json(text).unwrap()
    }

    #[test]
    fn evaluate_basics() {
        let s = graph(3, &[(0, 1), (1, 2)]);
        assert!(evaluate(&s, &f(r#"["=","x","x"]"#), &assign(&[("x", 2)])).unwrap());
        assert!(!evaluate(&s, &f(r#"["E","x","y"]"#), &assign(&[("x", 0), ("y", 2)])).unwrap());
        let sep = f(r#"["exists-set","X",["and",["X","x"],["not",["X","y"]]]]"#);
        assert!(evaluate(&s, &sep, &assign(&[("x", 0), ("y", 1)])).unwrap());
        assert!(!evaluate(&s, &sep, &assign(&[("x", 0), ("y", 0)])).unwrap());
    }

    #[test]
    fn evaluate_errors() {
        let s = graph(3, &[(0, 1)]);
        assert!(matches!(
            evaluate(&s, &f(r#"["E","x","y"]"#), &assign(&[("x", 0)])),
            Err(Error::UnboundVariable(_))
        ));
        assert!(matches!(
            evaluate(&s, &f(r#"["E","x"]"#), &assign(&[("x", 0)])),
            Err(Error::Arity { .. })
        ));
        let big = graph(21, &[]);
        assert!(matches!(
            evaluate(&big, &f(r#"["exists-set","X",["X","x"]]"#), &assign(&[("x", 0)])),
            Err(Error::SetCap { .. })
        ));
    }

    #[test]
    fn rank_and_free_vars() {
        let g = f(r#"["exists","y",["and",["E","x","y"],["forall","z",["=","y","z"]]]]"#);
        assert_eq!(g.rank(), 2);
        assert_eq!(g.free_vars(), vec!["x".to_string()]);
        let s = f(r#"["exists-set","X",["X","x"]]"#);
        assert!(s.free_set_vars().is_empty());
        assert_eq!(s.rank(), 1);
        let round = Formula::parse(&g.to_sexpr()).unwrap();
        assert_eq!(round, g);
    }

    #[test]
    fn distance_macro_matches_expansion() {
        let s = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        for d in 0..4 {
            let m = Formula::DistLe("x".into(), "y".into(), d);
            let e = m.expand_macros(s.signature()).unwrap();
            assert_eq!(e.rank(), m.rank(), "d={d}");
            for x in 0..6 {
                for y in 0..6 {
                    let a = assign(&[("x", x), ("y", y)]);
                    assert_eq!(
                        evaluate(&s, &m, &a).unwrap(),
                        evaluate(&s, &e, &a).unwrap(),
                        "d={d} x={x} y={y}"
                    );
                }
            }
        }
    }

    #[test]
    fn distance_macro_ternary() {
        let sig = Signature::new(vec![RelSym {
            name: "T".into(),
            arity: 3,
        }])
        .unwrap();
        let mut b = StructureBuilder::new(sig);
        for n in ["a", "b", "c", "d", "e"] {
            b.element(n);
        }
        b.tuple("T", &["a", "b", "c"]).unwrap();
        b.tuple("T", &["c", "d", "d"]).unwrap();
        let s = b.build();
        let m = Formula::DistLe("x".into(), "y".into(), 2);
        let e = m.expand_macros(s.signature()).unwrap();
        for x in 0..5 {
            for y in 0..5 {
                let a = assign(&[("x", x), ("y", y)]);
                assert_eq!(evaluate(&s, &m, &a).unwrap(), evaluate(&s, &e, &a).unwrap());
            }
        }
    }

    fn employee() -> WeightedStructure {
        let text = r#"{"signature":[{"name":"Emp","arity":3}],
          "universe":["John","Arjun","Pooja","Neha","Padma","Chennai","Coimbatore","Vellore","s10000","s20000","s15000","s30000"],
          "relations":{"Emp":[["John","Chennai","s10000"],["Arjun","Coimbatore","s20000"],
             ["Pooja","Chennai","s15000"],["Neha","Vellore","s30000"],["Padma","Coimbatore","s20000"]]},
          "weights":{"John":10000,"Arjun":20000,"Pooja":15000,"Neha":30000,"Padma":20000}}"#;
        WeightedStructure::from_json(text).unwrap()
    }

    #[test]
    fn employee_query_output() {
        let s = employee();
        let q = QuerySpec::from_json(
            r#"{"r":1,"formula":["exists","s",["Emp","y","x","s"]]}"#,
        )
        .unwrap();
        let chennai = s.elem("Chennai").unwrap();
        let out = query_output(&s, &q, &[chennai]).unwrap();
        assert_eq!(
            out.members,
            vec![
                (s.elem("John").unwrap(), Some(10000)),
                (s.elem("Pooja").unwrap(), Some(15000))
            ]
        );
        assert_eq!(out.total, 25000);
        let empty = query_output(&s, &q, &[s.elem("John").unwrap()]).unwrap();
        assert_eq!(empty.total, 0);
        assert!(matches!(
            query_output(&s, &q, &[]),
            Err(Error::Arity { .. })
        ));
    }

    fn gnf(text: &str) -> GnfQuery {
        match QuerySpec::from_json(text).unwrap() {
            QuerySpec::Gnf(g) => g,
            _ => panic!("expected gnf"),
        }
    }

    #[test]
    fn assemble_matches_direct_evaluation() {
        let s = graph(4, &[(0, 1), (1, 2), (1, 3)]);
        let proj = gnf(r#"{"r":1,"rho":1,"locals":[["E","x","y"]],"combiner":["slot",1]}"#);
        let konst = gnf(r#"{"r":1,"rho":1,"locals":[["E","x","y"]],"combiner":"true"}"#);
        let conj = gnf(
            r#"{"r":1,"rho":1,"locals":[["E","x","y"]],
            "sentences":[["exists","u",["exists","v",["and",["E","u","v"],["not",["=","u","v"]]]]]],
            "combiner":["and",["slot",1],["slot",2]]}"#,
        );
        let direct = f(r#"["and",["E","x","y"],["exists","u",["exists","v",["and",["E","u","v"],["not",["=","u","v"]]]]]]"#);
        for x in 0..4 {
            for y in 0..4 {
                let (ex, ey) = (Elem(x), Elem(y));
                let a = assign(&[("x", x), ("y", y)]);
                let e = evaluate(&s, &f(r#"["E","x","y"]"#), &a).unwrap();
                assert_eq!(assemble_gnf(&s, &proj, &[ex], ey).unwrap(), e);
                assert!(assemble_gnf(&s, &konst, &[ex], ey).unwrap());
                assert_eq!(
                    assemble_gnf(&s, &conj, &[ex], ey).unwrap(),
                    evaluate(&s, &direct, &a).unwrap()
                );
            }
        }
    }

    #[test]
    fn gnf_well_formedness() {
        assert!(QuerySpec::from_json(r#"{"r":1,"locals":[["E","x","y"]],"combiner":["slot",2]}"#).is_err());
        assert!(QuerySpec::from_json(r#"{"r":1,"locals":[["E","x","w"]]}"#).is_err());
        assert!(QuerySpec::from_json(r#"{"r":1,"locals":[],"sentences":[["E","x","x"]]}"#).is_err());
    }

    #[test]
    fn validate_gnf_audits() {
        let samples = vec![graph(3, &[(0, 1), (1, 2)]), graph(4, &[(0, 1), (1, 2), (2, 3)])];
        let atoms = gnf(r#"{"r":1,"rho":0,"locals":[["E","x","y"],["=","x","y"]],"combiner":["or",["slot",1],["slot",2]]}"#);
        let rep = validate_gnf(&samples, &atoms, Some(&atoms.to_query().formula)).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.points_checked > 0);

        let nonlocal = gnf(r#"{"r":1,"rho":0,"locals":[["exists","z",["dist>","y","z",1]]],"combiner":["slot",1]}"#);
        let rep = validate_gnf(&samples[..1], &nonlocal, None).unwrap();
        assert!(!rep.locality_violations.is_empty());
    }

    #[test]
    fn permuted_ids_preserve_truth() {
        let s = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let t = graph(4, &[(3, 2), (2, 0), (0, 1)]);
        // map 0->3, 1->2, 2->0, 3->1
        let pi = [3u32, 2, 0, 1];
        let g = f(r#"["exists","z",["and",["E","x","z"],["E","z","y"],["not",["=","x","y"]]]]"#);
        for x in 0..4u32 {
            for y in 0..4u32 {
                assert_eq!(
                    evaluate(&s, &g, &assign(&[("x", x), ("y", y)])).unwrap(),
                    evaluate(&t, &g, &assign(&[("x", pi[x as usize]), ("y", pi[y as usize])])).unwrap()
                );
            }
        }
    }
}
