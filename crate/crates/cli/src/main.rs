//! `wm`: plan, embed and detect weight watermarks from the command line.
//!
//! Exit codes: 0 pass, 1 property violation, 2 input error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use relmark::automata::{compile, compile_query, Automaton, CompileLimits};
use relmark::decomp::{parse_tree_from_td, td_summary, transduce_query, tree_decomposition, ParseTree, WidthMode};
use relmark::harness::{self, acceptance, Generator, Scheme};
use relmark::logic::QuerySpec;
use relmark::scheme_fo::{build_plan_fo, FoOptions};
use relmark::scheme_mso::{
    capacity, detect, embed, format_mark, parse_mark, plan_mso, record_answers, AnswerFile, AnswerOracle, MsoOptions,
    Plan, PlanStrategy, QueryOracle, StructureOracle, SWEEP_CAP,
};
use relmark::structures::{type_partition, WeightedStructure};

#[derive(Parser)]
#[command(name = "wm", version, about = "Query-preserving watermarks for weighted relational structures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mso,
    Fo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    Lemma,
    Direct,
}

impl From<Pairing> for PlanStrategy {
    fn from(p: Pairing) -> Self {
        match p {
            Pairing::Lemma => PlanStrategy::Lemma,
            Pairing::Direct => PlanStrategy::Direct,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the Gaifman graph of a structure.
    Gaifman {
        #[arg(short, long)]
        structure: PathBuf,
    },
    /// Partition the elements (or the active elements of a query) by rank-q type.
    Types {
        #[arg(short, long)]
        structure: PathBuf,
        #[arg(short = 'q', long)]
        rank: u32,
        /// Restrict to the active elements of this query.
        #[arg(long)]
        query: Option<PathBuf>,
    },
    /// Tree decomposition and clique-width parse tree of a structure.
    Decompose {
        #[arg(short, long)]
        structure: PathBuf,
        /// Exact treewidth (at most 20 elements).
        #[arg(long)]
        exact: bool,
        /// Write the parse tree here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compile a query to a tree automaton.
    Compile {
        #[arg(short, long)]
        query: PathBuf,
        /// Compile over tree labels (comma separated) instead of a structure's parse tree.
        #[arg(long, value_delimiter = ',')]
        alphabet: Option<Vec<String>>,
        /// Transduce the query onto this structure's parse tree first.
        #[arg(short, long)]
        structure: Option<PathBuf>,
        #[arg(long, default_value_t = CompileLimits::default().max_states)]
        max_states: usize,
        #[arg(long, default_value_t = CompileLimits::default().max_table)]
        max_table: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compute a pair plan.
    Plan {
        #[arg(long, value_enum, default_value = "mso")]
        mode: Mode,
        /// Pair selection for the bounded-width scheme.
        #[arg(long, value_enum, default_value = "lemma")]
        pairing: Pairing,
        #[arg(short, long)]
        structure: PathBuf,
        #[arg(short, long)]
        query: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Embed a bit string and write the marked structure.
    Embed {
        #[arg(short, long)]
        plan: PathBuf,
        #[arg(short, long)]
        structure: PathBuf,
        #[arg(short, long)]
        mark: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also record the detector's query answers on the marked data.
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Recover a mark through query answers.
    Detect {
        #[arg(short, long)]
        plan: PathBuf,
        #[arg(short, long)]
        structure: PathBuf,
        /// Marked structure or recorded answers file.
        #[arg(long)]
        oracle: PathBuf,
        /// Number of bits to read (default: plan capacity).
        #[arg(long)]
        len: Option<usize>,
        /// Expected mark; a mismatch exits with 1.
        #[arg(long)]
        expect: Option<String>,
    },
    /// Measure distortion between an original and a marked structure.
    Verify {
        #[arg(short, long)]
        structure: PathBuf,
        #[arg(long)]
        marked: PathBuf,
        #[arg(short, long)]
        query: PathBuf,
        /// Refuse to fall back to a sampled sweep.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = SWEEP_CAP)]
        cap: u128,
    },
    /// Capacity against size for a generator family.
    Bench {
        #[arg(long, default_value = "path")]
        generator: String,
        #[arg(long, value_enum, default_value = "mso")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "direct")]
        pairing: Pairing,
        #[arg(short, long)]
        query: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a generated structure.
    Generate {
        kind: String,
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Selftest,
}

/// Failure with an exit code.
struct Exit(u8, anyhow::Error);

fn input<T>(r: anyhow::Result<T>) -> Result<T, Exit> {
    r.map_err(|e| Exit(2, e))
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_structure(path: &Path) -> anyhow::Result<WeightedStructure> {
    WeightedStructure::from_json(&read(path)?).with_context(|| format!("parsing structure {}", path.display()))
}

fn load_query(path: &Path) -> anyhow::Result<QuerySpec> {
    QuerySpec::from_json(&read(path)?).with_context(|| format!("parsing query {}", path.display()))
}

fn load_plan(path: &Path, s: &WeightedStructure) -> anyhow::Result<Plan> {
    Plan::from_json(&read(path)?, s).with_context(|| format!("parsing plan {}", path.display()))
}

fn emit(text: &str, output: Option<&Path>) -> anyhow::Result<()> {
    match output {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes")
}

fn plan(s: &WeightedStructure, q: &QuerySpec, mode: Mode, pairing: Pairing) -> anyhow::Result<Plan> {
    Ok(match mode {
        Mode::Mso => plan_mso(
            s,
            q,
            &MsoOptions {
                strategy: pairing.into(),
                ..MsoOptions::default()
            },
        )?,
        Mode::Fo => match q {
            QuerySpec::Gnf(g) => build_plan_fo(s, g, &FoOptions::default())?,
            QuerySpec::Plain(_) => bail!("--mode fo needs a query with \"locals\" (Gaifman normal form)"),
        },
    })
}

fn run(cli: Cli) -> Result<(), Exit> {
    match cli.command {
        Command::Gaifman { structure } => {
            let s = input(load_structure(&structure))?;
            let g = s.gaifman();
            let edges: Vec<(&str, &str)> = g.edges().into_iter().map(|(a, b)| (s.name(a), s.name(b))).collect();
            let components: Vec<Vec<&str>> = g
                .components()
                .iter()
                .map(|c| c.iter().map(|&e| s.name(e)).collect())
                .collect();
            println!("{}", pretty(&json!({"vertices": g.len(), "edges": edges, "components": components})));
        }
        Command::Types { structure, rank, query } => {
            let s = input(load_structure(&structure))?;
            let set: BTreeSet<_> = match query {
                Some(q) => {
                    let q = input(load_query(&q))?;
                    input(relmark::structures::active_elements(&s, &q).map_err(Into::into))?.0
                }
                None => s.elements().collect(),
            };
            let p = input(type_partition(&s, rank, &set).map_err(Into::into))?;
            let classes: Vec<Vec<&str>> = p.classes.iter().map(|c| c.iter().map(|&e| s.name(e)).collect()).collect();
            println!("{}", pretty(&json!({"q": rank, "classes": classes})));
        }
        Command::Decompose { structure, exact, output } => {
            let s = input(load_structure(&structure))?;
            let mode = if exact { WidthMode::Exact } else { WidthMode::Heuristic };
            let g = s.gaifman();
            let td = input(tree_decomposition(&g, mode).map_err(Into::into))?;
            td.validate(&g).map_err(|e| Exit(1, e.into()))?;
            let pt = input(parse_tree_from_td(&s, &td).map_err(Into::into))?;
            let bags: Vec<Vec<&str>> = td.bags.iter().map(|b| b.iter().map(|&e| s.name(e)).collect()).collect();
            println!(
                "{}",
                pretty(&json!({
                    "mode": mode,
                    "width": td.width(),
                    "summary": td_summary(&td),
                    "bags": bags,
                    "edges": td.edges,
                    "colors": pt.colors,
                    "parse_tree_nodes": pt.tree.len(),
                }))
            );
            if let Some(out) = output {
                input(emit(&pt.to_json(), Some(&out)))?;
            }
        }
        Command::Compile {
            query,
            alphabet,
            structure,
            max_states,
            max_table,
            output,
        } => {
            let limits = CompileLimits { max_states, max_table };
            let q = input(load_query(&query))?.as_query();
            let (a, info) = match (alphabet, structure) {
                (Some(alpha), None) => {
                    let mut free = q.params.clone();
                    free.push(q.output.clone());
                    let a = input(compile(&q.formula, &alpha, &free, limits).map_err(Into::into))?;
                    (a, json!({}))
                }
                (None, Some(sp)) => {
                    let s = input(load_structure(&sp))?;
                    let td = input(tree_decomposition(&s.gaifman(), WidthMode::Heuristic).map_err(Into::into))?;
                    let pt = input(parse_tree_from_td(&s, &td).map_err(Into::into))?;
                    let (tq, t) = input(transduce_query(&q, pt.colors, s.signature()).map_err(Into::into))?;
                    let alpha = ParseTree::full_alphabet(s.signature(), pt.colors);
                    let a = input(compile_query(&tq, &alpha, limits).map_err(Into::into))?;
                    (
                        a,
                        json!({"colors": pt.colors, "size": [t.size_before, t.size_after], "rank": [t.rank_before, t.rank_after]}),
                    )
                }
                _ => return Err(Exit(2, anyhow::anyhow!("give exactly one of --alphabet or --structure"))),
            };
            eprintln!("states {} pebbles {} transduction {}", a.nstates(), a.pebbles(), info);
            input(emit(&a.to_json(), output.as_deref()))?;
        }
        Command::Plan {
            mode,
            pairing,
            structure,
            query,
            output,
        } => {
            let s = input(load_structure(&structure))?;
            let q = input(load_query(&query))?;
            let p = input(plan(&s, &q, mode, pairing))?;
            let c = capacity(&p);
            eprintln!(
                "pairs {} candidates {} floor {} active {}{}",
                p.pairs.len(),
                c.candidates,
                c.floor,
                c.active,
                c.diagnostics.iter().map(|d| format!("\n  {d}")).collect::<String>()
            );
            input(emit(&p.to_json(&s), output.as_deref()))?;
        }
        Command::Embed {
            plan,
            structure,
            mark,
            output,
            answers,
        } => {
            let s = input(load_structure(&structure))?;
            let p = input(load_plan(&plan, &s))?;
            let bits = input(parse_mark(&mark).map_err(Into::into))?;
            let m = input(embed(&s, &p, &bits).map_err(Into::into))?;
            let marked = s.with_weights(m.weights());
            if let Some(a) = answers {
                let file = input(record_answers(&p, &marked).map_err(Into::into))?;
                input(emit(&serde_json::to_string_pretty(&file).expect("answers serialize"), Some(&a)))?;
            }
            input(emit(&marked.to_json(), output.as_deref()))?;
        }
        Command::Detect {
            plan,
            structure,
            oracle,
            len,
            expect,
        } => {
            let s = input(load_structure(&structure))?;
            let p = input(load_plan(&plan, &s))?;
            let text = input(read(&oracle))?;
            let value: serde_json::Value = input(serde_json::from_str(&text).context("parsing oracle file"))?;
            let marked;
            let boxed: Box<dyn QueryOracle + '_> = if value.get("answers").is_some() {
                let file: AnswerFile = input(serde_json::from_value(value).context("parsing answers"))?;
                Box::new(input(AnswerOracle::new(&file, &s).map_err(Into::into))?)
            } else {
                marked = input(WeightedStructure::from_json(&text).context("parsing marked structure"))?;
                Box::new(input(StructureOracle::new(&marked, &p.query).map_err(Into::into))?)
            };
            let bits = detect(&s, &p, boxed.as_ref(), len).map_err(|e| match e {
                relmark::Error::Corrupted { .. } | relmark::Error::WitnessInconsistent(_) => Exit(1, e.into()),
                _ => Exit(2, e.into()),
            })?;
            let got = format_mark(&bits);
            println!("{got}");
            if let Some(want) = expect {
                if want != got {
                    return Err(Exit(1, anyhow::anyhow!("recovered {got}, expected {want}")));
                }
            }
        }
        Command::Verify {
            structure,
            marked,
            query,
            exhaustive,
            cap,
        } => {
            let s = input(load_structure(&structure))?;
            let m = input(load_structure(&marked))?;
            if !s.same_by_ids(&m) {
                return Err(Exit(2, anyhow::anyhow!("marked structure differs from the original beyond weights")));
            }
            let q = input(load_query(&query))?;
            let w2: Vec<Option<u64>> = s.elements().map(|e| m.elem(s.name(e)).map(|x| m.weights()[x.idx()])).collect::<Result<_, _>>().map_err(|e| Exit(2, e.into()))?;
            let rep = harness::verify_distortion(&s, s.weights(), &w2, &q, cap).map_err(|e| match e {
                relmark::Error::SweepCap { .. } if !exhaustive => Exit(2, anyhow::anyhow!("{e}; rerun with a larger --cap")),
                _ => Exit(2, e.into()),
            })?;
            let mut v = serde_json::to_value(&rep).expect("report serializes");
            v["argmax"] = json!(rep.argmax.as_ref().map(|a| a.iter().map(|&e| s.name(e)).collect::<Vec<_>>()));
            println!("{}", pretty(&v));
            if exhaustive && !rep.exhaustive {
                return Err(Exit(1, anyhow::anyhow!("sweep was sampled, not exhaustive")));
            }
            if !rep.passed() {
                return Err(Exit(1, anyhow::anyhow!("distortion ({}, {}) exceeds (1, {})", rep.c_local, rep.d_global, rep.r)));
            }
        }
        Command::Bench {
            generator,
            mode,
            pairing,
            query,
            sizes,
            seed,
        } => {
            let kind: Generator = input(generator.parse().map_err(anyhow::Error::from))?;
            let (q, scheme) = match mode {
                Mode::Mso => (
                    match query {
                        Some(p) => input(load_query(&p))?,
                        None => harness::catalog::has_neighbour(),
                    },
                    Scheme::Mso(pairing.into()),
                ),
                Mode::Fo => (
                    match query {
                        Some(p) => input(load_query(&p))?,
                        None => QuerySpec::Gnf(harness::catalog::gnf_queries().remove(0)),
                    },
                    Scheme::Fo,
                ),
            };
            let rep = input(harness::scalability_bench(kind, &sizes, &q, scheme, seed).map_err(Into::into))?;
            println!("{}", pretty(&serde_json::to_value(&rep).expect("report serializes")));
        }
        Command::Generate { kind, n, seed, output } => {
            let kind: Generator = input(kind.parse().map_err(anyhow::Error::from))?;
            let s = input(harness::generate(kind, n, seed).map_err(Into::into))?;
            input(emit(&s.to_json(), output.as_deref()))?;
        }
        Command::Selftest => {
            let results = acceptance::run_all();
            for c in &results {
                println!("{}", c.line());
            }
            if results.iter().any(|c| c.gating && !c.passed) {
                return Err(Exit(1, anyhow::anyhow!("acceptance suite failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("wm: {e:#}");
            ExitCode::from(code)
        }
    }
}
