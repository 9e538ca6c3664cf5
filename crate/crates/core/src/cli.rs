//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::aberration::{
    compute_bki_matrix, format_vector, regular_table, report, ReportLine, WordlengthTable,
};
use crate::error::{Error, Result};
use crate::gf2::letters;
use crate::io::{
    read_class_table, read_design, render_report, report_json, write_design, write_trace,
    DesignTable,
};
use crate::key::{template_with_labels, to_pm1, FactorSplit, GeneratorSet, PoolSet};
use crate::sib::nonregular::full_factorial;
use crate::sib::{
    Constraints, Layout, NonregularProblem, Predicate, QVector, RegularProblem, SearchResult,
    SibParams, SourceCounts, TraceRecord, ORACLE_CAP,
};
use crate::structure::{BlockStructure, Direction};

#[derive(Parser, Debug)]
#[command(
    name = "msdesign",
    version,
    about = "Minimum aberration multi-stratum two-level designs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Swarm search for a minimum aberration design.
    Search(Config),
    /// Word-count report of an existing design.
    Evaluate(EvaluateArgs),
    /// Exhaustive search of a small design space.
    Oracle(Config),
}

/// Search configuration. Every field may also come from a `--config` file
/// (JSON, or `key = value` lines); flags win over file values.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Config {
    /// Configuration file.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Block structure expression, e.g. `8/4` or `2/(4x4)`.
    #[arg(long)]
    pub structure: Option<String>,
    /// Class table file (header of factor names, one row of labels per unit).
    #[arg(long)]
    pub class_table: Option<PathBuf>,
    /// Number of treatment factors.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of treatment-defining generators (regular mode).
    #[arg(long)]
    pub l0: Option<usize>,
    /// Row/column factor split for crossed structures, e.g. `rows=A..F,cols=G..J`.
    #[arg(long)]
    pub split: Option<String>,
    /// Treatment factor names, comma separated.
    #[arg(long)]
    pub names: Option<String>,
    /// `regular` or `nonregular`.
    #[arg(long)]
    pub mode: Option<String>,
    /// `forward`, `backward`, or subsets such as `U;U,R;U,C`.
    #[arg(long)]
    pub criterion: Option<String>,
    /// Swarm size.
    #[arg(long = "S")]
    #[serde(rename = "S")]
    pub swarm_size: Option<usize>,
    /// Iterations.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub iterations: Option<usize>,
    /// Global-best substitutions: one total, or one count per stratum.
    #[arg(long)]
    #[serde(deserialize_with = "loose_string")]
    pub q_gb: Option<String>,
    #[arg(long)]
    #[serde(deserialize_with = "loose_string")]
    pub q_lb: Option<String>,
    #[arg(long)]
    #[serde(deserialize_with = "loose_string")]
    pub q_new: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many iterations without improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Use the reduced generator pools.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub reduce_pools: Option<bool>,
    /// Forbid repeated generators within a stratum (regular) or repeated runs
    /// (nonregular).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub distinct: Option<bool>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Write the per-iteration global best to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Candidate runs for nonregular mode (default: the full factorial).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Excluded candidate pattern, e.g. `-1,-1,*` (repeatable).
    #[arg(long)]
    pub forbid: Vec<String>,
    /// Column that must be constant within a unit factor, e.g. `C:R`.
    #[arg(long)]
    pub constant: Vec<String>,
    /// Crossed layout: search the `rows` or the `cols` of an `a x b` structure.
    #[arg(long)]
    pub crossed: Option<String>,
    /// Fixed runs for the other side of a crossed layout.
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Largest space the oracle will enumerate.
    #[arg(long)]
    pub cap: Option<u128>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Design table (±1 or 0/1).
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub structure: Option<String>,
    #[arg(long)]
    pub class_table: Option<PathBuf>,
    /// Report only these lines, e.g. `1,3,4`.
    #[arg(long)]
    pub g: Option<String>,
    /// Print the JSON report instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Accepts a string, a number, or a list of numbers (joined with commas).
fn loose_string<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<String>, D::Error> {
    use serde_json::Value;
    let v = Option::<Value>::deserialize(d)?;
    let one = |v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "expected a count, got {other}"
        ))),
    };
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(a)) => Ok(Some(
            a.iter()
                .map(one)
                .collect::<std::result::Result<Vec<_>, _>>()?
                .join(","),
        )),
        Some(v) => one(&v).map(Some),
    }
}

fn parse_kv(text: &str) -> Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::Invalid(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        let value =
            serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        if k == "forbid" || k == "constant" {
            let arr = map
                .entry(k)
                .or_insert_with(|| serde_json::Value::Array(Vec::new()));
            if let serde_json::Value::Array(a) = arr {
                match value {
                    serde_json::Value::Array(vs) => a.extend(vs),
                    v => a.push(serde_json::Value::String(
                        v.to_string().trim_matches('"').to_string(),
                    )),
                }
            }
        } else {
            map.insert(k, value);
        }
    }
    Ok(serde_json::Value::Object(map))
}

fn load_file(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)?;
    let value = match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v) => v,
        Err(_) => parse_kv(&text)?,
    };
    serde_json::from_value(value).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

impl Config {
    /// Fills unset fields from the configuration file.
    pub fn merged(self) -> Result<Config> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let f = load_file(&path)?;
        Ok(Config {
            config: self.config,
            structure: self.structure.or(f.structure),
            class_table: self.class_table.or(f.class_table),
            n: self.n.or(f.n),
            l0: self.l0.or(f.l0),
            split: self.split.or(f.split),
            names: self.names.or(f.names),
            mode: self.mode.or(f.mode),
            criterion: self.criterion.or(f.criterion),
            swarm_size: self.swarm_size.or(f.swarm_size),
            iterations: self.iterations.or(f.iterations),
            q_gb: self.q_gb.or(f.q_gb),
            q_lb: self.q_lb.or(f.q_lb),
            q_new: self.q_new.or(f.q_new),
            seed: self.seed.or(f.seed),
            patience: self.patience.or(f.patience),
            reduce_pools: self.reduce_pools.or(f.reduce_pools),
            distinct: self.distinct.or(f.distinct),
            threads: self.threads.or(f.threads),
            out_dir: self.out_dir.or(f.out_dir),
            trace: self.trace.or(f.trace),
            candidates: self.candidates.or(f.candidates),
            forbid: if self.forbid.is_empty() {
                f.forbid
            } else {
                self.forbid
            },
            constant: if self.constant.is_empty() {
                f.constant
            } else {
                self.constant
            },
            crossed: self.crossed.or(f.crossed),
            fixed: self.fixed.or(f.fixed),
            cap: self.cap.or(f.cap),
        })
    }

    fn is_regular(&self) -> Result<bool> {
        match self.mode.as_deref().unwrap_or("regular") {
            "regular" => Ok(true),
            "nonregular" => Ok(false),
            m => Err(Error::Invalid(format!("unknown mode `{m}`"))),
        }
    }

    fn params(&self) -> SibParams {
        let mut p = SibParams::new(
            self.swarm_size.unwrap_or(50),
            self.iterations.unwrap_or(50),
            self.seed.unwrap_or(1),
        );
        p.patience = self.patience;
        p
    }
}

fn load_structure(
    structure: Option<&str>,
    class_table: Option<&Path>,
    two_level: bool,
) -> Result<BlockStructure> {
    match (structure, class_table) {
        (Some(s), None) if two_level => BlockStructure::parse(s),
        (Some(s), None) => BlockStructure::parse_any(s),
        (None, Some(p)) => read_class_table(p),
        (Some(_), Some(_)) => Err(Error::Invalid(
            "give either --structure or --class-table, not both".into(),
        )),
        (None, None) => Err(Error::Invalid(
            "a block structure is required (--structure or --class-table)".into(),
        )),
    }
}

/// Parses `forward`, `backward`, or an explicit `;`-separated list of
/// comma-separated factor names.
pub fn parse_criterion(
    spec: &str,
    b: &BlockStructure,
    weights: Option<&[u64]>,
) -> Result<Vec<Vec<usize>>> {
    if let Ok(d) = spec.parse::<Direction>() {
        return b.criterion_sequence(d, weights);
    }
    let admissible = b.admissible_subsets();
    spec.split(';')
        .map(|part| {
            let mut g = part
                .split(',')
                .map(|name| {
                    let name = name.trim();
                    b.index_of(name)
                        .ok_or_else(|| Error::UnknownLabel(name.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            g.sort_unstable();
            g.dedup();
            if !admissible.contains(&g) {
                return Err(Error::NotAdmissible(part.trim().to_string()));
            }
            Ok(g)
        })
        .collect()
}

fn parse_counts(s: Option<&str>) -> Result<Vec<usize>> {
    match s {
        None => Ok(Vec::new()),
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidQ(format!("bad count `{x}`")))
            })
            .collect(),
    }
}

fn regular_q(cfg: &Config, slot_counts: &[(String, usize)]) -> Result<QVector> {
    let gb = parse_counts(cfg.q_gb.as_deref())?;
    let lb = parse_counts(cfg.q_lb.as_deref())?;
    let new = parse_counts(cfg.q_new.as_deref())?;
    let per_stratum = [&gb, &lb, &new].iter().any(|v| v.len() > 1);
    if per_stratum {
        let m = slot_counts.len();
        let get = |v: &Vec<usize>, i: usize| -> Result<usize> {
            match v.len() {
                0 => Ok(0),
                l if l == m => Ok(v[i]),
                l => Err(Error::InvalidQ(format!(
                    "{l} per-stratum counts for {m} strata"
                ))),
            }
        };
        let per = slot_counts
            .iter()
            .enumerate()
            .map(|(i, (label, _))| {
                Ok((
                    label.clone(),
                    SourceCounts::new(get(&gb, i)?, get(&lb, i)?, get(&new, i)?),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(QVector { per_stratum: per });
    }
    let capacity: usize = slot_counts.iter().map(|(_, c)| c).sum();
    let totals = if gb.is_empty() && lb.is_empty() && new.is_empty() {
        let new = capacity.min(1);
        let gb = (capacity - new).min(1);
        SourceCounts::new(gb, (capacity - new - gb).min(1), new)
    } else {
        SourceCounts::new(
            gb.first().copied().unwrap_or(0),
            lb.first().copied().unwrap_or(0),
            new.first().copied().unwrap_or(0),
        )
    };
    QVector::distribute(totals, slot_counts)
}

fn nonregular_q(cfg: &Config) -> Result<SourceCounts> {
    let one = |s: Option<&str>, default: usize| -> Result<usize> {
        let v = parse_counts(s)?;
        match v.len() {
            0 => Ok(default),
            1 => Ok(v[0]),
            _ => Err(Error::InvalidQ(
                "nonregular searches take a single count per source".into(),
            )),
        }
    };
    Ok(SourceCounts::new(
        one(cfg.q_gb.as_deref(), 1)?,
        one(cfg.q_lb.as_deref(), 1)?,
        one(cfg.q_new.as_deref(), 1)?,
    ))
}

/// A configured search problem.
pub enum Problem {
    Regular(RegularProblem),
    Nonregular {
        problem: NonregularProblem,
        names: Vec<String>,
    },
}

fn treatment_labels(cfg: &Config, n: usize) -> Result<Vec<String>> {
    match &cfg.names {
        None => Ok(letters(n)),
        Some(s) => {
            let names: Vec<String> = s.split(',').map(|x| x.trim().to_string()).collect();
            if names.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} names for {n} factors",
                    names.len()
                )));
            }
            Ok(names)
        }
    }
}

fn parse_pattern(s: &str, width: usize) -> Result<Vec<Option<i8>>> {
    let pat = s
        .split(',')
        .map(|x| match x.trim() {
            "*" => Ok(None),
            "1" | "+1" => Ok(Some(1)),
            "-1" => Ok(Some(-1)),
            other => Err(Error::Invalid(format!("bad pattern entry `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if pat.len() > width {
        return Err(Error::DimensionMismatch(format!(
            "pattern `{s}` is longer than a run"
        )));
    }
    Ok(pat)
}

/// Builds the search problem described by a configuration.
pub fn build_problem(cfg: &Config) -> Result<Problem> {
    let regular = cfg.is_regular()?;
    let b = load_structure(
        cfg.structure.as_deref(),
        cfg.class_table.as_deref(),
        regular,
    )?;
    if regular {
        let n = cfg
            .n
            .ok_or_else(|| Error::Invalid("--n is required".into()))?;
        let units = b.n_units();
        if !units.is_power_of_two() {
            return Err(Error::NonPowerOfTwo(units));
        }
        let k = units.trailing_zeros() as usize;
        if n < k {
            return Err(Error::Infeasible(format!(
                "{n} factors cannot fill {units} units"
            )));
        }
        let l0 = cfg.l0.unwrap_or(n - k);
        let labels = treatment_labels(cfg, n)?;
        let split = cfg
            .split
            .as_deref()
            .map(|s| FactorSplit::parse(s, &labels))
            .transpose()?;
        let t = Arc::new(template_with_labels(&b, labels, l0, split.as_ref())?);
        let mut pools = PoolSet::for_template(&t, cfg.reduce_pools.unwrap_or(true))?;
        pools.distinct = cfg.distinct.unwrap_or(false);
        let seq = parse_criterion(
            cfg.criterion.as_deref().unwrap_or("forward"),
            &b,
            Some(t.tiebreak_weights()),
        )?;
        let q = regular_q(cfg, &t.slot_counts())?;
        return Ok(Problem::Regular(RegularProblem::new(t, pools, seq, q)?));
    }

    let (candidates, cand_names) = match &cfg.candidates {
        Some(p) => {
            let d = read_design(p)?;
            (d.rows, d.names)
        }
        None => {
            let n = cfg
                .n
                .ok_or_else(|| Error::Invalid("--n or --candidates is required".into()))?;
            (full_factorial(n), treatment_labels(cfg, n)?)
        }
    };
    let width = cand_names.len();
    let (layout, mut names) = match cfg.crossed.as_deref() {
        None => (Layout::Direct, Vec::new()),
        Some(side) => {
            let search_rows = match side {
                "rows" => true,
                "cols" | "columns" => false,
                s => {
                    return Err(Error::Invalid(format!(
                        "--crossed takes `rows` or `cols`, not `{s}`"
                    )))
                }
            };
            let path = cfg
                .fixed
                .as_ref()
                .ok_or_else(|| Error::Invalid("--crossed needs --fixed".into()))?;
            let f = read_design(path)?;
            (
                Layout::Crossed {
                    search_rows,
                    fixed: f.rows,
                },
                f.names,
            )
        }
    };
    names.extend(cand_names);
    let mut predicates = Vec::new();
    for s in &cfg.forbid {
        predicates.push(Predicate::Forbidden(parse_pattern(s, width)?));
    }
    for s in &cfg.constant {
        let (col, fac) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("expected `column:factor`, got `{s}`")))?;
        let column = names
            .iter()
            .position(|x| x == col.trim())
            .ok_or_else(|| Error::UnknownLabel(col.trim().to_string()))?;
        let factor = b
            .index_of(fac.trim())
            .ok_or_else(|| Error::UnknownLabel(fac.trim().to_string()))?;
        predicates.push(Predicate::ConstantWithin { column, factor });
    }
    let constraints = Constraints {
        predicates,
        distinct: cfg.distinct.unwrap_or(false),
    };
    let weights = vec![0u64; b.n_factors()];
    let seq = parse_criterion(
        cfg.criterion.as_deref().unwrap_or("forward"),
        &b,
        Some(&weights),
    )?;
    let problem =
        NonregularProblem::new(b, candidates, layout, constraints, seq, nonregular_q(cfg)?)?;
    Ok(Problem::Nonregular { problem, names })
}

/// Outcome of a search or oracle run, ready for reporting.
pub struct Outcome {
    pub design: DesignTable,
    pub table: WordlengthTable,
    pub report: Vec<ReportLine>,
    pub criterion: Vec<crate::Rational>,
    pub key: Option<GeneratorSet>,
    pub trace: Vec<TraceRecord>,
    pub co_optimal: usize,
    pub evaluated: Option<usize>,
    pub iterations_run: usize,
    pub elapsed_ms: u128,
}

fn regular_outcome(p: &RegularProblem, gs: GeneratorSet) -> Result<Outcome> {
    let table = regular_table(&gs)?;
    let b = p.template.structure();
    let design = DesignTable {
        names: p.template.labels().to_vec(),
        rows: to_pm1(&gs.expand()?),
    };
    Ok(Outcome {
        report: report(&table, b)?,
        criterion: p.criterion(&gs)?.0,
        design,
        table,
        key: Some(gs),
        trace: Vec::new(),
        co_optimal: 1,
        evaluated: None,
        iterations_run: 0,
        elapsed_ms: 0,
    })
}

fn nonregular_outcome(p: &NonregularProblem, names: &[String], x: &[usize]) -> Result<Outcome> {
    let rows = p.full_design(x);
    let table = compute_bki_matrix(&rows, &p.structure().strata()?)?;
    Ok(Outcome {
        report: report(&table, p.structure())?,
        criterion: p.criterion(x)?.0,
        design: DesignTable {
            names: names.to_vec(),
            rows,
        },
        table,
        key: None,
        trace: Vec::new(),
        co_optimal: 1,
        evaluated: None,
        iterations_run: 0,
        elapsed_ms: 0,
    })
}

fn with_search<P>(mut o: Outcome, r: &SearchResult<P>) -> Outcome {
    o.trace = r.trace.clone();
    o.co_optimal = r.co_optimal.len();
    o.iterations_run = r.iterations_run;
    o.elapsed_ms = r.elapsed.as_millis();
    o
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Invalid(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the swarm search for a configuration.
pub fn search(cfg: &Config) -> Result<Outcome> {
    let params = cfg.params();
    match build_problem(cfg)? {
        Problem::Regular(p) => {
            let r = in_pool(cfg.threads, || {
                super::sib::regular::run_algorithm3(&p, &params)
            })??;
            Ok(with_search(regular_outcome(&p, r.best.clone())?, &r))
        }
        Problem::Nonregular { problem, names } => {
            let r = in_pool(cfg.threads, || {
                super::sib::nonregular::run_algorithm4(&problem, &params)
            })??;
            Ok(with_search(
                nonregular_outcome(&problem, &names, &r.best)?,
                &r,
            ))
        }
    }
}

/// Exhaustive optimum for a configuration.
pub fn oracle(cfg: &Config) -> Result<Outcome> {
    let cap = cfg.cap.unwrap_or(ORACLE_CAP);
    match build_problem(cfg)? {
        Problem::Regular(p) => {
            let r = in_pool(cfg.threads, || p.exhaustive(cap))??;
            let mut o = regular_outcome(&p, r.best)?;
            o.co_optimal = r.n_optimal;
            o.evaluated = Some(r.n_evaluated);
            Ok(o)
        }
        Problem::Nonregular { problem, names } => {
            let r = in_pool(cfg.threads, || problem.exhaustive(cap))??;
            let mut o = nonregular_outcome(&problem, &names, &r.best)?;
            o.co_optimal = r.n_optimal;
            o.evaluated = Some(r.n_evaluated);
            Ok(o)
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    config: &'a Config,
    criterion: String,
    iterations_run: usize,
    elapsed_ms: u128,
    co_optimal: usize,
    generators: Vec<(String, String)>,
}

/// Writes design, key, reports, metadata and trace files.
pub fn write_artifacts(cfg: &Config, o: &Outcome) -> Result<()> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    write_design(&dir.join("design.csv"), &o.design)?;
    fs::write(dir.join("report.txt"), render_report(&o.report))?;
    let json = serde_json::to_string_pretty(&report_json(&o.report))
        .map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("report.json"), json)?;
    if let Some(gs) = &o.key {
        let mut s = gs.template().render();
        s.push('\n');
        s.push_str(&gs.key_inverse().render());
        s.push('\n');
        for (pool, word) in gs.generator_words() {
            s.push_str(&format!("{pool}: {word}\n"));
        }
        fs::write(dir.join("key.txt"), s)?;
    }
    let meta = Meta {
        config: cfg,
        criterion: format_vector(&o.criterion),
        iterations_run: o.iterations_run,
        elapsed_ms: o.elapsed_ms,
        co_optimal: o.co_optimal,
        generators: o
            .key
            .as_ref()
            .map(|g| g.generator_words())
            .unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("meta.json"), json)?;
    if let Some(path) = &cfg.trace {
        write_trace(path, &o.trace)?;
    }
    Ok(())
}

fn select_lines(lines: Vec<ReportLine>, g: Option<&str>) -> Result<Vec<ReportLine>> {
    let Some(g) = g else { return Ok(lines) };
    g.split(',')
        .map(|s| {
            let s = s.trim().trim_start_matches(['G', 'g']);
            let i: usize = s
                .parse()
                .map_err(|_| Error::Invalid(format!("bad G index `{s}`")))?;
            lines
                .get(i.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("no G{i} for this structure")))
        })
        .collect()
}

/// Report of a design file against a block structure.
pub fn evaluate(args: &EvaluateArgs) -> Result<Vec<ReportLine>> {
    let b = load_structure(
        args.structure.as_deref(),
        args.class_table.as_deref(),
        false,
    )?;
    let d = read_design(&args.design)?;
    if d.rows.len() != b.n_units() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} runs, structure has {} units",
            d.rows.len(),
            b.n_units()
        )));
    }
    let table = compute_bki_matrix(&d.rows, &b.strata()?)?;
    select_lines(report(&table, &b)?, args.g.as_deref())
}

/// Parses arguments and runs a command, writing its output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Invalid(e.to_string()))?;
    execute(cli, out)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Search(cfg) => {
            let cfg = cfg.merged()?;
            let o = search(&cfg)?;
            write_artifacts(&cfg, &o)?;
            out.write_all(render_report(&o.report).as_bytes())?;
            if let Some(gs) = &o.key {
                for (pool, word) in gs.generator_words() {
                    writeln!(out, "{pool}: {word}")?;
                }
            }
        }
        Command::Oracle(cfg) => {
            let cfg = cfg.merged()?;
            let o = oracle(&cfg)?;
            out.write_all(render_report(&o.report).as_bytes())?;
            writeln!(out, "optimal designs: {}", o.co_optimal)?;
            if let Some(n) = o.evaluated {
                writeln!(out, "evaluated: {n}")?;
            }
            if cfg.out_dir.is_some() {
                write_artifacts(&cfg, &o)?;
            }
        }
        Command::Evaluate(args) => {
            let lines = evaluate(&args)?;
            if args.json {
                let s = serde_json::to_string_pretty(&report_json(&lines))
                    .map_err(|e| Error::Io(e.to_string()))?;
                writeln!(out, "{s}")?;
            } else {
                out.write_all(render_report(&lines).as_bytes())?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criterion_lists() {
        let b = BlockStructure::parse("4x4").unwrap();
        let seq = parse_criterion("U;U,R", &b, None).unwrap();
        assert_eq!(seq, vec![vec![0], vec![0, 1]]);
        assert!(matches!(
            parse_criterion("U;R", &b, None),
            Err(Error::NotAdmissible(_))
        ));
        assert!(matches!(
            parse_criterion("U;Z", &b, None),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn key_value_config() {
        let v = parse_kv("structure = 8/4\nn = 13\nS: 20\nforbid = -1,-1\n").unwrap();
        let c: Config = serde_json::from_value(v).unwrap();
        assert_eq!(c.structure.as_deref(), Some("8/4"));
        let j: Config = serde_json::from_str(r#"{"q-gb": 2, "q-new": [1, 3]}"#).unwrap();
        assert_eq!(j.q_gb.as_deref(), Some("2"));
        assert_eq!(j.q_new.as_deref(), Some("1,3"));
        assert_eq!(c.n, Some(13));
        assert_eq!(c.swarm_size, Some(20));
        assert_eq!(c.forbid, vec!["-1,-1"]);
    }

    #[test]
    fn missing_n_is_an_error() {
        let mut sink = Vec::new();
        let r = run(["msdesign", "search", "--structure", "8/4"], &mut sink);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn default_q_fits_small_keys() {
        let cfg = Config {
            structure: Some("2/8".into()),
            n: Some(5),
            ..Config::default()
        };
        assert!(build_problem(&cfg).is_ok());
    }
}
