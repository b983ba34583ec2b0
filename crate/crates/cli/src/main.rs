//! `bbmlab`: simulations, estimators and acceptance checks for branching
//! Brownian motion extremes.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bbm_core::bbm::BbmConfig;
use bbm_core::cluster_law::{
    acceptance_rate, estimate_cluster_mean, estimate_fat_prob, extend_pool_file, read_pool, ClusterSample,
};
use bbm_core::drw::{DecorationTable, TableBuild, TABLE_AGES};
use bbm_core::experiments::{
    cluster_outcome, parse_params, ClusterParams, Drw, DrwParams, Extremal, ExtremalParams, Limit, LimitParams,
    Simulate, SimulateParams,
};
use bbm_core::harness::{read_jsonl, run, write_jsonl, Experiment, ExperimentRecord, Params, Summary};
use bbm_core::limit::cluster_pool;
use bbm_core::verify::{self, Criterion};
use bbm_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// How a command failed; each maps to an exit code.
#[derive(Debug)]
pub enum Fail {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// Some acceptance criterion failed (exit 1).
    Acceptance(usize),
    /// A simulation ran out of resources or I/O failed (exit 3).
    Resource(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Fail::Config(m),
            Error::Input(_) | Error::Serde(_) => Fail::Config(e.to_string()),
            _ => Fail::Resource(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Resource(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "bbmlab", version, about = "Branching Brownian motion extremes: simulation and checks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// TOML file with the command's parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Number of replicates (pool size for `cluster-law`).
    #[arg(long, global = true)]
    replicates: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Parameter override, `key=value` (repeatable; dotted keys nest).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// BBM population statistics.
    Simulate,
    /// Local maxima, clusters and fat-carrier ratios of simulated BBMs.
    Extremal,
    /// Decorated random walk paths; builds or loads the decoration table.
    Drw {
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Build (or extend) a pool of cluster samples and report estimators.
    ClusterLaw {
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Limit-process statistics on a cluster pool.
    Limit {
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Run acceptance criteria; exit 0 iff all pass.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Summaries from stored records.
    Report {
        /// Output directories to combine (default: `--out`).
        dirs: Vec<PathBuf>,
        /// Combine records even if their config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Oracle,
    Growth,
    Profile,
    Fat,
    Drw,
    All,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    experiment: String,
    config_hash: String,
    master_seed: u64,
    replicates: u64,
    code_version: String,
    params: Params,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Acceptance(n)) => {
            eprintln!("{n} acceptance criteria failed");
            ExitCode::from(1)
        }
        Err(Fail::Resource(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Fail> {
    let g = cli.global;
    if let Some(n) = g.workers {
        if n == 0 {
            return Err(Fail::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Fail::Resource(e.to_string()))?;
    }
    if let Command::Report { dirs, force } = &cli.command {
        let dirs = if dirs.is_empty() { vec![g.out.clone()] } else { dirs.clone() };
        return report(&dirs, *force);
    }
    let params = config::load(g.config.as_deref(), &g.set)?;
    match cli.command {
        Command::Simulate => {
            let p: SimulateParams = parse_params(&params)?;
            bbm_config(p.horizon_t, p.pruning, p.max_population).validate()?;
            run_experiment(&Simulate, &params, &g)
        }
        Command::Extremal => {
            let p: ExtremalParams = parse_params(&params)?;
            bbm_config(p.horizon_t, p.pruning, p.max_population).validate()?;
            if let Some(r) = p.r {
                if !(r > 0.0 && r < p.horizon_t) {
                    return Err(Fail::Config(format!("r must lie in (0, horizon_t), got {r}")));
                }
            }
            run_experiment(&Extremal, &params, &g)
        }
        Command::Drw { table } => {
            let p: DrwParams = parse_params(&params)?;
            if !(p.t > 0.0 && p.grid_dt > 0.0) {
                return Err(Fail::Config("t and grid_dt must be positive".into()));
            }
            let table = load_or_build_table(table.as_deref(), &g)?;
            run_experiment(&Drw { law: Arc::new(table) }, &params, &g)
        }
        Command::ClusterLaw { table } => cluster_law(&params, table.as_deref(), &g),
        Command::Limit { pool } => {
            let p = LimitParams::parse(&params)?;
            p.limit.validate()?;
            let path = pool
                .or_else(|| p.limit.nu_source.as_ref().map(PathBuf::from))
                .ok_or_else(|| Fail::Config("limit needs --pool or nu_source".into()))?;
            let samples = load_pool(&path)?;
            if samples.is_empty() {
                return Err(Fail::Config(format!("{} holds no cluster samples", path.display())));
            }
            run_experiment(&Limit { pool: Arc::new(cluster_pool(samples)) }, &params, &g)
        }
        Command::Verify { suite, table, pool } => {
            if !params.is_empty() {
                return Err(Fail::Config("verify takes no parameters".into()));
            }
            verify_cmd(suite, table.as_deref(), pool.as_deref(), &g)
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn bbm_config(horizon_t: f64, pruning: bbm_core::bbm::Pruning, max_population: usize) -> BbmConfig {
    BbmConfig { horizon_t, branch_rate: 1.0, pruning, max_population, seed: 0 }
}

fn create_out(g: &Global) -> Result<(), Fail> {
    std::fs::create_dir_all(&g.out).map_err(|e| Fail::Resource(format!("cannot create {}: {e}", g.out.display())))
}

fn write_outputs(name: &str, params: &Params, records: &[ExperimentRecord], g: &Global) -> Result<(), Fail> {
    create_out(g)?;
    let mut w = BufWriter::new(File::create(g.out.join("records.jsonl"))?);
    write_jsonl(records, &mut w)?;
    w.flush()?;
    let summary = Summary::from_records(records);
    summary.write_csv(BufWriter::new(File::create(g.out.join("summary.csv"))?))?;
    let manifest = Manifest {
        experiment: name.into(),
        config_hash: config::hash(params),
        master_seed: g.seed,
        replicates: records.len() as u64,
        code_version: env!("CARGO_PKG_VERSION").into(),
        params: params.clone(),
    };
    std::fs::write(g.out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest"))?;
    summary.write_csv(std::io::stdout().lock())?;
    Ok(())
}

fn run_experiment(exp: &dyn Experiment, params: &Params, g: &Global) -> Result<(), Fail> {
    let records = run(exp, params, g.replicates.unwrap_or(100), g.seed);
    let failed: Vec<&ExperimentRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    write_outputs(exp.name(), params, &records, g)?;
    if !failed.is_empty() {
        eprintln!("{} of {} replicates failed; first: {}", failed.len(), records.len(), failed[0].error.as_ref().unwrap());
        if failed.len() == records.len() {
            return Err(Fail::Resource("every replicate failed".into()));
        }
    }
    Ok(())
}

fn load_or_build_table(path: Option<&Path>, g: &Global) -> Result<DecorationTable, Fail> {
    create_out(g)?;
    let cached = g.out.join("decoration_table.json");
    let source = path.map(Path::to_path_buf).or_else(|| cached.exists().then(|| cached.clone()));
    let table = match source {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Fail::Config(format!("cannot read table {}: {e}", p.display())))?;
            DecorationTable::from_json(&text)?
        }
        None => {
            eprintln!("building decoration table (ages {TABLE_AGES:?})");
            DecorationTable::build(&TABLE_AGES, TableBuild::default(), g.seed)?
        }
    };
    std::fs::write(&cached, table.to_json()?)?;
    Ok(table)
}

fn load_pool(path: &Path) -> Result<Vec<ClusterSample>, Fail> {
    let f = File::open(path).map_err(|e| Fail::Config(format!("cannot open pool {}: {e}", path.display())))?;
    Ok(read_pool(BufReader::new(f))?)
}

fn cluster_params(params: &Params, g: &Global) -> Result<ClusterParams, Fail> {
    if params.contains_key("seed") {
        return Err(Fail::Config("the pool seed is set with --seed".into()));
    }
    let mut p = ClusterParams::parse(params)?;
    p.nu.seed = g.seed;
    if let Some(n) = g.replicates {
        p.nu.n_target = n;
    }
    p.nu.validate()?;
    Ok(p)
}

fn build_pool(p: &ClusterParams, table: &DecorationTable, g: &Global) -> Result<Vec<ClusterSample>, Fail> {
    create_out(g)?;
    let path = g.out.join("nu_pool.jsonl");
    let n = p.nu.n_target;
    Ok(extend_pool_file(&path, &p.nu, table, 50, |k| eprintln!("pool: {k}/{n}"))?)
}

fn cluster_law(params: &Params, table: Option<&Path>, g: &Global) -> Result<(), Fail> {
    let p = cluster_params(params, g)?;
    let table = load_or_build_table(table, g)?;
    let pool = build_pool(&p, &table, g)?;
    let records: Vec<ExperimentRecord> = pool
        .iter()
        .map(|s| {
            let o = cluster_outcome(s, &p.levels);
            ExperimentRecord {
                experiment: "cluster-law".into(),
                master_seed: g.seed,
                replicate_index: s.index,
                params: params.clone(),
                stats: o.stats,
                flags: o.flags,
                error: None,
            }
        })
        .collect();
    write_outputs("cluster-law", params, &records, g)?;
    let acc = acceptance_rate(&pool);
    println!("acceptance rate {:.3e} ± {:.1e} ({} samples)", acc.mean, acc.se, pool.len());
    for &v in &p.levels {
        let m = estimate_cluster_mean(v, &pool)?;
        let f = estimate_fat_prob(v, verify::DELTA, &pool)?;
        println!("v={v}: E C([-v,0]) = {:.3} ± {:.3}; P(fat, delta={}) = {:.4}", m.mean, m.se, verify::DELTA, f.mean);
    }
    Ok(())
}

fn verify_cmd(suite: Suite, table: Option<&Path>, pool: Option<&Path>, g: &Global) -> Result<(), Fail> {
    let mut results: Vec<Criterion> = Vec::new();
    let wants = |s: Suite| suite == Suite::All || suite == s;
    if wants(Suite::Oracle) {
        results.extend(verify::oracle_suite(g.seed)?);
    }
    let needs_table = wants(Suite::Drw) || (pool.is_none() && suite != Suite::Oracle);
    let table = if needs_table { Some(load_or_build_table(table, g)?) } else { None };
    if wants(Suite::Drw) {
        results.extend(verify::drw_suite(table.as_ref().unwrap(), g.seed)?);
    }
    if suite != Suite::Oracle && suite != Suite::Drw {
        let samples = match pool {
            Some(p) => load_pool(p)?,
            None => {
                let p = cluster_params(&Params::new(), g)?;
                build_pool(&p, table.as_ref().unwrap(), g)?
            }
        };
        let ids: &[&str] = match suite {
            Suite::Growth => &["3a", "4a", "4c"],
            Suite::Profile => &["4b"],
            Suite::Fat => &["3b", "3c", "3d", "3e", "4d", "4e"],
            _ => &["3a", "3b", "3c", "3d", "3e", "4a", "4b", "4c", "4d", "4e"],
        };
        if ids.iter().any(|i| i.starts_with('3')) {
            results.extend(verify::cluster_suite(&samples)?.into_iter().filter(|c| ids.contains(&c.id.as_str())));
        }
        results.extend(verify::limit_suite(&samples, g.seed)?.into_iter().filter(|c| ids.contains(&c.id.as_str())));
    }
    if suite == Suite::All {
        results.push(verify::determinism_check(g.seed)?);
    }
    for c in &results {
        println!("{}", c.line());
    }
    create_out(g)?;
    write_jsonl(&results, BufWriter::new(File::create(g.out.join("verify.jsonl"))?))?;
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Fail::Acceptance(failed));
    }
    Ok(())
}

fn report(dirs: &[PathBuf], force: bool) -> Result<(), Fail> {
    let mut records = Vec::new();
    let mut hashes = Vec::new();
    for d in dirs {
        let path = d.join("records.jsonl");
        if !path.exists() {
            continue;
        }
        let recs: Vec<ExperimentRecord> = read_jsonl(BufReader::new(File::open(&path)?))?;
        if recs.is_empty() {
            continue;
        }
        let manifest: Option<Manifest> = std::fs::read_to_string(d.join("manifest.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        hashes.push(manifest.map(|m| m.config_hash).unwrap_or_default());
        records.extend(recs);
    }
    if records.is_empty() {
        return Err(Fail::Config(format!("no records in {}", dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", "))));
    }
    hashes.dedup();
    if hashes.len() > 1 && !force {
        return Err(Fail::Config("records come from different configurations (use --force to combine)".into()));
    }
    Summary::from_records(&records).write_csv(std::io::stdout().lock())?;
    Ok(())
}
