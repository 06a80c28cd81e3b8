mod chains;
mod convert;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use hirm::hirm::{deserialize, Mode, ModelConfig};
use hirm::oracle::{enumerate_posterior, exact_fresh_row_logp};
use hirm::query::{cocluster_csv, cocluster_matrix, ensemble_logp, impute, parse_queries, predictive_logp, simulate, Ensemble};
use hirm::{Dataset, HirmState};

#[derive(Parser)]
#[command(name = "hirm", version, about = "Hierarchical infinite relational model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Gibbs chains and write checkpoint states.
    Infer(InferArgs),
    /// Score held-out query rows against saved states.
    Logp(LogpArgs),
    /// Simulate and impute query cells from saved states.
    Sample(SampleArgs),
    /// Write an entity co-clustering matrix for one context relation.
    Cocluster(CoclusterArgs),
    /// Forward-sample a synthetic dataset from a generator config.
    Synth(SynthArgs),
    /// Convert binary-row benchmark files to schema and observations.
    Convert(ConvertArgs),
    /// Exact posterior over relation partitions, by enumeration.
    Oracle(OracleArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    obs: PathBuf,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "hirm")]
    mode: Mode,
    #[arg(long, default_value_t = 200)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Write a state every this many scans (the final state is always written).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_hyper_kernel: bool,
    /// Worker threads for running chains (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct StateArgs {
    /// State files, or directories searched recursively for them.
    #[arg(long, required = true, num_args = 1..)]
    states: Vec<PathBuf>,
    /// Use only the final state of each chain directory.
    #[arg(long)]
    last: bool,
    /// Skip states with fewer scans than this.
    #[arg(long, default_value_t = 0)]
    burn: u64,
}

#[derive(Args)]
struct LogpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    states: StateArgs,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    states: StateArgs,
    /// Query cells; their value column is ignored.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CoclusterArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    states: StateArgs,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    context: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// Training rows: comma-separated 0/1 values, one object per line.
    #[arg(long)]
    train: PathBuf,
    /// Test rows, emitted as fresh-entity query rows.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "hirm")]
    mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    gamma0: f64,
    /// Also report exact predictive log probabilities of these query rows.
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer(a) => chains::cmd_infer(&a),
        Command::Logp(a) => cmd_logp(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Cocluster(a) => cmd_cocluster(&a),
        Command::Synth(a) => synth::cmd_synth(&a.config, a.seed, &a.out),
        Command::Convert(a) => convert::cmd_convert(&a.train, a.test.as_deref(), &a.out),
        Command::Oracle(a) => cmd_oracle(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

pub(crate) fn debug_enabled() -> bool {
    std::env::var("HIRM_LOG").is_ok_and(|v| v.eq_ignore_ascii_case("debug"))
}

pub(crate) fn load_dataset(data: &DataArgs) -> Result<Arc<Dataset>> {
    let schema = fs::read_to_string(&data.schema).with_context(|| format!("reading {}", data.schema.display()))?;
    let obs = fs::read_to_string(&data.obs).with_context(|| format!("reading {}", data.obs.display()))?;
    let ds = Dataset::parse(&schema, &obs).with_context(|| format!("loading {}", data.obs.display()))?;
    Ok(Arc::new(ds))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn collect_state_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.extension().is_some_and(|x| x == "json") {
                collect_state_files(&e, out)?;
            }
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn load_ensemble(ds: &Arc<Dataset>, args: &StateArgs) -> Result<Ensemble> {
    let mut files = Vec::new();
    for p in &args.states {
        collect_state_files(p, &mut files)?;
    }
    let mut states: Vec<(PathBuf, HirmState)> = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        let s = deserialize(Arc::clone(ds), &text).with_context(|| format!("loading state {}", f.display()))?;
        if s.scan_count() >= args.burn {
            states.push((f, s));
        }
    }
    if args.last {
        let mut latest: std::collections::BTreeMap<PathBuf, (PathBuf, HirmState)> = Default::default();
        for (f, s) in states {
            let dir = f.parent().map(Path::to_path_buf).unwrap_or_default();
            match latest.get(&dir) {
                Some((_, t)) if t.scan_count() >= s.scan_count() => {}
                _ => {
                    latest.insert(dir, (f, s));
                }
            }
        }
        states = latest.into_values().collect();
    }
    if states.is_empty() {
        bail!("no states found");
    }
    Ok(Ensemble::new(states.into_iter().map(|x| x.1).collect())?)
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn cmd_logp(args: &LogpArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let text = fs::read_to_string(&args.query).with_context(|| format!("reading {}", args.query.display()))?;
    let rows = parse_queries(&ds, &text)?;
    if rows.is_empty() {
        return emit(args.out.as_deref(), "");
    }
    let ensemble = load_ensemble(&ds, &args.states)?;
    let pool = thread_pool(args.threads)?;
    let scored: Vec<(f64, f64)> = pool.install(|| {
        rows.par_iter()
            .map(|row| {
                let ens = ensemble_logp(&ensemble, row)?;
                let singles = ensemble.states().iter().map(|s| predictive_logp(s, row)).collect::<Result<Vec<_>, _>>()?;
                Ok((ens, singles.iter().sum::<f64>() / singles.len() as f64))
            })
            .collect::<Result<Vec<_>, hirm::query::QueryError>>()
    })?;
    let mut out = String::from("row,ensemble_logp,mean_state_logp\n");
    for (i, (e, s)) in scored.iter().enumerate() {
        out.push_str(&format!("{},{e},{s}\n", i + 1));
    }
    let n = scored.len() as f64;
    let mean_e = scored.iter().map(|x| x.0).sum::<f64>() / n;
    let mean_s = scored.iter().map(|x| x.1).sum::<f64>() / n;
    out.push_str(&format!("mean,{mean_e},{mean_s}\n"));
    emit(args.out.as_deref(), &out)
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let text = fs::read_to_string(&args.query).with_context(|| format!("reading {}", args.query.display()))?;
    let rows = parse_queries(&ds, &text)?;
    let ensemble = load_ensemble(&ds, &args.states)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = String::from("relation,entities,simulated,imputed,probability\n");
    for row in &rows {
        for cell in &row.cells {
            let sig = ds.system.relation(cell.relation);
            let state = &ensemble.states()[rand::Rng::random_range(&mut rng, 0..ensemble.len())];
            let simulated = simulate(state, cell.relation, &cell.args, &mut rng);
            let (imputed, p) = impute(&ensemble, cell.relation, &cell.args, &row.fresh)?;
            let names: Vec<String> = sig
                .domains
                .iter()
                .zip(&cell.args)
                .map(|(&d, arg)| match *arg {
                    hirm::query::EntityArg::Known(e) => ds.store.entity_name(d, e).to_string(),
                    hirm::query::EntityArg::Fresh(j) => format!("~{}", row.fresh[&d][j]),
                })
                .collect();
            out.push_str(&format!("{},{},{simulated},{imputed},{p}\n", sig.name, names.join(" ")));
        }
    }
    emit(args.out.as_deref(), &out)
}

fn cmd_cocluster(args: &CoclusterArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let d = ds.system.domain_id(&args.domain).with_context(|| format!("unknown domain `{}`", args.domain))?;
    let k = ds.system.relation_id(&args.context).with_context(|| format!("unknown context relation `{}`", args.context))?;
    let ensemble = load_ensemble(&ds, &args.states)?;
    let m = cocluster_matrix(&ensemble, d, k)?;
    emit(args.out.as_deref(), &cocluster_csv(&ds, d, &m))
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let config = ModelConfig::new(&ds.system, args.mode).with_gamma0(args.gamma0);
    let report = enumerate_posterior(&ds, &config)?;
    let mut out = report.to_csv(&ds.system);
    out.push_str(&format!("# log_evidence,{}\n", report.log_evidence));
    if let Some(q) = &args.query {
        let text = fs::read_to_string(q).with_context(|| format!("reading {}", q.display()))?;
        out.push_str("row,exact_logp\n");
        for (i, row) in parse_queries(&ds, &text)?.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, exact_fresh_row_logp(&ds, &config, row)?));
        }
    }
    emit(args.out.as_deref(), &out)
}
