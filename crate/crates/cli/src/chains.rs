//! Multi-chain inference runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use hirm::hirm::{serialize, ModelConfig};
use hirm::{Dataset, HirmState};

use crate::{debug_enabled, load_dataset, thread_pool, InferArgs};

/// Seed of chain `chain`, decorrelated from the run seed by a golden-ratio
/// increment and a splitmix64 finalizer.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    let mut z = seed.wrapping_add((chain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ChainPlan<'a> {
    dataset: Arc<Dataset>,
    config: ModelConfig,
    seed: u64,
    chain: usize,
    iters: u64,
    every: u64,
    dir: &'a Path,
}

fn run_chain(plan: &ChainPlan) -> Result<String> {
    let debug = debug_enabled();
    let mut state = HirmState::init_from_prior(Arc::clone(&plan.dataset), plan.config.clone(), plan.seed)?;
    let dir = plan.dir.join(format!("chain-{}", plan.chain));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let start = Instant::now();
    let mut log = String::new();
    for _ in 0..plan.iters {
        let scan = state.gibbs_scan();
        if debug {
            if let Err(e) = state.audit() {
                bail!("chain {} scan {scan}: audit failed: {e}", plan.chain);
            }
        }
        let ms = start.elapsed().as_secs_f64() * 1e3;
        writeln!(log, "{scan}\t{}\t{}\t{}\t{ms:.1}", plan.chain, state.logp_full(), state.num_blocks()).unwrap();
        if scan % plan.every == 0 || scan == plan.iters {
            let path = dir.join(format!("state-{scan:06}.json"));
            fs::write(&path, serialize(&state)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    if debug {
        eprintln!("chain {}: {} after {} scans", plan.chain, state.relation_partition_string(), plan.iters);
    }
    fs::write(dir.join("log.tsv"), format!("{LOG_HEADER}{log}"))?;
    Ok(log)
}

const LOG_HEADER: &str = "scan\tchain\tlogp_full\tK\twall_ms\n";

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    if args.iters == 0 {
        bail!("--iters must be at least 1");
    }
    if args.chains == 0 {
        bail!("--chains must be at least 1");
    }
    let every = args.checkpoint_every.unwrap_or(args.iters);
    if every == 0 {
        bail!("--checkpoint-every must be at least 1");
    }
    let dataset = load_dataset(&args.data)?;
    let config = ModelConfig::new(&dataset.system, args.mode).with_hyper_kernel(!args.no_hyper_kernel);
    // Validate the configuration once before spawning chains.
    HirmState::init_from_prior(Arc::clone(&dataset), config.clone(), 0)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let plans: Vec<ChainPlan> = (0..args.chains)
        .map(|chain| ChainPlan {
            dataset: Arc::clone(&dataset),
            config: config.clone(),
            seed: chain_seed(args.seed, chain),
            chain,
            iters: args.iters,
            every,
            dir: &args.out,
        })
        .collect();
    let pool = thread_pool(args.threads)?;
    let logs: Vec<String> = pool.install(|| plans.par_iter().map(run_chain).collect::<Result<Vec<_>>>())?;
    let mut all = String::from(LOG_HEADER);
    logs.iter().for_each(|l| all.push_str(l));
    fs::write(args.out.join("log.tsv"), all)?;
    Ok(())
}
