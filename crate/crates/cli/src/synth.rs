//! Synthetic data from a TOML generator config.
//!
//! ```toml
//! gamma0 = 1.0        # relation-block concentration when blocks are not planted
//! entity_gamma = 1.0  # entity concentration for unplanted domains
//! density = 1.0       # fraction of cells observed
//!
//! [domains]
//! D1 = 50
//! D2 = 50
//!
//! [[relations]]
//! name = "R1"
//! kind = "bernoulli"  # or "categorical:K", "bernoulli_nc"
//! domains = ["D1", "D2"]
//! block = 1           # planted block; omit on every relation to sample blocks
//!
//! [[blocks]]
//! id = 1
//! clusters = { D1 = 3 }  # equal contiguous clusters; other domains use the CRP
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use hirm::hirm::{forward_dataset, full_tuples, sample_latent_prior, Latent, LatentBlock, LatentDomain, Mode, ModelConfig};
use hirm::{parse_schema, CrpPartition, Dataset, RelationalSystem};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "one")]
    pub gamma0: f64,
    #[serde(default = "one")]
    pub entity_gamma: f64,
    #[serde(default = "one")]
    pub density: f64,
    pub domains: BTreeMap<String, usize>,
    pub relations: Vec<RelationSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub name: String,
    pub kind: String,
    pub domains: Vec<String>,
    pub block: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub id: usize,
    #[serde(default)]
    pub clusters: BTreeMap<String, usize>,
}

/// A generated dataset with its latent structure.
pub struct Synthetic {
    pub dataset: Dataset,
    pub latent: Latent,
}

fn equal_clusters(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k.min(n).max(1)];
    let k = out.len();
    for i in 0..n {
        out[i * k / n.max(1)].push(i);
    }
    out.retain(|c| !c.is_empty());
    out
}

pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<Synthetic> {
    if !(config.density > 0.0 && config.density <= 1.0) {
        bail!("density must be in (0, 1]");
    }
    let mut schema = String::new();
    for r in &config.relations {
        writeln!(schema, "{} {} {}", r.kind, r.name, r.domains.join(" ")).unwrap();
    }
    let system: RelationalSystem = parse_schema(&schema)?;
    let counts: Vec<usize> = system
        .domains()
        .iter()
        .map(|d| config.domains.get(d).copied().with_context(|| format!("domain `{d}` has no entity count")))
        .collect::<Result<_>>()?;
    for d in config.domains.keys() {
        if system.domain_id(d).is_none() {
            bail!("domain `{d}` is not used by any relation");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelConfig::new(&system, Mode::Hirm).with_gamma0(config.gamma0);
    model.entity_gamma = vec![config.entity_gamma; system.num_domains()];

    let planted = config.relations.iter().filter(|r| r.block.is_some()).count();
    let latent = if planted == 0 {
        sample_latent_prior(&system, &counts, &model, &mut rng)
    } else if planted == config.relations.len() {
        let mut by_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, r) in config.relations.iter().enumerate() {
            by_block.entry(r.block.unwrap()).or_default().push(k);
        }
        let mut blocks = Vec::new();
        for (id, relations) in by_block {
            let spec = config.blocks.iter().find(|b| b.id == id);
            let mut domains = BTreeMap::new();
            for &k in &relations {
                for &d in &system.relation(k).domains {
                    domains.entry(d).or_insert_with(|| {
                        let name = &system.domains()[d];
                        let clusters = match spec.and_then(|s| s.clusters.get(name)) {
                            Some(&c) => equal_clusters(counts[d], c),
                            None => CrpPartition::sample(counts[d], config.entity_gamma, &mut rng).blocks(),
                        };
                        LatentDomain { gamma: config.entity_gamma, clusters }
                    });
                }
            }
            blocks.push(LatentBlock { relations, domains, thetas: BTreeMap::new() });
        }
        Latent { blocks }
    } else {
        bail!("either every relation or no relation must name a block");
    };

    let names: Vec<Vec<String>> =
        system.domains().iter().zip(&counts).map(|(d, &n)| (0..n).map(|i| format!("{d}_{i}")).collect()).collect();
    let mut tuples = full_tuples(&system, &counts);
    if config.density < 1.0 {
        for ts in tuples.iter_mut() {
            ts.retain(|_| rng.random::<f64>() < config.density);
        }
    }
    let dataset = forward_dataset(&system, &names, &latent, &model.likelihood_hypers, &tuples, &mut rng);
    Ok(Synthetic { dataset, latent })
}

/// Observations as `relation,value,entity...` lines.
pub fn observations_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    for (k, sig) in ds.system.relations().iter().enumerate() {
        for obs in ds.store.observations(k) {
            out.push_str(&sig.name);
            write!(out, ",{}", obs.value).unwrap();
            for (&d, &e) in sig.domains.iter().zip(obs.tuple.iter()) {
                write!(out, ",{}", ds.store.entity_name(d, e)).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Ground-truth structure with entity names, as JSON.
pub fn truth_json(ds: &Dataset, latent: &Latent) -> String {
    let blocks: Vec<serde_json::Value> = latent
        .blocks
        .iter()
        .map(|b| {
            let relations: Vec<&str> = b.relations.iter().map(|&k| ds.system.relation(k).name.as_str()).collect();
            let domains: serde_json::Map<String, serde_json::Value> = b
                .domains
                .iter()
                .map(|(&d, dom)| {
                    let clusters: Vec<Vec<&str>> =
                        dom.clusters.iter().map(|c| c.iter().map(|&e| ds.store.entity_name(d, e)).collect()).collect();
                    (ds.system.domains()[d].clone(), serde_json::json!(clusters))
                })
                .collect();
            serde_json::json!({ "relations": relations, "domains": domains })
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "relation_blocks": blocks })).unwrap();
    text.push('\n');
    text
}

pub fn cmd_synth(config_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let config: GeneratorConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    let synthetic = generate(&config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("schema.txt"), synthetic.dataset.system.render())?;
    fs::write(out.join("obs.csv"), observations_csv(&synthetic.dataset))?;
    fs::write(out.join("truth.json"), truth_json(&synthetic.dataset, &synthetic.latent))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const PRIOR: &str = r#"
gamma0 = 1e-9
[domains]
A = 6
B = 5
[[relations]]
name = "R1"
kind = "bernoulli"
domains = ["A"]
[[relations]]
name = "R2"
kind = "categorical:3"
domains = ["A", "B"]
[[relations]]
name = "R3"
kind = "bernoulli_nc"
domains = ["B", "B"]
"#;

    #[test]
    fn tiny_gamma0_gives_one_block() {
        let config: GeneratorConfig = toml::from_str(PRIOR).unwrap();
        for seed in 0..50 {
            let s = generate(&config, seed).unwrap();
            assert_eq!(s.latent.blocks.len(), 1);
            assert_eq!(s.dataset.store.observations(1).len(), 30);
            assert_eq!(s.dataset.store.observations(2).len(), 25);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let config: GeneratorConfig = toml::from_str(PRIOR).unwrap();
        let a = generate(&config, 4).unwrap();
        let b = generate(&config, 4).unwrap();
        assert_eq!(observations_csv(&a.dataset), observations_csv(&b.dataset));
        assert_eq!(truth_json(&a.dataset, &a.latent), truth_json(&b.dataset, &b.latent));
        let reparsed = Dataset::parse(&a.dataset.system.render(), &observations_csv(&a.dataset)).unwrap();
        assert_eq!(reparsed, a.dataset);
    }

    #[test]
    fn planted_blocks_are_respected() {
        let text = r#"
[domains]
A = 9
B = 4
[[relations]]
name = "R1"
kind = "bernoulli"
domains = ["A", "B"]
block = 1
[[relations]]
name = "R2"
kind = "bernoulli"
domains = ["A", "B"]
block = 2
[[relations]]
name = "R3"
kind = "bernoulli"
domains = ["A", "B"]
block = 1
[[blocks]]
id = 1
clusters = { A = 3, B = 2 }
"#;
        let config: GeneratorConfig = toml::from_str(text).unwrap();
        let s = generate(&config, 0).unwrap();
        assert_eq!(s.latent.blocks.len(), 2);
        assert_eq!(s.latent.blocks[0].relations, vec![0, 2]);
        assert_eq!(s.latent.blocks[0].domains[&0].clusters, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]]);
        assert_eq!(s.latent.blocks[1].relations, vec![1]);
    }

    #[test]
    fn partial_planting_is_rejected() {
        let text = PRIOR.replace("domains = [\"A\"]\n", "domains = [\"A\"]\nblock = 1\n");
        let config: GeneratorConfig = toml::from_str(&text).unwrap();
        assert!(generate(&config, 0).is_err());
    }
}
