//! Forward simulation from the generative model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};

use super::{Latent, LatentBlock, LatentDomain, ModelConfig};
use crate::likelihood::Hyper;
use crate::partition::CrpPartition;
use crate::schema::{Dataset, EntityId, ObservationStore, RelationalSystem, Tuple};

/// Every tuple of every relation over `counts[d]` entities per domain.
pub fn full_tuples(system: &RelationalSystem, counts: &[usize]) -> Vec<Vec<Tuple>> {
    system
        .relations()
        .iter()
        .map(|r| {
            let mut out: Vec<Tuple> = vec![Tuple::new()];
            for &d in &r.domains {
                out = out
                    .into_iter()
                    .flat_map(|t| {
                        (0..counts[d]).map(move |e| {
                            let mut t = t.clone();
                            t.push(e);
                            t
                        })
                    })
                    .collect();
            }
            out
        })
        .collect()
}

/// Draws relation blocks and per-block entity partitions from the prior,
/// over `counts[d]` entities of each domain.
pub fn sample_latent_prior<R: Rng + ?Sized>(
    system: &RelationalSystem,
    counts: &[usize],
    config: &ModelConfig,
    rng: &mut R,
) -> Latent {
    let m = system.num_relations();
    let blocks: Vec<Vec<usize>> = if config.mode.learns_structure() {
        CrpPartition::sample(m, config.gamma0, rng).blocks()
    } else {
        vec![(0..m).collect()]
    };
    let blocks = blocks
        .into_iter()
        .map(|relations| {
            let mut domains = BTreeMap::new();
            for &k in &relations {
                for &d in &system.relation(k).domains {
                    domains.entry(d).or_insert(());
                }
            }
            let domains = domains
                .into_keys()
                .map(|d| {
                    let gamma = config.entity_gamma[d];
                    let clusters = CrpPartition::sample(counts[d], gamma, rng).blocks();
                    (d, LatentDomain { gamma, clusters })
                })
                .collect();
            LatentBlock { relations, domains, thetas: BTreeMap::new() }
        })
        .collect();
    Latent { blocks }
}

fn draw_param<R: Rng + ?Sized>(hyper: &Hyper, k: usize, rng: &mut R) -> Vec<f64> {
    match *hyper {
        Hyper::Bernoulli { alpha, beta } => {
            let p: f64 = Beta::new(alpha, beta).expect("positive beta parameters").sample(rng);
            vec![1.0 - p, p]
        }
        Hyper::Categorical { delta } => {
            let g = Gamma::new(delta, 1.0).expect("positive dirichlet weight");
            let mut w: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|x| *x /= total);
            } else {
                w = vec![0.0; k];
                w[rng.random_range(0..k)] = 1.0;
            }
            w
        }
        Hyper::NonConjugate { .. } => {
            let p = Hyper::sample_theta(rng);
            vec![1.0 - p, p]
        }
    }
}

fn draw_value<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (v, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return v as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Samples a value for every listed tuple given the latent structure. Cell
/// parameters are drawn from their priors, except nonconjugate cells whose
/// `theta` the latent already fixes.
///
/// Entity `i` of domain `d` is named `names[d][i]`. Every tuple entity must
/// appear in the latent clusters of its relation's block.
pub fn forward_dataset<R: Rng + ?Sized>(
    system: &RelationalSystem,
    names: &[Vec<String>],
    latent: &Latent,
    hypers: &[Hyper],
    tuples: &[Vec<Tuple>],
    rng: &mut R,
) -> Dataset {
    let mut store = ObservationStore::empty(system);
    for (d, ns) in names.iter().enumerate() {
        for n in ns {
            store.add_entity(d, n);
        }
    }
    for block in &latent.blocks {
        let cluster_of: BTreeMap<usize, BTreeMap<EntityId, usize>> = block
            .domains
            .iter()
            .map(|(&d, dom)| {
                let map = dom
                    .clusters
                    .iter()
                    .enumerate()
                    .flat_map(|(c, es)| es.iter().map(move |&e| (e, c)))
                    .collect();
                (d, map)
            })
            .collect();
        for &k in &block.relations {
            let sig = system.relation(k);
            let mut params: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
            for tuple in &tuples[k] {
                let key: Vec<usize> =
                    sig.domains.iter().zip(tuple.iter()).map(|(d, e)| cluster_of[d][e]).collect();
                let fixed = block.thetas.get(&k).and_then(|t| t.get(&key)).copied();
                let probs = params.entry(key).or_insert_with(|| match fixed {
                    Some(theta) => vec![1.0 - theta, theta],
                    None => draw_param(&hypers[k], sig.kind.cardinality(), rng),
                });
                let value = draw_value(probs, rng);
                store.insert(system, k, tuple.clone(), value).expect("generated tuples are unique and valid");
            }
        }
    }
    Dataset::new(system.clone(), store)
}
