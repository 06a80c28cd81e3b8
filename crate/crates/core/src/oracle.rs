//! Exact posterior by exhaustive enumeration, for systems small enough that
//! every relation partition and every entity partition can be listed.
//!
//! Scores are built from sequential predictive products (cell by cell,
//! seat by seat) rather than closed forms, so they check the sampler's
//! scoring code by an independent route.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::hirm::{format_relation_blocks, ModelConfig};
use crate::likelihood::{Hyper, SuffStats};
use crate::math::logsumexp;
use crate::query::{EntityArg, QueryRow};
use crate::schema::{Dataset, DomainId, EntityId, RelationId, RelationalSystem};

/// Most latent configurations an enumeration may visit.
pub const MAX_CONFIGURATIONS: u128 = 10_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs {0} configurations, more than the limit of {MAX_CONFIGURATIONS}")]
    TooLarge(u128),
    #[error("relation `{0}` is nonconjugate; exact enumeration needs collapsed likelihoods")]
    Nonconjugate(String),
    #[error("query cell of `{0}` duplicates a training observation")]
    DuplicateCell(String),
}

/// All set partitions of `n` items as restricted-growth strings, in
/// lexicographic order.
pub fn restricted_growth_strings(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    fn rec(n: usize, max: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        let limit = if current.is_empty() { 0 } else { max + 1 };
        for label in 0..=limit {
            current.push(label);
            rec(n, max.max(label), current, out);
            current.pop();
        }
    }
    rec(n, 0, &mut current, &mut out);
    out
}

/// Number of set partitions of `n` items.
pub fn bell(n: usize) -> u128 {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![*row.last().unwrap()];
        for &x in &row {
            let v = next.last().unwrap().saturating_add(x);
            next.push(v);
        }
        row = next;
    }
    row[0]
}

/// Sequential CRP log probability of the seating `labels`.
fn crp_sequential(labels: &[usize], gamma: f64) -> f64 {
    let mut counts: Vec<usize> = Vec::new();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let num = if l == counts.len() {
            counts.push(0);
            gamma
        } else {
            counts[l] as f64
        };
        total += (num / (i as f64 + gamma)).ln();
        counts[l] += 1;
    }
    total
}

/// Log marginal of a cell's counts as a sequential predictive product, in
/// ascending value order.
fn cell_sequential(kind_stats: SuffStats, counts: &[u32], hyper: &Hyper) -> f64 {
    let mut stats = kind_stats;
    let mut total = 0.0;
    for (v, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            total += stats.logp_predictive(hyper, v as u32).expect("conjugate cell");
            stats.incorporate(v as u32).expect("value in codomain");
        }
    }
    total
}

/// Per-block enumeration result.
#[derive(Debug, Clone)]
struct BlockResult {
    log_z: f64,
    /// Per domain: referenced entities, and their pairwise co-seating
    /// probabilities under this block's posterior.
    coseat: BTreeMap<DomainId, (Vec<EntityId>, Vec<Vec<f64>>)>,
}

struct Enumerator<'a> {
    ds: &'a Dataset,
    config: &'a ModelConfig,
    cache: BTreeMap<Vec<RelationId>, BlockResult>,
}

impl<'a> Enumerator<'a> {
    fn referenced(&self, relations: &[RelationId]) -> BTreeMap<DomainId, Vec<EntityId>> {
        let mut out: BTreeMap<DomainId, BTreeSet<EntityId>> = BTreeMap::new();
        for &k in relations {
            let sig = self.ds.system.relation(k);
            for &d in &sig.domains {
                out.entry(d).or_default();
            }
            for obs in self.ds.store.observations(k) {
                for (&d, &e) in sig.domains.iter().zip(obs.tuple.iter()) {
                    out.get_mut(&d).unwrap().insert(e);
                }
            }
        }
        out.into_iter().map(|(d, s)| (d, s.into_iter().collect())).collect()
    }

    fn block_size(&self, relations: &[RelationId]) -> u128 {
        self.referenced(relations).values().map(|es| bell(es.len())).fold(1u128, |a, b| a.saturating_mul(b))
    }

    fn block(&mut self, relations: &[RelationId]) -> &BlockResult {
        if !self.cache.contains_key(relations) {
            let result = self.compute_block(relations);
            self.cache.insert(relations.to_vec(), result);
        }
        &self.cache[relations]
    }

    /// Joint log score of one block configuration: entity CRPs plus cells.
    fn block_config_logp(
        &self,
        relations: &[RelationId],
        entities: &BTreeMap<DomainId, Vec<EntityId>>,
        labels: &BTreeMap<DomainId, &Vec<usize>>,
    ) -> f64 {
        let mut total = 0.0;
        for (&d, l) in labels {
            total += crp_sequential(l, self.config.entity_gamma[d]);
        }
        let position: BTreeMap<DomainId, BTreeMap<EntityId, usize>> = entities
            .iter()
            .map(|(&d, es)| (d, es.iter().enumerate().map(|(i, &e)| (e, i)).collect()))
            .collect();
        for &k in relations {
            let sig = self.ds.system.relation(k);
            let card = sig.kind.cardinality();
            let mut cells: BTreeMap<Vec<usize>, Vec<u32>> = BTreeMap::new();
            for obs in self.ds.store.observations(k) {
                let key: Vec<usize> = sig
                    .domains
                    .iter()
                    .zip(obs.tuple.iter())
                    .map(|(d, e)| labels[d][position[d][e]])
                    .collect();
                cells.entry(key).or_insert_with(|| vec![0; card])[obs.value as usize] += 1;
            }
            for counts in cells.values() {
                total += cell_sequential(SuffStats::empty(sig.kind), counts, &self.config.likelihood_hypers[k]);
            }
        }
        total
    }

    fn compute_block(&self, relations: &[RelationId]) -> BlockResult {
        let entities = self.referenced(relations);
        let domains: Vec<DomainId> = entities.keys().copied().collect();
        let rgs: Vec<Vec<Vec<usize>>> = domains.iter().map(|d| restricted_growth_strings(entities[d].len())).collect();
        let total: usize = rgs.iter().map(Vec::len).product();
        let mut logps = Vec::with_capacity(total);
        // Mixed-radix decode of a flat index, last domain fastest.
        let decode = |flat: usize| {
            let mut idx = vec![0usize; domains.len()];
            let mut rem = flat;
            for i in (0..domains.len()).rev() {
                idx[i] = rem % rgs[i].len();
                rem /= rgs[i].len();
            }
            idx
        };
        for flat in 0..total {
            let idx = decode(flat);
            let labels: BTreeMap<DomainId, &Vec<usize>> =
                domains.iter().zip(&idx).enumerate().map(|(i, (&d, &j))| (d, &rgs[i][j])).collect();
            logps.push(self.block_config_logp(relations, &entities, &labels));
        }
        let log_z = logsumexp(&logps);
        let mut coseat = BTreeMap::new();
        for (i, &d) in domains.iter().enumerate() {
            let n = entities[&d].len();
            let mut m = vec![vec![0.0; n]; n];
            for (flat, lp) in logps.iter().enumerate() {
                let w = (lp - log_z).exp();
                let l = &rgs[i][decode(flat)[i]];
                for a in 0..n {
                    for b in 0..n {
                        if l[a] == l[b] {
                            m[a][b] += w;
                        }
                    }
                }
            }
            coseat.insert(d, (entities[&d].clone(), m));
        }
        BlockResult { log_z, coseat }
    }
}

/// Exact posterior summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationReport {
    /// Every relation partition (canonical blocks) with its posterior
    /// probability, in restricted-growth-string order.
    pub relation_partitions: Vec<(Vec<Vec<RelationId>>, f64)>,
    /// `relation_pairs[k][k']`: probability that two relations share a block.
    pub relation_pairs: Vec<Vec<f64>>,
    /// Per (domain, context relation): probability that two entities share a
    /// table in the block holding the context relation. Entities the block
    /// does not reference count as unseated (0 off the diagonal).
    pub entity_pairs: BTreeMap<(DomainId, RelationId), Vec<Vec<f64>>>,
    /// Log marginal probability of all observations.
    pub log_evidence: f64,
    /// Number of joint configurations summed over.
    pub configurations: u128,
}

impl EnumerationReport {
    pub fn probability_of(&self, blocks: &[Vec<RelationId>]) -> f64 {
        let mut want: Vec<Vec<RelationId>> = blocks.iter().map(|b| { let mut b = b.clone(); b.sort(); b }).collect();
        want.sort();
        self.relation_partitions.iter().find(|(p, _)| *p == want).map_or(0.0, |x| x.1)
    }

    /// CSV with one `partition,probability` line per relation partition.
    pub fn to_csv(&self, system: &RelationalSystem) -> String {
        let mut out = String::from("partition,probability\n");
        for (blocks, p) in &self.relation_partitions {
            out.push_str(&format!("\"{}\",{p}\n", format_relation_blocks(system, blocks)));
        }
        out
    }
}

fn blocks_of(labels: &[usize]) -> Vec<Vec<RelationId>> {
    let mut blocks: Vec<Vec<RelationId>> = Vec::new();
    for (k, &l) in labels.iter().enumerate() {
        if l == blocks.len() {
            blocks.push(Vec::new());
        }
        blocks[l].push(k);
    }
    blocks
}

fn relation_labelings(ds: &Dataset, config: &ModelConfig) -> Vec<Vec<usize>> {
    let m = ds.system.num_relations();
    if config.mode.learns_structure() {
        restricted_growth_strings(m)
    } else {
        vec![vec![0; m]]
    }
}

/// Exact posterior over relation partitions and entity co-clustering, with
/// hyperparameters held at `config`'s values.
pub fn enumerate_posterior(dataset: &Dataset, config: &ModelConfig) -> Result<EnumerationReport, OracleError> {
    for r in dataset.system.relations() {
        if !r.kind.is_conjugate() {
            return Err(OracleError::Nonconjugate(r.name.clone()));
        }
    }
    let ds = Dataset::new(dataset.system.clone(), dataset.store.canonicalized(&dataset.system));
    let mut en = Enumerator { ds: &ds, config, cache: BTreeMap::new() };
    let labelings = relation_labelings(&ds, config);
    let mut configurations: u128 = 0;
    for l in &labelings {
        let size = blocks_of(l).iter().map(|b| en.block_size(b)).fold(1u128, |a, b| a.saturating_mul(b));
        configurations = configurations.saturating_add(size);
        if configurations > MAX_CONFIGURATIONS {
            return Err(OracleError::TooLarge(configurations));
        }
    }
    let mut weights = Vec::with_capacity(labelings.len());
    for l in &labelings {
        let outer = if config.mode.learns_structure() { crp_sequential(l, config.gamma0) } else { 0.0 };
        let inner: f64 = blocks_of(l).iter().map(|b| en.block(b).log_z).sum();
        weights.push(outer + inner);
    }
    let log_evidence = logsumexp(&weights);
    let probs: Vec<f64> = weights.iter().map(|w| (w - log_evidence).exp()).collect();

    let m = ds.system.num_relations();
    let mut relation_pairs = vec![vec![0.0; m]; m];
    let mut entity_pairs: BTreeMap<(DomainId, RelationId), Vec<Vec<f64>>> = BTreeMap::new();
    for k in 0..m {
        for &d in &ds.system.relation(k).domains {
            let n = ds.store.num_entities(d);
            entity_pairs.entry((d, k)).or_insert_with(|| vec![vec![0.0; n]; n]);
        }
    }
    for (l, &p) in labelings.iter().zip(&probs) {
        for a in 0..m {
            for b in 0..m {
                if l[a] == l[b] {
                    relation_pairs[a][b] += p;
                }
            }
        }
        for block in blocks_of(l) {
            let result = en.block(&block).clone();
            for &k in &block {
                for (&d, (es, coseat)) in &result.coseat {
                    let Some(out) = entity_pairs.get_mut(&(d, k)) else { continue };
                    for (i, &a) in es.iter().enumerate() {
                        for (j, &b) in es.iter().enumerate() {
                            out[a][b] += p * coseat[i][j];
                        }
                    }
                }
            }
        }
    }
    // Report in the caller's entity ids.
    for ((d, _), matrix) in entity_pairs.iter_mut() {
        let n = matrix.len();
        let map: Vec<EntityId> = (0..n)
            .map(|e| ds.store.interner(*d).get(dataset.store.entity_name(*d, e)).expect("same entity set"))
            .collect();
        let canonical = matrix.clone();
        for a in 0..n {
            for b in 0..n {
                matrix[a][b] = if a == b { 1.0 } else { canonical[map[a]][map[b]] };
            }
        }
    }
    let relation_partitions = labelings.iter().map(|l| blocks_of(l)).zip(probs).collect();
    Ok(EnumerationReport { relation_partitions, relation_pairs, entity_pairs, log_evidence, configurations })
}

/// Exact posterior predictive of a query row: the evidence ratio of the data
/// with and without the row's cells.
pub fn exact_fresh_row_logp(dataset: &Dataset, config: &ModelConfig, row: &QueryRow) -> Result<f64, OracleError> {
    let system = &dataset.system;
    let mut store = dataset.store.clone();
    let mut fresh_ids: BTreeMap<(DomainId, usize), EntityId> = BTreeMap::new();
    for (&d, names) in &row.fresh {
        for (j, name) in names.iter().enumerate() {
            fresh_ids.insert((d, j), store.add_entity(d, &format!("~{name}")));
        }
    }
    for cell in &row.cells {
        let sig = system.relation(cell.relation);
        let tuple = sig
            .domains
            .iter()
            .zip(&cell.args)
            .map(|(&d, &arg)| match arg {
                EntityArg::Known(e) => e,
                EntityArg::Fresh(j) => fresh_ids[&(d, j)],
            })
            .collect();
        store
            .insert(system, cell.relation, tuple, cell.value)
            .map_err(|_| OracleError::DuplicateCell(sig.name.clone()))?;
    }
    let with_row = Dataset::new(system.clone(), store);
    let joint = enumerate_posterior(&with_row, config)?.log_evidence;
    let base = enumerate_posterior(dataset, config)?.log_evidence;
    Ok(joint - base)
}

/// Log joint of one fully specified configuration, by the oracle's
/// sequential route: relation blocks `blocks`, and per block the table
/// label of every referenced entity.
pub fn configuration_logp(
    dataset: &Dataset,
    config: &ModelConfig,
    blocks: &[Vec<RelationId>],
    seating: &[BTreeMap<DomainId, BTreeMap<EntityId, usize>>],
) -> f64 {
    let en = Enumerator { ds: dataset, config, cache: BTreeMap::new() };
    let m = dataset.system.num_relations();
    let mut labels = vec![0usize; m];
    for (b, block) in blocks.iter().enumerate() {
        block.iter().for_each(|&k| labels[k] = b);
    }
    let mut total = if config.mode.learns_structure() { crp_sequential(&relabel(&labels), config.gamma0) } else { 0.0 };
    for (block, seats) in blocks.iter().zip(seating) {
        let entities = en.referenced(block);
        let owned: BTreeMap<DomainId, Vec<usize>> =
            entities.iter().map(|(&d, es)| (d, relabel(&es.iter().map(|e| seats[&d][e]).collect::<Vec<_>>()))).collect();
        let refs: BTreeMap<DomainId, &Vec<usize>> = owned.iter().map(|(&d, l)| (d, l)).collect();
        total += en.block_config_logp(block, &entities, &refs);
    }
    total
}

/// Relabels arbitrary labels into first-appearance order.
fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let n = map.len();
            *map.entry(*l).or_insert(n)
        })
        .collect()
}
