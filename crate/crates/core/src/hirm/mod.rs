//! The full hierarchical model and its Gibbs scan.
//!
//! A scan resamples, in order: the block of every relation; every entity of
//! every subsystem; every nonconjugate cell parameter; then, when enabled,
//! every hyperparameter on a log-spaced grid.

mod generate;
mod hypers;
mod state_file;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::irm::{CellKey, RelationProposal, Subsystem};
use crate::likelihood::Hyper;
use crate::math::sample_log_weights;
use crate::partition::{CrpPartition, TableId};
use crate::schema::{Dataset, DomainId, EntityId, RelationId, RelationalSystem};

pub use generate::{forward_dataset, full_tuples, sample_latent_prior};
pub use hypers::resample_concentration;
pub use state_file::{deserialize, serialize, BlockFile, CellTheta, DomainFile, HyperFile, StateFile, StateFileError, STATE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Relations partitioned by a CRP.
    Hirm,
    /// All relations pinned to one block.
    Irm,
    /// One block over unary relations of a single shared domain.
    Dpmm,
}

impl Mode {
    pub fn learns_structure(self) -> bool {
        matches!(self, Mode::Hirm)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hirm" => Ok(Mode::Hirm),
            "irm" => Ok(Mode::Irm),
            "dpmm" => Ok(Mode::Dpmm),
            other => Err(format!("unknown mode `{other}` (expected hirm, irm or dpmm)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum HirmError {
    #[error("dpmm mode needs every relation to be unary on one shared domain")]
    NotDpmm,
    #[error("configuration has {got} likelihood hyperparameters for {expected} relations")]
    HyperCount { expected: usize, got: usize },
    #[error("hyperparameters for relation `{0}` do not match its likelihood")]
    HyperKind(String),
    #[error("concentration parameters must be positive")]
    BadConcentration,
    #[error("inconsistent latent state: {0}")]
    Inconsistent(String),
}

/// Model settings that stay fixed while a chain runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub gamma0: f64,
    /// Initial concentration of each domain's partition in a new subsystem.
    pub entity_gamma: Vec<f64>,
    pub likelihood_hypers: Vec<Hyper>,
    pub hyper_kernel: bool,
}

impl ModelConfig {
    pub fn new(system: &RelationalSystem, mode: Mode) -> Self {
        Self {
            mode,
            gamma0: 1.0,
            entity_gamma: vec![1.0; system.num_domains()],
            likelihood_hypers: system.relations().iter().map(|r| Hyper::default_for(r.kind)).collect(),
            hyper_kernel: true,
        }
    }

    pub fn with_hyper_kernel(mut self, on: bool) -> Self {
        self.hyper_kernel = on;
        self
    }

    pub fn with_gamma0(mut self, gamma0: f64) -> Self {
        self.gamma0 = gamma0;
        self
    }

    fn validate(&self, system: &RelationalSystem) -> Result<(), HirmError> {
        if self.likelihood_hypers.len() != system.num_relations() {
            return Err(HirmError::HyperCount {
                expected: system.num_relations(),
                got: self.likelihood_hypers.len(),
            });
        }
        for (r, h) in system.relations().iter().zip(&self.likelihood_hypers) {
            let ok = matches!(
                (r.kind, h),
                (crate::LikelihoodKind::Bernoulli, Hyper::Bernoulli { .. })
                    | (crate::LikelihoodKind::Categorical(_), Hyper::Categorical { .. })
                    | (crate::LikelihoodKind::BernoulliNonconjugate, Hyper::NonConjugate { .. })
            );
            if !ok {
                return Err(HirmError::HyperKind(r.name.clone()));
            }
        }
        if !(self.gamma0 > 0.0) || self.entity_gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(HirmError::BadConcentration);
        }
        if self.entity_gamma.len() != system.num_domains() {
            return Err(HirmError::BadConcentration);
        }
        if self.mode == Mode::Dpmm {
            let first = system.relation(0).domains[0];
            if system.relations().iter().any(|r| r.domains.len() != 1 || r.domains[0] != first) {
                return Err(HirmError::NotDpmm);
            }
        }
        Ok(())
    }
}

/// Label-free description of a latent configuration, in canonical order:
/// blocks by smallest relation id, clusters by smallest entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub blocks: Vec<LatentBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub relations: Vec<RelationId>,
    pub domains: BTreeMap<DomainId, LatentDomain>,
    /// Nonconjugate cell parameters, keyed by cluster indexes into `domains`.
    pub thetas: BTreeMap<RelationId, BTreeMap<Vec<usize>, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDomain {
    pub gamma: f64,
    pub clusters: Vec<Vec<EntityId>>,
}

/// Full latent state of one chain.
#[derive(Debug, Clone)]
pub struct HirmState {
    dataset: Arc<Dataset>,
    config: ModelConfig,
    relation_partition: CrpPartition,
    subsystems: BTreeMap<TableId, Subsystem>,
    hypers: Vec<Hyper>,
    rng: ChaCha8Rng,
    seed: u64,
    scan_count: u64,
}

impl HirmState {
    /// Samples an initial state from the prior and incorporates all data.
    pub fn init_from_prior(dataset: Arc<Dataset>, config: ModelConfig, seed: u64) -> Result<Self, HirmError> {
        config.validate(&dataset.system)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = dataset.system.num_relations();
        let relation_partition = if config.mode.learns_structure() {
            CrpPartition::sample(m, config.gamma0, &mut rng)
        } else {
            let mut p = CrpPartition::new(config.gamma0);
            (0..m).for_each(|k| p.seat(k, 0).unwrap());
            p
        };
        let mut subsystems = BTreeMap::new();
        for (t, _) in relation_partition.tables() {
            let members: Vec<RelationId> =
                relation_partition.items().filter(|&(_, tt)| tt == t).map(|(k, _)| k).collect();
            subsystems.insert(t, Subsystem::init_from_prior(&dataset, &members, &config.entity_gamma, &mut rng));
        }
        let hypers = config.likelihood_hypers.clone();
        Ok(Self { dataset, config, relation_partition, subsystems, hypers, rng, seed, scan_count: 0 })
    }

    /// Rebuilds a state in a given latent configuration.
    pub fn from_latent(
        dataset: Arc<Dataset>,
        config: ModelConfig,
        latent: &Latent,
        seed: u64,
        scan_count: u64,
    ) -> Result<Self, HirmError> {
        config.validate(&dataset.system)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(scan_count);
        let system = &dataset.system;
        let mut relation_partition = CrpPartition::new(config.gamma0);
        let mut subsystems = BTreeMap::new();
        for (b, block) in latent.blocks.iter().enumerate() {
            if block.relations.is_empty() {
                return Err(HirmError::Inconsistent("empty relation block".into()));
            }
            let mut sub = Subsystem::new();
            let mut gammas = config.entity_gamma.clone();
            for (&d, dom) in &block.domains {
                if d >= system.num_domains() || !(dom.gamma > 0.0) {
                    return Err(HirmError::Inconsistent(format!("bad domain entry {d}")));
                }
                gammas[d] = dom.gamma;
            }
            for &k in &block.relations {
                if k >= system.num_relations() {
                    return Err(HirmError::Inconsistent(format!("unknown relation {k}")));
                }
                relation_partition
                    .seat(k, b)
                    .map_err(|_| HirmError::Inconsistent(format!("relation `{}` listed twice", system.relation(k).name)))?;
                sub.add_relation(&dataset, k, &gammas);
            }
            for (&d, dom) in &block.domains {
                if sub.partition(d).is_none() {
                    return Err(HirmError::Inconsistent(format!(
                        "domain `{}` is not touched by its block",
                        system.domains()[d]
                    )));
                }
                for (c, members) in dom.clusters.iter().enumerate() {
                    if members.is_empty() {
                        return Err(HirmError::Inconsistent("empty cluster".into()));
                    }
                    for &e in members {
                        if e >= dataset.store.num_entities(d) || sub.table_of(d, e).is_some() {
                            return Err(HirmError::Inconsistent(format!("bad entity {e} in domain {d}")));
                        }
                        sub.seat_entity(&dataset, d, e, c, dom.gamma);
                    }
                }
            }
            for &k in &block.relations {
                for obs in 0..dataset.store.observations(k).len() {
                    sub.incorporate_tuple(&dataset, k, obs, &mut rng).map_err(|e| {
                        HirmError::Inconsistent(format!("relation `{}`: {e}", system.relation(k).name))
                    })?;
                }
                if let Some(thetas) = block.thetas.get(&k) {
                    let cells = sub.cells_mut(k).unwrap();
                    for (key, &theta) in thetas {
                        let key: CellKey = key.iter().copied().collect();
                        if let Some(cell) = cells.get_mut(&key) {
                            cell.set_theta(theta).map_err(|e| HirmError::Inconsistent(e.to_string()))?;
                        }
                    }
                }
            }
            sub.audit(&dataset).map_err(HirmError::Inconsistent)?;
            subsystems.insert(b, sub);
        }
        if relation_partition.num_items() != system.num_relations() {
            return Err(HirmError::Inconsistent("some relations belong to no block".into()));
        }
        if !config.mode.learns_structure() && relation_partition.num_tables() != 1 {
            return Err(HirmError::Inconsistent("pinned modes need exactly one relation block".into()));
        }
        let hypers = config.likelihood_hypers.clone();
        Ok(Self { dataset, config, relation_partition, subsystems, hypers, rng, seed, scan_count })
    }

    /// Canonical snapshot of the latent configuration.
    pub fn latent(&self) -> Latent {
        let mut blocks: Vec<(RelationId, LatentBlock)> = Vec::new();
        for sub in self.subsystems.values() {
            let relations: Vec<RelationId> = sub.relations().iter().copied().collect();
            let mut domains = BTreeMap::new();
            let mut relabel: BTreeMap<DomainId, BTreeMap<TableId, usize>> = BTreeMap::new();
            for (&d, p) in sub.partitions() {
                let mut map = BTreeMap::new();
                let mut clusters: Vec<Vec<EntityId>> = Vec::new();
                for (e, t) in p.items() {
                    let c = *map.entry(t).or_insert_with(|| {
                        clusters.push(Vec::new());
                        clusters.len() - 1
                    });
                    clusters[c].push(e);
                }
                relabel.insert(d, map);
                domains.insert(d, LatentDomain { gamma: p.concentration(), clusters });
            }
            let mut thetas = BTreeMap::new();
            for &k in &relations {
                let sig = self.dataset.system.relation(k);
                if sig.kind.is_conjugate() {
                    continue;
                }
                let mut per: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
                for (key, cell) in sub.cells(k).unwrap() {
                    let canon: Vec<usize> =
                        sig.domains.iter().zip(key.iter()).map(|(d, t)| relabel[d][t]).collect();
                    per.insert(canon, cell.theta().unwrap());
                }
                thetas.insert(k, per);
            }
            blocks.push((relations[0], LatentBlock { relations, domains, thetas }));
        }
        blocks.sort_by_key(|b| b.0);
        Latent { blocks: blocks.into_iter().map(|b| b.1).collect() }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn system(&self) -> &RelationalSystem {
        &self.dataset.system
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scan_count(&self) -> u64 {
        self.scan_count
    }

    pub fn gamma0(&self) -> f64 {
        self.relation_partition.concentration()
    }

    pub fn likelihood_hypers(&self) -> &[Hyper] {
        &self.hypers
    }

    pub fn relation_partition(&self) -> &CrpPartition {
        &self.relation_partition
    }

    pub fn subsystems(&self) -> &BTreeMap<TableId, Subsystem> {
        &self.subsystems
    }

    /// Number of relation blocks.
    pub fn num_blocks(&self) -> usize {
        self.subsystems.len()
    }

    pub fn block_of(&self, k: RelationId) -> TableId {
        self.relation_partition.table_of(k).expect("every relation is seated")
    }

    /// Subsystem holding relation `k`.
    pub fn subsystem_of(&self, k: RelationId) -> &Subsystem {
        &self.subsystems[&self.block_of(k)]
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Relation blocks as lists of relation ids, canonical order.
    pub fn relation_blocks(&self) -> Vec<Vec<RelationId>> {
        self.relation_partition.blocks()
    }

    /// Log joint of the latent state and data, collapsed where conjugate.
    /// Pinned modes carry no relation-partition term.
    pub fn logp_full(&self) -> f64 {
        let outer = if self.config.mode.learns_structure() { self.relation_partition.log_prob() } else { 0.0 };
        outer + self.subsystems.values().map(|s| s.logp_score(&self.hypers)).sum::<f64>()
    }

    /// Auxiliary-variable Gibbs move for the block of relation `k`.
    pub fn gibbs_relation(&mut self, k: RelationId) {
        if !self.config.mode.learns_structure() {
            return;
        }
        let ds = Arc::clone(&self.dataset);
        let current = self.block_of(k);
        let singleton = self.relation_partition.count(current) == 1;
        let gammas = self.config.entity_gamma.clone();

        enum Cand {
            Stay,
            Existing(TableId, RelationProposal),
            Fresh(Box<Subsystem>, RelationProposal),
        }
        let mut cands: Vec<Cand> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let gamma0_ln = self.relation_partition.concentration().ln();
        let ids: Vec<TableId> = self.subsystems.keys().copied().collect();
        for id in ids {
            let size = self.relation_partition.count(id) as f64;
            if id == current {
                let crp = if singleton { gamma0_ln } else { (size - 1.0).ln() };
                weights.push(crp + self.subsystems[&id].relation_score(&self.hypers, k));
                cands.push(Cand::Stay);
            } else {
                let sub = self.subsystems.get_mut(&id).unwrap();
                let proposal = sub.propose_relation(&ds, &self.hypers, k, &gammas, &mut self.rng);
                weights.push(size.ln() + proposal.logp);
                cands.push(Cand::Existing(id, proposal));
            }
        }
        if !singleton {
            let (sub, proposal) = Subsystem::auxiliary(&ds, &self.hypers, k, &gammas, &mut self.rng);
            weights.push(gamma0_ln + proposal.logp);
            cands.push(Cand::Fresh(Box::new(sub), proposal));
        }
        let choice = sample_log_weights(&weights, &mut self.rng);

        let mut chosen = None;
        for (i, cand) in cands.into_iter().enumerate() {
            if i == choice {
                chosen = Some(cand);
            } else if let Cand::Existing(id, proposal) = cand {
                self.subsystems.get_mut(&id).unwrap().retract(proposal);
            }
        }
        if matches!(chosen, Some(Cand::Stay)) {
            return;
        }
        let chosen = chosen.expect("a candidate was chosen");
        let old = self.subsystems.get_mut(&current).unwrap();
        old.detach_relation(&ds, k).expect("relation is a member of its block");
        if old.relations().is_empty() {
            self.subsystems.remove(&current);
        }
        self.relation_partition.unseat(k).unwrap();
        match chosen {
            Cand::Existing(id, proposal) => {
                self.subsystems.get_mut(&id).unwrap().accept(&ds, proposal);
                self.relation_partition.seat(k, id).unwrap();
            }
            Cand::Fresh(mut sub, proposal) => {
                sub.accept(&ds, proposal);
                let id = self.relation_partition.fresh_table();
                self.relation_partition.seat(k, id).unwrap();
                self.subsystems.insert(id, *sub);
            }
            Cand::Stay => unreachable!(),
        }
    }

    /// One MH move on a nonconjugate cell of relation `k` in block `block`.
    pub fn mh_theta(&mut self, block: TableId, k: RelationId, key: &CellKey) -> bool {
        let hypers = &self.hypers;
        match self.subsystems.get_mut(&block) {
            Some(sub) => sub.mh_theta(hypers, k, key, &mut self.rng),
            None => false,
        }
    }

    /// One full scan. Returns the new scan count.
    pub fn gibbs_scan(&mut self) -> u64 {
        let ds = Arc::clone(&self.dataset);
        if self.config.mode.learns_structure() {
            for k in 0..ds.system.num_relations() {
                self.gibbs_relation(k);
            }
        }
        for sub in self.subsystems.values_mut() {
            sub.gibbs_entities(&ds, &self.hypers, &mut self.rng);
            sub.mh_thetas(&ds, &self.hypers, &mut self.rng);
        }
        if self.config.hyper_kernel {
            self.transition_hypers();
        }
        self.scan_count += 1;
        self.scan_count
    }

    /// Gridded Gibbs over every concentration and likelihood hyperparameter.
    pub fn transition_hypers(&mut self) {
        hypers::transition_all(self);
    }

    /// Bookkeeping audit of every subsystem and of block membership.
    pub fn audit(&self) -> Result<(), String> {
        let tables: Vec<TableId> = self.relation_partition.table_ids();
        if tables != self.subsystems.keys().copied().collect::<Vec<_>>() {
            return Err("subsystems differ from relation partition tables".into());
        }
        for (id, sub) in &self.subsystems {
            let members: Vec<RelationId> =
                self.relation_partition.items().filter(|&(_, t)| t == *id).map(|(k, _)| k).collect();
            if members != sub.relations().iter().copied().collect::<Vec<_>>() {
                return Err(format!("block {id}: membership differs from relation partition"));
            }
            sub.audit(&self.dataset)?;
        }
        Ok(())
    }

    /// Human-readable relation partition, e.g. `{R1,R3}{R2}`.
    pub fn relation_partition_string(&self) -> String {
        format_relation_blocks(&self.dataset.system, &self.relation_blocks())
    }

    pub(crate) fn parts_mut(&mut self) -> (&Dataset, &mut CrpPartition, &mut BTreeMap<TableId, Subsystem>, &mut Vec<Hyper>, &mut ChaCha8Rng) {
        (&self.dataset, &mut self.relation_partition, &mut self.subsystems, &mut self.hypers, &mut self.rng)
    }
}

/// Formats blocks of relation ids as `{A,B}{C}`.
pub fn format_relation_blocks(system: &RelationalSystem, blocks: &[Vec<RelationId>]) -> String {
    blocks
        .iter()
        .map(|b| {
            let names: Vec<&str> = b.iter().map(|&k| system.relation(k).name.as_str()).collect();
            format!("{{{}}}", names.join(","))
        })
        .collect()
}
