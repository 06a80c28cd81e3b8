//! One subsystem of the hierarchical model: an infinite relational model over
//! the relations assigned to it.
//!
//! Each participating domain carries its own CRP partition, holding only the
//! entities that appear in at least one incorporated tuple. Cells are keyed by
//! the tuple of table ids of a tuple's entities and exist only while they hold
//! data.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::StandardNormal;
use rand::Rng;
use smallvec::SmallVec;
use thiserror::Error;

use crate::likelihood::{Hyper, SuffStats};
use crate::math::sample_log_weights;
use crate::partition::{CrpPartition, TableId};
use crate::schema::{Dataset, DomainId, EntityId, RelationId};

/// Table ids of a tuple's entities, one per argument position.
pub type CellKey = SmallVec<[TableId; 4]>;

/// Placeholder for the entity being moved inside a cell-key template.
const MOVING: TableId = TableId::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IrmError {
    #[error("relation {0} is not a member of this subsystem")]
    NotMember(RelationId),
    #[error("relation {relation} observation {observation} is already incorporated")]
    AlreadyIncorporated { relation: RelationId, observation: usize },
    #[error("relation {relation} observation {observation} is not incorporated")]
    NotIncorporated { relation: RelationId, observation: usize },
    #[error("entity {entity} of domain {domain} is not seated")]
    Unseated { domain: DomainId, entity: EntityId },
}

/// Cells one relation would occupy in a candidate subsystem, together with
/// the entities seated tentatively to evaluate it.
#[derive(Debug, Clone)]
pub struct RelationProposal {
    pub relation: RelationId,
    pub cells: BTreeMap<CellKey, SuffStats>,
    pub logp: f64,
    seated: Vec<(DomainId, EntityId)>,
    created_domains: Vec<DomainId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    relations: BTreeSet<RelationId>,
    partitions: BTreeMap<DomainId, CrpPartition>,
    /// Per domain, number of incorporated tuple positions naming each entity.
    refcounts: BTreeMap<DomainId, Vec<u32>>,
    cells: BTreeMap<RelationId, BTreeMap<CellKey, SuffStats>>,
    incorporated: BTreeMap<RelationId, Vec<bool>>,
}

impl Default for Subsystem {
    fn default() -> Self {
        Self::new()
    }
}

impl Subsystem {
    pub fn new() -> Self {
        Self {
            relations: BTreeSet::new(),
            partitions: BTreeMap::new(),
            refcounts: BTreeMap::new(),
            cells: BTreeMap::new(),
            incorporated: BTreeMap::new(),
        }
    }

    /// Builds a subsystem for `relations`, seating entities by the CRP
    /// predictive as their first observation arrives.
    pub fn init_from_prior<R: Rng + ?Sized>(
        ds: &Dataset,
        relations: &[RelationId],
        gammas: &[f64],
        rng: &mut R,
    ) -> Self {
        let mut sub = Self::new();
        for &k in relations {
            sub.add_relation(ds, k, gammas);
        }
        for &k in relations {
            for obs in 0..ds.store.observations(k).len() {
                sub.seat_tuple_from_prior(ds, k, obs, rng);
                sub.incorporate_tuple(ds, k, obs, rng).expect("fresh subsystem accepts every tuple");
            }
        }
        sub
    }

    pub fn relations(&self) -> &BTreeSet<RelationId> {
        &self.relations
    }

    pub fn contains_relation(&self, k: RelationId) -> bool {
        self.relations.contains(&k)
    }

    /// Domains touched by member relations, ascending.
    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.partitions.keys().copied()
    }

    pub fn partition(&self, d: DomainId) -> Option<&CrpPartition> {
        self.partitions.get(&d)
    }

    pub fn partition_mut(&mut self, d: DomainId) -> Option<&mut CrpPartition> {
        self.partitions.get_mut(&d)
    }

    pub fn partitions(&self) -> &BTreeMap<DomainId, CrpPartition> {
        &self.partitions
    }

    pub fn cells(&self, k: RelationId) -> Option<&BTreeMap<CellKey, SuffStats>> {
        self.cells.get(&k)
    }

    pub fn cells_mut(&mut self, k: RelationId) -> Option<&mut BTreeMap<CellKey, SuffStats>> {
        self.cells.get_mut(&k)
    }

    pub fn table_of(&self, d: DomainId, e: EntityId) -> Option<TableId> {
        self.partitions.get(&d).and_then(|p| p.table_of(e))
    }

    /// Registers `k` as a member without incorporating any data.
    pub fn add_relation(&mut self, ds: &Dataset, k: RelationId, gammas: &[f64]) {
        self.relations.insert(k);
        for &d in &ds.system.relation(k).domains {
            self.ensure_domain(ds, d, gammas[d]);
        }
        self.cells.entry(k).or_default();
        self.incorporated.entry(k).or_insert_with(|| vec![false; ds.store.observations(k).len()]);
    }

    fn ensure_domain(&mut self, ds: &Dataset, d: DomainId, gamma: f64) -> bool {
        if self.partitions.contains_key(&d) {
            return false;
        }
        self.partitions.insert(d, CrpPartition::new(gamma));
        self.refcounts.insert(d, vec![0; ds.store.num_entities(d)]);
        true
    }

    /// Seats any unseated entity of an observation by the CRP predictive.
    pub fn seat_tuple_from_prior<R: Rng + ?Sized>(
        &mut self,
        ds: &Dataset,
        k: RelationId,
        obs: usize,
        rng: &mut R,
    ) -> Vec<(DomainId, EntityId)> {
        let sig = ds.system.relation(k);
        let tuple = &ds.store.observations(k)[obs].tuple;
        let mut seated = Vec::new();
        for (&d, &e) in sig.domains.iter().zip(tuple.iter()) {
            let p = self.partitions.get_mut(&d).expect("relation domains are registered");
            if !p.contains(e) {
                p.seat_from_prior(e, rng);
                seated.push((d, e));
            }
        }
        seated
    }

    fn cell_key(&self, ds: &Dataset, k: RelationId, obs: usize) -> Result<CellKey, IrmError> {
        let sig = ds.system.relation(k);
        let tuple = &ds.store.observations(k)[obs].tuple;
        sig.domains
            .iter()
            .zip(tuple.iter())
            .map(|(&d, &e)| self.table_of(d, e).ok_or(IrmError::Unseated { domain: d, entity: e }))
            .collect()
    }

    /// Routes one observation into its cell. Entities must already be seated.
    pub fn incorporate_tuple<R: Rng + ?Sized>(
        &mut self,
        ds: &Dataset,
        k: RelationId,
        obs: usize,
        rng: &mut R,
    ) -> Result<(), IrmError> {
        if !self.relations.contains(&k) {
            return Err(IrmError::NotMember(k));
        }
        if self.incorporated[&k][obs] {
            return Err(IrmError::AlreadyIncorporated { relation: k, observation: obs });
        }
        let key = self.cell_key(ds, k, obs)?;
        let sig = ds.system.relation(k);
        let o = &ds.store.observations(k)[obs];
        self.cells
            .get_mut(&k)
            .unwrap()
            .entry(key)
            .or_insert_with(|| SuffStats::fresh(sig.kind, rng))
            .incorporate(o.value)
            .expect("stored values are in the codomain");
        for (&d, &e) in sig.domains.iter().zip(o.tuple.iter()) {
            self.refcounts.get_mut(&d).unwrap()[e] += 1;
        }
        self.incorporated.get_mut(&k).unwrap()[obs] = true;
        Ok(())
    }

    /// Like [`Subsystem::incorporate_tuple`] but reports the exact score delta
    /// under the given likelihood hyperparameters.
    pub fn incorporate_tuple_scored<R: Rng + ?Sized>(
        &mut self,
        ds: &Dataset,
        hypers: &[Hyper],
        k: RelationId,
        obs: usize,
        rng: &mut R,
    ) -> Result<f64, IrmError> {
        if !self.relations.contains(&k) {
            return Err(IrmError::NotMember(k));
        }
        let key = self.cell_key(ds, k, obs)?;
        let value = ds.store.observations(k)[obs].value;
        let before = self.cells[&k].get(&key).map(|c| match c.theta() {
            Some(theta) => crate::likelihood::logp_given_theta(value, theta).unwrap(),
            None => c.logp_predictive(&hypers[k], value).unwrap(),
        });
        self.incorporate_tuple(ds, k, obs, rng)?;
        Ok(match before {
            Some(d) => d,
            None => {
                let c = &self.cells[&k][&key];
                match c.theta() {
                    Some(theta) => crate::likelihood::logp_given_theta(value, theta).unwrap(),
                    None => c.logp_marginal(&hypers[k]).unwrap(),
                }
            }
        })
    }

    /// Removes one observation from its cell, deleting the cell if it empties.
    /// Entities left without any tuple are unseated.
    pub fn unincorporate_tuple(&mut self, ds: &Dataset, k: RelationId, obs: usize) -> Result<(), IrmError> {
        if !self.relations.contains(&k) {
            return Err(IrmError::NotMember(k));
        }
        if !self.incorporated[&k][obs] {
            return Err(IrmError::NotIncorporated { relation: k, observation: obs });
        }
        let key = self.cell_key(ds, k, obs)?;
        let sig = ds.system.relation(k);
        let o = &ds.store.observations(k)[obs];
        let cells = self.cells.get_mut(&k).unwrap();
        let cell = cells.get_mut(&key).expect("incorporated tuple has a cell");
        cell.unincorporate(o.value).expect("cell holds the value");
        if cell.is_empty() {
            cells.remove(&key);
        }
        for (&d, &e) in sig.domains.iter().zip(o.tuple.iter()) {
            let rc = &mut self.refcounts.get_mut(&d).unwrap()[e];
            *rc -= 1;
            if *rc == 0 {
                self.partitions.get_mut(&d).unwrap().unseat(e).expect("referenced entity is seated");
            }
        }
        self.incorporated.get_mut(&k).unwrap()[obs] = false;
        Ok(())
    }

    /// Log joint of the partitions and the data of member relations, with
    /// conjugate cells collapsed.
    pub fn logp_score(&self, hypers: &[Hyper]) -> f64 {
        let crp: f64 = self.partitions.values().map(CrpPartition::log_prob).sum();
        let cells: f64 = self.cells.iter().map(|(&k, cells)| Self::cells_score(cells, &hypers[k])).sum();
        crp + cells
    }

    /// Cell terms of relation `k` alone.
    pub fn relation_score(&self, hypers: &[Hyper], k: RelationId) -> f64 {
        self.cells.get(&k).map_or(0.0, |c| Self::cells_score(c, &hypers[k]))
    }

    fn cells_score(cells: &BTreeMap<CellKey, SuffStats>, hyper: &Hyper) -> f64 {
        cells.values().map(|c| c.logp_score(hyper)).sum()
    }

    /// Seated entities of a domain, ascending.
    pub fn entities(&self, d: DomainId) -> Vec<EntityId> {
        self.partitions.get(&d).map(|p| p.items().map(|(e, _)| e).collect()).unwrap_or_default()
    }

    /// Collapsed Gibbs step for one entity (auxiliary draws for nonconjugate
    /// cells). Returns the change in [`Subsystem::logp_score`].
    pub fn gibbs_entity<R: Rng + ?Sized>(
        &mut self,
        ds: &Dataset,
        hypers: &[Hyper],
        d: DomainId,
        e: EntityId,
        rng: &mut R,
    ) -> f64 {
        let Some(old) = self.table_of(d, e) else { return 0.0 };

        // Unique tuples touching e, each once even if e repeats inside it.
        let mut tuples: Vec<(RelationId, usize)> = ds
            .store
            .refs(d, e)
            .iter()
            .filter(|r| self.relations.contains(&r.relation))
            .map(|r| (r.relation, r.observation))
            .collect();
        tuples.dedup();
        tuples.sort_unstable();
        tuples.dedup();

        // Group e's data by (relation, key template), and take it out of the cells.
        let mut groups: BTreeMap<(RelationId, CellKey), SuffStats> = BTreeMap::new();
        let mut touched: Vec<(RelationId, CellKey)> = Vec::with_capacity(tuples.len());
        for &(k, obs) in &tuples {
            let sig = ds.system.relation(k);
            let o = &ds.store.observations(k)[obs];
            let mut template = CellKey::with_capacity(sig.arity());
            let mut key = CellKey::with_capacity(sig.arity());
            for (&dd, &ee) in sig.domains.iter().zip(o.tuple.iter()) {
                let t = self.partitions[&dd].table_of(ee).expect("tuple entities are seated");
                key.push(t);
                template.push(if dd == d && ee == e { MOVING } else { t });
            }
            let cell = self.cells.get_mut(&k).unwrap().get_mut(&key).expect("incorporated tuple has a cell");
            cell.unincorporate(o.value).expect("cell holds the value");
            groups
                .entry((k, template))
                .or_insert_with(|| SuffStats::empty(sig.kind))
                .incorporate(o.value)
                .expect("stored values are in the codomain");
            touched.push((k, key));
        }
        let groups: Vec<((RelationId, CellKey), SuffStats)> = groups.into_iter().collect();
        // Distinct templates can only land in one cell when a relation names
        // domain `d` at several positions.
        let may_collide =
            self.relations.iter().any(|&k| ds.system.relation(k).domains.iter().filter(|&&x| x == d).count() > 1);

        let partition = self.partitions.get_mut(&d).unwrap();
        partition.unseat(e).expect("entity is seated");
        let was_singleton = partition.count(old) == 0;
        let mut candidates: Vec<(TableId, f64)> =
            partition.tables().map(|(t, n)| (t, (n as f64).ln())).collect();
        let fresh = if was_singleton { old } else { partition.fresh_table() };
        candidates.push((fresh, partition.concentration().ln()));

        let mut aux_thetas: Vec<Vec<(RelationId, CellKey, f64)>> = Vec::with_capacity(candidates.len());
        let mut weights: Vec<f64> = Vec::with_capacity(candidates.len());
        let mut merged: Vec<((RelationId, CellKey), SuffStats)> = Vec::new();
        for &(t, crp) in &candidates {
            let mut total = crp;
            let mut drawn = Vec::new();
            let resolve = |tpl: &CellKey| -> CellKey { tpl.iter().map(|&x| if x == MOVING { t } else { x }).collect() };
            let iter: &[((RelationId, CellKey), SuffStats)] = if may_collide {
                merged.clear();
                for ((k, tpl), s) in &groups {
                    merged.push(((*k, resolve(tpl)), s.clone()));
                }
                merged.sort_by(|a, b| a.0.cmp(&b.0));
                let mut out: Vec<((RelationId, CellKey), SuffStats)> = Vec::with_capacity(merged.len());
                for (key, s) in merged.drain(..) {
                    match out.last_mut() {
                        Some((last, acc)) if *last == key => acc.merge(&s).unwrap(),
                        _ => out.push((key, s)),
                    }
                }
                merged = out;
                &merged
            } else {
                &groups
            };
            for ((k, key_or_tpl), extra) in iter {
                let key = if may_collide { key_or_tpl.clone() } else { resolve(key_or_tpl) };
                let hyper = &hypers[*k];
                match self.cells[k].get(&key) {
                    Some(cell) => total += cell.logp_added(hyper, extra),
                    None => {
                        let kind = ds.system.relation(*k).kind;
                        let empty = SuffStats::fresh(kind, rng);
                        if let Some(theta) = empty.theta() {
                            drawn.push((*k, key.clone(), theta));
                        }
                        total += empty.logp_added(hyper, extra);
                    }
                }
            }
            weights.push(total);
            aux_thetas.push(drawn);
        }
        let choice = sample_log_weights(&weights, rng);
        let (new_table, _) = candidates[choice];
        // Old weight: the stay candidate.
        let old_idx = candidates.iter().position(|&(t, _)| t == old).expect("old table is a candidate");
        let delta = weights[choice] - weights[old_idx];

        self.partitions.get_mut(&d).unwrap().seat(e, new_table).expect("entity was unseated");
        for (k, key, theta) in aux_thetas.swap_remove(choice) {
            self.cells.get_mut(&k).unwrap().insert(key, SuffStats::nonconjugate(theta));
        }
        for &(k, obs) in &tuples {
            let sig = ds.system.relation(k);
            let o = &ds.store.observations(k)[obs];
            let key: CellKey = sig
                .domains
                .iter()
                .zip(o.tuple.iter())
                .map(|(&dd, &ee)| self.partitions[&dd].table_of(ee).unwrap())
                .collect();
            self.cells
                .get_mut(&k)
                .unwrap()
                .entry(key)
                .or_insert_with(|| SuffStats::empty(sig.kind))
                .incorporate(o.value)
                .expect("stored values are in the codomain");
        }
        for (k, key) in touched {
            let cells = self.cells.get_mut(&k).unwrap();
            if cells.get(&key).is_some_and(SuffStats::is_empty) {
                cells.remove(&key);
            }
        }
        delta
    }

    /// One pass of entity moves over every domain, ascending entity index.
    pub fn gibbs_entities<R: Rng + ?Sized>(&mut self, ds: &Dataset, hypers: &[Hyper], rng: &mut R) -> f64 {
        let mut delta = 0.0;
        let domains: Vec<DomainId> = self.domains().collect();
        for d in domains {
            for e in self.entities(d) {
                delta += self.gibbs_entity(ds, hypers, d, e, rng);
            }
        }
        delta
    }

    /// Metropolis-Hastings move on one nonconjugate cell parameter, with a
    /// Gaussian drift reflected into (0, 1). Returns whether it was accepted.
    pub fn mh_theta<R: Rng + ?Sized>(&mut self, hypers: &[Hyper], k: RelationId, key: &CellKey, rng: &mut R) -> bool {
        let sigma = match hypers[k] {
            Hyper::NonConjugate { sigma } => sigma,
            _ => return false,
        };
        let Some(cell) = self.cells.get_mut(&k).and_then(|c| c.get_mut(key)) else { return false };
        let theta = cell.theta().expect("nonconjugate cell");
        let z: f64 = rng.sample(StandardNormal);
        let proposal = reflect_unit(theta + sigma * z);
        let u: f64 = rng.random();
        if !(proposal > 0.0 && proposal < 1.0) {
            return false;
        }
        // Uniform prior and symmetric proposal: only the likelihood ratio remains.
        let log_ratio = cell.logp_data_given_theta(proposal) - cell.logp_data_given_theta(theta);
        if u.ln() < log_ratio {
            cell.set_theta(proposal).expect("proposal in range");
            true
        } else {
            false
        }
    }

    /// One MH move per nonconjugate cell of every member relation.
    pub fn mh_thetas<R: Rng + ?Sized>(&mut self, ds: &Dataset, hypers: &[Hyper], rng: &mut R) {
        let members: Vec<RelationId> = self
            .relations
            .iter()
            .copied()
            .filter(|&k| !ds.system.relation(k).kind.is_conjugate())
            .collect();
        for k in members {
            let keys: Vec<CellKey> = self.cells[&k].keys().cloned().collect();
            for key in keys {
                self.mh_theta(hypers, k, &key, rng);
            }
        }
    }

    /// Entity moves followed by parameter moves.
    pub fn sweep<R: Rng + ?Sized>(&mut self, ds: &Dataset, hypers: &[Hyper], rng: &mut R) {
        self.gibbs_entities(ds, hypers, rng);
        self.mh_thetas(ds, hypers, rng);
    }

    /// Scores relation `k` (not a member) against this subsystem's partitions.
    /// Entities of `k` missing here are seated by the CRP predictive; call
    /// [`Subsystem::retract`] unless the proposal is accepted.
    pub fn propose_relation<R: Rng + ?Sized>(
        &mut self,
        ds: &Dataset,
        hypers: &[Hyper],
        k: RelationId,
        gammas: &[f64],
        rng: &mut R,
    ) -> RelationProposal {
        debug_assert!(!self.relations.contains(&k));
        let sig = ds.system.relation(k);
        let mut created_domains = Vec::new();
        for &d in &sig.domains {
            if self.ensure_domain(ds, d, gammas[d]) {
                created_domains.push(d);
            }
        }
        let mut seated = Vec::new();
        let mut cells: BTreeMap<CellKey, SuffStats> = BTreeMap::new();
        for (obs, o) in ds.store.observations(k).iter().enumerate() {
            seated.extend(self.seat_tuple_from_prior(ds, k, obs, rng));
            let key: CellKey = sig.domains.iter().zip(o.tuple.iter()).map(|(&d, &e)| self.table_of(d, e).unwrap()).collect();
            cells
                .entry(key)
                .or_insert_with(|| SuffStats::fresh(sig.kind, rng))
                .incorporate(o.value)
                .expect("stored values are in the codomain");
        }
        let logp = Self::cells_score(&cells, &hypers[k]);
        RelationProposal { relation: k, cells, logp, seated, created_domains }
    }

    /// Undoes the tentative seating of a rejected proposal.
    pub fn retract(&mut self, proposal: RelationProposal) {
        for &(d, e) in proposal.seated.iter().rev() {
            self.partitions.get_mut(&d).unwrap().unseat(e).expect("tentatively seated");
        }
        for d in proposal.created_domains {
            self.partitions.remove(&d);
            self.refcounts.remove(&d);
        }
    }

    /// Makes `proposal.relation` a member using the proposal's cells.
    pub fn accept(&mut self, ds: &Dataset, proposal: RelationProposal) {
        let k = proposal.relation;
        self.relations.insert(k);
        let sig = ds.system.relation(k);
        for o in ds.store.observations(k) {
            for (&d, &e) in sig.domains.iter().zip(o.tuple.iter()) {
                self.refcounts.get_mut(&d).unwrap()[e] += 1;
            }
        }
        self.cells.insert(k, proposal.cells);
        self.incorporated.insert(k, vec![true; ds.store.observations(k).len()]);
    }

    /// Fresh subsystem holding only relation `k`, with entity partitions drawn
    /// from the CRP prior.
    pub fn auxiliary<R: Rng + ?Sized>(
        ds: &Dataset,
        hypers: &[Hyper],
        k: RelationId,
        gammas: &[f64],
        rng: &mut R,
    ) -> (Self, RelationProposal) {
        let mut sub = Self::new();
        let proposal = sub.propose_relation(ds, hypers, k, gammas, rng);
        (sub, proposal)
    }

    /// Removes member `k` and its cells. Entities no longer referenced are
    /// unseated and domains no longer touched are dropped.
    pub fn detach_relation(&mut self, ds: &Dataset, k: RelationId) -> Result<BTreeMap<CellKey, SuffStats>, IrmError> {
        if !self.relations.remove(&k) {
            return Err(IrmError::NotMember(k));
        }
        let sig = ds.system.relation(k);
        for o in ds.store.observations(k) {
            for (&d, &e) in sig.domains.iter().zip(o.tuple.iter()) {
                let rc = &mut self.refcounts.get_mut(&d).unwrap()[e];
                *rc -= 1;
                if *rc == 0 {
                    self.partitions.get_mut(&d).unwrap().unseat(e).expect("referenced entity is seated");
                }
            }
        }
        self.incorporated.remove(&k);
        let cells = self.cells.remove(&k).unwrap_or_default();
        let still: BTreeSet<DomainId> =
            self.relations.iter().flat_map(|&r| ds.system.relation(r).domains.iter().copied()).collect();
        self.partitions.retain(|d, _| still.contains(d));
        self.refcounts.retain(|d, _| still.contains(d));
        Ok(cells)
    }

    /// Seats an entity at a specific table; used when rebuilding from a saved
    /// assignment.
    pub fn seat_entity(&mut self, ds: &Dataset, d: DomainId, e: EntityId, table: TableId, gamma: f64) {
        self.ensure_domain(ds, d, gamma);
        self.partitions.get_mut(&d).unwrap().seat(e, table).expect("entity seated once");
    }

    /// Checks every bookkeeping invariant against a rebuild from scratch.
    pub fn audit(&self, ds: &Dataset) -> Result<(), String> {
        let mut refcounts: BTreeMap<DomainId, Vec<u32>> = BTreeMap::new();
        let domains: BTreeSet<DomainId> =
            self.relations.iter().flat_map(|&r| ds.system.relation(r).domains.iter().copied()).collect();
        if domains != self.partitions.keys().copied().collect::<BTreeSet<_>>() {
            return Err("partition domains differ from member relation domains".into());
        }
        for &k in &self.relations {
            let sig = ds.system.relation(k);
            let mut counts: BTreeMap<CellKey, SuffStats> = BTreeMap::new();
            for (obs, o) in ds.store.observations(k).iter().enumerate() {
                if !self.incorporated[&k][obs] {
                    return Err(format!("relation {k} observation {obs} not incorporated"));
                }
                let key = self.cell_key(ds, k, obs).map_err(|e| e.to_string())?;
                counts.entry(key).or_insert_with(|| SuffStats::empty(sig.kind)).incorporate(o.value).unwrap();
                for (&d, &e) in sig.domains.iter().zip(o.tuple.iter()) {
                    let rc = refcounts.entry(d).or_insert_with(|| vec![0; ds.store.num_entities(d)]);
                    rc[e] += 1;
                }
            }
            let mine = &self.cells[&k];
            if mine.keys().ne(counts.keys()) {
                return Err(format!("relation {k}: cell keys differ from rebuild"));
            }
            for (key, stats) in mine {
                let want = &counts[key];
                let same = match (stats, want) {
                    (SuffStats::NonConjugate { n0, n1, .. }, SuffStats::NonConjugate { n0: a, n1: b, .. }) => n0 == a && n1 == b,
                    (a, b) => a == b,
                };
                if !same || stats.is_empty() {
                    return Err(format!("relation {k}: cell {key:?} statistics differ from rebuild"));
                }
            }
        }
        for (d, p) in &self.partitions {
            let rc = refcounts.get(d).cloned().unwrap_or_else(|| vec![0; ds.store.num_entities(*d)]);
            if rc != self.refcounts[d] {
                return Err(format!("domain {d}: reference counts differ from rebuild"));
            }
            for (e, &n) in rc.iter().enumerate() {
                if (n > 0) != p.contains(e) {
                    return Err(format!("domain {d}: entity {e} seating disagrees with references"));
                }
            }
        }
        Ok(())
    }
}

/// Folds a real number into [0, 1] by reflection at both walls.
pub fn reflect_unit(x: f64) -> f64 {
    let m = x.rem_euclid(2.0);
    if m > 1.0 {
        2.0 - m
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ds(schema: &str, obs: &str) -> Dataset {
        Dataset::parse(schema, obs).unwrap()
    }

    fn hypers(ds: &Dataset) -> Vec<Hyper> {
        ds.system.relations().iter().map(|r| Hyper::default_for(r.kind)).collect()
    }

    #[test]
    fn incorporate_routes_to_cluster_cell() {
        let d = ds("bernoulli R D D", "R,1,a,b\nR,0,b,a\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sub = Subsystem::new();
        sub.add_relation(&d, 0, &[1.0]);
        sub.seat_entity(&d, 0, 0, 0, 1.0);
        sub.seat_entity(&d, 0, 1, 0, 1.0);
        sub.incorporate_tuple(&d, 0, 0, &mut rng).unwrap();
        assert_eq!(sub.cells(0).unwrap()[&CellKey::from_slice(&[0, 0])], SuffStats::Bernoulli { n0: 0, n1: 1 });
        assert_eq!(
            sub.incorporate_tuple(&d, 0, 0, &mut rng),
            Err(IrmError::AlreadyIncorporated { relation: 0, observation: 0 })
        );
        assert_eq!(sub.incorporate_tuple(&d, 1, 0, &mut rng), Err(IrmError::NotMember(1)));
    }

    #[test]
    fn incorporate_creates_offdiagonal_cell() {
        let d = ds("bernoulli R D D", "R,1,a,b\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sub = Subsystem::new();
        sub.add_relation(&d, 0, &[1.0]);
        sub.seat_entity(&d, 0, 0, 2, 1.0);
        sub.seat_entity(&d, 0, 1, 1, 1.0);
        sub.incorporate_tuple(&d, 0, 0, &mut rng).unwrap();
        assert!(sub.cells(0).unwrap().contains_key(&CellKey::from_slice(&[2, 1])));
    }

    #[test]
    fn score_delta_matches_rescore() {
        let d = ds("bernoulli R D E\ncategorical:3 C D", "R,1,a,x\nR,1,b,x\nR,0,a,y\nC,2,a\nC,2,b\nC,0,c\n");
        let h = hypers(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sub = Subsystem::new();
        sub.add_relation(&d, 0, &[1.0, 1.0]);
        sub.add_relation(&d, 1, &[1.0, 1.0]);
        for k in 0..2 {
            for obs in 0..d.store.observations(k).len() {
                sub.seat_tuple_from_prior(&d, k, obs, &mut rng);
                let crp_before: f64 = sub.partitions().values().map(CrpPartition::log_prob).sum();
                let before = sub.logp_score(&h) - crp_before;
                let delta = sub.incorporate_tuple_scored(&d, &h, k, obs, &mut rng).unwrap();
                let crp_after: f64 = sub.partitions().values().map(CrpPartition::log_prob).sum();
                let after = sub.logp_score(&h) - crp_after;
                assert!((after - before - delta).abs() < 1e-12);
            }
        }
        sub.audit(&d).unwrap();
    }

    #[test]
    fn empty_and_single_observation_scores() {
        assert_eq!(Subsystem::new().logp_score(&[]), 0.0);
        let d = ds("bernoulli R D", "R,1,a\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = Subsystem::init_from_prior(&d, &[0], &[1.0], &mut rng);
        assert!((sub.logp_score(&hypers(&d)) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_entity_returns_to_single_table() {
        let d = ds("bernoulli R D E", "R,1,a,x\n");
        let h = hypers(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sub = Subsystem::init_from_prior(&d, &[0], &[1.0, 1.0], &mut rng);
        for _ in 0..100 {
            sub.gibbs_entities(&d, &h, &mut rng);
            assert_eq!(sub.partition(0).unwrap().num_tables(), 1);
            assert_eq!(sub.partition(1).unwrap().num_tables(), 1);
        }
        sub.audit(&d).unwrap();
    }

    #[test]
    fn gibbs_delta_matches_score_change() {
        let d = ds(
            "bernoulli R D D\nbernoulli_nc S D E\ncategorical:3 C D",
            "R,1,a,b\nR,1,b,a\nR,0,a,a\nR,1,c,c\nR,0,b,c\nS,1,a,x\nS,0,c,y\nS,1,b,y\nC,0,c\nC,2,a\n",
        );
        let h = hypers(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut sub = Subsystem::init_from_prior(&d, &[0, 1, 2], &[1.0, 1.0], &mut rng);
        for _ in 0..500 {
            let before = sub.logp_score(&h);
            let delta = sub.gibbs_entities(&d, &h, &mut rng);
            let after = sub.logp_score(&h);
            assert!((after - before - delta).abs() < 1e-9, "{before} {after} {delta}");
            sub.mh_thetas(&d, &h, &mut rng);
            sub.audit(&d).unwrap();
        }
    }

    #[test]
    fn contradictory_entities_separate() {
        // a is all ones and b all zeros across 20 columns.
        let mut obs = String::new();
        for c in 0..20 {
            obs.push_str(&format!("R,1,a,c{c}\nR,0,b,c{c}\n"));
        }
        let d = ds("bernoulli R D C", &obs);
        let h = hypers(&d);
        let mut together = 0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sub = Subsystem::init_from_prior(&d, &[0], &[1.0, 1.0], &mut rng);
            for e in sub.entities(0) {
                sub.gibbs_entity(&d, &h, 0, e, &mut rng);
            }
            if sub.table_of(0, 0) == sub.table_of(0, 1) {
                together += 1;
            }
        }
        assert!((together as f64) / 1000.0 < 0.05, "co-clustered {together} / 1000");
    }

    #[test]
    fn rebuild_reproduces_statistics() {
        let d = ds("bernoulli R D D\ncategorical:4 C D", "R,1,a,b\nR,1,b,c\nR,0,c,a\nR,1,a,a\nC,3,a\nC,1,c\n");
        let h = hypers(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sub = Subsystem::init_from_prior(&d, &[0, 1], &[1.0], &mut rng);
        sub.gibbs_entities(&d, &h, &mut rng);
        let score = sub.logp_score(&h);
        let assignment: Vec<(EntityId, TableId)> = sub.partition(0).unwrap().items().collect();
        let mut order: Vec<(RelationId, usize)> =
            (0..2).flat_map(|k| (0..d.store.observations(k).len()).map(move |o| (k, o))).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &(k, o) in &order {
            sub.unincorporate_tuple(&d, k, o).unwrap();
        }
        assert_eq!(sub.partition(0).unwrap().num_items(), 0);
        for &(e, t) in &assignment {
            sub.seat_entity(&d, 0, e, t, 1.0);
        }
        order.shuffle(&mut rng);
        for &(k, o) in &order {
            sub.incorporate_tuple(&d, k, o, &mut rng).unwrap();
        }
        assert!((sub.logp_score(&h) - score).abs() < 1e-10);
        sub.audit(&d).unwrap();
    }

    #[test]
    fn reflection_stays_in_unit_interval() {
        for x in [-2.3, -0.2, 0.4, 1.3, 2.9, 7.5] {
            let r = reflect_unit(x);
            assert!((0.0..=1.0).contains(&r));
        }
        assert!((reflect_unit(1.2) - 0.8).abs() < 1e-12);
        assert!((reflect_unit(-0.3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn detach_drops_unreferenced_entities() {
        let d = ds("bernoulli R D\nbernoulli S D E", "R,1,a\nS,1,b,x\n");
        let h = hypers(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sub = Subsystem::init_from_prior(&d, &[0, 1], &[1.0, 1.0], &mut rng);
        sub.detach_relation(&d, 1).unwrap();
        assert_eq!(sub.entities(0), vec![0]);
        assert!(sub.partition(1).is_none());
        sub.audit(&d).unwrap();
        let p = sub.propose_relation(&d, &h, 1, &[1.0, 1.0], &mut rng);
        sub.retract(p);
        sub.audit(&d).unwrap();
        let p = sub.propose_relation(&d, &h, 1, &[1.0, 1.0], &mut rng);
        sub.accept(&d, p);
        sub.audit(&d).unwrap();
    }
}
