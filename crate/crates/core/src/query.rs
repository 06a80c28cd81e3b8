//! Predictive queries against posterior samples: held-out row densities,
//! simulation, imputation and co-clustering matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::hirm::HirmState;
use crate::irm::{CellKey, Subsystem};
use crate::likelihood::{logp_given_theta, Hyper, SuffStats};
use crate::math::{logsumexp, sample_log_weights};
use crate::partition::CrpPartition;
use crate::schema::{Dataset, DomainId, EntityId, LikelihoodKind, RelationId};

/// Largest number of joint seatings enumerated for one row and subsystem.
pub const MAX_SEATINGS: usize = 2_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("relation `{relation}` takes {expected} entities, got {got}")]
    Arity { relation: String, expected: usize, got: usize },
    #[error("value {value} is outside the codomain of `{relation}`")]
    BadValue { relation: String, value: u32 },
    #[error("entity `{0}` is marked fresh but appears in training data")]
    FreshButKnown(String),
    #[error("entity `{0}` is not in the training data; prefix it with `~` to mark it fresh")]
    UnknownEntity(String),
    #[error("row needs {0} joint seatings, more than the enumeration limit")]
    TooManySeatings(usize),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble states do not share one dataset")]
    MixedEnsemble,
    #[error("domain `{domain}` does not appear in relation `{relation}`")]
    DomainNotInRelation { domain: String, relation: String },
}

/// An entity argument of a query cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntityArg {
    Known(EntityId),
    /// Index into the row's fresh symbols of the argument's domain.
    Fresh(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryCell {
    pub relation: RelationId,
    pub args: Vec<EntityArg>,
    pub value: u32,
}

/// Cells whose values are scored jointly; fresh symbols are shared across
/// the row's cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryRow {
    pub cells: Vec<QueryCell>,
    /// Fresh symbol names per domain.
    pub fresh: BTreeMap<DomainId, Vec<String>>,
}

impl QueryRow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a cell by entity name; names prefixed with `~` are fresh.
    pub fn push(&mut self, ds: &Dataset, relation: &str, value: u32, entities: &[&str]) -> Result<(), QueryError> {
        let system = &ds.system;
        let k = system.relation_id(relation).ok_or_else(|| QueryError::UnknownRelation(relation.to_string()))?;
        let sig = system.relation(k);
        if entities.len() != sig.arity() {
            return Err(QueryError::Arity { relation: sig.name.clone(), expected: sig.arity(), got: entities.len() });
        }
        if value as usize >= sig.kind.cardinality() {
            return Err(QueryError::BadValue { relation: sig.name.clone(), value });
        }
        let mut args = Vec::with_capacity(entities.len());
        for (&d, &name) in sig.domains.iter().zip(entities) {
            let interner = ds.store.interner(d);
            let arg = match name.strip_prefix('~') {
                Some(symbol) => {
                    if interner.get(symbol).is_some() {
                        return Err(QueryError::FreshButKnown(symbol.to_string()));
                    }
                    let names = self.fresh.entry(d).or_default();
                    let idx = names.iter().position(|n| n == symbol).unwrap_or_else(|| {
                        names.push(symbol.to_string());
                        names.len() - 1
                    });
                    EntityArg::Fresh(idx)
                }
                None => EntityArg::Known(interner.get(name).ok_or_else(|| QueryError::UnknownEntity(name.to_string()))?),
            };
            args.push(arg);
        }
        self.cells.push(QueryCell { relation: k, args, value });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Parses CSV query lines `relation,value,entity...`. Lines that share a
/// fresh symbol (same domain and name) form one row; every other line is a
/// row of its own. Rows are ordered by their first line.
pub fn parse_queries(ds: &Dataset, text: &str) -> Result<Vec<QueryRow>, QueryError> {
    struct Line<'a> {
        relation: &'a str,
        value: u32,
        entities: Vec<&'a str>,
        fresh: Vec<(DomainId, &'a str)>,
    }
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(QueryError::Malformed { line: i + 1, message: "expected relation,value,entities".into() });
        }
        let value = fields[1]
            .parse::<u32>()
            .map_err(|_| QueryError::Malformed { line: i + 1, message: format!("bad value `{}`", fields[1]) })?;
        let k = ds.system.relation_id(fields[0]).ok_or_else(|| QueryError::UnknownRelation(fields[0].to_string()))?;
        let domains = &ds.system.relation(k).domains;
        let fresh = fields[2..]
            .iter()
            .zip(domains)
            .filter_map(|(name, &d)| name.strip_prefix('~').map(|s| (d, s)))
            .collect();
        lines.push(Line { relation: fields[0], value, entities: fields[2..].to_vec(), fresh });
    }

    // Union-find over lines joined by shared fresh symbols.
    let mut parent: Vec<usize> = (0..lines.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut owner: BTreeMap<(DomainId, &str), usize> = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        for &key in &line.fresh {
            match owner.get(&key) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    owner.insert(key, i);
                }
            }
        }
    }
    let mut rows: BTreeMap<usize, QueryRow> = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        let root = find(&mut parent, i);
        rows.entry(root).or_default().push(ds, line.relation, line.value, &line.entities)?;
    }
    Ok(rows.into_values().collect())
}

/// Entities a subsystem must seat to score a row: fresh symbols, and known
/// entities that no member relation references.
fn floating_entities(sub: &Subsystem, ds: &Dataset, cells: &[&QueryCell]) -> Vec<(DomainId, EntityId)> {
    let mut out = BTreeSet::new();
    for cell in cells {
        for (&d, &arg) in ds.system.relation(cell.relation).domains.iter().zip(&cell.args) {
            let id = entity_id(ds, d, arg);
            let seated = sub.partition(d).is_some_and(|p| p.contains(id));
            if !seated {
                out.insert((d, id));
            }
        }
    }
    out.into_iter().collect()
}

fn entity_id(ds: &Dataset, d: DomainId, arg: EntityArg) -> EntityId {
    match arg {
        EntityArg::Known(e) => e,
        EntityArg::Fresh(j) => ds.store.num_entities(d) + j,
    }
}

/// Sequential log predictive of the row's cells, given every entity seated.
fn cells_logp(ds: &Dataset, sub: &Subsystem, parts: &BTreeMap<DomainId, CrpPartition>, hypers: &[Hyper], cells: &[&QueryCell]) -> f64 {
    let mut scratch: BTreeMap<(RelationId, CellKey), SuffStats> = BTreeMap::new();
    let mut total = 0.0;
    for cell in cells {
        let sig = ds.system.relation(cell.relation);
        let key: CellKey = sig
            .domains
            .iter()
            .zip(&cell.args)
            .map(|(&d, &arg)| parts[&d].table_of(entity_id(ds, d, arg)).expect("row entities are seated"))
            .collect();
        let existing = sub.cells(cell.relation).and_then(|c| c.get(&key));
        if let Some(SuffStats::NonConjugate { theta, .. }) = existing {
            total += logp_given_theta(cell.value, *theta).expect("value checked on parse");
            continue;
        }
        // A nonconjugate cell without data has its uniform prior integrated
        // out, which is the beta-Bernoulli with unit pseudo-counts.
        let (hyper, empty) = match sig.kind {
            LikelihoodKind::BernoulliNonconjugate => {
                (Hyper::Bernoulli { alpha: 1.0, beta: 1.0 }, SuffStats::empty(LikelihoodKind::Bernoulli))
            }
            kind => (hypers[cell.relation], SuffStats::empty(kind)),
        };
        let stats = scratch.entry((cell.relation, key)).or_insert_with(|| existing.cloned().unwrap_or(empty));
        total += stats.logp_predictive(&hyper, cell.value).expect("value checked on parse");
        stats.incorporate(cell.value).expect("value checked on parse");
    }
    total
}

/// Log-sum-exp over all joint seatings of `floating`, each weighted by its
/// sequential CRP probability times `score`.
fn enumerate_seatings(
    parts: &mut BTreeMap<DomainId, CrpPartition>,
    floating: &[(DomainId, EntityId)],
    prefix: f64,
    score: &mut dyn FnMut(&BTreeMap<DomainId, CrpPartition>) -> f64,
    out: &mut Vec<f64>,
) {
    let Some((&(d, e), rest)) = floating.split_first() else {
        out.push(prefix + score(parts));
        return;
    };
    let options: Vec<_> = parts[&d].predictive_log_weights().into_iter().map(|(t, _)| t).collect();
    for t in options {
        let p = parts.get_mut(&d).unwrap();
        let lp = p.predictive_logp(t);
        p.seat(e, t).unwrap();
        enumerate_seatings(parts, rest, prefix + lp, score, out);
        parts.get_mut(&d).unwrap().unseat(e).unwrap();
    }
}

/// Upper bound on the seatings enumerated for `floating`.
fn seating_count(parts: &BTreeMap<DomainId, CrpPartition>, floating: &[(DomainId, EntityId)]) -> usize {
    let mut extra: BTreeMap<DomainId, usize> = BTreeMap::new();
    let mut count: usize = 1;
    for &(d, _) in floating {
        let n = extra.entry(d).or_insert(0);
        count = count.saturating_mul(parts[&d].num_tables() + *n + 1);
        *n += 1;
    }
    count
}

/// Partitions of `sub` over every domain a row touches; domains the
/// subsystem lacks start empty with their default concentration.
fn row_partitions(state: &HirmState, sub: &Subsystem, cells: &[&QueryCell]) -> BTreeMap<DomainId, CrpPartition> {
    let mut parts = BTreeMap::new();
    for cell in cells {
        for &d in &state.system().relation(cell.relation).domains {
            parts.entry(d).or_insert_with(|| {
                sub.partition(d).cloned().unwrap_or_else(|| CrpPartition::new(state.config().entity_gamma[d]))
            });
        }
    }
    parts
}

/// Log probability of the row's values under one posterior sample, with
/// fresh entities (and entities unseated in a subsystem) marginalized by
/// exact enumeration of their CRP seatings.
pub fn predictive_logp(state: &HirmState, row: &QueryRow) -> Result<f64, QueryError> {
    let ds = state.dataset();
    let mut by_block: BTreeMap<usize, Vec<&QueryCell>> = BTreeMap::new();
    for cell in &row.cells {
        by_block.entry(state.block_of(cell.relation)).or_default().push(cell);
    }
    let mut total = 0.0;
    for (block, cells) in by_block {
        let sub = &state.subsystems()[&block];
        let floating = floating_entities(sub, ds, &cells);
        let mut parts = row_partitions(state, sub, &cells);
        let n = seating_count(&parts, &floating);
        if n > MAX_SEATINGS {
            return Err(QueryError::TooManySeatings(n));
        }
        let mut terms = Vec::with_capacity(n);
        let hypers = state.likelihood_hypers();
        let mut score = |p: &BTreeMap<DomainId, CrpPartition>| cells_logp(ds, sub, p, hypers, &cells);
        enumerate_seatings(&mut parts, &floating, 0.0, &mut score, &mut terms);
        total += logsumexp(&terms);
    }
    Ok(total)
}

/// A set of posterior samples over one dataset.
#[derive(Debug, Clone)]
pub struct Ensemble {
    states: Vec<HirmState>,
}

impl Ensemble {
    pub fn new(states: Vec<HirmState>) -> Result<Self, QueryError> {
        let first = states.first().ok_or(QueryError::EmptyEnsemble)?;
        let same = |s: &HirmState| Arc::ptr_eq(s.dataset(), first.dataset()) || s.dataset() == first.dataset();
        if !states.iter().all(same) {
            return Err(QueryError::MixedEnsemble);
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[HirmState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dataset(&self) -> &Dataset {
        self.states[0].dataset()
    }
}

/// Log of the mean per-state probability of the row.
pub fn ensemble_logp(ensemble: &Ensemble, row: &QueryRow) -> Result<f64, QueryError> {
    let lps = ensemble.states.iter().map(|s| predictive_logp(s, row)).collect::<Result<Vec<_>, _>>()?;
    Ok(logsumexp(&lps) - (lps.len() as f64).ln())
}

fn single_cell_row(relation: RelationId, args: &[EntityArg], value: u32, fresh: &BTreeMap<DomainId, Vec<String>>) -> QueryRow {
    QueryRow { cells: vec![QueryCell { relation, args: args.to_vec(), value }], fresh: fresh.clone() }
}

/// Draws a value for one cell: floating entities are first seated from the
/// CRP, then the value comes from the cell predictive.
pub fn simulate<R: Rng + ?Sized>(state: &HirmState, relation: RelationId, args: &[EntityArg], rng: &mut R) -> u32 {
    let ds = state.dataset();
    let sub = state.subsystem_of(relation);
    let probe = QueryCell { relation, args: args.to_vec(), value: 0 };
    let cells = [&probe];
    let mut parts = row_partitions(state, sub, &cells);
    for (d, e) in floating_entities(sub, ds, &cells) {
        parts.get_mut(&d).unwrap().seat_from_prior(e, rng);
    }
    let card = ds.system.relation(relation).kind.cardinality() as u32;
    let weights: Vec<f64> = (0..card)
        .map(|v| {
            let cell = QueryCell { relation, args: args.to_vec(), value: v };
            cells_logp(ds, sub, &parts, state.likelihood_hypers(), &[&cell])
        })
        .collect();
    sample_log_weights(&weights, rng) as u32
}

/// Most probable value of one cell under the ensemble average, with its
/// probability.
pub fn impute(ensemble: &Ensemble, relation: RelationId, args: &[EntityArg], fresh: &BTreeMap<DomainId, Vec<String>>) -> Result<(u32, f64), QueryError> {
    let ds = ensemble.dataset();
    let card = ds.system.relation(relation).kind.cardinality() as u32;
    let mut best = (0, f64::NEG_INFINITY);
    for v in 0..card {
        let p = ensemble_logp(ensemble, &single_cell_row(relation, args, v, fresh))?.exp();
        if p > best.1 {
            best = (v, p);
        }
    }
    Ok(best)
}

/// Fraction of states in which two entities of `domain` share a table in
/// the subsystem holding `context`. Rows and columns follow entity ids.
pub fn cocluster_matrix(ensemble: &Ensemble, domain: DomainId, context: RelationId) -> Result<Vec<Vec<f64>>, QueryError> {
    let ds = ensemble.dataset();
    let sig = ds.system.relation(context);
    if !sig.domains.contains(&domain) {
        return Err(QueryError::DomainNotInRelation {
            domain: ds.system.domains()[domain].clone(),
            relation: sig.name.clone(),
        });
    }
    let n = ds.store.num_entities(domain);
    let mut m = vec![vec![0.0; n]; n];
    for state in &ensemble.states {
        let p = state.subsystem_of(context).partition(domain).expect("context relation touches domain");
        for a in 0..n {
            let Some(ta) = p.table_of(a) else { continue };
            for b in (a + 1)..n {
                if p.table_of(b) == Some(ta) {
                    m[a][b] += 1.0;
                }
            }
        }
    }
    let count = ensemble.len() as f64;
    for a in 0..n {
        m[a][a] = 1.0;
        for b in (a + 1)..n {
            m[a][b] /= count;
            m[b][a] = m[a][b];
        }
    }
    Ok(m)
}

/// CSV matrix with entity names in the header row and first column.
pub fn cocluster_csv(ds: &Dataset, domain: DomainId, matrix: &[Vec<f64>]) -> String {
    let names = ds.store.interner(domain).names();
    let mut out = String::from(&*ds.system.domains()[domain]);
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(matrix) {
        out.push_str(name);
        for x in row {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}
