//! Relational systems and the observation store.
//!
//! A schema file declares one relation per line:
//!
//! ```text
//! # likelihood  name     domains...
//! bernoulli     R1       D1 D1
//! categorical:16 lives   Gene Chromosome
//! bernoulli_nc  R2       D1 D2
//! ```
//!
//! Observations are CSV rows `relation,value,entity_1,...,entity_t` with no
//! header. Entities are interned per domain into dense indexes; missing cells
//! are simply absent.

use std::collections::HashMap;
use std::fmt;

use smallvec::SmallVec;
use thiserror::Error;

pub type DomainId = usize;
pub type RelationId = usize;
pub type EntityId = usize;

/// Entity tuple of one observation. Arity rarely exceeds four.
pub type Tuple = SmallVec<[EntityId; 4]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LikelihoodKind {
    Bernoulli,
    Categorical(usize),
    /// Bernoulli with an explicit cell parameter under a uniform prior,
    /// transitioned by Metropolis-Hastings instead of being collapsed.
    BernoulliNonconjugate,
}

impl LikelihoodKind {
    /// Number of values in the codomain.
    pub fn cardinality(self) -> usize {
        match self {
            LikelihoodKind::Bernoulli | LikelihoodKind::BernoulliNonconjugate => 2,
            LikelihoodKind::Categorical(k) => k,
        }
    }

    pub fn is_conjugate(self) -> bool {
        !matches!(self, LikelihoodKind::BernoulliNonconjugate)
    }

    fn keyword(self) -> String {
        match self {
            LikelihoodKind::Bernoulli => "bernoulli".to_string(),
            LikelihoodKind::Categorical(k) => format!("categorical:{k}"),
            LikelihoodKind::BernoulliNonconjugate => "bernoulli_nc".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSignature {
    pub name: String,
    pub domains: Vec<DomainId>,
    pub kind: LikelihoodKind,
}

impl RelationSignature {
    pub fn arity(&self) -> usize {
        self.domains.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalSystem {
    domains: Vec<String>,
    relations: Vec<RelationSignature>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("line {line}: unknown likelihood `{keyword}`")]
    UnknownLikelihood { line: usize, keyword: String },
    #[error("line {line}: duplicate relation `{name}`")]
    DuplicateRelation { line: usize, name: String },
    #[error("line {line}: relation `{name}` has no domains")]
    ZeroArity { line: usize, name: String },
    #[error("line {line}: categorical relations need at least 2 categories, got {k}")]
    TooFewCategories { line: usize, k: usize },
    #[error("line {line}: missing relation name")]
    MissingName { line: usize },
    #[error("schema declares no relations")]
    Empty,
    #[error("relation `{name}` refers to undeclared domain {domain}")]
    UnknownDomain { name: String, domain: DomainId },
    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),
}

impl RelationalSystem {
    /// Builds a system from explicit parts, validating every invariant.
    pub fn new(
        domains: Vec<String>,
        relations: Vec<RelationSignature>,
    ) -> Result<Self, SchemaError> {
        if relations.is_empty() || domains.is_empty() {
            return Err(SchemaError::Empty);
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].contains(d) {
                return Err(SchemaError::DuplicateDomain(d.clone()));
            }
        }
        for (i, r) in relations.iter().enumerate() {
            if relations[..i].iter().any(|o| o.name == r.name) {
                return Err(SchemaError::DuplicateRelation { line: i + 1, name: r.name.clone() });
            }
            if r.domains.is_empty() {
                return Err(SchemaError::ZeroArity { line: i + 1, name: r.name.clone() });
            }
            if let LikelihoodKind::Categorical(k) = r.kind {
                if k < 2 {
                    return Err(SchemaError::TooFewCategories { line: i + 1, k });
                }
            }
            if let Some(&d) = r.domains.iter().find(|&&d| d >= domains.len()) {
                return Err(SchemaError::UnknownDomain { name: r.name.clone(), domain: d });
            }
        }
        Ok(Self { domains, relations })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn relations(&self) -> &[RelationSignature] {
        &self.relations
    }

    pub fn relation(&self, id: RelationId) -> &RelationSignature {
        &self.relations[id]
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn domain_id(&self, name: &str) -> Option<DomainId> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.iter().position(|r| r.name == name)
    }

    /// Renders the system back into schema-file syntax.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.relations {
            out.push_str(&r.kind.keyword());
            out.push(' ');
            out.push_str(&r.name);
            for &d in &r.domains {
                out.push(' ');
                out.push_str(&self.domains[d]);
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for RelationalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn parse_kind(keyword: &str, line: usize) -> Result<LikelihoodKind, SchemaError> {
    match keyword {
        "bernoulli" => Ok(LikelihoodKind::Bernoulli),
        "bernoulli_nc" => Ok(LikelihoodKind::BernoulliNonconjugate),
        _ => {
            let unknown = || SchemaError::UnknownLikelihood { line, keyword: keyword.to_string() };
            let k = keyword.strip_prefix("categorical:").ok_or_else(unknown)?;
            let k: usize = k.parse().map_err(|_| unknown())?;
            if k < 2 {
                return Err(SchemaError::TooFewCategories { line, k });
            }
            Ok(LikelihoodKind::Categorical(k))
        }
    }
}

/// Parses a schema file. Domains are numbered in order of first mention.
pub fn parse_schema(text: &str) -> Result<RelationalSystem, SchemaError> {
    let mut domains: Vec<String> = Vec::new();
    let mut relations: Vec<RelationSignature> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut words = content.split_whitespace();
        let Some(keyword) = words.next() else { continue };
        let kind = parse_kind(keyword, line)?;
        let name = words.next().ok_or(SchemaError::MissingName { line })?.to_string();
        if relations.iter().any(|r| r.name == name) {
            return Err(SchemaError::DuplicateRelation { line, name });
        }
        let mut sig = Vec::new();
        for w in words {
            let d = match domains.iter().position(|d| d == w) {
                Some(d) => d,
                None => {
                    domains.push(w.to_string());
                    domains.len() - 1
                }
            };
            sig.push(d);
        }
        if sig.is_empty() {
            return Err(SchemaError::ZeroArity { line, name });
        }
        relations.push(RelationSignature { name, domains: sig, kind });
    }
    if relations.is_empty() {
        return Err(SchemaError::Empty);
    }
    Ok(RelationalSystem { domains, relations })
}

/// Per-domain string interner.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, EntityId>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<EntityId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: EntityId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub tuple: Tuple,
    pub value: u32,
}

/// One occurrence of an entity inside an observed tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityRef {
    pub relation: RelationId,
    pub observation: usize,
    pub position: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("line {line}: unknown relation `{name}`")]
    UnknownRelation { line: usize, name: String },
    #[error("line {line}: relation `{name}` expects {expected} entities, got {got}")]
    ArityMismatch { line: usize, name: String, expected: usize, got: usize },
    #[error("line {line}: value `{value}` outside the codomain of `{name}`")]
    BadValue { line: usize, name: String, value: String },
    #[error("line {line}: duplicate cell for relation `{name}`")]
    DuplicateCell { line: usize, name: String },
    #[error("line {line}: expected `relation,value,entity...`")]
    Malformed { line: usize },
    #[error("relation {0} out of range")]
    NoSuchRelation(RelationId),
    #[error("entity {entity} out of range for domain {domain}")]
    NoSuchEntity { domain: DomainId, entity: EntityId },
}

/// Indexed, immutable set of observed relation values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationStore {
    entities: Vec<Interner>,
    observations: Vec<Vec<Observation>>,
    lookup: Vec<HashMap<Tuple, usize>>,
    reverse: Vec<Vec<Vec<EntityRef>>>,
}

impl ObservationStore {
    /// Empty store with no entities.
    pub fn empty(system: &RelationalSystem) -> Self {
        Self {
            entities: vec![Interner::default(); system.num_domains()],
            observations: vec![Vec::new(); system.num_relations()],
            lookup: vec![HashMap::new(); system.num_relations()],
            reverse: vec![Vec::new(); system.num_domains()],
        }
    }

    /// Interns an entity name in `domain`, returning its index.
    pub fn add_entity(&mut self, domain: DomainId, name: &str) -> EntityId {
        let id = self.entities[domain].intern(name);
        if self.reverse[domain].len() <= id {
            self.reverse[domain].resize(id + 1, Vec::new());
        }
        id
    }

    /// Adds one observation by entity index. Entities must already exist.
    pub fn insert(
        &mut self,
        system: &RelationalSystem,
        relation: RelationId,
        tuple: Tuple,
        value: u32,
    ) -> Result<(), LoadError> {
        let sig = system.relations().get(relation).ok_or(LoadError::NoSuchRelation(relation))?;
        if tuple.len() != sig.arity() {
            return Err(LoadError::ArityMismatch {
                line: 0,
                name: sig.name.clone(),
                expected: sig.arity(),
                got: tuple.len(),
            });
        }
        if value as usize >= sig.kind.cardinality() {
            return Err(LoadError::BadValue { line: 0, name: sig.name.clone(), value: value.to_string() });
        }
        for (&d, &e) in sig.domains.iter().zip(tuple.iter()) {
            if e >= self.entities[d].len() {
                return Err(LoadError::NoSuchEntity { domain: d, entity: e });
            }
        }
        if self.lookup[relation].contains_key(&tuple) {
            return Err(LoadError::DuplicateCell { line: 0, name: sig.name.clone() });
        }
        let obs_idx = self.observations[relation].len();
        for (position, (&d, &e)) in sig.domains.iter().zip(tuple.iter()).enumerate() {
            self.reverse[d][e].push(EntityRef { relation, observation: obs_idx, position });
        }
        self.lookup[relation].insert(tuple.clone(), obs_idx);
        self.observations[relation].push(Observation { tuple, value });
        Ok(())
    }

    /// Number of interned entities in a domain.
    pub fn num_entities(&self, domain: DomainId) -> usize {
        self.entities[domain].len()
    }

    pub fn interner(&self, domain: DomainId) -> &Interner {
        &self.entities[domain]
    }

    pub fn entity_name(&self, domain: DomainId, entity: EntityId) -> &str {
        self.entities[domain].name(entity)
    }

    pub fn observations(&self, relation: RelationId) -> &[Observation] {
        &self.observations[relation]
    }

    pub fn num_observations(&self) -> usize {
        self.observations.iter().map(Vec::len).sum()
    }

    pub fn get(&self, relation: RelationId, tuple: &[EntityId]) -> Option<u32> {
        self.lookup[relation].get(tuple).map(|&i| self.observations[relation][i].value)
    }

    /// Every tuple occurrence of an entity, in insertion order.
    pub fn refs(&self, domain: DomainId, entity: EntityId) -> &[EntityRef] {
        self.reverse[domain].get(entity).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Rebuilds the reverse index from the forward map.
    fn rebuilt_reverse(&self, system: &RelationalSystem) -> Vec<Vec<Vec<EntityRef>>> {
        let mut reverse: Vec<Vec<Vec<EntityRef>>> =
            self.entities.iter().map(|i| vec![Vec::new(); i.len()]).collect();
        for (relation, obs) in self.observations.iter().enumerate() {
            let sig = system.relation(relation);
            for (observation, o) in obs.iter().enumerate() {
                for (position, (&d, &e)) in sig.domains.iter().zip(o.tuple.iter()).enumerate() {
                    reverse[d][e].push(EntityRef { relation, observation, position });
                }
            }
        }
        for per_domain in &mut reverse {
            for refs in per_domain {
                refs.sort();
            }
        }
        reverse
    }

    /// Checks the reverse index against a rebuild from the forward map.
    pub fn reverse_index_consistent(&self, system: &RelationalSystem) -> bool {
        let mut mine = self.reverse.clone();
        for per_domain in &mut mine {
            for refs in per_domain {
                refs.sort();
            }
        }
        mine == self.rebuilt_reverse(system)
    }

    /// Returns an equivalent store with entity names interned in sorted
    /// order and observations sorted by tuple.
    pub fn canonicalized(&self, system: &RelationalSystem) -> Self {
        let mut out = Self::empty(system);
        let mut remap: Vec<Vec<EntityId>> = Vec::with_capacity(self.entities.len());
        for (d, interner) in self.entities.iter().enumerate() {
            let mut names: Vec<&String> = interner.names().iter().collect();
            names.sort();
            for n in names {
                out.add_entity(d, n);
            }
            remap.push(interner.names().iter().map(|n| out.entities[d].get(n).unwrap()).collect());
        }
        for (relation, obs) in self.observations.iter().enumerate() {
            let sig = system.relation(relation);
            let mut rows: Vec<(Tuple, u32)> = obs
                .iter()
                .map(|o| {
                    let t = sig.domains.iter().zip(o.tuple.iter()).map(|(&d, &e)| remap[d][e]).collect();
                    (t, o.value)
                })
                .collect();
            rows.sort();
            for (t, v) in rows {
                out.insert(system, relation, t, v).expect("canonical rows are valid");
            }
        }
        out
    }
}

/// A relational system together with its observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub system: RelationalSystem,
    pub store: ObservationStore,
}

impl Dataset {
    pub fn new(system: RelationalSystem, store: ObservationStore) -> Self {
        Self { system, store }
    }

    /// Parses a schema and loads observations in one step.
    pub fn parse(schema: &str, observations: &str) -> Result<Self, DatasetError> {
        let system = parse_schema(schema)?;
        let store = load_observations(&system, observations)?;
        Ok(Self { system, store })
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("observations: {0}")]
    Load(#[from] LoadError),
}

fn with_line(err: LoadError, line: usize) -> LoadError {
    match err {
        LoadError::ArityMismatch { name, expected, got, .. } => {
            LoadError::ArityMismatch { line, name, expected, got }
        }
        LoadError::BadValue { name, value, .. } => LoadError::BadValue { line, name, value },
        LoadError::DuplicateCell { name, .. } => LoadError::DuplicateCell { line, name },
        other => other,
    }
}

/// Loads CSV observations into a fresh store.
pub fn load_observations(
    system: &RelationalSystem,
    text: &str,
) -> Result<ObservationStore, LoadError> {
    let mut store = ObservationStore::empty(system);
    extend_observations(system, &mut store, text)?;
    Ok(store)
}

/// Appends CSV observations to an existing store.
pub fn extend_observations(
    system: &RelationalSystem,
    store: &mut ObservationStore,
    text: &str,
) -> Result<(), LoadError> {
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(LoadError::Malformed { line });
        }
        let relation = system
            .relation_id(fields[0])
            .ok_or_else(|| LoadError::UnknownRelation { line, name: fields[0].to_string() })?;
        let sig = system.relation(relation);
        let names = &fields[2..];
        if names.len() != sig.arity() {
            return Err(LoadError::ArityMismatch {
                line,
                name: sig.name.clone(),
                expected: sig.arity(),
                got: names.len(),
            });
        }
        let value: u32 = fields[1]
            .parse()
            .ok()
            .filter(|&v: &u32| (v as usize) < sig.kind.cardinality())
            .ok_or_else(|| LoadError::BadValue {
                line,
                name: sig.name.clone(),
                value: fields[1].to_string(),
            })?;
        let domains = sig.domains.clone();
        let tuple: Tuple = domains.iter().zip(names).map(|(&d, n)| store.add_entity(d, n)).collect();
        store.insert(system, relation, tuple, value).map_err(|e| with_line(e, line))?;
    }
    Ok(())
}
