//! JSON state files. Labels are canonical, so equal latent states produce
//! identical text.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{HirmError, HirmState, Latent, LatentBlock, LatentDomain, Mode, ModelConfig};
use crate::likelihood::Hyper;
use crate::schema::Dataset;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StateFileError {
    #[error("malformed state file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("state file version {found} is not supported (expected {STATE_VERSION})")]
    Version { found: u32 },
    #[error("state names unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("state names unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("state names unknown entity `{entity}` of domain `{domain}`")]
    UnknownEntity { domain: String, entity: String },
    #[error("bad hyperparameters for relation `{0}`")]
    BadHyper(String),
    #[error(transparent)]
    Model(#[from] HirmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub version: u32,
    pub seed: u64,
    pub scan_count: u64,
    pub mode: Mode,
    pub gamma0: f64,
    pub relation_blocks: Vec<BlockFile>,
    pub likelihood_hypers: IndexMap<String, HyperFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFile {
    pub id: usize,
    pub relations: Vec<String>,
    pub domains: IndexMap<String, DomainFile>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub parameters: IndexMap<String, Vec<CellTheta>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFile {
    pub gamma: f64,
    pub clusters: IndexMap<String, Vec<String>>,
}

/// Parameter of one nonconjugate cell, keyed by cluster ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellTheta {
    pub cell: Vec<usize>,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum HyperFile {
    Bernoulli { alpha: f64, beta: f64 },
    Categorical { delta: f64 },
    NonConjugate { sigma: f64 },
}

impl From<Hyper> for HyperFile {
    fn from(h: Hyper) -> Self {
        match h {
            Hyper::Bernoulli { alpha, beta } => HyperFile::Bernoulli { alpha, beta },
            Hyper::Categorical { delta } => HyperFile::Categorical { delta },
            Hyper::NonConjugate { sigma } => HyperFile::NonConjugate { sigma },
        }
    }
}

impl From<HyperFile> for Hyper {
    fn from(h: HyperFile) -> Self {
        match h {
            HyperFile::Bernoulli { alpha, beta } => Hyper::Bernoulli { alpha, beta },
            HyperFile::Categorical { delta } => Hyper::Categorical { delta },
            HyperFile::NonConjugate { sigma } => Hyper::NonConjugate { sigma },
        }
    }
}

impl StateFile {
    /// Canonical snapshot of a state. Block and cluster ids count from 1.
    pub fn from_state(state: &HirmState) -> Self {
        let system = state.system();
        let store = &state.dataset().store;
        let latent = state.latent();
        let relation_blocks = latent
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| {
                let domains = block
                    .domains
                    .iter()
                    .map(|(&d, dom)| {
                        let clusters = dom
                            .clusters
                            .iter()
                            .enumerate()
                            .map(|(c, es)| {
                                ((c + 1).to_string(), es.iter().map(|&e| store.entity_name(d, e).to_string()).collect())
                            })
                            .collect();
                        (system.domains()[d].clone(), DomainFile { gamma: dom.gamma, clusters })
                    })
                    .collect();
                let parameters = block
                    .thetas
                    .iter()
                    .map(|(&k, cells)| {
                        let cells = cells
                            .iter()
                            .map(|(key, &theta)| CellTheta { cell: key.iter().map(|c| c + 1).collect(), theta })
                            .collect();
                        (system.relation(k).name.clone(), cells)
                    })
                    .collect();
                BlockFile {
                    id: b + 1,
                    relations: block.relations.iter().map(|&k| system.relation(k).name.clone()).collect(),
                    domains,
                    parameters,
                }
            })
            .collect();
        let likelihood_hypers = system
            .relations()
            .iter()
            .zip(state.likelihood_hypers())
            .map(|(r, &h)| (r.name.clone(), h.into()))
            .collect();
        StateFile {
            version: STATE_VERSION,
            seed: state.seed(),
            scan_count: state.scan_count(),
            mode: state.mode(),
            gamma0: state.gamma0(),
            relation_blocks,
            likelihood_hypers,
        }
    }

    /// Rebuilds the state against `dataset`. The chain's random stream is
    /// derived from `(seed, scan_count)`.
    pub fn into_state(self, dataset: Arc<Dataset>) -> Result<HirmState, StateFileError> {
        if self.version != STATE_VERSION {
            return Err(StateFileError::Version { found: self.version });
        }
        let system = &dataset.system;
        let store = &dataset.store;
        let relation = |name: &str| system.relation_id(name).ok_or_else(|| StateFileError::UnknownRelation(name.into()));
        let mut blocks = Vec::new();
        for block in &self.relation_blocks {
            let relations = block.relations.iter().map(|n| relation(n)).collect::<Result<Vec<_>, _>>()?;
            let mut domains = std::collections::BTreeMap::new();
            for (name, dom) in &block.domains {
                let d = system.domain_id(name).ok_or_else(|| StateFileError::UnknownDomain(name.clone()))?;
                let mut clusters = Vec::new();
                for es in dom.clusters.values() {
                    let ids = es
                        .iter()
                        .map(|e| {
                            store.interner(d).get(e).ok_or_else(|| StateFileError::UnknownEntity {
                                domain: name.clone(),
                                entity: e.clone(),
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    clusters.push(ids);
                }
                domains.insert(d, LatentDomain { gamma: dom.gamma, clusters });
            }
            let mut thetas = std::collections::BTreeMap::new();
            for (name, cells) in &block.parameters {
                let k = relation(name)?;
                let per = cells
                    .iter()
                    .map(|c| {
                        if c.cell.contains(&0) {
                            return Err(HirmError::Inconsistent(format!("cluster id 0 in `{name}`")));
                        }
                        Ok((c.cell.iter().map(|x| x - 1).collect::<Vec<_>>(), c.theta))
                    })
                    .collect::<Result<_, _>>()?;
                thetas.insert(k, per);
            }
            blocks.push(LatentBlock { relations, domains, thetas });
        }
        let mut config = ModelConfig::new(system, self.mode).with_gamma0(self.gamma0);
        for (name, &h) in &self.likelihood_hypers {
            let k = relation(name)?;
            config.likelihood_hypers[k] = h.into();
        }
        let latent = Latent { blocks };
        let state = HirmState::from_latent(dataset, config, &latent, self.seed, self.scan_count)?;
        if state.latent() != latent {
            return Err(HirmError::Inconsistent("labels are not in canonical order".into()).into());
        }
        Ok(state)
    }
}

/// Serializes a state to pretty JSON.
pub fn serialize(state: &HirmState) -> String {
    let mut text = serde_json::to_string_pretty(&StateFile::from_state(state)).expect("state files serialize");
    text.push('\n');
    text
}

/// Parses a state file and rebuilds its state against `dataset`.
pub fn deserialize(dataset: Arc<Dataset>, text: &str) -> Result<HirmState, StateFileError> {
    let file: StateFile = serde_json::from_str(text)?;
    file.into_state(dataset)
}
