//! Hierarchical infinite relational model.
//!
//! Relations over multiple domains are partitioned into independent
//! subsystems by a top-level Chinese restaurant process; each subsystem is an
//! infinite relational model with its own entity partitions. Inference is
//! fully Bayesian Gibbs sampling over relation blocks, entity tables, cell
//! parameters and hyperparameters.

pub mod hirm;
pub mod irm;
pub mod likelihood;
pub mod math;
pub mod oracle;
pub mod partition;
pub mod query;
pub mod schema;

pub use hirm::{HirmState, Latent, Mode, ModelConfig};
pub use irm::{CellKey, Subsystem};
pub use likelihood::{Hyper, SuffStats};
pub use partition::{CrpPartition, TableId};
pub use schema::{
    load_observations, parse_schema, Dataset, DomainId, EntityId, LikelihoodKind, ObservationStore,
    RelationId, RelationSignature, RelationalSystem,
};
