//! Simulator for die rolls among distant parties whose messages are timed against light travel.
//!
//! Parties hold laboratories in disjoint balls of space, exchange random
//! values fast enough that no message can depend on another party's value,
//! and reduce the sum modulo `n` to one of `N` outcomes.

pub mod analysis;
pub mod cli;
pub mod engine;
pub mod partition;
pub mod protocol;
pub mod randsource;
pub mod scenario;
pub mod spacetime;
pub mod strategies;

pub use analysis::{exact_outcome_distribution, monte_carlo, security_bound, SecurityBound};
pub use partition::{build_partition, IdealDistribution, OutcomePartition};
pub use protocol::{Outcome, ProtocolParams, Session, Transcript};
pub use randsource::{EntropyStream, SourceModel};
pub use spacetime::{validate_layout, Layout, SpacetimeEvent};
pub use strategies::Strategy;
