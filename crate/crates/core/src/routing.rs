//! Dissemination-tree routing: construction, gossip state, and run-time
//! adaptation.
//!
//! A conference maintains one tree per flow, rooted at the flow's source
//! surrogate. Construction ([`build`]) starts every tree on latency-shortest
//! paths and assigns a conservative *basic* rate shared by the whole tree.
//! From there the system is decentralized: surrogates gossip path quality to
//! their neighbours ([`tables`]), and each receiver periodically re-evaluates
//! whether some already-relaying surrogate could feed it better than its
//! current parent ([`engine`]). Switches are local, rate–monotone for the
//! switching node, and guarded so delay deadlines keep holding for everyone
//! downstream.

mod build;
mod engine;
mod tables;
mod tree;

pub use build::{allocate_basic_rates, build_shortest_path_trees, check_feasibility, Feasibility};
pub use engine::{
    sync_flow_tables, Evolution, EvolutionReport, Proposal, ProposalKind, RateRequests,
    RoundReport, RoutingError, RoutingState, SettleReport, SwitchRecord,
};
pub use tables::{
    admit_path_broadcast, requested_rate, residual_deadline, AdmitOutcome, CustabEntry,
    PathBroadcast, PeerTables,
};
pub use tree::DisseminationTree;
