//! Surrogate-overlay conferencing toolkit.
//!
//! Every conference participant is paired with a well-provisioned proxy VM
//! (its *surrogate*). Surrogates relay media for each other over inter-VM
//! links, so each participant's stream travels one dissemination tree rooted
//! at its own surrogate instead of a fan of device-to-device unicasts. A
//! surrogate may down-transcode a stream before forwarding it, which lets one
//! tree serve receivers with different accept rates at the price of extra
//! processing delay.
//!
//! The crate is organised around that pipeline:
//!
//! * [`model`] — shared vocabulary: surrogate identifiers, topology
//!   snapshots, the transcode-latency model, the discrete rate ladder,
//!   logarithmic rate utility, and whole-solution validation.
//! * [`routing`] — dissemination-tree construction (shortest-path trees and
//!   uniform basic rates), the gossip tables surrogates keep about each
//!   other, and the local evaluate/apply switch engine that adapts trees at
//!   run time.
//! * [`oracle`] — an exact joint optimizer for small instances, used to
//!   measure how far the distributed heuristic lands from the optimum.
//! * [`jitter`] — fixed end-to-end playout budgets, jitter-deviation
//!   estimation, and the masking buffer that trades waiting time for loss.
//! * [`session`] — membership: join/leave, initiator-anchored clock
//!   calibration, heartbeat expiry, and initiator failover.
//! * [`wire`] — the compact media packet header plus frame
//!   fragmentation/reassembly.
//! * [`sim`] — a deterministic discrete-event simulator gluing all of the
//!   above together, with a unicast baseline for comparison and CSV metric
//!   export.

pub mod jitter;
pub mod model;
pub mod oracle;
pub mod routing;
pub mod session;
pub mod sim;
pub mod wire;

pub use model::{
    RateLadder, RateSolution, SurrogateId, TopologySnapshot, TranscodeModel,
};
