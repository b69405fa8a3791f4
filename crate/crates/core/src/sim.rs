//! Deterministic discrete-event simulation of a full conference.
//!
//! The simulator wires every layer of the crate together: scenario files
//! describe regions, participants and scripted disturbances
//! ([`scenario`]); per-link noise models perturb packet delays ([`link`]);
//! the event loop drives media capture, fragment-level forwarding along
//! dissemination trees, gossip, distributed route adaptation, playout
//! buffering, session heartbeats and failover ([`engine`]); and everything
//! observable lands in typed metric rows with stable CSV encodings
//! ([`metrics`]).
//!
//! Two delivery schemes share the same scenario and noise machinery:
//!
//! * **overlay** — media rides per-flow dissemination trees between
//!   surrogates, with transcoded down-steps, gossip-fed switching and
//!   jitter-masked playout;
//! * **unicast** — the baseline: each source sends one copy directly to
//!   every receiver over the same wide-area latencies, with the same
//!   playout deadline but no adaptation.
//!
//! Runs are reproducible: a single seeded generator drives all noise, and
//! event ordering is a total order over (time, insertion sequence), so one
//! scenario and seed always produce byte-identical CSV files.

mod engine;
mod link;
mod metrics;
mod scenario;

pub use engine::{
    compare_unicast, run_scenario, run_unicast, CalibrationRecord, FailoverSummary, RunOutput,
    SimError, ViewSummary,
};
pub use link::{Ewma, LinkModel};
pub use metrics::{
    sample_std, BufferRow, FrameAccount, LatencyRow, MetricsLog, RateRow, SessionRow,
    SwitchRow, TimeoutRow,
};
pub use scenario::{
    BuiltScenario, Defaults, Event, EventKind, LinkNoise, Override, Participant, Region,
    RegionLink, Scenario, ScenarioError, TranscodeConfig,
};
