//! The discrete-event loop: media, control, and session traffic on one clock.
//!
//! Everything observable happens inside events ordered by (time,
//! insertion sequence), with time kept in integer microseconds. A single
//! seeded generator supplies all randomness — per-packet link noise, probe
//! samples, and evaluation phases — drawn in event-handler order, so a
//! scenario and seed fully determine a run.
//!
//! One simulated conference interleaves five strands:
//!
//! * **media** — each source captures a frame every frame interval; frames
//!   fan out along the flow's dissemination tree edge by edge, fragment by
//!   fragment, each fragment drawing its own link-delay sample. A relay
//!   forwards a frame once its last fragment arrives, charging transcode
//!   latency whenever the outgoing rate is below the incoming one. Every
//!   receiver feeds fragments into a per-flow playout buffer that releases
//!   at capture time plus the fixed network budget.
//! * **measurement** — probes sample every link twice a second and fold
//!   into an exponentially weighted average before updating the routing
//!   engine, so routing sees smoothed latencies, not raw noise.
//! * **adaptation** — each surrogate wakes at a randomized cadence,
//!   settles per-branch rates, and evaluates a latency repair or rate
//!   switch against its gossip tables; accepted moves are logged.
//!   Playout-side spread estimates tighten each pair's routing deadline
//!   through the hysteresis tracker, which is what lets jitter on a path
//!   trigger a reroute long before frames are actually lost.
//! * **session** — members heartbeat each second and broadcast rosters
//!   every five when they believe themselves initiator; a crashed member
//!   is expired after three silent seconds, the lowest surviving id
//!   promotes itself, bumps the epoch, and the routing state drops the
//!   dead flow, re-homing any orphaned subtrees.
//! * **script** — scenario events inject jitter episodes, capacity
//!   changes, graceful leaves, and crashes at fixed instants.
//!
//! The unicast baseline ([`run_unicast`]) reuses the same capture clock,
//! link models, and playout deadline but sends every flow directly from
//! source device to receiver device with no surrogates, no adaptation, and
//! no session machinery — the comparison scheme the overlay is judged
//! against.
//!
//! Device clocks may be skewed; surrogates calibrate the offset at join
//! time with symmetric request/response exchanges and rewrite media
//! timestamps onto the surrogate clock, so downstream buffers see true
//! capture times up to the calibration error. The unicast baseline has no
//! such service and trusts sender timestamps as-is.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::jitter::{BoundTracker, DelayBudget, FrameStatus, JitterBuffer, PushOutcome};
use crate::model::{Kbps, SurrogateId};
use crate::routing::{
    admit_path_broadcast, sync_flow_tables, PathBroadcast, PeerTables, RoutingError,
    RoutingState,
};
use crate::session::{
    CalibratedClock, SessionChange, SessionState, SessionView, HEARTBEAT_PERIOD_MS,
    ROSTER_PERIOD_MS,
};
use crate::wire::fragments_per_frame;

use super::link::{Ewma, LinkModel};
use super::metrics::{
    BufferRow, FrameAccount, LatencyRow, MetricsLog, RateRow, SessionRow, SwitchRow,
    TimeoutRow,
};
use super::scenario::{BuiltScenario, EventKind, Scenario, ScenarioError};

/// Metrics sampling interval.
const TICK_PERIOD_MS: u64 = 100;
/// Link probe interval.
const PROBE_PERIOD_MS: u64 = 500;
/// Smoothing gain for probed link latency.
const PROBE_EWMA_ALPHA: f64 = 0.3;
/// Gossip broadcast interval.
const GOSSIP_PERIOD_MS: u64 = 1_000;
/// A surrogate re-evaluates its routes after a uniform pause in this range.
const EVAL_GAP_US: std::ops::Range<u64> = 500_000..1_500_000;
/// Gossip entries older than this are dropped before evaluation.
const CUSTAB_MAX_AGE_MS: f64 = 5_000.0;
/// Relay bookkeeping for frames older than this is pruned.
const SLOT_RETENTION_MS: u64 = 2_000;
/// Clock-calibration exchanges performed at join.
const CALIBRATION_EXCHANGES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    /// No tree assignment can meet the delay bounds: the session cannot run.
    #[error("session infeasible: {0}")]
    Infeasible(RoutingError),
    #[error("routing failure: {0}")]
    Routing(RoutingError),
    #[error("event schedule deadlocked at {time_ms} ms with simulated time remaining")]
    Deadlock { time_ms: u64 },
}

impl From<RoutingError> for SimError {
    fn from(e: RoutingError) -> Self {
        match e {
            RoutingError::Infeasible { .. } => SimError::Infeasible(e),
            other => SimError::Routing(other),
        }
    }
}

/// What one member believed about the session when the run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSummary {
    pub initiator: u32,
    pub epoch: u64,
    pub members: Vec<u32>,
}

/// Join-time clock calibration result for one member.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub member: u32,
    pub skew_true_ms: f64,
    pub skew_estimated_ms: f64,
}

impl CalibrationRecord {
    pub fn error_ms(&self) -> f64 {
        (self.skew_estimated_ms - self.skew_true_ms).abs()
    }
}

/// Timeline of an initiator crash and the recovery from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FailoverSummary {
    pub failed: u32,
    pub crashed_at_ms: u64,
    /// First instant any surviving view expired the silent member.
    pub detected_at_ms: Option<u64>,
    /// First instant every surviving view agreed on roster, initiator, and
    /// epoch, with the failed member gone.
    pub converged_at_ms: Option<u64>,
}

/// Everything one simulation run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub final_views: BTreeMap<u32, ViewSummary>,
    pub calibration: Vec<CalibrationRecord>,
    pub failover: Option<FailoverSummary>,
    pub events_processed: u64,
}

impl RunOutput {
    pub fn write_csvs(&self, dir: &Path) -> std::io::Result<()> {
        self.log.write_csvs(dir)
    }

    /// Frame conservation across every (flow, receiver) pair.
    pub fn frames_conserved(&self) -> bool {
        self.log.frames.iter().all(FrameAccount::conserved)
    }
}

/// Runs the overlay scheme. `seed` and `duration_s` override the scenario
/// when given.
pub fn run_scenario(
    scenario: &Scenario,
    seed: Option<u64>,
    duration_s: Option<f64>,
) -> Result<RunOutput, SimError> {
    let built = scenario.build()?;
    Sim::new(
        scenario,
        &built,
        seed.unwrap_or(scenario.seed),
        duration_s.unwrap_or(scenario.duration_s),
        true,
    )?
    .run()
}

/// Runs the unicast baseline over the same scenario.
pub fn run_unicast(
    scenario: &Scenario,
    seed: Option<u64>,
    duration_s: Option<f64>,
) -> Result<RunOutput, SimError> {
    let built = scenario.build()?;
    Sim::new(
        scenario,
        &built,
        seed.unwrap_or(scenario.seed),
        duration_s.unwrap_or(scenario.duration_s),
        false,
    )?
    .run()
}

/// Runs both schemes with the same seed and returns (overlay, unicast).
pub fn compare_unicast(
    scenario: &Scenario,
    seed: Option<u64>,
    duration_s: Option<f64>,
) -> Result<(RunOutput, RunOutput), SimError> {
    let overlay = run_scenario(scenario, seed, duration_s)?;
    let unicast = run_unicast(scenario, seed, duration_s)?;
    Ok((overlay, unicast))
}

/// (flow, receiver) — the unit of playout, accounting, and per-pair bounds.
type Pair = (SurrogateId, SurrogateId);

#[derive(Debug)]
enum Ev {
    /// A source device captures one frame.
    Capture { source: SurrogateId },
    /// One media fragment lands at a surrogate (overlay) or device (unicast).
    Fragment {
        to: SurrogateId,
        flow: SurrogateId,
        ts_ms: u64,
        frag: u32,
        frags: u32,
        rate_kbps: Kbps,
        cap_true_us: u64,
    },
    /// A frame's release instant at one receiver has passed.
    Release {
        receiver: SurrogateId,
        flow: SurrogateId,
        ts_ms: u64,
    },
    /// A surrogate wakes to settle rates and evaluate switches.
    Eval { node: SurrogateId },
    GossipSend { node: SurrogateId },
    GossipRecv { to: SurrogateId, msg: PathBroadcast },
    /// All links are probed and smoothed latencies fed to routing.
    Probe,
    /// Metrics sampling and deadline tracking.
    Tick,
    HeartbeatSend { node: SurrogateId },
    HeartbeatRecv { from: SurrogateId, to: SurrogateId },
    RosterSend { node: SurrogateId },
    RosterRecv {
        to: SurrogateId,
        epoch: u64,
        initiator: SurrogateId,
        members: BTreeSet<SurrogateId>,
    },
    /// A goodbye from a gracefully leaving member reaches a peer.
    ByeRecv { from: SurrogateId, to: SurrogateId },
    /// A newcomer's existence reaches a peer.
    AnnounceRecv { member: SurrogateId, to: SurrogateId },
    /// A late participant joins the session.
    Join { node: SurrogateId },
    /// The next scripted scenario event fires.
    Scripted { index: usize },
    End,
}

/// Heap entry; the heap is a max-heap, so ordering is reversed to pop the
/// earliest (time, sequence) first.
struct QEv {
    at_us: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for QEv {
    fn eq(&self, other: &Self) -> bool {
        (self.at_us, self.seq) == (other.at_us, other.seq)
    }
}
impl Eq for QEv {}
impl PartialOrd for QEv {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QEv {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.at_us, other.seq).cmp(&(self.at_us, self.seq))
    }
}

/// Arrival bookkeeping for one frame at one node.
#[derive(Debug)]
struct RelaySlot {
    expected: u32,
    received: u32,
    rate_kbps: Kbps,
    forwarded: bool,
}

/// Running outcome counters for one (flow, receiver) pair.
#[derive(Debug, Default)]
struct PairAccount {
    dispatched: u64,
    on_time: u64,
    concealed: u64,
    missed: u64,
    /// Frames still unresolved when the pair was retired mid-run.
    frozen_in_flight: u64,
    /// Highest capture timestamp already classified; blocks re-dispatch.
    classified_watermark: Option<u64>,
}

struct Sim<'a> {
    built: &'a BuiltScenario,
    overlay: bool,
    duration_us: u64,
    frame_interval_us: u64,
    frame_rate: u8,
    rng: ChaCha12Rng,
    queue: BinaryHeap<QEv>,
    seq: u64,
    now_us: u64,
    events_processed: u64,

    // Overlay control plane.
    state: Option<RoutingState>,
    tables: BTreeMap<SurrogateId, PeerTables>,
    measured: BTreeMap<(SurrogateId, SurrogateId), Ewma>,

    // Link noise, shared by both schemes.
    links: BTreeMap<(SurrogateId, SurrogateId), LinkModel>,

    // Membership.
    active: BTreeSet<SurrogateId>,
    dead: BTreeSet<SurrogateId>,
    session: SessionState,
    views: BTreeMap<SurrogateId, SessionView>,
    offset_est: BTreeMap<SurrogateId, f64>,

    // Playout and accounting.
    bufs: BTreeMap<Pair, JitterBuffer>,
    trackers: BTreeMap<Pair, BoundTracker>,
    pending: BTreeMap<(SurrogateId, SurrogateId, u64), RelaySlot>,
    outstanding: BTreeMap<Pair, BTreeSet<u64>>,
    accounts: BTreeMap<Pair, PairAccount>,
    arrived: BTreeMap<Pair, Vec<f64>>,

    log: MetricsLog,
    calibration: Vec<CalibrationRecord>,
    failover: Option<FailoverSummary>,
}

impl<'a> Sim<'a> {
    fn new(
        scenario: &Scenario,
        built: &'a BuiltScenario,
        seed: u64,
        duration_s: f64,
        overlay: bool,
    ) -> Result<Self, SimError> {
        if !(duration_s > 0.0) {
            return Err(SimError::Scenario(ScenarioError::BadDuration(duration_s)));
        }
        let duration_us = (duration_s * 1e6).round() as u64;
        let frame_interval_us = 1_000_000 / scenario.frame_rate as u64;

        let founders: BTreeSet<SurrogateId> = built
            .join_at_ms
            .iter()
            .filter(|(_, &at)| at == 0.0)
            .map(|(&id, _)| id)
            .collect();
        let state = if overlay {
            let (state, _basic) = RoutingState::bootstrap(
                built.topo.clone(),
                built.transcode.clone(),
                built.ladder.clone(),
                built.bounds.clone(),
                &founders,
            )?;
            Some(state)
        } else {
            None
        };

        let links = built
            .noise
            .iter()
            .map(|(&pair, noise)| {
                let base = built.topo.link(pair.0, pair.1).expect("built link").latency_ms;
                (pair, LinkModel::new(base, noise.sigma_ms))
            })
            .collect();

        let mut sim = Sim {
            built,
            overlay,
            duration_us,
            frame_interval_us,
            frame_rate: scenario.frame_rate,
            rng: ChaCha12Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            seq: 0,
            now_us: 0,
            events_processed: 0,
            state,
            tables: BTreeMap::new(),
            measured: BTreeMap::new(),
            links,
            active: BTreeSet::new(),
            dead: BTreeSet::new(),
            session: SessionState::new(),
            views: BTreeMap::new(),
            offset_est: BTreeMap::new(),
            bufs: BTreeMap::new(),
            trackers: BTreeMap::new(),
            pending: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            accounts: BTreeMap::new(),
            arrived: BTreeMap::new(),
            log: MetricsLog::default(),
            calibration: Vec::new(),
            failover: None,
        };

        sim.push(duration_us, Ev::End);
        sim.push(ms_to_us(TICK_PERIOD_MS), Ev::Tick);
        if overlay {
            sim.push(ms_to_us(PROBE_PERIOD_MS), Ev::Probe);
        }

        // Founding members are live from the first instant.
        for &id in &founders {
            sim.admit_member(id, true);
        }
        // Late joiners arrive by scheduled event.
        for (&id, &at_ms) in &built.join_at_ms {
            if at_ms > 0.0 {
                sim.push(ms_f_to_us(at_ms), Ev::Join { node: id });
            }
        }
        // Scripted events.
        for (i, e) in built.events.iter().enumerate() {
            sim.push((e.at_s * 1e6).round() as u64, Ev::Scripted { index: i });
        }
        Ok(sim)
    }

    fn push(&mut self, at_us: u64, ev: Ev) {
        if at_us > self.duration_us && !matches!(ev, Ev::End) {
            return; // nothing beyond the horizon ever runs
        }
        self.seq += 1;
        self.queue.push(QEv {
            at_us,
            seq: self.seq,
            ev,
        });
    }

    fn now_ms(&self) -> f64 {
        self.now_us as f64 / 1000.0
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        loop {
            let Some(q) = self.queue.pop() else {
                return Err(SimError::Deadlock {
                    time_ms: self.now_us / 1000,
                });
            };
            self.now_us = q.at_us;
            self.events_processed += 1;
            match q.ev {
                Ev::End => break,
                Ev::Capture { source } => self.on_capture(source),
                Ev::Fragment {
                    to,
                    flow,
                    ts_ms,
                    frag,
                    frags,
                    rate_kbps,
                    cap_true_us,
                } => self.on_fragment(to, flow, ts_ms, frag, frags, rate_kbps, cap_true_us),
                Ev::Release {
                    receiver,
                    flow,
                    ts_ms,
                } => self.on_release(receiver, flow, ts_ms),
                Ev::Eval { node } => self.on_eval(node),
                Ev::GossipSend { node } => self.on_gossip_send(node),
                Ev::GossipRecv { to, msg } => self.on_gossip_recv(to, msg),
                Ev::Probe => self.on_probe(),
                Ev::Tick => self.on_tick(),
                Ev::HeartbeatSend { node } => self.on_heartbeat_send(node),
                Ev::HeartbeatRecv { from, to } => {
                    let now = self.now_ms();
                    if let Some(v) = self.views.get_mut(&to) {
                        v.record_heartbeat(from, now);
                    }
                }
                Ev::RosterSend { node } => self.on_roster_send(node),
                Ev::RosterRecv {
                    to,
                    epoch,
                    initiator,
                    members,
                } => self.on_roster_recv(to, epoch, initiator, members),
                Ev::ByeRecv { from, to } => {
                    if let Some(v) = self.views.get_mut(&to) {
                        v.retire(from);
                    }
                    self.check_convergence();
                }
                Ev::AnnounceRecv { member, to } => {
                    let now = self.now_ms();
                    if let Some(v) = self.views.get_mut(&to) {
                        v.admit(member, now);
                    }
                }
                Ev::Join { node } => self.on_join(node)?,
                Ev::Scripted { index } => self.on_scripted(index)?,
            }
        }
        Ok(self.finish())
    }

    // ----- membership ---------------------------------------------------

    /// Brings a member online: calibration, buffers, recurring events, and
    /// (for founders) the initial session view.
    fn admit_member(&mut self, id: SurrogateId, founder: bool) {
        self.active.insert(id);
        match self.session.join(id) {
            SessionChange::Created { initiator } => self.log_session(
                id.0,
                "created",
                format!("initiator={}", initiator.0),
            ),
            _ => self.log_session(id.0, "joined", String::new()),
        }

        if self.overlay {
            self.calibrate(id);
        }

        // Playout pairs in both directions with every other active member.
        let peers: Vec<SurrogateId> =
            self.active.iter().copied().filter(|&p| p != id).collect();
        for &p in &peers {
            self.ensure_pair(p, id);
            self.ensure_pair(id, p);
        }

        // Recurring per-member events. Captures align to the member's own
        // frame grid; evaluation phases are randomized so surrogates do not
        // act in lockstep.
        self.push(self.now_us + self.frame_interval_us, Ev::Capture { source: id });
        if self.overlay {
            let phase = self.rng.gen_range(EVAL_GAP_US);
            self.push(self.now_us + phase, Ev::Eval { node: id });
            self.push(
                self.now_us + ms_to_us(GOSSIP_PERIOD_MS),
                Ev::GossipSend { node: id },
            );
            self.push(
                self.now_us + ms_to_us(HEARTBEAT_PERIOD_MS),
                Ev::HeartbeatSend { node: id },
            );
            self.push(
                self.now_us + ms_to_us(ROSTER_PERIOD_MS),
                Ev::RosterSend { node: id },
            );
            let initiator = self.session.initiator().expect("session not empty");
            let view_members: Vec<SurrogateId> = if founder {
                self.built
                    .join_at_ms
                    .iter()
                    .filter(|(_, &at)| at == 0.0)
                    .map(|(&m, _)| m)
                    .collect()
            } else {
                self.active.iter().copied().collect()
            };
            let now = self.now_ms();
            self.views
                .insert(id, SessionView::new(id, initiator, view_members, now));
        }
    }

    /// Models the join-time clock calibration: request/response exchanges
    /// between the device (skewed clock) and its surrogate (true clock)
    /// over the symmetric last mile. The surrogate keeps the offset and
    /// rewrites media timestamps with it.
    fn calibrate(&mut self, id: SurrogateId) {
        let skew = self.built.skew_ms[&id];
        let lm = self.built.topo.last_mile(id).expect("participant exists");
        let (up, down) = (lm.uplink_delay_ms, lm.downlink_delay_ms);
        let mut clock = CalibratedClock::new();
        let mut offset = 0.0;
        for i in 0..CALIBRATION_EXCHANGES {
            let t_true = self.now_ms() + i as f64; // successive exchanges
            let t1 = t_true + skew;
            let t2 = t_true + up;
            let t3 = t2;
            let t4 = t_true + up + down + skew;
            offset = clock.observe_exchange(t1, t2, t3, t4);
        }
        self.offset_est.insert(id, offset);
        let record = CalibrationRecord {
            member: id.0,
            skew_true_ms: skew,
            skew_estimated_ms: -offset,
        };
        self.log_session(
            id.0,
            "calibrated",
            format!(
                "skew_est_ms={:.3},skew_true_ms={:.3}",
                record.skew_estimated_ms, record.skew_true_ms
            ),
        );
        self.calibration.push(record);
    }

    fn ensure_pair(&mut self, flow: SurrogateId, receiver: SurrogateId) {
        let key = (flow, receiver);
        if self.bufs.contains_key(&key) {
            return;
        }
        let overlay_budget = self.built.budgets[&key];
        // The unicast buffer sits on the receiving device, after the
        // downlink, so its arrival deadline absorbs the render-side
        // allowance; both schemes render a frame at the same absolute
        // instant.
        let budget = if self.overlay {
            overlay_budget
        } else {
            DelayBudget::new(
                overlay_budget.end_to_end_ms,
                overlay_budget.capture_side_ms,
                0.0,
            )
        };
        self.bufs.insert(key, JitterBuffer::new(&budget));
        self.trackers.insert(key, BoundTracker::new(budget));
        self.outstanding.insert(key, BTreeSet::new());
        self.accounts.entry(key).or_default();
    }

    fn on_join(&mut self, id: SurrogateId) -> Result<(), SimError> {
        if let Some(state) = self.state.as_mut() {
            state.join_member(id)?;
        }
        self.admit_member(id, false);
        if self.overlay {
            // Peers learn of the newcomer after one link delay.
            let peers: Vec<SurrogateId> =
                self.active.iter().copied().filter(|&p| p != id).collect();
            for p in peers {
                let delay = self.link_delay(id, p);
                self.push(
                    self.now_us + delay,
                    Ev::AnnounceRecv { member: id, to: p },
                );
            }
        }
        Ok(())
    }

    /// Removes a member's playout state, freezing unresolved frames.
    fn retire_media(&mut self, n: SurrogateId) {
        let pairs: Vec<Pair> = self
            .bufs
            .keys()
            .filter(|&&(f, r)| f == n || r == n)
            .copied()
            .collect();
        for key in pairs {
            self.bufs.remove(&key);
            self.trackers.remove(&key);
            self.arrived.remove(&key);
            if let Some(set) = self.outstanding.remove(&key) {
                self.accounts.entry(key).or_default().frozen_in_flight += set.len() as u64;
            }
        }
        self.pending.retain(|&(node, flow, _), _| node != n && flow != n);
        self.tables.remove(&n);
        for t in self.tables.values_mut() {
            t.forget_flow(n);
        }
    }

    fn graceful_leave(&mut self, n: SurrogateId) -> Result<(), SimError> {
        if !self.active.contains(&n) {
            return Ok(());
        }
        self.log_session(n.0, "goodbye", String::new());
        match self.session.leave(n) {
            SessionChange::InitiatorChanged { new_initiator, epoch } => self.log_session(
                new_initiator.0,
                "initiator",
                format!("epoch={epoch}"),
            ),
            SessionChange::Closed => self.log_session(n.0, "closed", String::new()),
            _ => {}
        }
        if let Some(state) = self.state.as_mut() {
            if state.members().contains(&n) {
                state.leave_member(n)?;
            }
        }
        self.active.remove(&n);
        self.views.remove(&n);
        self.retire_media(n);
        if self.overlay {
            let peers: Vec<SurrogateId> = self.active.iter().copied().collect();
            for p in peers {
                let delay = self.link_delay(n, p);
                self.push(self.now_us + delay, Ev::ByeRecv { from: n, to: p });
            }
        }
        Ok(())
    }

    fn crash(&mut self, n: SurrogateId) {
        if !self.active.contains(&n) {
            return;
        }
        self.log_session(n.0, "crash-injected", String::new());
        self.active.remove(&n);
        self.dead.insert(n);
        self.views.remove(&n);
        self.failover = Some(FailoverSummary {
            failed: n.0,
            crashed_at_ms: self.now_us / 1000,
            detected_at_ms: None,
            converged_at_ms: None,
        });
        // Media and routing state stay put: survivors must notice the
        // silence themselves.
    }

    // ----- media --------------------------------------------------------

    fn on_capture(&mut self, source: SurrogateId) {
        if !self.active.contains(&source) {
            return; // departed; the capture clock dies with the member
        }
        let cap_true_us = self.now_us;
        // The wire timestamp: device clock, corrected by the surrogate's
        // calibrated offset (overlay) or trusted as-is (unicast).
        let skew = self.built.skew_ms[&source];
        let correction = if self.overlay {
            self.offset_est.get(&source).copied().unwrap_or(0.0)
        } else {
            0.0
        };
        let ts_ms = (cap_true_us as f64 / 1000.0 + skew + correction).round().max(0.0) as u64;

        if self.overlay {
            let Some(state) = self.state.as_ref() else { return };
            let Some(tree) = state.tree(source) else { return };
            let up = self
                .built
                .topo
                .last_mile(source)
                .expect("participant")
                .uplink_delay_ms;
            let source_rate = state.rate_at(source, source);
            let children: Vec<(SurrogateId, Kbps)> = tree
                .children(source)
                .into_iter()
                .filter_map(|c| tree.edge_rate(source, c).map(|r| (c, r)))
                .collect();
            let depart_us = cap_true_us + ms_f_to_us(up);
            for (child, rate) in children {
                // Source-side rate conversion is free: the encoder emits
                // each outgoing rung directly.
                self.dispatch(source, source, child, ts_ms, cap_true_us, depart_us, source_rate, rate, true);
            }
        } else {
            let lm = self.built.topo.last_mile(source).expect("participant");
            let source_rate = lm.source_rate_kbps;
            let up = lm.uplink_delay_ms;
            let receivers: Vec<SurrogateId> = self
                .active
                .iter()
                .copied()
                .filter(|&r| r != source)
                .collect();
            let depart_us = cap_true_us + ms_f_to_us(up);
            for r in receivers {
                let accept = self.built.topo.accept_rate(r, source).unwrap_or(source_rate);
                let rate = accept.min(source_rate);
                self.dispatch(source, source, r, ts_ms, cap_true_us, depart_us, source_rate, rate, true);
            }
        }
        self.push(self.now_us + self.frame_interval_us, Ev::Capture { source });
    }

    /// Sends one frame from `from` toward `to` at `out_rate`, fragment by
    /// fragment. `free_transcode` marks source-side conversions.
    #[allow(clippy::too_many_arguments)]
    fn dispatch(
        &mut self,
        flow: SurrogateId,
        from: SurrogateId,
        to: SurrogateId,
        ts_ms: u64,
        cap_true_us: u64,
        depart_us: u64,
        in_rate: Kbps,
        out_rate: Kbps,
        free_transcode: bool,
    ) {
        if out_rate == 0 || !self.active.contains(&to) {
            return;
        }
        let key = (flow, to);
        let Some(outstanding) = self.outstanding.get_mut(&key) else { return };
        let account = self.accounts.entry(key).or_default();
        // Never dispatch the same frame to the same receiver twice (a
        // switch can briefly give a receiver two feeding parents).
        if account.classified_watermark.is_some_and(|w| ts_ms <= w)
            || outstanding.contains(&ts_ms)
        {
            return;
        }
        let Ok(frags) = fragments_per_frame(out_rate.min(u16::MAX as u32) as u16, self.frame_rate)
        else {
            return;
        };
        let phi = if free_transcode {
            0.0
        } else {
            self.built.transcode.latency(from, in_rate, out_rate)
        };
        outstanding.insert(ts_ms);
        account.dispatched += 1;

        // In the unicast scheme the path is device-to-device, so the
        // receiver's downlink is part of the transit delay.
        let down_us = if self.overlay {
            0
        } else {
            ms_f_to_us(self.built.budgets[&key].render_side_ms)
        };
        let link = self.links[&(from, to)];
        let send_us = depart_us + ms_f_to_us(phi);
        for frag in 0..frags {
            let transit = link.sample(&mut self.rng);
            let arrival = send_us + ms_f_to_us(transit) + down_us;
            self.push(
                arrival,
                Ev::Fragment {
                    to,
                    flow,
                    ts_ms,
                    frag,
                    frags,
                    rate_kbps: out_rate,
                    cap_true_us,
                },
            );
        }
        // The release verdict for this frame at this receiver.
        let release_ms = self.bufs[&key].release_instant_ms(ts_ms);
        let release_us = ((release_ms * 1000.0).ceil() as u64).max(self.now_us) + 1;
        self.push(
            release_us,
            Ev::Release {
                receiver: to,
                flow,
                ts_ms,
            },
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn on_fragment(
        &mut self,
        to: SurrogateId,
        flow: SurrogateId,
        ts_ms: u64,
        frag: u32,
        frags: u32,
        rate_kbps: Kbps,
        cap_true_us: u64,
    ) {
        if !self.active.contains(&to) {
            return;
        }
        let key = (flow, to);
        let arrival_ms = self.now_ms();
        // Feed playout; late fragments become timeout events.
        if let Some(buf) = self.bufs.get_mut(&key) {
            let outcome = buf.push_fragment(ts_ms, frag, frags, arrival_ms);
            if matches!(outcome, PushOutcome::TooLate | PushOutcome::TooOld) {
                let deadline = buf.network_budget_ms();
                self.log.timeouts.push(TimeoutRow {
                    time_ms: self.now_us / 1000,
                    flow: flow.0,
                    receiver: to.0,
                    delay_ms: arrival_ms - ts_ms as f64,
                    deadline_ms: deadline,
                });
            }
        } else {
            return;
        }

        // Frame-completion bookkeeping: forwarding and realized latency.
        let slot = self
            .pending
            .entry((to, flow, ts_ms))
            .or_insert(RelaySlot {
                expected: frags,
                received: 0,
                rate_kbps,
                forwarded: false,
            });
        slot.received += 1;
        if slot.received < slot.expected || slot.forwarded {
            return;
        }
        slot.forwarded = true;
        let in_rate = slot.rate_kbps;

        // Realized device-to-device latency of this frame.
        let transit_ms = (self.now_us - cap_true_us) as f64 / 1000.0;
        let e2e = if self.overlay {
            transit_ms + self.built.budgets[&key].render_side_ms
        } else {
            transit_ms
        };
        self.arrived.entry(key).or_default().push(e2e);

        if !self.overlay {
            return;
        }
        // Relay the completed frame to current tree children.
        let Some(state) = self.state.as_ref() else { return };
        let Some(tree) = state.tree(flow) else { return };
        if !tree.contains(to) {
            return; // switched out from under the frame mid-flight
        }
        let children: Vec<(SurrogateId, Kbps)> = tree
            .children(to)
            .into_iter()
            .filter_map(|c| tree.edge_rate(to, c).map(|r| (c, r)))
            .collect();
        let depart_us = self.now_us;
        for (child, rate) in children {
            self.dispatch(flow, to, child, ts_ms, cap_true_us, depart_us, in_rate, rate, false);
        }
    }

    fn on_release(&mut self, receiver: SurrogateId, flow: SurrogateId, ts_ms: u64) {
        let key = (flow, receiver);
        let now = self.now_ms();
        let Some(buf) = self.bufs.get_mut(&key) else { return };
        let released = buf.pop_due(now);
        for r in released {
            let account = self.accounts.entry(key).or_default();
            match r.status {
                FrameStatus::Complete => account.on_time += 1,
                FrameStatus::Concealed { .. } => account.concealed += 1,
            }
            account.classified_watermark = Some(
                account
                    .classified_watermark
                    .map_or(r.capture_ts_ms, |w| w.max(r.capture_ts_ms)),
            );
            if let Some(set) = self.outstanding.get_mut(&key) {
                set.remove(&r.capture_ts_ms);
            }
        }
        // If this frame's instant passed and it never made it into the
        // buffer, it is missed outright.
        if let Some(set) = self.outstanding.get_mut(&key) {
            if set.remove(&ts_ms) {
                let account = self.accounts.entry(key).or_default();
                account.missed += 1;
                account.classified_watermark = Some(
                    account.classified_watermark.map_or(ts_ms, |w| w.max(ts_ms)),
                );
            }
        }
    }

    // ----- overlay control plane ---------------------------------------

    fn on_eval(&mut self, node: SurrogateId) {
        if !self.active.contains(&node) || !self.overlay {
            return;
        }
        let now = self.now_ms();
        if let Some(t) = self.tables.get_mut(&node) {
            t.prune_stale(now, CUSTAB_MAX_AGE_MS);
        }
        let flows: Vec<SurrogateId> = self
            .state
            .as_ref()
            .map(|s| s.flows().collect())
            .unwrap_or_default();
        for flow in flows {
            let state = self.state.as_mut().expect("overlay state");
            state.settle_flow(flow);
            sync_flow_tables(state, &mut self.tables, flow);
            if flow == node {
                continue;
            }
            let in_tree = state.tree(flow).is_some_and(|t| t.contains(node));
            if !in_tree {
                continue;
            }
            let Some(tbl) = self.tables.get(&node) else { continue };
            let state = self.state.as_ref().expect("overlay state");
            let proposal = state
                .evaluate_repair(tbl, flow, node)
                .or_else(|| state.evaluate_switch(tbl, flow, node));
            if let Some(p) = proposal {
                let state = self.state.as_mut().expect("overlay state");
                if let Ok(rec) = state.apply_switch(&p) {
                    debug_assert!(state.check_invariants().is_ok());
                    self.log.switches.push(SwitchRow {
                        time_ms: self.now_us / 1000,
                        flow: rec.flow.0,
                        node: rec.node.0,
                        old_parent: rec.old_parent.0,
                        new_parent: rec.new_parent.0,
                        old_rate_kbps: rec.old_rate_kbps,
                        new_rate_kbps: rec.new_rate_kbps,
                        kind: match rec.kind {
                            crate::routing::ProposalKind::RateImprove => "rate-improve",
                            crate::routing::ProposalKind::LatencyRepair => "latency-repair",
                        },
                    });
                    let state = self.state.as_ref().expect("overlay state");
                    sync_flow_tables(state, &mut self.tables, rec.flow);
                }
            }
        }
        let gap = self.rng.gen_range(EVAL_GAP_US);
        self.push(self.now_us + gap, Ev::Eval { node });
    }

    fn on_gossip_send(&mut self, node: SurrogateId) {
        if !self.active.contains(&node) {
            return;
        }
        let Some(state) = self.state.as_ref() else { return };
        let mut msgs: Vec<PathBroadcast> = Vec::new();
        for flow in state.flows() {
            let Some(tree) = state.tree(flow) else { continue };
            if !tree.contains(node) {
                continue;
            }
            let requests = state.flow_requests(flow);
            let delays = state.flow_delays(flow);
            let rate = if node == flow {
                state.rate_at(flow, flow)
            } else {
                tree.rate_into(node).unwrap_or(0)
            };
            msgs.push(PathBroadcast {
                flow,
                sender: node,
                rate_kbps: rate,
                max_rate_kbps: requests.ceiling.get(&node).copied().unwrap_or(rate),
                path_latency_ms: delays.get(&node).copied().unwrap_or(0.0),
                vm_profile: String::new(),
            });
        }
        let peers: Vec<SurrogateId> = self
            .active
            .iter()
            .copied()
            .filter(|&p| p != node)
            .collect();
        for msg in msgs {
            for &p in &peers {
                let delay = self.link_delay(node, p);
                self.push(
                    self.now_us + delay,
                    Ev::GossipRecv {
                        to: p,
                        msg: msg.clone(),
                    },
                );
            }
        }
        self.push(
            self.now_us + ms_to_us(GOSSIP_PERIOD_MS),
            Ev::GossipSend { node },
        );
    }

    fn on_gossip_recv(&mut self, to: SurrogateId, msg: PathBroadcast) {
        if !self.active.contains(&to) {
            return;
        }
        let Some(state) = self.state.as_ref() else { return };
        let tables = self
            .tables
            .entry(to)
            .or_insert_with(|| PeerTables::new(to));
        let now = self.now_us as f64 / 1000.0;
        let _ = admit_path_broadcast(tables, state.topo(), state.transcode(), &msg, now);
    }

    fn on_probe(&mut self) {
        let keys: Vec<(SurrogateId, SurrogateId)> = self.links.keys().copied().collect();
        for key in keys {
            if !self.active.contains(&key.0) || !self.active.contains(&key.1) {
                continue;
            }
            let sample = self.links[&key].sample(&mut self.rng);
            let smoothed = self
                .measured
                .entry(key)
                .or_insert_with(|| Ewma::new(PROBE_EWMA_ALPHA))
                .observe(sample);
            if let Some(state) = self.state.as_mut() {
                let _ = state.observe_link_latency(key.0, key.1, smoothed);
            }
        }
        self.push(self.now_us + ms_to_us(PROBE_PERIOD_MS), Ev::Probe);
    }

    // ----- session ------------------------------------------------------

    fn on_heartbeat_send(&mut self, node: SurrogateId) {
        if !self.active.contains(&node) {
            return;
        }
        let peers: Vec<SurrogateId> = self
            .active
            .iter()
            .copied()
            .filter(|&p| p != node)
            .collect();
        for p in peers {
            let delay = self.link_delay(node, p);
            self.push(
                self.now_us + delay,
                Ev::HeartbeatRecv { from: node, to: p },
            );
        }
        // Liveness audit rides the same timer.
        let now = self.now_ms();
        let was_initiator = self
            .views
            .get(&node)
            .map(SessionView::is_initiator)
            .unwrap_or(false);
        let expired = self
            .views
            .get_mut(&node)
            .map(|v| v.expire_silent(now))
            .unwrap_or_default();
        for e in expired {
            self.log_session(node.0, "expired", format!("silent={}", e.0));
            self.on_member_expired(e);
        }
        if let Some(v) = self.views.get(&node) {
            if v.is_initiator() && !was_initiator {
                self.log_session(node.0, "failover", format!("epoch={}", v.epoch()));
            }
        }
        self.check_convergence();
        self.push(
            self.now_us + ms_to_us(HEARTBEAT_PERIOD_MS),
            Ev::HeartbeatSend { node },
        );
    }

    /// First detection of a silent member tears its media down globally;
    /// later detections by other views are no-ops.
    fn on_member_expired(&mut self, e: SurrogateId) {
        if !self.dead.contains(&e) {
            return; // spurious (cannot happen with live heartbeats)
        }
        if let Some(f) = self.failover.as_mut() {
            if f.failed == e.0 && f.detected_at_ms.is_none() {
                f.detected_at_ms = Some(self.now_us / 1000);
            }
        }
        let in_state = self
            .state
            .as_ref()
            .map(|s| s.members().contains(&e))
            .unwrap_or(false);
        if in_state {
            if let Some(state) = self.state.as_mut() {
                if state.leave_member(e).is_ok() {
                    self.log_session(e.0, "retired", "by=expiry".into());
                }
            }
            self.session.leave(e);
            self.retire_media(e);
        }
    }

    fn on_roster_send(&mut self, node: SurrogateId) {
        if !self.active.contains(&node) {
            return;
        }
        if let Some(v) = self.views.get(&node) {
            if v.is_initiator() {
                let epoch = v.epoch();
                let members: BTreeSet<SurrogateId> = v.members().collect();
                let peers: Vec<SurrogateId> = self
                    .active
                    .iter()
                    .copied()
                    .filter(|&p| p != node)
                    .collect();
                for p in peers {
                    let delay = self.link_delay(node, p);
                    self.push(
                        self.now_us + delay,
                        Ev::RosterRecv {
                            to: p,
                            epoch,
                            initiator: node,
                            members: members.clone(),
                        },
                    );
                }
            }
        }
        self.push(
            self.now_us + ms_to_us(ROSTER_PERIOD_MS),
            Ev::RosterSend { node },
        );
    }

    fn on_roster_recv(
        &mut self,
        to: SurrogateId,
        epoch: u64,
        initiator: SurrogateId,
        members: BTreeSet<SurrogateId>,
    ) {
        if !self.active.contains(&to) {
            return;
        }
        let now = self.now_ms();
        if let Some(v) = self.views.get_mut(&to) {
            if v.record_roster(epoch, initiator, &members, now) {
                self.log_session(
                    to.0,
                    "roster-adopted",
                    format!("initiator={},epoch={}", initiator.0, epoch),
                );
            }
        }
        self.check_convergence();
    }

    /// Marks the failover converged the first time every surviving view
    /// agrees on (initiator, epoch, members) without the failed member.
    fn check_convergence(&mut self) {
        let Some(f) = self.failover.as_ref() else { return };
        if f.converged_at_ms.is_some() || f.detected_at_ms.is_none() {
            return;
        }
        let failed = SurrogateId(f.failed);
        let mut snapshot: Option<(SurrogateId, u64, Vec<SurrogateId>)> = None;
        for (_, v) in self.views.iter() {
            let members: Vec<SurrogateId> = v.members().collect();
            if members.contains(&failed) {
                return;
            }
            let this = (v.initiator(), v.epoch(), members);
            match &snapshot {
                None => snapshot = Some(this),
                Some(s) => {
                    if *s != this {
                        return;
                    }
                }
            }
        }
        if snapshot.is_some() {
            if let Some(f) = self.failover.as_mut() {
                f.converged_at_ms = Some(self.now_us / 1000);
            }
        }
    }

    // ----- metrics ------------------------------------------------------

    fn on_tick(&mut self) {
        let time_ms = self.now_us / 1000;
        let now = self.now_ms();

        let pairs: Vec<Pair> = self.bufs.keys().copied().collect();
        for key in pairs {
            let (flow, receiver) = key;
            if !self.active.contains(&flow) || !self.active.contains(&receiver) {
                continue;
            }
            let (occupancy, sigma) = {
                let buf = &self.bufs[&key];
                (buf.occupancy_ms(now), buf.sigma_ms())
            };
            let tracker = self.trackers.get_mut(&key).expect("tracker per buffer");
            if self.overlay {
                if let Some(new_bound) = tracker.update(sigma) {
                    if let Some(state) = self.state.as_mut() {
                        state.set_delay_bound(flow, receiver, new_bound);
                    }
                }
            }
            self.log.buffers.push(BufferRow {
                time_ms,
                flow: flow.0,
                receiver: receiver.0,
                occupancy_ms: occupancy,
                sigma_hat_ms: sigma,
                bound_l_ms: tracker.bound_ms(),
            });

            let rate = if self.overlay {
                let state = self.state.as_ref().expect("overlay state");
                let inbound = state
                    .tree(flow)
                    .and_then(|t| t.rate_into(receiver))
                    .unwrap_or(0);
                let accept = state.topo().accept_rate(receiver, flow).unwrap_or(inbound);
                inbound.min(accept)
            } else {
                let source = self.built.topo.source_rate(flow).unwrap_or(0);
                let accept = self.built.topo.accept_rate(receiver, flow).unwrap_or(source);
                source.min(accept)
            };
            self.log.rates.push(RateRow {
                time_ms,
                flow: flow.0,
                receiver: receiver.0,
                rate_kbps: rate,
            });

            if let Some(samples) = self.arrived.get_mut(&key) {
                if !samples.is_empty() {
                    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                    let max = samples.iter().cloned().fold(f64::MIN, f64::max);
                    self.log.latencies.push(LatencyRow {
                        time_ms,
                        flow: flow.0,
                        receiver: receiver.0,
                        mean_ms: mean,
                        max_ms: max,
                    });
                    samples.clear();
                }
            }
        }

        // Forget completion slots old enough that no fragment can still be
        // useful.
        let horizon = time_ms.saturating_sub(SLOT_RETENTION_MS);
        self.pending.retain(|&(_, _, ts), _| ts >= horizon);

        self.push(self.now_us + ms_to_us(TICK_PERIOD_MS), Ev::Tick);
    }

    // ----- scripted events ---------------------------------------------

    fn on_scripted(&mut self, index: usize) -> Result<(), SimError> {
        let event = self.built.events[index].clone();
        match event.kind {
            EventKind::Leave { participant } => {
                self.graceful_leave(SurrogateId(participant))?;
            }
            EventKind::Fail { participant } => {
                self.crash(SurrogateId(participant));
            }
            EventKind::JitterOn { a, b, max_spike_ms } => {
                self.set_spikes(&a, &b, Some(max_spike_ms));
            }
            EventKind::JitterOff { a, b } => {
                self.set_spikes(&a, &b, None);
            }
            EventKind::Capacity {
                from,
                to,
                capacity_kbps,
            } => {
                if let Some(state) = self.state.as_mut() {
                    let _ = state.observe_link_capacity(
                        SurrogateId(from),
                        SurrogateId(to),
                        capacity_kbps,
                    );
                }
            }
        }
        Ok(())
    }

    /// Applies or clears spike noise on every link between two regions.
    fn set_spikes(&mut self, a: &str, b: &str, max_spike_ms: Option<f64>) {
        for (&(u, v), model) in self.links.iter_mut() {
            let (ru, rv) = (&self.built.region_of[&u], &self.built.region_of[&v]);
            let crosses = (ru == a && rv == b) || (ru == b && rv == a);
            if crosses {
                model.spike_max_ms = max_spike_ms;
            }
        }
    }

    // ----- helpers ------------------------------------------------------

    /// One sampled delay on the (from, to) link, in microseconds.
    fn link_delay(&mut self, from: SurrogateId, to: SurrogateId) -> u64 {
        match self.links.get(&(from, to)) {
            Some(model) => {
                let model = *model;
                ms_f_to_us(model.sample(&mut self.rng))
            }
            None => 0,
        }
    }

    fn log_session(&mut self, member: u32, event: &'static str, detail: String) {
        self.log.session.push(SessionRow {
            time_ms: self.now_us / 1000,
            member,
            event,
            detail,
        });
    }

    fn finish(mut self) -> RunOutput {
        // Frame accounting: anything still outstanding is in flight.
        for (&key, account) in self.accounts.iter() {
            let pending = self
                .outstanding
                .get(&key)
                .map(|s| s.len() as u64)
                .unwrap_or(0);
            self.log.frames.push(FrameAccount {
                flow: key.0 .0,
                receiver: key.1 .0,
                dispatched: account.dispatched,
                on_time: account.on_time,
                concealed: account.concealed,
                missed: account.missed,
                in_flight: account.frozen_in_flight + pending,
            });
        }
        let final_views = self
            .views
            .iter()
            .map(|(&id, v)| {
                (
                    id.0,
                    ViewSummary {
                        initiator: v.initiator().0,
                        epoch: v.epoch(),
                        members: v.members().map(|m| m.0).collect(),
                    },
                )
            })
            .collect();
        RunOutput {
            log: self.log,
            final_views,
            calibration: self.calibration,
            failover: self.failover,
            events_processed: self.events_processed,
        }
    }
}

fn ms_to_us(ms: u64) -> u64 {
    ms * 1_000
}

fn ms_f_to_us(ms: f64) -> u64 {
    (ms * 1_000.0).round() as u64
}
