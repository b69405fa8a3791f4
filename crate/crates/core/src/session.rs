//! Conference control plane.
//!
//! Devices attach to a per-region surrogate handed out by the [`Gateway`].
//! The first join creates the session and makes that surrogate the
//! initiator; the initiator admits later joiners and broadcasts the roster
//! every [`ROSTER_PERIOD_MS`]. Every member keeps a [`SessionView`] of who
//! is alive, refreshed by heartbeats sent each [`HEARTBEAT_PERIOD_MS`]; a
//! member silent for [`MISSED_HEARTBEAT_LIMIT`] periods is expired. When the
//! expired member is the initiator, every survivor independently promotes
//! the lowest surviving id and bumps the epoch — the same deterministic rule
//! everywhere, so views agree without coordination and the next roster
//! broadcast merely confirms it.
//!
//! Media timestamps ride the sender's clock, so receivers also calibrate
//! per-sender clock offsets from request/response exchanges
//! ([`CalibratedClock`]), keeping the sample from the shortest round trip,
//! where queueing had the least chance to skew the estimate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::model::SurrogateId;

/// Interval between liveness heartbeats, ms.
pub const HEARTBEAT_PERIOD_MS: u64 = 1_000;

/// Heartbeats a member may miss before it is declared gone.
pub const MISSED_HEARTBEAT_LIMIT: u32 = 3;

/// Interval between initiator roster broadcasts, ms.
pub const ROSTER_PERIOD_MS: u64 = 5_000;

/// Silence threshold implied by the heartbeat parameters, ms.
pub fn expiry_threshold_ms() -> f64 {
    (MISSED_HEARTBEAT_LIMIT as u64 * HEARTBEAT_PERIOD_MS) as f64
}

/// Clock offset of the responder relative to the requester from one
/// request/response exchange: `t1` request sent (requester clock), `t2`
/// request received and `t3` response sent (responder clock), `t4` response
/// received (requester clock). Symmetric path delay cancels; asymmetry
/// biases the estimate by half the difference.
pub fn clock_offset_ms(t1: f64, t2: f64, t3: f64, t4: f64) -> f64 {
    ((t2 - t1) + (t3 - t4)) / 2.0
}

/// Time the exchange spent on the wire (both directions combined).
pub fn round_trip_ms(t1: f64, t2: f64, t3: f64, t4: f64) -> f64 {
    (t4 - t1) - (t3 - t2)
}

/// Per-sender clock calibration: keeps the offset from the fastest exchange
/// in a sliding window.
#[derive(Debug, Clone, Default)]
pub struct CalibratedClock {
    window: VecDeque<(f64, f64)>, // (round trip, offset)
}

impl CalibratedClock {
    /// Exchanges remembered; old samples age out so a drifting clock cannot
    /// pin the estimate forever.
    pub const WINDOW: usize = 8;

    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one exchange and returns the current best offset estimate.
    pub fn observe_exchange(&mut self, t1: f64, t2: f64, t3: f64, t4: f64) -> f64 {
        if self.window.len() == Self::WINDOW {
            self.window.pop_front();
        }
        self.window
            .push_back((round_trip_ms(t1, t2, t3, t4), clock_offset_ms(t1, t2, t3, t4)));
        self.offset_ms().expect("just pushed a sample")
    }

    /// Offset of the remote clock relative to ours, from the lowest-delay
    /// exchange on record.
    pub fn offset_ms(&self) -> Option<f64> {
        self.window
            .iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .map(|&(_, offset)| offset)
    }

    /// Maps a local instant onto the remote clock.
    pub fn to_remote_ms(&self, local_ms: f64) -> Option<f64> {
        self.offset_ms().map(|o| local_ms + o)
    }
}

/// What changed after a membership operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionChange {
    /// First member arrived; it becomes the initiator.
    Created { initiator: SurrogateId },
    Joined(SurrogateId),
    Left(SurrogateId),
    /// The initiator went away; a survivor took over under a new epoch.
    InitiatorChanged {
        new_initiator: SurrogateId,
        epoch: u64,
    },
    /// The last member left.
    Closed,
    /// Nothing to do (duplicate join, unknown leave).
    NoOp,
}

/// Authoritative conference membership, as the gateway tracks it.
#[derive(Debug, Clone, Default)]
pub struct SessionState {
    epoch: u64,
    initiator: Option<SurrogateId>,
    members: BTreeSet<SurrogateId>,
}

impl SessionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn initiator(&self) -> Option<SurrogateId> {
        self.initiator
    }

    pub fn members(&self) -> impl Iterator<Item = SurrogateId> + '_ {
        self.members.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn join(&mut self, id: SurrogateId) -> SessionChange {
        if !self.members.insert(id) {
            return SessionChange::NoOp;
        }
        if self.members.len() == 1 {
            self.initiator = Some(id);
            SessionChange::Created { initiator: id }
        } else {
            SessionChange::Joined(id)
        }
    }

    /// Removes a member, graceful or crashed alike; the membership outcome
    /// is identical, only the detection path differs.
    pub fn leave(&mut self, id: SurrogateId) -> SessionChange {
        if !self.members.remove(&id) {
            return SessionChange::NoOp;
        }
        if self.members.is_empty() {
            self.initiator = None;
            return SessionChange::Closed;
        }
        if self.initiator == Some(id) {
            let new_initiator = *self.members.iter().next().unwrap();
            self.initiator = Some(new_initiator);
            self.epoch += 1;
            return SessionChange::InitiatorChanged {
                new_initiator,
                epoch: self.epoch,
            };
        }
        SessionChange::Left(id)
    }
}

/// One member's live view of the conference: who it believes is in, who
/// leads, and when each peer was last heard from.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionView {
    own: SurrogateId,
    epoch: u64,
    initiator: SurrogateId,
    last_heard_ms: BTreeMap<SurrogateId, f64>,
}

impl SessionView {
    pub fn new(
        own: SurrogateId,
        initiator: SurrogateId,
        members: impl IntoIterator<Item = SurrogateId>,
        now_ms: f64,
    ) -> Self {
        let mut last_heard_ms: BTreeMap<SurrogateId, f64> =
            members.into_iter().map(|m| (m, now_ms)).collect();
        last_heard_ms.insert(own, f64::INFINITY); // we never suspect ourselves
        SessionView {
            own,
            epoch: 0,
            initiator,
            last_heard_ms,
        }
    }

    pub fn own(&self) -> SurrogateId {
        self.own
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn initiator(&self) -> SurrogateId {
        self.initiator
    }

    pub fn is_initiator(&self) -> bool {
        self.initiator == self.own
    }

    pub fn members(&self) -> impl Iterator<Item = SurrogateId> + '_ {
        self.last_heard_ms.keys().copied()
    }

    pub fn contains(&self, id: SurrogateId) -> bool {
        self.last_heard_ms.contains_key(&id)
    }

    pub fn record_heartbeat(&mut self, from: SurrogateId, now_ms: f64) {
        if let Some(t) = self.last_heard_ms.get_mut(&from) {
            *t = now_ms.max(*t);
        }
        // Heartbeats from strangers are ignored: membership changes arrive
        // through admit/retire or a roster broadcast.
    }

    pub fn admit(&mut self, member: SurrogateId, now_ms: f64) {
        self.last_heard_ms.entry(member).or_insert(now_ms);
    }

    pub fn retire(&mut self, member: SurrogateId) {
        if member == self.own {
            return;
        }
        self.last_heard_ms.remove(&member);
        if self.initiator == member {
            self.promote_successor();
        }
    }

    /// Adopts a roster broadcast. Strictly newer epochs replace the view
    /// wholesale; the current epoch's broadcasts refresh liveness and
    /// membership; stale epochs are ignored. Returns whether anything
    /// changed.
    pub fn record_roster(
        &mut self,
        epoch: u64,
        initiator: SurrogateId,
        members: &BTreeSet<SurrogateId>,
        now_ms: f64,
    ) -> bool {
        if epoch < self.epoch {
            return false;
        }
        let mut changed = epoch > self.epoch || initiator != self.initiator;
        self.epoch = epoch;
        self.initiator = initiator;
        for &m in members {
            changed |= !self.last_heard_ms.contains_key(&m);
            let t = self.last_heard_ms.entry(m).or_insert(now_ms);
            *t = t.max(now_ms);
        }
        let stale: Vec<SurrogateId> = self
            .last_heard_ms
            .keys()
            .copied()
            .filter(|m| !members.contains(m) && *m != self.own)
            .collect();
        for m in stale {
            self.last_heard_ms.remove(&m);
            changed = true;
        }
        changed
    }

    /// Expires members silent past the heartbeat limit and returns them.
    /// If the initiator is among them, the lowest surviving id is promoted
    /// and the epoch bumped — every survivor runs this same rule, so views
    /// converge without talking to each other.
    pub fn expire_silent(&mut self, now_ms: f64) -> Vec<SurrogateId> {
        let threshold = expiry_threshold_ms();
        let expired: Vec<SurrogateId> = self
            .last_heard_ms
            .iter()
            .filter(|&(&m, &heard)| m != self.own && now_ms - heard > threshold)
            .map(|(&m, _)| m)
            .collect();
        for &m in &expired {
            self.last_heard_ms.remove(&m);
        }
        if expired.contains(&self.initiator) {
            self.promote_successor();
        }
        expired
    }

    fn promote_successor(&mut self) {
        if let Some(&next) = self.last_heard_ms.keys().next() {
            self.initiator = next;
            self.epoch += 1;
        }
    }
}

/// Hands out surrogates near each device: every region label maps to a pool
/// of VM slots, assigned lowest-id first and returned on release.
#[derive(Debug, Clone, Default)]
pub struct Gateway {
    pools: BTreeMap<String, BTreeSet<SurrogateId>>,
    assigned: BTreeMap<SurrogateId, String>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_pool(
        &mut self,
        region: &str,
        slots: impl IntoIterator<Item = SurrogateId>,
    ) {
        self.pools
            .entry(region.to_string())
            .or_default()
            .extend(slots);
    }

    /// Takes the lowest free slot in the region, if any.
    pub fn assign(&mut self, region: &str) -> Option<SurrogateId> {
        let pool = self.pools.get_mut(region)?;
        let id = pool.iter().next().copied()?;
        pool.remove(&id);
        self.assigned.insert(id, region.to_string());
        Some(id)
    }

    /// Returns a slot to its pool; false if it was not assigned.
    pub fn release(&mut self, id: SurrogateId) -> bool {
        match self.assigned.remove(&id) {
            Some(region) => {
                self.pools.entry(region).or_default().insert(id);
                true
            }
            None => false,
        }
    }

    pub fn region_of(&self, id: SurrogateId) -> Option<&str> {
        self.assigned.get(&id).map(String::as_str)
    }

    pub fn assigned_count(&self) -> usize {
        self.assigned.len()
    }
}
