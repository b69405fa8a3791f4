//! Playout-side jitter masking.
//!
//! Every frame carries its capture timestamp, and every receiver releases it
//! at exactly `capture + network budget`, where the network budget is the
//! end-to-end interactivity target minus the capture- and render-side device
//! delays. Frames arriving earlier simply wait; fragments arriving after
//! their release instant are useless and dropped. Masking jitter therefore
//! costs nothing extra as long as the *routing* delay stays far enough below
//! the network budget that delay spikes almost never cross it.
//!
//! "Far enough" is quantified by [`SigmaEstimator`]: with the one-way delay
//! spread estimated at sigma, keeping the routed path at least
//! `3.4 * sigma` below the budget leaves the miss probability at the Gaussian
//! tail beyond 3.4 standard deviations, about 3 in 10,000. [`BoundTracker`]
//! turns that into a deadline for the routing engine, with hysteresis so the
//! deadline does not chatter while sigma wanders.

use std::collections::{BTreeMap, VecDeque};

/// One-sided Gaussian quantile used to pad the routing deadline: delays
/// within mean + 3.4 sigma cover 99.97% of packets.
pub const SIGMA_HEADROOM_FACTOR: f64 = 3.4;

/// Default hysteresis on published routing deadlines, in milliseconds.
pub const BOUND_HYSTERESIS_MS: f64 = 10.0;

/// How much media the buffer will hold before discarding ancient frames.
pub const BUFFER_CAPACITY_MS: f64 = 400.0;

/// Split of the end-to-end interactivity target across device and network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayBudget {
    /// Capture-to-render target for the whole path, in ms.
    pub end_to_end_ms: f64,
    /// Sender-side device delay: capture, encode, last-mile uplink.
    pub capture_side_ms: f64,
    /// Receiver-side device delay: last-mile downlink, decode, render.
    pub render_side_ms: f64,
}

impl DelayBudget {
    pub fn new(end_to_end_ms: f64, capture_side_ms: f64, render_side_ms: f64) -> Self {
        DelayBudget {
            end_to_end_ms,
            capture_side_ms,
            render_side_ms,
        }
    }

    /// Time a frame may spend between the surrogates: the release instant is
    /// its capture timestamp plus this.
    pub fn network_budget_ms(&self) -> f64 {
        self.end_to_end_ms - self.capture_side_ms - self.render_side_ms
    }

    /// Deadline handed to the routing engine: the network budget minus the
    /// jitter headroom for the current delay spread.
    pub fn routing_bound_ms(&self, sigma_ms: f64) -> f64 {
        self.network_budget_ms() - SIGMA_HEADROOM_FACTOR * sigma_ms
    }
}

/// Streaming estimate of the one-way delay spread: the standard deviation
/// over a sliding window of recent samples, smoothed exponentially so a
/// single quiet window does not erase the memory of a noisy path.
#[derive(Debug, Clone)]
pub struct SigmaEstimator {
    window: VecDeque<f64>,
    smoothed_ms: f64,
    primed: bool,
}

impl SigmaEstimator {
    /// Samples in the sliding window.
    pub const WINDOW: usize = 64;
    /// Exponential smoothing gain applied to each new window deviation.
    pub const GAIN: f64 = 0.125;

    pub fn new() -> Self {
        SigmaEstimator {
            window: VecDeque::with_capacity(Self::WINDOW),
            smoothed_ms: 0.0,
            primed: false,
        }
    }

    /// Feeds one one-way delay sample and returns the updated estimate.
    pub fn observe(&mut self, delay_ms: f64) -> f64 {
        if self.window.len() == Self::WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(delay_ms);
        let n = self.window.len() as f64;
        let mean = self.window.iter().sum::<f64>() / n;
        let var = self
            .window
            .iter()
            .map(|d| (d - mean) * (d - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if self.primed {
            self.smoothed_ms += Self::GAIN * (std - self.smoothed_ms);
        } else {
            self.smoothed_ms = std;
            self.primed = true;
        }
        self.smoothed_ms
    }

    pub fn sigma_ms(&self) -> f64 {
        self.smoothed_ms
    }

    pub fn samples_seen(&self) -> usize {
        self.window.len()
    }
}

impl Default for SigmaEstimator {
    fn default() -> Self {
        Self::new()
    }
}

/// Turns sigma estimates into routing deadlines, publishing a new deadline
/// only when it moves by at least the hysteresis margin.
#[derive(Debug, Clone)]
pub struct BoundTracker {
    budget: DelayBudget,
    hysteresis_ms: f64,
    current_ms: f64,
}

impl BoundTracker {
    pub fn new(budget: DelayBudget) -> Self {
        BoundTracker {
            budget,
            hysteresis_ms: BOUND_HYSTERESIS_MS,
            current_ms: budget.routing_bound_ms(0.0),
        }
    }

    pub fn with_hysteresis(budget: DelayBudget, hysteresis_ms: f64) -> Self {
        BoundTracker {
            budget,
            hysteresis_ms,
            current_ms: budget.routing_bound_ms(0.0),
        }
    }

    /// Deadline currently in force.
    pub fn bound_ms(&self) -> f64 {
        self.current_ms
    }

    /// Recomputes the deadline for `sigma_ms`; returns the new deadline if
    /// it differs from the published one by at least the hysteresis margin.
    pub fn update(&mut self, sigma_ms: f64) -> Option<f64> {
        let candidate = self.budget.routing_bound_ms(sigma_ms);
        if (candidate - self.current_ms).abs() >= self.hysteresis_ms {
            self.current_ms = candidate;
            Some(candidate)
        } else {
            None
        }
    }
}

/// Outcome of offering one fragment to the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    /// Stored; the frame it belongs to is still waiting for release.
    Buffered,
    /// This (frame, fragment) pair was already stored.
    Duplicate,
    /// Arrived after its frame's release instant; dropped.
    TooLate,
    /// Its frame is older than the buffer capacity window; dropped.
    TooOld,
}

/// How a released frame left the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    Complete,
    /// Some fragments never made the deadline; the renderer repeats the
    /// previous frame in their place.
    Concealed { missing_fragments: u32 },
}

/// One frame handed to the renderer at its release instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleasedFrame {
    pub capture_ts_ms: u64,
    pub release_ms: f64,
    pub status: FrameStatus,
    /// How long before release its last on-time fragment arrived — the
    /// margin jitter would have to exceed to damage this frame.
    pub margin_ms: f64,
}

/// Lifetime counters; `fragments_received` always equals the other four
/// fragment counters combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlayoutCounters {
    pub fragments_received: u64,
    pub fragments_buffered: u64,
    pub fragments_late: u64,
    pub fragments_duplicate: u64,
    pub fragments_too_old: u64,
    pub frames_complete: u64,
    pub frames_concealed: u64,
}

impl PlayoutCounters {
    pub fn frames_released(&self) -> u64 {
        self.frames_complete + self.frames_concealed
    }
}

struct FrameSlot {
    expected: u32,
    received_mask: u64,
    received: u32,
    last_arrival_ms: f64,
}

/// Fixed-deadline playout buffer for one flow at one receiver.
///
/// Fragments are keyed by their frame's capture timestamp; the frame is
/// released at `capture + network budget` by [`JitterBuffer::pop_due`].
/// Fragments arriving after that instant are counted and dropped, so a
/// frame's completeness is decided purely by which fragments beat the
/// deadline — exactly the property the routing deadline is derived from.
pub struct JitterBuffer {
    network_budget_ms: f64,
    capacity_ms: f64,
    frames: BTreeMap<u64, FrameSlot>,
    sigma: SigmaEstimator,
    counters: PlayoutCounters,
    /// Capture ts of the newest frame ever seen, for the capacity window.
    newest_ts_ms: u64,
    /// Release watermark: frames at or below this ts are gone.
    released_ts_ms: Option<u64>,
}

impl JitterBuffer {
    pub fn new(budget: &DelayBudget) -> Self {
        JitterBuffer {
            network_budget_ms: budget.network_budget_ms(),
            capacity_ms: BUFFER_CAPACITY_MS,
            frames: BTreeMap::new(),
            sigma: SigmaEstimator::new(),
            counters: PlayoutCounters::default(),
            newest_ts_ms: 0,
            released_ts_ms: None,
        }
    }

    pub fn network_budget_ms(&self) -> f64 {
        self.network_budget_ms
    }

    /// Scheduled release instant for a frame captured at `ts`.
    pub fn release_instant_ms(&self, capture_ts_ms: u64) -> f64 {
        capture_ts_ms as f64 + self.network_budget_ms
    }

    /// Offers one arrived fragment. `arrival_ms` is on the capture clock, so
    /// `arrival - capture` is the one-way delay fed to the spread estimator.
    pub fn push_fragment(
        &mut self,
        capture_ts_ms: u64,
        fragment_index: u32,
        fragment_count: u32,
        arrival_ms: f64,
    ) -> PushOutcome {
        debug_assert!(fragment_index < fragment_count && fragment_count <= 64);
        self.counters.fragments_received += 1;
        self.sigma.observe(arrival_ms - capture_ts_ms as f64);
        self.newest_ts_ms = self.newest_ts_ms.max(capture_ts_ms);

        if capture_ts_ms as f64 + self.capacity_ms < self.newest_ts_ms as f64 {
            self.counters.fragments_too_old += 1;
            return PushOutcome::TooOld;
        }
        let released = self.released_ts_ms.is_some_and(|w| capture_ts_ms <= w);
        if released || arrival_ms > self.release_instant_ms(capture_ts_ms) {
            self.counters.fragments_late += 1;
            return PushOutcome::TooLate;
        }
        let slot = self.frames.entry(capture_ts_ms).or_insert(FrameSlot {
            expected: fragment_count,
            received_mask: 0,
            received: 0,
            last_arrival_ms: arrival_ms,
        });
        let bit = 1u64 << fragment_index;
        if slot.received_mask & bit != 0 {
            self.counters.fragments_duplicate += 1;
            return PushOutcome::Duplicate;
        }
        slot.received_mask |= bit;
        slot.received += 1;
        slot.last_arrival_ms = slot.last_arrival_ms.max(arrival_ms);
        self.counters.fragments_buffered += 1;
        PushOutcome::Buffered
    }

    /// Releases, in capture order, every frame whose release instant has
    /// passed. Frames missing fragments come out as concealed; frames no
    /// fragment of which ever arrived in time simply never appear.
    pub fn pop_due(&mut self, now_ms: f64) -> Vec<ReleasedFrame> {
        let mut out = Vec::new();
        while let Some((&ts, _)) = self.frames.iter().next() {
            let release = self.release_instant_ms(ts);
            if release > now_ms {
                break;
            }
            let slot = self.frames.remove(&ts).expect("peeked entry exists");
            let status = if slot.received == slot.expected {
                self.counters.frames_complete += 1;
                FrameStatus::Complete
            } else {
                self.counters.frames_concealed += 1;
                FrameStatus::Concealed {
                    missing_fragments: slot.expected - slot.received,
                }
            };
            self.released_ts_ms = Some(ts);
            out.push(ReleasedFrame {
                capture_ts_ms: ts,
                release_ms: release,
                status,
                margin_ms: release - slot.last_arrival_ms,
            });
        }
        out
    }

    /// Playout runway currently buffered: time from `now` until the release
    /// instant of the newest pending frame. Its variance tracks the delay
    /// jitter of the feeding path almost one-for-one.
    pub fn occupancy_ms(&self, now_ms: f64) -> f64 {
        match self.frames.keys().next_back() {
            Some(&ts) => (self.release_instant_ms(ts) - now_ms).max(0.0),
            None => 0.0,
        }
    }

    pub fn pending_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn sigma_ms(&self) -> f64 {
        self.sigma.sigma_ms()
    }

    pub fn counters(&self) -> &PlayoutCounters {
        &self.counters
    }
}
