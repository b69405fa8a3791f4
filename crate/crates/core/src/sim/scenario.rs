//! Scenario files: the declarative description of a simulated conference.
//!
//! A scenario is TOML with four parts: global knobs (duration, seed,
//! interactivity target, ladder, transcode model), a region graph with
//! inter-region latencies, the participants (home region, rates, device
//! delays, optional clock skew and late join), and a time-ordered event
//! script (leaves, crashes, jitter injection, capacity changes).
//!
//! [`Scenario::build`] lowers all of that into concrete per-pair surrogate
//! links, accept-rate maps, delay budgets and link noise models, validating
//! every cross-reference on the way; problems come back as
//! [`ScenarioError`] with enough context to fix the file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::jitter::DelayBudget;
use crate::model::{
    DelayBounds, Kbps, LastMile, LinkProps, ModelError, RateLadder, SurrogateId,
    TopologySnapshot, TranscodeModel,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("frame rate must be positive")]
    BadFrameRate,
    #[error("participant {0} is declared twice")]
    DuplicateParticipant(u32),
    #[error("participant {participant} references unknown region \"{region}\"")]
    UnknownRegion { participant: u32, region: String },
    #[error("region link references unknown region \"{0}\"")]
    UnknownLinkRegion(String),
    #[error("no latency declared between regions \"{a}\" and \"{b}\"")]
    MissingRegionLink { a: String, b: String },
    #[error("region pair \"{a}\"/\"{b}\" declared twice")]
    DuplicateRegionLink { a: String, b: String },
    #[error("participant {participant}: accept map key \"{key}\" is neither \"default\" nor a participant id")]
    BadAcceptKey { participant: u32, key: String },
    #[error("participant {participant}: accept rate for flow {flow} is zero")]
    ZeroAcceptRate { participant: u32, flow: u32 },
    #[error("event at {at_s}s references unknown participant {participant}")]
    EventUnknownParticipant { at_s: f64, participant: u32 },
    #[error("event at {at_s}s references unknown region \"{region}\"")]
    EventUnknownRegion { at_s: f64, region: String },
    #[error("event at {at_s}s lies outside the run (duration {duration_s}s)")]
    EventOutOfRange { at_s: f64, duration_s: f64 },
    #[error(
        "participants {a} and {b}: device delays leave no network budget \
         (end-to-end {d_ms} ms minus {consumed_ms} ms of device delay)"
    )]
    NoNetworkBudget {
        a: u32,
        b: u32,
        d_ms: f64,
        consumed_ms: f64,
    },
    #[error("override references unknown participant {0}")]
    OverrideUnknownParticipant(u32),
    #[error("invalid model parameter: {0}")]
    Model(#[from] ModelError),
    #[error("scenario needs at least two participants")]
    TooFewParticipants,
    #[error(
        "participant {participant}: {rate_kbps} kbps at {frame_rate} fps fragments into more \
         packets per frame than reassembly can track"
    )]
    TooManyFragments {
        participant: u32,
        rate_kbps: Kbps,
        frame_rate: u8,
    },
}

fn default_seed() -> u64 {
    1
}
fn default_end_to_end() -> f64 {
    400.0
}
fn default_frame_rate() -> u8 {
    25
}
fn default_codec() -> u8 {
    1
}

/// Fallbacks applied wherever a participant or link leaves a field out.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Defaults {
    pub capacity_kbps: Kbps,
    pub link_sigma_ms: f64,
    pub intra_region_latency_ms: f64,
    pub source_rate_kbps: Kbps,
    pub uplink_delay_ms: f64,
    pub downlink_delay_ms: f64,
    pub accept_kbps: Kbps,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            capacity_kbps: 1024,
            link_sigma_ms: 1.0,
            intra_region_latency_ms: 2.0,
            source_rate_kbps: 1049,
            uplink_delay_ms: 50.0,
            downlink_delay_ms: 50.0,
            accept_kbps: 256,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
}

/// Latency (and optional overrides) between every surrogate pair whose
/// owners live in these two regions; applied in both directions.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionLink {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
    pub capacity_kbps: Option<Kbps>,
    pub sigma_ms: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Participant {
    pub id: u32,
    pub region: String,
    pub source_rate_kbps: Option<Kbps>,
    pub uplink_delay_ms: Option<f64>,
    pub downlink_delay_ms: Option<f64>,
    /// Device clock offset from true time, ms; calibration should recover it.
    #[serde(default)]
    pub clock_skew_ms: f64,
    /// Seconds after the run start at which this participant joins.
    #[serde(default)]
    pub join_at_s: f64,
    /// Accept rates by flow id, with an optional "default" entry.
    #[serde(default)]
    pub accept_kbps: BTreeMap<String, Kbps>,
}

/// Per-pair link override, applied after regions are expanded.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Override {
    pub from: u32,
    pub to: u32,
    pub capacity_kbps: Option<Kbps>,
    pub latency_ms: Option<f64>,
    /// Apply to the reverse direction too (default true).
    #[serde(default = "default_true")]
    pub symmetric: bool,
}

fn default_true() -> bool {
    true
}

/// One scripted occurrence.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// Graceful departure: the member says goodbye and its flow is retired.
    Leave { participant: u32 },
    /// Crash: the member falls silent; survivors must detect and fail over.
    Fail { participant: u32 },
    /// Start adding uniform random spikes (up to `max_spike_ms`) to every
    /// packet crossing links between the two regions.
    JitterOn {
        a: String,
        b: String,
        max_spike_ms: f64,
    },
    /// Stop the spikes between the two regions.
    JitterOff { a: String, b: String },
    /// Change one surrogate link's capacity.
    Capacity {
        from: u32,
        to: u32,
        capacity_kbps: Kbps,
    },
}

// No `deny_unknown_fields` here: it cannot coexist with `flatten`. The
// tagged `EventKind` enum still rejects unknown kinds and fields.
#[derive(Debug, Clone, Deserialize)]
pub struct Event {
    pub at_s: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscodeConfig {
    pub base_ms: f64,
    pub per_input_kbps_ms: f64,
    pub per_output_kbps_ms: f64,
}

impl Default for TranscodeConfig {
    fn default() -> Self {
        TranscodeConfig {
            base_ms: 10.0,
            per_input_kbps_ms: 0.01,
            per_output_kbps_ms: 0.01,
        }
    }
}

/// A parsed scenario file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_end_to_end")]
    pub end_to_end_delay_ms: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: u8,
    #[serde(default = "default_codec")]
    pub codec: u8,
    /// Ladder steps, ascending; empty means the built-in default ladder.
    #[serde(default)]
    pub rate_ladder_kbps: Vec<Kbps>,
    #[serde(default)]
    pub transcode: TranscodeConfig,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub region_links: Vec<RegionLink>,
    pub participants: Vec<Participant>,
    #[serde(default)]
    pub overrides: Vec<Override>,
    #[serde(default)]
    pub events: Vec<Event>,
}

/// Noise parameters of one directed surrogate link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkNoise {
    pub sigma_ms: f64,
}

/// Everything the engine needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub topo: TopologySnapshot,
    pub transcode: TranscodeModel,
    pub ladder: RateLadder,
    /// Routing deadlines at sigma = 0: the per-pair network budget.
    pub bounds: DelayBounds,
    /// Per (flow, receiver) delay budget split.
    pub budgets: BTreeMap<(SurrogateId, SurrogateId), DelayBudget>,
    /// Gaussian sigma per directed link.
    pub noise: BTreeMap<(SurrogateId, SurrogateId), LinkNoise>,
    /// Region of each participant, for region-addressed events.
    pub region_of: BTreeMap<SurrogateId, String>,
    /// Device clock skew per participant, ms.
    pub skew_ms: BTreeMap<SurrogateId, f64>,
    /// Join instant per participant, ms (0 for founding members).
    pub join_at_ms: BTreeMap<SurrogateId, f64>,
    /// Events sorted by time.
    pub events: Vec<Event>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    /// Validates every cross-reference and lowers the file into concrete
    /// simulation inputs.
    pub fn build(&self) -> Result<BuiltScenario, ScenarioError> {
        if !(self.duration_s > 0.0) {
            return Err(ScenarioError::BadDuration(self.duration_s));
        }
        if self.frame_rate == 0 {
            return Err(ScenarioError::BadFrameRate);
        }
        if self.participants.len() < 2 {
            return Err(ScenarioError::TooFewParticipants);
        }

        let region_names: BTreeSet<&str> =
            self.regions.iter().map(|r| r.name.as_str()).collect();
        let mut region_latency: BTreeMap<(String, String), &RegionLink> = BTreeMap::new();
        for link in &self.region_links {
            for name in [&link.a, &link.b] {
                if !region_names.contains(name.as_str()) {
                    return Err(ScenarioError::UnknownLinkRegion(name.clone()));
                }
            }
            let key = ordered(&link.a, &link.b);
            if region_latency.insert(key, link).is_some() {
                return Err(ScenarioError::DuplicateRegionLink {
                    a: link.a.clone(),
                    b: link.b.clone(),
                });
            }
        }

        // Participants and their last-mile profiles.
        let mut topo = TopologySnapshot::new();
        let mut region_of = BTreeMap::new();
        let mut skew_ms = BTreeMap::new();
        let mut join_at_ms = BTreeMap::new();
        let ids: BTreeSet<u32> = self.participants.iter().map(|p| p.id).collect();
        for p in &self.participants {
            let id = SurrogateId(p.id);
            if region_of.contains_key(&id) {
                return Err(ScenarioError::DuplicateParticipant(p.id));
            }
            if !region_names.contains(p.region.as_str()) {
                return Err(ScenarioError::UnknownRegion {
                    participant: p.id,
                    region: p.region.clone(),
                });
            }
            let mut lm = LastMile::symmetric(0.0, 0);
            lm.uplink_delay_ms = p.uplink_delay_ms.unwrap_or(self.defaults.uplink_delay_ms);
            lm.downlink_delay_ms = p
                .downlink_delay_ms
                .unwrap_or(self.defaults.downlink_delay_ms);
            lm.source_rate_kbps = p.source_rate_kbps.unwrap_or(self.defaults.source_rate_kbps);
            let mut default_accept = self.defaults.accept_kbps;
            let mut specific: BTreeMap<u32, Kbps> = BTreeMap::new();
            for (key, &rate) in &p.accept_kbps {
                if key == "default" {
                    default_accept = rate;
                    continue;
                }
                match key.parse::<u32>() {
                    Ok(flow) if ids.contains(&flow) => {
                        specific.insert(flow, rate);
                    }
                    _ => {
                        return Err(ScenarioError::BadAcceptKey {
                            participant: p.id,
                            key: key.clone(),
                        })
                    }
                }
            }
            for &other in &ids {
                if other == p.id {
                    continue;
                }
                let rate = specific.get(&other).copied().unwrap_or(default_accept);
                if rate == 0 {
                    return Err(ScenarioError::ZeroAcceptRate {
                        participant: p.id,
                        flow: other,
                    });
                }
                lm.accept_kbps.insert(SurrogateId(other), rate);
            }
            // Playout tracks fragments in a 64-bit arrival mask, so a source
            // whose frames split into more than 64 packets cannot be carried.
            let fragments = u16::try_from(lm.source_rate_kbps)
                .ok()
                .and_then(|r| crate::wire::fragments_per_frame(r, self.frame_rate).ok());
            if !fragments.is_some_and(|f| f <= 64) {
                return Err(ScenarioError::TooManyFragments {
                    participant: p.id,
                    rate_kbps: lm.source_rate_kbps,
                    frame_rate: self.frame_rate,
                });
            }
            topo.add_surrogate(id, lm)?;
            region_of.insert(id, p.region.clone());
            skew_ms.insert(id, p.clock_skew_ms);
            join_at_ms.insert(id, p.join_at_s * 1000.0);
        }

        // One directed link per ordered participant pair.
        let mut noise = BTreeMap::new();
        for a in &self.participants {
            for b in &self.participants {
                if a.id == b.id {
                    continue;
                }
                let (latency, capacity, sigma) = if a.region == b.region {
                    (
                        self.defaults.intra_region_latency_ms,
                        self.defaults.capacity_kbps,
                        self.defaults.link_sigma_ms,
                    )
                } else {
                    let link = region_latency
                        .get(&ordered(&a.region, &b.region))
                        .ok_or_else(|| ScenarioError::MissingRegionLink {
                            a: a.region.clone(),
                            b: b.region.clone(),
                        })?;
                    (
                        link.latency_ms,
                        link.capacity_kbps.unwrap_or(self.defaults.capacity_kbps),
                        link.sigma_ms.unwrap_or(self.defaults.link_sigma_ms),
                    )
                };
                topo.add_link(
                    SurrogateId(a.id),
                    SurrogateId(b.id),
                    LinkProps {
                        capacity_kbps: capacity,
                        latency_ms: latency,
                    },
                )?;
                noise.insert(
                    (SurrogateId(a.id), SurrogateId(b.id)),
                    LinkNoise { sigma_ms: sigma },
                );
            }
        }

        // Per-pair overrides.
        for o in &self.overrides {
            for end in [o.from, o.to] {
                if !ids.contains(&end) {
                    return Err(ScenarioError::OverrideUnknownParticipant(end));
                }
            }
            let mut pairs = vec![(SurrogateId(o.from), SurrogateId(o.to))];
            if o.symmetric {
                pairs.push((SurrogateId(o.to), SurrogateId(o.from)));
            }
            for (u, v) in pairs {
                if let Some(c) = o.capacity_kbps {
                    topo.set_link_capacity(u, v, c)?;
                }
                if let Some(l) = o.latency_ms {
                    topo.set_link_latency(u, v, l)?;
                }
            }
        }

        // Delay budgets per (flow, receiver) pair.
        let mut budgets = BTreeMap::new();
        let mut bounds = DelayBounds::new();
        for a in &self.participants {
            for b in &self.participants {
                if a.id == b.id {
                    continue;
                }
                let up = a.uplink_delay_ms.unwrap_or(self.defaults.uplink_delay_ms);
                let down = b
                    .downlink_delay_ms
                    .unwrap_or(self.defaults.downlink_delay_ms);
                let budget = DelayBudget::new(self.end_to_end_delay_ms, up, down);
                if budget.network_budget_ms() <= 0.0 {
                    return Err(ScenarioError::NoNetworkBudget {
                        a: a.id,
                        b: b.id,
                        d_ms: self.end_to_end_delay_ms,
                        consumed_ms: up + down,
                    });
                }
                budgets.insert((SurrogateId(a.id), SurrogateId(b.id)), budget);
                bounds.set(
                    SurrogateId(a.id),
                    SurrogateId(b.id),
                    budget.routing_bound_ms(0.0),
                );
            }
        }

        // Events: known references, inside the run, in time order.
        let mut events = self.events.clone();
        for e in &events {
            if e.at_s < 0.0 || e.at_s > self.duration_s {
                return Err(ScenarioError::EventOutOfRange {
                    at_s: e.at_s,
                    duration_s: self.duration_s,
                });
            }
            match &e.kind {
                EventKind::Leave { participant } | EventKind::Fail { participant } => {
                    if !ids.contains(participant) {
                        return Err(ScenarioError::EventUnknownParticipant {
                            at_s: e.at_s,
                            participant: *participant,
                        });
                    }
                }
                EventKind::JitterOn { a, b, .. } | EventKind::JitterOff { a, b } => {
                    for r in [a, b] {
                        if !region_names.contains(r.as_str()) {
                            return Err(ScenarioError::EventUnknownRegion {
                                at_s: e.at_s,
                                region: r.clone(),
                            });
                        }
                    }
                }
                EventKind::Capacity { from, to, .. } => {
                    for p in [from, to] {
                        if !ids.contains(p) {
                            return Err(ScenarioError::EventUnknownParticipant {
                                at_s: e.at_s,
                                participant: *p,
                            });
                        }
                    }
                }
            }
        }
        events.sort_by(|x, y| x.at_s.partial_cmp(&y.at_s).unwrap());

        let ladder = if self.rate_ladder_kbps.is_empty() {
            RateLadder::default()
        } else {
            RateLadder::new(self.rate_ladder_kbps.clone())?
        };
        let transcode = TranscodeModel::new(
            self.transcode.base_ms,
            self.transcode.per_input_kbps_ms,
            self.transcode.per_output_kbps_ms,
        )?;

        Ok(BuiltScenario {
            topo,
            transcode,
            ladder,
            bounds,
            budgets,
            noise,
            region_of,
            skew_ms,
            join_at_ms,
            events,
        })
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}
