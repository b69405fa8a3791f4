//! Shared vocabulary for the overlay: identities, topology, transcode cost,
//! the discrete rate ladder, rate utility, and whole-solution validation.
//!
//! Rates are integer kilobits per second throughout (`Kbps`). Delays and
//! latencies are milliseconds as `f64`. A *flow* is identified by the
//! surrogate of the participant who captures it, so flow `m` always denotes
//! "the stream rooted at surrogate `m`".

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Integer media rate in kilobits per second.
pub type Kbps = u32;

/// Identifier of a surrogate VM (and, by extension, of the participant it
/// fronts and of the media flow that participant originates).
///
/// Ordering is used for every deterministic tie-break in the crate: lowest id
/// wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SurrogateId(pub u32);

impl fmt::Display for SurrogateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Directed inter-surrogate link properties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProps {
    /// Usable bandwidth of the link, shared by all flows routed across it.
    pub capacity_kbps: Kbps,
    /// One-way propagation latency.
    pub latency_ms: f64,
}

/// Last-mile characteristics of one participant: the access hops between the
/// mobile device and its surrogate, plus the device's media capabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LastMile {
    /// Device-to-surrogate delay (media leaving this participant).
    pub uplink_delay_ms: f64,
    /// Surrogate-to-device delay (media arriving at this participant).
    pub downlink_delay_ms: f64,
    /// Capture rate of this participant's own stream.
    pub source_rate_kbps: Kbps,
    /// Device uplink bandwidth; only the direct-unicast baseline is limited
    /// by it (the overlay uploads a single copy to the surrogate).
    pub uplink_capacity_kbps: Kbps,
    /// Highest rate at which this participant's device wants each flow,
    /// keyed by flow id. Driven by the rendering layout: a stream shown
    /// full-screen warrants a higher rate than a thumbnail.
    pub accept_kbps: BTreeMap<SurrogateId, Kbps>,
}

impl LastMile {
    /// A symmetric last mile with no uplink bottleneck, useful in tests.
    pub fn symmetric(delay_ms: f64, source_rate_kbps: Kbps) -> Self {
        LastMile {
            uplink_delay_ms: delay_ms,
            downlink_delay_ms: delay_ms,
            source_rate_kbps,
            uplink_capacity_kbps: Kbps::MAX,
            accept_kbps: BTreeMap::new(),
        }
    }
}

/// Errors raised while assembling or querying model data.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("surrogate {0} declared twice")]
    DuplicateSurrogate(SurrogateId),
    #[error("surrogate {0} is not part of the topology")]
    UnknownSurrogate(SurrogateId),
    #[error("link {0} -> {1} declared twice")]
    DuplicateLink(SurrogateId, SurrogateId),
    #[error("link {0} -> {1} does not exist")]
    UnknownLink(SurrogateId, SurrogateId),
    #[error("self-link at {0} is not allowed")]
    SelfLink(SurrogateId),
    #[error("link {0} -> {1} has zero capacity")]
    ZeroCapacity(SurrogateId, SurrogateId),
    #[error("link {0} -> {1} has negative latency")]
    NegativeLatency(SurrogateId, SurrogateId),
    #[error("rate ladder must contain at least one step")]
    EmptyLadder,
    #[error("rate ladder steps must be strictly increasing and non-zero")]
    MalformedLadder,
    #[error("utility undefined for zero accept rate")]
    ZeroAcceptRate,
    #[error("transcode coefficients must be non-negative and speed factors positive")]
    MalformedTranscodeModel,
}

/// Immutable-ish view of the overlay: surrogates, directed links, and each
/// participant's last mile. The simulator mutates link properties in place as
/// conditions change (measured latency drift, scripted capacity changes).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopologySnapshot {
    surrogates: BTreeSet<SurrogateId>,
    links: BTreeMap<(SurrogateId, SurrogateId), LinkProps>,
    last_mile: BTreeMap<SurrogateId, LastMile>,
}

impl TopologySnapshot {
    pub fn new() -> Self {
        TopologySnapshot::default()
    }

    /// Registers a surrogate together with its participant's last mile.
    pub fn add_surrogate(&mut self, id: SurrogateId, last_mile: LastMile) -> Result<(), ModelError> {
        if !self.surrogates.insert(id) {
            return Err(ModelError::DuplicateSurrogate(id));
        }
        self.last_mile.insert(id, last_mile);
        Ok(())
    }

    /// Registers a directed link. Both endpoints must already be declared.
    pub fn add_link(
        &mut self,
        from: SurrogateId,
        to: SurrogateId,
        props: LinkProps,
    ) -> Result<(), ModelError> {
        if from == to {
            return Err(ModelError::SelfLink(from));
        }
        for end in [from, to] {
            if !self.surrogates.contains(&end) {
                return Err(ModelError::UnknownSurrogate(end));
            }
        }
        if props.capacity_kbps == 0 {
            return Err(ModelError::ZeroCapacity(from, to));
        }
        if props.latency_ms < 0.0 {
            return Err(ModelError::NegativeLatency(from, to));
        }
        if self.links.insert((from, to), props).is_some() {
            return Err(ModelError::DuplicateLink(from, to));
        }
        Ok(())
    }

    pub fn surrogates(&self) -> impl Iterator<Item = SurrogateId> + '_ {
        self.surrogates.iter().copied()
    }

    pub fn contains(&self, id: SurrogateId) -> bool {
        self.surrogates.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.surrogates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surrogates.is_empty()
    }

    pub fn link(&self, from: SurrogateId, to: SurrogateId) -> Option<&LinkProps> {
        self.links.get(&(from, to))
    }

    pub fn links(&self) -> impl Iterator<Item = ((SurrogateId, SurrogateId), &LinkProps)> {
        self.links.iter().map(|(k, v)| (*k, v))
    }

    /// Surrogates with a link *into* `to` (potential upstream parents).
    pub fn upstream_of(&self, to: SurrogateId) -> impl Iterator<Item = SurrogateId> + '_ {
        self.links
            .keys()
            .filter(move |(_, t)| *t == to)
            .map(|(f, _)| *f)
    }

    /// Surrogates reachable by a direct link *from* `from`.
    pub fn downstream_of(&self, from: SurrogateId) -> impl Iterator<Item = SurrogateId> + '_ {
        self.links
            .range((from, SurrogateId(0))..=(from, SurrogateId(u32::MAX)))
            .map(|((_, t), _)| *t)
    }

    pub fn last_mile(&self, id: SurrogateId) -> Option<&LastMile> {
        self.last_mile.get(&id)
    }

    /// Capture rate of flow `flow`.
    pub fn source_rate(&self, flow: SurrogateId) -> Option<Kbps> {
        self.last_mile.get(&flow).map(|lm| lm.source_rate_kbps)
    }

    /// Highest rate `receiver`'s device wants for `flow`, if configured.
    pub fn accept_rate(&self, receiver: SurrogateId, flow: SurrogateId) -> Option<Kbps> {
        self.last_mile
            .get(&receiver)
            .and_then(|lm| lm.accept_kbps.get(&flow).copied())
    }

    pub fn set_link_latency(
        &mut self,
        from: SurrogateId,
        to: SurrogateId,
        latency_ms: f64,
    ) -> Result<(), ModelError> {
        match self.links.get_mut(&(from, to)) {
            Some(props) if latency_ms >= 0.0 => {
                props.latency_ms = latency_ms;
                Ok(())
            }
            Some(_) => Err(ModelError::NegativeLatency(from, to)),
            None => Err(ModelError::UnknownLink(from, to)),
        }
    }

    pub fn set_link_capacity(
        &mut self,
        from: SurrogateId,
        to: SurrogateId,
        capacity_kbps: Kbps,
    ) -> Result<(), ModelError> {
        match self.links.get_mut(&(from, to)) {
            Some(_) if capacity_kbps == 0 => Err(ModelError::ZeroCapacity(from, to)),
            Some(props) => {
                props.capacity_kbps = capacity_kbps;
                Ok(())
            }
            None => Err(ModelError::UnknownLink(from, to)),
        }
    }
}

/// Affine model of transcoding latency at a surrogate.
///
/// Down-converting a stream from `input` to `output` kbps costs
/// `(base + in_coef * input + out_coef * output) / speed_factor`
/// milliseconds; forwarding at an unchanged (or higher) target rate is free
/// because no transcode runs. On the `input > output` region the cost is
/// monotone non-decreasing in both rates, which admission control relies on:
/// an estimate computed from upper bounds on both rates can never undershoot
/// the realized cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscodeModel {
    base_ms: f64,
    input_coef_ms_per_kbps: f64,
    output_coef_ms_per_kbps: f64,
    /// Per-surrogate relative compute speed; 1.0 when absent.
    speed_factors: BTreeMap<SurrogateId, f64>,
}

impl TranscodeModel {
    pub fn new(
        base_ms: f64,
        input_coef_ms_per_kbps: f64,
        output_coef_ms_per_kbps: f64,
    ) -> Result<Self, ModelError> {
        if base_ms < 0.0 || input_coef_ms_per_kbps < 0.0 || output_coef_ms_per_kbps < 0.0 {
            return Err(ModelError::MalformedTranscodeModel);
        }
        Ok(TranscodeModel {
            base_ms,
            input_coef_ms_per_kbps,
            output_coef_ms_per_kbps,
            speed_factors: BTreeMap::new(),
        })
    }

    /// A model in which transcoding is instantaneous; handy in tests that
    /// only care about link delays.
    pub fn free() -> Self {
        TranscodeModel::new(0.0, 0.0, 0.0).expect("zero model is well-formed")
    }

    pub fn set_speed_factor(&mut self, at: SurrogateId, factor: f64) -> Result<(), ModelError> {
        if factor <= 0.0 {
            return Err(ModelError::MalformedTranscodeModel);
        }
        self.speed_factors.insert(at, factor);
        Ok(())
    }

    /// Latency of converting `input_kbps` down to `output_kbps` at surrogate
    /// `at`. Zero when no down-conversion is needed.
    pub fn latency(&self, at: SurrogateId, input_kbps: Kbps, output_kbps: Kbps) -> f64 {
        if input_kbps <= output_kbps {
            return 0.0;
        }
        let speed = self.speed_factors.get(&at).copied().unwrap_or(1.0);
        (self.base_ms
            + self.input_coef_ms_per_kbps * input_kbps as f64
            + self.output_coef_ms_per_kbps * output_kbps as f64)
            / speed
    }
}

/// Rate steps offered by the codec.
pub const DEFAULT_RATE_LADDER_KBPS: [Kbps; 5] = [128, 256, 512, 768, 1049];

/// The discrete set of rates a stream can be encoded at. All allocated rates
/// are drawn from this ladder (or are zero, meaning "not served").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateLadder {
    steps: Vec<Kbps>,
}

impl RateLadder {
    /// Builds a ladder from strictly increasing, non-zero steps.
    pub fn new(steps: Vec<Kbps>) -> Result<Self, ModelError> {
        if steps.is_empty() {
            return Err(ModelError::EmptyLadder);
        }
        let increasing = steps.windows(2).all(|w| w[0] < w[1]);
        if !increasing || steps[0] == 0 {
            return Err(ModelError::MalformedLadder);
        }
        Ok(RateLadder { steps })
    }

    pub fn steps(&self) -> &[Kbps] {
        &self.steps
    }

    pub fn min_step(&self) -> Kbps {
        self.steps[0]
    }

    pub fn max_step(&self) -> Kbps {
        *self.steps.last().expect("ladder is non-empty")
    }

    /// Largest step not exceeding `raw`, or 0 if `raw` is below the lowest
    /// step (the flow cannot be served at that budget).
    pub fn floor(&self, raw: f64) -> Kbps {
        let mut best = 0;
        for &step in &self.steps {
            if (step as f64) <= raw {
                best = step;
            } else {
                break;
            }
        }
        best
    }

    pub fn contains(&self, rate: Kbps) -> bool {
        self.steps.binary_search(&rate).is_ok()
    }
}

impl Default for RateLadder {
    fn default() -> Self {
        RateLadder::new(DEFAULT_RATE_LADDER_KBPS.to_vec()).expect("default ladder is well-formed")
    }
}

/// Logarithmic utility of receiving a flow at `rate` when the device would
/// accept up to `accept`. Zero at the accept rate, negative below it,
/// unboundedly negative as the rate approaches zero — so allocation prefers
/// lifting the worst-off receiver over polishing an already-good one
/// (proportional fairness). A rate of zero yields `-inf`: a starved receiver
/// dominates any finite deficit.
pub fn utility(rate: Kbps, accept: Kbps) -> Result<f64, ModelError> {
    if accept == 0 {
        return Err(ModelError::ZeroAcceptRate);
    }
    if rate == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((rate as f64 / accept as f64).ln())
}

/// Per-pair playout deadlines: `get(flow, receiver)` is the largest
/// network-plus-transcode delay under which the receiver's buffer can still
/// mask jitter within the fixed end-to-end budget. Pairs without an entry are
/// unconstrained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DelayBounds {
    bounds: BTreeMap<(SurrogateId, SurrogateId), f64>,
}

impl DelayBounds {
    pub fn new() -> Self {
        DelayBounds::default()
    }

    /// Same bound for every ordered pair of distinct surrogates.
    pub fn uniform(topo: &TopologySnapshot, bound_ms: f64) -> Self {
        let mut bounds = DelayBounds::new();
        for m in topo.surrogates() {
            for n in topo.surrogates() {
                if m != n {
                    bounds.set(m, n, bound_ms);
                }
            }
        }
        bounds
    }

    pub fn set(&mut self, flow: SurrogateId, receiver: SurrogateId, bound_ms: f64) {
        self.bounds.insert((flow, receiver), bound_ms);
    }

    pub fn get(&self, flow: SurrogateId, receiver: SurrogateId) -> f64 {
        self.bounds
            .get(&(flow, receiver))
            .copied()
            .unwrap_or(f64::INFINITY)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((SurrogateId, SurrogateId), f64)> + '_ {
        self.bounds.iter().map(|(k, v)| (*k, *v))
    }
}

/// One flow's dissemination structure inside a [`RateSolution`]: who feeds
/// whom, and at what rate each feed runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolutionTree {
    /// `parent[n]` feeds `n`. The root (the flow id itself) has no entry.
    pub parent: BTreeMap<SurrogateId, SurrogateId>,
    /// Rate carried on each tree edge `(parent, child)`.
    pub edge_rate_kbps: BTreeMap<(SurrogateId, SurrogateId), Kbps>,
}

impl SolutionTree {
    /// Tree edges along the path from the root down to `n` (empty if `n` is
    /// the root). `None` if `n`'s parent chain does not terminate (orphan or
    /// cycle).
    pub fn path_to(&self, root: SurrogateId, n: SurrogateId) -> Option<Vec<(SurrogateId, SurrogateId)>> {
        let mut path = Vec::new();
        let mut cur = n;
        let mut hops = 0usize;
        while cur != root {
            let p = *self.parent.get(&cur)?;
            path.push((p, cur));
            cur = p;
            hops += 1;
            if hops > self.parent.len() {
                return None; // cycle
            }
        }
        path.reverse();
        Some(path)
    }
}

/// A complete routing/rate assignment for every flow in the conference,
/// produced by the distributed engine or the exact solver and checked by
/// [`validate_solution`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateSolution {
    /// Dissemination tree per flow, keyed by the flow's source surrogate.
    pub trees: BTreeMap<SurrogateId, SolutionTree>,
    /// Effective rate at which each `(flow, receiver)` pair is served: the
    /// rate of the receiver's inbound tree edge clipped to its accept rate.
    pub end_rate_kbps: BTreeMap<(SurrogateId, SurrogateId), Kbps>,
}

impl RateSolution {
    /// Sum of `utility` over all `(flow, receiver)` pairs. `-inf` if any
    /// receiver is starved.
    pub fn objective(&self, topo: &TopologySnapshot) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (&(flow, receiver), &rate) in &self.end_rate_kbps {
            let accept = topo
                .accept_rate(receiver, flow)
                .ok_or(ModelError::UnknownSurrogate(receiver))?;
            total += utility(rate, accept)?;
        }
        Ok(total)
    }
}

/// Structural defects that make a solution unscorable (as opposed to merely
/// violating a resource constraint).
#[derive(Debug, Error, PartialEq)]
pub enum StructureError {
    #[error("flow {0}: no tree present")]
    MissingTree(SurrogateId),
    #[error("flow {flow}: node {node} has no path to the root (orphan or cycle)")]
    BrokenParentChain { flow: SurrogateId, node: SurrogateId },
    #[error("flow {flow}: tree edge {from} -> {to} has no corresponding link")]
    EdgeWithoutLink {
        flow: SurrogateId,
        from: SurrogateId,
        to: SurrogateId,
    },
    #[error("flow {flow}: tree edge {from} -> {to} has no rate assigned")]
    EdgeWithoutRate {
        flow: SurrogateId,
        from: SurrogateId,
        to: SurrogateId,
    },
    #[error("flow {flow}: surrogate {node} is unknown to the topology")]
    UnknownNode { flow: SurrogateId, node: SurrogateId },
    #[error("receiver {receiver} has no accept rate configured for flow {flow}")]
    MissingAcceptRate {
        flow: SurrogateId,
        receiver: SurrogateId,
    },
}

/// A single constraint violation, with enough context to point at the
/// offending flow, node, or link.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A receiver with a positive end rate is not attached to the flow's
    /// tree, or sits behind a zero-rate edge.
    FlowConservation {
        flow: SurrogateId,
        receiver: SurrogateId,
    },
    /// An end rate exceeds the rate carried by some edge on its tree path.
    UnicastWithinMulticast {
        flow: SurrogateId,
        receiver: SurrogateId,
        end_rate_kbps: Kbps,
        edge: (SurrogateId, SurrogateId),
        edge_rate_kbps: Kbps,
    },
    /// Aggregate rate across flows exceeds a link's capacity.
    LinkCapacity {
        link: (SurrogateId, SurrogateId),
        allocated_kbps: Kbps,
        capacity_kbps: Kbps,
    },
    /// A tree edge carries a higher rate than the edge feeding its parent
    /// (streams can only be down-sampled on the way to the leaves).
    DownSampling {
        flow: SurrogateId,
        node: SurrogateId,
        inbound_kbps: Kbps,
        outbound_kbps: Kbps,
    },
    /// Delivery delay (links, relay transcodes, final device transcode)
    /// exceeds the pair's deadline.
    DelayBound {
        flow: SurrogateId,
        receiver: SurrogateId,
        delay_ms: f64,
        bound_ms: f64,
    },
    /// An end rate exceeds the flow's capture rate.
    SourceRateCap {
        flow: SurrogateId,
        receiver: SurrogateId,
        end_rate_kbps: Kbps,
        source_rate_kbps: Kbps,
    },
    /// An end rate exceeds what the receiving device accepts.
    AcceptRateCap {
        flow: SurrogateId,
        receiver: SurrogateId,
        end_rate_kbps: Kbps,
        accept_kbps: Kbps,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FlowConservation { flow, receiver } => {
                write!(f, "flow {flow}: receiver {receiver} not served by the tree")
            }
            Violation::UnicastWithinMulticast {
                flow,
                receiver,
                end_rate_kbps,
                edge,
                edge_rate_kbps,
            } => write!(
                f,
                "flow {flow}: end rate {end_rate_kbps} kbps at {receiver} exceeds {} kbps carried on {} -> {}",
                edge_rate_kbps, edge.0, edge.1
            ),
            Violation::LinkCapacity {
                link,
                allocated_kbps,
                capacity_kbps,
            } => write!(
                f,
                "link {} -> {}: allocated {allocated_kbps} kbps exceeds capacity {capacity_kbps} kbps",
                link.0, link.1
            ),
            Violation::DownSampling {
                flow,
                node,
                inbound_kbps,
                outbound_kbps,
            } => write!(
                f,
                "flow {flow}: node {node} forwards at {outbound_kbps} kbps but receives only {inbound_kbps} kbps"
            ),
            Violation::DelayBound {
                flow,
                receiver,
                delay_ms,
                bound_ms,
            } => write!(
                f,
                "flow {flow}: delivery to {receiver} takes {delay_ms:.3} ms, over the {bound_ms:.3} ms deadline"
            ),
            Violation::SourceRateCap {
                flow,
                receiver,
                end_rate_kbps,
                source_rate_kbps,
            } => write!(
                f,
                "flow {flow}: end rate {end_rate_kbps} kbps at {receiver} exceeds capture rate {source_rate_kbps} kbps"
            ),
            Violation::AcceptRateCap {
                flow,
                receiver,
                end_rate_kbps,
                accept_kbps,
            } => write!(
                f,
                "flow {flow}: end rate {end_rate_kbps} kbps at {receiver} exceeds accept rate {accept_kbps} kbps"
            ),
        }
    }
}

/// Outcome of [`validate_solution`]: either clean or a list of violations
/// with witnesses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "solution valid")
        } else {
            writeln!(f, "{} violation(s):", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
            Ok(())
        }
    }
}

/// Delivery delay of `flow` to tree member `n`: link latencies along the tree
/// path, transcode latency at every intermediate relay (the source encodes
/// natively and transcodes for free), plus the final down-conversion on `n`'s
/// device from the last-hop rate to `n`'s accept rate.
///
/// Returns `None` when the path is structurally broken.
pub fn delivery_delay_ms(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    flow: SurrogateId,
    tree: &SolutionTree,
    n: SurrogateId,
) -> Option<f64> {
    let path = tree.path_to(flow, n)?;
    let mut total = 0.0;
    let mut last_hop_rate = None;
    for (from, to) in &path {
        let link = topo.link(*from, *to)?;
        total += link.latency_ms;
        let out_rate = *tree.edge_rate_kbps.get(&(*from, *to))?;
        if *from != flow {
            // A relay first receives the stream on its own inbound edge, so
            // its transcode cost depends on that inbound rate.
            let inbound = *tree.edge_rate_kbps.get(&(*tree.parent.get(from)?, *from))?;
            total += transcode.latency(*from, inbound, out_rate);
        }
        last_hop_rate = Some(out_rate);
    }
    if let Some(rate_in) = last_hop_rate {
        let accept = topo.accept_rate(n, flow)?;
        total += transcode.latency(n, rate_in, accept);
    }
    Some(total)
}

/// Checks a [`RateSolution`] against the full constraint set:
///
/// 1. every positively-served receiver hangs off its flow's tree via
///    positive-rate edges (single-path flow conservation);
/// 2. each end rate fits within every tree edge on its path;
/// 3. per-link aggregate allocation fits capacity;
/// 4. rates never increase from a relay's inbound edge to its outbound edges
///    (down-sampling only);
/// 5. delivery delay meets each pair's deadline;
/// 6. end rates respect the capture rate and the receiver's accept rate.
///
/// Structural defects (cycles, edges without links or rates, unknown nodes)
/// abort with an error instead of being reported as violations.
pub fn validate_solution(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    bounds: &DelayBounds,
    solution: &RateSolution,
) -> Result<ValidationReport, StructureError> {
    let mut report = ValidationReport::default();

    // Structural pass: every tree must be a well-formed arborescence over
    // known surrogates, with a rated link behind every edge.
    for (&flow, tree) in &solution.trees {
        if !topo.contains(flow) {
            return Err(StructureError::UnknownNode { flow, node: flow });
        }
        // A root with a parent entry makes every per-node walk terminate
        // "successfully" at the root while the edges still form a loop.
        if tree.parent.contains_key(&flow) {
            return Err(StructureError::BrokenParentChain { flow, node: flow });
        }
        for (&node, &parent) in &tree.parent {
            for end in [node, parent] {
                if !topo.contains(end) {
                    return Err(StructureError::UnknownNode { flow, node: end });
                }
            }
            if tree.path_to(flow, node).is_none() {
                return Err(StructureError::BrokenParentChain { flow, node });
            }
            if topo.link(parent, node).is_none() {
                return Err(StructureError::EdgeWithoutLink {
                    flow,
                    from: parent,
                    to: node,
                });
            }
            if !tree.edge_rate_kbps.contains_key(&(parent, node)) {
                return Err(StructureError::EdgeWithoutRate {
                    flow,
                    from: parent,
                    to: node,
                });
            }
        }
    }

    // Per-pair checks driven by the declared end rates.
    for (&(flow, receiver), &end_rate) in &solution.end_rate_kbps {
        let tree = solution
            .trees
            .get(&flow)
            .ok_or(StructureError::MissingTree(flow))?;
        let source_rate = topo
            .source_rate(flow)
            .ok_or(StructureError::UnknownNode { flow, node: flow })?;
        let accept = topo
            .accept_rate(receiver, flow)
            .ok_or(StructureError::MissingAcceptRate { flow, receiver })?;

        let on_tree = receiver == flow || tree.parent.contains_key(&receiver);
        if end_rate > 0 && !on_tree {
            report.violations.push(Violation::FlowConservation { flow, receiver });
            continue;
        }
        if !on_tree {
            continue; // unserved and absent: nothing more to check
        }

        if let Some(path) = tree.path_to(flow, receiver) {
            let mut starved = false;
            for edge in &path {
                let carried = tree.edge_rate_kbps[edge];
                if carried == 0 {
                    starved = true;
                }
                if end_rate > carried {
                    report.violations.push(Violation::UnicastWithinMulticast {
                        flow,
                        receiver,
                        end_rate_kbps: end_rate,
                        edge: *edge,
                        edge_rate_kbps: carried,
                    });
                }
            }
            if end_rate > 0 && starved {
                report.violations.push(Violation::FlowConservation { flow, receiver });
            }
        }

        if end_rate > source_rate {
            report.violations.push(Violation::SourceRateCap {
                flow,
                receiver,
                end_rate_kbps: end_rate,
                source_rate_kbps: source_rate,
            });
        }
        if end_rate > accept {
            report.violations.push(Violation::AcceptRateCap {
                flow,
                receiver,
                end_rate_kbps: end_rate,
                accept_kbps: accept,
            });
        }
    }

    // Tree-local checks: down-sampling and delay deadlines for every member,
    // served or not.
    for (&flow, tree) in &solution.trees {
        for (&node, &parent) in &tree.parent {
            let inbound = tree.edge_rate_kbps[&(parent, node)];
            for (&(from, _to), &out) in &tree.edge_rate_kbps {
                if from == node && out > inbound {
                    report.violations.push(Violation::DownSampling {
                        flow,
                        node,
                        inbound_kbps: inbound,
                        outbound_kbps: out,
                    });
                }
            }
            let bound = bounds.get(flow, node);
            if bound.is_finite() {
                let delay = delivery_delay_ms(topo, transcode, flow, tree, node)
                    .ok_or(StructureError::BrokenParentChain { flow, node })?;
                if delay > bound {
                    report.violations.push(Violation::DelayBound {
                        flow,
                        receiver: node,
                        delay_ms: delay,
                        bound_ms: bound,
                    });
                }
            }
        }
    }

    // Link capacity across flows.
    let mut allocated: BTreeMap<(SurrogateId, SurrogateId), Kbps> = BTreeMap::new();
    for tree in solution.trees.values() {
        for (&edge, &rate) in &tree.edge_rate_kbps {
            *allocated.entry(edge).or_insert(0) += rate;
        }
    }
    for (edge, total) in allocated {
        let capacity = topo
            .link(edge.0, edge.1)
            .map(|l| l.capacity_kbps)
            .unwrap_or(0);
        if total > capacity {
            report.violations.push(Violation::LinkCapacity {
                link: edge,
                allocated_kbps: total,
                capacity_kbps: capacity,
            });
        }
    }

    Ok(report)
}
