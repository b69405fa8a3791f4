//! Run-time adaptation of dissemination trees.
//!
//! [`RoutingState`] holds the authoritative trees, rates, measured topology
//! and delay deadlines. Adaptation is a loop of small, local, guarded moves:
//!
//! * **settle** — re-derive one flow's edge rates top-down from the current
//!   requested-rate ceilings. Raises are applied only if every member below
//!   the raised edge still meets its deadline; reductions (capacity shrank,
//!   supply dropped) are applied unconditionally.
//! * **switch** — a receiver that gets less than it wants looks through its
//!   admitted upstream candidates for one that can feed it strictly better,
//!   and re-homes under it if the whole moved subtree keeps meeting its
//!   deadlines. Rates never decrease for the switching node, which is what
//!   rules out cycles: along any hypothetical loop of such switches the rate
//!   would have to strictly increase forever.
//! * **repair** — a receiver whose measured delivery delay has drifted past
//!   its deadline re-homes onto the admitted candidate that restores the
//!   deadline with the smallest delay, even at a (temporarily) lower rate.
//!
//! Proposals are evaluated against a hypothetical copy of the state and
//! carry the state version they were computed from; applying a proposal
//! after any intervening mutation fails with a staleness error instead of
//! acting on outdated premises.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::model::{
    DelayBounds, Kbps, RateLadder, RateSolution, SurrogateId, TopologySnapshot, TranscodeModel,
};

use super::build::{allocate_basic_rates, build_shortest_path_trees, check_feasibility, Feasibility};
use super::tables::{admit_path_broadcast, PathBroadcast, PeerTables};
use super::tree::DisseminationTree;

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("flow {flow}: member {node} is unreachable from the source")]
    Disconnected { flow: SurrogateId, node: SurrogateId },
    #[error(
        "flow {flow} -> {receiver}: even the shortest path needs {path_delay_ms:.3} ms, \
         over the {bound_ms:.3} ms deadline"
    )]
    Infeasible {
        flow: SurrogateId,
        receiver: SurrogateId,
        path_delay_ms: f64,
        bound_ms: f64,
    },
    #[error("receiver {receiver} has no accept rate configured for flow {flow}")]
    MissingAcceptRate {
        receiver: SurrogateId,
        flow: SurrogateId,
    },
    #[error("{0} is not part of the topology")]
    UnknownMember(SurrogateId),
    #[error("{0} is already a session member")]
    AlreadyMember(SurrogateId),
    #[error("{0} is not a session member")]
    NotAMember(SurrogateId),
    #[error("proposal was computed against state version {proposal_version}, now at {state_version}")]
    StaleProposal {
        proposal_version: u64,
        state_version: u64,
    },
    #[error("proposal no longer matches the tree: {reason}")]
    InvalidProposal { reason: &'static str },
    #[error("flow {flow}: no remaining member has a link into {node}")]
    NoAttachPoint { flow: SurrogateId, node: SurrogateId },
}

/// Why a proposal wants to re-home a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    /// The new parent offers a strictly higher rate.
    RateImprove,
    /// The current path broke its delay deadline; rate may even drop.
    LatencyRepair,
}

/// A planned re-homing of `node` (for `flow`) under `new_parent`, valid only
/// against the state version it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub flow: SurrogateId,
    pub node: SurrogateId,
    pub old_parent: SurrogateId,
    pub new_parent: SurrogateId,
    pub new_rate_kbps: Kbps,
    pub kind: ProposalKind,
    pub version: u64,
}

/// An applied switch, for logs and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchRecord {
    pub flow: SurrogateId,
    pub node: SurrogateId,
    pub old_parent: SurrogateId,
    pub new_parent: SurrogateId,
    pub old_rate_kbps: Kbps,
    pub new_rate_kbps: Kbps,
    pub kind: ProposalKind,
}

/// Per-flow requested-rate view: `desired` is what each member would ask for
/// given its device and children (unbounded by its own inbound link);
/// `ceiling` additionally respects the inbound link's headroom and is what
/// the member can actually draw through its *current* parent.
#[derive(Debug, Clone, Default)]
pub struct RateRequests {
    pub desired: BTreeMap<SurrogateId, Kbps>,
    pub ceiling: BTreeMap<SurrogateId, Kbps>,
}

/// Outcome of one settle pass over a flow.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SettleReport {
    pub raised: Vec<((SurrogateId, SurrogateId), Kbps, Kbps)>,
    pub lowered: Vec<((SurrogateId, SurrogateId), Kbps, Kbps)>,
    /// Raises skipped because a downstream deadline would have broken.
    pub held_back: Vec<(SurrogateId, SurrogateId)>,
}

impl SettleReport {
    pub fn changed(&self) -> bool {
        !self.raised.is_empty() || !self.lowered.is_empty()
    }
}

/// Authoritative routing state for one conference.
#[derive(Debug, Clone)]
pub struct RoutingState {
    topo: TopologySnapshot,
    transcode: TranscodeModel,
    ladder: RateLadder,
    bounds: DelayBounds,
    trees: BTreeMap<SurrogateId, DisseminationTree>,
    version: u64,
}

impl RoutingState {
    /// Builds shortest-path trees over `members`, verifies pure-link
    /// feasibility against `bounds`, and assigns uniform basic rates.
    /// Returns the state plus the per-flow basic rates actually assigned.
    pub fn bootstrap(
        topo: TopologySnapshot,
        transcode: TranscodeModel,
        ladder: RateLadder,
        bounds: DelayBounds,
        members: &BTreeSet<SurrogateId>,
    ) -> Result<(Self, BTreeMap<SurrogateId, Kbps>), RoutingError> {
        let mut trees = build_shortest_path_trees(&topo, members)?;
        if let Feasibility::Infeasible {
            flow,
            receiver,
            path_delay_ms,
            bound_ms,
        } = check_feasibility(&topo, &trees, &bounds)
        {
            return Err(RoutingError::Infeasible {
                flow,
                receiver,
                path_delay_ms,
                bound_ms,
            });
        }
        let rates = allocate_basic_rates(&topo, &mut trees, &ladder)?;
        Ok((
            RoutingState {
                topo,
                transcode,
                ladder,
                bounds,
                trees,
                version: 0,
            },
            rates,
        ))
    }

    pub fn topo(&self) -> &TopologySnapshot {
        &self.topo
    }

    pub fn transcode(&self) -> &TranscodeModel {
        &self.transcode
    }

    pub fn ladder(&self) -> &RateLadder {
        &self.ladder
    }

    pub fn bounds(&self) -> &DelayBounds {
        &self.bounds
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tree(&self, flow: SurrogateId) -> Option<&DisseminationTree> {
        self.trees.get(&flow)
    }

    pub fn flows(&self) -> impl Iterator<Item = SurrogateId> + '_ {
        self.trees.keys().copied()
    }

    pub fn members(&self) -> BTreeSet<SurrogateId> {
        self.trees.keys().copied().collect()
    }

    /// Updates the measured latency of a link (drift detected by probing).
    pub fn observe_link_latency(
        &mut self,
        from: SurrogateId,
        to: SurrogateId,
        latency_ms: f64,
    ) -> Result<(), RoutingError> {
        self.topo
            .set_link_latency(from, to, latency_ms)
            .map_err(|_| RoutingError::UnknownMember(from))?;
        self.version += 1;
        Ok(())
    }

    /// Applies a scripted or detected capacity change. Over-subscribed flows
    /// are squeezed to an even ladder share of the new capacity.
    pub fn observe_link_capacity(
        &mut self,
        from: SurrogateId,
        to: SurrogateId,
        capacity_kbps: Kbps,
    ) -> Result<(), RoutingError> {
        self.topo
            .set_link_capacity(from, to, capacity_kbps)
            .map_err(|_| RoutingError::UnknownMember(from))?;
        self.version += 1;
        let users: Vec<SurrogateId> = self
            .trees
            .iter()
            .filter(|(_, t)| t.edge_rate(from, to).is_some())
            .map(|(&f, _)| f)
            .collect();
        if users.is_empty() {
            return Ok(());
        }
        if self.allocated_on(from, to) > capacity_kbps {
            let share = self
                .ladder
                .floor(capacity_kbps as f64 / users.len() as f64);
            for flow in users {
                let cur = self.trees[&flow].edge_rate(from, to).unwrap();
                if cur > share {
                    self.force_edge_rate(flow, from, to, share);
                }
            }
        }
        Ok(())
    }

    /// Tightens or relaxes the delay deadline for one (flow, receiver) pair,
    /// as the receiver's jitter budget changes.
    pub fn set_delay_bound(&mut self, flow: SurrogateId, receiver: SurrogateId, bound_ms: f64) {
        self.bounds.set(flow, receiver, bound_ms);
        self.version += 1;
    }

    /// Total rate allocated across all flows on a link.
    pub fn allocated_on(&self, from: SurrogateId, to: SurrogateId) -> Kbps {
        self.trees
            .values()
            .filter_map(|t| t.edge_rate(from, to))
            .sum()
    }

    /// Capacity still available to `flow` on a link: unallocated capacity
    /// plus whatever `flow` itself already holds there (growing your own
    /// edge does not fight your own allocation).
    pub fn headroom_for(&self, flow: SurrogateId, from: SurrogateId, to: SurrogateId) -> Kbps {
        let capacity = match self.topo.link(from, to) {
            Some(l) => l.capacity_kbps,
            None => return 0,
        };
        let own = self
            .trees
            .get(&flow)
            .and_then(|t| t.edge_rate(from, to))
            .unwrap_or(0);
        let others = self.allocated_on(from, to) - own;
        capacity.saturating_sub(others)
    }

    /// Rate at which `k` holds `flow`: the capture rate at the source, the
    /// inbound edge rate elsewhere.
    pub fn rate_at(&self, flow: SurrogateId, k: SurrogateId) -> Kbps {
        if k == flow {
            self.topo.source_rate(flow).unwrap_or(0)
        } else {
            self.trees
                .get(&flow)
                .and_then(|t| t.rate_into(k))
                .unwrap_or(0)
        }
    }

    /// Bottom-up requested-rate pass for one flow (leaves first, children in
    /// id order), using current edge allocations for headroom.
    pub fn flow_requests(&self, flow: SurrogateId) -> RateRequests {
        let tree = &self.trees[&flow];
        let mut requests = RateRequests::default();
        let source_rate = self.topo.source_rate(flow).unwrap_or(0);
        // Depth-first post-order from the root visits children before their
        // parent needs them.
        let mut order = Vec::new();
        let mut stack = vec![flow];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(tree.children(n));
        }
        for &n in order.iter().rev() {
            if n == flow {
                requests.desired.insert(n, source_rate);
                requests.ceiling.insert(n, source_rate);
                continue;
            }
            let accept = self.topo.accept_rate(n, flow).unwrap_or(0);
            let child_ceilings: Vec<Kbps> = tree
                .children(n)
                .iter()
                .map(|c| requests.ceiling[c])
                .collect();
            let max_child = child_ceilings.iter().copied().max().unwrap_or(0);
            let desired = accept.max(max_child).min(source_rate);
            let parent = tree.parent(n).expect("non-root member has a parent");
            let headroom = self.headroom_for(flow, parent, n);
            requests.desired.insert(n, desired);
            requests.ceiling.insert(n, desired.min(headroom));
        }
        requests
    }

    /// Bottom-up residual-deadline pass for one flow: the latest each member
    /// may receive it without breaking its own deadline or any descendant's.
    pub fn flow_deadlines(&self, flow: SurrogateId) -> BTreeMap<SurrogateId, f64> {
        let tree = &self.trees[&flow];
        let mut betas = BTreeMap::new();
        let mut order = Vec::new();
        let mut stack = vec![flow];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(tree.children(n));
        }
        for &n in order.iter().rev() {
            let own = if n == flow {
                f64::INFINITY
            } else {
                self.bounds.get(flow, n)
            };
            let inbound = tree.rate_into(n).unwrap_or_else(|| self.rate_at(flow, n));
            let mut beta = own;
            for c in tree.children(n) {
                let link = self
                    .topo
                    .link(n, c)
                    .expect("tree edge has a link")
                    .latency_ms;
                let out = tree.edge_rate(n, c).unwrap_or(0);
                let cost = if n == flow {
                    0.0 // the source encodes directly at each output rate
                } else {
                    self.transcode.latency(n, inbound, out)
                };
                beta = beta.min(betas[&c] - link - cost);
            }
            betas.insert(n, beta);
        }
        betas
    }

    /// Top-down delivery delay (links + relay transcodes) to every member.
    pub fn flow_delays(&self, flow: SurrogateId) -> BTreeMap<SurrogateId, f64> {
        let tree = &self.trees[&flow];
        let mut omega = BTreeMap::new();
        omega.insert(flow, 0.0);
        let mut stack = vec![flow];
        while let Some(n) = stack.pop() {
            let base = omega[&n];
            let inbound = tree.rate_into(n);
            for c in tree.children(n) {
                let link = self
                    .topo
                    .link(n, c)
                    .expect("tree edge has a link")
                    .latency_ms;
                let out = tree.edge_rate(n, c).unwrap_or(0);
                let transcode = match inbound {
                    Some(rate_in) => self.transcode.latency(n, rate_in, out),
                    None => 0.0, // source hop
                };
                omega.insert(c, base + link + transcode);
                stack.push(c);
            }
        }
        omega
    }

    /// Delay until `n`'s *device* can present the flow: path delay plus the
    /// final down-conversion from the inbound rate to the accept rate.
    pub fn device_ready_delay(&self, flow: SurrogateId, n: SurrogateId) -> f64 {
        let omega = self.flow_delays(flow);
        self.device_ready_from(flow, n, &omega)
    }

    fn device_ready_from(
        &self,
        flow: SurrogateId,
        n: SurrogateId,
        omega: &BTreeMap<SurrogateId, f64>,
    ) -> f64 {
        if n == flow {
            return 0.0;
        }
        let inbound = self.rate_at(flow, n);
        let accept = self.topo.accept_rate(n, flow).unwrap_or(inbound);
        omega[&n] + self.transcode.latency(n, inbound, accept)
    }

    /// One guarded settle pass over `flow` (see module docs). Deterministic:
    /// edges are visited top-down in breadth-first id order.
    pub fn settle_flow(&mut self, flow: SurrogateId) -> SettleReport {
        let requests = self.flow_requests(flow);
        let mut report = SettleReport::default();
        let mut queue: Vec<SurrogateId> = self.trees[&flow].children(flow);
        let mut i = 0;
        while i < queue.len() {
            let n = queue[i];
            i += 1;
            let tree = &self.trees[&flow];
            let parent = tree.parent(n).expect("non-root");
            let supply = self.rate_at(flow, parent);
            let headroom = self.headroom_for(flow, parent, n);
            let want = requests.desired[&n].min(supply).min(headroom);
            let target = self.ladder.floor(want as f64);
            let cur = tree.edge_rate(parent, n).expect("tree edge has a rate");
            if target > cur {
                // Apply tentatively; roll back if anyone below the edge
                // would miss their deadline at the new rates.
                self.trees
                    .get_mut(&flow)
                    .unwrap()
                    .set_edge_rate(parent, n, target);
                if self.subtree_within_bounds(flow, n) {
                    report.raised.push(((parent, n), cur, target));
                    self.version += 1;
                } else {
                    self.trees
                        .get_mut(&flow)
                        .unwrap()
                        .set_edge_rate(parent, n, cur);
                    report.held_back.push((parent, n));
                }
            } else if target < cur {
                self.trees
                    .get_mut(&flow)
                    .unwrap()
                    .set_edge_rate(parent, n, target);
                report.lowered.push(((parent, n), cur, target));
                self.version += 1;
            }
            queue.extend(self.trees[&flow].children(n));
        }
        debug_assert!(self.trees[&flow].is_well_formed());
        report
    }

    /// Checks deadlines for `top` and everything below it at current rates.
    fn subtree_within_bounds(&self, flow: SurrogateId, top: SurrogateId) -> bool {
        let omega = self.flow_delays(flow);
        let tree = &self.trees[&flow];
        let mut nodes = tree.descendants(top);
        nodes.push(top);
        nodes.into_iter().all(|n| {
            self.device_ready_from(flow, n, &omega) <= self.bounds.get(flow, n)
        })
    }

    /// Re-derives edge rates strictly below `top` after its inbound rate
    /// changed: each edge becomes the ladder floor of the child's ceiling
    /// and the (new) upstream supply. Unconditional; callers guard.
    fn resettle_subtree(&mut self, flow: SurrogateId, top: SurrogateId) {
        let requests = self.flow_requests(flow);
        let mut queue: Vec<SurrogateId> = self.trees[&flow].children(top);
        let mut i = 0;
        while i < queue.len() {
            let n = queue[i];
            i += 1;
            let tree = &self.trees[&flow];
            let parent = tree.parent(n).expect("non-root");
            let supply = self.rate_at(flow, parent);
            let headroom = self.headroom_for(flow, parent, n);
            let want = requests.desired[&n].min(supply).min(headroom);
            let target = self.ladder.floor(want as f64);
            let cur = tree.edge_rate(parent, n).expect("tree edge has a rate");
            if target != cur {
                self.trees
                    .get_mut(&flow)
                    .unwrap()
                    .set_edge_rate(parent, n, target);
            }
            queue.extend(self.trees[&flow].children(n));
        }
    }

    /// Forces one edge down to `rate` and squeezes the subtree below it
    /// accordingly (capacity shrank or a new flow claimed its share).
    fn force_edge_rate(&mut self, flow: SurrogateId, from: SurrogateId, to: SurrogateId, rate: Kbps) {
        self.trees
            .get_mut(&flow)
            .unwrap()
            .set_edge_rate(from, to, rate);
        self.resettle_subtree(flow, to);
        self.version += 1;
    }

    /// Looks for a strictly-better feed for `(flow, n)` among `n`'s admitted
    /// upstream candidates. Returns a proposal only when the best candidate
    /// both beats the current rate and keeps every deadline in `n`'s subtree.
    pub fn evaluate_switch(
        &self,
        tables: &PeerTables,
        flow: SurrogateId,
        n: SurrogateId,
    ) -> Option<Proposal> {
        let tree = self.trees.get(&flow)?;
        if n == flow || !tree.contains(n) {
            return None;
        }
        let requests = self.flow_requests(flow);
        let want = self.ladder.floor(requests.desired[&n] as f64);
        let cur = tree.rate_into(n).unwrap_or(0);
        if cur >= want {
            return None; // already at the requested rate
        }
        let parent = tree.parent(n).expect("non-root");

        let mut best: Option<(Kbps, SurrogateId)> = None;
        for entry in tables.candidates(flow) {
            let k = entry.via;
            if k == n || k == parent || !tree.contains(k) || tree.in_subtree(n, k) {
                continue;
            }
            if self.topo.link(k, n).is_none() {
                continue;
            }
            let offer = self
                .ladder
                .floor(self.rate_at(flow, k).min(self.headroom_for(flow, k, n)).min(requests.desired[&n]) as f64);
            if offer <= cur {
                continue;
            }
            let better = match best {
                None => true,
                Some((rate, via)) => offer > rate || (offer == rate && k < via),
            };
            if better {
                best = Some((offer, k));
            }
        }
        let (offer, k) = best?;

        // Hypothetical apply: the whole moved subtree must stay in bounds.
        let mut hyp = self.clone();
        hyp.trees.get_mut(&flow).unwrap().reparent(n, k, offer);
        hyp.resettle_subtree(flow, n);
        if !hyp.subtree_within_bounds(flow, n) {
            return None;
        }
        Some(Proposal {
            flow,
            node: n,
            old_parent: parent,
            new_parent: k,
            new_rate_kbps: offer,
            kind: ProposalKind::RateImprove,
            version: self.version,
        })
    }

    /// Looks for a candidate that restores `(flow, n)`'s broken deadline.
    /// Candidates are tried by the delivery delay they would realize; the
    /// first whose whole moved subtree meets its deadlines wins. Returns
    /// `None` while the deadline holds, or when no candidate can fix it.
    pub fn evaluate_repair(
        &self,
        tables: &PeerTables,
        flow: SurrogateId,
        n: SurrogateId,
    ) -> Option<Proposal> {
        let tree = self.trees.get(&flow)?;
        if n == flow || !tree.contains(n) {
            return None;
        }
        let current_delay = self.device_ready_delay(flow, n);
        if current_delay <= self.bounds.get(flow, n) {
            return None;
        }
        let parent = tree.parent(n).expect("non-root");
        let requests = self.flow_requests(flow);

        let mut candidates: Vec<(f64, SurrogateId, Kbps)> = Vec::new();
        for entry in tables.candidates(flow) {
            let k = entry.via;
            if k == n || k == parent || !tree.contains(k) || tree.in_subtree(n, k) {
                continue;
            }
            if self.topo.link(k, n).is_none() {
                continue;
            }
            let offer = self
                .ladder
                .floor(self.rate_at(flow, k).min(self.headroom_for(flow, k, n)).min(requests.desired[&n]) as f64);
            if offer == 0 {
                continue;
            }
            let mut hyp = self.clone();
            hyp.trees.get_mut(&flow).unwrap().reparent(n, k, offer);
            hyp.resettle_subtree(flow, n);
            let new_delay = hyp.device_ready_delay(flow, n);
            if new_delay < current_delay && hyp.subtree_within_bounds(flow, n) {
                candidates.push((new_delay, k, offer));
            }
        }
        let (_, k, offer) = candidates
            .into_iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))?;
        Some(Proposal {
            flow,
            node: n,
            old_parent: parent,
            new_parent: k,
            new_rate_kbps: offer,
            kind: ProposalKind::LatencyRepair,
            version: self.version,
        })
    }

    /// Applies a previously evaluated proposal. Fails if the state has
    /// changed since evaluation or the proposal no longer matches the tree.
    pub fn apply_switch(&mut self, proposal: &Proposal) -> Result<SwitchRecord, RoutingError> {
        if proposal.version != self.version {
            return Err(RoutingError::StaleProposal {
                proposal_version: proposal.version,
                state_version: self.version,
            });
        }
        let tree = self
            .trees
            .get(&proposal.flow)
            .ok_or(RoutingError::NotAMember(proposal.flow))?;
        if tree.parent(proposal.node) != Some(proposal.old_parent) {
            return Err(RoutingError::InvalidProposal {
                reason: "node is no longer fed by the expected parent",
            });
        }
        if !tree.contains(proposal.new_parent) || tree.in_subtree(proposal.node, proposal.new_parent)
        {
            return Err(RoutingError::InvalidProposal {
                reason: "new parent left the tree or sits inside the moved subtree",
            });
        }
        let old_rate = tree.rate_into(proposal.node).unwrap_or(0);
        self.trees
            .get_mut(&proposal.flow)
            .unwrap()
            .reparent(proposal.node, proposal.new_parent, proposal.new_rate_kbps);
        self.resettle_subtree(proposal.flow, proposal.node);
        self.version += 1;
        debug_assert!(self.trees[&proposal.flow].is_well_formed());
        Ok(SwitchRecord {
            flow: proposal.flow,
            node: proposal.node,
            old_parent: proposal.old_parent,
            new_parent: proposal.new_parent,
            old_rate_kbps: old_rate,
            new_rate_kbps: proposal.new_rate_kbps,
            kind: proposal.kind,
        })
    }

    /// Adds a member mid-session: it joins every existing tree under the
    /// lowest-latency feasible parent, and a new tree for its own flow is
    /// built over shortest paths. Where the newcomer's tree claims capacity
    /// that incumbents were using, those incumbents are squeezed down to an
    /// even ladder share — their engines will re-grow or re-route afterwards.
    pub fn join_member(&mut self, n: SurrogateId) -> Result<(), RoutingError> {
        if !self.topo.contains(n) {
            return Err(RoutingError::UnknownMember(n));
        }
        if self.trees.contains_key(&n) {
            return Err(RoutingError::AlreadyMember(n));
        }

        // Attach the newcomer to every existing flow.
        let flows: Vec<SurrogateId> = self.trees.keys().copied().collect();
        for flow in flows {
            let omega = self.flow_delays(flow);
            let tree = &self.trees[&flow];
            let mut best: Option<(f64, SurrogateId)> = None;
            for p in tree.members() {
                let Some(link) = self.topo.link(p, n) else {
                    continue;
                };
                let delay = omega[&p] + link.latency_ms;
                let better = match best {
                    None => true,
                    Some((d, bp)) => {
                        delay < d - 1e-9 || ((delay - d).abs() <= 1e-9 && p < bp)
                    }
                };
                if better {
                    best = Some((delay, p));
                }
            }
            let (_, p) = best.ok_or(RoutingError::NoAttachPoint { flow, node: n })?;
            let accept = self
                .topo
                .accept_rate(n, flow)
                .ok_or(RoutingError::MissingAcceptRate { receiver: n, flow })?;
            let rate = self.ladder.floor(
                self.rate_at(flow, p)
                    .min(self.headroom_for(flow, p, n))
                    .min(accept) as f64,
            );
            self.trees.get_mut(&flow).unwrap().attach(n, p, rate);
        }

        // Build the newcomer's own tree over the enlarged membership.
        let mut members = self.members();
        members.insert(n);
        let new_tree = build_shortest_path_trees(&self.topo, &members)?
            .remove(&n)
            .expect("tree for the new flow");
        self.trees.insert(n, new_tree);

        // Basic rate for the new flow: accept/source caps, and per edge the
        // better of the residual capacity and an even share.
        let tree = &self.trees[&n];
        let mut raw = self.topo.source_rate(n).unwrap_or(0) as f64;
        for r in tree.members() {
            if r != n {
                let accept = self
                    .topo
                    .accept_rate(r, n)
                    .ok_or(RoutingError::MissingAcceptRate { receiver: r, flow: n })?;
                raw = raw.min(accept as f64);
            }
        }
        let edges: Vec<(SurrogateId, SurrogateId)> = tree.edges().map(|(e, _)| e).collect();
        for &(u, v) in &edges {
            let capacity = self.topo.link(u, v).unwrap().capacity_kbps;
            let occupants = self
                .trees
                .values()
                .filter(|t| t.edge_rate(u, v).is_some())
                .count() as f64; // includes the new tree itself
            let residual = self.headroom_for(n, u, v) as f64;
            raw = raw.min(residual.max(capacity as f64 / occupants));
        }
        let rate = self.ladder.floor(raw);
        for &(u, v) in &edges {
            self.trees.get_mut(&n).unwrap().set_edge_rate(u, v, rate);
        }

        // Squeeze incumbents on edges the new flow over-committed.
        for (u, v) in edges {
            let capacity = self.topo.link(u, v).unwrap().capacity_kbps;
            if self.allocated_on(u, v) <= capacity {
                continue;
            }
            let incumbents: Vec<SurrogateId> = self
                .trees
                .iter()
                .filter(|(&f, t)| f != n && t.edge_rate(u, v).is_some())
                .map(|(&f, _)| f)
                .collect();
            let share = self
                .ladder
                .floor((capacity - rate) as f64 / incumbents.len() as f64);
            for flow in incumbents {
                let cur = self.trees[&flow].edge_rate(u, v).unwrap();
                if cur > share {
                    self.trees
                        .get_mut(&flow)
                        .unwrap()
                        .set_edge_rate(u, v, share);
                    self.resettle_subtree(flow, v);
                }
            }
        }

        self.version += 1;
        Ok(())
    }

    /// Removes a member: its own tree disappears, and in every other tree
    /// the children it used to feed are re-homed onto the lowest-delay
    /// remaining member with a link to them.
    pub fn leave_member(&mut self, n: SurrogateId) -> Result<(), RoutingError> {
        if !self.trees.contains_key(&n) {
            return Err(RoutingError::NotAMember(n));
        }
        self.trees.remove(&n);
        let flows: Vec<SurrogateId> = self.trees.keys().copied().collect();
        for flow in flows {
            if !self.trees[&flow].contains(n) {
                continue;
            }
            // Re-home each orphaned child before dropping the leaver.
            let children = self.trees[&flow].children(n);
            for c in children {
                let omega = self.flow_delays(flow);
                let tree = &self.trees[&flow];
                let mut best: Option<(f64, SurrogateId)> = None;
                for p in tree.members() {
                    if p == n || p == c || tree.in_subtree(c, p) {
                        continue;
                    }
                    let Some(link) = self.topo.link(p, c) else {
                        continue;
                    };
                    let delay = omega[&p] + link.latency_ms;
                    let better = match best {
                        None => true,
                        Some((d, bp)) => {
                            delay < d - 1e-9 || ((delay - d).abs() <= 1e-9 && p < bp)
                        }
                    };
                    if better {
                        best = Some((delay, p));
                    }
                }
                let (_, p) = best.ok_or(RoutingError::NoAttachPoint { flow, node: c })?;
                let requests = self.flow_requests(flow);
                let rate = self.ladder.floor(
                    self.rate_at(flow, p)
                        .min(self.headroom_for(flow, p, c))
                        .min(requests.desired[&c]) as f64,
                );
                self.trees.get_mut(&flow).unwrap().reparent(c, p, rate);
                self.resettle_subtree(flow, c);
            }
            self.trees.get_mut(&flow).unwrap().detach_leaf(n);
        }
        self.version += 1;
        Ok(())
    }

    /// Snapshot as a validated-solution structure: end rates are inbound
    /// rates clipped to accept rates.
    pub fn to_solution(&self) -> RateSolution {
        let mut solution = RateSolution::default();
        for (&flow, tree) in &self.trees {
            solution.trees.insert(flow, tree.to_solution_tree());
            for n in tree.members() {
                if n == flow {
                    continue;
                }
                let inbound = tree.rate_into(n).unwrap_or(0);
                let accept = self.topo.accept_rate(n, flow).unwrap_or(inbound);
                solution
                    .end_rate_kbps
                    .insert((flow, n), inbound.min(accept));
            }
        }
        solution
    }

    /// Structural and resource sanity across all trees; returns the first
    /// problem found. Used by tests and randomized harnesses after every
    /// mutation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (&flow, tree) in &self.trees {
            if !tree.is_well_formed() {
                return Err(format!("flow {flow}: tree is malformed or cyclic"));
            }
            for n in tree.members() {
                if n == flow {
                    continue;
                }
                let inbound = tree.rate_into(n).unwrap_or(0);
                for c in tree.children(n) {
                    let out = tree.edge_rate(n, c).unwrap_or(0);
                    if out > inbound {
                        return Err(format!(
                            "flow {flow}: {n} forwards {out} kbps to {c} but receives {inbound}"
                        ));
                    }
                }
            }
        }
        let mut loads: BTreeMap<(SurrogateId, SurrogateId), Kbps> = BTreeMap::new();
        for tree in self.trees.values() {
            for (edge, rate) in tree.edges() {
                *loads.entry(edge).or_insert(0) += rate;
            }
        }
        for ((u, v), load) in loads {
            let capacity = self
                .topo
                .link(u, v)
                .map(|l| l.capacity_kbps)
                .unwrap_or(0);
            if load > capacity {
                return Err(format!(
                    "link {u} -> {v}: allocated {load} kbps over capacity {capacity}"
                ));
            }
        }
        Ok(())
    }
}

/// Synchronizes one flow's gossip-table fields (children, requested-rate
/// ceiling, residual deadline) for every member, from the authoritative
/// state. In the distributed deployment these values travel with
/// rate-request and broadcast messages; drivers here recompute them when the
/// tree or its rates change.
pub fn sync_flow_tables(
    state: &RoutingState,
    tables: &mut BTreeMap<SurrogateId, PeerTables>,
    flow: SurrogateId,
) {
    let Some(tree) = state.tree(flow) else { return };
    let requests = state.flow_requests(flow);
    let deadlines = state.flow_deadlines(flow);
    for n in tree.members() {
        let entry = tables.entry(n).or_insert_with(|| PeerTables::new(n));
        entry
            .dstab
            .insert(flow, tree.children(n).into_iter().collect());
        entry.alpha.insert(flow, requests.ceiling[&n]);
        entry.beta.insert(flow, deadlines[&n]);
    }
}

/// Summary of one evolution round.
#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub evaluations: usize,
    pub switches: Vec<SwitchRecord>,
    pub rate_changes: usize,
}

/// Summary of a full run to quiescence (or round exhaustion).
#[derive(Debug, Clone, Default)]
pub struct EvolutionReport {
    pub rounds: usize,
    pub quiescent: bool,
    pub switches: Vec<SwitchRecord>,
    /// Per-round switch counts — the decision trajectory, useful when a run
    /// fails to converge.
    pub trajectory: Vec<usize>,
}

/// Library-level driver that plays the asynchronous per-surrogate loop
/// synchronously: each round visits every (receiver, flow) pair in a seeded
/// random order, refreshes gossip, settles rates, and evaluates a repair or
/// switch. The simulator performs the same steps from timer events instead.
#[derive(Debug)]
pub struct Evolution {
    pub state: RoutingState,
    pub tables: BTreeMap<SurrogateId, PeerTables>,
    rng: ChaCha12Rng,
    now_ms: f64,
}

impl Evolution {
    pub fn new(state: RoutingState, seed: u64) -> Self {
        let mut tables = BTreeMap::new();
        let flows: Vec<SurrogateId> = state.flows().collect();
        for &flow in &flows {
            sync_flow_tables(&state, &mut tables, flow);
        }
        Evolution {
            state,
            tables,
            rng: ChaCha12Rng::seed_from_u64(seed),
            now_ms: 0.0,
        }
    }

    /// Sends `n` fresh path broadcasts from every tree neighbour that could
    /// feed it, mirroring the periodic gossip.
    fn refresh_candidates(&mut self, flow: SurrogateId, n: SurrogateId) {
        let Some(tree) = self.state.tree(flow) else { return };
        let senders: Vec<SurrogateId> = self
            .state
            .topo()
            .upstream_of(n)
            .filter(|&j| j != n && tree.contains(j))
            .collect();
        let omega = self.state.flow_delays(flow);
        for j in senders {
            let alpha_j = self
                .tables
                .get(&j)
                .and_then(|t| t.alpha.get(&flow).copied())
                .unwrap_or_else(|| self.state.rate_at(flow, j));
            let msg = PathBroadcast {
                flow,
                sender: j,
                rate_kbps: self.state.rate_at(flow, j),
                max_rate_kbps: alpha_j,
                path_latency_ms: omega[&j],
                vm_profile: String::new(),
            };
            let tables = self
                .tables
                .entry(n)
                .or_insert_with(|| PeerTables::new(n));
            admit_path_broadcast(
                tables,
                self.state.topo(),
                self.state.transcode(),
                &msg,
                self.now_ms,
            );
        }
    }

    /// One full evaluation round over all (receiver, flow) pairs in seeded
    /// random order. Random visiting order is what lets contended bandwidth
    /// end up split between flows instead of always favouring the same one.
    pub fn round(&mut self) -> RoundReport {
        let mut report = RoundReport::default();
        let mut pairs: Vec<(SurrogateId, SurrogateId)> = Vec::new();
        for flow in self.state.flows() {
            let tree = self.state.tree(flow).unwrap();
            for n in tree.members() {
                if n != flow {
                    pairs.push((n, flow));
                }
            }
        }
        pairs.shuffle(&mut self.rng);

        for (n, flow) in pairs {
            if self.state.tree(flow).map(|t| t.contains(n)) != Some(true) {
                continue; // membership changed mid-round
            }
            let settle = self.state.settle_flow(flow);
            report.rate_changes += settle.raised.len() + settle.lowered.len();
            sync_flow_tables(&self.state, &mut self.tables, flow);
            self.refresh_candidates(flow, n);
            report.evaluations += 1;

            let tables = &self.tables[&n];
            let proposal = self
                .state
                .evaluate_repair(tables, flow, n)
                .or_else(|| self.state.evaluate_switch(tables, flow, n));
            if let Some(p) = proposal {
                let record = self
                    .state
                    .apply_switch(&p)
                    .expect("freshly evaluated proposal applies");
                sync_flow_tables(&self.state, &mut self.tables, flow);
                report.switches.push(record);
            }
            self.now_ms += 1.0;
        }
        report
    }

    /// Rounds until a round makes no change, or `max_rounds` is exhausted
    /// (reported as non-quiescent rather than looping forever).
    pub fn run_to_quiescence(&mut self, max_rounds: usize) -> EvolutionReport {
        let mut report = EvolutionReport::default();
        for _ in 0..max_rounds {
            let round = self.round();
            report.rounds += 1;
            report.trajectory.push(round.switches.len());
            let quiet = round.switches.is_empty() && round.rate_changes == 0;
            report.switches.extend(round.switches);
            if quiet {
                report.quiescent = true;
                break;
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_solution, LastMile, LinkProps};
    use crate::routing::tables::AdmitOutcome;

    fn id(n: u32) -> SurrogateId {
        SurrogateId(n)
    }

    /// Four surrogates 0..3 on a near-complete mesh (no links between 1 and
    /// 2), with one narrow link 0 -> 2 shared by flows 0 and 1. Layouts:
    /// everyone takes flow 0 and flow 2 at 256, flow 3 at 512; flow 1 is
    /// watched at 256 by 0 but at 512 by 2 and 3.
    ///
    /// The interesting receiver is 2: its shortest path for flow 1 crosses
    /// the narrow 0 -> 2 link, so both flows start at a 256 basic rate
    /// there, and only a re-home onto relay 3 can lift flow 1 to 512.
    fn shared_bottleneck() -> (TopologySnapshot, DelayBounds) {
        let mut topo = TopologySnapshot::new();
        let accepts: [[Kbps; 4]; 4] = [
            // accept[receiver][flow]; 0 on the diagonal (unused)
            [0, 256, 256, 512],
            [256, 0, 256, 512],
            [256, 512, 0, 512],
            [256, 512, 256, 0],
        ];
        for n in 0..4u32 {
            let mut lm = LastMile::symmetric(50.0, 1049);
            for f in 0..4u32 {
                if f != n {
                    lm.accept_kbps.insert(id(f), accepts[n as usize][f as usize]);
                }
            }
            topo.add_surrogate(id(n), lm).unwrap();
        }
        for u in 0..4u32 {
            for v in 0..4u32 {
                if u == v || (u, v) == (1, 2) || (u, v) == (2, 1) {
                    continue;
                }
                let capacity = if (u, v) == (0, 2) { 512 } else { 1024 };
                topo.add_link(
                    id(u),
                    id(v),
                    LinkProps {
                        capacity_kbps: capacity,
                        latency_ms: 10.0,
                    },
                )
                .unwrap();
            }
        }
        let bounds = DelayBounds::uniform(&topo, 300.0);
        (topo, bounds)
    }

    fn bootstrap_bottleneck() -> (RoutingState, BTreeMap<SurrogateId, Kbps>) {
        let (topo, bounds) = shared_bottleneck();
        let members = topo.surrogates().collect();
        RoutingState::bootstrap(
            topo,
            TranscodeModel::new(10.0, 0.01, 0.01).unwrap(),
            RateLadder::default(),
            bounds,
            &members,
        )
        .unwrap()
    }

    #[test]
    fn basic_rates_share_the_narrow_link() {
        let (state, rates) = bootstrap_bottleneck();
        // Flows 0 and 1 both traverse 0 -> 2 (512 kbps): an even split plus
        // flow 0's own 256-kbps accept floor puts both at 256. Flow 3 has
        // private 1024 links and a 512 accept everywhere. Flow 2 is floored
        // by its receivers' 256 accepts.
        assert_eq!(rates[&id(0)], 256);
        assert_eq!(rates[&id(1)], 256);
        assert_eq!(rates[&id(2)], 256);
        assert_eq!(rates[&id(3)], 512);
        // Flow 1 reaches 2 through 0 on the shortest path.
        assert_eq!(state.tree(id(1)).unwrap().parent(id(2)), Some(id(0)));
        assert_eq!(state.rate_at(id(1), id(2)), 256);
        assert_eq!(state.allocated_on(id(0), id(2)), 512);
    }

    #[test]
    fn settle_grows_branches_with_private_headroom() {
        let (mut state, _) = bootstrap_bottleneck();
        // Flow 1's edge to 3 sits on a private 1024 link; its 512 accept
        // should be reachable immediately, while the 0 -> 2 branch is stuck
        // behind the shared narrow link.
        let report = state.settle_flow(id(1));
        assert!(report
            .raised
            .iter()
            .any(|&(edge, from, to)| edge == (id(1), id(3)) && from == 256 && to == 512));
        assert_eq!(state.rate_at(id(1), id(3)), 512);
        assert_eq!(state.rate_at(id(1), id(2)), 256);
        // A second pass finds nothing more to do.
        assert!(!state.settle_flow(id(1)).changed());
    }

    #[test]
    fn switch_rehomes_starved_receiver_onto_relay() {
        let (mut state, _) = bootstrap_bottleneck();
        state.settle_flow(id(1));
        let mut tables = BTreeMap::new();
        sync_flow_tables(&state, &mut tables, id(1));

        // Receiver 2 hears relay 3 advertise flow 1.
        let omega = state.flow_delays(id(1));
        let msg = PathBroadcast {
            flow: id(1),
            sender: id(3),
            rate_kbps: state.rate_at(id(1), id(3)),
            max_rate_kbps: tables[&id(3)].alpha[&id(1)],
            path_latency_ms: omega[&id(3)],
            vm_profile: String::new(),
        };
        let out = admit_path_broadcast(
            tables.get_mut(&id(2)).unwrap(),
            state.topo(),
            state.transcode(),
            &msg,
            0.0,
        );
        assert!(matches!(out, AdmitOutcome::Admitted { .. }));

        let proposal = state
            .evaluate_switch(&tables[&id(2)], id(1), id(2))
            .expect("starved receiver should find the relay");
        assert_eq!(proposal.new_parent, id(3));
        assert_eq!(proposal.new_rate_kbps, 512);
        assert_eq!(proposal.kind, ProposalKind::RateImprove);

        let record = state.apply_switch(&proposal).unwrap();
        assert_eq!(record.old_rate_kbps, 256);
        assert_eq!(state.tree(id(1)).unwrap().parent(id(2)), Some(id(3)));
        assert_eq!(state.rate_at(id(1), id(2)), 512);
        state.check_invariants().unwrap();
        // The narrow link now carries only flow 0.
        assert_eq!(state.allocated_on(id(0), id(2)), 256);
    }

    #[test]
    fn stale_proposal_is_rejected_after_any_mutation() {
        let (mut state, _) = bootstrap_bottleneck();
        state.settle_flow(id(1));
        let mut tables = BTreeMap::new();
        sync_flow_tables(&state, &mut tables, id(1));
        let omega = state.flow_delays(id(1));
        let msg = PathBroadcast {
            flow: id(1),
            sender: id(3),
            rate_kbps: 512,
            max_rate_kbps: 512,
            path_latency_ms: omega[&id(3)],
            vm_profile: String::new(),
        };
        admit_path_broadcast(
            tables.get_mut(&id(2)).unwrap(),
            state.topo(),
            state.transcode(),
            &msg,
            0.0,
        );
        let proposal = state.evaluate_switch(&tables[&id(2)], id(1), id(2)).unwrap();
        // Any mutation — here a latency observation — invalidates it.
        state
            .observe_link_latency(id(0), id(1), 12.0)
            .unwrap();
        let err = state.apply_switch(&proposal).unwrap_err();
        assert!(matches!(err, RoutingError::StaleProposal { .. }));
    }

    #[test]
    fn evolution_reaches_quiescent_optimum_on_bottleneck() {
        let (state, _) = bootstrap_bottleneck();
        let mut evo = Evolution::new(state, 42);
        let report = evo.run_to_quiescence(20);
        assert!(report.quiescent, "trajectory {:?}", report.trajectory);
        // The one interesting move: receiver 2 re-homes flow 1 onto relay 3.
        assert!(report
            .switches
            .iter()
            .any(|s| s.flow == id(1) && s.node == id(2) && s.new_parent == id(3)));
        assert_eq!(evo.state.rate_at(id(1), id(2)), 512);
        // Everyone now receives every flow at its accept rate.
        let solution = evo.state.to_solution();
        let report = validate_solution(
            evo.state.topo(),
            evo.state.transcode(),
            evo.state.bounds(),
            &solution,
        )
        .unwrap();
        assert!(report.is_valid(), "{report}");
        assert_eq!(solution.objective(evo.state.topo()).unwrap(), 0.0);
    }

    #[test]
    fn evolution_is_deterministic_per_seed() {
        let (state, _) = bootstrap_bottleneck();
        let runs: Vec<Vec<SwitchRecord>> = (0..2)
            .map(|_| {
                let mut evo = Evolution::new(state.clone(), 7);
                evo.run_to_quiescence(20).switches
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn repair_rewires_around_slow_path_even_at_lower_rate() {
        let (mut state, _) = bootstrap_bottleneck();
        let mut evo = Evolution::new(state.clone(), 42);
        evo.run_to_quiescence(20);
        state = evo.state;
        let mut tables = evo.tables;

        // Flow 1 now reaches 2 via relay 3. The 3 -> 2 link degrades badly
        // and 2's deadline tightens: the only fix is back through 0 at 256.
        state.observe_link_latency(id(3), id(2), 200.0).unwrap();
        state.set_delay_bound(id(1), id(2), 100.0);
        sync_flow_tables(&state, &mut tables, id(1));
        let delay = state.device_ready_delay(id(1), id(2));
        assert!(delay > 100.0, "should be in violation, delay {delay}");

        // Gossip refreshes 0's entry; evaluate/apply via the state API.
        let omega = state.flow_delays(id(1));
        let msg = PathBroadcast {
            flow: id(1),
            sender: id(0),
            rate_kbps: state.rate_at(id(1), id(0)),
            max_rate_kbps: tables[&id(0)].alpha[&id(1)],
            path_latency_ms: omega[&id(0)],
            vm_profile: String::new(),
        };
        admit_path_broadcast(
            tables.get_mut(&id(2)).unwrap(),
            state.topo(),
            state.transcode(),
            &msg,
            0.0,
        );
        let proposal = state
            .evaluate_repair(&tables[&id(2)], id(1), id(2))
            .expect("repair candidate exists via 0");
        assert_eq!(proposal.new_parent, id(0));
        assert_eq!(proposal.kind, ProposalKind::LatencyRepair);
        // The narrow shared link only has 256 kbps left for flow 1.
        assert_eq!(proposal.new_rate_kbps, 256);
        state.apply_switch(&proposal).unwrap();
        assert!(state.device_ready_delay(id(1), id(2)) <= 100.0);
        state.check_invariants().unwrap();
    }

    #[test]
    fn join_attaches_everywhere_and_builds_own_tree() {
        let (topo, bounds) = shared_bottleneck();
        let members: BTreeSet<SurrogateId> = [id(0), id(1), id(3)].into_iter().collect();
        let (mut state, _) = RoutingState::bootstrap(
            topo,
            TranscodeModel::new(10.0, 0.01, 0.01).unwrap(),
            RateLadder::default(),
            bounds,
            &members,
        )
        .unwrap();
        state.join_member(id(2)).unwrap();
        for flow in [id(0), id(1), id(3)] {
            assert!(
                state.tree(flow).unwrap().contains(id(2)),
                "flow {flow} misses the joiner"
            );
        }
        let own = state.tree(id(2)).expect("joiner's own tree");
        assert_eq!(own.members().len(), 4);
        state.check_invariants().unwrap();
        assert_eq!(
            state.join_member(id(2)).unwrap_err(),
            RoutingError::AlreadyMember(id(2))
        );
    }

    #[test]
    fn leave_rehomes_orphaned_children() {
        let (state, _) = bootstrap_bottleneck();
        let mut evo = Evolution::new(state, 42);
        evo.run_to_quiescence(20);
        let mut state = evo.state;
        // After evolution, 3 relays flow 1 to receiver 2. When 3 leaves,
        // 2 must be re-homed (only 0 has a link into it) and 3's own flow
        // disappears.
        assert_eq!(state.tree(id(1)).unwrap().parent(id(2)), Some(id(3)));
        state.leave_member(id(3)).unwrap();
        assert!(state.tree(id(3)).is_none());
        for flow in [id(0), id(1), id(2)] {
            let tree = state.tree(flow).unwrap();
            assert!(!tree.contains(id(3)), "flow {flow} still carries 3");
        }
        assert_eq!(state.tree(id(1)).unwrap().parent(id(2)), Some(id(0)));
        state.check_invariants().unwrap();
    }

    #[test]
    fn capacity_drop_squeezes_flows_to_even_shares() {
        let (mut state, _) = bootstrap_bottleneck();
        // 0 -> 2 carries flows 0 and 1 at 256 each; halving it to 256 forces
        // both down to an even 128 share.
        state.observe_link_capacity(id(0), id(2), 256).unwrap();
        assert_eq!(state.rate_at(id(0), id(2)), 128);
        assert_eq!(state.rate_at(id(1), id(2)), 128);
        state.check_invariants().unwrap();
    }
}
