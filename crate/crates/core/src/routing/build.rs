//! Initial tree construction.
//!
//! At session setup every flow gets a latency-shortest-path tree over the
//! current members (computed centrally by the initiator from the measured
//! topology), a pure-link feasibility check against the delay deadlines, and
//! a conservative *basic* rate: one rate for the whole tree, low enough that
//! every receiver accepts it and every link can carry its even share. The
//! run-time engine then grows individual branches from that safe floor.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{DelayBounds, Kbps, RateLadder, SurrogateId, TopologySnapshot};

use super::engine::RoutingError;
use super::tree::DisseminationTree;

/// Comparisons of summed latencies tolerate this much float noise before a
/// tie-break on parent id kicks in.
const LATENCY_EPS_MS: f64 = 1e-9;

/// Outcome of [`check_feasibility`].
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Feasible,
    /// Some pair cannot meet its deadline even on a shortest path with zero
    /// transcode cost. `path_delay_ms` is the minimal bound that would make
    /// the pair feasible.
    Infeasible {
        flow: SurrogateId,
        receiver: SurrogateId,
        path_delay_ms: f64,
        bound_ms: f64,
    },
}

/// Single-source shortest-path tree over `members` by link latency,
/// Bellman-Ford style. Distance ties go to the lowest-id parent so that
/// repeated runs over the same topology agree.
fn shortest_path_tree(
    topo: &TopologySnapshot,
    members: &BTreeSet<SurrogateId>,
    source: SurrogateId,
) -> Result<DisseminationTree, RoutingError> {
    let mut dist: BTreeMap<SurrogateId, f64> = BTreeMap::new();
    let mut parent: BTreeMap<SurrogateId, SurrogateId> = BTreeMap::new();
    for &n in members {
        dist.insert(n, if n == source { 0.0 } else { f64::INFINITY });
    }
    for _ in 1..members.len().max(1) {
        let mut changed = false;
        for ((u, v), props) in topo.links() {
            if !members.contains(&u) || !members.contains(&v) {
                continue;
            }
            let du = dist[&u];
            if du.is_infinite() {
                continue;
            }
            let cand = du + props.latency_ms;
            let dv = dist[&v];
            let better = cand < dv - LATENCY_EPS_MS;
            let tie_lower_parent = (cand - dv).abs() <= LATENCY_EPS_MS
                && parent.get(&v).is_some_and(|&p| u < p);
            if better || tie_lower_parent {
                dist.insert(v, cand);
                parent.insert(v, u);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut tree = DisseminationTree::new(source);
    // Attach in distance order so parents always precede children.
    let mut order: Vec<SurrogateId> = members.iter().copied().filter(|&n| n != source).collect();
    order.sort_by(|a, b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(b)));
    for n in order {
        if dist[&n].is_infinite() {
            return Err(RoutingError::Disconnected { flow: source, node: n });
        }
        tree.attach(n, parent[&n], 0);
    }
    Ok(tree)
}

/// Builds one latency-shortest dissemination tree per member, each rooted at
/// that member's surrogate, with all edge rates still zero.
pub fn build_shortest_path_trees(
    topo: &TopologySnapshot,
    members: &BTreeSet<SurrogateId>,
) -> Result<BTreeMap<SurrogateId, DisseminationTree>, RoutingError> {
    let mut trees = BTreeMap::new();
    for &m in members {
        if !topo.contains(m) {
            return Err(RoutingError::UnknownMember(m));
        }
        trees.insert(m, shortest_path_tree(topo, members, m)?);
    }
    Ok(trees)
}

/// Pure-link admission test: on shortest-path trees, link latency alone must
/// meet every pair's deadline — otherwise no rate assignment can, since
/// transcoding only adds delay. Pairs are scanned in id order, so the
/// reported witness is deterministic.
pub fn check_feasibility(
    topo: &TopologySnapshot,
    trees: &BTreeMap<SurrogateId, DisseminationTree>,
    bounds: &DelayBounds,
) -> Feasibility {
    for (&flow, tree) in trees {
        for n in tree.members() {
            if n == flow {
                continue;
            }
            let path = tree.path_to(n).expect("constructed trees are well-formed");
            let delay: f64 = path
                .iter()
                .map(|&(u, v)| topo.link(u, v).expect("tree edge has a link").latency_ms)
                .sum();
            let bound = bounds.get(flow, n);
            if delay > bound {
                return Feasibility::Infeasible {
                    flow,
                    receiver: n,
                    path_delay_ms: delay,
                    bound_ms: bound,
                };
            }
        }
    }
    Feasibility::Feasible
}

/// Assigns every tree its basic rate: the ladder floor of
///
/// * the lowest accept rate among the tree's receivers,
/// * the flow's capture rate, and
/// * the tightest `capacity / trees-sharing-the-link` share over its edges,
///
/// applied uniformly to all edges. Receivers missing an accept rate for the
/// flow make the conference misconfigured and error out.
pub fn allocate_basic_rates(
    topo: &TopologySnapshot,
    trees: &mut BTreeMap<SurrogateId, DisseminationTree>,
    ladder: &RateLadder,
) -> Result<BTreeMap<SurrogateId, Kbps>, RoutingError> {
    // How many trees traverse each directed link.
    let mut sharers: BTreeMap<(SurrogateId, SurrogateId), u32> = BTreeMap::new();
    for tree in trees.values() {
        for (edge, _) in tree.edges() {
            *sharers.entry(edge).or_insert(0) += 1;
        }
    }

    let mut rates = BTreeMap::new();
    for (&flow, tree) in trees.iter() {
        let mut raw = topo
            .source_rate(flow)
            .ok_or(RoutingError::UnknownMember(flow))? as f64;
        for n in tree.members() {
            if n == flow {
                continue;
            }
            let accept = topo
                .accept_rate(n, flow)
                .ok_or(RoutingError::MissingAcceptRate { receiver: n, flow })?;
            raw = raw.min(accept as f64);
        }
        for (edge, _) in tree.edges() {
            let capacity = topo
                .link(edge.0, edge.1)
                .expect("tree edge has a link")
                .capacity_kbps;
            raw = raw.min(capacity as f64 / sharers[&edge] as f64);
        }
        rates.insert(flow, ladder.floor(raw));
    }

    for (&flow, tree) in trees.iter_mut() {
        let rate = rates[&flow];
        let edges: Vec<_> = tree.edges().map(|(e, _)| e).collect();
        for (u, v) in edges {
            tree.set_edge_rate(u, v, rate);
        }
    }
    Ok(rates)
}
