//! Exhaustive reference solver for small conferences.
//!
//! Enumerates, per flow, every dissemination tree over the member set and
//! every non-increasing assignment of ladder rates to its edges, keeping the
//! delay-feasible candidates. A branch-and-bound search then picks one
//! candidate per flow maximizing total utility subject to shared link
//! capacities. The result is the true optimum of the discrete allocation
//! problem the adaptive engine approximates, so the engine's solutions can
//! be scored against it: `engine objective <= exact objective` must hold on
//! every instance, and the difference is the optimality gap.
//!
//! Everything here is exponential in the member count and intended for
//! conferences of at most [`MAX_EXACT_MEMBERS`] surrogates.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{
    delivery_delay_ms, utility, validate_solution, DelayBounds, Kbps, RateLadder, RateSolution,
    SolutionTree, SurrogateId, TopologySnapshot, TranscodeModel,
};
use crate::routing::{Evolution, RoutingState};

/// Hard ceiling on the member count accepted by [`solve_exact`]; beyond
/// this the candidate space is too large to enumerate honestly.
pub const MAX_EXACT_MEMBERS: usize = 5;

/// Treat objective differences at or below this as equal: the heuristic and
/// the exact solver do their arithmetic in different orders.
pub const GAP_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{members} members exceed the exhaustive-search limit of {limit}")]
    TooLarge { members: usize, limit: usize },
    #[error("receiver {receiver} has no accept rate configured for flow {flow}")]
    MissingAcceptRate {
        receiver: SurrogateId,
        flow: SurrogateId,
    },
    #[error("flow {flow}: no spanning tree over the members satisfies the delay bounds")]
    NoFeasibleCandidate { flow: SurrogateId },
    #[error("no joint assignment fits the link capacities")]
    NoJointSolution,
    #[error("adaptive engine produced an invalid solution: {0}")]
    HeuristicInvalid(String),
    #[error("bootstrap failed: {0}")]
    Bootstrap(#[from] crate::routing::RoutingError),
}

/// Result of [`solve_exact`], with search statistics.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub solution: RateSolution,
    pub objective: f64,
    /// Delay-feasible (tree, rates) candidates enumerated per flow.
    pub candidates_per_flow: BTreeMap<SurrogateId, usize>,
    /// Nodes visited by the joint branch-and-bound search.
    pub search_nodes: u64,
}

/// One admissible (tree, rates) choice for a single flow.
struct Candidate {
    tree: SolutionTree,
    /// Load this candidate places on each link, indexed like `LinkIndex`.
    loads: Vec<Kbps>,
    utility: f64,
}

/// Dense link indexing for fast capacity accumulation during the search.
struct LinkIndex {
    ids: BTreeMap<(SurrogateId, SurrogateId), usize>,
    capacity: Vec<Kbps>,
}

impl LinkIndex {
    fn new(topo: &TopologySnapshot) -> Self {
        let mut ids = BTreeMap::new();
        let mut capacity = Vec::new();
        for (edge, props) in topo.links() {
            ids.insert(edge, capacity.len());
            capacity.push(props.capacity_kbps);
        }
        LinkIndex { ids, capacity }
    }
}

/// Smallest ladder step at or above `kbps` (the largest step if none is).
/// Capping an edge here never lowers any end rate below `kbps`.
fn ladder_ceil(ladder: &RateLadder, kbps: Kbps) -> Kbps {
    ladder
        .steps()
        .iter()
        .copied()
        .find(|&s| s >= kbps)
        .unwrap_or(ladder.max_step())
}

/// Enumerates every delay-feasible (tree, ladder rates) candidate for one
/// flow, in a deterministic order.
///
/// Edge rates are capped at the smallest ladder step covering the largest
/// accept rate in the subtree they feed: pushing more than anyone downstream
/// can present changes no end rate, only burns capacity and transcode time.
fn enumerate_flow(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    ladder: &RateLadder,
    bounds: &DelayBounds,
    members: &BTreeSet<SurrogateId>,
    flow: SurrogateId,
    links: &LinkIndex,
) -> Result<Vec<Candidate>, OracleError> {
    let receivers: Vec<SurrogateId> = members.iter().copied().filter(|&n| n != flow).collect();
    for &r in &receivers {
        if topo.accept_rate(r, flow).is_none() {
            return Err(OracleError::MissingAcceptRate { receiver: r, flow });
        }
    }
    let source_rate = topo.source_rate(flow).unwrap_or(0);

    // Parent choices per receiver: any other member with a link into it.
    let choices: Vec<Vec<SurrogateId>> = receivers
        .iter()
        .map(|&r| {
            members
                .iter()
                .copied()
                .filter(|&p| p != r && topo.link(p, r).is_some())
                .collect()
        })
        .collect();
    if choices.iter().any(Vec::is_empty) {
        return Ok(Vec::new());
    }

    let mut candidates = Vec::new();
    let mut pick = vec![0usize; receivers.len()];
    loop {
        let parent: BTreeMap<SurrogateId, SurrogateId> = receivers
            .iter()
            .zip(&pick)
            .map(|(&r, &i)| (r, choices_at(&choices, &receivers, r)[i]))
            .collect();
        if spans_all(&parent, flow, members) {
            enumerate_rates(
                topo, transcode, ladder, bounds, flow, source_rate, &parent, links,
                &mut candidates,
            );
        }
        // Mixed-radix increment over the parent choices.
        let mut i = 0;
        loop {
            if i == pick.len() {
                return Ok(candidates);
            }
            pick[i] += 1;
            if pick[i] < choices[i].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

fn choices_at<'a>(
    choices: &'a [Vec<SurrogateId>],
    receivers: &[SurrogateId],
    r: SurrogateId,
) -> &'a [SurrogateId] {
    let idx = receivers.iter().position(|&x| x == r).unwrap();
    &choices[idx]
}

/// A parent map over `members` is a tree iff everything is reachable from
/// the root along child edges (it always has exactly n-1 edges).
fn spans_all(
    parent: &BTreeMap<SurrogateId, SurrogateId>,
    root: SurrogateId,
    members: &BTreeSet<SurrogateId>,
) -> bool {
    let mut children: BTreeMap<SurrogateId, Vec<SurrogateId>> = BTreeMap::new();
    for (&c, &p) in parent {
        children.entry(p).or_default().push(c);
    }
    let mut seen = BTreeSet::from([root]);
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        for &c in children.get(&n).into_iter().flatten() {
            if seen.insert(c) {
                stack.push(c);
            }
        }
    }
    seen.len() == members.len()
}

/// Enumerates ladder rates over a fixed tree, top-down so each edge sees the
/// rate chosen for its parent's inbound edge, and records the delay-feasible
/// completions.
#[allow(clippy::too_many_arguments)]
fn enumerate_rates(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    ladder: &RateLadder,
    bounds: &DelayBounds,
    flow: SurrogateId,
    source_rate: Kbps,
    parent: &BTreeMap<SurrogateId, SurrogateId>,
    links: &LinkIndex,
    out: &mut Vec<Candidate>,
) {
    let mut children: BTreeMap<SurrogateId, Vec<SurrogateId>> = BTreeMap::new();
    for (&c, &p) in parent {
        children.entry(p).or_default().push(c);
    }
    for kids in children.values_mut() {
        kids.sort();
    }
    // Breadth-first edge order: every edge appears after its parent's
    // inbound edge.
    let mut order: Vec<(SurrogateId, SurrogateId)> = Vec::new();
    let mut queue = vec![flow];
    let mut qi = 0;
    while qi < queue.len() {
        let n = queue[qi];
        qi += 1;
        for &c in children.get(&n).into_iter().flatten() {
            order.push((n, c));
            queue.push(c);
        }
    }
    // Largest accept anywhere in the subtree each edge feeds.
    let mut subtree_cap: BTreeMap<SurrogateId, Kbps> = BTreeMap::new();
    for &(_, c) in order.iter().rev() {
        let own = topo.accept_rate(c, flow).unwrap_or(0);
        let below = children
            .get(&c)
            .into_iter()
            .flatten()
            .map(|k| subtree_cap[k])
            .max()
            .unwrap_or(0);
        subtree_cap.insert(c, own.max(below));
    }

    let mut rates: Vec<Kbps> = vec![0; order.len()];
    enumerate_rates_rec(
        topo, transcode, ladder, bounds, flow, source_rate, parent, links, &order,
        &subtree_cap, &mut rates, 0, out,
    );
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rates_rec(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    ladder: &RateLadder,
    bounds: &DelayBounds,
    flow: SurrogateId,
    source_rate: Kbps,
    parent: &BTreeMap<SurrogateId, SurrogateId>,
    links: &LinkIndex,
    order: &[(SurrogateId, SurrogateId)],
    subtree_cap: &BTreeMap<SurrogateId, Kbps>,
    rates: &mut Vec<Kbps>,
    depth: usize,
    out: &mut Vec<Candidate>,
) {
    if depth == order.len() {
        finish_candidate(
            topo, transcode, bounds, flow, parent, links, order, rates, out,
        );
        return;
    }
    let (from, to) = order[depth];
    let supply = if from == flow {
        source_rate
    } else {
        // `from`'s inbound edge precedes this one in breadth-first order.
        let idx = order
            .iter()
            .position(|&(_, c)| c == from)
            .expect("parent edge enumerated first");
        rates[idx]
    };
    let cap = ladder_ceil(ladder, subtree_cap[&to]).min(supply);
    for &step in ladder.steps() {
        if step > cap {
            break;
        }
        rates[depth] = step;
        enumerate_rates_rec(
            topo, transcode, ladder, bounds, flow, source_rate, parent, links, order,
            subtree_cap, rates, depth + 1, out,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_candidate(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    bounds: &DelayBounds,
    flow: SurrogateId,
    parent: &BTreeMap<SurrogateId, SurrogateId>,
    links: &LinkIndex,
    order: &[(SurrogateId, SurrogateId)],
    rates: &[Kbps],
    out: &mut Vec<Candidate>,
) {
    let mut tree = SolutionTree::default();
    tree.parent = parent.clone();
    for (&edge, &rate) in order.iter().zip(rates) {
        tree.edge_rate_kbps.insert(edge, rate);
    }
    let mut loads = vec![0; links.capacity.len()];
    for (&(u, v), &rate) in order.iter().zip(rates) {
        loads[links.ids[&(u, v)]] += rate;
    }
    let mut total = 0.0;
    for (&n, _) in parent {
        let delay = delivery_delay_ms(topo, transcode, flow, &tree, n)
            .expect("enumerated tree is well-formed");
        if delay > bounds.get(flow, n) {
            return;
        }
        let inbound = tree.edge_rate_kbps[&(parent[&n], n)];
        let accept = topo.accept_rate(n, flow).expect("checked by caller");
        total += utility(inbound.min(accept), accept).expect("accept is nonzero");
    }
    out.push(Candidate {
        tree,
        loads,
        utility: total,
    });
}

/// Finds the utility-maximizing joint allocation by exhaustive search.
///
/// Deterministic: candidate enumeration order is fixed, candidates are
/// stably sorted by descending utility, and ties keep the first assignment
/// found.
pub fn solve_exact(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    ladder: &RateLadder,
    bounds: &DelayBounds,
    members: &BTreeSet<SurrogateId>,
) -> Result<ExactSolution, OracleError> {
    if members.len() > MAX_EXACT_MEMBERS {
        return Err(OracleError::TooLarge {
            members: members.len(),
            limit: MAX_EXACT_MEMBERS,
        });
    }
    let links = LinkIndex::new(topo);
    let flows: Vec<SurrogateId> = members.iter().copied().collect();
    let mut per_flow: Vec<Vec<Candidate>> = Vec::new();
    for &flow in &flows {
        let mut candidates =
            enumerate_flow(topo, transcode, ladder, bounds, members, flow, &links)?;
        if candidates.is_empty() {
            return Err(OracleError::NoFeasibleCandidate { flow });
        }
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.sort_by(|&a, &b| {
            candidates[b]
                .utility
                .partial_cmp(&candidates[a].utility)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut sorted = Vec::with_capacity(candidates.len());
        for i in idx {
            sorted.push(std::mem::replace(
                &mut candidates[i],
                Candidate {
                    tree: SolutionTree::default(),
                    loads: Vec::new(),
                    utility: 0.0,
                },
            ));
        }
        per_flow.push(sorted);
    }

    // Upper bound on the utility still achievable from flow `i` onward.
    let mut suffix_best = vec![0.0; flows.len() + 1];
    for i in (0..flows.len()).rev() {
        suffix_best[i] = suffix_best[i + 1] + per_flow[i][0].utility;
    }

    struct Search<'a> {
        per_flow: &'a [Vec<Candidate>],
        suffix_best: &'a [f64],
        capacity: &'a [Kbps],
        best: f64,
        best_pick: Vec<usize>,
        nodes: u64,
    }
    fn dfs(s: &mut Search, depth: usize, loads: &mut [Kbps], total: f64, pick: &mut Vec<usize>) {
        s.nodes += 1;
        if depth == s.per_flow.len() {
            if total > s.best {
                s.best = total;
                s.best_pick = pick.clone();
            }
            return;
        }
        for (i, cand) in s.per_flow[depth].iter().enumerate() {
            // Candidates are utility-sorted: once even this one cannot beat
            // the incumbent, none below it can either.
            if total + cand.utility + s.suffix_best[depth + 1] <= s.best + GAP_EPSILON {
                return;
            }
            if cand
                .loads
                .iter()
                .zip(loads.iter())
                .zip(s.capacity.iter())
                .any(|((&add, &cur), &cap)| cur + add > cap)
            {
                continue;
            }
            for (l, &add) in loads.iter_mut().zip(&cand.loads) {
                *l += add;
            }
            pick.push(i);
            dfs(s, depth + 1, loads, total + cand.utility, pick);
            pick.pop();
            for (l, &add) in loads.iter_mut().zip(&cand.loads) {
                *l -= add;
            }
        }
    }

    let mut search = Search {
        per_flow: &per_flow,
        suffix_best: &suffix_best,
        capacity: &links.capacity,
        best: f64::NEG_INFINITY,
        best_pick: Vec::new(),
        nodes: 0,
    };
    let mut loads = vec![0; links.capacity.len()];
    let mut pick = Vec::new();
    dfs(&mut search, 0, &mut loads, 0.0, &mut pick);
    if search.best_pick.len() != flows.len() {
        return Err(OracleError::NoJointSolution);
    }

    let mut solution = RateSolution::default();
    let mut objective = 0.0;
    for ((&flow, cands), &i) in flows.iter().zip(&per_flow).zip(&search.best_pick) {
        let cand = &cands[i];
        objective += cand.utility;
        for (&(_, n), &rate) in &cand.tree.edge_rate_kbps {
            let accept = topo.accept_rate(n, flow).expect("checked in enumeration");
            solution.end_rate_kbps.insert((flow, n), rate.min(accept));
        }
        solution.trees.insert(flow, cand.tree.clone());
    }
    let candidates_per_flow = flows
        .iter()
        .zip(&per_flow)
        .map(|(&f, c)| (f, c.len()))
        .collect();
    Ok(ExactSolution {
        solution,
        objective,
        candidates_per_flow,
        search_nodes: search.nodes,
    })
}

/// Side-by-side score of the adaptive engine against the exhaustive optimum
/// on one instance.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub exact_objective: f64,
    pub engine_objective: f64,
    /// `exact - engine`, with differences within [`GAP_EPSILON`] snapped to
    /// zero. Always nonnegative unless the engine solver has a bug.
    pub gap: f64,
    pub engine_quiescent: bool,
    pub exact: RateSolution,
    pub engine: RateSolution,
}

impl GapReport {
    pub fn matched(&self) -> bool {
        self.gap == 0.0
    }
}

/// Runs the adaptive engine to quiescence and the exhaustive solver on the
/// same instance and reports the optimality gap. The engine solution is
/// validated against all constraints first; a violation is an error, not a
/// score.
pub fn heuristic_gap(
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    ladder: &RateLadder,
    bounds: &DelayBounds,
    members: &BTreeSet<SurrogateId>,
    seed: u64,
) -> Result<GapReport, OracleError> {
    let (state, _) = RoutingState::bootstrap(
        topo.clone(),
        transcode.clone(),
        ladder.clone(),
        bounds.clone(),
        members,
    )?;
    let mut evolution = Evolution::new(state, seed);
    let run = evolution.run_to_quiescence(50);
    let engine = evolution.state.to_solution();
    let report = validate_solution(topo, transcode, bounds, &engine)
        .map_err(|e| OracleError::HeuristicInvalid(e.to_string()))?;
    if !report.is_valid() {
        return Err(OracleError::HeuristicInvalid(report.to_string()));
    }
    let engine_objective = engine.objective(topo).unwrap_or(f64::NEG_INFINITY);

    let exact = solve_exact(topo, transcode, ladder, bounds, members)?;
    let mut gap = exact.objective - engine_objective;
    if gap.abs() <= GAP_EPSILON {
        gap = 0.0;
    }
    Ok(GapReport {
        exact_objective: exact.objective,
        engine_objective,
        gap,
        engine_quiescent: run.quiescent,
        exact: exact.solution,
        engine,
    })
}
