//! The per-flow dissemination tree: a rooted arborescence over surrogates
//! with a media rate on every edge.

use std::collections::BTreeMap;

use crate::model::{Kbps, SolutionTree, SurrogateId};

/// One flow's relay structure. The source surrogate is the root; every other
/// member points at the surrogate feeding it. Edge rates are the multicast
/// rates actually carried on each feed and can only shrink toward the leaves
/// (relays down-sample, never invent bits).
#[derive(Debug, Clone, PartialEq)]
pub struct DisseminationTree {
    flow: SurrogateId,
    parent: BTreeMap<SurrogateId, SurrogateId>,
    edge_rate: BTreeMap<(SurrogateId, SurrogateId), Kbps>,
}

impl DisseminationTree {
    /// A tree containing only its root.
    pub fn new(flow: SurrogateId) -> Self {
        DisseminationTree {
            flow,
            parent: BTreeMap::new(),
            edge_rate: BTreeMap::new(),
        }
    }

    pub fn flow(&self) -> SurrogateId {
        self.flow
    }

    pub fn contains(&self, n: SurrogateId) -> bool {
        n == self.flow || self.parent.contains_key(&n)
    }

    /// Members in id order, root included.
    pub fn members(&self) -> Vec<SurrogateId> {
        let mut m: Vec<SurrogateId> = self.parent.keys().copied().collect();
        m.push(self.flow);
        m.sort_unstable();
        m
    }

    pub fn len(&self) -> usize {
        self.parent.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false // a tree always has its root
    }

    pub fn parent(&self, n: SurrogateId) -> Option<SurrogateId> {
        self.parent.get(&n).copied()
    }

    /// Direct children of `n`, in id order.
    pub fn children(&self, n: SurrogateId) -> Vec<SurrogateId> {
        self.parent
            .iter()
            .filter(|(_, &p)| p == n)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Whether `n` relays to at least one other member.
    pub fn is_relay(&self, n: SurrogateId) -> bool {
        self.parent.values().any(|&p| p == n)
    }

    /// All members strictly below `n`, in breadth-first id order.
    pub fn descendants(&self, n: SurrogateId) -> Vec<SurrogateId> {
        let mut out = Vec::new();
        let mut frontier = self.children(n);
        while let Some(c) = frontier.pop() {
            out.push(c);
            frontier.extend(self.children(c));
        }
        out.sort_unstable();
        out
    }

    /// True if `candidate` is `n` itself or sits somewhere below `n`.
    pub fn in_subtree(&self, n: SurrogateId, candidate: SurrogateId) -> bool {
        if candidate == n {
            return true;
        }
        let mut cur = candidate;
        while let Some(p) = self.parent(cur) {
            if p == n {
                return true;
            }
            cur = p;
        }
        false
    }

    /// Rate of the edge feeding `n`; for the root this is `None` (the source
    /// captures natively rather than being fed).
    pub fn rate_into(&self, n: SurrogateId) -> Option<Kbps> {
        let p = self.parent(n)?;
        self.edge_rate.get(&(p, n)).copied()
    }

    pub fn edge_rate(&self, from: SurrogateId, to: SurrogateId) -> Option<Kbps> {
        self.edge_rate.get(&(from, to)).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = ((SurrogateId, SurrogateId), Kbps)> + '_ {
        self.edge_rate.iter().map(|(k, v)| (*k, *v))
    }

    /// Tree edges from the root down to `n`. `None` when `n` is detached
    /// from the root (which [`Self::attach`] makes unrepresentable, but
    /// hypothetical editing could produce).
    pub fn path_to(&self, n: SurrogateId) -> Option<Vec<(SurrogateId, SurrogateId)>> {
        let mut path = Vec::new();
        let mut cur = n;
        let mut hops = 0usize;
        while cur != self.flow {
            let p = self.parent(cur)?;
            path.push((p, cur));
            cur = p;
            hops += 1;
            if hops > self.parent.len() {
                return None;
            }
        }
        path.reverse();
        Some(path)
    }

    /// Attaches `n` under `parent` at `rate`. `parent` must already be a
    /// member and `n` must not be.
    pub fn attach(&mut self, n: SurrogateId, parent: SurrogateId, rate: Kbps) {
        debug_assert!(self.contains(parent), "parent {parent} not in tree");
        debug_assert!(!self.contains(n), "{n} already attached");
        self.parent.insert(n, parent);
        self.edge_rate.insert((parent, n), rate);
    }

    /// Rewires `n` from its current parent to `new_parent` at `rate`,
    /// keeping `n`'s own subtree intact. Returns the abandoned edge.
    ///
    /// The caller is responsible for ensuring `new_parent` is not inside
    /// `n`'s subtree; this method only debug-asserts it, since the planning
    /// layer must have rejected such proposals already.
    pub fn reparent(
        &mut self,
        n: SurrogateId,
        new_parent: SurrogateId,
        rate: Kbps,
    ) -> (SurrogateId, SurrogateId) {
        debug_assert!(
            !self.in_subtree(n, new_parent),
            "reparenting {n} under its own descendant {new_parent}"
        );
        let old_parent = self.parent.insert(n, new_parent).expect("n was attached");
        self.edge_rate.remove(&(old_parent, n));
        self.edge_rate.insert((new_parent, n), rate);
        (old_parent, n)
    }

    /// Changes the rate of an existing edge.
    pub fn set_edge_rate(&mut self, from: SurrogateId, to: SurrogateId, rate: Kbps) {
        debug_assert!(self.edge_rate.contains_key(&(from, to)));
        self.edge_rate.insert((from, to), rate);
    }

    /// Detaches leaf `n`. Panics in debug builds if `n` still relays.
    pub fn detach_leaf(&mut self, n: SurrogateId) {
        debug_assert!(!self.is_relay(n), "{n} still has children");
        if let Some(p) = self.parent.remove(&n) {
            self.edge_rate.remove(&(p, n));
        }
    }

    /// Structural soundness: every member reaches the root without cycles
    /// and every edge has a rate. Used by tests and debug assertions after
    /// every mutation.
    pub fn is_well_formed(&self) -> bool {
        self.parent.keys().all(|&n| self.path_to(n).is_some())
            && self
                .parent
                .iter()
                .all(|(&n, &p)| self.edge_rate.contains_key(&(p, n)))
            && self.edge_rate.len() == self.parent.len()
    }

    /// Converts to the validation-layer representation.
    pub fn to_solution_tree(&self) -> SolutionTree {
        SolutionTree {
            parent: self.parent.clone(),
            edge_rate_kbps: self.edge_rate.clone(),
        }
    }
}
