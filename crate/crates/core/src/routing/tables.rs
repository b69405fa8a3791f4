//! Per-surrogate gossip state.
//!
//! Each surrogate keeps, per flow: the set of members it currently feeds
//! (`dstab`), the candidate upstream feeders it has heard about (`custab`),
//! the highest rate it would currently ask for (`alpha`), and the latest
//! delivery deadline it could tolerate without breaking anyone downstream
//! (`beta`). Surrogates carrying a flow periodically broadcast a
//! [`PathBroadcast`] to their link neighbours; receivers admit the sender
//! into `custab` only when the estimated delivery delay through that sender
//! would still meet `beta`. The admission estimate is computed from *maximum
//! requested* rates on both sides, and transcode cost is monotone in both
//! rates, so an admitted path can never turn out slower than estimated once
//! real (lower) rates flow across it.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Kbps, SurrogateId, TopologySnapshot, TranscodeModel};

/// Advertisement a surrogate carrying a flow sends to its link neighbours:
/// "I relay this flow at `rate_kbps`, I could request up to `max_rate_kbps`,
/// and media reaches me `path_latency_ms` after capture."
#[derive(Debug, Clone, PartialEq)]
pub struct PathBroadcast {
    pub flow: SurrogateId,
    pub sender: SurrogateId,
    /// Rate currently carried on the sender's inbound edge (or the capture
    /// rate when the sender is the flow's source).
    pub rate_kbps: Kbps,
    /// The sender's requested-rate ceiling; upper-bounds what a new child
    /// could ever draw through it.
    pub max_rate_kbps: Kbps,
    /// Delay from capture to the sender, links plus transcodes.
    pub path_latency_ms: f64,
    /// Advertised VM flavor of the sender, carried for placement decisions;
    /// opaque to routing.
    pub vm_profile: String,
}

/// An admitted candidate upstream for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct CustabEntry {
    pub via: SurrogateId,
    pub rate_kbps: Kbps,
    pub max_rate_kbps: Kbps,
    pub path_latency_ms: f64,
    /// Worst-case delay to the table owner if it re-homed through `via`:
    /// sender path latency + link latency + transcode estimated at maximum
    /// requested rates.
    pub estimate_ms: f64,
    /// Admission time, for staleness pruning.
    pub admitted_at_ms: f64,
}

/// Result of offering a [`PathBroadcast`] to [`admit_path_broadcast`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdmitOutcome {
    /// Entry stored (replacing any previous entry from the same sender).
    Admitted { estimate_ms: f64 },
    /// The estimated delay cannot meet the owner's residual deadline.
    RejectedDeadline { estimate_ms: f64, beta_ms: f64 },
    /// A surrogate never relays its own flow back to itself.
    RejectedOwnFlow,
    /// No link from the sender to the owner exists.
    RejectedNoLink,
}

/// Gossip tables owned by one surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerTables {
    pub owner: SurrogateId,
    /// Per flow: admitted candidate upstream feeders, ordered by sender id.
    pub custab: BTreeMap<SurrogateId, Vec<CustabEntry>>,
    /// Per flow: members this surrogate currently feeds.
    pub dstab: BTreeMap<SurrogateId, BTreeSet<SurrogateId>>,
    /// Per flow: this surrogate's requested-rate ceiling.
    pub alpha: BTreeMap<SurrogateId, Kbps>,
    /// Per flow: latest tolerable delivery delay to this surrogate.
    pub beta: BTreeMap<SurrogateId, f64>,
}

impl PeerTables {
    pub fn new(owner: SurrogateId) -> Self {
        PeerTables {
            owner,
            custab: BTreeMap::new(),
            dstab: BTreeMap::new(),
            alpha: BTreeMap::new(),
            beta: BTreeMap::new(),
        }
    }

    pub fn candidates(&self, flow: SurrogateId) -> &[CustabEntry] {
        self.custab.get(&flow).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Drops entries admitted before `now_ms - max_age_ms`; gossip refreshes
    /// live candidates well within that horizon.
    pub fn prune_stale(&mut self, now_ms: f64, max_age_ms: f64) {
        for entries in self.custab.values_mut() {
            entries.retain(|e| now_ms - e.admitted_at_ms <= max_age_ms);
        }
        self.custab.retain(|_, v| !v.is_empty());
    }

    /// Forgets everything about a flow (e.g. its source left).
    pub fn forget_flow(&mut self, flow: SurrogateId) {
        self.custab.remove(&flow);
        self.dstab.remove(&flow);
        self.alpha.remove(&flow);
        self.beta.remove(&flow);
    }
}

/// One step of the requested-rate recursion at a surrogate: ask for enough
/// to cover the device's own appetite and the largest child request, but
/// never more than the upstream link could yield.
///
/// Leaves pass an empty `child_requests`. The recursion runs bottom-up, so a
/// parent's ceiling already accounts for everything below it.
pub fn requested_rate(
    accept_kbps: Kbps,
    child_requests: &[Kbps],
    upstream_headroom_kbps: Kbps,
) -> Kbps {
    let max_child = child_requests.iter().copied().max().unwrap_or(0);
    accept_kbps.max(max_child).min(upstream_headroom_kbps)
}

/// One step of the residual-deadline recursion: the latest a surrogate may
/// receive a flow without violating its own deadline or starving any child
/// of the time *it* still needs downstream (link latency plus the transcode
/// this surrogate performs toward that child).
///
/// Leaves pass an empty `child_slack`; each child's term is
/// `child_beta - link_latency - transcode_latency`.
pub fn residual_deadline(own_bound_ms: f64, child_slack_ms: &[f64]) -> f64 {
    child_slack_ms
        .iter()
        .copied()
        .fold(own_bound_ms, f64::min)
}

/// Admission control for one received [`PathBroadcast`].
///
/// The estimate charges the sender's advertised path latency, the link from
/// sender to owner, and a transcode at the sender computed from the two
/// *maximum requested* rates (`msg.max_rate_kbps` down to the owner's
/// `alpha`). Realized rates are never higher than requested ones, so this
/// estimate upper-bounds the delay the path would actually exhibit.
pub fn admit_path_broadcast(
    tables: &mut PeerTables,
    topo: &TopologySnapshot,
    transcode: &TranscodeModel,
    msg: &PathBroadcast,
    now_ms: f64,
) -> AdmitOutcome {
    if msg.flow == tables.owner {
        return AdmitOutcome::RejectedOwnFlow;
    }
    let link = match topo.link(msg.sender, tables.owner) {
        Some(l) => l,
        None => return AdmitOutcome::RejectedNoLink,
    };
    // Without a synced alpha yet, fall back to the device's appetite: that
    // is what the owner would request through a fresh parent.
    let own_alpha = tables
        .alpha
        .get(&msg.flow)
        .copied()
        .or_else(|| topo.accept_rate(tables.owner, msg.flow))
        .unwrap_or(0);
    let estimate_ms = msg.path_latency_ms
        + link.latency_ms
        + transcode.latency(msg.sender, msg.max_rate_kbps, own_alpha);
    let beta_ms = tables
        .beta
        .get(&msg.flow)
        .copied()
        .unwrap_or(f64::INFINITY);
    if estimate_ms > beta_ms {
        return AdmitOutcome::RejectedDeadline { estimate_ms, beta_ms };
    }
    let entry = CustabEntry {
        via: msg.sender,
        rate_kbps: msg.rate_kbps,
        max_rate_kbps: msg.max_rate_kbps,
        path_latency_ms: msg.path_latency_ms,
        estimate_ms,
        admitted_at_ms: now_ms,
    };
    let entries = tables.custab.entry(msg.flow).or_default();
    match entries.iter_mut().find(|e| e.via == msg.sender) {
        Some(existing) => *existing = entry,
        None => {
            entries.push(entry);
            entries.sort_by_key(|e| e.via);
        }
    }
    AdmitOutcome::Admitted { estimate_ms }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LastMile, LinkProps};

    fn id(n: u32) -> SurrogateId {
        SurrogateId(n)
    }

    fn topo_pair() -> TopologySnapshot {
        let mut topo = TopologySnapshot::new();
        for n in 0..3 {
            let mut lm = LastMile::symmetric(50.0, 1049);
            for f in 0..3 {
                if f != n {
                    lm.accept_kbps.insert(id(f), 256);
                }
            }
            topo.add_surrogate(id(n), lm).unwrap();
        }
        topo.add_link(
            id(1),
            id(0),
            LinkProps {
                capacity_kbps: 1024,
                latency_ms: 50.0,
            },
        )
        .unwrap();
        topo
    }

    #[test]
    fn requested_rate_leaf_is_capped_by_headroom() {
        assert_eq!(requested_rate(768, &[], 512), 512);
        assert_eq!(requested_rate(768, &[], 1024), 768);
    }

    #[test]
    fn requested_rate_relay_covers_largest_child() {
        assert_eq!(requested_rate(256, &[768, 128], 1024), 768);
        assert_eq!(requested_rate(256, &[768, 128], 600), 600);
    }

    #[test]
    fn residual_deadline_tracks_tightest_child() {
        // One child with beta 300 behind a 50 ms link and free transcode.
        assert_eq!(residual_deadline(400.0, &[300.0 - 50.0 - 0.0]), 250.0);
        assert_eq!(residual_deadline(200.0, &[250.0]), 200.0);
        assert_eq!(residual_deadline(400.0, &[]), 400.0);
    }

    #[test]
    fn broadcast_within_deadline_is_admitted() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(0));
        tables.beta.insert(id(2), 200.0);
        tables.alpha.insert(id(2), 256);
        let msg = PathBroadcast {
            flow: id(2),
            sender: id(1),
            rate_kbps: 256,
            max_rate_kbps: 256,
            path_latency_ms: 100.0,
            vm_profile: String::new(),
        };
        let out = admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0);
        assert_eq!(out, AdmitOutcome::Admitted { estimate_ms: 150.0 });
        assert_eq!(tables.candidates(id(2)).len(), 1);
        assert_eq!(tables.candidates(id(2))[0].via, id(1));
    }

    #[test]
    fn broadcast_past_deadline_is_rejected() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(0));
        tables.beta.insert(id(2), 200.0);
        let msg = PathBroadcast {
            flow: id(2),
            sender: id(1),
            rate_kbps: 256,
            max_rate_kbps: 256,
            path_latency_ms: 180.0,
            vm_profile: String::new(),
        };
        let out = admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0);
        assert_eq!(
            out,
            AdmitOutcome::RejectedDeadline {
                estimate_ms: 230.0,
                beta_ms: 200.0
            }
        );
        assert!(tables.candidates(id(2)).is_empty());
    }

    #[test]
    fn negative_deadline_rejects_everything() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(0));
        tables.beta.insert(id(2), -5.0);
        let msg = PathBroadcast {
            flow: id(2),
            sender: id(1),
            rate_kbps: 128,
            max_rate_kbps: 128,
            path_latency_ms: 0.0,
            vm_profile: String::new(),
        };
        assert!(matches!(
            admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0),
            AdmitOutcome::RejectedDeadline { .. }
        ));
    }

    #[test]
    fn own_flow_is_never_admitted() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(0));
        let msg = PathBroadcast {
            flow: id(0),
            sender: id(1),
            rate_kbps: 1049,
            max_rate_kbps: 1049,
            path_latency_ms: 0.0,
            vm_profile: String::new(),
        };
        assert_eq!(
            admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0),
            AdmitOutcome::RejectedOwnFlow
        );
    }

    #[test]
    fn admission_estimate_includes_transcode_at_requested_rates() {
        let topo = topo_pair();
        let transcode = TranscodeModel::new(50.0, 0.02, 0.05).unwrap();
        let mut tables = PeerTables::new(id(0));
        tables.beta.insert(id(2), 250.0);
        tables.alpha.insert(id(2), 256);
        let msg = PathBroadcast {
            flow: id(2),
            sender: id(1),
            rate_kbps: 768,
            max_rate_kbps: 768,
            path_latency_ms: 100.0,
            vm_profile: String::new(),
        };
        // 100 + 50 + (50 + 0.02*768 + 0.05*256) = 228.16
        let out = admit_path_broadcast(&mut tables, &topo, &transcode, &msg, 0.0);
        match out {
            AdmitOutcome::Admitted { estimate_ms } => {
                assert!((estimate_ms - 228.16).abs() < 1e-9, "got {estimate_ms}")
            }
            other => panic!("expected admission, got {other:?}"),
        }
    }

    #[test]
    fn same_sender_replaces_its_previous_entry() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(0));
        let mut msg = PathBroadcast {
            flow: id(2),
            sender: id(1),
            rate_kbps: 256,
            max_rate_kbps: 256,
            path_latency_ms: 100.0,
            vm_profile: String::new(),
        };
        admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0);
        msg.path_latency_ms = 80.0;
        admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 5.0);
        let entries = tables.candidates(id(2));
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].path_latency_ms, 80.0);
        assert_eq!(entries[0].admitted_at_ms, 5.0);
    }

    #[test]
    fn stale_entries_are_pruned() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(0));
        let msg = PathBroadcast {
            flow: id(2),
            sender: id(1),
            rate_kbps: 256,
            max_rate_kbps: 256,
            path_latency_ms: 100.0,
            vm_profile: String::new(),
        };
        admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0);
        tables.prune_stale(10_000.0, 5_000.0);
        assert!(tables.candidates(id(2)).is_empty());
    }

    #[test]
    fn missing_link_is_rejected() {
        let topo = topo_pair();
        let mut tables = PeerTables::new(id(2)); // no link 1 -> 2 in fixture
        let msg = PathBroadcast {
            flow: id(0),
            sender: id(1),
            rate_kbps: 256,
            max_rate_kbps: 256,
            path_latency_ms: 0.0,
            vm_profile: String::new(),
        };
        assert_eq!(
            admit_path_broadcast(&mut tables, &topo, &TranscodeModel::free(), &msg, 0.0),
            AdmitOutcome::RejectedNoLink
        );
    }
}
