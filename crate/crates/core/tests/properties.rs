//! Randomized cross-module properties that underpin the acceptance
//! criteria: switch-admission estimates are conservative, fragmentation is
//! consistent across the whole rate ladder, and clock recovery error is
//! bounded by path asymmetry.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use relay_mesh::model::{
    DelayBounds, Kbps, LastMile, LinkProps, RateLadder, SurrogateId, TopologySnapshot,
    TranscodeModel, DEFAULT_RATE_LADDER_KBPS,
};
use relay_mesh::routing::{
    admit_path_broadcast, sync_flow_tables, PathBroadcast, PeerTables, ProposalKind,
    RoutingState,
};
use relay_mesh::session::CalibratedClock;
use relay_mesh::wire::{
    fragments_per_frame, nominal_frame_bytes, FrameAssembler, Packetizer,
};

fn id(n: u32) -> SurrogateId {
    SurrogateId(n)
}

fn random_conference(rng: &mut ChaCha12Rng) -> (TopologySnapshot, DelayBounds) {
    const ACCEPTS: [Kbps; 4] = [128, 256, 512, 768];
    const CAPS: [Kbps; 5] = [256, 512, 768, 1024, 2048];
    let n = rng.gen_range(3..=6);
    let mut topo = TopologySnapshot::new();
    for u in 0..n {
        let mut lm = LastMile::symmetric(50.0, 1049);
        for f in 0..n {
            if f != u {
                lm.accept_kbps
                    .insert(id(f), ACCEPTS[rng.gen_range(0..ACCEPTS.len())]);
            }
        }
        topo.add_surrogate(id(u), lm).unwrap();
    }
    for u in 0..n {
        for v in (u + 1)..n {
            let latency = rng.gen_range(5.0..60.0);
            for (a, b) in [(u, v), (v, u)] {
                topo.add_link(
                    id(a),
                    id(b),
                    LinkProps {
                        capacity_kbps: CAPS[rng.gen_range(0..CAPS.len())],
                        latency_ms: latency,
                    },
                )
                .unwrap();
            }
        }
    }
    let mut bounds = DelayBounds::new();
    for u in 0..n {
        for v in 0..n {
            if u != v {
                bounds.set(id(u), id(v), rng.gen_range(150.0..400.0));
            }
        }
    }
    (topo, bounds)
}

/// Every accepted switch must strictly improve the condition that
/// triggered it — a rate switch raises the node's inbound rate, a repair
/// lowers its delivery delay — and must leave the whole moved subtree
/// inside its deadlines. Strict improvement is what rules out oscillation;
/// the subtree check is what makes the gossip-table ranking safe even when
/// its estimates go stale.
#[test]
fn accepted_switches_strictly_improve_their_trigger() {
    let mut audited = 0usize;
    for i in 0..200u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(0x9000 + i);
        let (topo, bounds) = random_conference(&mut rng);
        let members: BTreeSet<SurrogateId> = topo.surrogates().collect();
        let (mut state, _) = RoutingState::bootstrap(
            topo,
            TranscodeModel::new(10.0, 0.01, 0.01).unwrap(),
            RateLadder::default(),
            bounds,
            &members,
        )
        .unwrap();

        let mut tables: BTreeMap<SurrogateId, PeerTables> = BTreeMap::new();
        let flows: Vec<SurrogateId> = state.flows().collect();
        for &flow in &flows {
            sync_flow_tables(&state, &mut tables, flow);
        }
        let mut schedule_rng = ChaCha12Rng::seed_from_u64(i);
        let mut now_ms = 0.0;
        for _round in 0..40 {
            let mut pairs: Vec<(SurrogateId, SurrogateId)> = Vec::new();
            for &flow in &flows {
                for n in state.tree(flow).unwrap().members() {
                    if n != flow {
                        pairs.push((n, flow));
                    }
                }
            }
            pairs.shuffle(&mut schedule_rng);
            let mut changed = false;
            for (n, flow) in pairs {
                changed |= state.settle_flow(flow).changed();
                sync_flow_tables(&state, &mut tables, flow);

                let tree = state.tree(flow).unwrap();
                let senders: Vec<SurrogateId> = state
                    .topo()
                    .upstream_of(n)
                    .filter(|&j| j != n && tree.contains(j))
                    .collect();
                let omega = state.flow_delays(flow);
                for j in senders {
                    let alpha_j = tables
                        .get(&j)
                        .and_then(|t| t.alpha.get(&flow).copied())
                        .unwrap_or_else(|| state.rate_at(flow, j));
                    let msg = PathBroadcast {
                        flow,
                        sender: j,
                        rate_kbps: state.rate_at(flow, j),
                        max_rate_kbps: alpha_j,
                        path_latency_ms: omega[&j],
                        vm_profile: String::new(),
                    };
                    let entry = tables.entry(n).or_insert_with(|| PeerTables::new(n));
                    admit_path_broadcast(entry, state.topo(), state.transcode(), &msg, now_ms);
                }

                let proposal = state
                    .evaluate_repair(&tables[&n], flow, n)
                    .or_else(|| state.evaluate_switch(&tables[&n], flow, n));
                if let Some(p) = proposal {
                    let pre_delay = state.device_ready_delay(flow, n);
                    let record = state.apply_switch(&p).expect("fresh proposal applies");
                    match record.kind {
                        ProposalKind::RateImprove => assert!(
                            record.new_rate_kbps > record.old_rate_kbps,
                            "instance {i}: rate switch of {n} on flow {flow} did not improve \
                             ({} -> {} kbps)",
                            record.old_rate_kbps,
                            record.new_rate_kbps
                        ),
                        ProposalKind::LatencyRepair => {
                            let post_delay = state.device_ready_delay(flow, n);
                            assert!(
                                post_delay < pre_delay,
                                "instance {i}: repair of {n} on flow {flow} did not reduce \
                                 delay ({pre_delay:.3} -> {post_delay:.3} ms)"
                            );
                        }
                    }
                    let tree = state.tree(flow).unwrap();
                    let mut moved = tree.descendants(n);
                    moved.push(n);
                    for sub in moved {
                        let ready = state.device_ready_delay(flow, sub);
                        let bound = state.bounds().get(flow, sub);
                        assert!(
                            ready <= bound + 1e-9,
                            "instance {i}: switch of {n} on flow {flow} left {sub} at \
                             {ready:.3} ms > {bound:.3} ms"
                        );
                    }
                    audited += 1;
                    sync_flow_tables(&state, &mut tables, flow);
                    changed = true;
                }
                now_ms += 1.0;
            }
            if !changed {
                break;
            }
        }
    }
    assert!(audited > 100, "harness produced too few switches ({audited})");
}

/// Every ladder rate at every supported frame rate fragments into the
/// count the header advertises, stays within the 64-fragment playout mask,
/// and reassembles byte-identically.
#[test]
fn fragment_counts_follow_the_rate_ladder_at_all_frame_rates() {
    for frame_rate in [15u8, 25, 30] {
        for &rate in DEFAULT_RATE_LADDER_KBPS.iter() {
            let rate = rate as u16;
            let frags = fragments_per_frame(rate, frame_rate).unwrap();
            assert!(frags >= 1 && frags <= 64, "{rate} kbps at {frame_rate} fps: {frags}");

            let frame: Vec<u8> = (0..nominal_frame_bytes(rate, frame_rate).unwrap())
                .map(|i| (i % 251) as u8)
                .collect();
            let mut packetizer = Packetizer::new(9, 2);
            let packets = packetizer.packetize(77, rate, frame_rate, &frame).unwrap();
            assert_eq!(packets.len() as u32, frags, "{rate} kbps at {frame_rate} fps");

            let mut assembler = FrameAssembler::new();
            let mut assembled = None;
            for packet in &packets {
                if let Some(done) = assembler.push(packet).unwrap() {
                    assembled = Some(done);
                }
            }
            let done = assembled.expect("complete fragment set reassembles");
            assert_eq!(done.payload, frame);
            assert_eq!(done.timestamp_ms, 77);
        }
    }
}

/// A frame's expected fragment count comes from its header fields, not
/// from how many fragments happen to arrive: an empty frame produces no
/// packets at all, and an undersized frame stays pending (to be released
/// as concealed at its deadline) rather than completing early.
#[test]
fn undersized_frames_stay_pending_rather_than_completing() {
    let mut packetizer = Packetizer::new(1, 1);
    assert!(packetizer.packetize(0, 128, 25, &[]).unwrap().is_empty());

    // 128 kbps at 25 fps advertises two fragments; a one-byte frame only
    // fills the first.
    assert_eq!(fragments_per_frame(128, 25).unwrap(), 2);
    let packets = packetizer.packetize(40, 128, 25, &[0xEE]).unwrap();
    assert_eq!(packets.len(), 1);
    let mut assembler = FrameAssembler::new();
    assert_eq!(assembler.push(&packets[0]).unwrap(), None);
    assert_eq!(assembler.pending_frames(), 1);
}

/// Offset recovery is exact under symmetric delays and degrades no worse
/// than half the up/down asymmetry of the exchange the min-RTT filter
/// selects — which is itself at most the worst asymmetry offered.
#[test]
fn clock_offset_recovery_error_is_bounded_by_path_asymmetry() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xC10C);
    for _ in 0..500 {
        let offset: f64 = rng.gen_range(-200.0..200.0);
        let symmetric: bool = rng.gen();
        let mut clock = CalibratedClock::new();
        let mut worst_asym = 0.0f64;
        let mut t1 = rng.gen_range(0.0..1000.0);
        for _ in 0..6 {
            let up: f64 = rng.gen_range(5.0..80.0);
            let down: f64 = if symmetric { up } else { rng.gen_range(5.0..80.0) };
            worst_asym = worst_asym.max((up - down).abs());
            let t2 = t1 + up + offset;
            let t3 = t2 + rng.gen_range(0.0..2.0);
            let t4 = t3 - offset + down;
            clock.observe_exchange(t1, t2, t3, t4);
            t1 = t4 + rng.gen_range(1.0..50.0);
        }
        let estimated = clock.offset_ms().expect("exchanges observed");
        let error = (estimated - offset).abs();
        if symmetric {
            assert!(error < 1e-9, "symmetric delays must recover exactly, got {error}");
        } else {
            assert!(
                error <= worst_asym / 2.0 + 1e-9,
                "error {error:.4} ms exceeds half the worst asymmetry {worst_asym:.4} ms"
            );
        }
    }
}
