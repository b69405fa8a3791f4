//! Shared instance builders for the criterion benches.

use std::collections::BTreeSet;

use rand::Rng;
use relay_mesh::model::{DelayBounds, LastMile, LinkProps, SurrogateId, TopologySnapshot};

/// Random dense conference topology: `n` surrogates, all pairs linked, with
/// latencies in 5..60 ms and capacities in 512..2048 kbps. Every receiver
/// accepts every flow at 256 kbps so instances are always solvable.
pub fn random_topology(n: u32, rng: &mut impl Rng) -> (TopologySnapshot, DelayBounds) {
    let mut topo = TopologySnapshot::new();
    for i in 0..n {
        let mut lm = LastMile::symmetric(40.0, 1049);
        for f in 0..n {
            if f != i {
                lm.accept_kbps.insert(SurrogateId(f), 256);
            }
        }
        topo.add_surrogate(SurrogateId(i), lm).unwrap();
    }
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            topo.add_link(
                SurrogateId(u),
                SurrogateId(v),
                LinkProps {
                    capacity_kbps: rng.gen_range(512..2048),
                    latency_ms: rng.gen_range(5.0..60.0),
                },
            )
            .unwrap();
        }
    }
    let bounds = DelayBounds::uniform(&topo, 400.0);
    (topo, bounds)
}

/// All surrogate ids of a topology as a member set.
pub fn all_members(topo: &TopologySnapshot) -> BTreeSet<SurrogateId> {
    topo.surrogates().collect()
}
