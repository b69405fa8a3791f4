//! Media packet format.
//!
//! Every captured frame is split into fragments small enough for a single
//! datagram, each carrying a fixed 16-byte header:
//!
//! ```text
//! offset  size  field
//!      0     4  capture timestamp, ms, big-endian (wraps ~49.7 days)
//!      4     4  flow id (the source surrogate), big-endian
//!      8     2  encoded rate, kbps, big-endian
//!     10     1  frame rate, frames/s
//!     11     1  packet sequence number (per flow, wraps at 256)
//!     12     1  codec id
//!     13     3  reserved, must be zero
//! ```
//!
//! Payloads never exceed [`MAX_PAYLOAD_LEN`] bytes, so the fragment count of
//! a frame is fully determined by the rate and frame-rate fields — receivers
//! know how many fragments to expect without any extra signalling, and the
//! playout buffer can declare a frame incomplete the moment its release
//! instant passes.

use std::collections::BTreeMap;

use thiserror::Error;

/// Fixed header length, bytes.
pub const HEADER_LEN: usize = 16;

/// Largest payload a single packet may carry, bytes.
pub const MAX_PAYLOAD_LEN: usize = 512;

/// Pending partially-assembled frames kept per flow before the oldest is
/// abandoned.
const MAX_PENDING_FRAMES: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("packet of {len} bytes is shorter than the {HEADER_LEN}-byte header")]
    Truncated { len: usize },
    #[error("reserved header bytes are not zero")]
    ReservedNotZero,
    #[error("payload of {len} bytes exceeds the {MAX_PAYLOAD_LEN}-byte limit")]
    PayloadTooLarge { len: usize },
    #[error("frame rate of zero")]
    ZeroFrameRate,
    #[error("fragment disagrees with its frame's rate/frame-rate/codec fields")]
    InconsistentFragment,
}

/// Decoded packet header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediaHeader {
    pub timestamp_ms: u32,
    pub flow: u32,
    pub rate_kbps: u16,
    pub frame_rate: u8,
    pub seq: u8,
    pub codec: u8,
}

impl MediaHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.timestamp_ms.to_be_bytes());
        out[4..8].copy_from_slice(&self.flow.to_be_bytes());
        out[8..10].copy_from_slice(&self.rate_kbps.to_be_bytes());
        out[10] = self.frame_rate;
        out[11] = self.seq;
        out[12] = self.codec;
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated { len: bytes.len() });
        }
        if bytes[13..16] != [0, 0, 0] {
            return Err(WireError::ReservedNotZero);
        }
        Ok(MediaHeader {
            timestamp_ms: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
            flow: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            rate_kbps: u16::from_be_bytes(bytes[8..10].try_into().unwrap()),
            frame_rate: bytes[10],
            seq: bytes[11],
            codec: bytes[12],
        })
    }
}

/// Fragments needed for one frame at the given rate and frame rate:
/// `ceil(rate * 1000 / (frame_rate * MAX_PAYLOAD_LEN * 8))` — frame bits
/// over payload bits, rounded up. Zero-rate frames take zero fragments.
pub fn fragments_per_frame(rate_kbps: u16, frame_rate: u8) -> Result<u32, WireError> {
    if frame_rate == 0 {
        return Err(WireError::ZeroFrameRate);
    }
    let frame_bits = rate_kbps as u64 * 1000;
    let payload_bits = frame_rate as u64 * (MAX_PAYLOAD_LEN as u64 * 8);
    Ok(frame_bits.div_ceil(payload_bits) as u32)
}

/// Encoded size of one frame at the given rate and frame rate, bytes.
pub fn nominal_frame_bytes(rate_kbps: u16, frame_rate: u8) -> Result<usize, WireError> {
    if frame_rate == 0 {
        return Err(WireError::ZeroFrameRate);
    }
    // rate * 125 is bytes per second.
    Ok((rate_kbps as u64 * 125).div_ceil(frame_rate as u64) as usize)
}

/// One wire packet, ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: MediaHeader,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let header = MediaHeader::decode(bytes)?;
        let payload = bytes[HEADER_LEN..].to_vec();
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(WireError::PayloadTooLarge { len: payload.len() });
        }
        Ok(Packet { header, payload })
    }
}

/// Per-flow packetizer: splits frames into maximum-payload fragments and
/// keeps the sequence counter running across frames.
#[derive(Debug, Clone)]
pub struct Packetizer {
    flow: u32,
    codec: u8,
    next_seq: u8,
}

impl Packetizer {
    pub fn new(flow: u32, codec: u8) -> Self {
        Packetizer {
            flow,
            codec,
            next_seq: 0,
        }
    }

    pub fn next_seq(&self) -> u8 {
        self.next_seq
    }

    /// Splits one encoded frame into wire packets. The fragment count
    /// equals [`fragments_per_frame`] whenever the frame has its nominal
    /// encoded size.
    pub fn packetize(
        &mut self,
        timestamp_ms: u32,
        rate_kbps: u16,
        frame_rate: u8,
        frame: &[u8],
    ) -> Result<Vec<Packet>, WireError> {
        if frame_rate == 0 {
            return Err(WireError::ZeroFrameRate);
        }
        let mut packets = Vec::with_capacity(frame.len().div_ceil(MAX_PAYLOAD_LEN));
        for chunk in frame.chunks(MAX_PAYLOAD_LEN) {
            packets.push(Packet {
                header: MediaHeader {
                    timestamp_ms,
                    flow: self.flow,
                    rate_kbps,
                    frame_rate,
                    seq: self.next_seq,
                    codec: self.codec,
                },
                payload: chunk.to_vec(),
            });
            self.next_seq = self.next_seq.wrapping_add(1);
        }
        Ok(packets)
    }
}

/// A frame put back together from its fragments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledFrame {
    pub timestamp_ms: u32,
    pub flow: u32,
    pub rate_kbps: u16,
    pub frame_rate: u8,
    pub codec: u8,
    pub payload: Vec<u8>,
}

struct PendingFrame {
    rate_kbps: u16,
    frame_rate: u8,
    codec: u8,
    expected: u32,
    fragments: BTreeMap<u8, Vec<u8>>,
}

/// Reassembles frames from fragments arriving in any order.
///
/// Fragments group by capture timestamp; the expected count comes from the
/// header's rate and frame-rate fields. Fragment order within a frame is
/// recovered from the sequence numbers, which form a consecutive run modulo
/// 256 (frames are far smaller than the sequence space, so the run start is
/// the one member whose predecessor is absent).
#[derive(Default)]
pub struct FrameAssembler {
    pending: BTreeMap<u32, PendingFrame>,
}

impl FrameAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending_frames(&self) -> usize {
        self.pending.len()
    }

    /// Feeds one packet; returns the completed frame when this was its last
    /// missing fragment.
    pub fn push(&mut self, packet: &Packet) -> Result<Option<AssembledFrame>, WireError> {
        if packet.payload.len() > MAX_PAYLOAD_LEN {
            return Err(WireError::PayloadTooLarge {
                len: packet.payload.len(),
            });
        }
        let h = packet.header;
        let expected = fragments_per_frame(h.rate_kbps, h.frame_rate)?;
        let slot = self.pending.entry(h.timestamp_ms).or_insert(PendingFrame {
            rate_kbps: h.rate_kbps,
            frame_rate: h.frame_rate,
            codec: h.codec,
            expected,
            fragments: BTreeMap::new(),
        });
        if (slot.rate_kbps, slot.frame_rate, slot.codec) != (h.rate_kbps, h.frame_rate, h.codec) {
            return Err(WireError::InconsistentFragment);
        }
        slot.fragments.insert(h.seq, packet.payload.clone());
        if (slot.fragments.len() as u32) < slot.expected {
            if self.pending.len() > MAX_PENDING_FRAMES {
                let oldest = *self.pending.keys().next().unwrap();
                self.pending.remove(&oldest);
            }
            return Ok(None);
        }
        let slot = self.pending.remove(&h.timestamp_ms).unwrap();
        // Start of the modular run: the fragment with no predecessor.
        let start = slot
            .fragments
            .keys()
            .copied()
            .find(|s| !slot.fragments.contains_key(&s.wrapping_sub(1)))
            // All 256 present (impossible for real frames) — any start works.
            .unwrap_or_else(|| *slot.fragments.keys().next().unwrap());
        let mut payload = Vec::new();
        let mut seq = start;
        for _ in 0..slot.fragments.len() {
            payload.extend_from_slice(&slot.fragments[&seq]);
            seq = seq.wrapping_add(1);
        }
        Ok(Some(AssembledFrame {
            timestamp_ms: h.timestamp_ms,
            flow: h.flow,
            rate_kbps: slot.rate_kbps,
            frame_rate: slot.frame_rate,
            codec: slot.codec,
            payload,
        }))
    }
}

/// Widens a wrapped 32-bit millisecond timestamp to 64 bits by picking the
/// representative closest to `reference_ms` (e.g. the receiver's estimate of
/// the sender clock).
pub fn extend_timestamp(timestamp_ms: u32, reference_ms: u64) -> u64 {
    const SPAN: u64 = 1 << 32;
    let base = reference_ms & !(SPAN - 1);
    let mut best = base.wrapping_add(timestamp_ms as u64);
    let mut best_dist = best.abs_diff(reference_ms);
    for candidate in [
        base.wrapping_sub(SPAN).wrapping_add(timestamp_ms as u64),
        base.wrapping_add(SPAN).wrapping_add(timestamp_ms as u64),
    ] {
        // Wrapped-down candidates below zero are not representable times.
        if candidate > (1 << 62) && reference_ms < (1 << 62) {
            continue;
        }
        let dist = candidate.abs_diff(reference_ms);
        if dist < best_dist {
            best = candidate;
            best_dist = dist;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn header_encodes_to_the_reference_bytes() {
        let header = MediaHeader {
            timestamp_ms: 1000,
            flow: 7,
            rate_kbps: 768,
            frame_rate: 25,
            seq: 0,
            codec: 1,
        };
        assert_eq!(
            header.encode(),
            [
                0x00, 0x00, 0x03, 0xE8, // ts 1000
                0x00, 0x00, 0x00, 0x07, // flow 7
                0x03, 0x00, // 768 kbps
                0x19, // 25 fps
                0x00, // seq
                0x01, // codec
                0x00, 0x00, 0x00, // reserved
            ]
        );
    }

    #[test]
    fn header_round_trips_and_rejects_junk() {
        let header = MediaHeader {
            timestamp_ms: 0xDEAD_BEEF,
            flow: 42,
            rate_kbps: 1049,
            frame_rate: 30,
            seq: 255,
            codec: 9,
        };
        assert_eq!(MediaHeader::decode(&header.encode()).unwrap(), header);
        assert_eq!(
            MediaHeader::decode(&[0u8; 10]),
            Err(WireError::Truncated { len: 10 })
        );
        let mut bytes = header.encode();
        bytes[14] = 1;
        assert_eq!(MediaHeader::decode(&bytes), Err(WireError::ReservedNotZero));
    }

    #[test]
    fn fragment_counts_follow_rate_and_frame_rate() {
        assert_eq!(fragments_per_frame(768, 25).unwrap(), 8);
        assert_eq!(fragments_per_frame(128, 25).unwrap(), 2);
        assert_eq!(fragments_per_frame(1049, 25).unwrap(), 11);
        assert_eq!(fragments_per_frame(256, 30).unwrap(), 3);
        assert_eq!(fragments_per_frame(0, 25).unwrap(), 0);
        assert_eq!(fragments_per_frame(256, 0), Err(WireError::ZeroFrameRate));
    }

    #[test]
    fn packetizer_splits_nominal_frames_exactly() {
        let mut packetizer = Packetizer::new(7, 1);
        let frame = vec![0xAB; nominal_frame_bytes(768, 25).unwrap()];
        assert_eq!(frame.len(), 3840);
        let packets = packetizer.packetize(1000, 768, 25, &frame).unwrap();
        assert_eq!(packets.len() as u32, fragments_per_frame(768, 25).unwrap());
        for (i, p) in packets.iter().enumerate() {
            assert_eq!(p.header.seq, i as u8);
            assert_eq!(p.header.timestamp_ms, 1000);
        }
        assert_eq!(packets[0].payload.len(), 512);
        assert_eq!(packets[7].payload.len(), 3840 - 7 * 512);
        // The next frame carries on the sequence counter.
        assert_eq!(packetizer.next_seq(), 8);
    }

    #[test]
    fn sequence_counter_wraps_across_frames() {
        let mut packetizer = Packetizer::new(1, 0);
        // 128 kbps @ 25 fps is 2 fragments per frame: 128 frames exhaust the
        // sequence space exactly once.
        let frame = vec![0u8; nominal_frame_bytes(128, 25).unwrap()];
        for i in 0..128 {
            let packets = packetizer.packetize(i * 40, 128, 25, &frame).unwrap();
            assert_eq!(packets[0].header.seq, (i * 2) as u8);
        }
        assert_eq!(packetizer.next_seq(), 0);
    }

    #[test]
    fn assembler_restores_out_of_order_fragments() {
        let mut packetizer = Packetizer::new(3, 2);
        let frame: Vec<u8> = (0..nominal_frame_bytes(512, 25).unwrap())
            .map(|i| (i % 251) as u8)
            .collect();
        let mut packets = packetizer.packetize(2000, 512, 25, &frame).unwrap();
        packets.reverse();
        let mut assembler = FrameAssembler::new();
        let mut done = None;
        for p in &packets {
            done = assembler.push(p).unwrap();
        }
        let assembled = done.expect("last fragment completes the frame");
        assert_eq!(assembled.payload, frame);
        assert_eq!(assembled.timestamp_ms, 2000);
        assert_eq!(assembler.pending_frames(), 0);
    }

    #[test]
    fn assembler_handles_sequence_wraparound_inside_a_frame() {
        let mut packetizer = Packetizer::new(1, 0);
        // Push the counter to 250 so an 11-fragment frame spans the wrap.
        let filler = vec![0u8; nominal_frame_bytes(128, 25).unwrap()];
        for i in 0..125 {
            packetizer.packetize(i * 40, 128, 25, &filler).unwrap();
        }
        assert_eq!(packetizer.next_seq(), 250);
        let frame: Vec<u8> = (0..nominal_frame_bytes(1049, 25).unwrap())
            .map(|i| (i % 13) as u8)
            .collect();
        let packets = packetizer.packetize(5000, 1049, 25, &frame).unwrap();
        assert_eq!(packets.len(), 11);
        assert_eq!(packets[10].header.seq, 4); // wrapped past 255
        let mut assembler = FrameAssembler::new();
        let mut done = None;
        for p in &packets {
            done = assembler.push(p).unwrap();
        }
        assert_eq!(done.expect("complete").payload, frame);
    }

    #[test]
    fn wire_round_trip_survives_random_frames() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let rates = [128u16, 256, 512, 768, 1049];
        let mut packetizer = Packetizer::new(9, 4);
        let mut assembler = FrameAssembler::new();
        for trial in 0..10_000u32 {
            let rate = rates[rng.gen_range(0..rates.len())];
            let fr = [24u8, 25, 30][rng.gen_range(0..3)];
            let frame: Vec<u8> = (0..nominal_frame_bytes(rate, fr).unwrap())
                .map(|_| rng.gen())
                .collect();
            let mut packets = packetizer.packetize(trial * 40, rate, fr, &frame).unwrap();
            // Shuffle fragment arrival within the frame.
            for i in (1..packets.len()).rev() {
                packets.swap(i, rng.gen_range(0..=i));
            }
            let mut done = None;
            for p in &packets {
                let bytes = p.to_bytes();
                let parsed = Packet::from_bytes(&bytes).unwrap();
                assert_eq!(&parsed, p);
                done = assembler.push(&parsed).unwrap();
            }
            assert_eq!(done.expect("frame completes").payload, frame);
        }
    }

    #[test]
    fn timestamps_extend_to_the_nearest_representative() {
        const SPAN: u64 = 1 << 32;
        // Plain case: same epoch.
        assert_eq!(extend_timestamp(5000, 4000), 5000);
        // Receiver clock just past a wrap, sender ts just after it too.
        assert_eq!(extend_timestamp(10, SPAN + 5), SPAN + 10);
        // Sender ts from just before the wrap the receiver already crossed.
        assert_eq!(extend_timestamp(0xFFFF_FFF6, SPAN + 5), SPAN - 10);
        // Receiver just before the wrap, sender just after it.
        assert_eq!(extend_timestamp(10, SPAN - 5), SPAN + 10);
    }
}
