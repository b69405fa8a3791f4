//! Typed metric rows collected during simulation and their CSV encodings.
//!
//! Every observable lands in one of the row families below. Encodings are
//! stable: fixed column order, fixed three-decimal float formatting, rows
//! appended in event order. Identical runs therefore produce byte-identical
//! files, which the determinism checks rely on. An empty log still writes
//! every file with its header line, so downstream tooling can always rely
//! on the schema.
//!
//! Files written by [`MetricsLog::write_csvs`]:
//!
//! | file           | columns                                                          |
//! |----------------|------------------------------------------------------------------|
//! | `flow_rates.csv` | `time_ms,flow,receiver,rate_kbps`                              |
//! | `buffers.csv`  | `time_ms,flow,receiver,occupancy_ms,sigma_hat_ms,bound_L_ms`     |
//! | `latencies.csv`| `time_ms,flow,receiver,mean_ms,max_ms`                           |
//! | `switches.csv` | `time_ms,flow,node,old_parent,new_parent,old_rate_kbps,new_rate_kbps,kind` |
//! | `timeouts.csv` | `time_ms,flow,receiver,delay_ms,deadline_ms`                     |
//! | `frames.csv`   | `flow,receiver,dispatched,on_time,concealed,missed,in_flight`    |
//! | `session.csv`  | `time_ms,member,event,detail`                                    |
//!
//! Latency rows aggregate the frames that completed arrival at a receiver
//! during one sampling tick and report realized device-to-device delay
//! (capture, uplink, overlay path, downlink). Timeout rows record fragments
//! that missed their playout deadline, with the realized delay and the
//! deadline they were held to.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// Flow rate delivered to one receiver at one sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub time_ms: u64,
    pub flow: u32,
    pub receiver: u32,
    pub rate_kbps: u32,
}

/// Playout-buffer state of one (flow, receiver) pair at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferRow {
    pub time_ms: u64,
    pub flow: u32,
    pub receiver: u32,
    pub occupancy_ms: f64,
    pub sigma_hat_ms: f64,
    pub bound_l_ms: f64,
}

/// Realized end-to-end latency of frames that arrived during one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub time_ms: u64,
    pub flow: u32,
    pub receiver: u32,
    pub mean_ms: f64,
    pub max_ms: f64,
}

/// One accepted route change.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchRow {
    pub time_ms: u64,
    pub flow: u32,
    pub node: u32,
    pub old_parent: u32,
    pub new_parent: u32,
    pub old_rate_kbps: u32,
    pub new_rate_kbps: u32,
    /// `rate-improve` or `latency-repair`.
    pub kind: &'static str,
}

/// One fragment that missed its playout deadline.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeoutRow {
    pub time_ms: u64,
    pub flow: u32,
    pub receiver: u32,
    pub delay_ms: f64,
    pub deadline_ms: f64,
}

/// Where every frame dispatched toward one receiver ended up.
///
/// `dispatched` counts frames actually forwarded toward the receiver (a
/// frame captured before the receiver joined, or pruned upstream, is never
/// dispatched to it). Conservation holds by construction and is asserted
/// at the end of every run: every dispatched frame is released complete
/// (`on_time`), released with gaps (`concealed`), missed entirely
/// (`missed`), or still in flight when the run ends (`in_flight`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAccount {
    pub flow: u32,
    pub receiver: u32,
    pub dispatched: u64,
    pub on_time: u64,
    pub concealed: u64,
    pub missed: u64,
    pub in_flight: u64,
}

impl FrameAccount {
    pub fn conserved(&self) -> bool {
        self.dispatched == self.on_time + self.concealed + self.missed + self.in_flight
    }
}

/// One session-layer occurrence (join, goodbye, expiry, failover, roster
/// adoption, clock calibration).
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRow {
    pub time_ms: u64,
    pub member: u32,
    pub event: &'static str,
    pub detail: String,
}

/// All rows collected by one simulation run.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rates: Vec<RateRow>,
    pub buffers: Vec<BufferRow>,
    pub latencies: Vec<LatencyRow>,
    pub switches: Vec<SwitchRow>,
    pub timeouts: Vec<TimeoutRow>,
    pub frames: Vec<FrameAccount>,
    pub session: Vec<SessionRow>,
}

impl MetricsLog {
    /// Writes all seven CSV files under `dir`, creating it if needed.
    pub fn write_csvs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("flow_rates.csv"), self.render_rates())?;
        fs::write(dir.join("buffers.csv"), self.render_buffers())?;
        fs::write(dir.join("latencies.csv"), self.render_latencies())?;
        fs::write(dir.join("switches.csv"), self.render_switches())?;
        fs::write(dir.join("timeouts.csv"), self.render_timeouts())?;
        fs::write(dir.join("frames.csv"), self.render_frames())?;
        fs::write(dir.join("session.csv"), self.render_session())?;
        Ok(())
    }

    pub fn render_rates(&self) -> String {
        let mut out = String::from("time_ms,flow,receiver,rate_kbps\n");
        for r in &self.rates {
            writeln!(out, "{},{},{},{}", r.time_ms, r.flow, r.receiver, r.rate_kbps).unwrap();
        }
        out
    }

    pub fn render_buffers(&self) -> String {
        let mut out = String::from("time_ms,flow,receiver,occupancy_ms,sigma_hat_ms,bound_L_ms\n");
        for r in &self.buffers {
            writeln!(
                out,
                "{},{},{},{:.3},{:.3},{:.3}",
                r.time_ms, r.flow, r.receiver, r.occupancy_ms, r.sigma_hat_ms, r.bound_l_ms
            )
            .unwrap();
        }
        out
    }

    pub fn render_latencies(&self) -> String {
        let mut out = String::from("time_ms,flow,receiver,mean_ms,max_ms\n");
        for r in &self.latencies {
            writeln!(
                out,
                "{},{},{},{:.3},{:.3}",
                r.time_ms, r.flow, r.receiver, r.mean_ms, r.max_ms
            )
            .unwrap();
        }
        out
    }

    pub fn render_switches(&self) -> String {
        let mut out = String::from(
            "time_ms,flow,node,old_parent,new_parent,old_rate_kbps,new_rate_kbps,kind\n",
        );
        for r in &self.switches {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.time_ms,
                r.flow,
                r.node,
                r.old_parent,
                r.new_parent,
                r.old_rate_kbps,
                r.new_rate_kbps,
                r.kind
            )
            .unwrap();
        }
        out
    }

    pub fn render_timeouts(&self) -> String {
        let mut out = String::from("time_ms,flow,receiver,delay_ms,deadline_ms\n");
        for r in &self.timeouts {
            writeln!(
                out,
                "{},{},{},{:.3},{:.3}",
                r.time_ms, r.flow, r.receiver, r.delay_ms, r.deadline_ms
            )
            .unwrap();
        }
        out
    }

    pub fn render_frames(&self) -> String {
        let mut out = String::from("flow,receiver,dispatched,on_time,concealed,missed,in_flight\n");
        for r in &self.frames {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.flow, r.receiver, r.dispatched, r.on_time, r.concealed, r.missed, r.in_flight
            )
            .unwrap();
        }
        out
    }

    pub fn render_session(&self) -> String {
        let mut out = String::from("time_ms,member,event,detail\n");
        for r in &self.session {
            writeln!(out, "{},{},{},{}", r.time_ms, r.member, r.event, r.detail).unwrap();
        }
        out
    }
}

/// Sample standard deviation (n - 1 normalization); 0 for fewer than two
/// samples.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}
