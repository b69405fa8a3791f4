//! Per-link packet-delay noise and smoothed latency measurement.
//!
//! Every directed surrogate link carries a base propagation latency plus
//! Gaussian per-packet noise; scripted congestion episodes add uniform
//! spikes on top. Probe traffic smooths observed samples with an
//! exponentially weighted moving average before feeding them back into the
//! routing engine, mirroring how latency estimates behave in deployments:
//! the mean shifts within a few probe periods while individual spikes are
//! damped.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floor applied to sampled one-way delays; links never deliver instantly.
const MIN_DELAY_MS: f64 = 0.05;

/// Delay model of one directed link.
#[derive(Debug, Clone, Copy)]
pub struct LinkModel {
    pub base_ms: f64,
    pub sigma_ms: f64,
    /// When set, every packet also draws a uniform spike in `[0, max]` ms.
    pub spike_max_ms: Option<f64>,
}

impl LinkModel {
    pub fn new(base_ms: f64, sigma_ms: f64) -> Self {
        LinkModel {
            base_ms,
            sigma_ms,
            spike_max_ms: None,
        }
    }

    /// One per-packet delay draw: `max(floor, N(base, sigma)) + U[0, spike]`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let gauss = if self.sigma_ms > 0.0 {
            // Parameters are validated finite and positive, so this cannot fail.
            Normal::new(self.base_ms, self.sigma_ms).unwrap().sample(rng)
        } else {
            self.base_ms
        };
        let mut delay = gauss.max(MIN_DELAY_MS);
        if let Some(max) = self.spike_max_ms {
            delay += rng.gen_range(0.0..=max);
        }
        delay
    }
}

/// Exponentially weighted moving average with gain `alpha`.
#[derive(Debug, Clone, Copy)]
pub struct Ewma {
    alpha: f64,
    value: Option<f64>,
}

impl Ewma {
    pub fn new(alpha: f64) -> Self {
        Ewma { alpha, value: None }
    }

    /// Folds in one sample and returns the updated average. The first
    /// sample primes the average directly.
    pub fn observe(&mut self, sample: f64) -> f64 {
        let next = match self.value {
            None => sample,
            Some(v) => v + self.alpha * (sample - v),
        };
        self.value = Some(next);
        next
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}
