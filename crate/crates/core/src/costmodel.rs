//! Analytic time, traffic, and energy model.
//!
//! Training cost is expressed in units of one layer's forward pass,
//! `c = per_batch_latency_full / (3 D)`, with a layer's backward pass costing
//! `2c`. A batch that runs `f` layers forward and `b` layers backward costs
//! `c (f + 2 b)`. Adapter compute is ignored.

use serde::{Deserialize, Serialize};

use crate::model::{ModelSpec, ModelState};
use crate::adapter::trainable_param_count;
use crate::payload::PAYLOAD_HEADER_BYTES;

/// Bytes per scalar on the wire (FP32).
pub const WIRE_SCALAR_BYTES: usize = 4;

/// 1 MB/s, the default link speed in both directions.
pub const DEFAULT_BANDWIDTH: f64 = 1.0e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Seconds for one full-model training batch (batch size 4).
    pub per_batch_latency_full: f64,
    pub compute_power_watts: f64,
    pub radio_power_watts: f64,
    /// Seconds to load one batch of cached activations.
    pub cache_reload_latency: f64,
}

impl DeviceProfile {
    fn bundled(name: &str, latency: f64, compute_w: f64, radio_w: f64) -> Self {
        Self {
            name: name.into(),
            per_batch_latency_full: latency,
            compute_power_watts: compute_w,
            radio_power_watts: radio_w,
            // 1% of a full batch, inside the "tens of ms" reload budget
            cache_reload_latency: latency * 0.01,
        }
    }

    /// Jetson TX2. Power figures are ballpark board numbers, not measured.
    pub fn tx2() -> Self {
        Self::bundled("tx2", 0.88, 7.5, 1.2)
    }

    /// Jetson Nano.
    pub fn nano() -> Self {
        Self::bundled("nano", 1.89, 5.0, 1.0)
    }

    /// Raspberry Pi 4B.
    pub fn rpi4b() -> Self {
        Self::bundled("rpi4b", 18.27, 6.4, 0.8)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tx2" => Some(Self::tx2()),
            "nano" => Some(Self::nano()),
            "rpi4b" => Some(Self::rpi4b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("per_batch_latency_full", self.per_batch_latency_full),
            ("compute_power_watts", self.compute_power_watts),
            ("radio_power_watts", self.radio_power_watts),
            ("cache_reload_latency", self.cache_reload_latency),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("device `{}`: {name} must be positive", self.name));
            }
        }
        Ok(())
    }

    /// Seconds for one layer's forward pass on one batch.
    pub fn layer_forward_cost(&self, num_layers: usize) -> f64 {
        self.per_batch_latency_full / (3.0 * num_layers as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkProfile {
    pub uplink_bytes_per_s: f64,
    pub downlink_bytes_per_s: f64,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self::symmetric(DEFAULT_BANDWIDTH)
    }
}

impl NetworkProfile {
    pub fn symmetric(bytes_per_s: f64) -> Self {
        Self {
            uplink_bytes_per_s: bytes_per_s,
            downlink_bytes_per_s: bytes_per_s,
        }
    }

    pub fn download_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.downlink_bytes_per_s
    }

    pub fn upload_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.uplink_bytes_per_s
    }
}

/// Seconds elapsed on one trial track.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct EmulatedClock(f64);

impl EmulatedClock {
    pub fn at(seconds: f64) -> Self {
        Self(seconds)
    }

    pub fn seconds(&self) -> f64 {
        self.0
    }

    pub fn advance(&mut self, dt: f64) {
        assert!(dt >= 0.0, "clock cannot run backwards ({dt})");
        self.0 += dt;
    }

    /// Jump forward to `t` if it is later.
    pub fn sync_to(&mut self, t: f64) {
        if t > self.0 {
            self.0 = t;
        }
    }
}

/// Time for one batch running `forward_layers` forward and `backward_layers`
/// backward, plus a cache reload when `reload` is set.
pub fn batch_compute_time(
    profile: &DeviceProfile,
    num_layers: usize,
    forward_layers: usize,
    backward_layers: usize,
    reload: bool,
) -> f64 {
    let c = profile.layer_forward_cost(num_layers);
    let reload_s = if reload {
        profile.cache_reload_latency
    } else {
        0.0
    };
    c * (forward_layers + 2 * backward_layers) as f64 + reload_s
}

/// Per-batch training time at tuning depth `d`.
///
/// Without the cache all `D` layers run forward and the top `d` backward:
/// `c (D + 2d)`. With a warm cache only the top `d` run forward, plus one
/// reload: `c (3d) + reload`.
pub fn compute_time_per_batch(
    profile: &DeviceProfile,
    num_layers: usize,
    depth: usize,
    cache_enabled: bool,
) -> f64 {
    if cache_enabled {
        batch_compute_time(profile, num_layers, depth, depth, true)
    } else {
        batch_compute_time(profile, num_layers, num_layers, depth, false)
    }
}

/// Share of a cache-free training batch spent in the forward pass: `D / (D + 2d)`.
pub fn forward_share(num_layers: usize, depth: usize) -> f64 {
    num_layers as f64 / (num_layers + 2 * depth) as f64
}

/// Wire bytes for a payload of `scalars` values.
pub fn payload_bytes_for(scalars: usize, scalar_bytes: usize) -> usize {
    PAYLOAD_HEADER_BYTES + scalars * scalar_bytes
}

/// Wire bytes of a model's trainable payload at FP32.
pub fn payload_bytes(model: &ModelState) -> usize {
    payload_bytes_for(trainable_param_count(model), WIRE_SCALAR_BYTES)
}

/// Time components of one client's round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundCost {
    pub download_s: f64,
    pub compute_s: f64,
    pub upload_s: f64,
}

impl ClientRoundCost {
    pub fn new(network: &NetworkProfile, compute_s: f64, payload_bytes: usize) -> Self {
        Self {
            download_s: network.download_time(payload_bytes),
            compute_s,
            upload_s: network.upload_time(payload_bytes),
        }
    }

    pub fn total(&self) -> f64 {
        self.download_s + self.compute_s + self.upload_s
    }

    pub fn transfer_s(&self) -> f64 {
        self.download_s + self.upload_s
    }
}

/// Synchronous round time: the slowest participant. Aggregation is free.
pub fn round_time(group: &[ClientRoundCost]) -> f64 {
    group.iter().map(ClientRoundCost::total).fold(0.0, f64::max)
}

pub fn energy_joules(compute_s: f64, transfer_s: f64, profile: &DeviceProfile) -> f64 {
    compute_s * profile.compute_power_watts + transfer_s * profile.radio_power_watts
}

/// Forward FLOPs of one adapter for one sample: `2 m n seqlen`.
pub fn adapter_forward_flops(m: usize, n: usize, seqlen: usize) -> u64 {
    2 * (m * n * seqlen) as u64
}

/// Forward FLOPs of the encoder for one sample of length `seqlen`: the
/// dense projections plus the two attention matmuls.
pub fn encoder_forward_flops(spec: &ModelSpec, seqlen: usize) -> u64 {
    let n = spec.hidden as u64;
    let f = spec.ffn() as u64;
    let s = seqlen as u64;
    let dense = 2 * s * (4 * n * n + 2 * n * f);
    let attention = 2 * 2 * s * s * n;
    spec.num_layers as u64 * (dense + attention)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_share_at_depth_two() {
        assert_eq!(forward_share(12, 2), 0.75);
        let p = DeviceProfile::tx2();
        let t = compute_time_per_batch(&p, 12, 2, false);
        let full = p.per_batch_latency_full;
        assert!((t / full - 16.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn depth_zero_with_cache_is_reload_only() {
        let p = DeviceProfile::nano();
        assert_eq!(compute_time_per_batch(&p, 6, 0, true), p.cache_reload_latency);
    }

    #[test]
    fn cached_time_is_linear_in_depth() {
        let p = DeviceProfile::rpi4b();
        let steps: Vec<f64> = (1..=12)
            .map(|d| compute_time_per_batch(&p, 12, d, true) - compute_time_per_batch(&p, 12, d - 1, true))
            .collect();
        for s in &steps {
            assert!((s - steps[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn reload_overhead_is_small() {
        for p in [DeviceProfile::tx2(), DeviceProfile::nano(), DeviceProfile::rpi4b()] {
            assert!(p.cache_reload_latency < 0.02 * p.per_batch_latency_full);
        }
    }

    #[test]
    fn one_client_round() {
        let net = NetworkProfile::symmetric(1.0e6);
        let cost = ClientRoundCost::new(&net, 10.0, 1_000_000);
        assert_eq!(round_time(&[cost]), 12.0);
    }

    #[test]
    fn slowest_member_sets_round_time() {
        let net = NetworkProfile::default();
        let group = [
            ClientRoundCost::new(&net, 1.0, 10),
            ClientRoundCost::new(&net, 7.0, 10),
            ClientRoundCost::new(&net, 3.0, 10),
        ];
        assert_eq!(round_time(&group), group[1].total());
    }

    #[test]
    fn doubling_bandwidth_halves_transfer() {
        let slow = ClientRoundCost::new(&NetworkProfile::symmetric(1.0e6), 5.0, 3_000_000);
        let fast = ClientRoundCost::new(&NetworkProfile::symmetric(2.0e6), 5.0, 3_000_000);
        assert_eq!(fast.compute_s, slow.compute_s);
        assert!((fast.transfer_s() * 2.0 - slow.transfer_s()).abs() < 1e-12);
    }

    #[test]
    fn energy_arithmetic() {
        let mut p = DeviceProfile::tx2();
        assert_eq!(energy_joules(0.0, 0.0, &p), 0.0);
        p.compute_power_watts = 5.0;
        p.radio_power_watts = 2.0;
        assert_eq!(energy_joules(10.0, 4.0, &p), 58.0);
    }

    #[test]
    fn energy_falls_with_payload() {
        let p = DeviceProfile::tx2();
        let net = NetworkProfile::default();
        let big = ClientRoundCost::new(&net, 2.0, 500_000);
        let small = ClientRoundCost::new(&net, 2.0, 400_000);
        assert!(
            energy_joules(small.compute_s, small.transfer_s(), &p)
                < energy_joules(big.compute_s, big.transfer_s(), &p)
        );
    }

    #[test]
    fn adapter_flops() {
        assert_eq!(adapter_forward_flops(32, 768, 256), 12_582_912);
        assert_eq!(adapter_forward_flops(0, 768, 256), 0);
        let bert = encoder_forward_flops(&ModelSpec::bert_base(20), 256);
        assert!((adapter_forward_flops(32, 768, 256) as f64) < 0.01 * bert as f64);
    }

    #[test]
    fn bert_payload_sizes() {
        let adapters = payload_bytes_for(614_784, WIRE_SCALAR_BYTES);
        assert_eq!(adapters, PAYLOAD_HEADER_BYTES + 2_459_136);
        let full = payload_bytes_for(110_010_000, WIRE_SCALAR_BYTES);
        assert!((full as f64 / 1e6 - 440.04).abs() < 1e-3);
    }
}
