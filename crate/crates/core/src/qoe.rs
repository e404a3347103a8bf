//! Perception quality, round-trip latency, per-user QoE and the slot reward.

use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::QoeError;

/// Weber-Fechner perception quality `ln(E/E_min)`.
pub fn perception_quality(resolution: f64, resolution_min: f64) -> Result<f64, QoeError> {
    if !(resolution >= resolution_min) {
        return Err(QoeError::ResolutionBelowMin {
            resolution,
            min: resolution_min,
        });
    }
    Ok((resolution / resolution_min).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub uplink_s: f64,
    pub processing_s: f64,
    pub downlink_s: f64,
    pub total_s: f64,
}

impl LatencyBreakdown {
    pub fn new(uplink_s: f64, processing_s: f64, downlink_s: f64) -> Self {
        Self {
            uplink_s,
            processing_s,
            downlink_s,
            total_s: uplink_s + processing_s + downlink_s,
        }
    }
}

/// Latency reported for a link that cannot deliver (zero rate or zero
/// compute). Every component is capped here so that rewards stay finite.
pub const LATENCY_SENTINEL_S: f64 = 10.0;

/// `bits / rate`, capped at [`LATENCY_SENTINEL_S`].
pub fn transfer_time(bits: f64, rate_bps: f64) -> f64 {
    if rate_bps > 0.0 {
        (bits / rate_bps).min(LATENCY_SENTINEL_S)
    } else {
        LATENCY_SENTINEL_S
    }
}

/// Uplink transfer, server-side processing and downlink feedback latency.
pub fn latency_breakdown(
    payload_bits: f64,
    rate_ul_bps: f64,
    resolution: f64,
    compute_hz: f64,
    rate_dl_bps: f64,
    cfg: &SystemConfig,
) -> LatencyBreakdown {
    LatencyBreakdown::new(
        transfer_time(payload_bits, rate_ul_bps),
        processing_latency(resolution, compute_hz, cfg),
        transfer_time(cfg.feedback_bits_per_resolution * resolution, rate_dl_bps),
    )
}

/// `ξ c E / f`.
pub fn processing_latency(resolution: f64, compute_hz: f64, cfg: &SystemConfig) -> f64 {
    transfer_time(cfg.per_sample_bits * cfg.cycles_per_bit * resolution, compute_hz)
}

/// `ϖ_ε ℰ/ℰ_max + ϖ_ι (1 − L/L_max)`, deliberately not clamped.
pub fn qoe(weights: [f64; 2], perception: f64, latency_s: f64, perception_max: f64, latency_max_s: f64) -> f64 {
    weights[0] * perception / perception_max + weights[1] * (1.0 - latency_s / latency_max_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoeResult {
    pub perception: f64,
    pub latency: LatencyBreakdown,
    pub qoe: f64,
    /// Round-trip latency within `L_max`.
    pub feasible: bool,
}

impl QoeResult {
    pub fn evaluate(
        weights: [f64; 2],
        resolution: f64,
        latency: LatencyBreakdown,
        cfg: &SystemConfig,
    ) -> Result<Self, QoeError> {
        let perception = perception_quality(resolution, cfg.resolution_min)?;
        let value = qoe(
            weights,
            perception,
            latency.total_s,
            cfg.perception_max(),
            cfg.latency_max_s,
        );
        Ok(Self {
            perception,
            latency,
            qoe: value,
            feasible: latency.total_s <= cfg.latency_max_s,
        })
    }
}

/// Slot reward.
///
/// With the power constraint met: `Σ QoE_k − δ Σ l_k`, where `l_k = L_max`
/// for users over the latency threshold. Otherwise the QoE sum is negated.
/// A user whose QoE is already negative contributes `−|QoE_k|` in that branch,
/// so a violated slot never scores above zero.
pub fn reward(results: &[QoeResult], power_ok: bool, penalty_coeff: f64, latency_max_s: f64) -> f64 {
    if power_ok {
        let total: f64 = results.iter().map(|r| r.qoe).sum();
        let over = results.iter().filter(|r| !r.feasible).count() as f64;
        total - penalty_coeff * over * latency_max_s
    } else {
        -results.iter().map(|r| r.qoe.abs()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(q: f64, feasible: bool) -> QoeResult {
        QoeResult {
            perception: 0.0,
            latency: LatencyBreakdown::new(0.1, 0.1, 0.1),
            qoe: q,
            feasible,
        }
    }

    #[test]
    fn perception_values() {
        assert_eq!(perception_quality(1.0, 1.0).unwrap(), 0.0);
        assert!((perception_quality(std::f64::consts::E * 1.5, 1.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((perception_quality(2.0, 1.0).unwrap() - 0.693147).abs() < 1e-6);
        assert!(matches!(
            perception_quality(0.5, 1.0),
            Err(QoeError::ResolutionBelowMin { .. })
        ));
    }

    #[test]
    fn latency_examples() {
        let cfg = SystemConfig::table_one();
        let l = latency_breakdown(1e6, 2e6, 1.0, 1e10, 8e7, &cfg);
        assert!((l.uplink_s - 0.5).abs() < 1e-15);
        assert!((l.processing_s - 0.04).abs() < 1e-15);
        assert!((l.downlink_s - 0.1).abs() < 1e-15);
        assert_eq!(l.total_s, l.uplink_s + l.processing_s + l.downlink_s);
        let dead = latency_breakdown(1e6, 0.0, 1.0, 1e10, 8e7, &cfg);
        assert_eq!(dead.uplink_s, LATENCY_SENTINEL_S);
    }

    #[test]
    fn qoe_examples() {
        assert_eq!(qoe([1.0, 0.0], 2.0, 0.3, 2.0, 0.5), 1.0);
        assert_eq!(qoe([0.0, 1.0], 2.0, 0.5, 2.0, 0.5), 0.0);
        assert!((qoe([0.5, 0.5], 1.0, 0.125, 2.0, 0.5) - 0.625).abs() < 1e-15);
        // overshoot is not clamped
        assert!(qoe([0.0, 1.0], 0.0, 1.5, 1.0, 0.5) < 0.0);
    }

    #[test]
    fn reward_branches() {
        let ok = [result(0.4, true), result(0.7, true)];
        assert!((reward(&ok, true, 3.0, 0.5) - 1.1).abs() < 1e-15);
        assert!((reward(&ok, false, 3.0, 0.5) + 1.1).abs() < 1e-15);
        let late = [result(0.4, true), result(-0.2, false)];
        assert!((reward(&late, true, 1.0, 0.5) - (0.2 - 0.5)).abs() < 1e-15);
        assert!((reward(&late, false, 1.0, 0.5) + 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn qoe_monotone(e1 in 1.0f64..2.0, de in 1e-6f64..1.0, l in 0.0f64..2.0, dl in 1e-6f64..1.0, w in 0.01f64..0.99) {
            let cfg = SystemConfig::desk();
            let pmax = cfg.perception_max();
            let p1 = perception_quality(e1, 1.0).unwrap();
            let p2 = perception_quality(e1 + de, 1.0).unwrap();
            let ws = [w, 1.0 - w];
            prop_assert!(qoe(ws, p2, l, pmax, 0.5) > qoe(ws, p1, l, pmax, 0.5));
            prop_assert!(qoe(ws, p1, l + dl, pmax, 0.5) < qoe(ws, p1, l, pmax, 0.5));
        }

        #[test]
        fn reward_bounded_by_user_count(qs in proptest::collection::vec((-5.0f64..1.0, any::<bool>()), 1..10), ok in any::<bool>()) {
            let rs: Vec<QoeResult> = qs.iter().map(|(q, f)| result(*q, *f)).collect();
            let r = reward(&rs, ok, 1.0, 0.5);
            prop_assert!(r <= rs.len() as f64);
            prop_assert_eq!(r.to_bits(), reward(&rs, ok, 1.0, 0.5).to_bits());
        }

        #[test]
        fn perception_concave(start in 1.0f64..1.5, h in 1e-3f64..0.1) {
            let f = |x: f64| perception_quality(x, 1.0).unwrap();
            let second = f(start + 2.0 * h) - 2.0 * f(start + h) + f(start);
            prop_assert!(second < 0.0);
        }
    }
}
