//! Zero-forcing receive/transmit beamforming and water-filling downlink power
//! allocation with per-user minimum-power floors.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::{CMatrix, CVector};
use crate::config::SystemConfig;
use crate::error::BeamformingError;

/// Gram matrices with a condition number above this are rejected.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

const BISECTION_ITERS: usize = 200;

/// `H (Hᴴ H)⁻¹` for a tall channel matrix `H` (M×K, K ≤ M).
pub fn pseudo_inverse(h: &CMatrix) -> Result<CMatrix, BeamformingError> {
    let (m, k) = h.shape();
    if k == 0 || k > m {
        return Err(BeamformingError::Dimension(format!(
            "need 1 ≤ K ≤ M, got M={m}, K={k}"
        )));
    }
    let gram = h.adjoint() * h;
    let sv = gram.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(BeamformingError::RankDeficient { condition });
    }
    let inv = gram
        .cholesky()
        .ok_or(BeamformingError::RankDeficient { condition })?
        .inverse();
    Ok(h * inv)
}

/// ZF receive matrix `V = H_UL (H_ULᴴ H_UL)⁻¹`, column `k` is `v_k`.
pub fn zf_receive(h_ul: &CMatrix) -> Result<CMatrix, BeamformingError> {
    pseudo_inverse(h_ul)
}

fn col(m: &CMatrix, k: usize) -> CVector {
    m.column(k).into_owned()
}

/// Uplink SINR of user `k` for receive matrix `v` and per-user transmit powers:
/// `p_k |h_kᴴ v_k|² / (v_kᴴ (σ² I + Σ_{m≠k} p_m h_m h_mᴴ) v_k)`.
pub fn uplink_sinr(
    k: usize,
    v: &CMatrix,
    h_ul: &CMatrix,
    powers: &[f64],
    noise: f64,
) -> Result<f64, BeamformingError> {
    check_dims(v, h_ul, powers.len())?;
    let vk = col(v, k);
    let signal = powers[k] * col(h_ul, k).dotc(&vk).norm_sqr();
    let mut denom = noise * vk.norm_squared();
    for m in (0..h_ul.ncols()).filter(|&m| m != k) {
        denom += powers[m] * col(h_ul, m).dotc(&vk).norm_sqr();
    }
    Ok(if signal == 0.0 { 0.0 } else { signal / denom })
}

/// Downlink SINR of user `k` for precoder `w`:
/// `|h_kᴴ w_k|² / (σ² + Σ_{m≠k} |h_kᴴ w_m|²)`.
pub fn downlink_sinr(
    k: usize,
    w: &CMatrix,
    h_dl: &CMatrix,
    noise: f64,
) -> Result<f64, BeamformingError> {
    check_dims(w, h_dl, h_dl.ncols())?;
    let hk = col(h_dl, k);
    let gain = |m: usize| hk.dotc(&col(w, m)).norm_sqr();
    let interference: f64 = (0..w.ncols()).filter(|&m| m != k).map(gain).sum();
    Ok(gain(k) / (noise + interference))
}

fn check_dims(a: &CMatrix, h: &CMatrix, k: usize) -> Result<(), BeamformingError> {
    if a.shape() != h.shape() || h.ncols() != k {
        return Err(BeamformingError::Dimension(format!(
            "beamformer {:?}, channel {:?}, {k} users",
            a.shape(),
            h.shape()
        )));
    }
    Ok(())
}

/// Shannon rate `b log₂(1 + γ)` in bit/s.
pub fn rate(bandwidth_hz: f64, sinr: f64) -> f64 {
    bandwidth_hz * (1.0 + sinr).log2()
}

/// Minimum received power meeting the downlink latency budget,
/// `σ² (2^{ςE/(b·budget)} − 1)`. Returns `+∞` when the budget is exhausted.
pub fn min_power(
    resolution: f64,
    budget_s: f64,
    feedback_bits_per_resolution: f64,
    bandwidth_hz: f64,
    noise: f64,
) -> f64 {
    if !(budget_s > 0.0) {
        return f64::INFINITY;
    }
    let exponent = feedback_bits_per_resolution * resolution / (bandwidth_hz * budget_s);
    noise * (exponent.exp2() - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaterFill {
    /// Received powers `p_k`.
    pub powers: Vec<f64>,
    /// Water level `1/ϱ`.
    pub waterlevel: f64,
}

/// Water-filling with floors:
/// `p_k = (1/v_k) max{1/ϱ − v_k σ²_k, v_k p_min_k}` with `1/ϱ` chosen so that
/// `Σ_k max{1/ϱ − v_k σ²_k, v_k p_min_k} = P_max`.
pub fn water_fill(
    gains: &[f64],
    noise: &[f64],
    floors: &[f64],
    max_power: f64,
) -> Result<WaterFill, BeamformingError> {
    water_fill_weighted(gains, noise, floors, &vec![1.0; gains.len()], max_power)
}

/// Same as [`water_fill`] with per-user weights scaling the water level:
/// `v_k p_k = max{a_k/ϱ − v_k σ²_k, v_k p_min_k}`.
pub fn water_fill_weighted(
    gains: &[f64],
    noise: &[f64],
    floors: &[f64],
    weights: &[f64],
    max_power: f64,
) -> Result<WaterFill, BeamformingError> {
    let k = gains.len();
    if noise.len() != k || floors.len() != k || weights.len() != k {
        return Err(BeamformingError::Dimension(format!(
            "{k} gains, {} noise, {} floors, {} weights",
            noise.len(),
            floors.len(),
            weights.len()
        )));
    }
    if k == 0 {
        return Ok(WaterFill { powers: vec![], waterlevel: 0.0 });
    }
    if gains.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(BeamformingError::InvalidInput("gains must be positive".into()));
    }
    if weights.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(BeamformingError::InvalidInput("weights must be positive".into()));
    }
    if noise.iter().chain(floors).any(|x| x.is_nan() || *x < 0.0) || !(max_power > 0.0) {
        return Err(BeamformingError::InvalidInput(
            "noise, floors and budget must be non-negative".into(),
        ));
    }
    let base: Vec<f64> = gains.iter().zip(noise).map(|(v, s)| v * s).collect();
    let floor_w: Vec<f64> = gains.iter().zip(floors).map(|(v, p)| v * p).collect();
    let required: f64 = floor_w.iter().sum();
    if !(required <= max_power) {
        return Err(BeamformingError::InfeasibleFloors {
            required,
            available: max_power,
        });
    }

    let total = |mu: f64| -> f64 {
        (0..k).map(|i| (weights[i] * mu - base[i]).max(floor_w[i])).sum()
    };
    // Largest water level at which every user still sits on its floor.
    let mut lo = (0..k)
        .map(|i| (base[i] + floor_w[i]) / weights[i])
        .fold(f64::INFINITY, f64::min);
    let mut hi = (0..k)
        .map(|i| (max_power + base[i] + floor_w[i]) / weights[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if total(lo) >= max_power {
        let powers = floors.to_vec();
        return Ok(WaterFill { powers, waterlevel: lo });
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) < max_power {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Exact solve on the active set identified by the bracket.
    let mid = 0.5 * (lo + hi);
    let active: Vec<bool> = (0..k).map(|i| weights[i] * mid - base[i] > floor_w[i]).collect();
    let (mut num, mut den) = (max_power, 0.0);
    for i in 0..k {
        if active[i] {
            num += base[i];
            den += weights[i];
        } else {
            num -= floor_w[i];
        }
    }
    let mu = if den > 0.0 { num / den } else { mid };
    let powers = (0..k)
        .map(|i| {
            let u = if active[i] { weights[i] * mu - base[i] } else { floor_w[i] };
            u.max(floor_w[i]) / gains[i]
        })
        .collect();
    Ok(WaterFill { powers, waterlevel: mu })
}

/// Per-user inputs of the downlink power allocation.
#[derive(Clone, Copy, Debug)]
pub struct DownlinkDemand<'a> {
    pub resolutions: &'a [f64],
    pub uplink_latency_s: &'a [f64],
    pub processing_latency_s: &'a [f64],
    /// `ϖ_ι` per user; only used by the weighted variant.
    pub latency_weights: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransmitSolution {
    /// `W̃ = H_DL (H_DLᴴ H_DL)⁻¹`.
    pub directions: CMatrix,
    /// `v_k`, the diagonal of `W̃ᴴ W̃`.
    pub gains: Vec<f64>,
    /// Minimum received powers; `0` for users whose latency budget was
    /// already exhausted before the downlink.
    pub floors: Vec<f64>,
    /// Received powers `p^DL_k`.
    pub powers: Vec<f64>,
    /// `W = W̃ diag(√p)`.
    pub precoder: CMatrix,
    pub waterlevel: f64,
}

impl TransmitSolution {
    /// `Σ_k ‖w_k‖²`.
    pub fn radiated_power(&self) -> f64 {
        self.precoder.norm_squared()
    }
}

fn transmit_parts(h_dl: &CMatrix) -> Result<(CMatrix, Vec<f64>), BeamformingError> {
    let directions = pseudo_inverse(h_dl)?;
    let gains = (0..directions.ncols())
        .map(|k| directions.column(k).norm_squared())
        .collect();
    Ok((directions, gains))
}

fn assemble(directions: CMatrix, gains: Vec<f64>, floors: Vec<f64>, wf: WaterFill) -> TransmitSolution {
    let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        wf.powers.len(),
        wf.powers.iter().map(|p| Complex64::from(p.sqrt())),
    ));
    let precoder = &directions * scale;
    TransmitSolution {
        directions,
        gains,
        floors,
        powers: wf.powers,
        precoder,
        waterlevel: wf.waterlevel,
    }
}

fn water_weights(cfg: &SystemConfig, demand: &DownlinkDemand<'_>) -> Vec<f64> {
    if !cfg.weighted_waterfill {
        return vec![1.0; demand.resolutions.len()];
    }
    let raw: Vec<f64> = demand
        .resolutions
        .iter()
        .zip(demand.latency_weights)
        .map(|(e, w)| 1.0 / (e * w.max(1e-6)))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|a| a / mean).collect()
}

/// Downlink power floors `p_min,k` implied by the latency budget left after
/// uplink and processing. A user whose budget is already exhausted has no
/// finite floor; its floor is relaxed to zero.
pub fn latency_floors(demand: &DownlinkDemand<'_>, cfg: &SystemConfig) -> Vec<f64> {
    (0..demand.resolutions.len())
        .map(|i| {
            let budget = cfg.latency_max_s - demand.uplink_latency_s[i] - demand.processing_latency_s[i];
            if budget > 0.0 {
                min_power(
                    demand.resolutions[i],
                    budget,
                    cfg.feedback_bits_per_resolution,
                    cfg.bandwidth_hz,
                    cfg.noise_dl_w,
                )
            } else {
                0.0
            }
        })
        .collect()
}

fn check_demand(k: usize, demand: &DownlinkDemand<'_>) -> Result<(), BeamformingError> {
    if demand.resolutions.len() != k
        || demand.uplink_latency_s.len() != k
        || demand.processing_latency_s.len() != k
        || demand.latency_weights.len() != k
    {
        return Err(BeamformingError::Dimension(format!("demand for {k} users expected")));
    }
    Ok(())
}

/// ZF transmit beamforming with water-filled powers above the latency floors.
/// Infeasible floors are returned as [`BeamformingError::InfeasibleFloors`].
pub fn zf_transmit(
    h_dl: &CMatrix,
    demand: &DownlinkDemand<'_>,
    cfg: &SystemConfig,
) -> Result<TransmitSolution, BeamformingError> {
    let k = h_dl.ncols();
    check_demand(k, demand)?;
    let (directions, gains) = transmit_parts(h_dl)?;
    let floors = latency_floors(demand, cfg);
    let noise = vec![cfg.noise_dl_w; k];
    let weights = water_weights(cfg, demand);
    let wf = water_fill_weighted(&gains, &noise, &floors, &weights, cfg.max_transmit_power_w)?;
    Ok(assemble(directions, gains, floors, wf))
}

/// Allocation used when the floors cannot all be met: the same ZF directions
/// water-filled without floors, so the radiated power stays at `P_max`.
pub fn zf_transmit_unfloored(
    h_dl: &CMatrix,
    demand: &DownlinkDemand<'_>,
    cfg: &SystemConfig,
) -> Result<TransmitSolution, BeamformingError> {
    let k = h_dl.ncols();
    check_demand(k, demand)?;
    let (directions, gains) = transmit_parts(h_dl)?;
    let noise = vec![cfg.noise_dl_w; k];
    let floors = vec![0.0; k];
    let weights = water_weights(cfg, demand);
    let wf = water_fill_weighted(&gains, &noise, &floors, &weights, cfg.max_transmit_power_w)?;
    Ok(assemble(directions, gains, floors, wf))
}

/// Per-user SINRs and rates of one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkRates {
    pub sinr_ul: Vec<f64>,
    pub sinr_dl: Vec<f64>,
    pub rate_ul: Vec<f64>,
    pub rate_dl: Vec<f64>,
}

/// Everything the ZF stage decides for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformingSolution {
    pub receive: CMatrix,
    pub transmit: TransmitSolution,
    /// `false` when the latency floors needed more than `P_max`; the
    /// transmit solution is then the unfloored fallback.
    pub power_ok: bool,
}

pub fn uplink_rates(
    v: &CMatrix,
    h_ul: &CMatrix,
    cfg: &SystemConfig,
) -> Result<(Vec<f64>, Vec<f64>), BeamformingError> {
    let k = h_ul.ncols();
    let powers = vec![cfg.uplink_power_w; k];
    let sinr = (0..k)
        .map(|i| uplink_sinr(i, v, h_ul, &powers, cfg.noise_ul_w))
        .collect::<Result<Vec<_>, _>>()?;
    let rates = sinr.iter().map(|g| rate(cfg.bandwidth_hz, *g)).collect();
    Ok((sinr, rates))
}

pub fn downlink_rates(
    w: &CMatrix,
    h_dl: &CMatrix,
    cfg: &SystemConfig,
) -> Result<(Vec<f64>, Vec<f64>), BeamformingError> {
    let sinr = (0..h_dl.ncols())
        .map(|i| downlink_sinr(i, w, h_dl, cfg.noise_dl_w))
        .collect::<Result<Vec<_>, _>>()?;
    let rates = sinr.iter().map(|g| rate(cfg.bandwidth_hz, *g)).collect();
    Ok((sinr, rates))
}
