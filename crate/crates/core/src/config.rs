//! System constants, scene descriptions and the on-disk configuration schema.
//!
//! Every physical quantity is held in SI units internally (watts, hertz,
//! seconds, bits, metres, linear gains). The configuration file accepts the
//! units used in the literature (`_dbm`, `_db`, `_mb`, `_mbit`) as well as
//! the canonical SI keys; [`save_config`] always writes the SI keys so that a
//! load/save/load cycle is exact.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Bits in one (decimal) megabyte.
pub const BITS_PER_MB: f64 = 8.0e6;
/// Bits in one megabit.
pub const BITS_PER_MBIT: f64 = 1.0e6;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// `10^(x/10)`.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Power in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}

/// Path-loss exponents per link type. Uplink and downlink share the
/// exponent of their physical link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossExponents {
    /// User <-> server direct link.
    pub user_server: f64,
    /// User <-> RIS link.
    pub user_ris: f64,
    /// RIS <-> server link.
    pub ris_server: f64,
}

/// Linear Rician K-factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RicianFactors {
    /// `G_{k,r}` and `G_{r,k}`.
    pub user_ris: f64,
    /// `G_{r,a}` (uplink RIS -> server).
    pub ris_server: f64,
    /// `G_{a,r}` (downlink server -> RIS).
    pub server_ris: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub num_users: usize,
    pub num_antennas: usize,
    pub num_ris_elements: usize,
    pub bandwidth_hz: f64,
    pub uplink_power_w: f64,
    pub max_transmit_power_w: f64,
    /// Server computing capacity in cycles per second.
    pub server_compute_hz: f64,
    pub cycles_per_bit: f64,
    /// Per-sample data size used by rendering, in bits.
    pub per_sample_bits: f64,
    /// Feedback bits per unit of rendering resolution.
    pub feedback_bits_per_resolution: f64,
    pub resolution_min: f64,
    pub resolution_max: f64,
    pub latency_max_s: f64,
    pub noise_ul_w: f64,
    pub noise_dl_w: f64,
    /// Linear path gain at 1 m.
    pub pathloss_ref: f64,
    pub pathloss_exponents: PathLossExponents,
    pub rician_factors: RicianFactors,
    pub penalty_coeff: f64,
    pub server_position_m: [f64; 3],
    pub ris_position_m: [f64; 3],
    /// Scale the water level of each user by its latency weight. Off by default.
    pub weighted_waterfill: bool,
}

impl SystemConfig {
    /// The full-scale simulation profile (K = 10, M = 64, N = 16).
    pub fn table_one() -> Self {
        Self {
            num_users: 10,
            num_antennas: 64,
            num_ris_elements: 16,
            bandwidth_hz: 2.0e6,
            uplink_power_w: 0.5,
            max_transmit_power_w: dbm_to_watts(43.0),
            server_compute_hz: 1.0e10,
            cycles_per_bit: 50.0,
            per_sample_bits: 8.0 * BITS_PER_MBIT,
            feedback_bits_per_resolution: BITS_PER_MB,
            resolution_min: 1.0,
            resolution_max: 2.0,
            latency_max_s: 0.5,
            noise_ul_w: dbm_to_watts(-60.0),
            noise_dl_w: dbm_to_watts(-50.0),
            pathloss_ref: db_to_linear(-20.0),
            pathloss_exponents: PathLossExponents {
                user_server: 3.0,
                user_ris: 2.0,
                ris_server: 2.0,
            },
            rician_factors: RicianFactors {
                user_ris: db_to_linear(8.0),
                ris_server: db_to_linear(6.0),
                server_ris: db_to_linear(7.0),
            },
            penalty_coeff: 1.0,
            server_position_m: [0.0, 0.0, 40.0],
            ris_position_m: [75.0, 100.0, 20.0],
            weighted_waterfill: false,
        }
    }

    /// Reduced scale used for training runs: K = 4, M = 8, N = 8 and a
    /// 20 MHz band. All other constants are shared with
    /// [`SystemConfig::table_one`].
    pub fn desk() -> Self {
        Self {
            num_users: 4,
            bandwidth_hz: 2.0e7,
            num_antennas: 8,
            num_ris_elements: 8,
            ..Self::table_one()
        }
    }

    /// Maximal perception quality, `ln(E_max / E_min)`.
    pub fn perception_max(&self) -> f64 {
        (self.resolution_max / self.resolution_min).ln()
    }

    /// Length of a raw action vector: N phases, K resolutions, K compute shares.
    pub fn action_dim(&self) -> usize {
        self.num_ris_elements + 2 * self.num_users
    }

    /// Length of a flattened state vector.
    pub fn state_dim(&self) -> usize {
        self.num_users * (2 + 4 * self.num_antennas + 1) + 1
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        self.collect_violations(&mut v);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    fn collect_violations(&self, out: &mut Vec<Violation>) {
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                out.push(Violation::new(key, msg));
            }
        };
        let positive = |x: f64| x.is_finite() && x > 0.0;
        check(self.num_users > 0, "num_users", "K must be positive");
        check(self.num_antennas > 0, "num_antennas", "M must be positive");
        check(self.num_ris_elements > 0, "num_ris_elements", "N must be positive");
        check(
            self.num_users <= self.num_antennas,
            "num_users",
            "K ≤ M required for ZF",
        );
        check(positive(self.bandwidth_hz), "bandwidth_hz", "bandwidth must be positive");
        check(positive(self.uplink_power_w), "uplink_power", "uplink power must be positive");
        check(
            positive(self.max_transmit_power_w),
            "max_transmit_power",
            "maximum transmit power must be positive",
        );
        check(
            positive(self.server_compute_hz),
            "server_compute_hz",
            "server compute must be positive",
        );
        check(positive(self.cycles_per_bit), "cycles_per_bit", "cycles per bit must be positive");
        check(positive(self.per_sample_bits), "per_sample_bits", "per-sample bits must be positive");
        check(
            positive(self.feedback_bits_per_resolution),
            "feedback_bits_per_resolution",
            "feedback bits must be positive",
        );
        check(positive(self.resolution_min), "resolution_min", "E_min must be positive");
        check(
            self.resolution_min < self.resolution_max && self.resolution_max.is_finite(),
            "resolution_min,resolution_max",
            "E_min < E_max required",
        );
        check(positive(self.latency_max_s), "latency_max_s", "L_max must be positive");
        check(positive(self.noise_ul_w), "noise_ul", "uplink noise must be positive");
        check(positive(self.noise_dl_w), "noise_dl", "downlink noise must be positive");
        check(
            self.pathloss_ref > 0.0 && self.pathloss_ref <= 1.0,
            "pathloss_ref",
            "ρ must lie in (0, 1]",
        );
        let e = self.pathloss_exponents;
        check(
            [e.user_server, e.user_ris, e.ris_server].iter().all(|x| x.is_finite() && *x >= 0.0),
            "pathloss_exponents",
            "path-loss exponents must be finite and non-negative",
        );
        let g = self.rician_factors;
        check(
            [g.user_ris, g.ris_server, g.server_ris].iter().all(|x| !x.is_nan() && *x >= 0.0),
            "rician_factors",
            "Rician factors must be non-negative",
        );
        check(
            self.penalty_coeff.is_finite() && self.penalty_coeff >= 0.0,
            "penalty_coeff",
            "δ must be finite and non-negative",
        );
        check(
            self.server_position_m.iter().chain(&self.ris_position_m).all(|x| x.is_finite()),
            "positions",
            "positions must be finite",
        );
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::table_one()
    }
}

/// One digital-twin scene: who the users are, where they stand and what they
/// care about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: u32,
    /// Number of slots `T_i`.
    pub horizon: usize,
    pub user_positions_m: Vec<[f64; 3]>,
    /// Per-user `(ϖ_ε, ϖ_ι)`: attention to perception and to latency.
    pub weights: Vec<[f64; 2]>,
    pub uplink_payload_bits: Vec<f64>,
    pub seed: u64,
}

/// Ranges used by [`SceneSpec::random`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSampler {
    /// Side of the square deployment area.
    pub area_m: f64,
    pub user_height_m: f64,
    pub payload_mb: (f64, f64),
    pub horizon: usize,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            area_m: 100.0,
            user_height_m: 1.5,
            payload_mb: (0.1, 1.0),
            horizon: 20,
        }
    }
}

impl SceneSpec {
    pub fn num_users(&self) -> usize {
        self.weights.len()
    }

    /// Draws a scene with users uniform over the area, weights uniform on the
    /// simplex and payloads uniform in the configured range.
    pub fn random<R: Rng + ?Sized>(
        scene_id: u32,
        cfg: &SystemConfig,
        sampler: &SceneSampler,
        rng: &mut R,
    ) -> Self {
        let k = cfg.num_users;
        let mut user_positions_m = Vec::with_capacity(k);
        let mut weights = Vec::with_capacity(k);
        let mut uplink_payload_bits = Vec::with_capacity(k);
        for _ in 0..k {
            user_positions_m.push([
                rng.random_range(0.0..sampler.area_m),
                rng.random_range(0.0..sampler.area_m),
                sampler.user_height_m,
            ]);
            let w: f64 = rng.random_range(0.0..=1.0);
            weights.push([w, 1.0 - w]);
            let (lo, hi) = sampler.payload_mb;
            uplink_payload_bits.push(rng.random_range(lo..=hi) * BITS_PER_MB);
        }
        Self {
            scene_id,
            horizon: sampler.horizon,
            user_positions_m,
            weights,
            uplink_payload_bits,
            seed: rng.random(),
        }
    }

    /// `n` scenes with ids `0..n` drawn from one seeded stream.
    pub fn sample_many(n: usize, cfg: &SystemConfig, sampler: &SceneSampler, seed: u64) -> Vec<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n as u32).map(|i| Self::random(i, cfg, sampler, &mut rng)).collect()
    }
}

/// A single violated invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl Violation {
    fn new(key: &str, message: &str) -> Self {
        Self {
            key: key.to_owned(),
            message: message.to_owned(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Checks every scene and system invariant; returns all violations at once.
pub fn validate_scene(scene: &SceneSpec, cfg: &SystemConfig) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    cfg.collect_violations(&mut out);
    let k = cfg.num_users;
    let prefix = |field: &str| format!("scenes[{}].{field}", scene.scene_id);

    if scene.horizon < 1 {
        out.push(Violation::new(&prefix("horizon"), "T_i must be at least 1"));
    }
    if scene.weights.len() != k {
        out.push(Violation::new(&prefix("weights"), "one weight pair per user required"));
    }
    if scene.user_positions_m.len() != k {
        out.push(Violation::new(&prefix("user_positions_m"), "one position per user required"));
    }
    if scene.uplink_payload_bits.len() != k {
        out.push(Violation::new(&prefix("uplink_payload"), "one payload per user required"));
    }
    for [we, wi] in &scene.weights {
        if !(0.0..=1.0).contains(we) || !(0.0..=1.0).contains(wi) {
            out.push(Violation::new(&prefix("weights"), "weights must lie in [0, 1]"));
        }
        if ((we + wi) - 1.0).abs() > WEIGHT_SUM_TOL {
            out.push(Violation::new(&prefix("weights"), "weights must sum to 1"));
        }
    }
    if scene.uplink_payload_bits.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        out.push(Violation::new(&prefix("uplink_payload"), "D_k^UL must be positive"));
    }
    for q in &scene.user_positions_m {
        if q.iter().any(|x| !x.is_finite()) {
            out.push(Violation::new(&prefix("user_positions_m"), "positions must be finite"));
        } else if *q == cfg.server_position_m || *q == cfg.ris_position_m {
            out.push(Violation::new(
                &prefix("user_positions_m"),
                "user co-located with server or RIS",
            ));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Which built-in profile supplies defaults for omitted keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    TableOne,
    Desk,
}

impl Profile {
    pub fn base(self) -> SystemConfig {
        match self {
            Profile::TableOne => SystemConfig::table_one(),
            Profile::Desk => SystemConfig::desk(),
        }
    }
}

/// `system` object of the configuration file. Every key is optional; a
/// quantity given in two units at once is a schema error.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_users: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_antennas: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_ris_elements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink_power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink_power_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_transmit_power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_transmit_power_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_compute_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles_per_bit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_bits: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_mbit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_bits_per_resolution: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_per_resolution_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_max_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_ul_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_ul_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_dl_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_dl_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathloss_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathloss_ref_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathloss_exponents: Option<PathLossExponents>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rician_factors: Option<RicianFactors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rician_factors_db: Option<RicianFactors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_position_m: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ris_position_m: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_waterfill: Option<bool>,
}

/// One entry of the `scenes` array.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene_id: u32,
    pub horizon: usize,
    pub user_positions_m: Vec<[f64; 3]>,
    pub weights: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink_payload_bits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink_payload_mb: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub system: SystemFile,
    #[serde(default)]
    pub scenes: Vec<SceneFile>,
}

fn pick(
    si: Option<f64>,
    alt: Option<f64>,
    si_key: &str,
    alt_key: &str,
    convert: impl Fn(f64) -> f64,
    default: f64,
) -> Result<f64, ConfigError> {
    match (si, alt) {
        (Some(_), Some(_)) => Err(ConfigError::Schema {
            keys: vec![si_key.to_owned(), alt_key.to_owned()],
            message: "quantity given in two units".into(),
        }),
        (Some(x), None) => Ok(x),
        (None, Some(x)) => Ok(convert(x)),
        (None, None) => Ok(default),
    }
}

impl SystemFile {
    pub fn resolve(&self) -> Result<SystemConfig, ConfigError> {
        let base = self.profile.unwrap_or_default().base();
        let rician = match (self.rician_factors, self.rician_factors_db) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Schema {
                    keys: vec!["rician_factors".into(), "rician_factors_db".into()],
                    message: "quantity given in two units".into(),
                })
            }
            (Some(g), None) => g,
            (None, Some(g)) => RicianFactors {
                user_ris: db_to_linear(g.user_ris),
                ris_server: db_to_linear(g.ris_server),
                server_ris: db_to_linear(g.server_ris),
            },
            (None, None) => base.rician_factors,
        };
        let cfg = SystemConfig {
            num_users: self.num_users.unwrap_or(base.num_users),
            num_antennas: self.num_antennas.unwrap_or(base.num_antennas),
            num_ris_elements: self.num_ris_elements.unwrap_or(base.num_ris_elements),
            bandwidth_hz: self.bandwidth_hz.unwrap_or(base.bandwidth_hz),
            uplink_power_w: pick(
                self.uplink_power_w,
                self.uplink_power_dbm,
                "uplink_power_w",
                "uplink_power_dbm",
                dbm_to_watts,
                base.uplink_power_w,
            )?,
            max_transmit_power_w: pick(
                self.max_transmit_power_w,
                self.max_transmit_power_dbm,
                "max_transmit_power_w",
                "max_transmit_power_dbm",
                dbm_to_watts,
                base.max_transmit_power_w,
            )?,
            server_compute_hz: self.server_compute_hz.unwrap_or(base.server_compute_hz),
            cycles_per_bit: self.cycles_per_bit.unwrap_or(base.cycles_per_bit),
            per_sample_bits: pick(
                self.per_sample_bits,
                self.per_sample_mbit,
                "per_sample_bits",
                "per_sample_mbit",
                |x| x * BITS_PER_MBIT,
                base.per_sample_bits,
            )?,
            feedback_bits_per_resolution: pick(
                self.feedback_bits_per_resolution,
                self.feedback_per_resolution_mb,
                "feedback_bits_per_resolution",
                "feedback_per_resolution_mb",
                |x| x * BITS_PER_MB,
                base.feedback_bits_per_resolution,
            )?,
            resolution_min: self.resolution_min.unwrap_or(base.resolution_min),
            resolution_max: self.resolution_max.unwrap_or(base.resolution_max),
            latency_max_s: self.latency_max_s.unwrap_or(base.latency_max_s),
            noise_ul_w: pick(
                self.noise_ul_w,
                self.noise_ul_dbm,
                "noise_ul_w",
                "noise_ul_dbm",
                dbm_to_watts,
                base.noise_ul_w,
            )?,
            noise_dl_w: pick(
                self.noise_dl_w,
                self.noise_dl_dbm,
                "noise_dl_w",
                "noise_dl_dbm",
                dbm_to_watts,
                base.noise_dl_w,
            )?,
            pathloss_ref: pick(
                self.pathloss_ref,
                self.pathloss_ref_db,
                "pathloss_ref",
                "pathloss_ref_db",
                db_to_linear,
                base.pathloss_ref,
            )?,
            pathloss_exponents: self.pathloss_exponents.unwrap_or(base.pathloss_exponents),
            rician_factors: rician,
            penalty_coeff: self.penalty_coeff.unwrap_or(base.penalty_coeff),
            server_position_m: self.server_position_m.unwrap_or(base.server_position_m),
            ris_position_m: self.ris_position_m.unwrap_or(base.ris_position_m),
            weighted_waterfill: self.weighted_waterfill.unwrap_or(base.weighted_waterfill),
        };
        if cfg.resolution_min >= cfg.resolution_max {
            return Err(ConfigError::Schema {
                keys: vec!["resolution_min".into(), "resolution_max".into()],
                message: format!(
                    "resolution_min ({}) must be below resolution_max ({})",
                    cfg.resolution_min, cfg.resolution_max
                ),
            });
        }
        Ok(cfg)
    }

    /// Canonical SI representation of `cfg`.
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            profile: None,
            num_users: Some(cfg.num_users),
            num_antennas: Some(cfg.num_antennas),
            num_ris_elements: Some(cfg.num_ris_elements),
            bandwidth_hz: Some(cfg.bandwidth_hz),
            uplink_power_w: Some(cfg.uplink_power_w),
            max_transmit_power_w: Some(cfg.max_transmit_power_w),
            server_compute_hz: Some(cfg.server_compute_hz),
            cycles_per_bit: Some(cfg.cycles_per_bit),
            per_sample_bits: Some(cfg.per_sample_bits),
            feedback_bits_per_resolution: Some(cfg.feedback_bits_per_resolution),
            resolution_min: Some(cfg.resolution_min),
            resolution_max: Some(cfg.resolution_max),
            latency_max_s: Some(cfg.latency_max_s),
            noise_ul_w: Some(cfg.noise_ul_w),
            noise_dl_w: Some(cfg.noise_dl_w),
            pathloss_ref: Some(cfg.pathloss_ref),
            pathloss_exponents: Some(cfg.pathloss_exponents),
            rician_factors: Some(cfg.rician_factors),
            penalty_coeff: Some(cfg.penalty_coeff),
            server_position_m: Some(cfg.server_position_m),
            ris_position_m: Some(cfg.ris_position_m),
            weighted_waterfill: Some(cfg.weighted_waterfill),
            ..Self::default()
        }
    }
}

impl SceneFile {
    pub fn resolve(&self) -> Result<SceneSpec, ConfigError> {
        let payload = match (&self.uplink_payload_bits, &self.uplink_payload_mb) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Schema {
                    keys: vec!["uplink_payload_bits".into(), "uplink_payload_mb".into()],
                    message: "quantity given in two units".into(),
                })
            }
            (Some(b), None) => b.clone(),
            (None, Some(mb)) => mb.iter().map(|x| x * BITS_PER_MB).collect(),
            (None, None) => {
                return Err(ConfigError::Schema {
                    keys: vec![format!("scenes[{}].uplink_payload_mb", self.scene_id)],
                    message: "missing uplink payload".into(),
                })
            }
        };
        Ok(SceneSpec {
            scene_id: self.scene_id,
            horizon: self.horizon,
            user_positions_m: self.user_positions_m.clone(),
            weights: self.weights.clone(),
            uplink_payload_bits: payload,
            seed: self.seed,
        })
    }

    pub fn from_scene(scene: &SceneSpec) -> Self {
        Self {
            scene_id: scene.scene_id,
            horizon: scene.horizon,
            user_positions_m: scene.user_positions_m.clone(),
            weights: scene.weights.clone(),
            uplink_payload_bits: Some(scene.uplink_payload_bits.clone()),
            uplink_payload_mb: None,
            seed: scene.seed,
        }
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<(SystemConfig, Vec<SceneSpec>), ConfigError> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let cfg = file.system.resolve()?;
    cfg.validate().map_err(ConfigError::Invalid)?;
    let mut scenes = Vec::with_capacity(file.scenes.len());
    for s in &file.scenes {
        let scene = s.resolve()?;
        validate_scene(&scene, &cfg).map_err(ConfigError::Invalid)?;
        scenes.push(scene);
    }
    Ok((cfg, scenes))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<(SystemConfig, Vec<SceneSpec>), ConfigError> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_config(&text)
}

pub fn render_config(cfg: &SystemConfig, scenes: &[SceneSpec]) -> String {
    let file = ConfigFile {
        system: SystemFile::from_config(cfg),
        scenes: scenes.iter().map(SceneFile::from_scene).collect(),
    };
    serde_json::to_string_pretty(&file).expect("config serializes")
}

pub fn save_config(
    path: impl AsRef<Path>,
    cfg: &SystemConfig,
    scenes: &[SceneSpec],
) -> Result<(), ConfigError> {
    fs::write(path.as_ref(), render_config(cfg, scenes))
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(cfg: &SystemConfig) -> SceneSpec {
        SceneSpec::random(0, cfg, &SceneSampler::default(), &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn db_conversions() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert!((db_to_linear(-20.0) - 0.01).abs() < 1e-15);
        assert!((dbm_to_watts(43.0) - 19.952_623_149_688_8).abs() < 1e-9);
        assert!((dbm_to_watts(43.0) - 19.9526).abs() < 1e-4);
    }

    #[test]
    fn table_one_values() {
        let c = SystemConfig::table_one();
        assert_eq!(c.bandwidth_hz, 2.0e6);
        assert!((c.pathloss_ref - 0.01).abs() < 1e-15);
        assert_eq!(c.per_sample_bits, 8.0e6);
        assert_eq!(c.feedback_bits_per_resolution, 8.0e6);
        assert!((c.noise_ul_w - 1e-9).abs() < 1e-21);
        assert!((c.noise_dl_w - 1e-8).abs() < 1e-20);
        assert!((c.perception_max() - 2f64.ln()).abs() < 1e-15);
        c.validate().unwrap();
        SystemConfig::desk().validate().unwrap();
    }

    #[test]
    fn balanced_weights_are_ok() {
        let cfg = SystemConfig::desk();
        let mut s = scene(&cfg);
        s.weights = vec![[0.5, 0.5]; cfg.num_users];
        assert!(validate_scene(&s, &cfg).is_ok());
    }

    #[test]
    fn overweight_is_reported() {
        let cfg = SystemConfig::desk();
        let mut s = scene(&cfg);
        s.weights[0] = [0.7, 0.7];
        let v = validate_scene(&s, &cfg).unwrap_err();
        assert!(v.iter().any(|v| v.message == "weights must sum to 1"));
    }

    #[test]
    fn more_users_than_antennas() {
        let cfg = SystemConfig {
            num_users: 10,
            num_antennas: 8,
            ..SystemConfig::desk()
        };
        let s = scene(&cfg);
        let v = validate_scene(&s, &cfg).unwrap_err();
        assert!(v.iter().any(|v| v.message == "K ≤ M required for ZF"));
    }

    #[test]
    fn one_violation_per_invariant() {
        let cfg = SystemConfig::desk();
        let good = scene(&cfg);
        type Breaker = fn(&mut SystemConfig, &mut SceneSpec);
        let cases: Vec<(&str, Breaker)> = vec![
            ("bandwidth_hz", |c, _| c.bandwidth_hz = 0.0),
            ("uplink_power", |c, _| c.uplink_power_w = -1.0),
            ("max_transmit_power", |c, _| c.max_transmit_power_w = 0.0),
            ("server_compute_hz", |c, _| c.server_compute_hz = 0.0),
            ("resolution_min,resolution_max", |c, _| c.resolution_max = 0.5),
            ("latency_max_s", |c, _| c.latency_max_s = 0.0),
            ("noise_dl", |c, _| c.noise_dl_w = 0.0),
            ("pathloss_ref", |c, _| c.pathloss_ref = 1.5),
            ("penalty_coeff", |c, _| c.penalty_coeff = f64::NAN),
            ("scenes[0].horizon", |_, s| s.horizon = 0),
            ("scenes[0].uplink_payload", |_, s| s.uplink_payload_bits[1] = 0.0),
            ("scenes[0].weights", |_, s| s.weights[2] = [1.2, -0.2]),
        ];
        for (key, brk) in cases {
            let mut c = cfg.clone();
            let mut s = good.clone();
            brk(&mut c, &mut s);
            let v = validate_scene(&s, &c).unwrap_err();
            assert!(v.iter().all(|x| x.key == key), "{key}: {v:?}");
        }
    }

    #[test]
    fn empty_scene_list_parses() {
        let (cfg, scenes) = parse_config(r#"{"system": {}, "scenes": []}"#).unwrap();
        assert!(scenes.is_empty());
        assert_eq!(cfg, SystemConfig::table_one());
    }

    #[test]
    fn omitted_bandwidth_defaults() {
        let (cfg, _) = parse_config(r#"{"system": {"num_users": 4}}"#).unwrap();
        assert_eq!(cfg.bandwidth_hz, 2.0e6);
        assert_eq!(cfg.num_users, 4);
    }

    #[test]
    fn inverted_resolution_names_both_keys() {
        let err = parse_config(r#"{"system": {"resolution_min": 2.0, "resolution_max": 1.0}}"#)
            .unwrap_err();
        match err {
            ConfigError::Schema { keys, .. } => {
                assert!(keys.contains(&"resolution_min".to_string()));
                assert!(keys.contains(&"resolution_max".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_units_are_accepted() {
        let (cfg, scenes) = parse_config(
            r#"{"system": {"profile": "desk", "max_transmit_power_dbm": 40, "pathloss_ref_db": -30,
                "rician_factors_db": {"user_ris": 0, "ris_server": 10, "server_ris": 20}},
               "scenes": [{"scene_id": 3, "horizon": 5, "seed": 9,
                 "user_positions_m": [[1,2,1.5],[3,4,1.5],[5,6,1.5],[7,8,1.5]],
                 "weights": [[0.5,0.5],[1,0],[0,1],[0.25,0.75]],
                 "uplink_payload_mb": [0.1, 0.2, 0.5, 1.0]}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.num_users, 4);
        assert!((cfg.max_transmit_power_w - 10.0).abs() < 1e-12);
        assert!((cfg.pathloss_ref - 1e-3).abs() < 1e-15);
        assert!((cfg.rician_factors.server_ris - 100.0).abs() < 1e-9);
        assert_eq!(scenes[0].uplink_payload_bits[3], 8.0e6);
    }

    #[test]
    fn duplicate_units_and_unknown_keys_rejected() {
        assert!(matches!(
            parse_config(r#"{"system": {"noise_dl_w": 1e-8, "noise_dl_dbm": -50}}"#),
            Err(ConfigError::Schema { .. })
        ));
        assert!(matches!(
            parse_config(r#"{"system": {"bandwith_hz": 1}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn invalid_scene_is_reported_with_key() {
        let err = parse_config(
            r#"{"system": {"profile": "desk"},
               "scenes": [{"scene_id": 1, "horizon": 5, "seed": 9,
                 "user_positions_m": [[1,2,1.5],[3,4,1.5],[5,6,1.5],[7,8,1.5]],
                 "weights": [[0.7,0.7],[1,0],[0,1],[0.25,0.75]],
                 "uplink_payload_mb": [0.1, 0.2, 0.5, 1.0]}]}"#,
        )
        .unwrap_err();
        match err {
            ConfigError::Invalid(v) => assert_eq!(v[0].key, "scenes[1].weights"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn db_is_monotone_and_multiplicative(a in -80.0f64..80.0, b in -80.0f64..80.0) {
            let prod = db_to_linear(a) * db_to_linear(b);
            prop_assert!((db_to_linear(a + b) - prod).abs() <= 1e-12 * prod);
            if a < b {
                prop_assert!(db_to_linear(a) < db_to_linear(b));
            }
        }

        #[test]
        fn save_load_roundtrip(seed in any::<u64>(), k in 1usize..6, pmax_dbm in 30.0f64..46.0) {
            let cfg = SystemConfig {
                num_users: k,
                num_antennas: k + 2,
                max_transmit_power_w: dbm_to_watts(pmax_dbm),
                ..SystemConfig::desk()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scenes: Vec<_> = (0..3)
                .map(|i| SceneSpec::random(i, &cfg, &SceneSampler::default(), &mut rng))
                .collect();
            let (cfg2, scenes2) = parse_config(&render_config(&cfg, &scenes)).unwrap();
            prop_assert_eq!(cfg2, cfg);
            prop_assert_eq!(scenes2, scenes);
        }
    }
}
