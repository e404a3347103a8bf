//! Per-scene MDP: state assembly, action decoding, slot stepping, RTG
//! bookkeeping and episode rollouts.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::beamforming::{
    downlink_rates, uplink_rates, zf_receive, zf_transmit, zf_transmit_unfloored, BeamformingSolution,
    DownlinkDemand, LinkRates,
};
use crate::channel::{ChannelParts, ChannelSet, PhaseShiftMatrix, SceneGeometry};
use crate::config::{validate_scene, SceneSpec, SystemConfig};
use crate::error::{BeamformingError, EnvError};
use crate::qoe::{latency_breakdown, processing_latency, reward, QoeResult};

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// MDP state at the start of slot `t` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub slot: usize,
    pub weights: Vec<[f64; 2]>,
    pub payload_bits: Vec<f64>,
    /// Small-scale fades of this slot, before the RIS phases are chosen.
    pub parts: ChannelParts,
    /// Effective channels under the all-zero phase configuration.
    pub observed: ChannelSet,
    pub prev_qoe: Vec<f64>,
}

impl State {
    fn new(slot: usize, scene: &SceneSpec, parts: ChannelParts, prev_qoe: Vec<f64>) -> Result<Self, EnvError> {
        let observed = parts.compose(&PhaseShiftMatrix::zeros(parts.user_ris_ul.nrows()))?;
        Ok(Self {
            slot,
            weights: scene.weights.clone(),
            payload_bits: scene.uplink_payload_bits.clone(),
            parts,
            observed,
            prev_qoe,
        })
    }

    /// Flat feature vector of length `K(2 + 4M + 1) + 1`.
    ///
    /// Per user: `ϖ_ε, ϖ_ι`, the uplink effective channel as interleaved
    /// (re, im) pairs, the downlink one likewise, the previous slot's QoE.
    /// The slot index comes last.
    pub fn features(&self) -> Vec<f64> {
        let (m, k) = self.observed.effective_ul.shape();
        let mut out = Vec::with_capacity(k * (2 + 4 * m + 1) + 1);
        for j in 0..k {
            out.extend_from_slice(&self.weights[j]);
            for h in [&self.observed.effective_ul, &self.observed.effective_dl] {
                for z in h.column(j).iter() {
                    out.push(z.re);
                    out.push(z.im);
                }
            }
            out.push(self.prev_qoe[j]);
        }
        out.push(self.slot as f64);
        out
    }
}

/// Variables chosen by the policy for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub theta: PhaseShiftMatrix,
    pub resolutions: Vec<f64>,
    pub compute_hz: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a raw vector `[phases (N), resolutions (K), compute (K)]` onto the
/// feasible decision set: `θ = 2π σ(x)`, `E = E_min + (E_max − E_min) σ(x)`,
/// `f = C softmax(x)`.
pub fn decode_action(raw: &[f64], cfg: &SystemConfig) -> Result<Decision, EnvError> {
    let (n, k) = (cfg.num_ris_elements, cfg.num_users);
    if raw.len() != n + 2 * k {
        return Err(EnvError::ActionLength {
            expected: n + 2 * k,
            got: raw.len(),
        });
    }
    if let Some(i) = raw.iter().position(|x| !x.is_finite()) {
        return Err(EnvError::NonFiniteAction(i));
    }
    let theta = PhaseShiftMatrix::new(raw[..n].iter().map(|&x| std::f64::consts::TAU * sigmoid(x)));
    let span = cfg.resolution_max - cfg.resolution_min;
    let resolutions = raw[n..n + k]
        .iter()
        .map(|&x| (cfg.resolution_min + span * sigmoid(x)).min(cfg.resolution_max))
        .collect();

    let logits = &raw[n + k..];
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Clamping keeps every share strictly positive.
    let expw: Vec<f64> = logits.iter().map(|&x| (x - top).max(-700.0).exp()).collect();
    let total: f64 = expw.iter().sum();
    let mut compute_hz: Vec<f64> = expw.iter().map(|e| cfg.server_compute_hz * e / total).collect();
    // Rounding can overshoot the budget by a few ulps.
    while compute_hz.iter().sum::<f64>() > cfg.server_compute_hz {
        let excess = compute_hz.iter().sum::<f64>() - cfg.server_compute_hz;
        let big = (0..k)
            .max_by(|&a, &b| compute_hz[a].total_cmp(&compute_hz[b]))
            .unwrap_or(0);
        compute_hz[big] -= excess.max(compute_hz[big] * f64::EPSILON);
    }
    Ok(Decision {
        theta,
        resolutions,
        compute_hz,
    })
}

/// Result of applying one decision to one slot's channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEval {
    pub channels: ChannelSet,
    pub beamforming: BeamformingSolution,
    pub rates: LinkRates,
    pub qoe: Vec<QoeResult>,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next: State,
    pub eval: SlotEval,
    pub done: bool,
}

/// A validated scene together with its large-scale geometry.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub scene: SceneSpec,
    pub cfg: SystemConfig,
    geometry: SceneGeometry,
}

impl Scenario {
    pub fn new(scene: SceneSpec, cfg: SystemConfig) -> Result<Self, EnvError> {
        validate_scene(&scene, &cfg).map_err(EnvError::InvalidScene)?;
        let geometry = SceneGeometry::new(&scene, &cfg)?;
        Ok(Self { scene, cfg, geometry })
    }

    pub fn geometry(&self) -> &SceneGeometry {
        &self.geometry
    }

    pub fn horizon(&self) -> usize {
        self.scene.horizon
    }

    /// Fading stream of an episode; distinct scenes get distinct streams for
    /// the same episode seed.
    pub fn episode_rng(&self, seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.scene.seed, seed))
    }

    /// Slot-1 state and the fading stream that continues the episode.
    pub fn reset(&self, seed: u64) -> Result<(State, ChaCha8Rng), EnvError> {
        let mut rng = self.episode_rng(seed);
        let parts = self.geometry.sample_parts(&mut rng);
        let state = State::new(1, &self.scene, parts, vec![0.0; self.scene.num_users()])?;
        Ok((state, rng))
    }

    /// `R̂ = Σ_t Σ_k (ϖ_ε + ϖ_ι)`, i.e. `K·T_i` for valid weights.
    pub fn rtg_init(&self) -> f64 {
        let per_slot: f64 = self.scene.weights.iter().map(|w| w[0] + w[1]).sum();
        per_slot * self.scene.horizon as f64
    }

    /// Scores a decision on the state's current channel draw without
    /// advancing anything.
    pub fn evaluate(&self, state: &State, decision: &Decision) -> Result<SlotEval, EnvError> {
        let cfg = &self.cfg;
        let k = self.scene.num_users();
        let channels = state.parts.compose(&decision.theta)?;
        let receive = zf_receive(&channels.effective_ul)?;
        let (sinr_ul, rate_ul) = uplink_rates(&receive, &channels.effective_ul, cfg)?;
        let ul_latency: Vec<f64> = (0..k)
            .map(|j| crate::qoe::transfer_time(state.payload_bits[j], rate_ul[j]))
            .collect();
        let pro_latency: Vec<f64> = (0..k)
            .map(|j| processing_latency(decision.resolutions[j], decision.compute_hz[j], cfg))
            .collect();
        let latency_weights: Vec<f64> = state.weights.iter().map(|w| w[1]).collect();
        let demand = DownlinkDemand {
            resolutions: &decision.resolutions,
            uplink_latency_s: &ul_latency,
            processing_latency_s: &pro_latency,
            latency_weights: &latency_weights,
        };
        let (transmit, power_ok) = match zf_transmit(&channels.effective_dl, &demand, cfg) {
            Ok(t) => (t, true),
            Err(BeamformingError::InfeasibleFloors { .. }) => {
                (zf_transmit_unfloored(&channels.effective_dl, &demand, cfg)?, false)
            }
            Err(e) => return Err(e.into()),
        };
        let (sinr_dl, rate_dl) = downlink_rates(&transmit.precoder, &channels.effective_dl, cfg)?;
        let qoe = (0..k)
            .map(|j| {
                let lat = latency_breakdown(
                    state.payload_bits[j],
                    rate_ul[j],
                    decision.resolutions[j],
                    decision.compute_hz[j],
                    rate_dl[j],
                    cfg,
                );
                QoeResult::evaluate(state.weights[j], decision.resolutions[j], lat, cfg)
                    .expect("decoded resolutions are never below E_min")
            })
            .collect::<Vec<_>>();
        let r = reward(&qoe, power_ok, cfg.penalty_coeff, cfg.latency_max_s);
        Ok(SlotEval {
            channels,
            beamforming: BeamformingSolution {
                receive,
                transmit,
                power_ok,
            },
            rates: LinkRates {
                sinr_ul,
                sinr_dl,
                rate_ul,
                rate_dl,
            },
            qoe,
            reward: r,
        })
    }

    /// Applies the decision to the current slot, then draws the next slot's
    /// fades from `rng`.
    pub fn step(&self, state: &State, decision: &Decision, rng: &mut ChaCha8Rng) -> Result<StepOutcome, EnvError> {
        if state.slot > self.scene.horizon {
            return Err(EnvError::Finished(state.slot));
        }
        let eval = self.evaluate(state, decision)?;
        let parts = self.geometry.sample_parts(rng);
        let prev_qoe = eval.qoe.iter().map(|q| q.qoe).collect();
        let next = State::new(state.slot + 1, &self.scene, parts, prev_qoe)?;
        Ok(StepOutcome {
            done: state.slot == self.scene.horizon,
            next,
            eval,
        })
    }
}

/// One stored slot of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub scene_id: u32,
    pub t: usize,
    pub rtg: f64,
    pub state: Vec<f64>,
    /// Raw action in the `decode_action` layout.
    pub decision: Vec<f64>,
    pub reward: f64,
    /// Per-user QoE of the slot.
    pub qoe: Vec<f64>,
    /// Power constraint met and every user within `L_max`.
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene_id: u32,
    pub records: Vec<SlotRecord>,
    pub total_return: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `Σ_t Σ_k QoE`.
    pub fn total_qoe(&self) -> f64 {
        self.records.iter().map(|r| r.qoe.iter().sum::<f64>()).sum()
    }

    /// Fraction of slots with any violated constraint.
    pub fn violation_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| !r.feasible).count() as f64 / self.records.len() as f64
    }

    pub fn qoe_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.qoe.iter().sum()).collect()
    }

    /// One JSON object per slot.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Splits a JSON-lines stream into episodes at every `t == 1` record.
    pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<Episode>> {
        let mut out: Vec<Episode> = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SlotRecord = serde_json::from_str(&line).map_err(std::io::Error::other)?;
            let start = rec.t == 1 || out.last().is_none_or(|e| e.scene_id != rec.scene_id);
            if start {
                out.push(Episode {
                    scene_id: rec.scene_id,
                    records: Vec::new(),
                    total_return: 0.0,
                });
            }
            let ep = out.last_mut().expect("pushed above");
            ep.total_return += rec.reward;
            ep.records.push(rec);
        }
        Ok(out)
    }
}

/// What a policy sees when asked for a decision.
pub struct PolicyInput<'a> {
    pub scenario: &'a Scenario,
    pub state: &'a State,
    pub rtg: f64,
    /// Earlier slots of the current episode.
    pub history: &'a [SlotRecord],
}

pub trait Policy {
    fn name(&self) -> String;

    /// Called once before each episode.
    fn begin(&mut self, _scenario: &Scenario, _seed: u64) -> Result<(), EnvError> {
        Ok(())
    }

    /// RTG of the first slot.
    fn initial_rtg(&self, scenario: &Scenario) -> f64 {
        scenario.rtg_init()
    }

    /// Raw action in the `decode_action` layout.
    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Vec<f64>, EnvError>;
}

/// Raw actions with independent standard-normal entries.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub fn random_raw_action<R: rand::Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Vec<f64> {
    (0..cfg.action_dim()).map(|_| StandardNormal.sample(rng)).collect()
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn begin(&mut self, _scenario: &Scenario, seed: u64) -> Result<(), EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5241_4e44));
        Ok(())
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Vec<f64>, EnvError> {
        Ok(random_raw_action(&input.scenario.cfg, &mut self.rng))
    }
}

/// The same raw action in every slot.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPolicy {
    pub label: String,
    pub raw: Vec<f64>,
}

impl Policy for FixedPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn act(&mut self, _input: &PolicyInput<'_>) -> Result<Vec<f64>, EnvError> {
        Ok(self.raw.clone())
    }
}

/// Runs one episode of `T_i` slots.
pub fn rollout(policy: &mut dyn Policy, scenario: &Scenario, seed: u64) -> Result<Episode, EnvError> {
    policy.begin(scenario, seed)?;
    let (mut state, mut rng) = scenario.reset(seed)?;
    let mut rtg = policy.initial_rtg(scenario);
    let mut records: Vec<SlotRecord> = Vec::with_capacity(scenario.horizon());
    let mut total = 0.0;
    loop {
        let raw = policy.act(&PolicyInput {
            scenario,
            state: &state,
            rtg,
            history: &records,
        })?;
        let decision = decode_action(&raw, &scenario.cfg)?;
        let out = scenario.step(&state, &decision, &mut rng)?;
        let r = out.eval.reward;
        records.push(SlotRecord {
            scene_id: scenario.scene.scene_id,
            t: state.slot,
            rtg,
            state: state.features(),
            decision: raw,
            reward: r,
            qoe: out.eval.qoe.iter().map(|q| q.qoe).collect(),
            feasible: out.eval.beamforming.power_ok && out.eval.qoe.iter().all(|q| q.feasible),
        });
        total += r;
        rtg -= r;
        if out.done {
            break;
        }
        state = out.next;
    }
    Ok(Episode {
        scene_id: scenario.scene.scene_id,
        records,
        total_return: total,
    })
}
