//! Expert-search data generation, prompt/trajectory pools, minibatching,
//! the offline training loop, online evaluation and the ROM / DF-WP
//! baselines.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, SceneFile, SceneSpec, SystemConfig, SystemFile};
use crate::env::{
    decode_action, mix_seed, random_raw_action, rollout, Decision, Episode, FixedPolicy, Policy, PolicyInput,
    Scenario, SlotRecord, State,
};
use crate::error::{EnvError, ModelError};
use crate::transformer::{
    adam_step, batch_loss_and_grad, forward, init_params, DecisionModel, ModelInput, Normalizer, TrainConfig,
    Tuple,
};

/// Default share of each scene's episodes routed to the prompt pool.
pub const PROMPT_FRACTION: f64 = 0.2;

const EXPERT_STREAM: u64 = 0x4558_5052;
const PROMPT_STREAM: u64 = 0x5052_4f4d;
const ROM_STREAM: u64 = 0x524f_4d00;

/// Search settings of the data-generating expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Candidates scored per slot, `S`.
    pub candidates: usize,
    /// Within an episode, half of the candidates perturb the previous slot's
    /// choice by `N(0, perturbation²)`; the incumbent itself is candidate 0.
    pub warm_start: bool,
    pub perturbation: f64,
    /// Extra draws of the RIS-link fades, with the observed direct links
    /// kept, over which each candidate's reward is averaged together with
    /// the true draw. Zero scores on the true draw alone.
    pub fading_samples: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            candidates: 32,
            warm_start: true,
            perturbation: 0.3,
            fading_samples: 0,
        }
    }
}

/// Best of `S` candidate raw actions by one-step reward on the current slot.
/// The score averages the true draw with [`ExpertConfig::fading_samples`]
/// redraws of the unobserved RIS links. Ties go to the lowest candidate
/// index. Returns the raw action, its decision and its reward on the true
/// draw.
pub fn expert_action<R: Rng + ?Sized>(
    state: &State,
    scenario: &Scenario,
    expert: &ExpertConfig,
    incumbent: Option<&[f64]>,
    rng: &mut R,
) -> Result<(Vec<f64>, Decision, f64), EnvError> {
    let cfg = &scenario.cfg;
    let s = expert.candidates.max(1);
    let noise = Normal::new(0.0, expert.perturbation.max(0.0)).map_err(|e| EnvError::Policy(e.to_string()))?;
    let redraws: Vec<State> = (0..expert.fading_samples)
        .map(|_| {
            let mut parts = scenario.geometry().sample_parts(rng);
            parts.direct_ul = state.parts.direct_ul.clone();
            parts.direct_dl = state.parts.direct_dl.clone();
            State {
                parts,
                ..state.clone()
            }
        })
        .collect();
    let mut best: Option<(Vec<f64>, Decision, f64, f64)> = None;
    for i in 0..s {
        let raw = match incumbent {
            Some(inc) if i == 0 => inc.to_vec(),
            Some(inc) if i <= s / 2 => inc.iter().map(|x| x + noise.sample(rng)).collect(),
            _ => random_raw_action(cfg, rng),
        };
        let decision = decode_action(&raw, cfg)?;
        let r = scenario.evaluate(state, &decision)?.reward;
        let mut score = r;
        for alt in &redraws {
            score += scenario.evaluate(alt, &decision)?.reward;
        }
        if best.as_ref().is_none_or(|b| score > b.3) {
            best = Some((raw, decision, r, score));
        }
    }
    let (raw, decision, r, _) = best.expect("at least one candidate");
    Ok((raw, decision, r))
}

/// Episode-level wrapper around [`expert_action`].
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub expert: ExpertConfig,
    rng: ChaCha8Rng,
    incumbent: Option<Vec<f64>>,
}

impl ExpertPolicy {
    pub fn new(expert: ExpertConfig) -> Self {
        Self {
            expert,
            rng: ChaCha8Rng::seed_from_u64(0),
            incumbent: None,
        }
    }
}

impl Policy for ExpertPolicy {
    fn name(&self) -> String {
        format!("expert-s{}", self.expert.candidates)
    }

    fn begin(&mut self, _scenario: &Scenario, seed: u64) -> Result<(), EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, EXPERT_STREAM));
        self.incumbent = None;
        Ok(())
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Vec<f64>, EnvError> {
        let incumbent = if self.expert.warm_start { self.incumbent.as_deref() } else { None };
        let (raw, _, _) = expert_action(input.state, input.scenario, &self.expert, incumbent, &mut self.rng)?;
        self.incumbent = Some(raw.clone());
        Ok(raw)
    }
}

/// Episodes of one training scene split into disjoint pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub scene: SceneSpec,
    /// `𝒟_⋆`, prompt source.
    pub prompt_pool: Vec<Episode>,
    /// `𝒟_⋄`, trajectory source.
    pub trajectory_pool: Vec<Episode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cfg: SystemConfig,
    pub scenes: Vec<SceneData>,
    pub seed: u64,
    pub expert: ExpertConfig,
    pub prompt_fraction: f64,
}

impl Dataset {
    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.scenes
            .iter()
            .flat_map(|s| s.prompt_pool.iter().chain(&s.trajectory_pool))
    }
}

/// Seed of episode `index` of `scene_id` under a master seed.
pub fn episode_seed(master: u64, scene_id: u32, index: usize) -> u64 {
    mix_seed(master, ((scene_id as u64) << 32) | index as u64)
}

/// Number of episodes routed to the prompt pool; both pools are non-empty
/// whenever there are at least two episodes.
pub fn prompt_pool_size(episodes: usize, fraction: f64) -> usize {
    if episodes < 2 {
        return episodes;
    }
    ((episodes as f64 * fraction).round() as usize).clamp(1, episodes - 1)
}

/// Expert rollouts for every scene; the first `round(fraction·n)` episodes
/// of a scene form its prompt pool.
pub fn generate_dataset(
    scenes: &[SceneSpec],
    cfg: &SystemConfig,
    episodes_per_scene: usize,
    expert: &ExpertConfig,
    seed: u64,
    prompt_fraction: f64,
) -> Result<Dataset, EnvError> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let scenario = Scenario::new(scene.clone(), cfg.clone())?;
        let mut policy = ExpertPolicy::new(expert.clone());
        let episodes = (0..episodes_per_scene)
            .map(|i| rollout(&mut policy, &scenario, episode_seed(seed, scene.scene_id, i)))
            .collect::<Result<Vec<_>, _>>()?;
        let k = prompt_pool_size(episodes.len(), prompt_fraction);
        let mut episodes = episodes;
        let trajectory_pool = episodes.split_off(k);
        out.push(SceneData {
            scene: scene.clone(),
            prompt_pool: episodes,
            trajectory_pool,
        });
    }
    Ok(Dataset {
        cfg: cfg.clone(),
        scenes: out,
        seed,
        expert: expert.clone(),
        prompt_fraction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub scene_id: u32,
    pub file: String,
    pub prompt_episodes: Vec<usize>,
    pub trajectory_episodes: Vec<usize>,
}

/// `manifest.json` of an on-disk dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub prompt_fraction: f64,
    pub expert: ExpertConfig,
    pub config: ConfigFile,
    pub scenes: Vec<ManifestScene>,
}

/// Writes `manifest.json` and one `scene_<id>.jsonl` per scene (prompt-pool
/// episodes first).
pub fn save_dataset(dataset: &Dataset, dir: &Path, config_hash: &str) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in &dataset.scenes {
        let file = format!("scene_{}.jsonl", s.scene.scene_id);
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        for ep in s.prompt_pool.iter().chain(&s.trajectory_pool) {
            ep.write_jsonl(&mut w)?;
        }
        let np = s.prompt_pool.len();
        entries.push(ManifestScene {
            scene_id: s.scene.scene_id,
            file,
            prompt_episodes: (0..np).collect(),
            trajectory_episodes: (np..np + s.trajectory_pool.len()).collect(),
        });
    }
    let manifest = Manifest {
        seed: dataset.seed,
        config_hash: config_hash.to_owned(),
        prompt_fraction: dataset.prompt_fraction,
        expert: dataset.expert.clone(),
        config: ConfigFile {
            system: SystemFile::from_config(&dataset.cfg),
            scenes: dataset.scenes.iter().map(|s| SceneFile::from_scene(&s.scene)).collect(),
        },
        scenes: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    fs::write(dir.join("manifest.json"), text + "\n")
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest), ModelError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let bad = |e: crate::error::ConfigError| ModelError::Checkpoint(e.to_string());
    let cfg = manifest.config.system.resolve().map_err(bad)?;
    let mut scenes = Vec::new();
    for (entry, scene_file) in manifest.scenes.iter().zip(&manifest.config.scenes) {
        let scene = scene_file.resolve().map_err(bad)?;
        let episodes = Episode::read_jsonl(BufReader::new(fs::File::open(dir.join(&entry.file))?))?;
        let pick = |ids: &[usize]| -> Result<Vec<Episode>, ModelError> {
            ids.iter()
                .map(|&i| {
                    episodes
                        .get(i)
                        .cloned()
                        .ok_or_else(|| ModelError::Checkpoint(format!("{} has no episode {i}", entry.file)))
                })
                .collect()
        };
        scenes.push(SceneData {
            prompt_pool: pick(&entry.prompt_episodes)?,
            trajectory_pool: pick(&entry.trajectory_episodes)?,
            scene,
        });
    }
    Ok((
        Dataset {
            cfg,
            scenes,
            seed: manifest.seed,
            expert: manifest.expert.clone(),
            prompt_fraction: manifest.prompt_fraction,
        },
        manifest,
    ))
}

/// Normalizer fitted to every state of the dataset; RTGs are divided by the
/// largest initial RTG.
pub fn fit_normalizer(dataset: &Dataset) -> Normalizer {
    let scale = dataset
        .episodes()
        .filter_map(|e| e.records.first())
        .map(|r| r.rtg.abs())
        .fold(0.0, f64::max);
    Normalizer::fit(dataset.episodes().flat_map(|e| e.records.iter().map(|r| &r.state[..])), scale)
}

fn to_tuple(n: &Normalizer, r: &SlotRecord) -> Tuple {
    n.tuple(r.rtg, &r.state, &r.decision)
}

/// Left-padding tuple; never embedded.
fn pad_tuple(state_dim: usize, action_dim: usize) -> Tuple {
    Tuple {
        rtg: 0.0,
        state: vec![0.0; state_dim],
        decision: vec![0.0; action_dim],
    }
}

/// Window of length `L` ending at slot `t_g` (1-based), left-padded.
pub fn window(episode: &Episode, t_g: usize, context_len: usize, normalizer: &Normalizer) -> (Vec<Tuple>, Vec<bool>, Array2<f64>) {
    let first = t_g.saturating_sub(context_len);
    let slice = &episode.records[first..t_g];
    let pad = context_len - slice.len();
    let (sd, ad) = (slice[0].state.len(), slice[0].decision.len());
    let mut tuples: Vec<Tuple> = (0..pad).map(|_| pad_tuple(sd, ad)).collect();
    tuples.extend(slice.iter().map(|r| to_tuple(normalizer, r)));
    let mut valid = vec![false; pad];
    valid.extend(std::iter::repeat_n(true, slice.len()));
    let target = Array2::from_shape_fn((slice.len(), ad), |(i, j)| slice[i].decision[j]);
    (tuples, valid, target)
}

/// `T⋆ + 1` consecutive tuples starting at record index `start`.
pub fn prompt_slice(episode: &Episode, start: usize, tuples: usize, normalizer: &Normalizer) -> Vec<Tuple> {
    episode.records[start..start + tuples].iter().map(|r| to_tuple(normalizer, r)).collect()
}

/// `G` inputs from one scene: each pairs a random prompt slice from the
/// prompt pool with a window ending at a uniformly drawn slot of a random
/// trajectory-pool episode.
pub fn sample_minibatch<R: Rng + ?Sized>(
    data: &SceneData,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    with_prompt: bool,
    rng: &mut R,
) -> Result<Vec<(ModelInput, Array2<f64>)>, ModelError> {
    let id = data.scene.scene_id;
    if data.trajectory_pool.is_empty() || (with_prompt && data.prompt_pool.is_empty()) {
        return Err(ModelError::EmptyPool(id));
    }
    let tuples = cfg.prompt_len + 1;
    (0..cfg.minibatch)
        .map(|_| {
            let prompt = if with_prompt {
                let ep = &data.prompt_pool[rng.random_range(0..data.prompt_pool.len())];
                if ep.len() < tuples {
                    return Err(ModelError::Shape(format!(
                        "prompt episode of scene {id} has {} slots, need {tuples}",
                        ep.len()
                    )));
                }
                let start = rng.random_range(0..=ep.len() - tuples);
                prompt_slice(ep, start, tuples, normalizer)
            } else {
                Vec::new()
            };
            let ep = &data.trajectory_pool[rng.random_range(0..data.trajectory_pool.len())];
            let t_g = rng.random_range(1..=ep.len());
            let (recent, valid, target) = window(ep, t_g, cfg.context_len, normalizer);
            Ok((ModelInput { prompt, recent, valid }, target))
        })
        .collect()
}

/// Fresh model sized for the dataset.
pub fn new_model(dataset: &Dataset, cfg: &TrainConfig, with_prompt: bool) -> Result<DecisionModel, ModelError> {
    cfg.validate()?;
    let dims = cfg.dims(dataset.cfg.state_dim(), dataset.cfg.action_dim(), with_prompt);
    Ok(DecisionModel {
        params: init_params(dims, cfg.seed)?,
        normalizer: fit_normalizer(dataset),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for p in &self.points {
            if out.len() <= p.epoch {
                out.resize(p.epoch + 1, (0.0, 0));
            }
            out[p.epoch].0 += p.loss;
            out[p.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Offline training: each epoch draws one minibatch per scene (in shuffled
/// scene order) and takes one Adam step per minibatch. `on_epoch` runs after
/// every epoch.
pub fn train_with(
    model: &mut DecisionModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &DecisionModel) -> Result<(), ModelError>,
) -> Result<LossCurve, ModelError> {
    cfg.validate()?;
    let with_prompt = model.uses_prompt();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5452_4149));
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..dataset.scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let batch = sample_minibatch(&dataset.scenes[i], &model.normalizer, cfg, with_prompt, &mut rng)?;
            let (loss, grads) = batch_loss_and_grad(&model.params, &batch)?;
            if !loss.is_finite() || grads.values.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss {
                    loss,
                    step: model.params.step,
                });
            }
            adam_step(&mut model.params, &grads, cfg.learning_rate)?;
            curve.points.push(LossPoint {
                epoch,
                step: model.params.step,
                loss,
            });
        }
        on_epoch(epoch, model)?;
    }
    Ok(curve)
}

pub fn train(model: &mut DecisionModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<LossCurve, ModelError> {
    train_with(model, dataset, cfg, &mut |_, _| Ok(()))
}

/// DF-WP: the same architecture and training without prompt tuples.
pub fn baseline_dfwp(dataset: &Dataset, cfg: &TrainConfig) -> Result<(DecisionModel, LossCurve), ModelError> {
    let mut model = new_model(dataset, cfg, false)?;
    let curve = train(&mut model, dataset, cfg)?;
    Ok((model, curve))
}

/// Online execution of a trained model. With a prompt, the first RTG is
/// `R̂` minus the prompt's reward sum.
#[derive(Clone, Debug)]
pub struct ModelPolicy {
    pub label: String,
    pub model: DecisionModel,
    /// Raw prompt records, `T⋆ + 1` of them.
    pub prompt: Vec<SlotRecord>,
}

impl ModelPolicy {
    pub fn new(label: &str, model: DecisionModel, prompt: Vec<SlotRecord>) -> Self {
        Self {
            label: label.into(),
            model,
            prompt,
        }
    }
}

impl Policy for ModelPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn initial_rtg(&self, scenario: &Scenario) -> f64 {
        scenario.rtg_init() - self.prompt.iter().map(|r| r.reward).sum::<f64>()
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Vec<f64>, EnvError> {
        let n = &self.model.normalizer;
        let dims = self.model.params.dims;
        let prompt: Vec<Tuple> = self.prompt.iter().map(|r| to_tuple(n, r)).collect();
        let keep = dims.context_len - 1;
        let past = &input.history[input.history.len().saturating_sub(keep)..];
        let mut recent: Vec<Tuple> = past.iter().map(|r| to_tuple(n, r)).collect();
        recent.push(n.tuple(input.rtg, &input.state.features(), &vec![0.0; dims.action_dim]));
        let pred = forward(&self.model.params, &ModelInput::unpadded(prompt, recent))
            .map_err(|e| EnvError::Policy(e.to_string()))?;
        Ok(pred.row(pred.nrows() - 1).to_vec())
    }
}

/// Prompt for a scene: the last `T⋆ + 1` slots of one expert rollout.
pub fn acquire_prompt(
    scenario: &Scenario,
    expert: &ExpertConfig,
    prompt_len: usize,
    seed: u64,
) -> Result<Vec<SlotRecord>, ModelError> {
    let tuples = prompt_len + 1;
    if scenario.horizon() < tuples {
        return Err(ModelError::MissingPrompt(scenario.scene.scene_id));
    }
    let mut policy = ExpertPolicy::new(expert.clone());
    let ep = rollout(&mut policy, scenario, mix_seed(seed, PROMPT_STREAM))?;
    Ok(ep.records[ep.len() - tuples..].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub total_qoe: f64,
    pub total_return: f64,
    pub violation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub policy: String,
    pub scene_id: u32,
    pub mean_total_qoe: f64,
    pub std_total_qoe: f64,
    pub mean_return: f64,
    pub violation_rate: f64,
    /// Mean per-slot QoE sum across seeds.
    pub qoe_trace: Vec<f64>,
    pub per_seed: Vec<SeedMetrics>,
}

/// Seeds of the evaluation episodes.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| mix_seed(base, 0x4556_0000 + i)).collect()
}

/// Rolls the policy out once per seed and aggregates `Σ_t Σ_k QoE`.
pub fn evaluate(policy: &mut dyn Policy, scenario: &Scenario, seeds: &[u64]) -> Result<EvalMetrics, EnvError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut trace = vec![0.0; scenario.horizon()];
    for &seed in seeds {
        let ep = rollout(policy, scenario, seed)?;
        for (acc, q) in trace.iter_mut().zip(ep.qoe_trace()) {
            *acc += q;
        }
        per_seed.push(SeedMetrics {
            seed,
            total_qoe: ep.total_qoe(),
            total_return: ep.total_return,
            violation_rate: ep.violation_rate(),
        });
    }
    let n = seeds.len().max(1) as f64;
    let mean = per_seed.iter().map(|m| m.total_qoe).sum::<f64>() / n;
    let var = per_seed.iter().map(|m| (m.total_qoe - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalMetrics {
        policy: policy.name(),
        scene_id: scenario.scene.scene_id,
        mean_total_qoe: mean,
        std_total_qoe: var.sqrt(),
        mean_return: per_seed.iter().map(|m| m.total_return).sum::<f64>() / n,
        violation_rate: per_seed.iter().map(|m| m.violation_rate).sum::<f64>() / n,
        qoe_trace: trace.into_iter().map(|x| x / n).collect(),
        per_seed,
    })
}

/// Settings of the rigid baseline search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomConfig {
    pub candidates: usize,
    pub episodes: usize,
}

impl Default for RomConfig {
    fn default() -> Self {
        Self {
            candidates: 256,
            episodes: 4,
        }
    }
}

/// ROM: the single raw action with the best mean return over episodes of
/// one training scene, replayed open-loop on every scene.
pub fn baseline_rom(scenario: &Scenario, rom: &RomConfig, seed: u64) -> Result<FixedPolicy, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ROM_STREAM));
    let seeds: Vec<u64> = (0..rom.episodes).map(|i| episode_seed(seed, scenario.scene.scene_id, i)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..rom.candidates.max(1) {
        let raw = random_raw_action(&scenario.cfg, &mut rng);
        let mut policy = FixedPolicy {
            label: "rom".into(),
            raw: raw.clone(),
        };
        let mut total = 0.0;
        for &s in &seeds {
            total += rollout(&mut policy, scenario, s)?.total_return;
        }
        let mean = total / seeds.len().max(1) as f64;
        if best.as_ref().is_none_or(|b| mean > b.0) {
            best = Some((mean, raw));
        }
    }
    Ok(FixedPolicy {
        label: "rom".into(),
        raw: best.expect("at least one candidate").1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SceneSampler;
    use crate::env::RandomPolicy;

    fn scenes(n: u32, horizon: usize) -> (SystemConfig, Vec<SceneSpec>) {
        let cfg = SystemConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sampler = SceneSampler {
            horizon,
            ..SceneSampler::default()
        };
        let s = (0..n).map(|i| SceneSpec::random(i, &cfg, &sampler, &mut rng)).collect();
        (cfg, s)
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            embed_dim: 16,
            heads: 2,
            layers: 1,
            context_len: 4,
            prompt_len: 2,
            minibatch: 4,
            learning_rate: 1e-3,
            epochs: 2,
            seed: 3,
        }
    }

    #[test]
    fn expert_single_candidate_is_random_draw() {
        let (cfg, s) = scenes(1, 5);
        let sc = Scenario::new(s[0].clone(), cfg.clone()).unwrap();
        let (state, _) = sc.reset(1).unwrap();
        let one = ExpertConfig {
            candidates: 1,
            fading_samples: 0,
            ..ExpertConfig::default()
        };
        let (raw, _, _) = expert_action(&state, &sc, &one, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(raw, random_raw_action(&cfg, &mut ChaCha8Rng::seed_from_u64(4)));
        let a = expert_action(&state, &sc, &ExpertConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = expert_action(&state, &sc, &ExpertConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn search_beats_single_draw() {
        let (cfg, s) = scenes(5, 100);
        let mut one = 0.0;
        let mut many = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = ExpertConfig {
            candidates: 1,
            ..ExpertConfig::default()
        };
        let s32 = ExpertConfig::default();
        for scene in &s {
            let sc = Scenario::new(scene.clone(), cfg.clone()).unwrap();
            let (mut state, mut erng) = sc.reset(9).unwrap();
            for _ in 0..100 {
                one += expert_action(&state, &sc, &s1, None, &mut rng).unwrap().2;
                let (_, d, r) = expert_action(&state, &sc, &s32, None, &mut rng).unwrap();
                many += r;
                state = sc.step(&state, &d, &mut erng).unwrap().next;
            }
        }
        assert!(many >= one, "{many} < {one}");
    }

    #[test]
    fn dataset_pools_and_disk_roundtrip() {
        let (cfg, s) = scenes(2, 6);
        let ds = generate_dataset(&s, &cfg, 5, &ExpertConfig::default(), 11, PROMPT_FRACTION).unwrap();
        for sd in &ds.scenes {
            assert_eq!(sd.prompt_pool.len() + sd.trajectory_pool.len(), 5);
            assert_eq!(sd.prompt_pool.len(), 1);
            for ep in sd.prompt_pool.iter().chain(&sd.trajectory_pool) {
                assert_eq!(ep.scene_id, sd.scene.scene_id);
            }
            for p in &sd.prompt_pool {
                assert!(!sd.trajectory_pool.contains(p));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), "h").unwrap();
        let (back, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.config_hash, "h");
        assert_eq!(back.scenes, ds.scenes);
        assert_eq!(back.cfg, ds.cfg);
        let again = generate_dataset(&s, &cfg, 5, &ExpertConfig::default(), 11, PROMPT_FRACTION).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn windows_and_padding() {
        let (cfg, s) = scenes(1, 6);
        let ds = generate_dataset(&s, &cfg, 2, &ExpertConfig::default(), 1, PROMPT_FRACTION).unwrap();
        let ep = &ds.scenes[0].trajectory_pool[0];
        let n = Normalizer::identity(cfg.state_dim());
        let (t, v, target) = window(ep, 4, 4, &n);
        assert_eq!((t.len(), v.iter().filter(|x| **x).count(), target.nrows()), (4, 4, 4));
        let (t, v, target) = window(ep, 1, 4, &n);
        assert_eq!(t.len(), 4);
        assert_eq!(v, vec![false, false, false, true]);
        assert_eq!(target.nrows(), 1);
        assert_eq!(target.row(0).to_vec(), ep.records[0].decision);
    }

    #[test]
    fn minibatch_shapes_and_errors() {
        let (cfg, s) = scenes(1, 6);
        let ds = generate_dataset(&s, &cfg, 5, &ExpertConfig::default(), 2, PROMPT_FRACTION).unwrap();
        let tc = small_train();
        let n = fit_normalizer(&ds);
        let mb = sample_minibatch(&ds.scenes[0], &n, &tc, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(mb.len(), tc.minibatch);
        for (input, target) in &mb {
            assert_eq!(input.prompt.len(), tc.prompt_len + 1);
            assert_eq!(input.recent.len(), tc.context_len);
            assert_eq!(target.nrows(), input.num_valid());
        }
        let mut empty = ds.scenes[0].clone();
        empty.prompt_pool.clear();
        assert!(matches!(
            sample_minibatch(&empty, &n, &tc, true, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(ModelError::EmptyPool(0))
        ));
        assert!(sample_minibatch(&empty, &n, &tc, false, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn training_is_reproducible_and_finite() {
        let (cfg, s) = scenes(2, 6);
        let ds = generate_dataset(&s, &cfg, 4, &ExpertConfig::default(), 2, PROMPT_FRACTION).unwrap();
        let tc = small_train();
        let mut a = new_model(&ds, &tc, true).unwrap();
        let ca = train(&mut a, &ds, &tc).unwrap();
        let mut b = new_model(&ds, &tc, true).unwrap();
        let cb = train(&mut b, &ds, &tc).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert_eq!(ca.points.len(), tc.epochs * 2);
        assert!(ca.points.iter().all(|p| p.loss.is_finite()));
        assert_eq!(ca.epoch_means().len(), tc.epochs);

        let (dfwp, _) = baseline_dfwp(&ds, &tc).unwrap();
        assert!(!dfwp.uses_prompt());
    }

    #[test]
    fn model_policy_and_evaluation() {
        let (cfg, s) = scenes(2, 6);
        let ds = generate_dataset(&s, &cfg, 4, &ExpertConfig::default(), 2, PROMPT_FRACTION).unwrap();
        let tc = small_train();
        let model = new_model(&ds, &tc, true).unwrap();
        let sc = Scenario::new(s[1].clone(), cfg.clone()).unwrap();
        let prompt = acquire_prompt(&sc, &ds.expert, tc.prompt_len, 5).unwrap();
        assert_eq!(prompt.len(), tc.prompt_len + 1);
        let mut pol = ModelPolicy::new("pg-zfo", model, prompt.clone());
        let seeds = eval_seeds(1, 2);
        let m1 = evaluate(&mut pol, &sc, &seeds).unwrap();
        let m2 = evaluate(&mut pol, &sc, &seeds).unwrap();
        assert_eq!(m1, m2);
        let ep = rollout(&mut pol, &sc, seeds[0]).unwrap();
        assert_eq!(m1.per_seed[0].total_qoe, ep.total_qoe());
        let expect_rtg = sc.rtg_init() - prompt.iter().map(|r| r.reward).sum::<f64>();
        assert_eq!(ep.records[0].rtg, expect_rtg);
    }

    #[test]
    fn rom_is_fixed_and_not_worse_than_random() {
        let (cfg, s) = scenes(1, 5);
        let sc = Scenario::new(s[0].clone(), cfg).unwrap();
        let rom_cfg = RomConfig {
            candidates: 32,
            episodes: 2,
        };
        let mut rom = baseline_rom(&sc, &rom_cfg, 3).unwrap();
        assert_eq!(rom.raw, baseline_rom(&sc, &rom_cfg, 3).unwrap().raw);
        let seeds: Vec<u64> = (0..2).map(|i| episode_seed(3, 0, i)).collect();
        let rom_m = evaluate(&mut rom, &sc, &seeds).unwrap();
        let rnd = evaluate(&mut RandomPolicy::new(1), &sc, &seeds).unwrap();
        assert!(rom_m.mean_return >= rnd.mean_return);
    }
}
