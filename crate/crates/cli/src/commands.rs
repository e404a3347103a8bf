//! Command implementations. Every artifact is a pure function of the plan
//! and the configuration file, so reruns reproduce it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use risdt_core::config::{
    dbm_to_watts, load_config, render_config, SceneSampler, SceneSpec, SystemConfig,
};
use risdt_core::env::{mix_seed, Policy, RandomPolicy, Scenario};
use risdt_core::training::{
    acquire_prompt, baseline_rom, eval_seeds, evaluate, generate_dataset, load_dataset, new_model,
    save_dataset, train_with, Dataset, EvalMetrics, ExpertConfig, ExpertPolicy, ModelPolicy, RomConfig,
    PROMPT_FRACTION,
};
use risdt_core::transformer::{load_checkpoint, save_checkpoint, DecisionModel, TrainConfig};
use sha2::{Digest, Sha256};

use crate::summary::{
    emit_summary, mean_std, write_csv, CheckpointRow, LossRow, MetricRow, SweepRow, CHECKPOINT_HEADER,
    LOSS_HEADER, METRIC_HEADER, SWEEP_HEADER,
};
use crate::{CliError, Command, ExperimentPlan, PolicyName};

const SCENE_STREAM: u64 = 0x5343_454e;
const EVAL_STREAM: u64 = 0x4556_414c;
const CHECKPOINT_STREAM: u64 = 0x434b_5054;

/// SHA-256 of the canonical rendering of the resolved configuration.
pub fn config_hash(cfg: &SystemConfig, scenes: &[SceneSpec]) -> String {
    hex::encode(Sha256::digest(render_config(cfg, scenes).as_bytes()))
}

/// Resolved configuration shared by all commands.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: SystemConfig,
    pub scenes: Vec<SceneSpec>,
    pub held_out: Vec<u32>,
    pub config_hash: String,
    pub train: TrainConfig,
    pub expert: ExpertConfig,
}

impl Context {
    pub fn load(plan: &ExperimentPlan) -> Result<Self, CliError> {
        let (cfg, mut scenes) = match &plan.config {
            Some(p) => load_config(p)?,
            None => (SystemConfig::desk(), Vec::new()),
        };
        if scenes.is_empty() {
            if plan.num_scenes < 2 {
                return Err(CliError::Usage("--num-scenes must be at least 2".into()));
            }
            scenes = SceneSpec::sample_many(
                plan.num_scenes,
                &cfg,
                &SceneSampler::default(),
                mix_seed(plan.seed, SCENE_STREAM),
            );
        }
        let ids: Vec<u32> = scenes.iter().map(|s| s.scene_id).collect();
        let held_out = if plan.held_out.is_empty() {
            let n = ids.len().saturating_sub(1).min(3);
            ids[ids.len() - n..].to_vec()
        } else {
            if let Some(bad) = plan.held_out.iter().find(|id| !ids.contains(id)) {
                return Err(CliError::Usage(format!("--scenes: no scene with id {bad}")));
            }
            plan.held_out.clone()
        };
        if ids.iter().all(|id| held_out.contains(id)) {
            return Err(CliError::Usage("at least one training scene must remain".into()));
        }
        let config_hash = config_hash(&cfg, &scenes);
        let train = TrainConfig {
            epochs: plan.epochs.unwrap_or(TrainConfig::desk().epochs),
            seed: plan.seed,
            ..TrainConfig::desk()
        };
        let expert = ExpertConfig {
            candidates: plan.candidates,
            ..ExpertConfig::default()
        };
        Ok(Self {
            cfg,
            scenes,
            held_out,
            config_hash,
            train,
            expert,
        })
    }

    pub fn training_scenes(&self) -> Vec<SceneSpec> {
        self.scenes.iter().filter(|s| !self.held_out.contains(&s.scene_id)).cloned().collect()
    }

    pub fn held_out_scenes(&self) -> Vec<SceneSpec> {
        self.held_out
            .iter()
            .filter_map(|id| self.scenes.iter().find(|s| s.scene_id == *id))
            .cloned()
            .collect()
    }
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

pub fn model_stem(out: &Path, policy: PolicyName) -> PathBuf {
    out.join("models").join(policy.as_str())
}

/// Runs one command and returns the files it wrote.
pub fn run(plan: &ExperimentPlan) -> Result<Vec<PathBuf>, CliError> {
    if plan.command == Command::Summary {
        return summary(plan);
    }
    let ctx = Context::load(plan)?;
    fs::create_dir_all(&plan.out).map_err(|e| CliError::io(&plan.out, e))?;
    match plan.command {
        Command::GenData => gen_data(plan, &ctx),
        Command::Train => train(plan, &ctx),
        Command::Eval => eval(plan, &ctx),
        Command::Compare => compare(plan, &ctx),
        Command::SweepPower => sweep_power(plan, &ctx),
        Command::Summary => unreachable!("handled above"),
    }
}

fn gen_data(plan: &ExperimentPlan, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let ds = generate_dataset(
        &ctx.training_scenes(),
        &ctx.cfg,
        plan.episodes,
        &ctx.expert,
        plan.seed,
        PROMPT_FRACTION,
    )?;
    let dir = dataset_dir(&plan.out);
    save_dataset(&ds, &dir, &ctx.config_hash).map_err(|e| CliError::io(&dir, e))?;
    let mut files = vec![dir.join("manifest.json")];
    files.extend(ds.scenes.iter().map(|s| dir.join(format!("scene_{}.jsonl", s.scene.scene_id))));
    Ok(files)
}

fn load_checked_dataset(plan: &ExperimentPlan, ctx: &Context) -> Result<Dataset, CliError> {
    let dir = dataset_dir(&plan.out);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Runtime(format!("no dataset at {}; run gen-data first", dir.display())));
    }
    let (ds, manifest) = load_dataset(&dir)?;
    if manifest.config_hash != ctx.config_hash {
        return Err(CliError::Usage(format!(
            "dataset was generated under config {}, current config is {}",
            manifest.config_hash, ctx.config_hash
        )));
    }
    Ok(ds)
}

/// Prompt seed of a held-out scene.
fn prompt_seed(plan: &ExperimentPlan, scene_id: u32) -> u64 {
    mix_seed(plan.seed, scene_id as u64)
}

fn train(plan: &ExperimentPlan, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_checked_dataset(plan, ctx)?;
    let held: Vec<Scenario> = ctx
        .held_out_scenes()
        .into_iter()
        .map(|s| Scenario::new(s, ctx.cfg.clone()))
        .collect::<Result<_, _>>()?;
    let seeds = eval_seeds(mix_seed(plan.seed, CHECKPOINT_STREAM), plan.checkpoint_seeds);
    let epochs = ctx.train.epochs;
    let marks: Vec<usize> = (1..=plan.checkpoints)
        .map(|j| ((j * epochs) as f64 / plan.checkpoints as f64).round() as usize)
        .collect();
    fs::create_dir_all(plan.out.join("models")).map_err(|e| CliError::io(plan.out.join("models"), e))?;
    let mut files = Vec::new();
    for &policy in &plan.policies {
        let with_prompt = policy == PolicyName::PgZfo;
        let prompts = held
            .iter()
            .map(|sc| {
                if with_prompt {
                    acquire_prompt(sc, &ctx.expert, ctx.train.prompt_len, prompt_seed(plan, sc.scene.scene_id))
                } else {
                    Ok(Vec::new())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let checkpoint = |epoch: usize, m: &DecisionModel| -> Result<CheckpointRow, CliError> {
            let (mut r, mut q, mut v) = (0.0, 0.0, 0.0);
            for (sc, prompt) in held.iter().zip(&prompts) {
                let mut pol = ModelPolicy::new(policy.as_str(), m.clone(), prompt.clone());
                let e = evaluate(&mut pol, sc, &seeds)?;
                r += e.mean_return;
                q += e.mean_total_qoe;
                v += e.violation_rate;
            }
            let n = held.len().max(1) as f64;
            Ok(CheckpointRow {
                policy_name: policy.as_str().into(),
                epoch,
                step: m.params.step,
                mean_return: r / n,
                mean_total_qoe: q / n,
                violation_rate: v / n,
                config_hash: ctx.config_hash.clone(),
            })
        };
        let mut model = new_model(&ds, &ctx.train, with_prompt)?;
        let mut rows = Vec::new();
        if plan.checkpoints > 0 {
            rows.push(checkpoint(0, &model)?);
        }
        let mut failure = None;
        let curve = train_with(&mut model, &ds, &ctx.train, &mut |e, m| {
            if marks.contains(&(e + 1)) {
                match checkpoint(e + 1, m) {
                    Ok(row) => rows.push(row),
                    Err(err) => {
                        let msg = err.to_string();
                        failure = Some(err);
                        return Err(risdt_core::error::ModelError::Checkpoint(msg));
                    }
                }
            }
            Ok(())
        });
        if let Some(err) = failure {
            return Err(err);
        }
        let curve = curve?;
        let loss: Vec<LossRow> = curve
            .points
            .iter()
            .map(|p| LossRow {
                policy_name: policy.as_str().into(),
                epoch: p.epoch + 1,
                step: p.step,
                loss: p.loss,
                config_hash: ctx.config_hash.clone(),
            })
            .collect();
        let loss_path = plan.out.join(format!("loss_{policy}.csv"));
        write_csv(&loss_path, &loss, &LOSS_HEADER)?;
        files.push(loss_path);
        if plan.checkpoints > 0 {
            let p = plan.out.join(format!("checkpoints_{policy}.csv"));
            write_csv(&p, &rows, &CHECKPOINT_HEADER)?;
            files.push(p);
        }
        let tags = BTreeMap::from([
            ("config_hash".to_string(), ctx.config_hash.clone()),
            ("policy".to_string(), policy.as_str().to_string()),
            (
                "expert".to_string(),
                serde_json::to_string(&ds.expert).map_err(|e| CliError::Runtime(e.to_string()))?,
            ),
            (
                "train".to_string(),
                serde_json::to_string(&ctx.train).map_err(|e| CliError::Runtime(e.to_string()))?,
            ),
        ]);
        let stem = model_stem(&plan.out, policy);
        save_checkpoint(&model, &tags, &stem)?;
        files.push(stem.with_extension("json"));
        files.push(stem.with_extension("bin"));
    }
    Ok(files)
}

struct LoadedModel {
    model: DecisionModel,
    expert: ExpertConfig,
}

/// Builds policies for evaluation; checkpoints are loaded once.
struct PolicyFactory<'a> {
    plan: &'a ExperimentPlan,
    ctx: &'a Context,
    models: BTreeMap<PolicyName, LoadedModel>,
}

impl<'a> PolicyFactory<'a> {
    fn new(plan: &'a ExperimentPlan, ctx: &'a Context, policies: &[PolicyName]) -> Result<Self, CliError> {
        let mut models = BTreeMap::new();
        for &p in policies.iter().filter(|p| p.is_learned()) {
            let stem = model_stem(&plan.out, p);
            if !stem.with_extension("json").exists() {
                return Err(CliError::Runtime(format!(
                    "no {p} checkpoint at {}; run train first",
                    stem.display()
                )));
            }
            let (model, tags) = load_checkpoint(&stem)?;
            if tags.get("config_hash") != Some(&ctx.config_hash) {
                return Err(CliError::Usage(format!("{p} checkpoint was trained under a different config")));
            }
            let expert = match tags.get("expert") {
                Some(s) => serde_json::from_str(s).map_err(|e| CliError::Malformed {
                    path: stem.with_extension("json"),
                    message: e.to_string(),
                })?,
                None => ctx.expert.clone(),
            };
            models.insert(p, LoadedModel { model, expert });
        }
        Ok(Self { plan, ctx, models })
    }

    /// ROM is tailored to the first training scene under `cfg`.
    fn rom(&self, cfg: &SystemConfig) -> Result<Box<dyn Policy>, CliError> {
        let scene = self.ctx.training_scenes().remove(0);
        let sc = Scenario::new(scene, cfg.clone())?;
        Ok(Box::new(baseline_rom(&sc, &RomConfig::default(), self.plan.seed)?))
    }

    fn build(&self, name: PolicyName, scenario: &Scenario) -> Result<Box<dyn Policy>, CliError> {
        Ok(match name {
            PolicyName::PgZfo | PolicyName::DfWp => {
                let m = &self.models[&name];
                let prompt = if m.model.uses_prompt() {
                    let tuples = m.model.params.dims.prompt_tuples;
                    acquire_prompt(scenario, &m.expert, tuples - 1, prompt_seed(self.plan, scenario.scene.scene_id))?
                } else {
                    Vec::new()
                };
                Box::new(ModelPolicy::new(name.as_str(), m.model.clone(), prompt))
            }
            PolicyName::Rom => self.rom(&scenario.cfg)?,
            PolicyName::Random => Box::new(RandomPolicy::new(self.plan.seed)),
            PolicyName::Expert => Box::new(ExpertPolicy::new(self.ctx.expert.clone())),
        })
    }
}

/// Evaluates every policy on every held-out scene under `cfg` with common
/// seeds.
fn evaluate_all(
    plan: &ExperimentPlan,
    ctx: &Context,
    cfg: &SystemConfig,
    policies: &[PolicyName],
    factory: &PolicyFactory<'_>,
) -> Result<Vec<(PolicyName, EvalMetrics)>, CliError> {
    let seeds = eval_seeds(mix_seed(plan.seed, EVAL_STREAM), plan.seeds);
    let mut out = Vec::new();
    for scene in ctx.held_out_scenes() {
        let sc = Scenario::new(scene, cfg.clone())?;
        for &p in policies {
            let mut policy = factory.build(p, &sc)?;
            let mut m = evaluate(policy.as_mut(), &sc, &seeds)?;
            m.policy = p.as_str().into();
            out.push((p, m));
        }
    }
    Ok(out)
}

fn metric_rows(results: &[(PolicyName, EvalMetrics)], hash: &str) -> Vec<MetricRow> {
    results
        .iter()
        .flat_map(|(p, m)| {
            m.per_seed.iter().map(move |s| MetricRow {
                scene_id: m.scene_id,
                seed: s.seed,
                total_qoe: s.total_qoe,
                violation_rate: s.violation_rate,
                policy_name: p.as_str().into(),
                total_return: s.total_return,
                config_hash: hash.into(),
            })
        })
        .collect()
}

fn eval(plan: &ExperimentPlan, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let factory = PolicyFactory::new(plan, ctx, &plan.policies)?;
    let mut files = Vec::new();
    for &p in &plan.policies {
        let results = evaluate_all(plan, ctx, &ctx.cfg, &[p], &factory)?;
        let path = plan.out.join(format!("metrics_{p}.csv"));
        write_csv(&path, &metric_rows(&results, &ctx.config_hash), &METRIC_HEADER)?;
        files.push(path);
    }
    Ok(files)
}

fn compare(plan: &ExperimentPlan, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let factory = PolicyFactory::new(plan, ctx, &plan.policies)?;
    let results = evaluate_all(plan, ctx, &ctx.cfg, &plan.policies, &factory)?;
    let path = plan.out.join("compare.csv");
    write_csv(&path, &metric_rows(&results, &ctx.config_hash), &METRIC_HEADER)?;
    Ok(vec![path])
}

fn sweep_power(plan: &ExperimentPlan, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let factory = PolicyFactory::new(plan, ctx, &plan.policies)?;
    let mut grid = plan.pmax_dbm.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut rows = Vec::new();
    for &dbm in &grid {
        let cfg = SystemConfig {
            max_transmit_power_w: dbm_to_watts(dbm),
            ..ctx.cfg.clone()
        };
        for (p, m) in evaluate_all(plan, ctx, &cfg, &plan.policies, &factory)? {
            let q: Vec<f64> = m.per_seed.iter().map(|s| s.total_qoe).collect();
            let (mean, std) = mean_std(&q);
            rows.push(SweepRow {
                pmax_dbm: dbm,
                scene_id: m.scene_id,
                policy_name: p.as_str().into(),
                runs: q.len(),
                mean_total_qoe: mean,
                std_total_qoe: std,
                mean_return: m.mean_return,
                violation_rate: m.violation_rate,
                config_hash: ctx.config_hash.clone(),
            });
        }
    }
    let path = plan.out.join("sweep.csv");
    write_csv(&path, &rows, &SWEEP_HEADER)?;
    Ok(vec![path])
}

fn summary(plan: &ExperimentPlan) -> Result<Vec<PathBuf>, CliError> {
    let inputs = if plan.inputs.is_empty() {
        let mut found: Vec<PathBuf> = match fs::read_dir(&plan.out) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    p.extension().is_some_and(|x| x == "csv") && !name.starts_with("fig")
                })
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(CliError::io(&plan.out, e)),
        };
        found.sort();
        found
    } else {
        plan.inputs.clone()
    };
    emit_summary(&inputs, &plan.out)?;
    Ok(["summary.json", "fig2_loss.csv", "fig3_qoe.csv", "fig4_pmax.csv"]
        .iter()
        .map(|f| plan.out.join(f))
        .collect())
}
