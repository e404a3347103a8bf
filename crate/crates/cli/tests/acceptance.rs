//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p risdt-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use risdt_cli::summary::{CheckpointRow, LossRow, MetricRow, SweepRow};
use risdt_cli::{run, Cli, ExperimentPlan};
use risdt_core::beamforming::{water_fill, zf_receive, zf_transmit, zf_transmit_unfloored, DownlinkDemand};
use risdt_core::channel::{distance, draw_cn, rician_channel, CMatrix, SceneGeometry, RICIAN_LOS_LIMIT};
use risdt_core::config::{SceneSampler, SceneSpec, SystemConfig};
use risdt_core::env::{decode_action, Scenario};
use risdt_core::qoe::{reward, LatencyBreakdown, QoeResult};
use risdt_core::transformer::{
    adam_step, batch_loss_and_grad, forward, init_params, mse_loss, ModelDims, ModelInput, ModelParams, Tuple,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- 1

fn zf_correctness() -> Verdict {
    let start = Instant::now();
    let mut cfg = SystemConfig::desk();
    cfg.num_antennas = 8;
    cfg.num_users = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rx, mut worst_tx) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let h_ul = draw_cn(8, 4, &mut rng);
        let v = match zf_receive(&h_ul) {
            Ok(v) => v,
            Err(e) => return Verdict::new(false, format!("receive failed: {e}")),
        };
        let eye = CMatrix::identity(4, 4);
        let err = (h_ul.adjoint() * &v - eye).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        worst_rx = worst_rx.max(err);

        let h_dl = draw_cn(8, 4, &mut rng);
        let res = [3.0, 2.0, 3.5, 1.5];
        let ul = [0.05, 0.1, 0.02, 0.08];
        let pro = [0.01, 0.02, 0.01, 0.03];
        let demand = DownlinkDemand {
            resolutions: &res,
            uplink_latency_s: &ul,
            processing_latency_s: &pro,
            latency_weights: &[1.0; 4],
        };
        let tx = match zf_transmit(&h_dl, &demand, &cfg).or_else(|_| zf_transmit_unfloored(&h_dl, &demand, &cfg)) {
            Ok(t) => t,
            Err(e) => return Verdict::new(false, format!("transmit failed: {e}")),
        };
        for k in 0..4 {
            for m in 0..4 {
                if k == m || tx.powers[m] <= 0.0 {
                    continue;
                }
                let leak = h_dl.column(k).dotc(&tx.precoder.column(m)).norm() / tx.powers[m].sqrt();
                worst_tx = worst_tx.max(leak);
            }
        }
    }
    let t = start.elapsed();
    Verdict::new(
        worst_rx < 1e-10 && worst_tx < 1e-10 && within(t, 10),
        format!("max |HᴴV−I| {worst_rx:.2e}, max leakage {worst_tx:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

/// Sweeps the water level over a uniform 10⁶-point grid and interpolates
/// between the two points that bracket the budget.
fn level_oracle(v: &[f64], s2: &[f64], pmin: &[f64], pmax: f64) -> Vec<f64> {
    let spend = |mu: f64| -> f64 { v.iter().zip(s2).zip(pmin).map(|((v, s), p)| (mu / v - s).max(*p) * v).sum() };
    let top = pmax + v.iter().zip(s2).map(|(v, s)| v * s).fold(0.0, f64::max);
    let n = 1_000_000;
    let mut lo = (0.0, spend(0.0));
    let mut mu = top;
    for i in 1..=n {
        let x = top * i as f64 / n as f64;
        let s = spend(x);
        if s >= pmax {
            mu = if s > lo.1 { lo.0 + (pmax - lo.1) * (x - lo.0) / (s - lo.1) } else { x };
            break;
        }
        lo = (x, s);
    }
    v.iter().zip(s2).zip(pmin).map(|((v, s), p)| (mu / v - s).max(*p)).collect()
}

fn water_filling() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_rel, mut worst_kkt, mut worst_budget) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let k = rng.random_range(1..=5);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
        let s2: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let pmin: Vec<f64> = (0..k)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.5) })
            .collect();
        let floor: f64 = v.iter().zip(&pmin).map(|(a, b)| a * b).sum();
        let pmax = floor + rng.random_range(0.05..6.0);
        let wf = match water_fill(&v, &s2, &pmin, pmax) {
            Ok(w) => w,
            Err(e) => return Verdict::new(false, format!("water-fill failed: {e}")),
        };
        let oracle = level_oracle(&v, &s2, &pmin, pmax);
        for (p, o) in wf.powers.iter().zip(&oracle) {
            worst_rel = worst_rel.max((p - o).abs() / o.abs().max(1e-12));
        }
        let spent: f64 = wf.powers.iter().zip(&v).map(|(p, v)| p * v).sum();
        worst_budget = worst_budget.max((spent - pmax).abs() / pmax);
        // Stationarity of Σ log(1 + p/σ²) under Σ v p = P_max: v(σ² + p) is the
        // common level for users above their floor and at least the level on it.
        let level: Vec<f64> = (0..k).map(|i| v[i] * (s2[i] + wf.powers[i])).collect();
        let free: Vec<usize> = (0..k).filter(|&i| wf.powers[i] > pmin[i] * (1.0 + 1e-12) + 1e-15).collect();
        if let Some(&first) = free.first() {
            let mu = level[first];
            for &i in &free {
                worst_kkt = worst_kkt.max((level[i] - mu).abs() / mu);
            }
            for i in (0..k).filter(|i| !free.contains(i)) {
                worst_kkt = worst_kkt.max(((mu - level[i]) / mu).max(0.0));
            }
        }
        if wf.powers.iter().zip(&pmin).any(|(p, m)| *p < m * (1.0 - 1e-12)) {
            worst_kkt = f64::INFINITY;
        }
    }
    let t = start.elapsed();
    Verdict::new(
        worst_rel < 1e-5 && worst_kkt < 1e-9 && worst_budget < 1e-9 && within(t, 30),
        format!(
            "oracle rel {worst_rel:.2e}, KKT {worst_kkt:.2e}, budget {worst_budget:.2e}, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn channel_statistics() -> Verdict {
    let cfg = SystemConfig::desk();
    let scene = SceneSpec::sample_many(1, &cfg, &SceneSampler::default(), 3).remove(0);
    let geo = match SceneGeometry::new(&scene, &cfg) {
        Ok(g) => g,
        Err(e) => return Verdict::new(false, format!("geometry failed: {e}")),
    };
    let (m, n) = (cfg.num_antennas, cfg.num_ris_elements);
    let exps = cfg.pathloss_exponents;
    let expected = |d: f64, a: f64| cfg.pathloss_ref * d.powf(-a);
    let user = scene.user_positions_m[0];
    let e_direct = expected(distance(user, cfg.server_position_m), exps.user_server);
    let e_user_ris = expected(distance(user, cfg.ris_position_m), exps.user_ris);
    let e_ris = expected(distance(cfg.ris_position_m, cfg.server_position_m), exps.ris_server);

    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut acc = [0.0f64; 6];
    for _ in 0..draws {
        let p = geo.sample_parts(&mut rng);
        acc[0] += p.direct_ul.column(0).norm_squared() / m as f64;
        acc[1] += p.direct_dl.column(0).norm_squared() / m as f64;
        acc[2] += p.user_ris_ul.column(0).norm_squared() / n as f64;
        acc[3] += p.ris_user_dl.column(0).norm_squared() / n as f64;
        acc[4] += p.ris_server_ul.norm_squared() / (m * n) as f64;
        acc[5] += p.server_ris_dl.norm_squared() / (m * n) as f64;
    }
    let targets = [e_direct, e_direct, e_user_ris, e_user_ris, e_ris, e_ris];
    let worst = acc
        .iter()
        .zip(targets)
        .map(|(a, t)| (a / draws as f64 - t).abs() / t)
        .fold(0.0f64, f64::max);

    // Rician limits on a unit-gain 8×1 link.
    let los = geo.user_ris_los.columns(0, 1).into_owned();
    let mut limit_rng = ChaCha8Rng::seed_from_u64(33);
    let pure = rician_channel(&los, RICIAN_LOS_LIMIT, 1.0, &mut limit_rng);
    let los_err = (&pure - &los).norm();
    let mut mean = CMatrix::zeros(los.nrows(), 1);
    let mut power = 0.0;
    for _ in 0..draws {
        let h = rician_channel(&los, 1e-12, 1.0, &mut limit_rng);
        power += h.norm_squared() / los.nrows() as f64;
        mean += h;
    }
    let mean_abs = mean.norm() / draws as f64 / (los.nrows() as f64).sqrt();
    let power_err = (power / draws as f64 - 1.0).abs();
    Verdict::new(
        worst < 0.03 && los_err < 1e-12 && mean_abs < 0.03 && power_err < 0.03,
        format!(
            "worst second-moment error {:.2}%, G→∞ |h−LoS| {los_err:.1e}, G→0 |E h| {mean_abs:.3} power err {:.2}%",
            100.0 * worst,
            100.0 * power_err
        ),
    )
}

// ---------------------------------------------------------------- 4

fn result(qoe: f64, feasible: bool) -> QoeResult {
    QoeResult {
        perception: 0.0,
        latency: LatencyBreakdown::new(0.0, 0.0, 0.0),
        qoe,
        feasible,
    }
}

fn constraint_enforcement() -> Verdict {
    let cfg = SystemConfig::desk();
    let scenes = SceneSpec::sample_many(4, &cfg, &SceneSampler::default(), 4);
    let scenarios: Vec<Scenario> = match scenes.into_iter().map(|s| Scenario::new(s, cfg.clone())).collect() {
        Ok(s) => s,
        Err(e) => return Verdict::new(false, format!("scenario failed: {e}")),
    };
    let dim = cfg.num_ris_elements + 2 * cfg.num_users;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut bounds_bad, mut power_bad, mut branch_bad, mut violated) = (0, 0, 0, 0);
    for i in 0..10_000 {
        let scale = [1.0, 10.0, 100.0][i % 3];
        let raw: Vec<f64> = (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let d = match decode_action(&raw, &cfg) {
            Ok(d) => d,
            Err(e) => return Verdict::new(false, format!("decode failed: {e}")),
        };
        let in_bounds = d.theta.phases().iter().all(|t| (0.0..=std::f64::consts::TAU).contains(t))
            && d.resolutions.iter().all(|e| (cfg.resolution_min..=cfg.resolution_max).contains(e))
            && d.compute_hz.iter().all(|f| *f > 0.0)
            && d.compute_hz.iter().sum::<f64>() <= cfg.server_compute_hz;
        if !in_bounds {
            bounds_bad += 1;
        }
        let sc = &scenarios[i % scenarios.len()];
        let (state, _) = match sc.reset(i as u64) {
            Ok(s) => s,
            Err(e) => return Verdict::new(false, format!("reset failed: {e}")),
        };
        let ev = match sc.evaluate(&state, &d) {
            Ok(e) => e,
            Err(e) => return Verdict::new(false, format!("evaluate failed: {e}")),
        };
        let radiated = ev.beamforming.transmit.radiated_power();
        if (radiated - cfg.max_transmit_power_w).abs() > 1e-9 * cfg.max_transmit_power_w {
            power_bad += 1;
        }
        if !ev.beamforming.power_ok {
            violated += 1;
            let expect = -ev.qoe.iter().map(|q| q.qoe.abs()).sum::<f64>();
            if (ev.reward - expect).abs() > 1e-12 * expect.abs().max(1.0) {
                branch_bad += 1;
            }
        }
    }
    // Constructed cases for both reward branches.
    let l = cfg.latency_max_s;
    let cases = [
        (vec![result(2.0, true), result(1.0, true)], true, 3.0),
        (vec![result(2.0, true), result(1.0, false)], true, 3.0 - cfg.penalty_coeff * l),
        (vec![result(2.0, false), result(-1.0, false)], true, 1.0 - 2.0 * cfg.penalty_coeff * l),
        (vec![result(2.0, true), result(1.0, true)], false, -3.0),
        (vec![result(2.0, true), result(-1.0, false)], false, -3.0),
    ];
    let cases_bad = cases
        .iter()
        .filter(|(r, ok, want)| (reward(r, *ok, cfg.penalty_coeff, l) - want).abs() > 1e-12)
        .count();
    Verdict::new(
        bounds_bad + power_bad + branch_bad + cases_bad == 0,
        format!(
            "out of bounds {bounds_bad}, power off P_max {power_bad}, wrong branch {branch_bad}/{violated} violated, constructed failures {cases_bad}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn tuple(rng: &mut ChaCha8Rng, dims: &ModelDims) -> Tuple {
    Tuple {
        rtg: rng.random_range(-1.0..1.0),
        state: (0..dims.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        decision: (0..dims.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn example(rng: &mut ChaCha8Rng, dims: &ModelDims) -> (ModelInput, Array2<f64>) {
    let prompt = (0..dims.prompt_tuples).map(|_| tuple(rng, dims)).collect();
    let recent = (0..dims.context_len).map(|_| tuple(rng, dims)).collect();
    let target = Array2::from_shape_fn((dims.context_len, dims.action_dim), |_| rng.random_range(-0.8..0.8));
    (ModelInput::unpadded(prompt, recent), target)
}

fn batch_loss(params: &ModelParams, batch: &[(ModelInput, Array2<f64>)]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|(x, t)| mse_loss(&forward(params, x).expect("forward"), t).expect("loss") * t.len() as f64)
        .sum();
    total / batch.iter().map(|(_, t)| t.len()).sum::<usize>() as f64
}

fn transformer_numerics() -> Verdict {
    let start = Instant::now();
    let dims = ModelDims {
        state_dim: 5,
        action_dim: 3,
        embed_dim: 8,
        heads: 2,
        layers: 2,
        ff_dim: 16,
        prompt_tuples: 2,
        context_len: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let Ok(mut params) = init_params(dims, 5) else {
        return Verdict::new(false, "init failed");
    };
    // 𝒢 = 2 examples per minibatch.
    let batch: Vec<_> = (0..2).map(|_| example(&mut rng, &dims)).collect();
    let Ok((_, grads)) = batch_loss_and_grad(&params, &batch) else {
        return Verdict::new(false, "gradient failed");
    };
    let h = 1e-6;
    let mut fd = vec![0.0; params.values.len()];
    for i in 0..params.values.len() {
        let keep = params.values[i];
        params.values[i] = keep + h;
        let up = batch_loss(&params, &batch);
        params.values[i] = keep - h;
        let down = batch_loss(&params, &batch);
        params.values[i] = keep;
        fd[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = grads.values.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = grads.values.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
    let fd_rel = diff / norm;

    // Later tuples must not change earlier predictions.
    let (input, _) = &batch[0];
    let base = forward(&params, input).expect("forward");
    let mut altered = input.clone();
    let last = altered.recent.len() - 1;
    altered.recent[last] = tuple(&mut rng, &dims);
    let moved = forward(&params, &altered).expect("forward");
    let mut causal = 0.0f64;
    for r in 0..last {
        for c in 0..dims.action_dim {
            causal = causal.max((base[[r, c]] - moved[[r, c]]).abs());
        }
    }

    // Overfit one minibatch.
    let Ok(mut fit) = init_params(dims, 6) else {
        return Verdict::new(false, "init failed");
    };
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < 500 && loss >= 1e-3 {
        let (l, g) = batch_loss_and_grad(&fit, &batch).expect("gradient");
        loss = l;
        if loss < 1e-3 {
            break;
        }
        adam_step(&mut fit, &g, 1e-2).expect("adam");
        steps += 1;
    }
    let t = start.elapsed();
    Verdict::new(
        fd_rel < 1e-4 && causal < 1e-12 && loss < 1e-3 && within(t, 120),
        format!(
            "finite-difference rel {fd_rel:.2e}, causal drift {causal:.1e}, overfit loss {loss:.2e} after {steps} steps, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6-9

fn pipeline_step(out: &Path, args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["risdt"];
    argv.extend_from_slice(args);
    let out_s = out.to_string_lossy().into_owned();
    argv.extend_from_slice(&["--out", &out_s, "--seed", "0"]);
    let cli = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
    let plan = ExperimentPlan::from_cli(cli).map_err(|e| e.to_string())?;
    run(&plan).map(|_| ()).map_err(|e| format!("{}: {e}", args[0]))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| format!("{}: {e}", path.display()))
}

fn training_trends(out: &Path, elapsed: Duration) -> Result<Verdict, String> {
    let loss: Vec<LossRow> = read_rows(&out.join("loss_pg-zfo.csv"))?;
    let mut by_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for row in &loss {
        let e = by_epoch.entry(row.epoch).or_default();
        e.0 += row.loss;
        e.1 += 1;
    }
    let means: Vec<f64> = by_epoch.values().map(|(s, n)| s / *n as f64).collect();
    let (first, last) = (means[0], means[means.len() - 1]);
    let ratio = last / first;

    let ckpt: Vec<CheckpointRow> = read_rows(&out.join("checkpoints_pg-zfo.csv"))?;
    let returns: Vec<f64> = ckpt.iter().map(|c| c.mean_return).collect();
    let rising = returns.windows(2).filter(|w| w[1] >= w[0]).count();
    let pairs = returns.len().saturating_sub(1);
    let pass = ratio < 0.5 && pairs >= 5 && rising >= 4 && within(elapsed, 1800);
    Ok(Verdict::new(
        pass,
        format!(
            "loss {first:.4} → {last:.4} (ratio {ratio:.3}), checkpoint returns {:?} ({rising}/{pairs} non-decreasing), data+train {:.0}s",
            returns.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn policy_comparison(out: &Path) -> Result<Verdict, String> {
    let rows: Vec<MetricRow> = read_rows(&out.join("compare.csv"))?;
    let mut sums: BTreeMap<(u32, String), (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = sums.entry((r.scene_id, r.policy_name.clone())).or_default();
        e.0 += r.total_qoe;
        e.1 += 1;
    }
    let mean = |scene: u32, p: &str| sums.get(&(scene, p.to_string())).map(|(s, n)| s / *n as f64);
    let scenes: Vec<u32> = sums.keys().map(|(s, _)| *s).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let (mut pg_df, mut pg_rom, mut df_rom) = (0, 0, 0);
    let mut detail = Vec::new();
    for &s in &scenes {
        let (Some(pg), Some(df), Some(rom)) = (mean(s, "pg-zfo"), mean(s, "df-wp"), mean(s, "rom")) else {
            return Err(format!("scene {s} misses a policy"));
        };
        pg_df += usize::from(pg > df);
        pg_rom += usize::from(pg > rom);
        df_rom += usize::from(df > rom);
        detail.push(format!("scene {s}: pg {pg:.2} df {df:.2} rom {rom:.2}"));
    }
    let n = scenes.len();
    Ok(Verdict::new(
        n == 3 && pg_df >= 2 && pg_rom == n,
        format!(
            "PG>DF {pg_df}/{n}, PG>ROM {pg_rom}/{n}, DF>ROM {df_rom}/{n} (reported); {}",
            detail.join("; ")
        ),
    ))
}

fn power_sweep(out: &Path) -> Result<Verdict, String> {
    let rows: Vec<SweepRow> = read_rows(&out.join("sweep.csv"))?;
    let mut curves: BTreeMap<u32, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.policy_name == "pg-zfo") {
        curves.entry(r.scene_id).or_default().push(r);
    }
    let mut pass = !curves.is_empty();
    let mut detail = Vec::new();
    for (scene, curve) in &mut curves {
        curve.sort_by(|a, b| a.pmax_dbm.total_cmp(&b.pmax_dbm));
        let mut inversions = 0;
        for w in curve.windows(2) {
            if w[1].mean_total_qoe < w[0].mean_total_qoe {
                inversions += 1;
                let slack = w[0].std_total_qoe.max(w[1].std_total_qoe);
                if w[0].mean_total_qoe - w[1].mean_total_qoe > slack {
                    inversions += 10;
                }
            }
        }
        pass &= inversions <= 1;
        let values: Vec<String> = curve.iter().map(|r| format!("{:.2}", r.mean_total_qoe)).collect();
        detail.push(format!("scene {scene}: {}", values.join(" ≤ ")));
    }
    Ok(Verdict::new(pass, detail.join("; ")))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &Path, second: &Path) -> Verdict {
    let files = files_under(second);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(first.join(f)).ok() != std::fs::read(second.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    Verdict::new(
        !files.is_empty() && differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", files.len()),
    )
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, v: Verdict) {
    println!("criterion {id} {name}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    results.push(v.pass);
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 1, "zf-correctness", zf_correctness());
    report(&mut results, 2, "water-filling", water_filling());
    report(&mut results, 3, "channel-statistics", channel_statistics());
    report(&mut results, 4, "constraint-enforcement", constraint_enforcement());
    report(&mut results, 5, "transformer-numerics", transformer_numerics());

    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let (Ok(a), Ok(b)) = dirs else {
        println!("criterion 6-9: FAIL | cannot create temporary directories");
        return ExitCode::FAILURE;
    };
    let first = a.path();
    let start = Instant::now();
    let staged = pipeline_step(first, &["gen-data"]).and_then(|_| pipeline_step(first, &["train"]));
    let train_time = start.elapsed();
    let staged = staged
        .and_then(|_| pipeline_step(first, &["eval"]))
        .and_then(|_| pipeline_step(first, &["compare"]))
        .and_then(|_| pipeline_step(first, &["sweep-power", "--policy", "pg-zfo"]));
    let fail = |e: &String| Verdict::new(false, format!("pipeline failed: {e}"));
    match &staged {
        Ok(()) => {
            let v = training_trends(first, train_time).unwrap_or_else(|e| fail(&e));
            report(&mut results, 6, "training-trends", v);
            let v = policy_comparison(first).unwrap_or_else(|e| fail(&e));
            report(&mut results, 7, "policy-comparison", v);
            let v = power_sweep(first).unwrap_or_else(|e| fail(&e));
            report(&mut results, 8, "power-sweep", v);
        }
        Err(e) => {
            for (id, name) in [(6, "training-trends"), (7, "policy-comparison"), (8, "power-sweep")] {
                report(&mut results, id, name, fail(e));
            }
        }
    }
    let second = b.path();
    let rerun = pipeline_step(second, &["gen-data"])
        .and_then(|_| pipeline_step(second, &["train"]))
        .and_then(|_| pipeline_step(second, &["eval"]));
    let v = match rerun {
        Ok(()) => determinism(first, second),
        Err(e) => fail(&e),
    };
    report(&mut results, 9, "determinism", v);

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
