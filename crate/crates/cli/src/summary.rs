//! CSV row types and aggregation into the summary and figure data files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene_id: u32,
    pub seed: u64,
    pub total_qoe: f64,
    pub violation_rate: f64,
    pub policy_name: String,
    pub total_return: f64,
    pub config_hash: String,
}

/// One (P_max, scene, policy) cell of a power sweep, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pmax_dbm: f64,
    pub scene_id: u32,
    pub policy_name: String,
    pub runs: usize,
    pub mean_total_qoe: f64,
    pub std_total_qoe: f64,
    pub mean_return: f64,
    pub violation_rate: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub policy_name: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub config_hash: String,
}

/// Held-out evaluation of a training checkpoint; epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub policy_name: String,
    pub epoch: usize,
    pub step: u64,
    pub mean_return: f64,
    pub mean_total_qoe: f64,
    pub violation_rate: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricGroup {
    pub policy_name: String,
    pub scene_id: u32,
    pub runs: usize,
    pub mean_total_qoe: f64,
    pub std_total_qoe: f64,
    pub mean_return: f64,
    pub mean_violation_rate: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub policy_name: String,
    pub steps: usize,
    pub first_epoch_mean: f64,
    pub final_epoch_mean: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hashes: Vec<String>,
    pub inputs: Vec<String>,
    pub metrics: Vec<MetricGroup>,
    pub sweep: Vec<SweepRow>,
    pub loss: Vec<LossSummary>,
    pub checkpoints: Vec<CheckpointRow>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub const METRIC_HEADER: [&str; 7] = [
    "scene_id",
    "seed",
    "total_qoe",
    "violation_rate",
    "policy_name",
    "total_return",
    "config_hash",
];
pub const SWEEP_HEADER: [&str; 9] = [
    "pmax_dbm",
    "scene_id",
    "policy_name",
    "runs",
    "mean_total_qoe",
    "std_total_qoe",
    "mean_return",
    "violation_rate",
    "config_hash",
];
pub const LOSS_HEADER: [&str; 5] = ["policy_name", "epoch", "step", "loss", "config_hash"];
pub const CHECKPOINT_HEADER: [&str; 7] = [
    "policy_name",
    "epoch",
    "step",
    "mean_return",
    "mean_total_qoe",
    "violation_rate",
    "config_hash",
];

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Default)]
struct Collected {
    metrics: BTreeMap<(String, String, u32, u64), MetricRow>,
    sweep: BTreeMap<(String, u64, u32, String), SweepRow>,
    loss: Vec<LossRow>,
    checkpoints: Vec<CheckpointRow>,
}

fn collect(path: &Path, into: &mut Collected) -> Result<(), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let is = |h: &[&str]| header.iter().map(String::as_str).eq(h.iter().copied());
    if is(&METRIC_HEADER) {
        for row in read_rows::<MetricRow>(path)? {
            let key = (row.config_hash.clone(), row.policy_name.clone(), row.scene_id, row.seed);
            into.metrics.insert(key, row);
        }
    } else if is(&SWEEP_HEADER) {
        for row in read_rows::<SweepRow>(path)? {
            let key = (row.config_hash.clone(), row.pmax_dbm.to_bits(), row.scene_id, row.policy_name.clone());
            into.sweep.insert(key, row);
        }
    } else if is(&LOSS_HEADER) {
        into.loss.extend(read_rows::<LossRow>(path)?);
    } else if is(&CHECKPOINT_HEADER) {
        into.checkpoints.extend(read_rows::<CheckpointRow>(path)?);
    } else {
        return Err(CliError::Malformed {
            path: path.to_path_buf(),
            message: format!("unrecognized header {header:?}"),
        });
    }
    Ok(())
}

/// Aggregates metric, sweep, loss and checkpoint CSVs and writes
/// `summary.json`, `fig2_loss.csv`, `fig3_qoe.csv` and `fig4_pmax.csv`
/// into `out`. Duplicate episodes (same hash, policy, scene and seed) are
/// counted once.
pub fn emit_summary(inputs: &[PathBuf], out: &Path) -> Result<Summary, CliError> {
    let mut c = Collected::default();
    for p in inputs {
        collect(p, &mut c)?;
    }
    let mut hashes = BTreeSet::new();

    let mut groups: BTreeMap<(String, String, u32), Vec<&MetricRow>> = BTreeMap::new();
    for ((hash, policy, scene, _), row) in &c.metrics {
        groups.entry((hash.clone(), policy.clone(), *scene)).or_default().push(row);
    }
    let metrics: Vec<MetricGroup> = groups
        .into_iter()
        .map(|((hash, policy_name, scene_id), rows)| {
            let q: Vec<f64> = rows.iter().map(|r| r.total_qoe).collect();
            let (mean, std) = mean_std(&q);
            let n = rows.len() as f64;
            hashes.insert(hash.clone());
            MetricGroup {
                policy_name,
                scene_id,
                runs: rows.len(),
                mean_total_qoe: mean,
                std_total_qoe: std,
                mean_return: rows.iter().map(|r| r.total_return).sum::<f64>() / n,
                mean_violation_rate: rows.iter().map(|r| r.violation_rate).sum::<f64>() / n,
                config_hash: hash,
            }
        })
        .collect();

    let mut sweep: Vec<SweepRow> = c.sweep.into_values().collect();
    sweep.sort_by(|a, b| {
        a.pmax_dbm
            .total_cmp(&b.pmax_dbm)
            .then(a.scene_id.cmp(&b.scene_id))
            .then(a.policy_name.cmp(&b.policy_name))
            .then(a.config_hash.cmp(&b.config_hash))
    });
    hashes.extend(sweep.iter().map(|r| r.config_hash.clone()));

    let mut by_run: BTreeMap<(String, String), Vec<&LossRow>> = BTreeMap::new();
    for r in &c.loss {
        by_run.entry((r.config_hash.clone(), r.policy_name.clone())).or_default().push(r);
    }
    let loss: Vec<LossSummary> = by_run
        .into_iter()
        .map(|((hash, policy_name), rows)| {
            let first = rows.iter().map(|r| r.epoch).min().unwrap_or(0);
            let last = rows.iter().map(|r| r.epoch).max().unwrap_or(0);
            let epoch_mean = |e: usize| {
                let xs: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                mean_std(&xs).0
            };
            hashes.insert(hash.clone());
            LossSummary {
                policy_name,
                steps: rows.len(),
                first_epoch_mean: epoch_mean(first),
                final_epoch_mean: epoch_mean(last),
                config_hash: hash,
            }
        })
        .collect();
    hashes.extend(c.checkpoints.iter().map(|r| r.config_hash.clone()));

    let summary = Summary {
        config_hashes: hashes.into_iter().collect(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        metrics,
        sweep,
        loss,
        checkpoints: c.checkpoints.clone(),
    };

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = out.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    write_csv(&out.join("fig2_loss.csv"), &c.loss, &LOSS_HEADER)?;
    write_csv(
        &out.join("fig3_qoe.csv"),
        &summary.metrics,
        &[
            "policy_name",
            "scene_id",
            "runs",
            "mean_total_qoe",
            "std_total_qoe",
            "mean_return",
            "mean_violation_rate",
            "config_hash",
        ],
    )?;
    write_csv(&out.join("fig4_pmax.csv"), &summary.sweep, &SWEEP_HEADER)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(policy: &str, scene: u32, seed: u64, q: f64) -> MetricRow {
        MetricRow {
            scene_id: scene,
            seed,
            total_qoe: q,
            violation_rate: 0.25,
            policy_name: policy.into(),
            total_return: q - 1.0,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn empty_inputs_give_empty_summary() {
        let dir = tempfile::tempdir().unwrap();
        let s = emit_summary(&[], dir.path()).unwrap();
        assert_eq!(s, Summary::default());
        assert!(dir.path().join("summary.json").exists());
        let fig4 = fs::read_to_string(dir.path().join("fig4_pmax.csv")).unwrap();
        assert_eq!(fig4.lines().count(), 1);
    }

    #[test]
    fn groups_and_deduplicates() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_csv(&a, &[metric("rom", 1, 7, 4.0), metric("rom", 1, 8, 6.0)], &METRIC_HEADER).unwrap();
        write_csv(&b, &[metric("rom", 1, 8, 6.0), metric("pg-zfo", 1, 7, 9.0)], &METRIC_HEADER).unwrap();
        let s = emit_summary(&[a, b], &dir.path().join("out")).unwrap();
        assert_eq!(s.metrics.len(), 2);
        let pg = &s.metrics[0];
        assert_eq!((pg.policy_name.as_str(), pg.runs, pg.std_total_qoe), ("pg-zfo", 1, 0.0));
        let rom = &s.metrics[1];
        assert_eq!((rom.runs, rom.mean_total_qoe, rom.std_total_qoe), (2, 5.0, 1.0));
        assert_eq!(s.config_hashes, vec!["abc".to_string()]);
    }

    #[test]
    fn power_data_sorted_ascending() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<SweepRow> = [43.0, 37.0, 40.0]
            .iter()
            .map(|&p| SweepRow {
                pmax_dbm: p,
                scene_id: 0,
                policy_name: "pg-zfo".into(),
                runs: 1,
                mean_total_qoe: p,
                std_total_qoe: 0.0,
                mean_return: p,
                violation_rate: 0.0,
                config_hash: "h".into(),
            })
            .collect();
        let p = dir.path().join("sweep.csv");
        write_csv(&p, &rows, &SWEEP_HEADER).unwrap();
        emit_summary(&[p], dir.path()).unwrap();
        let mut r = csv::Reader::from_path(dir.path().join("fig4_pmax.csv")).unwrap();
        let got: Vec<f64> = r.deserialize::<SweepRow>().map(|x| x.unwrap().pmax_dbm).collect();
        assert_eq!(got, vec![37.0, 40.0, 43.0]);
    }

    #[test]
    fn unknown_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        let err = emit_summary(&[p], dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Malformed { .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
