//! Meta-test, frequency ablation, wall-clock and plot-data reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::Serialize;

use crate::data::OfflineTaskDataset;
use crate::envlab::TaskSpec;
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, Checkpoint, Mlp};
use crate::offlinerl::{GaussianPolicyNet, MeanActor, Policy};
use crate::par::Execution;
use crate::taskenc::TaskEncoder;

use super::train::evaluate_tasks;
use super::{run_training, RunArtifacts, TaskData, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetaTestRow {
    pub task_id: usize,
    pub context_id: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaTestReport {
    pub rows: Vec<MetaTestRow>,
    /// Mean over tasks of the per-task mean return.
    pub mean_return: f64,
    /// Population std over tasks of the per-task mean return.
    pub std_return: f64,
}

impl MetaTestReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task_id", "context_id", "mean_return", "std_return"])?;
        for r in &self.rows {
            w.write_record([r.task_id.to_string(), r.context_id.to_string(), r.mean_return.to_string(), r.std_return.to_string()])?;
        }
        w.write_record(["aggregate".into(), String::new(), self.mean_return.to_string(), self.std_return.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluates `policy_for(task)` on every test task with a one-trajectory
/// context sampled from that task's dataset.
pub fn meta_test_with<P: Policy>(
    tasks: &[(TaskSpec, OfflineTaskDataset)],
    encoder: &TaskEncoder,
    encoder_params: &[f64],
    policy_for: &(impl Fn(&TaskSpec) -> P + Sync),
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<MetaTestReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("meta-test tasks"));
    }
    for (task, ds) in tasks {
        if ds.is_empty() {
            return Err(Error::MissingDataset { task_id: task.task_id, dir: Default::default() });
        }
    }
    let rows: Vec<MetaTestRow> = evaluate_tasks(tasks, encoder, encoder_params, policy_for, n_episodes, seed, exec)?
        .into_iter()
        .map(|r| MetaTestRow {
            task_id: r.task_id,
            context_id: r.context_id,
            mean_return: r.mean_return,
            std_return: r.std_return,
        })
        .collect();
    let (mean_return, std_return) = mean_std(&rows.iter().map(|r| r.mean_return).collect::<Vec<_>>());
    Ok(MetaTestReport { rows, mean_return, std_return })
}

pub(crate) fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn entry_net(ckpt: &Checkpoint, name: &'static str) -> Result<(Mlp, Vec<f64>)> {
    let e = ckpt.get(name).ok_or_else(|| Error::format("checkpoint", format!("missing entry `{name}`")))?;
    Ok((Mlp::new(e.layout.clone())?, e.params.clone()))
}

/// Loads the final checkpoint of `artifacts` and meta-tests its encoder and
/// mean actor on `data.test`.
pub fn run_meta_test(artifacts: &RunArtifacts, data: &TaskData, n_episodes: usize, seed: u64, exec: Execution) -> Result<MetaTestReport> {
    let ckpt = load_checkpoint(artifacts.final_checkpoint())?;
    let (sd, ad) = (data.family.state_dim(), data.family.action_dim());
    let (enc_net, enc_params) = entry_net(&ckpt, "encoder")?;
    let encoder = TaskEncoder::from_net(enc_net, sd, ad)?;
    let (actor_net, actor_params) = entry_net(&ckpt, "actor")?;
    let actor = GaussianPolicyNet::from_net(actor_net, ad)?;
    let policy_for = |_: &TaskSpec| MeanActor {
        net: &actor,
        params: &actor_params,
    };
    meta_test_with(&data.test, &encoder, &enc_params, &policy_for, n_episodes, seed, exec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub frequency: usize,
    pub seed: u64,
    pub final_return: f64,
    pub heldout_accuracy: f64,
    pub encoder_updates: usize,
    pub mean_shift: f64,
    pub max_shift: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub frequency: usize,
    pub n_seeds: usize,
    pub mean_final_return: f64,
    pub std_final_return: f64,
    pub mean_heldout_accuracy: f64,
    pub encoder_updates: usize,
    pub mean_shift: f64,
    pub mean_train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    /// True when every numeric cell is finite.
    pub fn all_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| [r.final_return, r.heldout_accuracy, r.mean_shift, r.max_shift, r.train_seconds].iter().all(|v| v.is_finite()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["frequency", "seed", "final_return", "heldout_accuracy", "encoder_updates", "mean_shift", "max_shift", "train_seconds"])?;
        for r in &self.rows {
            w.write_record([
                r.frequency.to_string(),
                r.seed.to_string(),
                r.final_return.to_string(),
                r.heldout_accuracy.to_string(),
                r.encoder_updates.to_string(),
                r.mean_shift.to_string(),
                r.max_shift.to_string(),
                r.train_seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and max shift over the steps that updated the encoder.
fn shift_stats(path: &Path) -> Result<(f64, f64)> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for rec in r.records() {
        let rec = rec?;
        if rec.get(2) == Some("1") {
            let v: f64 = rec.get(1).unwrap_or("").parse().map_err(|_| Error::format("shift log", "bad value"))?;
            sum += v;
            max = max.max(v);
            n += 1;
        }
    }
    Ok(if n == 0 { (0.0, 0.0) } else { (sum / n as f64, max) })
}

/// One run per frequency per seed, each under `<out_dir>/f<freq>_s<seed>`.
/// Runs execute one after another so their wall-clock numbers are comparable.
pub fn run_ablation_frequency(
    base: &TrainingConfig,
    data: &TaskData,
    frequencies: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<AblationReport> {
    if frequencies.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("ablation grid"));
    }
    if let Some(f) = frequencies.iter().find(|f| ![1, 2, 4, 8].contains(*f)) {
        return Err(Error::invalid(format!("frequency {f} not in {{1,2,4,8}}")));
    }
    let mut rows = Vec::new();
    for &f in frequencies {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.update_frequency = f;
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(format!("f{f}_s{seed}"));
            let a = run_training(&cfg, data, exec)?;
            let (mean_shift, max_shift) = shift_stats(&a.shift_csv)?;
            rows.push(AblationRow {
                frequency: f,
                seed,
                final_return: a.final_return.unwrap_or(f64::NAN),
                heldout_accuracy: a.final_heldout_accuracy.unwrap_or(f64::NAN),
                encoder_updates: a.encoder_updates,
                mean_shift,
                max_shift,
                train_seconds: a.train_seconds,
            });
        }
    }
    let summary = frequencies
        .iter()
        .map(|&f| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.frequency == f).collect();
            let col = |g: fn(&AblationRow) -> f64| rs.iter().map(|r| g(r)).collect::<Vec<_>>();
            let (mean_final_return, std_final_return) = mean_std(&col(|r| r.final_return));
            AblationSummary {
                frequency: f,
                n_seeds: rs.len(),
                mean_final_return,
                std_final_return,
                mean_heldout_accuracy: mean_std(&col(|r| r.heldout_accuracy)).0,
                encoder_updates: rs[0].encoder_updates,
                mean_shift: mean_std(&col(|r| r.mean_shift)).0,
                mean_train_seconds: mean_std(&col(|r| r.train_seconds)).0,
            }
        })
        .collect();
    let report = AblationReport { rows, summary };
    std::fs::create_dir_all(&base.out_dir)?;
    report.write_csv(&base.out_dir.join("ablation.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalltimeRow {
    pub label: String,
    pub seed: u64,
    pub total_steps: usize,
    pub encoder_updates: usize,
    pub train_seconds: f64,
    /// `train_seconds` over the first row's.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalltimeReport {
    pub rows: Vec<WalltimeRow>,
}

impl WalltimeReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "seed", "total_steps", "encoder_updates", "train_seconds", "ratio"])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                r.total_steps.to_string(),
                r.encoder_updates.to_string(),
                r.train_seconds.to_string(),
                r.ratio.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn report_walltime(runs: &[RunArtifacts]) -> Result<WalltimeReport> {
    if runs.len() < 2 {
        return Err(Error::invalid("wall-clock comparison needs at least two runs"));
    }
    let steps = runs[0].total_steps;
    if let Some(r) = runs.iter().find(|r| r.total_steps != steps) {
        return Err(Error::invalid(format!("mismatched step budgets: {} vs {}", steps, r.total_steps)));
    }
    let base = runs[0].train_seconds;
    Ok(WalltimeReport {
        rows: runs
            .iter()
            .map(|r| WalltimeRow {
                label: r.label.clone(),
                seed: r.seed,
                total_steps: r.total_steps,
                encoder_updates: r.encoder_updates,
                train_seconds: r.train_seconds,
                ratio: r.train_seconds / base,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub run_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSummaryRow {
    pub run_label: String,
    pub metric: String,
    pub step: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotData {
    pub rows: Vec<PlotRow>,
    pub summary: Vec<PlotSummaryRow>,
}

impl PlotData {
    pub fn write_csv(&self, long: &Path, summary: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(long)?;
        w.write_record(["step", "metric", "value", "seed", "run_label"])?;
        for r in &self.rows {
            w.write_record([r.step.to_string(), r.metric.clone(), r.value.to_string(), r.seed.to_string(), r.run_label.clone()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(summary)?;
        w.write_record(["run_label", "metric", "step", "n", "mean", "std"])?;
        for r in &self.summary {
            w.write_record([r.run_label.clone(), r.metric.clone(), r.step.to_string(), r.n.to_string(), r.mean.to_string(), r.std.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

type Series = BTreeMap<usize, f64>;

fn read_series(path: &Path, step_col: usize, value_col: usize, filter: Option<(usize, &str)>, average: bool) -> Result<Series> {
    let mut r = csv::Reader::from_path(path)?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        if let Some((col, want)) = filter {
            if rec.get(col) != Some(want) {
                continue;
            }
        }
        let bad = || Error::format("metrics csv", format!("{}", path.display()));
        let step: usize = rec.get(step_col).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let v: f64 = rec.get(value_col).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let e = acc.entry(step).or_insert((0.0, 0));
        if average {
            e.0 += v;
            e.1 += 1;
        } else {
            *e = (v, 1);
        }
    }
    Ok(acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect())
}

/// Last value at or before `step`, else the first value.
fn value_at(series: &Series, step: usize) -> f64 {
    series
        .range(..=step)
        .next_back()
        .or_else(|| series.iter().next())
        .map(|(_, v)| *v)
        .unwrap_or(f64::NAN)
}

/// Long-format metrics across runs plus per-step mean/std over seeds of the
/// same run label. Metrics: `return` (mean over test tasks), `heldout_accuracy`,
/// `batch_accuracy` and `shift`.
pub fn emit_plot_data(runs: &[RunArtifacts]) -> Result<PlotData> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("plot runs"));
    }
    // (label, metric) -> per-run series
    let mut groups: BTreeMap<(String, &'static str), Vec<(u64, Series)>> = BTreeMap::new();
    for run in runs {
        let metrics: [(&'static str, Series); 4] = [
            ("return", read_series(&run.returns_csv, 0, 2, None, true)?),
            ("heldout_accuracy", read_series(&run.accuracy_csv, 0, 2, Some((1, "heldout")), false)?),
            ("batch_accuracy", read_series(&run.accuracy_csv, 0, 2, Some((1, "batch")), false)?),
            ("shift", read_series(&run.shift_csv, 0, 1, None, false)?),
        ];
        for (name, series) in metrics {
            if !series.is_empty() {
                groups.entry((run.label.clone(), name)).or_default().push((run.seed, series));
            }
        }
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for ((label, metric), series) in groups {
        let coarsest = series.iter().map(|(_, s)| s).min_by_key(|s| s.len()).expect("non-empty group");
        let grid: Vec<usize> = coarsest.keys().copied().collect();
        if series.iter().any(|(_, s)| s.keys().ne(grid.iter())) {
            log::warn!("{label}/{metric}: step grids differ across seeds, resampled to {} points", grid.len());
        }
        for &step in &grid {
            let values: Vec<f64> = series.iter().map(|(_, s)| value_at(s, step)).collect();
            for ((seed, _), &value) in series.iter().zip(&values) {
                rows.push(PlotRow {
                    step,
                    metric: metric.to_string(),
                    value,
                    seed: *seed,
                    run_label: label.clone(),
                });
            }
            let (mean, std) = mean_std(&values);
            summary.push(PlotSummaryRow {
                run_label: label.clone(),
                metric: metric.to_string(),
                step,
                n: values.len(),
                mean,
                std,
            });
        }
    }
    Ok(PlotData { rows, summary })
}
