//! The gated training loop and the artifacts it leaves on disk.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::{index, IndexedRandom};
use serde::Serialize;

use crate::data::{Context, Trajectory, TransitionRecord};
use crate::envlab::TaskSpec;
use crate::error::{Error, Result};
use crate::nn::{write_checkpoint, Checkpoint, CheckpointEntry, Mlp, OptimizerState};
use crate::offlinerl::{evaluate_policy, BracAgent, MeanActor, RlBatch};
use crate::par::{self, Execution};
use crate::rng;
use crate::taskenc::{classification_accuracy, gated_update, representation_shift, EncoderObjective, EncoderParams, ShiftLog};

use super::{TaskData, TrainingConfig};

/// Paths and summary numbers of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunArtifacts {
    pub label: String,
    pub out_dir: PathBuf,
    pub config_digest: String,
    pub seed: u64,
    pub update_frequency: usize,
    pub total_steps: usize,
    pub encoder_updates: usize,
    pub train_seconds: f64,
    pub config_snapshot: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub returns_csv: PathBuf,
    pub accuracy_csv: PathBuf,
    pub shift_csv: PathBuf,
    pub losses_csv: PathBuf,
    pub timing_csv: PathBuf,
    pub final_return: Option<f64>,
    pub final_heldout_accuracy: Option<f64>,
}

impl RunArtifacts {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("initial checkpoint always exists")
    }

    /// Reads `run.json` written by [`run_training`].
    pub fn load(out_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(out_dir.join(RUN_JSON))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let field = |k: &str| v.get(k).cloned().ok_or_else(|| Error::format("run.json", format!("missing {k}")));
        let path = |k: &str| -> Result<PathBuf> { Ok(PathBuf::from(field(k)?.as_str().unwrap_or_default())) };
        let uint = |k: &str| -> Result<u64> { field(k)?.as_u64().ok_or_else(|| Error::format("run.json", k.to_string())) };
        Ok(Self {
            label: field("label")?.as_str().unwrap_or_default().to_string(),
            out_dir: path("out_dir")?,
            config_digest: field("config_digest")?.as_str().unwrap_or_default().to_string(),
            seed: uint("seed")?,
            update_frequency: uint("update_frequency")? as usize,
            total_steps: uint("total_steps")? as usize,
            encoder_updates: uint("encoder_updates")? as usize,
            train_seconds: field("train_seconds")?.as_f64().unwrap_or(0.0),
            config_snapshot: path("config_snapshot")?,
            checkpoints: field("checkpoints")?
                .as_array()
                .map(|a| a.iter().filter_map(|p| p.as_str().map(PathBuf::from)).collect())
                .unwrap_or_default(),
            returns_csv: path("returns_csv")?,
            accuracy_csv: path("accuracy_csv")?,
            shift_csv: path("shift_csv")?,
            losses_csv: path("losses_csv")?,
            timing_csv: path("timing_csv")?,
            final_return: field("final_return")?.as_f64(),
            final_heldout_accuracy: field("final_heldout_accuracy")?.as_f64(),
        })
    }
}

pub const RUN_JSON: &str = "run.json";
/// Metric files covered by the determinism contract.
pub const METRIC_CSVS: [&str; 4] = ["returns.csv", "accuracy.csv", "shift.csv", "losses.csv"];

/// Training trajectories, held-out trajectories and flat transitions of one
/// training task.
struct TaskBuffers<'a> {
    train: Vec<Trajectory>,
    heldout: Vec<Trajectory>,
    transitions: Vec<&'a TransitionRecord>,
}

fn split_buffers<'a>(data: &'a TaskData, holdout: usize) -> Vec<TaskBuffers<'a>> {
    data.train
        .iter()
        .map(|(_, ds)| {
            let ranges = ds.trajectory_ranges();
            let cut = ranges.len() - holdout;
            let transitions = ranges[..cut].iter().flat_map(|r| ds.transitions[r.clone()].iter()).collect();
            TaskBuffers {
                train: ranges[..cut].iter().map(|r| ds.trajectory(r.clone())).collect(),
                heldout: ranges[cut..].iter().map(|r| ds.trajectory(r.clone())).collect(),
                transitions,
            }
        })
        .collect()
}

/// Concatenates `n` sampled trajectories into one context.
fn sample_context(trajs: &[Trajectory], n: usize, rng: &mut rng::Rng) -> Context {
    let mut records = Vec::new();
    for _ in 0..n {
        records.extend(trajs.choose(rng).expect("non-empty buffer").transitions.iter().cloned());
    }
    Context::new(records)
}

struct CsvOut {
    returns: csv::Writer<BufWriter<File>>,
    accuracy: csv::Writer<BufWriter<File>>,
    losses: csv::Writer<BufWriter<File>>,
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    Ok(w)
}

/// Everything the loop mutates, kept together for checkpointing.
struct State {
    objective: EncoderObjective,
    enc: EncoderParams,
    enc_opt: [OptimizerState; 3],
    agent: BracAgent,
}

impl State {
    fn checkpoint(&self, step: usize, digest: &str) -> Checkpoint {
        let entry = |name: &str, net: &Mlp, params: &[f64], opt: Option<&OptimizerState>| CheckpointEntry {
            name: name.to_string(),
            layout: net.spec().clone(),
            params: params.to_vec(),
            optimizer: opt.cloned(),
        };
        let a = &self.agent;
        Checkpoint {
            step_index: step as u64,
            config_digest: digest.to_string(),
            entries: vec![
                entry("encoder", self.objective.encoder.net(), &self.enc.encoder, Some(&self.enc_opt[0])),
                entry("head", self.objective.head.net(), &self.enc.head, Some(&self.enc_opt[1])),
                entry("decoder", self.objective.decoder.net(), &self.enc.decoder, Some(&self.enc_opt[2])),
                entry("actor", a.nets.actor.net(), &a.actor.0, Some(&a.actor_opt)),
                entry("behavior", a.nets.behavior.net(), &a.behavior.0, Some(&a.behavior_opt)),
                entry("q1", a.nets.critic.net(), &a.critic.q1, Some(&a.q1_opt)),
                entry("q2", a.nets.critic.net(), &a.critic.q2, Some(&a.q2_opt)),
                entry("target_q1", a.nets.critic.net(), &a.target.q1, None),
                entry("target_q2", a.nets.critic.net(), &a.target.q2, None),
            ],
        }
    }
}

fn save_checkpoint(dir: &Path, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let path = dir.join(name);
    write_checkpoint(ckpt, BufWriter::new(File::create(&path)?))?;
    Ok(path)
}

/// Per-task evaluation on the test tasks with a freshly sampled context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub task_id: usize,
    pub context_id: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

/// Samples one dataset trajectory per task as context, encodes it and rolls
/// out the mean action of `actor`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_tasks<P: crate::offlinerl::Policy>(
    tasks: &[(TaskSpec, crate::data::OfflineTaskDataset)],
    encoder: &crate::taskenc::TaskEncoder,
    encoder_params: &[f64],
    policy_for: &(impl Fn(&TaskSpec) -> P + Sync),
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<EvalRow>> {
    par::map_indexed(tasks.len(), exec, |i| {
        let (task, ds) = &tasks[i];
        let mut rng = rng::stream(seed, i as u64);
        let ranges = ds.trajectory_ranges();
        let context_id = rand::Rng::random_range(&mut rng, 0..ranges.len());
        let ctx = ds.trajectory(ranges[context_id].clone());
        let policy = policy_for(task);
        let r = evaluate_policy(task, encoder, encoder_params, &policy, &ctx, n_episodes, seed)?;
        Ok(EvalRow {
            task_id: task.task_id,
            context_id,
            mean_return: r.mean_return,
            std_return: r.std_return,
        })
    })
    .into_iter()
    .collect()
}

fn finite(what: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Writes the diagnostic snapshot for an aborted run.
fn write_diagnostic(dir: &Path, step: usize, err: &Error, state: &State, digest: &str) {
    let text = serde_json::json!({ "step": step, "error": err.to_string(), "config_digest": digest });
    let _ = std::fs::write(dir.join("diagnostic.json"), text.to_string());
    let _ = save_checkpoint(dir, &format!("diagnostic_{step:07}.ckpt"), &state.checkpoint(step, digest));
}

/// Runs the gated loop: per iteration sample `task_batch_size` tasks; per
/// step sample one context per task, encode, update the encoder iff
/// `step % update_frequency == 0`, detach, sample an RL batch split evenly
/// over the sampled tasks and take one behavior, critic and actor step.
pub fn run_training(config: &TrainingConfig, data: &TaskData, exec: Execution) -> Result<RunArtifacts> {
    config.validate()?;
    if data.train.len() != config.n_train_tasks || data.test.len() != config.n_test_tasks {
        return Err(Error::invalid("task data does not match the configured task counts"));
    }
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let digest = config.digest();
    let label = config.run_label();
    let snapshot_path = dir.join("config.txt");
    std::fs::write(&snapshot_path, config.to_text())?;

    let (sd, ad) = (data.family.state_dim(), data.family.action_dim());
    let n_train = config.n_train_tasks;
    let buffers = split_buffers(data, config.holdout_trajectories);
    let probes: Vec<Context> = (0..config.n_probe_contexts)
        .map(|i| {
            let held = &buffers[i % n_train].heldout;
            held[(i / n_train) % held.len()].to_context()
        })
        .collect();
    let probe_refs: Vec<&Context> = probes.iter().collect();
    let heldout: Vec<(Context, usize)> = buffers
        .iter()
        .enumerate()
        .flat_map(|(label, b)| b.heldout.iter().map(move |t| (t.to_context(), label)))
        .collect();
    let heldout_refs: Vec<&Context> = heldout.iter().map(|(c, _)| c).collect();
    let heldout_labels: Vec<usize> = heldout.iter().map(|(_, l)| *l).collect();

    let mut init_rng = rng::seeded(rng::derive(config.seed, 0x1417));
    let mut sample_rng = rng::seeded(rng::derive(config.seed, 0x5a3e));
    let mut noise_rng = rng::seeded(rng::derive(config.seed, 0x9015));
    let objective = EncoderObjective::new(sd, ad, n_train, config.encoder_config())?;
    let enc = objective.init(&mut init_rng);
    let lr = config.encoder_learning_rate;
    let enc_opt = [
        OptimizerState::new(enc.encoder.len(), lr),
        OptimizerState::new(enc.head.len(), lr),
        OptimizerState::new(enc.decoder.len(), lr),
    ];
    let agent = BracAgent::new(sd, ad, config.d_z, config.brac_config(), &mut init_rng)?;
    let mut state = State { objective, enc, enc_opt, agent };

    let mut checkpoints = vec![save_checkpoint(&dir, "checkpoint_0000000.ckpt", &state.checkpoint(0, &digest))?];
    let paths = METRIC_CSVS.map(|f| dir.join(f));
    let mut out = CsvOut {
        returns: csv_writer(&paths[0], &["train_step", "task_id", "mean_return", "std_return", "context_id", "seed"])?,
        accuracy: csv_writer(&paths[1], &["step", "split", "accuracy"])?,
        losses: csv_writer(&paths[3], &["step", "encoder_loss", "critic_loss", "actor_loss", "behavior_loss"])?,
    };
    let mut shift_log = ShiftLog::default();

    let per_task_rows = |j: usize| config.rl_batch_size / config.task_batch_size + usize::from(j < config.rl_batch_size % config.task_batch_size);
    let mut step = 0usize;
    let mut paused = Duration::ZERO;
    let mut final_return = None;
    let mut final_accuracy = None;
    let mut last_encoder_loss = f64::NAN;
    let started = Instant::now();

    let result: Result<()> = (|| {
        while step < config.total_steps {
            let batch_tasks = index::sample(&mut sample_rng, n_train, config.task_batch_size).into_vec();
            for _ in 0..config.steps_per_iteration {
                if step >= config.total_steps {
                    break;
                }
                let contexts: Vec<Context> = batch_tasks
                    .iter()
                    .map(|&t| sample_context(&buffers[t].train, config.context_trajectories, &mut sample_rng))
                    .collect();
                let ctx_refs: Vec<&Context> = contexts.iter().collect();
                let z = state.objective.encoder.encode_batch(&state.enc.encoder, &ctx_refs)?.z;

                let mut update_result: Result<()> = Ok(());
                let updated = gated_update(step, &state.objective.config, || {
                    update_result = (|| {
                        let before = state.objective.snapshot(&state.enc, step);
                        let (loss, g) = state.objective.loss_and_grad(&state.enc, &ctx_refs, &batch_tasks)?;
                        last_encoder_loss = finite("encoder loss", loss)?;
                        state.enc_opt[0].step(&mut state.enc.encoder, &g.encoder)?;
                        if state.objective.config.loss_kind.uses_head() {
                            state.enc_opt[1].step(&mut state.enc.head, &g.head)?;
                        }
                        if state.objective.config.loss_kind.uses_decoder() {
                            state.enc_opt[2].step(&mut state.enc.decoder, &g.decoder)?;
                        }
                        let after = state.objective.snapshot(&state.enc, step + 1);
                        let shift = representation_shift(&state.objective.encoder, &before, &after, &probe_refs)?;
                        shift_log.push(step, finite("representation shift", shift)?, true);
                        if state.objective.config.loss_kind.uses_head() {
                            let acc = classification_accuracy(
                                &state.objective.encoder,
                                &state.objective.head,
                                &state.enc.encoder,
                                &state.enc.head,
                                &ctx_refs,
                                &batch_tasks,
                            )?;
                            out.accuracy.write_record([step.to_string(), "batch".into(), acc.to_string()])?;
                        }
                        Ok(())
                    })();
                });
                update_result?;
                if !updated {
                    // parameters untouched, so the shift is exactly zero
                    shift_log.push(step, 0.0, false);
                }

                let mut rows: Vec<(&TransitionRecord, &[f64])> = Vec::with_capacity(config.rl_batch_size);
                for (j, &t) in batch_tasks.iter().enumerate() {
                    let zj = z.row(j).to_slice().expect("contiguous row");
                    for _ in 0..per_task_rows(j) {
                        rows.push((buffers[t].transitions.choose(&mut sample_rng).expect("non-empty buffer"), zj));
                    }
                }
                let mut batch = RlBatch::from_rows(&rows)?;
                batch.rewards *= config.reward_scale;
                let stats = state.agent.train_step(&batch, &mut noise_rng)?;
                for v in [stats.critic_loss, stats.actor_loss, stats.behavior_loss] {
                    finite("rl loss", v)?;
                }
                step += 1;

                if step % config.loss_log_interval == 0 {
                    out.losses.write_record([
                        step.to_string(),
                        last_encoder_loss.to_string(),
                        stats.critic_loss.to_string(),
                        stats.actor_loss.to_string(),
                        stats.behavior_loss.to_string(),
                    ])?;
                }
                if step % config.eval_interval == 0 || step == config.total_steps {
                    let eval_started = Instant::now();
                    let (ret, acc) = evaluate_point(config, data, &state, step, &heldout_refs, &heldout_labels, &mut out, exec)?;
                    final_return = Some(ret);
                    final_accuracy = acc;
                    paused += eval_started.elapsed();
                }
            }
        }
        Ok(())
    })();
    let train_seconds = (started.elapsed() - paused).as_secs_f64();
    if let Err(e) = result {
        write_diagnostic(&dir, step, &e, &state, &digest);
        return Err(e);
    }
    out.returns.flush()?;
    out.accuracy.flush()?;
    out.losses.flush()?;
    shift_log.write_csv(BufWriter::new(File::create(&paths[2])?))?;
    if config.total_steps > 0 {
        checkpoints.push(save_checkpoint(&dir, &format!("checkpoint_{step:07}.ckpt"), &state.checkpoint(step, &digest))?);
    }
    let timing_csv = dir.join("timing.csv");
    let mut t = csv_writer(&timing_csv, &["label", "seed", "total_steps", "encoder_updates", "train_seconds"])?;
    t.write_record([
        label.clone(),
        config.seed.to_string(),
        config.total_steps.to_string(),
        shift_log.update_count().to_string(),
        train_seconds.to_string(),
    ])?;
    t.flush()?;

    let artifacts = RunArtifacts {
        label,
        out_dir: dir.clone(),
        config_digest: digest,
        seed: config.seed,
        update_frequency: config.update_frequency,
        total_steps: config.total_steps,
        encoder_updates: shift_log.update_count(),
        train_seconds,
        config_snapshot: snapshot_path,
        checkpoints,
        returns_csv: paths[0].clone(),
        accuracy_csv: paths[1].clone(),
        shift_csv: paths[2].clone(),
        losses_csv: paths[3].clone(),
        timing_csv,
        final_return,
        final_heldout_accuracy: final_accuracy,
    };
    std::fs::write(dir.join(RUN_JSON), serde_json::to_string_pretty(&artifacts)?)?;
    write_manifest(&artifacts)?;
    Ok(artifacts)
}

/// Test-task returns and held-out accuracy at one evaluation point. Returns
/// the mean test return over tasks.
#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    config: &TrainingConfig,
    data: &TaskData,
    state: &State,
    step: usize,
    heldout: &[&Context],
    heldout_labels: &[usize],
    out: &mut CsvOut,
    exec: Execution,
) -> Result<(f64, Option<f64>)> {
    let actor_net = &state.agent.nets.actor;
    let actor = &state.agent.actor.0;
    let policy_for = |_: &TaskSpec| MeanActor { net: actor_net, params: actor };
    let eval_seed = rng::derive(rng::derive(config.seed, 0xe7a1), step as u64);
    let rows = evaluate_tasks(&data.test, &state.objective.encoder, &state.enc.encoder, &policy_for, config.eval_episodes, eval_seed, exec)?;
    for r in &rows {
        finite("eval return", r.mean_return)?;
        out.returns.write_record([
            step.to_string(),
            r.task_id.to_string(),
            r.mean_return.to_string(),
            r.std_return.to_string(),
            r.context_id.to_string(),
            config.seed.to_string(),
        ])?;
    }
    let mean = rows.iter().map(|r| r.mean_return).sum::<f64>() / rows.len() as f64;
    let acc = if config.loss_kind.uses_head() {
        let acc = classification_accuracy(
            &state.objective.encoder,
            &state.objective.head,
            &state.enc.encoder,
            &state.enc.head,
            heldout,
            heldout_labels,
        )?;
        out.accuracy.write_record([step.to_string(), "heldout".into(), acc.to_string()])?;
        Some(acc)
    } else {
        None
    };
    Ok((mean, acc))
}

/// `manifest.json`: every artifact path with its SHA-256 and the config
/// digest that produced it.
fn write_manifest(a: &RunArtifacts) -> Result<()> {
    let mut files: Vec<&PathBuf> = vec![&a.config_snapshot, &a.returns_csv, &a.accuracy_csv, &a.shift_csv, &a.losses_csv, &a.timing_csv];
    files.extend(&a.checkpoints);
    let entries: Vec<serde_json::Value> = files
        .into_iter()
        .map(|p| -> Result<serde_json::Value> {
            let bytes = std::fs::read(p)?;
            Ok(serde_json::json!({ "path": p, "sha256": sha256_hex(&bytes) }))
        })
        .collect::<Result<_>>()?;
    let manifest = serde_json::json!({ "config_digest": a.config_digest, "seed": a.seed, "artifacts": entries });
    std::fs::write(a.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
