use std::path::Path;

use retro_core::data::Trajectory;
use retro_core::envlab::{ExpertPolicy, TaskFamily};
use retro_core::harness::{
    emit_plot_data, meta_test_with, report_walltime, run_ablation_frequency, run_meta_test, run_training, RunArtifacts, TaskData,
    TrainingConfig, METRIC_CSVS,
};
use retro_core::offlinerl::evaluate_policy;
use retro_core::par::Execution;
use retro_core::taskenc::{EncoderConfig, TaskEncoder};
use retro_core::Error;

const SEQ: Execution = Execution::Sequential;

/// Small nets and datasets so a run of a few hundred steps takes seconds.
fn small(out: &Path) -> TrainingConfig {
    let mut c = TrainingConfig::desk();
    c.n_train_tasks = 6;
    c.n_test_tasks = 3;
    c.transitions_per_task = 400;
    c.holdout_trajectories = 4;
    c.task_batch_size = 4;
    c.rl_batch_size = 32;
    c.encoder_hidden = vec![8];
    c.actor_hidden = vec![8];
    c.critic_hidden = vec![8];
    c.steps_per_iteration = 10;
    c.eval_interval = 50;
    c.eval_episodes = 2;
    c.n_probe_contexts = 8;
    c.loss_log_interval = 10;
    c.total_steps = 100;
    c.out_dir = out.to_path_buf();
    c
}

fn data_for(c: &TrainingConfig) -> TaskData {
    TaskData::for_config(c, SEQ).unwrap()
}

fn shift_rows(a: &RunArtifacts) -> Vec<(usize, f64, bool)> {
    let mut r = csv::Reader::from_path(&a.shift_csv).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), &rec[2] == "1")
        })
        .collect()
}

#[test]
fn frequency_two_over_thousand_steps_logs_five_hundred_updates() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.total_steps = 1000;
    c.eval_interval = 1000;
    c.update_frequency = 2;
    let a = run_training(&c, &data_for(&c), SEQ).unwrap();
    assert_eq!(a.encoder_updates, 500);
    let rows = shift_rows(&a);
    assert_eq!(rows.len(), 1000);
    assert_eq!(rows.iter().filter(|r| r.2).count(), 500);
    for (i, (step, shift, updated)) in rows.iter().enumerate() {
        assert_eq!(*step, i);
        assert_eq!(*updated, i % 2 == 0);
        if !updated {
            assert_eq!(*shift, 0.0);
        }
    }
}

#[test]
fn update_count_is_ceiling_of_steps_over_frequency() {
    let data = data_for(&small(Path::new(".")));
    for f in [1, 2, 4, 8] {
        for t in [1, 7, 37] {
            let dir = tempfile::tempdir().unwrap();
            let mut c = small(dir.path());
            c.update_frequency = f;
            c.total_steps = t;
            let a = run_training(&c, &data, SEQ).unwrap();
            assert_eq!(a.encoder_updates, t.div_ceil(f), "f={f} T={t}");
        }
    }
}

#[test]
fn zero_steps_leave_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.total_steps = 0;
    let a = run_training(&c, &data_for(&c), SEQ).unwrap();
    assert_eq!(a.checkpoints.len(), 1);
    assert!(a.checkpoints[0].exists());
    assert_eq!(a.encoder_updates, 0);
    assert_eq!(a.final_return, None);
    assert_eq!(shift_rows(&a).len(), 0);
    let loaded = RunArtifacts::load(dir.path()).unwrap();
    assert_eq!(loaded, a);
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c1 = small(d1.path());
    let c2 = small(d2.path());
    let data = data_for(&c1);
    let a = run_training(&c1, &data, SEQ).unwrap();
    let b = run_training(&c2, &data, Execution::Parallel).unwrap();
    for f in METRIC_CSVS {
        let x = std::fs::read(d1.path().join(f)).unwrap();
        let y = std::fs::read(d2.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
    assert_eq!(std::fs::read(a.final_checkpoint()).unwrap(), std::fs::read(b.final_checkpoint()).unwrap());
    assert_eq!(a.config_digest, b.config_digest);
}

#[test]
fn different_seeds_give_different_metrics() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c1 = small(d1.path());
    let mut c2 = small(d2.path());
    c2.seed = 1;
    let data = data_for(&c1);
    run_training(&c1, &data, SEQ).unwrap();
    run_training(&c2, &data, SEQ).unwrap();
    let x = std::fs::read(d1.path().join("losses.csv")).unwrap();
    let y = std::fs::read(d2.path().join("losses.csv")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn artifacts_carry_the_config_digest() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let a = run_training(&c, &data_for(&c), SEQ).unwrap();
    assert_eq!(a.config_digest, c.digest());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_digest"], c.digest());
    let listed = manifest["artifacts"].as_array().unwrap();
    assert_eq!(listed.len(), 6 + a.checkpoints.len());
    for ck in &a.checkpoints {
        let ckpt = retro_core::nn::read_checkpoint(std::fs::File::open(ck).unwrap()).unwrap();
        assert_eq!(ckpt.config_digest, c.digest());
    }
    let snapshot = TrainingConfig::parse(&std::fs::read_to_string(&a.config_snapshot).unwrap()).unwrap();
    assert_eq!(snapshot.digest(), c.digest());
}

#[test]
fn metric_csvs_are_finite_and_accuracy_is_logged_at_updates() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.update_frequency = 4;
    let a = run_training(&c, &data_for(&c), SEQ).unwrap();
    for f in METRIC_CSVS {
        let mut r = csv::Reader::from_path(dir.path().join(f)).unwrap();
        for rec in r.records() {
            for cell in rec.unwrap().iter() {
                if let Ok(v) = cell.parse::<f64>() {
                    assert!(v.is_finite(), "{f}: {cell}");
                }
            }
        }
    }
    let mut r = csv::Reader::from_path(&a.accuracy_csv).unwrap();
    let batch_steps: Vec<usize> = r
        .records()
        .map(|x| x.unwrap())
        .filter(|x| &x[1] == "batch")
        .map(|x| x[0].parse().unwrap())
        .collect();
    assert_eq!(batch_steps, (0..100).step_by(4).collect::<Vec<_>>());
    let acc = a.final_heldout_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.reward_scale = 1e300;
    let err = run_training(&c, &data_for(&c), SEQ).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(dir.path().join("diagnostic.json").exists());
    let diag = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("diagnostic_"))
        .count();
    assert_eq!(diag, 1);
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = TaskData::load(dir.path(), TaskFamily::PointGoal2D, 2, 2).unwrap_err();
    assert!(matches!(err, Error::MissingDataset { .. }), "{err}");
}

#[test]
fn task_data_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let data = data_for(&c);
    data.save(dir.path(), c.data_seed, c.noise_scale).unwrap();
    let back = TaskData::load(dir.path(), c.family, c.n_train_tasks, c.n_test_tasks).unwrap();
    assert_eq!(back, data);
}

#[test]
fn mismatched_task_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let data = data_for(&c);
    let mut other = c.clone();
    other.n_train_tasks = 5;
    assert!(run_training(&other, &data, SEQ).is_err());
}

#[test]
fn meta_test_with_expert_equals_expert_return() {
    let c = small(Path::new("."));
    let data = data_for(&c);
    let encoder = TaskEncoder::new(2, 2, &EncoderConfig::default()).unwrap();
    let params = vec![0.0; encoder.n_params()];
    let policy_for = |t: &retro_core::envlab::TaskSpec| ExpertPolicy::new(t.clone());
    let report = meta_test_with(&data.test, &encoder, &params, &policy_for, 1, 3, SEQ).unwrap();
    assert_eq!(report.rows.len(), data.test.len());
    let mut expert = Vec::new();
    for ((task, ds), row) in data.test.iter().zip(&report.rows) {
        assert_eq!(row.std_return, 0.0);
        let ctx: Trajectory = ds.trajectory(ds.trajectory_ranges()[row.context_id].clone());
        let r = evaluate_policy(task, &encoder, &params, &ExpertPolicy::new(task.clone()), &ctx, 1, 0).unwrap();
        // the point environment is deterministic, so the seed is irrelevant
        assert_eq!(r.mean_return, row.mean_return);
        expert.push(r.mean_return);
    }
    let mean = expert.iter().sum::<f64>() / expert.len() as f64;
    assert!((report.mean_return - mean).abs() < 1e-12);
}

#[test]
fn meta_test_loads_the_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let data = data_for(&c);
    let a = run_training(&c, &data, SEQ).unwrap();
    let r1 = run_meta_test(&a, &data, 1, 5, SEQ).unwrap();
    let r2 = run_meta_test(&RunArtifacts::load(dir.path()).unwrap(), &data, 1, 5, SEQ).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.rows.len(), c.n_test_tasks);
    assert!(r1.rows.iter().all(|r| r.std_return == 0.0 && r.mean_return.is_finite()));
    assert!(meta_test_with(&[], &TaskEncoder::new(2, 2, &EncoderConfig::default()).unwrap(), &[], &|t: &retro_core::envlab::TaskSpec| ExpertPolicy::new(t.clone()), 1, 0, SEQ).is_err());
}

#[test]
fn ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.total_steps = 40;
    let data = data_for(&c);
    let single = run_ablation_frequency(&c, &data, &[1], &[0], SEQ).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert_eq!(single.rows[0].encoder_updates, 40);
    let pair = run_ablation_frequency(&c, &data, &[1, 2], &[0, 1], SEQ).unwrap();
    assert_eq!(pair.rows.len(), 4);
    assert_eq!(pair.summary.len(), 2);
    assert!(pair.summary[1].encoder_updates * 2 <= pair.summary[0].encoder_updates);
    assert!(pair.all_finite());
    assert!(dir.path().join("ablation.csv").exists());
    assert!(run_ablation_frequency(&c, &data, &[3], &[0], SEQ).is_err());
}

#[test]
fn walltime_table() {
    let root = tempfile::tempdir().unwrap();
    let data = data_for(&small(root.path()));
    let runs: Vec<RunArtifacts> = [1, 8]
        .iter()
        .map(|&f| {
            let mut c = small(&root.path().join(f.to_string()));
            c.update_frequency = f;
            run_training(&c, &data, SEQ).unwrap()
        })
        .collect();
    let t = report_walltime(&runs).unwrap();
    assert_eq!(t.rows[0].ratio, 1.0);
    let fewest = t.rows.iter().min_by_key(|r| r.encoder_updates).unwrap();
    assert_eq!(fewest.label, "classifier_f8");
    assert!(report_walltime(&runs[..1]).is_err());
    let mut other = runs[1].clone();
    other.total_steps += 1;
    assert!(report_walltime(&[runs[0].clone(), other]).is_err());
}

#[test]
fn plot_data_aggregates_over_seeds() {
    let root = tempfile::tempdir().unwrap();
    let data = data_for(&small(root.path()));
    let runs: Vec<RunArtifacts> = (0..2)
        .map(|seed| {
            let mut c = small(&root.path().join(seed.to_string()));
            c.seed = seed;
            run_training(&c, &data, SEQ).unwrap()
        })
        .collect();
    let p = emit_plot_data(&runs).unwrap();
    let ret: Vec<_> = p.summary.iter().filter(|r| r.metric == "return").collect();
    assert_eq!(ret.iter().map(|r| r.step).collect::<Vec<_>>(), vec![50, 100]);
    assert!(ret.iter().all(|r| r.n == 2));
    let one = emit_plot_data(&runs[..1]).unwrap();
    assert!(one.summary.iter().all(|r| r.n == 1 && r.std == 0.0));
    assert!(emit_plot_data(&[]).is_err());
}

#[test]
fn plot_data_resamples_to_the_coarsest_grid() {
    let root = tempfile::tempdir().unwrap();
    let data = data_for(&small(root.path()));
    let runs: Vec<RunArtifacts> = [(0, 25), (1, 50)]
        .iter()
        .map(|&(seed, every)| {
            let mut c = small(&root.path().join(seed.to_string()));
            c.seed = seed;
            c.eval_interval = every;
            run_training(&c, &data, SEQ).unwrap()
        })
        .collect();
    let p = emit_plot_data(&runs).unwrap();
    let steps: Vec<usize> = p.summary.iter().filter(|r| r.metric == "return").map(|r| r.step).collect();
    assert_eq!(steps, vec![50, 100]);
}
