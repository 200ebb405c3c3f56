//! Task sets with their offline datasets, on disk and in memory.

use std::path::Path;

use crate::data::{load_dataset, save_dataset, validate_dataset, DatasetMeta, OfflineTaskDataset};
use crate::envlab::{generate_datasets, make_task_family, BehaviorPolicySpec, TaskFamily, TaskSpec};
use crate::error::{Error, Result};
use crate::par::Execution;

use super::TrainingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub family: TaskFamily,
    pub train: Vec<(TaskSpec, OfflineTaskDataset)>,
    pub test: Vec<(TaskSpec, OfflineTaskDataset)>,
}

impl TaskData {
    /// Draws the task family and rolls out the noisy-expert behavior policy
    /// on every task.
    pub fn generate(
        family: TaskFamily,
        n_train: usize,
        n_test: usize,
        transitions_per_task: usize,
        noise_scale: f64,
        seed: u64,
        exec: Execution,
    ) -> Result<Self> {
        let tasks = make_task_family(family, n_train, n_test, seed)?;
        let datasets = generate_datasets(&tasks, &BehaviorPolicySpec::noisy_expert(noise_scale), transitions_per_task, seed, exec)?;
        let mut pairs: Vec<_> = tasks.into_iter().zip(datasets).collect();
        let test = pairs.split_off(n_train);
        Ok(Self { family, train: pairs, test })
    }

    pub fn for_config(config: &TrainingConfig, exec: Execution) -> Result<Self> {
        Self::generate(
            config.family,
            config.n_train_tasks,
            config.n_test_tasks,
            config.transitions_per_task,
            config.noise_scale,
            config.data_seed,
            exec,
        )
    }

    /// Writes one dataset file and metadata sidecar per task.
    pub fn save(&self, dir: &Path, seed: u64, noise_scale: f64) -> Result<()> {
        let n_train = self.train.len();
        for (split, pairs) in [("train", &self.train), ("test", &self.test)] {
            for (task, ds) in pairs {
                let goal = task.goal_or_direction.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
                let meta = DatasetMeta {
                    family: self.family.name().to_string(),
                    seed,
                    config: vec![
                        ("split".into(), split.into()),
                        ("goal_or_direction".into(), goal),
                        ("n_train".into(), n_train.to_string()),
                        ("n_test".into(), self.test.len().to_string()),
                        ("transitions_per_task".into(), ds.len().to_string()),
                        ("noise_scale".into(), noise_scale.to_string()),
                    ],
                };
                save_dataset(dir, ds, &meta)?;
            }
        }
        Ok(())
    }

    /// Loads tasks `0..n_train + n_test` and checks each dataset.
    pub fn load(dir: &Path, family: TaskFamily, n_train: usize, n_test: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(n_train + n_test);
        for id in 0..n_train + n_test {
            let (ds, meta) = load_dataset(dir, id)?;
            if meta.family != family.name() {
                return Err(Error::format("dataset metadata", format!("task {id} is {} not {}", meta.family, family.name())));
            }
            let goal = meta
                .get("goal_or_direction")
                .ok_or_else(|| Error::format("dataset metadata", format!("task {id} has no goal_or_direction")))?
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| Error::format("dataset metadata", x.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let report = validate_dataset(&ds);
            if !report.is_clean() {
                return Err(Error::format("dataset", format!("task {id}: {:?}", report.findings)));
            }
            let mut task = match family {
                TaskFamily::PointGoal2D => TaskSpec::point_goal(id, 0.0),
                TaskFamily::GridChainDir => TaskSpec::chain(id, true),
            };
            task.goal_or_direction = goal;
            pairs.push((task, ds));
        }
        let test = pairs.split_off(n_train);
        Ok(Self { family, train: pairs, test })
    }
}
