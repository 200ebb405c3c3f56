use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{env_step, signed_one_hot, TaskFamily, TaskSpec, POINT_A_MAX, POINT_DT};
use crate::data::{OfflineTaskDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    NoisyExpert,
    UniformRandom,
    /// Each trajectory is noisy-expert with probability `mixture_weight`,
    /// uniform-random otherwise.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorPolicySpec {
    pub kind: BehaviorKind,
    pub noise_scale: f64,
    pub mixture_weight: f64,
}

impl BehaviorPolicySpec {
    pub fn noisy_expert(noise_scale: f64) -> Self {
        Self {
            kind: BehaviorKind::NoisyExpert,
            noise_scale,
            mixture_weight: 1.0,
        }
    }

    pub fn uniform_random() -> Self {
        Self {
            kind: BehaviorKind::UniformRandom,
            noise_scale: 0.0,
            mixture_weight: 0.0,
        }
    }

    pub fn mixture(noise_scale: f64, mixture_weight: f64) -> Self {
        Self {
            kind: BehaviorKind::Mixture,
            noise_scale,
            mixture_weight,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise_scale must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mixture_weight) {
            return Err(Error::invalid("mixture_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Analytic goal-seeking controller for a task.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub task: TaskSpec,
}

impl ExpertPolicy {
    pub fn new(task: TaskSpec) -> Self {
        Self { task }
    }

    pub fn action(&self, state: &[f64]) -> Vec<f64> {
        match self.task.family {
            TaskFamily::PointGoal2D => state
                .iter()
                .zip(&self.task.goal_or_direction)
                .map(|(s, g)| ((g - s) / POINT_DT).clamp(-POINT_A_MAX, POINT_A_MAX))
                .collect(),
            TaskFamily::GridChainDir => signed_one_hot(self.task.chain_rewarded_action(), 2),
        }
    }
}

fn random_action(task: &TaskSpec, rng: &mut Rng) -> Vec<f64> {
    match task.family {
        TaskFamily::PointGoal2D => (0..2).map(|_| rng.random_range(-POINT_A_MAX..=POINT_A_MAX)).collect(),
        TaskFamily::GridChainDir => signed_one_hot(rng.random_range(0..2), 2),
    }
}

fn noisy_expert_action(expert: &ExpertPolicy, state: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    let clean = expert.action(state);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|a| a + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    match expert.task.family {
        TaskFamily::PointGoal2D => noisy.iter().map(|a| a.clamp(-POINT_A_MAX, POINT_A_MAX)).collect(),
        TaskFamily::GridChainDir => signed_one_hot(super::argmax(&noisy), 2),
    }
}

/// Collects `n_transitions` transitions of complete episodes from a scripted
/// behavior policy. `n_transitions` must be a positive multiple of the
/// horizon.
pub fn rollout_behavior(
    task: &TaskSpec,
    policy: &BehaviorPolicySpec,
    n_transitions: usize,
    seed: u64,
) -> Result<OfflineTaskDataset> {
    policy.validate()?;
    if n_transitions < task.horizon || n_transitions % task.horizon != 0 {
        return Err(Error::invalid(format!(
            "n_transitions {n_transitions} is not a positive multiple of horizon {}",
            task.horizon
        )));
    }
    let mut rng = rng::stream(seed, task.task_id as u64);
    let expert = ExpertPolicy::new(task.clone());
    let mut transitions = Vec::with_capacity(n_transitions);
    for _ in 0..n_transitions / task.horizon {
        let expert_episode = match policy.kind {
            BehaviorKind::NoisyExpert => true,
            BehaviorKind::UniformRandom => false,
            BehaviorKind::Mixture => rng.random_bool(policy.mixture_weight),
        };
        let mut state = task.initial_state();
        for t in 0..task.horizon {
            let action = if expert_episode {
                noisy_expert_action(&expert, &state, policy.noise_scale, &mut rng)
            } else {
                random_action(task, &mut rng)
            };
            let out = env_step(task, &state, &action, t, &mut rng)?;
            transitions.push(TransitionRecord {
                state: std::mem::replace(&mut state, out.next_state.clone()),
                action,
                reward: out.reward,
                next_state: out.next_state,
                done: out.done,
                task_id: task.task_id,
            });
        }
    }
    Ok(OfflineTaskDataset {
        task_id: task.task_id,
        state_dim: task.state_dim(),
        action_dim: task.action_dim(),
        transitions,
    })
}

/// Generates one dataset per task, each from its own seeded stream.
pub fn generate_datasets(
    tasks: &[TaskSpec],
    policy: &BehaviorPolicySpec,
    n_transitions: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<OfflineTaskDataset>> {
    par::map_slice(tasks, exec, |t| rollout_behavior(t, policy, n_transitions, seed))
        .into_iter()
        .collect()
}
