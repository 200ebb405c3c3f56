//! Desk-scale task families and offline dataset generation.
//!
//! Two families are provided:
//!
//! - `PointGoal2D`: a point in the plane moves with velocity commands toward
//!   a goal on the upper unit semicircle; reward is the negative distance to
//!   the goal after the move.
//! - `GridChainDir`: a five-state deterministic chain where the task decides
//!   whether moving left or right is rewarded. It has an exact tabular model
//!   (see [`tabular_mdp_for`]) so the theory lab and the RL code can be
//!   checked against dynamic programming.
//!
//! Discrete actions are carried as real vectors in the `[-1, 1]` box: action
//! `k` is the vector with `+1` at index `k` and `-1` elsewhere, decoded by
//! argmax. States of the chain are one-hot.

mod behavior;
mod tabular;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

pub use behavior::{generate_datasets, rollout_behavior, BehaviorKind, BehaviorPolicySpec, ExpertPolicy};
pub use tabular::TabularMdp;

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Rng};

pub const POINT_DT: f64 = 0.1;
pub const POINT_A_MAX: f64 = 1.0;
pub const POINT_HORIZON: usize = 20;
pub const POINT_GOAL_RADIUS: f64 = 1.0;
pub const POINT_GAMMA: f64 = 0.9;

pub const CHAIN_STATES: usize = 5;
pub const CHAIN_ACTIONS: usize = 2;
pub const CHAIN_START: usize = 2;
pub const CHAIN_HORIZON: usize = 10;
pub const CHAIN_GAMMA: f64 = 0.9;
pub const CHAIN_REWARD_WITH: f64 = 1.0;
pub const CHAIN_REWARD_AGAINST: f64 = -0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    PointGoal2D,
    GridChainDir,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::PointGoal2D => "point_goal_2d",
            TaskFamily::GridChainDir => "grid_chain_dir",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            TaskFamily::PointGoal2D => 2,
            TaskFamily::GridChainDir => CHAIN_STATES,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            TaskFamily::PointGoal2D => 2,
            TaskFamily::GridChainDir => CHAIN_ACTIONS,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            TaskFamily::PointGoal2D => POINT_HORIZON,
            TaskFamily::GridChainDir => CHAIN_HORIZON,
        }
    }

    pub fn gamma(self) -> f64 {
        match self {
            TaskFamily::PointGoal2D => POINT_GAMMA,
            TaskFamily::GridChainDir => CHAIN_GAMMA,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "point_goal_2d" | "pointgoal2d" | "point" => Ok(TaskFamily::PointGoal2D),
            "grid_chain_dir" | "gridchaindir" | "chain" => Ok(TaskFamily::GridChainDir),
            _ => Err(Error::UnknownFamily(s.to_string())),
        }
    }
}

/// One task `m` drawn from the family distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub task_id: usize,
    /// Goal position for `PointGoal2D`, `[+1]` (right) or `[-1]` (left) for
    /// `GridChainDir`.
    pub goal_or_direction: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

impl TaskSpec {
    pub fn point_goal(task_id: usize, angle: f64) -> Self {
        Self {
            family: TaskFamily::PointGoal2D,
            task_id,
            goal_or_direction: vec![POINT_GOAL_RADIUS * angle.cos(), POINT_GOAL_RADIUS * angle.sin()],
            horizon: POINT_HORIZON,
            gamma: POINT_GAMMA,
        }
    }

    pub fn chain(task_id: usize, rightward: bool) -> Self {
        Self {
            family: TaskFamily::GridChainDir,
            task_id,
            goal_or_direction: vec![if rightward { 1.0 } else { -1.0 }],
            horizon: CHAIN_HORIZON,
            gamma: CHAIN_GAMMA,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.family.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.family.action_dim()
    }

    /// Index of the rewarded chain action.
    fn chain_rewarded_action(&self) -> usize {
        if self.goal_or_direction[0] > 0.0 {
            1
        } else {
            0
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match self.family {
            TaskFamily::PointGoal2D => vec![0.0, 0.0],
            TaskFamily::GridChainDir => one_hot(CHAIN_START, CHAIN_STATES),
        }
    }
}

/// Draws `n_train + n_test` tasks; training tasks get ids `0..n_train`.
pub fn make_task_family(family: TaskFamily, n_train: usize, n_test: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("n_train and n_test must be at least 1"));
    }
    let mut rng = rng::seeded(rng::derive(seed, 0x7a5c));
    Ok((0..n_train + n_test)
        .map(|id| match family {
            TaskFamily::PointGoal2D => TaskSpec::point_goal(id, rng.random_range(0.0..=PI)),
            TaskFamily::GridChainDir => TaskSpec::chain(id, rng.random_bool(0.5)),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Advances `task` from `state` at time `t` (0-based). The episode ends when
/// `t + 1` reaches the horizon.
pub fn env_step(task: &TaskSpec, state: &[f64], action: &[f64], t: usize, rng: &mut Rng) -> Result<StepOutcome> {
    check_dim("env state", task.state_dim(), state.len())?;
    check_dim("env action", task.action_dim(), action.len())?;
    let done = t + 1 >= task.horizon;
    match task.family {
        TaskFamily::PointGoal2D => {
            let next_state: Vec<f64> = state
                .iter()
                .zip(action)
                .map(|(s, a)| s + a.clamp(-POINT_A_MAX, POINT_A_MAX) * POINT_DT)
                .collect();
            let reward = -euclid(&next_state, &task.goal_or_direction);
            Ok(StepOutcome { next_state, reward, done })
        }
        TaskFamily::GridChainDir => {
            let s = argmax(state);
            let a = argmax(action);
            let next = chain_successor(s, a, rng);
            let reward = if a == task.chain_rewarded_action() {
                CHAIN_REWARD_WITH
            } else {
                CHAIN_REWARD_AGAINST
            };
            Ok(StepOutcome {
                next_state: one_hot(next, CHAIN_STATES),
                reward,
                done,
            })
        }
    }
}

/// Samples the chain successor from its transition row. The chain is
/// deterministic, but sampling goes through the row so the tabular model and
/// the simulator share one definition.
fn chain_successor(s: usize, a: usize, rng: &mut Rng) -> usize {
    let row = chain_row(s, a);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (next, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return next;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(s)
}

fn chain_row(s: usize, a: usize) -> [f64; CHAIN_STATES] {
    let mut row = [0.0; CHAIN_STATES];
    let next = if a == 1 {
        (s + 1).min(CHAIN_STATES - 1)
    } else {
        s.saturating_sub(1)
    };
    row[next] = 1.0;
    row
}

/// Exact tabular model of a `GridChainDir` task.
pub fn tabular_mdp_for(task: &TaskSpec) -> Result<TabularMdp> {
    if task.family != TaskFamily::GridChainDir {
        return Err(Error::invalid(format!("{} has no tabular model", task.family)));
    }
    let mut transition = Vec::with_capacity(CHAIN_STATES * CHAIN_ACTIONS * CHAIN_STATES);
    let mut reward = Vec::with_capacity(CHAIN_STATES * CHAIN_ACTIONS);
    let rewarded = task.chain_rewarded_action();
    for s in 0..CHAIN_STATES {
        for a in 0..CHAIN_ACTIONS {
            transition.extend_from_slice(&chain_row(s, a));
            reward.push(if a == rewarded { CHAIN_REWARD_WITH } else { CHAIN_REWARD_AGAINST });
        }
    }
    TabularMdp::new(
        CHAIN_STATES,
        CHAIN_ACTIONS,
        transition,
        reward,
        one_hot(CHAIN_START, CHAIN_STATES),
        task.gamma,
    )
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// Box-encoded discrete action: `+1` at `index`, `-1` elsewhere.
pub fn signed_one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![-1.0; n];
    v[index] = 1.0;
    v
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_family_has_forty_tasks_on_semicircle() {
        let tasks = make_task_family(TaskFamily::PointGoal2D, 20, 20, 0).unwrap();
        assert_eq!(tasks.len(), 40);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.task_id, i);
            let g = &t.goal_or_direction;
            assert!((g[0].hypot(g[1]) - 1.0).abs() < 1e-12);
            assert!(g[1] >= 0.0);
        }
        let mut goals: Vec<_> = tasks.iter().map(|t| t.goal_or_direction[0]).collect();
        goals.sort_by(f64::total_cmp);
        goals.dedup();
        assert_eq!(goals.len(), 40);
    }

    #[test]
    fn task_family_is_deterministic() {
        let a = make_task_family(TaskFamily::PointGoal2D, 20, 20, 11).unwrap();
        let b = make_task_family(TaskFamily::PointGoal2D, 20, 20, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_directions_are_left_or_right() {
        let tasks = make_task_family(TaskFamily::GridChainDir, 2, 2, 5).unwrap();
        assert_eq!(tasks.len(), 4);
        for t in &tasks {
            assert!(t.goal_or_direction == [1.0] || t.goal_or_direction == [-1.0]);
        }
    }

    #[test]
    fn unknown_family_and_empty_split_rejected() {
        assert!(matches!("mujoco".parse::<TaskFamily>(), Err(Error::UnknownFamily(_))));
        assert!(make_task_family(TaskFamily::PointGoal2D, 0, 3, 0).is_err());
    }

    #[test]
    fn zero_action_stays_put() {
        let task = TaskSpec::point_goal(0, 0.7);
        let mut rng = rng::seeded(0);
        let out = env_step(&task, &[0.0, 0.0], &[0.0, 0.0], 0, &mut rng).unwrap();
        assert_eq!(out.next_state, vec![0.0, 0.0]);
        assert_eq!(out.reward, -1.0);
        let goal = task.goal_or_direction.clone();
        let out = env_step(&task, &goal, &[0.0, 0.0], 0, &mut rng).unwrap();
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn point_action_is_clipped_and_done_at_horizon() {
        let task = TaskSpec::point_goal(0, 0.0);
        let mut rng = rng::seeded(0);
        let out = env_step(&task, &[0.0, 0.0], &[5.0, -5.0], POINT_HORIZON - 1, &mut rng).unwrap();
        assert_eq!(out.next_state, vec![0.1, -0.1]);
        assert!(out.done);
        assert!(env_step(&task, &[0.0], &[0.0, 0.0], 0, &mut rng).is_err());
    }

    #[test]
    fn chain_step_follows_unique_successor() {
        let task = TaskSpec::chain(0, true);
        let mut rng = rng::seeded(1);
        let out = env_step(&task, &one_hot(2, 5), &signed_one_hot(1, 2), 0, &mut rng).unwrap();
        assert_eq!(out.next_state, one_hot(3, 5));
        assert_eq!(out.reward, 1.0);
        let out = env_step(&task, &one_hot(0, 5), &signed_one_hot(0, 2), 0, &mut rng).unwrap();
        assert_eq!(out.next_state, one_hot(0, 5));
        assert_eq!(out.reward, -0.1);
    }

    #[test]
    fn chain_tabular_model() {
        let right = tabular_mdp_for(&TaskSpec::chain(0, true)).unwrap();
        let left = tabular_mdp_for(&TaskSpec::chain(1, false)).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                assert!((right.p_row(s, a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(right.r(s, a) > 0.0, a == 1);
                assert_eq!(left.r(s, a), right.r(s, 1 - a));
            }
        }
        assert_eq!(right.transition, left.transition);
        assert!(tabular_mdp_for(&TaskSpec::point_goal(0, 1.0)).is_err());
    }

    #[test]
    fn chain_empirical_frequencies_match_model() {
        let task = TaskSpec::chain(0, false);
        let mdp = tabular_mdp_for(&task).unwrap();
        let mut rng = rng::seeded(9);
        let pairs = CHAIN_STATES * CHAIN_ACTIONS;
        let per_pair = 100_000 / pairs;
        for s in 0..CHAIN_STATES {
            for a in 0..CHAIN_ACTIONS {
                let mut counts = [0usize; CHAIN_STATES];
                for _ in 0..per_pair {
                    let out = env_step(&task, &one_hot(s, 5), &signed_one_hot(a, 2), 0, &mut rng).unwrap();
                    counts[argmax(&out.next_state)] += 1;
                }
                let l1: f64 = counts
                    .iter()
                    .zip(mdp.p_row(s, a))
                    .map(|(&c, p)| (c as f64 / per_pair as f64 - p).abs())
                    .sum();
                assert!(l1 <= 0.02, "L1 {l1} at ({s},{a})");
            }
        }
    }
}
