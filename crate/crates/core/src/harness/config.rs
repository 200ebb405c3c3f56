//! Run configuration and its flat sectioned `key = value` file format.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::envlab::TaskFamily;
use crate::error::{Error, Result};
use crate::offlinerl::BracConfig;
use crate::taskenc::{EncoderConfig, LossKind};
use crate::theory::config_digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The published hyperparameter table.
    Paper,
    /// Smaller networks and a short budget for a laptop.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::invalid(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub preset: Preset,
    pub label: Option<String>,
    // [data]
    pub family: TaskFamily,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub transitions_per_task: usize,
    pub noise_scale: f64,
    pub data_seed: u64,
    /// Trajectories per training task held out for accuracy and probes.
    pub holdout_trajectories: usize,
    // [encoder]
    pub loss_kind: LossKind,
    pub update_frequency: usize,
    pub d_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub encoder_learning_rate: f64,
    // [rl]
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub alpha_kl: f64,
    pub tau: f64,
    pub reward_scale: f64,
    pub rl_batch_size: usize,
    // [run]
    pub task_batch_size: usize,
    pub context_trajectories: usize,
    pub total_steps: usize,
    pub steps_per_iteration: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub n_probe_contexts: usize,
    pub loss_log_interval: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
}

impl TrainingConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = Self {
            preset,
            label: None,
            family: TaskFamily::PointGoal2D,
            n_train_tasks: 20,
            n_test_tasks: 20,
            transitions_per_task: 2100,
            noise_scale: 0.1,
            data_seed: 0,
            holdout_trajectories: 10,
            loss_kind: LossKind::Classifier,
            update_frequency: 2,
            d_z: 5,
            encoder_hidden: vec![64, 64],
            encoder_learning_rate: 1e-3,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            learning_rate: 1e-3,
            alpha_kl: 0.1,
            tau: 0.005,
            reward_scale: 1.0,
            rl_batch_size: 256,
            task_batch_size: 16,
            context_trajectories: 1,
            total_steps: 24_000,
            steps_per_iteration: 10,
            eval_interval: 500,
            eval_episodes: 10,
            n_probe_contexts: 32,
            loss_log_interval: 50,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Self {
                actor_hidden: vec![256, 256],
                critic_hidden: vec![256, 256],
                learning_rate: 4e-3,
                encoder_learning_rate: 4e-3,
                total_steps: 100_000,
                steps_per_iteration: 100,
                ..desk
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn paper() -> Self {
        Self::preset(Preset::Paper)
    }

    /// `classifier` at frequency 1, `retro` at frequency 2, otherwise
    /// `<loss>_f<frequency>`, unless set explicitly.
    pub fn run_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match (self.loss_kind, self.update_frequency) {
            (LossKind::Classifier, 1) => "classifier".into(),
            (LossKind::Classifier, 2) => "retro".into(),
            (k, f) => format!("{}_f{f}", k.name()),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_z: self.d_z,
            hidden: self.encoder_hidden.clone(),
            loss_kind: self.loss_kind,
            update_frequency: self.update_frequency,
            ..EncoderConfig::default()
        }
    }

    pub fn brac_config(&self) -> BracConfig {
        BracConfig {
            actor_hidden: self.actor_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            learning_rate: self.learning_rate,
            gamma: self.family.gamma(),
            tau: self.tau,
            alpha_kl: self.alpha_kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train_tasks", self.n_train_tasks),
            ("n_test_tasks", self.n_test_tasks),
            ("update_frequency", self.update_frequency),
            ("d_z", self.d_z),
            ("rl_batch_size", self.rl_batch_size),
            ("task_batch_size", self.task_batch_size),
            ("context_trajectories", self.context_trajectories),
            ("steps_per_iteration", self.steps_per_iteration),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("n_probe_contexts", self.n_probe_contexts),
            ("loss_log_interval", self.loss_log_interval),
            ("holdout_trajectories", self.holdout_trajectories),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.task_batch_size > self.n_train_tasks {
            return Err(Error::invalid("task_batch_size exceeds n_train_tasks"));
        }
        let horizon = self.family.horizon();
        let n_traj = self.transitions_per_task / horizon;
        if self.transitions_per_task % horizon != 0 || n_traj <= self.holdout_trajectories + self.context_trajectories - 1 {
            return Err(Error::invalid("transitions_per_task leaves no training trajectories after the holdout"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("encoder_learning_rate", self.encoder_learning_rate),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) || !(self.alpha_kl >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("tau, alpha_kl or noise_scale out of range"));
        }
        Ok(())
    }

    /// Canonical text form. Paths are written only when `with_paths`.
    pub fn to_text_with(&self, with_paths: bool) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset.name());
        if let Some(l) = &self.label {
            let _ = writeln!(s, "label = {l}");
        }
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "family = {}", self.family.name());
        let _ = writeln!(s, "n_train_tasks = {}", self.n_train_tasks);
        let _ = writeln!(s, "n_test_tasks = {}", self.n_test_tasks);
        let _ = writeln!(s, "transitions_per_task = {}", self.transitions_per_task);
        let _ = writeln!(s, "noise_scale = {}", self.noise_scale);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        let _ = writeln!(s, "holdout_trajectories = {}", self.holdout_trajectories);
        let _ = writeln!(s, "\n[encoder]");
        let _ = writeln!(s, "loss_kind = {}", self.loss_kind.name());
        let _ = writeln!(s, "update_frequency = {}", self.update_frequency);
        let _ = writeln!(s, "d_z = {}", self.d_z);
        let _ = writeln!(s, "hidden = {}", list(&self.encoder_hidden));
        let _ = writeln!(s, "learning_rate = {}", self.encoder_learning_rate);
        let _ = writeln!(s, "\n[rl]");
        let _ = writeln!(s, "actor_hidden = {}", list(&self.actor_hidden));
        let _ = writeln!(s, "critic_hidden = {}", list(&self.critic_hidden));
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "alpha_kl = {}", self.alpha_kl);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "reward_scale = {}", self.reward_scale);
        let _ = writeln!(s, "rl_batch_size = {}", self.rl_batch_size);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "task_batch_size = {}", self.task_batch_size);
        let _ = writeln!(s, "context_trajectories = {}", self.context_trajectories);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "steps_per_iteration = {}", self.steps_per_iteration);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "n_probe_contexts = {}", self.n_probe_contexts);
        let _ = writeln!(s, "loss_log_interval = {}", self.loss_log_interval);
        let _ = writeln!(s, "seed = {}", self.seed);
        if with_paths {
            let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
            if let Some(d) = &self.data_dir {
                let _ = writeln!(s, "data_dir = {}", d.display());
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        self.to_text_with(true)
    }

    /// Digest of everything except output and data paths.
    pub fn digest(&self) -> String {
        config_digest(&self.to_text_with(false))
    }

    /// Parses the file format. A top-level `preset` line (default `desk`)
    /// selects the base values; every other key overrides one field.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let preset = lines
            .iter()
            .take_while(|(_, l)| !l.starts_with('['))
            .find_map(|(_, l)| l.split_once('=').filter(|(k, _)| k.trim() == "preset").map(|(_, v)| v.trim()))
            .map(Preset::from_str)
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset);
        let mut section = String::new();
        for (line_no, line) in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {line_no}: expected key = value")))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v.trim())
                .map_err(|e| Error::format("config", format!("line {line_no}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key` (or top-level key) from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "preset" => {
                Preset::from_str(value)?;
            }
            "label" => self.label = Some(value.to_string()),
            "data.family" => self.family = value.parse()?,
            "data.n_train_tasks" => self.n_train_tasks = num(key, value)?,
            "data.n_test_tasks" => self.n_test_tasks = num(key, value)?,
            "data.transitions_per_task" => self.transitions_per_task = num(key, value)?,
            "data.noise_scale" => self.noise_scale = num(key, value)?,
            "data.data_seed" => self.data_seed = num(key, value)?,
            "data.holdout_trajectories" => self.holdout_trajectories = num(key, value)?,
            "encoder.loss_kind" => self.loss_kind = value.parse()?,
            "encoder.update_frequency" => self.update_frequency = num(key, value)?,
            "encoder.d_z" => self.d_z = num(key, value)?,
            "encoder.hidden" => self.encoder_hidden = list(key, value)?,
            "encoder.learning_rate" => self.encoder_learning_rate = num(key, value)?,
            "rl.actor_hidden" => self.actor_hidden = list(key, value)?,
            "rl.critic_hidden" => self.critic_hidden = list(key, value)?,
            "rl.learning_rate" => self.learning_rate = num(key, value)?,
            "rl.alpha_kl" => self.alpha_kl = num(key, value)?,
            "rl.tau" => self.tau = num(key, value)?,
            "rl.reward_scale" => self.reward_scale = num(key, value)?,
            "rl.rl_batch_size" => self.rl_batch_size = num(key, value)?,
            "run.task_batch_size" => self.task_batch_size = num(key, value)?,
            "run.context_trajectories" => self.context_trajectories = num(key, value)?,
            "run.total_steps" => self.total_steps = num(key, value)?,
            "run.steps_per_iteration" => self.steps_per_iteration = num(key, value)?,
            "run.eval_interval" => self.eval_interval = num(key, value)?,
            "run.eval_episodes" => self.eval_episodes = num(key, value)?,
            "run.n_probe_contexts" => self.n_probe_contexts = num(key, value)?,
            "run.loss_log_interval" => self.loss_log_interval = num(key, value)?,
            "run.seed" => self.seed = num(key, value)?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "run.data_dir" => self.data_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::invalid(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_mirrors_the_table() {
        let p = TrainingConfig::paper();
        assert_eq!((p.n_train_tasks, p.n_test_tasks), (20, 20));
        assert_eq!((p.task_batch_size, p.rl_batch_size), (16, 256));
        assert_eq!(p.context_trajectories, 1);
        assert_eq!(p.actor_hidden, vec![256, 256]);
        assert_eq!(p.critic_hidden, vec![256, 256]);
        assert_eq!(p.encoder_hidden, vec![64, 64]);
        assert_eq!((p.learning_rate, p.encoder_learning_rate), (4e-3, 4e-3));
        assert_eq!((p.transitions_per_task, p.d_z), (2100, 5));
        let snap = p.to_text();
        for line in ["task_batch_size = 16", "rl_batch_size = 256", "learning_rate = 0.004", "actor_hidden = 256,256", "hidden = 64,64"] {
            assert!(snap.contains(line), "{line}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainingConfig::desk();
        c.label = Some("x".into());
        c.update_frequency = 4;
        c.data_dir = Some("d".into());
        let back = TrainingConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let p = TrainingConfig::parse("preset = paper\n[run]\nseed = 3 # comment\n").unwrap();
        assert_eq!((p.preset, p.seed, p.learning_rate), (Preset::Paper, 3, 4e-3));
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(TrainingConfig::parse("[run]\nbogus = 1\n").is_err());
        assert!(TrainingConfig::parse("[run]\nseed\n").is_err());
        assert!(TrainingConfig::parse("[encoder]\nupdate_frequency = 0\n").is_err());
        assert!(TrainingConfig::parse("preset = huge\n").is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let a = TrainingConfig::desk();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }
}
