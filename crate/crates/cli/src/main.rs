use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use retro_core::envlab::TaskFamily;
use retro_core::harness::{
    emit_plot_data, report_walltime, run_ablation_frequency, run_meta_test, run_training, RunArtifacts, TaskData, TrainingConfig,
};
use retro_core::par::{self, Execution};
use retro_core::theory::{self, CorollaryConfig};

#[derive(Parser)]
#[command(name = "retro", version, about = "Offline meta-RL with gated task-encoder updates")]
struct Cli {
    /// Config file; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true, env = par::THREADS_ENV)]
    threads: Option<usize>,
    /// Run every loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save offline datasets for a task family.
    GenData(GenData),
    /// Run the training loop.
    Train(Train),
    /// Evaluate a trained run on the test tasks.
    MetaTest(MetaTest),
    /// Train one run per update frequency and seed.
    AblateFrequency(Ablate),
    /// Compare wall-clock of finished runs.
    Walltime(Runs),
    /// Long-format metric table across finished runs.
    PlotData(Runs),
    /// Numerical checks of the theory.
    #[command(subcommand)]
    Theory(Theory),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "point_goal_2d")]
    family: TaskFamily,
    #[arg(long, default_value_t = 20)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 2100)]
    transitions_per_task: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
}

#[derive(Args)]
struct DataSource {
    /// Directory written by `gen-data`; generated in memory when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    data: DataSource,
    /// `section.key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct MetaTest {
    /// Output directory of a finished run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[command(flatten)]
    data: DataSource,
}

#[derive(Args)]
struct Ablate {
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    frequencies: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3])]
    seeds: Vec<u64>,
    #[command(flatten)]
    data: DataSource,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Runs {
    /// Output directories of finished runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Theory {
    ReturnBound(Sweep),
    PerfDiff(Sweep),
    LemmaA1(Sweep),
    Weissman {
        #[arg(long, default_value_t = 10_000)]
        n_trials: usize,
    },
    Corollary(CorollaryArgs),
}

#[derive(Args)]
struct Sweep {
    #[arg(long, default_value_t = 1000)]
    n_configs: usize,
}

#[derive(Args)]
struct CorollaryArgs {
    #[arg(long, default_value_t = 1000)]
    n_trials: usize,
    #[arg(long, default_value_t = 1.0)]
    r_max: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    lipschitz: f64,
    #[arg(long, default_value_t = 1.0)]
    eps_mutual: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 2)]
    vol_z: u32,
    #[arg(long, default_value_t = 0.5)]
    xi: f64,
    #[arg(long, default_value_t = 0)]
    n_prior: u64,
    /// Reference distribution; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    z_mutual: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    par::init_thread_cap(cli.threads);
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("invariant check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

impl Cli {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn training_config(&self, overrides: &[String]) -> Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => TrainingConfig::desk(),
        };
        for kv in overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_data(cfg: &TrainingConfig, source: &DataSource, exec: Execution) -> Result<TaskData> {
    match source.data_dir.as_ref().or(cfg.data_dir.as_ref()) {
        Some(dir) => Ok(TaskData::load(dir, cfg.family, cfg.n_train_tasks, cfg.n_test_tasks)?),
        None => Ok(TaskData::for_config(cfg, exec)?),
    }
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn run(cli: Cli) -> Result<bool> {
    let exec = cli.exec();
    match &cli.command {
        Command::GenData(g) => {
            let seed = cli.seed.unwrap_or(0);
            let dir = cli.out_dir("data");
            let data = TaskData::generate(g.family, g.n_train, g.n_test, g.transitions_per_task, g.noise_scale, seed, exec)?;
            data.save(&dir, seed, g.noise_scale)?;
            info!("saved {} datasets under {}", g.n_train + g.n_test, dir.display());
            Ok(true)
        }
        Command::Train(t) => {
            let cfg = cli.training_config(&t.overrides)?;
            let data = load_data(&cfg, &t.data, exec)?;
            let a = run_training(&cfg, &data, exec)?;
            info!(
                "{}: {} steps, {} encoder updates, {:.1}s, final return {:?}, held-out accuracy {:?}",
                a.label, a.total_steps, a.encoder_updates, a.train_seconds, a.final_return, a.final_heldout_accuracy
            );
            Ok(a.encoder_updates == cfg.total_steps.div_ceil(cfg.update_frequency))
        }
        Command::MetaTest(m) => {
            let artifacts = RunArtifacts::load(&m.run)?;
            let cfg = TrainingConfig::parse(&std::fs::read_to_string(&artifacts.config_snapshot)?)?;
            let data = load_data(&cfg, &m.data, exec)?;
            let report = run_meta_test(&artifacts, &data, m.episodes, cli.seed.unwrap_or(cfg.seed), exec)?;
            let dir = cli.out_dir.clone().unwrap_or_else(|| m.run.clone());
            report.write_csv(&dir.join("meta_test.csv"))?;
            write_json(&dir, "meta_test.json", &report)?;
            info!("meta-test return {:.4} ± {:.4}", report.mean_return, report.std_return);
            Ok(report.mean_return.is_finite())
        }
        Command::AblateFrequency(a) => {
            let mut cfg = cli.training_config(&a.overrides)?;
            if cli.out_dir.is_none() {
                cfg.out_dir = PathBuf::from("runs/ablation");
            }
            let data = load_data(&cfg, &a.data, exec)?;
            let report = run_ablation_frequency(&cfg, &data, &a.frequencies, &a.seeds, exec)?;
            write_json(&cfg.out_dir, "ablation.json", &report)?;
            for s in &report.summary {
                info!(
                    "f={}: return {:.4} ± {:.4}, accuracy {:.3}, updates {}, {:.1}s",
                    s.frequency, s.mean_final_return, s.std_final_return, s.mean_heldout_accuracy, s.encoder_updates, s.mean_train_seconds
                );
            }
            Ok(report.all_finite())
        }
        Command::Walltime(r) => {
            let runs = load_runs(&r.runs)?;
            let report = report_walltime(&runs)?;
            let dir = cli.out_dir(".");
            report.write_csv(&dir.join("walltime.csv"))?;
            write_json(&dir, "walltime.json", &report)?;
            Ok(true)
        }
        Command::PlotData(r) => {
            let runs = load_runs(&r.runs)?;
            let plot = emit_plot_data(&runs)?;
            let dir = cli.out_dir(".");
            std::fs::create_dir_all(&dir)?;
            plot.write_csv(&dir.join("plot_long.csv"), &dir.join("plot_summary.csv"))?;
            Ok(true)
        }
        Command::Theory(t) => run_theory(&cli, t, exec),
    }
}

fn load_runs(dirs: &[PathBuf]) -> Result<Vec<RunArtifacts>> {
    dirs.iter()
        .map(|d| RunArtifacts::load(d).with_context(|| format!("loading run {}", d.display())))
        .collect()
}

fn run_theory(cli: &Cli, t: &Theory, exec: Execution) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let dir = cli.out_dir("reports");
    match t {
        Theory::ReturnBound(s) | Theory::PerfDiff(s) | Theory::LemmaA1(s) => {
            let report = match t {
                Theory::ReturnBound(_) => theory::verify_return_bound(s.n_configs, seed, exec)?,
                Theory::PerfDiff(_) => theory::verify_perf_diff_bound(s.n_configs, seed, exec)?,
                _ => theory::lemma_a1_check(s.n_configs, seed, exec)?,
            };
            info!(
                "{}: {} configs, {} violations, min margin {:.3e}",
                report.name, report.n_configs, report.n_violations, report.min_margin
            );
            write_json(&dir, &format!("{}.json", report.name), &report)?;
            Ok(report.passed)
        }
        Theory::Weissman { n_trials } => {
            let cells = theory::weissman_grid(*n_trials, seed, exec)?;
            let failed = cells.iter().filter(|c| !c.passed).count();
            info!("weissman: {} cells, {failed} failed", cells.len());
            write_json(&dir, "weissman.json", &cells)?;
            Ok(failed == 0)
        }
        Theory::Corollary(c) => {
            let cfg = CorollaryConfig {
                r_max: c.r_max,
                gamma: c.gamma,
                lipschitz: c.lipschitz,
                eps_mutual: c.eps_mutual,
                beta: c.beta,
                vol_z: c.vol_z,
                xi: c.xi,
                n_prior: c.n_prior,
            };
            let z = if c.z_mutual.is_empty() {
                vec![1.0 / c.vol_z as f64; c.vol_z as usize]
            } else {
                c.z_mutual.clone()
            };
            if z.len() != c.vol_z as usize {
                bail!("--z-mutual has {} entries, --vol-z is {}", z.len(), c.vol_z);
            }
            let k = theory::corollary_k(&cfg)?;
            let result = theory::verify_corollary(&cfg, &z, c.n_trials, seed, exec)?;
            info!(
                "corollary: k = {:.3} ({} extra samples), success {:.3} vs target {:.3}",
                k.k, k.extra_samples, result.success_rate, result.target
            );
            write_json(&dir, "corollary.json", &serde_json::json!({ "config": cfg, "k": k, "result": result }))?;
            Ok(result.passed)
        }
    }
}
