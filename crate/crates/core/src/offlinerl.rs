//! Behavior-regularized actor-critic on detached task representations.
//!
//! Value-penalty variant: the critic target subtracts `alpha_kl * KL(pi ||
//! pi_b)` at the next state, and the actor maximizes `min(Q1, Q2) - alpha_kl
//! * KL`. Both policies are tanh-squashed diagonal Gaussians; the squash is
//! the same bijection for both, so their KL equals the closed-form KL of the
//! pre-squash Gaussians.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{Context, LatentZ, OfflineTaskDataset, Trajectory};
use crate::envlab::{env_step, ExpertPolicy, TaskSpec};
use crate::error::{check_dim, Error, Result};
use crate::nn::{polyak_update, Activation, ApproximatorSpec, Mlp, OptimizerState, OutputTransform};
use crate::rng::{self, Rng};
use crate::taskenc::TaskEncoder;

/// Log-std range of both policies. The lower end is the variance floor 1e-3.
pub const LOG_STD_MIN: f64 = -3.453_877_639_491_069; // 0.5 * ln(1e-3)
pub const LOG_STD_MAX: f64 = 1.0;
/// Dataset actions are clipped to this magnitude before `atanh`.
pub const ACTION_CLIP: f64 = 1.0 - 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BracConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha_kl: f64,
}

impl Default for BracConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            learning_rate: 3e-4,
            gamma: 0.9,
            tau: 0.005,
            alpha_kl: 1.0,
        }
    }
}

/// A minibatch with the (detached) task representation of each row's task.
#[derive(Debug, Clone)]
pub struct RlBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
    pub z: Array2<f64>,
}

impl RlBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Builds a batch from `(dataset row, z)` pairs.
    pub fn from_rows(rows: &[(&crate::data::TransitionRecord, &[f64])]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput("rl batch"))?;
        let (sd, ad, dz) = (first.0.state.len(), first.0.action.len(), first.1.len());
        let n = rows.len();
        let mut b = RlBatch {
            states: Array2::zeros((n, sd)),
            actions: Array2::zeros((n, ad)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, sd)),
            dones: Array1::zeros(n),
            z: Array2::zeros((n, dz)),
        };
        for (i, (t, z)) in rows.iter().enumerate() {
            check_dim("batch state", sd, t.state.len())?;
            check_dim("batch action", ad, t.action.len())?;
            check_dim("batch z", dz, z.len())?;
            b.states.row_mut(i).assign(&ndarray::aview1(&t.state));
            b.actions.row_mut(i).assign(&ndarray::aview1(&t.action));
            b.next_states.row_mut(i).assign(&ndarray::aview1(&t.next_state));
            b.z.row_mut(i).assign(&ndarray::aview1(z));
            b.rewards[i] = t.reward;
            b.dones[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(b)
    }
}

fn hstack(parts: &[ArrayView2<'_, f64>]) -> Array2<f64> {
    concatenate(Axis(1), parts).expect("row counts agree")
}

/// Tanh-squashed Gaussian policy network `(s, z) -> (mean, raw log-std)`.
#[derive(Debug, Clone)]
pub struct GaussianPolicyNet {
    net: Mlp,
    action_dim: usize,
}

/// Pre-squash Gaussian parameters for a batch plus what backprop needs.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    raw: Array2<f64>,
    cache: crate::nn::ForwardCache,
}

fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn squash_log_std_grad(raw: f64) -> f64 {
    let t = raw.tanh();
    0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t)
}

impl GaussianPolicyNet {
    pub fn new(state_dim: usize, action_dim: usize, d_z: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(ApproximatorSpec::new(
                state_dim + d_z,
                hidden,
                2 * action_dim,
                Activation::Relu,
                OutputTransform::Identity,
            ))?,
            action_dim,
        })
    }

    /// Wraps a loaded network whose output is `(mean, raw log-std)`.
    pub fn from_net(net: Mlp, action_dim: usize) -> Result<Self> {
        check_dim("policy output", 2 * action_dim, net.output_dim())?;
        Ok(Self { net, action_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Deterministic action `tanh(mean)` for each row.
    pub fn mean_action(&self, params: &[f64], states: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward(params, states, z).mean.mapv(f64::tanh)
    }

    pub fn forward(&self, params: &[f64], states: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> PolicyOutput {
        let input = hstack(&[states, z]);
        let cache = self.net.forward_batch(params, input.view());
        let ad = self.action_dim;
        let mean = cache.output.slice(ndarray::s![.., ..ad]).to_owned();
        let raw = cache.output.slice(ndarray::s![.., ad..]).to_owned();
        let log_std = raw.mapv(squash_log_std);
        PolicyOutput { mean, log_std, raw, cache }
    }

    /// Adds the parameter gradient for upstream gradients on mean and log-std.
    fn backward_into(&self, params: &[f64], out: &PolicyOutput, d_mean: &Array2<f64>, d_log_std: &Array2<f64>, grad: &mut [f64]) {
        let mut d_raw = d_log_std.clone();
        d_raw.zip_mut_with(&out.raw, |d, &r| *d *= squash_log_std_grad(r));
        let d_out = hstack(&[d_mean.view(), d_raw.view()]);
        self.net.backward_into(params, &out.cache, d_out.view(), grad);
    }
}

/// Closed-form `KL(N(m1, s1) || N(m2, s2))` per row, summed over dimensions,
/// with gradients w.r.t. `m1` and `log s1`.
pub fn gaussian_kl(
    mean_p: &Array2<f64>,
    log_std_p: &Array2<f64>,
    mean_q: &Array2<f64>,
    log_std_q: &Array2<f64>,
) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let n = mean_p.nrows();
    let mut kl = Array1::zeros(n);
    let mut d_mean = Array2::zeros(mean_p.raw_dim());
    let mut d_log_std = Array2::zeros(mean_p.raw_dim());
    for i in 0..n {
        for k in 0..mean_p.ncols() {
            let (mp, lp, mq, lq) = (mean_p[[i, k]], log_std_p[[i, k]], mean_q[[i, k]], log_std_q[[i, k]]);
            let var_p = (2.0 * lp).exp();
            let var_q = (2.0 * lq).exp();
            let dm = mp - mq;
            kl[i] += lq - lp + (var_p + dm * dm) / (2.0 * var_q) - 0.5;
            d_mean[[i, k]] = dm / var_q;
            d_log_std[[i, k]] = -1.0 + var_p / var_q;
        }
    }
    (kl, d_mean, d_log_std)
}

/// Twin Q-networks `(s, a, z) -> R`.
#[derive(Debug, Clone)]
pub struct CriticNet {
    net: Mlp,
}

impl CriticNet {
    pub fn new(state_dim: usize, action_dim: usize, d_z: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(ApproximatorSpec::new(
                state_dim + action_dim + d_z,
                hidden,
                1,
                Activation::Relu,
                OutputTransform::Identity,
            ))?,
        })
    }

    /// Wraps a network with a single output.
    pub fn from_net(net: Mlp) -> Result<Self> {
        check_dim("critic output", 1, net.output_dim())?;
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn q(&self, params: &[f64], s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Array1<f64> {
        let input = hstack(&[s, a, z]);
        self.net.predict(params, input.view()).column(0).to_owned()
    }
}

/// Parameters of the online networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorParams(pub Vec<f64>);

/// Online twin critics.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorParams(pub Vec<f64>);

/// Networks shared by every BRAC loss.
#[derive(Debug, Clone)]
pub struct BracNets {
    pub actor: GaussianPolicyNet,
    pub behavior: GaussianPolicyNet,
    pub critic: CriticNet,
    pub action_dim: usize,
}

impl BracNets {
    pub fn new(state_dim: usize, action_dim: usize, d_z: usize, config: &BracConfig) -> Result<Self> {
        Ok(Self {
            actor: GaussianPolicyNet::new(state_dim, action_dim, d_z, &config.actor_hidden)?,
            behavior: GaussianPolicyNet::new(state_dim, action_dim, d_z, &config.actor_hidden)?,
            critic: CriticNet::new(state_dim, action_dim, d_z, &config.critic_hidden)?,
            action_dim,
        })
    }

    /// Standard normal noise for reparameterized sampling.
    pub fn sample_noise(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, self.action_dim), |_| rng.sample(StandardNormal))
    }

    /// `tanh(mean + std * noise)`.
    pub fn squashed_sample(out: &PolicyOutput, noise: &Array2<f64>) -> Array2<f64> {
        let mut u = out.log_std.mapv(f64::exp) * noise;
        u += &out.mean;
        u.mapv(f64::tanh)
    }

    /// TD targets `r + gamma (1 - done) (min(Q1', Q2')(s', a') - alpha KL)`
    /// with `a' = tanh(mean + std * noise)` from the actor at `s'`.
    #[allow(clippy::too_many_arguments)]
    pub fn critic_targets(
        &self,
        batch: &RlBatch,
        actor: &ActorParams,
        behavior: &BehaviorParams,
        target_q1: &[f64],
        target_q2: &[f64],
        noise: &Array2<f64>,
        gamma: f64,
        alpha_kl: f64,
    ) -> Result<Array1<f64>> {
        let pi = self.actor.forward(&actor.0, batch.next_states.view(), batch.z.view());
        let next_a = Self::squashed_sample(&pi, noise);
        let q1 = self.critic.q(target_q1, batch.next_states.view(), next_a.view(), batch.z.view());
        let q2 = self.critic.q(target_q2, batch.next_states.view(), next_a.view(), batch.z.view());
        let penalty = if alpha_kl != 0.0 {
            let b = self.behavior.forward(&behavior.0, batch.next_states.view(), batch.z.view());
            gaussian_kl(&pi.mean, &pi.log_std, &b.mean, &b.log_std).0 * alpha_kl
        } else {
            Array1::zeros(batch.len())
        };
        let mut y = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            let next_v = q1[i].min(q2[i]) - penalty[i];
            y[i] = batch.rewards[i] + gamma * (1.0 - batch.dones[i]) * next_v;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic targets"));
        }
        Ok(y)
    }

    /// Mean squared TD error of one critic against fixed targets.
    pub fn critic_loss_and_grad(&self, q_params: &[f64], batch: &RlBatch, targets: &Array1<f64>) -> (f64, Vec<f64>) {
        let input = hstack(&[batch.states.view(), batch.actions.view(), batch.z.view()]);
        let cache = self.critic.net.forward_batch(q_params, input.view());
        let n = batch.len() as f64;
        let diff = &cache.output.column(0) - targets;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d_out = diff.mapv(|d| 2.0 * d / n).insert_axis(Axis(1));
        let mut grad = vec![0.0; q_params.len()];
        self.critic.net.backward_into(q_params, &cache, d_out.view(), &mut grad);
        (loss, grad)
    }

    /// `mean(-min(Q1, Q2)(s, a~pi, z) + alpha KL(pi || pi_b))` and its actor
    /// gradient, for fixed sampling noise.
    pub fn actor_loss_and_grad(
        &self,
        actor: &ActorParams,
        critic: &CriticParams,
        behavior: &BehaviorParams,
        batch: &RlBatch,
        noise: &Array2<f64>,
        alpha_kl: f64,
    ) -> (f64, Vec<f64>) {
        let n = batch.len() as f64;
        let pi = self.actor.forward(&actor.0, batch.states.view(), batch.z.view());
        let std = pi.log_std.mapv(f64::exp);
        let actions = Self::squashed_sample(&pi, noise);

        let input = hstack(&[batch.states.view(), actions.view(), batch.z.view()]);
        let c1 = self.critic.net.forward_batch(&critic.q1, input.view());
        let c2 = self.critic.net.forward_batch(&critic.q2, input.view());
        let mut loss = 0.0;
        let mut d1 = Array2::zeros((batch.len(), 1));
        let mut d2 = Array2::zeros((batch.len(), 1));
        for i in 0..batch.len() {
            let (a, b) = (c1.output[[i, 0]], c2.output[[i, 0]]);
            // argmin picks q1 on ties
            if a <= b {
                loss -= a;
                d1[[i, 0]] = -1.0 / n;
            } else {
                loss -= b;
                d2[[i, 0]] = -1.0 / n;
            }
        }
        let mut scratch = vec![0.0; critic.q1.len()];
        let din1 = self.critic.net.backward_into(&critic.q1, &c1, d1.view(), &mut scratch);
        let din2 = self.critic.net.backward_into(&critic.q2, &c2, d2.view(), &mut scratch);
        let sd = batch.states.ncols();
        let ad = self.action_dim;
        let d_action = &din1.slice(ndarray::s![.., sd..sd + ad]) + &din2.slice(ndarray::s![.., sd..sd + ad]);
        // through tanh and the reparameterization
        let d_u = &d_action * &actions.mapv(|a| 1.0 - a * a);
        let mut d_mean = d_u.clone();
        let mut d_log_std = &d_u * &(&std * noise);

        if alpha_kl != 0.0 {
            let b = self.behavior.forward(&behavior.0, batch.states.view(), batch.z.view());
            let (kl, dkl_mean, dkl_log_std) = gaussian_kl(&pi.mean, &pi.log_std, &b.mean, &b.log_std);
            loss += alpha_kl * kl.sum();
            d_mean.scaled_add(alpha_kl / n, &dkl_mean);
            d_log_std.scaled_add(alpha_kl / n, &dkl_log_std);
        }
        let mut grad = vec![0.0; actor.0.len()];
        self.actor.backward_into(&actor.0, &pi, &d_mean, &d_log_std, &mut grad);
        (loss / n, grad)
    }

    /// Negative mean log-likelihood (up to constants) of the dataset actions
    /// under the behavior Gaussian, in pre-squash space.
    pub fn behavior_loss_and_grad(&self, behavior: &BehaviorParams, batch: &RlBatch) -> (f64, Vec<f64>) {
        let n = batch.len() as f64;
        let out = self.behavior.forward(&behavior.0, batch.states.view(), batch.z.view());
        let u = batch.actions.mapv(|a| a.clamp(-ACTION_CLIP, ACTION_CLIP).atanh());
        let mut loss = 0.0;
        let mut d_mean = Array2::zeros(out.mean.raw_dim());
        let mut d_log_std = Array2::zeros(out.mean.raw_dim());
        for ((i, k), &m) in out.mean.indexed_iter() {
            let ls = out.log_std[[i, k]];
            let inv_var = (-2.0 * ls).exp();
            let diff = u[[i, k]] - m;
            loss += 0.5 * diff * diff * inv_var + ls;
            d_mean[[i, k]] = -diff * inv_var / n;
            d_log_std[[i, k]] = (1.0 - diff * diff * inv_var) / n;
        }
        let mut grad = vec![0.0; behavior.0.len()];
        self.behavior.backward_into(&behavior.0, &out, &d_mean, &d_log_std, &mut grad);
        (loss / n, grad)
    }

    pub fn mean_action(&self, actor: &[f64], states: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Array2<f64> {
        self.actor.mean_action(actor, states, z)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BracStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub behavior_loss: f64,
}

/// All BRAC state of one training run.
#[derive(Debug, Clone)]
pub struct BracAgent {
    pub nets: BracNets,
    pub config: BracConfig,
    pub actor: ActorParams,
    pub critic: CriticParams,
    pub target: CriticParams,
    pub behavior: BehaviorParams,
    pub actor_opt: OptimizerState,
    pub q1_opt: OptimizerState,
    pub q2_opt: OptimizerState,
    pub behavior_opt: OptimizerState,
}

impl BracAgent {
    pub fn new(state_dim: usize, action_dim: usize, d_z: usize, config: BracConfig, rng: &mut Rng) -> Result<Self> {
        let nets = BracNets::new(state_dim, action_dim, d_z, &config)?;
        let actor = ActorParams(nets.actor.net().init(rng, 0.1));
        let behavior = BehaviorParams(nets.behavior.net().init(rng, 0.1));
        let q1 = nets.critic.net().init(rng, 1.0);
        let q2 = nets.critic.net().init(rng, 1.0);
        let lr = config.learning_rate;
        Ok(Self {
            actor_opt: OptimizerState::new(actor.0.len(), lr),
            behavior_opt: OptimizerState::new(behavior.0.len(), lr),
            q1_opt: OptimizerState::new(q1.len(), lr),
            q2_opt: OptimizerState::new(q2.len(), lr),
            target: CriticParams { q1: q1.clone(), q2: q2.clone() },
            critic: CriticParams { q1, q2 },
            actor,
            behavior,
            nets,
            config,
        })
    }

    /// One TD step on both critics followed by the soft target update.
    pub fn critic_update(&mut self, batch: &RlBatch, rng: &mut Rng) -> Result<f64> {
        let noise = self.nets.sample_noise(batch.len(), rng);
        let y = self.nets.critic_targets(
            batch,
            &self.actor,
            &self.behavior,
            &self.target.q1,
            &self.target.q2,
            &noise,
            self.config.gamma,
            self.config.alpha_kl,
        )?;
        let (l1, g1) = self.nets.critic_loss_and_grad(&self.critic.q1, batch, &y);
        let (l2, g2) = self.nets.critic_loss_and_grad(&self.critic.q2, batch, &y);
        self.q1_opt.step(&mut self.critic.q1, &g1)?;
        self.q2_opt.step(&mut self.critic.q2, &g2)?;
        polyak_update(&mut self.target.q1, &self.critic.q1, self.config.tau);
        polyak_update(&mut self.target.q2, &self.critic.q2, self.config.tau);
        Ok(0.5 * (l1 + l2))
    }

    pub fn actor_update(&mut self, batch: &RlBatch, rng: &mut Rng) -> Result<f64> {
        let noise = self.nets.sample_noise(batch.len(), rng);
        let (loss, g) = self
            .nets
            .actor_loss_and_grad(&self.actor, &self.critic, &self.behavior, batch, &noise, self.config.alpha_kl);
        if !loss.is_finite() {
            return Err(Error::NonFinite("actor loss"));
        }
        self.actor_opt.step(&mut self.actor.0, &g)?;
        Ok(loss)
    }

    pub fn behavior_update(&mut self, batch: &RlBatch) -> Result<f64> {
        let (loss, g) = self.nets.behavior_loss_and_grad(&self.behavior, batch);
        self.behavior_opt.step(&mut self.behavior.0, &g)?;
        Ok(loss)
    }

    /// Behavior step, critic step, actor step.
    pub fn train_step(&mut self, batch: &RlBatch, rng: &mut Rng) -> Result<BracStats> {
        let behavior_loss = self.behavior_update(batch)?;
        let critic_loss = self.critic_update(batch, rng)?;
        let actor_loss = self.actor_update(batch, rng)?;
        Ok(BracStats {
            critic_loss,
            actor_loss,
            behavior_loss,
        })
    }
}

/// Attaches to every transition the representation of the trajectory it
/// belongs to, as computed by a frozen encoder.
pub fn attach_trajectory_z<'a>(
    datasets: &'a [OfflineTaskDataset],
    encoder: &TaskEncoder,
    encoder_params: &[f64],
) -> Result<Vec<(&'a crate::data::TransitionRecord, Vec<f64>)>> {
    let mut rows = Vec::new();
    for ds in datasets {
        for range in ds.trajectory_ranges() {
            let ctx = Context::new(ds.transitions[range.clone()].to_vec());
            let z = encoder.encode(encoder_params, &ctx)?.values;
            for t in &ds.transitions[range] {
                rows.push((t, z.clone()));
            }
        }
    }
    Ok(rows)
}

/// Fits the behavior Gaussian by maximum likelihood on the datasets, with
/// each transition conditioned on its trajectory's representation under the
/// frozen encoder snapshot.
#[allow(clippy::too_many_arguments)]
pub fn behavior_clone(
    nets: &BracNets,
    datasets: &[OfflineTaskDataset],
    encoder: &TaskEncoder,
    encoder_params: &[f64],
    init: BehaviorParams,
    learning_rate: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BehaviorParams> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyInput("behavior-clone datasets"));
    }
    let rows = attach_trajectory_z(datasets, encoder, encoder_params)?;
    let mut rng = rng::seeded(seed);
    let mut params = init;
    let mut opt = OptimizerState::new(params.0.len(), learning_rate);
    for _ in 0..steps {
        let picked: Vec<(&crate::data::TransitionRecord, &[f64])> = (0..batch_size)
            .map(|_| {
                let (t, z) = rows.choose(&mut rng).expect("non-empty rows");
                (*t, z.as_slice())
            })
            .collect();
        let batch = RlBatch::from_rows(&picked)?;
        let (_, g) = nets.behavior_loss_and_grad(&params, &batch);
        opt.step(&mut params.0, &g)?;
    }
    Ok(params)
}

/// Anything that maps `(state, z)` to an action.
pub trait Policy {
    fn act(&self, state: &[f64], z: &LatentZ) -> Vec<f64>;
}

impl Policy for ExpertPolicy {
    fn act(&self, state: &[f64], _z: &LatentZ) -> Vec<f64> {
        self.action(state)
    }
}

/// Deterministic `tanh(mean)` action of a trained actor.
pub struct MeanActor<'a> {
    pub net: &'a GaussianPolicyNet,
    pub params: &'a [f64],
}

impl Policy for MeanActor<'_> {
    fn act(&self, state: &[f64], z: &LatentZ) -> Vec<f64> {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("single row");
        let z = ArrayView2::from_shape((1, z.dim()), &z.values).expect("single row");
        self.net.mean_action(self.params, s, z).row(0).to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
}

/// Encodes `context` once and rolls out `policy` for `n_episodes` episodes in
/// the true environment; returns mean and (population) std of the
/// undiscounted episode returns.
pub fn evaluate_policy(
    task: &TaskSpec,
    encoder: &TaskEncoder,
    encoder_params: &[f64],
    policy: &dyn Policy,
    context: &Trajectory,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if context.is_empty() {
        return Err(Error::EmptyInput("evaluation context"));
    }
    if context.task_id() != task.task_id {
        return Err(Error::invalid(format!(
            "context from task {} used to evaluate task {}",
            context.task_id(),
            task.task_id
        )));
    }
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    let z = encoder.encode(encoder_params, &context.to_context())?;
    let mut rng = rng::stream(seed, task.task_id as u64);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut state = task.initial_state();
        let mut total = 0.0;
        for t in 0..task.horizon {
            let action = policy.act(&state, &z);
            let out = env_step(task, &state, &action, t, &mut rng)?;
            total += out.reward;
            state = out.next_state;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
    })
}
