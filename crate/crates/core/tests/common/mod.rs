//! Random small instances shared by the gradient, invariance and acceptance
//! targets.
#![allow(dead_code)]

use rand::Rng as _;
use retro_core::data::{Context, TransitionRecord};
use retro_core::nn::{finite_diff_check, Activation, ApproximatorSpec, FnObjective, Mlp, OutputTransform};
use retro_core::offlinerl::{ActorParams, BehaviorParams, BracNets, CriticNet, CriticParams, GaussianPolicyNet, RlBatch};
use retro_core::rng::{self, Rng};
use retro_core::taskenc::{
    classifier_loss_and_grad, focal_metric_loss_and_grad, reconstruction_loss_and_grad, ClassifierHead, Decoder, EncoderConfig,
    TaskEncoder,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const N_INSTANCES: usize = 20;
pub const LOSSES: [&str; 6] = ["classifier", "focal_metric", "reconstruction", "critic", "actor", "behavior_clone"];

const SD: usize = 2;
const AD: usize = 2;

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_record(rng: &mut Rng, task_id: usize) -> TransitionRecord {
    TransitionRecord {
        state: uniform(rng, SD),
        action: uniform(rng, AD).iter().map(|a| 0.9 * a).collect(),
        reward: rng.random_range(-1.0..1.0),
        next_state: uniform(rng, SD),
        done: rng.random_bool(0.2),
        task_id,
    }
}

pub fn random_context(rng: &mut Rng, max_len: usize) -> Context {
    let n = rng.random_range(1..=max_len);
    Context::new((0..n).map(|_| random_record(rng, 0)).collect())
}

/// Hidden layers use tanh so no ReLU kink falls inside the difference
/// stencil; the ReLU backward pass has its own check in `nn`.
fn smooth(input: usize, hidden: &[usize], output: usize) -> Mlp {
    Mlp::new(ApproximatorSpec::new(input, hidden, output, Activation::Tanh, OutputTransform::Identity)).unwrap()
}

fn encoder(rng: &mut Rng) -> TaskEncoder {
    let d_z = rng.random_range(2..=4);
    let net = smooth(TransitionRecord::row_width(SD, AD), &[rng.random_range(4..=16)], d_z);
    TaskEncoder::from_net(net, SD, AD).unwrap()
}

/// Production (ReLU) encoder for the invariance checks.
fn relu_encoder(rng: &mut Rng) -> TaskEncoder {
    let cfg = EncoderConfig {
        d_z: rng.random_range(2..=4),
        hidden: vec![rng.random_range(4..=16)],
        ..EncoderConfig::default()
    };
    TaskEncoder::new(SD, AD, &cfg).unwrap()
}

fn contexts(rng: &mut Rng) -> Vec<Context> {
    let n = rng.random_range(2..=8);
    (0..n).map(|_| random_context(rng, 5)).collect()
}

fn check(value: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>, params: &[f64]) -> f64 {
    check_with(FD_STEP, value, grad, params)
}

fn check_with(step: f64, value: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>, params: &[f64]) -> f64 {
    finite_diff_check(&FnObjective { value, grad }, params, step).unwrap()
}

fn rl_batch(rng: &mut Rng, d_z: usize) -> RlBatch {
    let n = rng.random_range(2..=8);
    let recs: Vec<TransitionRecord> = (0..n).map(|_| random_record(rng, 0)).collect();
    let zs: Vec<Vec<f64>> = (0..n).map(|_| uniform(rng, d_z)).collect();
    let rows: Vec<(&TransitionRecord, &[f64])> = recs.iter().zip(&zs).map(|(r, z)| (r, z.as_slice())).collect();
    RlBatch::from_rows(&rows).unwrap()
}

fn brac(rng: &mut Rng) -> (BracNets, usize) {
    let d_z = rng.random_range(1..=3);
    let mut width = || rng.random_range(4..=16);
    let nets = BracNets {
        actor: GaussianPolicyNet::from_net(smooth(SD + d_z, &[width()], 2 * AD), AD).unwrap(),
        behavior: GaussianPolicyNet::from_net(smooth(SD + d_z, &[width()], 2 * AD), AD).unwrap(),
        critic: CriticNet::from_net(smooth(SD + AD + d_z, &[width(), width()], 1)).unwrap(),
        action_dim: AD,
    };
    (nets, d_z)
}

/// Max relative error of one random instance of `loss`, seeded by `seed`.
pub fn gradient_error(loss: &str, seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    match loss {
        "classifier" => {
            let enc = encoder(&mut rng);
            let ctx = contexts(&mut rng);
            let refs: Vec<&Context> = ctx.iter().collect();
            let n_tasks = rng.random_range(2..=5);
            let labels: Vec<usize> = (0..refs.len()).map(|_| rng.random_range(0..n_tasks)).collect();
            let head = ClassifierHead::new(enc.d_z(), n_tasks).unwrap();
            let ne = enc.n_params();
            let mut p = enc.net().init(&mut rng, 1.0);
            p.extend(head.net().init(&mut rng, 1.0));
            let run = |p: &[f64]| classifier_loss_and_grad(&enc, &head, &p[..ne], &p[ne..], &refs, &labels).unwrap();
            check(|p| run(p).0, |p| {
                let (_, ge, gh) = run(p);
                [ge, gh].concat()
            }, &p)
        }
        "focal_metric" => {
            let enc = encoder(&mut rng);
            let ctx = contexts(&mut rng);
            let refs: Vec<&Context> = ctx.iter().collect();
            let labels: Vec<usize> = (0..refs.len()).map(|i| i % 2 + 2 * rng.random_range(0..2)).collect();
            // The loss is translation invariant in z, so output-bias
            // gradients are exactly 0 while the difference quotient still
            // sees one ulp of the loss; small z and beta keep that ulp below
            // the tolerance.
            let beta = rng.random_range(1e-6..1e-5);
            let p = enc.net().init(&mut rng, 0.1);
            let run = |p: &[f64]| focal_metric_loss_and_grad(&enc, p, &refs, &labels, beta).unwrap();
            check(|p| run(p).0, |p| run(p).1, &p)
        }
        "reconstruction" => {
            let enc = encoder(&mut rng);
            let dec = Decoder::from_net(smooth(SD + AD + enc.d_z(), &[rng.random_range(4..=16)], SD + 1), SD, AD).unwrap();
            let ctx = contexts(&mut rng);
            let refs: Vec<&Context> = ctx.iter().collect();
            let ne = enc.n_params();
            let mut p = enc.net().init(&mut rng, 1.0);
            p.extend(dec.net().init(&mut rng, 1.0));
            let run = |p: &[f64]| reconstruction_loss_and_grad(&enc, &dec, &p[..ne], &p[ne..], &refs).unwrap();
            check(|p| run(p).0, |p| {
                let (_, ge, gd) = run(p);
                [ge, gd].concat()
            }, &p)
        }
        "critic" => {
            let (nets, d_z) = brac(&mut rng);
            let batch = rl_batch(&mut rng, d_z);
            let targets = ndarray::Array1::from(uniform(&mut rng, batch.len()));
            let p = nets.critic.net().init(&mut rng, 1.0);
            check(|p| nets.critic_loss_and_grad(p, &batch, &targets).0, |p| nets.critic_loss_and_grad(p, &batch, &targets).1, &p)
        }
        "actor" => {
            let (nets, d_z) = brac(&mut rng);
            let batch = rl_batch(&mut rng, d_z);
            let noise = nets.sample_noise(batch.len(), &mut rng);
            let critic = CriticParams {
                q1: nets.critic.net().init(&mut rng, 1.0),
                q2: nets.critic.net().init(&mut rng, 1.0),
            };
            let behavior = BehaviorParams(nets.behavior.net().init(&mut rng, 1.0));
            let alpha = rng.random_range(0.0..2.0);
            let p = nets.actor.net().init(&mut rng, 1.0);
            let run = |p: &[f64]| nets.actor_loss_and_grad(&ActorParams(p.to_vec()), &critic, &behavior, &batch, &noise, alpha);
            check(|p| run(p).0, |p| run(p).1, &p)
        }
        "behavior_clone" => {
            let (nets, d_z) = brac(&mut rng);
            let batch = rl_batch(&mut rng, d_z);
            let p = nets.behavior.net().init(&mut rng, 1.0);
            let run = |p: &[f64]| nets.behavior_loss_and_grad(&BehaviorParams(p.to_vec()), &batch);
            check(|p| run(p).0, |p| run(p).1, &p)
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Worst error over `N_INSTANCES` seeds of `loss`.
pub fn worst_gradient_error(loss: &str) -> f64 {
    (0..N_INSTANCES as u64).map(|i| gradient_error(loss, rng::derive(0x9c4d, i))).fold(0.0, f64::max)
}

/// Encodes a random context, a shuffled copy and a duplicated copy; true when
/// all three representations are bit-identical.
pub fn invariance_holds(seed: u64) -> bool {
    use rand::seq::SliceRandom;
    let mut rng = rng::seeded(seed);
    let enc = relu_encoder(&mut rng);
    let p = enc.net().init(&mut rng, 1.0);
    let ctx = random_context(&mut rng, 12);
    let mut shuffled = ctx.records.clone();
    shuffled.shuffle(&mut rng);
    let doubled: Vec<TransitionRecord> = ctx.records.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
    let z = enc.encode(&p, &ctx).unwrap().values;
    z == enc.encode(&p, &Context::new(shuffled)).unwrap().values && z == enc.encode(&p, &Context::new(doubled)).unwrap().values
}
