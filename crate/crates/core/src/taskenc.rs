//! Task encoder `q(z | c)`, its loss family, the gated update schedule and
//! the representation-shift estimator.
//!
//! The encoder embeds each `[s, a, s', r]` row of a context with an MLP and
//! mean-pools the embeddings. Pooling uses a correctly rounded sum, so the
//! pooled vector is bit-identical under any row permutation and under
//! duplicating every row.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::data::{l1_distance, Context, EncoderSnapshot, LatentZ, TransitionRecord};
use crate::error::{check_dim, Error, Result};
use crate::nn::{self, Activation, ApproximatorSpec, ForwardCache, Mlp, OutputTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Classifier,
    FocalMetric,
    Reconstruction,
    ClassifierPlusReconstruction,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(LossKind::Classifier),
            "focal_metric" | "focal" => Ok(LossKind::FocalMetric),
            "reconstruction" => Ok(LossKind::Reconstruction),
            "classifier_plus_reconstruction" => Ok(LossKind::ClassifierPlusReconstruction),
            _ => Err(Error::invalid(format!("unknown loss kind `{s}`"))),
        }
    }
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Classifier => "classifier",
            LossKind::FocalMetric => "focal_metric",
            LossKind::Reconstruction => "reconstruction",
            LossKind::ClassifierPlusReconstruction => "classifier_plus_reconstruction",
        }
    }

    pub fn uses_head(self) -> bool {
        matches!(self, LossKind::Classifier | LossKind::ClassifierPlusReconstruction)
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, LossKind::Reconstruction | LossKind::ClassifierPlusReconstruction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub aggregation: Aggregation,
    pub loss_kind: LossKind,
    /// Update the encoder on steps where `step % update_frequency == 0`.
    pub update_frequency: usize,
    pub focal_beta: f64,
    pub reconstruction_weight: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_z: 5,
            hidden: vec![32, 32],
            aggregation: Aggregation::MeanPool,
            loss_kind: LossKind::Classifier,
            update_frequency: 2,
            focal_beta: 1.0,
            reconstruction_weight: 1.0,
        }
    }
}

// FOCAL-style repulsion `beta / (||zi - zj||^2 + eps)`.
pub const FOCAL_EPS: f64 = 1e-3;

/// Correctly rounded sum of `values` (Shewchuk's exact partials), so the
/// result does not depend on summation order.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the exact sum of the non-overlapping partials to nearest.
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if !partials.is_empty() && ((lo < 0.0 && partials[partials.len() - 1] < 0.0) || (lo > 0.0 && partials[partials.len() - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Context encoder network plus the row layout it expects.
#[derive(Debug, Clone)]
pub struct TaskEncoder {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

/// Encoder forward state for a batch of contexts.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    cache: ForwardCache,
    row_counts: Vec<usize>,
    /// `n_contexts x d_z` pooled representations.
    pub z: Array2<f64>,
}

/// Bound on each coordinate of a per-transition embedding.
pub const EMBEDDING_BOUND: f64 = 10.0;

impl TaskEncoder {
    /// Per-transition embeddings pass through `10 * tanh`, so `z` stays in
    /// `[-10, 10]^d_z` however confident the classifier gets.
    pub fn new(state_dim: usize, action_dim: usize, config: &EncoderConfig) -> Result<Self> {
        let spec = ApproximatorSpec::new(
            TransitionRecord::row_width(state_dim, action_dim),
            &config.hidden,
            config.d_z,
            Activation::Relu,
            OutputTransform::TanhScaled(EMBEDDING_BOUND),
        );
        Ok(Self {
            net: Mlp::new(spec)?,
            state_dim,
            action_dim,
        })
    }

    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        check_dim(
            "encoder input",
            TransitionRecord::row_width(state_dim, action_dim),
            net.input_dim(),
        )?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn d_z(&self) -> usize {
        self.net.output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check_context(&self, context: &Context) -> Result<()> {
        if context.is_empty() {
            return Err(Error::EmptyInput("context"));
        }
        for r in &context.records {
            check_dim("context state", self.state_dim, r.state.len())?;
            check_dim("context next_state", self.state_dim, r.next_state.len())?;
            check_dim("context action", self.action_dim, r.action.len())?;
        }
        Ok(())
    }

    /// Pooled representation of one context.
    pub fn encode(&self, params: &[f64], context: &Context) -> Result<LatentZ> {
        let batch = self.encode_batch(params, &[context])?;
        Ok(LatentZ {
            values: batch.z.row(0).to_vec(),
        })
    }

    pub fn encode_batch(&self, params: &[f64], contexts: &[&Context]) -> Result<EncodedBatch> {
        check_dim("encoder params", self.net.n_params(), params.len())?;
        let width = self.net.input_dim();
        let mut rows = Vec::new();
        let mut row_counts = Vec::with_capacity(contexts.len());
        for c in contexts {
            self.check_context(c)?;
            for r in &c.records {
                r.write_row(&mut rows);
            }
            row_counts.push(c.len());
        }
        let cache = self.net.forward_batch(params, nn::batch_view(&rows, width));
        let d_z = self.d_z();
        let mut z = Array2::zeros((contexts.len(), d_z));
        let mut start = 0;
        for (ci, &n) in row_counts.iter().enumerate() {
            let block = cache.output.slice(ndarray::s![start..start + n, ..]);
            for k in 0..d_z {
                z[[ci, k]] = exact_sum(block.column(k).iter().copied()) / n as f64;
            }
            start += n;
        }
        Ok(EncodedBatch { cache, row_counts, z })
    }

    /// Encoder parameter gradient given `d_z = dL/dz` for every context.
    pub fn backward(&self, params: &[f64], batch: &EncodedBatch, d_z: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut d_rows = Array2::zeros(batch.cache.output.raw_dim());
        let mut start = 0;
        for (ci, &n) in batch.row_counts.iter().enumerate() {
            let scale = 1.0 / n as f64;
            for r in start..start + n {
                for k in 0..d_z.ncols() {
                    d_rows[[r, k]] = d_z[[ci, k]] * scale;
                }
            }
            start += n;
        }
        let mut grad = vec![0.0; self.net.n_params()];
        self.net.backward_into(params, &batch.cache, d_rows.view(), &mut grad);
        grad
    }
}

/// Linear layer from `z` to one logit per training task.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    net: Mlp,
}

impl ClassifierHead {
    pub fn new(d_z: usize, n_tasks: usize) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(ApproximatorSpec::new(d_z, &[], n_tasks, Activation::Relu, OutputTransform::Identity))?,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn n_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }
}

/// Decoder `(s, a, z) -> (s', r)` for the reconstruction loss.
#[derive(Debug, Clone)]
pub struct Decoder {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl Decoder {
    pub fn new(state_dim: usize, action_dim: usize, d_z: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(ApproximatorSpec::new(
                state_dim + action_dim + d_z,
                hidden,
                state_dim + 1,
                Activation::Relu,
                OutputTransform::Identity,
            ))?,
            state_dim,
            action_dim,
        })
    }

    /// Wraps a network mapping `[s, a, z]` to `[s', r]`.
    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        check_dim("decoder output", state_dim + 1, net.output_dim())?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, with its
/// gradient w.r.t. the logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_dim("cross-entropy labels", logits.nrows(), labels.len())?;
    let n_classes = logits.ncols();
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (&label, row)) in labels.iter().zip(logits.rows()).enumerate() {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        let row = row.to_vec();
        total += nn::log_sum_exp(&row) - row[label];
        let p = nn::softmax(&row);
        for (k, pk) in p.into_iter().enumerate() {
            grad[[i, k]] = (pk - if k == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean over context pairs of the metric loss: squared distance for
/// same-label pairs, `beta / (dist^2 + eps)` for different-label pairs.
pub fn focal_metric_from_z(z: ArrayView2<'_, f64>, labels: &[usize], beta: f64) -> Result<(f64, Array2<f64>)> {
    check_dim("metric-loss labels", z.nrows(), labels.len())?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid("metric loss needs at least two distinct labels"));
    }
    let n = labels.len();
    let n_pairs = (n * (n - 1) / 2) as f64;
    let mut grad = Array2::zeros(z.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let diff: Vec<f64> = z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| a - b).collect();
            let d2: f64 = diff.iter().map(|d| d * d).sum();
            // dL/d(diff) for this pair
            let coeff = if labels[i] == labels[j] {
                total += d2;
                2.0
            } else {
                let denom = d2 + FOCAL_EPS;
                total += beta / denom;
                -2.0 * beta / (denom * denom)
            };
            for (k, d) in diff.iter().enumerate() {
                let g = coeff * d / n_pairs;
                grad[[i, k]] += g;
                grad[[j, k]] -= g;
            }
        }
    }
    Ok((total / n_pairs, grad))
}

/// Parameters of every network the encoder losses touch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub encoder: Vec<f64>,
    pub head: Vec<f64>,
    pub decoder: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub encoder: Vec<f64>,
    pub head: Vec<f64>,
    pub decoder: Vec<f64>,
}

/// Mean cross-entropy of the head's task prediction from `encode(c)`.
pub fn classifier_loss(
    encoder: &TaskEncoder,
    head: &ClassifierHead,
    encoder_params: &[f64],
    head_params: &[f64],
    contexts: &[&Context],
    labels: &[usize],
) -> Result<f64> {
    Ok(classifier_loss_and_grad(encoder, head, encoder_params, head_params, contexts, labels)?.0)
}

/// Returns `(loss, encoder grad, head grad)`.
pub fn classifier_loss_and_grad(
    encoder: &TaskEncoder,
    head: &ClassifierHead,
    encoder_params: &[f64],
    head_params: &[f64],
    contexts: &[&Context],
    labels: &[usize],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dim("classifier labels", contexts.len(), labels.len())?;
    check_dim("head params", head.n_params(), head_params.len())?;
    let batch = encoder.encode_batch(encoder_params, contexts)?;
    let head_cache = head.net.forward_batch(head_params, batch.z.view());
    let (loss, d_logits) = cross_entropy(head_cache.output.view(), labels)?;
    let mut g_head = vec![0.0; head.n_params()];
    let d_z = head.net.backward_into(head_params, &head_cache, d_logits.view(), &mut g_head);
    let g_enc = encoder.backward(encoder_params, &batch, d_z.view());
    Ok((loss, g_enc, g_head))
}

pub fn focal_metric_loss(
    encoder: &TaskEncoder,
    encoder_params: &[f64],
    contexts: &[&Context],
    labels: &[usize],
    beta: f64,
) -> Result<f64> {
    Ok(focal_metric_loss_and_grad(encoder, encoder_params, contexts, labels, beta)?.0)
}

pub fn focal_metric_loss_and_grad(
    encoder: &TaskEncoder,
    encoder_params: &[f64],
    contexts: &[&Context],
    labels: &[usize],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let batch = encoder.encode_batch(encoder_params, contexts)?;
    let (loss, d_z) = focal_metric_from_z(batch.z.view(), labels, beta)?;
    Ok((loss, encoder.backward(encoder_params, &batch, d_z.view())))
}

pub fn reconstruction_loss(
    encoder: &TaskEncoder,
    decoder: &Decoder,
    encoder_params: &[f64],
    decoder_params: &[f64],
    contexts: &[&Context],
) -> Result<f64> {
    Ok(reconstruction_loss_and_grad(encoder, decoder, encoder_params, decoder_params, contexts)?.0)
}

/// Mean squared error of `decoder(s, a, z)` against `(s', r)` over every
/// element of every context row. Returns `(loss, encoder grad, decoder grad)`.
pub fn reconstruction_loss_and_grad(
    encoder: &TaskEncoder,
    decoder: &Decoder,
    encoder_params: &[f64],
    decoder_params: &[f64],
    contexts: &[&Context],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dim("decoder state", encoder.state_dim, decoder.state_dim)?;
    check_dim("decoder action", encoder.action_dim, decoder.action_dim)?;
    check_dim("decoder input", decoder.state_dim + decoder.action_dim + encoder.d_z(), decoder.net.input_dim())?;
    check_dim("decoder params", decoder.n_params(), decoder_params.len())?;
    let batch = encoder.encode_batch(encoder_params, contexts)?;
    let (sd, ad, dz) = (decoder.state_dim, decoder.action_dim, encoder.d_z());
    let in_w = sd + ad + dz;
    let out_w = sd + 1;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    for (ci, c) in contexts.iter().enumerate() {
        for r in &c.records {
            inputs.extend_from_slice(&r.state);
            inputs.extend_from_slice(&r.action);
            inputs.extend(batch.z.row(ci).iter().copied());
            targets.extend_from_slice(&r.next_state);
            targets.push(r.reward);
            owner.push(ci);
        }
    }
    let cache = decoder.net.forward_batch(decoder_params, nn::batch_view(&inputs, in_w));
    let n_elems = targets.len() as f64;
    let target = nn::batch_view(&targets, out_w);
    let diff = &cache.output - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n_elems;
    let d_out = diff.mapv(|d| 2.0 * d / n_elems);
    let mut g_dec = vec![0.0; decoder.n_params()];
    let d_in = decoder.net.backward_into(decoder_params, &cache, d_out.view(), &mut g_dec);
    let mut d_z = Array2::zeros(batch.z.raw_dim());
    for (row, &ci) in owner.iter().enumerate() {
        for k in 0..dz {
            d_z[[ci, k]] += d_in[[row, sd + ad + k]];
        }
    }
    let g_enc = encoder.backward(encoder_params, &batch, d_z.view());
    Ok((loss, g_enc, g_dec))
}

/// Combined encoder objective selected by `config.loss_kind`.
#[derive(Debug, Clone)]
pub struct EncoderObjective {
    pub encoder: TaskEncoder,
    pub head: ClassifierHead,
    pub decoder: Decoder,
    pub config: EncoderConfig,
}

impl EncoderObjective {
    pub fn new(state_dim: usize, action_dim: usize, n_train_tasks: usize, config: EncoderConfig) -> Result<Self> {
        if config.update_frequency == 0 {
            return Err(Error::invalid("update_frequency must be >= 1"));
        }
        Ok(Self {
            encoder: TaskEncoder::new(state_dim, action_dim, &config)?,
            head: ClassifierHead::new(config.d_z, n_train_tasks)?,
            decoder: Decoder::new(state_dim, action_dim, config.d_z, &config.hidden)?,
            config,
        })
    }

    pub fn init(&self, rng: &mut crate::rng::Rng) -> EncoderParams {
        EncoderParams {
            encoder: self.encoder.net().init(rng, 1.0),
            head: self.head.net().init(rng, 1.0),
            decoder: self.decoder.net().init(rng, 1.0),
        }
    }

    pub fn loss_and_grad(&self, params: &EncoderParams, contexts: &[&Context], labels: &[usize]) -> Result<(f64, EncoderGrads)> {
        let kind = self.config.loss_kind;
        let mut grads = EncoderGrads {
            encoder: vec![0.0; params.encoder.len()],
            head: vec![0.0; params.head.len()],
            decoder: vec![0.0; params.decoder.len()],
        };
        let mut total = 0.0;
        if kind.uses_head() {
            let (l, ge, gh) =
                classifier_loss_and_grad(&self.encoder, &self.head, &params.encoder, &params.head, contexts, labels)?;
            total += l;
            add(&mut grads.encoder, &ge, 1.0);
            grads.head = gh;
        }
        if kind == LossKind::FocalMetric {
            let (l, ge) = focal_metric_loss_and_grad(&self.encoder, &params.encoder, contexts, labels, self.config.focal_beta)?;
            total += l;
            add(&mut grads.encoder, &ge, 1.0);
        }
        if kind.uses_decoder() {
            let w = if kind == LossKind::Reconstruction { 1.0 } else { self.config.reconstruction_weight };
            let (l, ge, gd) =
                reconstruction_loss_and_grad(&self.encoder, &self.decoder, &params.encoder, &params.decoder, contexts)?;
            total += w * l;
            add(&mut grads.encoder, &ge, w);
            add(&mut grads.decoder, &gd, w);
        }
        Ok((total, grads))
    }

    /// Snapshot of everything the encoder update touches; `encode` reads only
    /// the leading encoder block.
    pub fn snapshot(&self, params: &EncoderParams, step_index: usize) -> EncoderSnapshot {
        let mut parameters = params.encoder.clone();
        parameters.extend_from_slice(&params.head);
        EncoderSnapshot { parameters, step_index }
    }
}

fn add(acc: &mut [f64], g: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += w * b;
    }
}

/// Runs `update_fn` iff `step % config.update_frequency == 0`.
pub fn gated_update<F: FnOnce()>(step: usize, config: &EncoderConfig, update_fn: F) -> bool {
    let freq = config.update_frequency.max(1);
    if step % freq == 0 {
        update_fn();
        true
    } else {
        false
    }
}

/// Mean L1 distance between the representations two snapshots assign to the
/// probe contexts.
pub fn representation_shift(
    encoder: &TaskEncoder,
    prev: &EncoderSnapshot,
    curr: &EncoderSnapshot,
    probes: &[&Context],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("probe contexts"));
    }
    check_dim("snapshot parameters", prev.parameters.len(), curr.parameters.len())?;
    let n = encoder.n_params();
    if prev.parameters.len() < n {
        return Err(Error::DimensionMismatch {
            context: "snapshot parameters",
            expected: n,
            actual: prev.parameters.len(),
        });
    }
    let a = encoder.encode_batch(&prev.parameters[..n], probes)?;
    let b = encoder.encode_batch(&curr.parameters[..n], probes)?;
    let total: f64 = a
        .z
        .rows()
        .into_iter()
        .zip(b.z.rows())
        .map(|(x, y)| l1_distance(x.as_slice().expect("row"), y.as_slice().expect("row")))
        .sum();
    Ok(total / probes.len() as f64)
}

/// Fraction of contexts whose argmax head logit equals the label.
pub fn classification_accuracy(
    encoder: &TaskEncoder,
    head: &ClassifierHead,
    encoder_params: &[f64],
    head_params: &[f64],
    contexts: &[&Context],
    labels: &[usize],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::EmptyInput("accuracy contexts"));
    }
    let batch = encoder.encode_batch(encoder_params, contexts)?;
    let logits = head.net.predict(head_params, batch.z.view());
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| crate::envlab::argmax(row.as_slice().expect("row")) == l)
        .count();
    Ok(hits as f64 / contexts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftRecord {
    pub step_index: usize,
    pub shift_value: f64,
    pub encoder_updated: bool,
}

/// Per-step representation shift, persisted as
/// `step_index,shift_value,encoder_updated_flag`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShiftLog {
    pub records: Vec<ShiftRecord>,
}

impl ShiftLog {
    pub fn push(&mut self, step_index: usize, shift_value: f64, encoder_updated: bool) {
        self.records.push(ShiftRecord {
            step_index,
            shift_value,
            encoder_updated,
        });
    }

    pub fn update_count(&self) -> usize {
        self.records.iter().filter(|r| r.encoder_updated).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step_index", "shift_value", "encoder_updated_flag"])?;
        for r in &self.records {
            out.write_record([
                r.step_index.to_string(),
                r.shift_value.to_string(),
                (r.encoder_updated as u8).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
