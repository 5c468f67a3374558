//! Loss, optimizer, learning-rate schedule, delayed updates, early stopping
//! and the training loop.

mod checkpoint;

use std::collections::BTreeMap;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{pack_batches, ParallelCorpus};
use crate::error::TrainError;
use crate::model::{ConvS2S, ParamStore};
use crate::subword::{SubwordModel, BOS_ID, EOS_ID, PAD_ID};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{average_checkpoints, Checkpoint, CHECKPOINT_VERSION};

type Result<T> = std::result::Result<T, TrainError>;

/// Mean token-level cross-entropy over positions whose target is not `pad_id`.
pub fn cross_entropy_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    pad_id: usize,
) -> Result<Var> {
    let (sum, tokens) = cross_entropy_sum(g, logits, targets, pad_id)?;
    Ok(g.scale(sum, 1.0 / tokens as f64)?)
}

/// Summed cross-entropy and the number of non-pad positions.
pub fn cross_entropy_sum<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    pad_id: usize,
) -> Result<(Var, usize)> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(TrainError::BadSetting(format!(
            "logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= shape[1]) {
        return Err(TrainError::BadSetting(format!(
            "target {t} outside vocabulary of {}",
            shape[1]
        )));
    }
    let cells: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != pad_id)
        .map(|(i, &t)| (i, t))
        .collect();
    if cells.is_empty() {
        return Err(TrainError::AllPad);
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, &cells)?;
    let total = g.sum(picked)?;
    Ok((g.scale(total, -1.0)?, cells.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Fixed,
    WarmupExpDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Per-step decay factor after warm-up.
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            kind: ScheduleKind::WarmupExpDecay,
            base_lr: 0.25,
            warmup_steps: 16000,
            decay: 0.9995,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::BadSetting(format!("base_lr {} must be > 0", self.base_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::BadSetting(format!("decay {} not in (0, 1]", self.decay)));
        }
        Ok(())
    }
}

/// Constant `base_lr` through warm-up, then `base_lr · decay^(step − warmup)`.
pub fn lr_schedule(step: u64, s: &Schedule) -> f64 {
    match s.kind {
        ScheduleKind::Fixed => s.base_lr,
        ScheduleKind::WarmupExpDecay if step < s.warmup_steps => s.base_lr,
        ScheduleKind::WarmupExpDecay => s.base_lr * s.decay.powf((step - s.warmup_steps) as f64),
    }
}

/// Stop once the best loss has gone `patience` epochs without a strict
/// improvement.
pub fn early_stop(losses: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &l in losses {
        if l < best {
            best = l;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience.max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: ParamStore<T>,
    pub momentum: f64,
    /// Completed optimizer updates.
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64) -> Self {
        OptimizerState {
            velocity: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            momentum,
            step: 0,
        }
    }
}

/// `√(Σ g²)` over every tensor.
pub fn global_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One Nesterov update in lookahead form:
/// `v ← μ·v − lr·∇f(θ + μ·v)`, `θ ← θ + v`.
///
/// `grad_fn` receives the lookahead point. When `clip_norm` is set the
/// gradient is rescaled to at most that global norm. A non-finite gradient
/// rejects the step and leaves parameters and state untouched. Returns the
/// gradient norm before clipping.
pub fn nesterov_step<T, F>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    clip_norm: Option<f64>,
    grad_fn: F,
) -> Result<f64>
where
    T: Scalar,
    F: FnOnce(&ParamStore<T>) -> Result<ParamStore<T>>,
{
    if !(lr > 0.0) || !(0.0..1.0).contains(&state.momentum) {
        return Err(TrainError::BadSetting(format!(
            "need lr > 0 and 0 ≤ μ < 1, got lr {lr}, μ {}",
            state.momentum
        )));
    }
    let mu = T::of(state.momentum);
    let mut lookahead = params.clone();
    for (name, p) in lookahead.iter_mut() {
        let v = velocity_for(state, name)?;
        p.axpy(mu, v).map_err(|e| TrainError::Mismatch(e.to_string()))?;
    }
    let mut grads = grad_fn(&lookahead)?;
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    let norm = global_norm(&grads);
    if let Some(c) = clip_norm {
        if norm > c {
            let s = T::of(c / norm);
            grads.values_mut().for_each(|g| g.scale_in_place(s));
        }
    }
    let neg_lr = T::of(-lr);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::Mismatch(format!("no gradient for '{name}'")))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| TrainError::Mismatch(format!("no velocity for '{name}'")))?;
        v.scale_in_place(mu);
        v.axpy(neg_lr, g).map_err(|e| TrainError::Mismatch(e.to_string()))?;
        p.axpy(T::one(), v).map_err(|e| TrainError::Mismatch(e.to_string()))?;
    }
    state.step += 1;
    Ok(norm)
}

fn velocity_for<'a, T>(state: &'a OptimizerState<T>, name: &str) -> Result<&'a Tensor<T>> {
    state
        .velocity
        .get(name)
        .ok_or_else(|| TrainError::Mismatch(format!("no velocity for '{name}'")))
}

/// A tokenized training pair. `target` excludes bos and eos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// Decoder input: bos followed by the target.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len() + 1);
        v.push(BOS_ID);
        v.extend(&self.target);
        v
    }

    /// Decoder output: the target followed by eos.
    pub fn decoder_output(&self) -> Vec<usize> {
        let mut v = self.target.clone();
        v.push(EOS_ID);
        v
    }

    /// `(source, target)` lengths as the batcher counts them.
    pub fn lengths(&self) -> (usize, usize) {
        (self.source.len(), self.target.len() + 1)
    }
}

/// Tokenizes both sides of a corpus.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    source: &SubwordModel,
    target: &SubwordModel,
) -> Vec<Example> {
    corpus
        .iter()
        .map(|p| Example {
            source: source.encode(p.source()),
            target: target.encode(p.target()),
        })
        .collect()
}

/// Summed per-token loss of one example, recorded on `g`.
pub fn example_loss<T: Scalar>(
    model: &ConvS2S<T>,
    g: &mut Graph<T>,
    ex: &Example,
    dropout_seed: Option<u64>,
) -> Result<(Var, usize)> {
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let enc = model.encode(g, &ex.source, rng.as_mut().map(|r| r as _))?;
    let out = model.decode_forward(g, enc, &ex.decoder_input(), rng.as_mut().map(|r| r as _))?;
    cross_entropy_sum(g, out.logits, &ex.decoder_output(), PAD_ID)
}

/// Gradient of the summed loss over a set of examples.
#[derive(Debug, Clone)]
pub struct GradientSum<T> {
    pub grads: ParamStore<T>,
    pub loss: f64,
    pub tokens: usize,
}

impl<T: Scalar> GradientSum<T> {
    fn zero(params: &ParamStore<T>) -> Self {
        GradientSum {
            grads: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            loss: 0.0,
            tokens: 0,
        }
    }

    fn absorb(&mut self, other: &GradientSum<T>) {
        for (name, g) in self.grads.iter_mut() {
            if let Some(o) = other.grads.get(name) {
                g.axpy(T::one(), o).expect("gradient shapes match parameters");
            }
        }
        self.loss += other.loss;
        self.tokens += other.tokens;
    }

    /// Gradient of the token-mean loss.
    pub fn mean(mut self) -> ParamStore<T> {
        let s = T::of(1.0 / self.tokens.max(1) as f64);
        self.grads.values_mut().for_each(|g| g.scale_in_place(s));
        self.grads
    }
}

/// Deterministic per-example dropout seed.
pub fn dropout_seed(seed: u64, step: u64, example: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [step, example as u64] {
        h = (h ^ x).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

const GRAD_CHUNK: usize = 8;

/// Summed-loss gradients over `examples` for the model with `params`.
///
/// Examples are processed in parallel, in fixed chunks whose partial sums
/// are combined in order, so the result does not depend on thread count.
/// `seeds[i]`, when present, drives dropout for `examples[i]`.
pub fn batch_gradients<T: Scalar>(
    model: &ConvS2S<T>,
    examples: &[&Example],
    seeds: Option<&[u64]>,
) -> Result<GradientSum<T>> {
    let partials: Vec<GradientSum<T>> = examples
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = GradientSum::zero(model.params());
            for (i, ex) in chunk.iter().enumerate() {
                let seed = seeds.map(|s| s[c * GRAD_CHUNK + i]);
                let mut g = Graph::new();
                let (loss, tokens) = example_loss(model, &mut g, ex, seed)?;
                let loss_value = g.value(loss).item().as_f64();
                let grads = g.backward(loss)?;
                acc.absorb(&GradientSum {
                    grads: grads.into_params(),
                    loss: loss_value,
                    tokens,
                });
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = GradientSum::zero(model.params());
    for p in &partials {
        total.absorb(p);
    }
    Ok(total)
}

/// Sums the gradients of several micro-batches and scales by their total
/// token count, giving the gradient of the token-mean loss over the union.
pub fn accumulate_gradients<T: Scalar>(
    model: &ConvS2S<T>,
    micro_batches: &[Vec<&Example>],
    seeds: Option<&[Vec<u64>]>,
) -> Result<(ParamStore<T>, f64, usize)> {
    if micro_batches.is_empty() {
        return Err(TrainError::BadSetting("need at least one micro-batch".into()));
    }
    let mut total = GradientSum::zero(model.params());
    for (i, mb) in micro_batches.iter().enumerate() {
        let s = seeds.map(|s| s[i].as_slice());
        total.absorb(&batch_gradients(model, mb, s)?);
    }
    let (loss, tokens) = (total.loss, total.tokens);
    Ok((total.mean(), loss, tokens))
}

/// Token-mean loss with dropout off.
pub fn evaluate_loss<T: Scalar>(model: &ConvS2S<T>, examples: &[Example]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let (loss, tokens) = example_loss(model, &mut g, ex, None)?;
            Ok((g.value(loss).item().as_f64(), tokens))
        })
        .collect::<Result<_>>()?;
    let (loss, tokens) = parts
        .iter()
        .fold((0.0, 0), |(l, t), &(a, b)| (l + a, t + b));
    if tokens == 0 {
        return Err(TrainError::AllPad);
    }
    Ok(loss / tokens as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Padded source + target tokens per batch.
    pub batch_tokens: usize,
    /// Batches summed into one optimizer update.
    pub accumulation: usize,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub schedule: Schedule,
    pub patience: usize,
    pub max_epochs: usize,
    /// Average the parameters of this many most recent epoch checkpoints
    /// into the final model; 0 or 1 keeps the best-validation checkpoint.
    pub average_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_tokens: 4000,
            accumulation: 1,
            momentum: 0.99,
            clip_norm: 0.1,
            schedule: Schedule::default(),
            patience: 3,
            max_epochs: 100,
            average_last: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(TrainError::BadSetting(m.to_string()));
        if self.accumulation == 0 {
            return bad("accumulation must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return bad("patience and max_epochs must be ≥ 1");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be ≥ 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome<T> {
    /// The model to use downstream: best-validation, or the average of the
    /// last epochs when configured.
    pub model: Checkpoint<T>,
    pub best: Checkpoint<T>,
    /// One checkpoint per completed epoch.
    pub epochs: Vec<Checkpoint<T>>,
    pub history: Vec<EpochRecord>,
}

/// Single-writer training loop.
pub struct Trainer<T> {
    pub model: ConvS2S<T>,
    pub state: OptimizerState<T>,
    pub config: TrainConfig,
    pub epoch: u64,
    pub valid_history: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ConvS2S<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(model.params(), config.momentum);
        Ok(Trainer {
            model,
            state,
            config,
            epoch: 0,
            valid_history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let Checkpoint {
            config: model_config,
            params,
            optimizer,
            epoch,
            valid_history,
            ..
        } = ckpt;
        Ok(Trainer {
            model: ConvS2S::from_params(model_config, params)?,
            state: optimizer,
            config,
            epoch,
            valid_history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            optimizer: self.state.clone(),
            epoch: self.epoch,
            valid_history: self.valid_history.clone(),
            averaged_from: Vec::new(),
        }
    }

    /// One optimizer update over `micro_batches`, with dropout seeded from
    /// the run seed, the update index and each example's corpus index.
    pub fn step(&mut self, micro_batches: &[Vec<(usize, &Example)>]) -> Result<(f64, usize)> {
        let lr = lr_schedule(self.state.step, &self.config.schedule);
        let clip = (self.config.clip_norm > 0.0).then_some(self.config.clip_norm);
        let dropout = self.model.config().dropout > 0.0;
        let step = self.state.step;
        let seed = self.config.seed;
        let seeds: Vec<Vec<u64>> = micro_batches
            .iter()
            .map(|mb| mb.iter().map(|&(i, _)| dropout_seed(seed, step, i)).collect())
            .collect();
        let batches: Vec<Vec<&Example>> = micro_batches
            .iter()
            .map(|mb| mb.iter().map(|&(_, e)| e).collect())
            .collect();
        let config = self.model.config().clone();
        let mut outcome = (0.0, 0);
        nesterov_step(self.model.params_mut(), &mut self.state, lr, clip, |lookahead| {
            let probe = ConvS2S::from_params(config, lookahead.clone())?;
            let (grads, loss, tokens) =
                accumulate_gradients(&probe, &batches, dropout.then_some(seeds.as_slice()))?;
            outcome = (loss, tokens);
            Ok(grads)
        })?;
        Ok(outcome)
    }

    /// One pass over `train`; returns the token-mean training loss.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<f64> {
        let lengths: Vec<(usize, usize)> = train.iter().map(Example::lengths).collect();
        let epoch_seed = dropout_seed(self.config.seed, u64::MAX, self.epoch as usize);
        let batches = pack_batches(&lengths, self.config.batch_tokens, epoch_seed)?;
        let (mut loss, mut tokens) = (0.0, 0);
        for group in batches.chunks(self.config.accumulation) {
            let micro: Vec<Vec<(usize, &Example)>> = group
                .iter()
                .map(|b| b.pair_ids.iter().map(|&i| (i, &train[i])).collect())
                .collect();
            let (l, t) = self.step(&micro)?;
            loss += l;
            tokens += t;
        }
        self.epoch += 1;
        Ok(loss / tokens.max(1) as f64)
    }

    /// Trains until early stopping or `max_epochs`, keeping a checkpoint per
    /// epoch and the best by validation loss.
    pub fn fit(&mut self, train: &[Example], valid: &[Example]) -> Result<TrainOutcome<T>> {
        if train.is_empty() || valid.is_empty() {
            return Err(TrainError::BadSetting(
                "training and validation sets must be non-empty".into(),
            ));
        }
        let mut epochs = Vec::new();
        let mut history = Vec::new();
        let mut best: Option<Checkpoint<T>> = None;
        while (self.epoch as usize) < self.config.max_epochs {
            let train_loss = self.train_epoch(train)?;
            let valid_loss = evaluate_loss(&self.model, valid)?;
            self.valid_history.push(valid_loss);
            let record = EpochRecord {
                epoch: self.epoch,
                step: self.state.step,
                train_loss,
                valid_loss,
                lr: lr_schedule(self.state.step, &self.config.schedule),
            };
            info!(
                "epoch {} step {} train_loss {:.4} valid_loss {:.4} lr {:.5}",
                record.epoch, record.step, train_loss, valid_loss, record.lr
            );
            history.push(record);
            let ckpt = self.checkpoint();
            let improved = self.valid_history[..self.valid_history.len() - 1]
                .iter()
                .all(|&l| valid_loss < l);
            if improved || best.is_none() {
                debug!("new best validation loss {valid_loss:.4}");
                best = Some(ckpt.clone());
            }
            epochs.push(ckpt);
            if early_stop(&self.valid_history, self.config.patience) {
                info!("early stop after epoch {}", self.epoch);
                break;
            }
        }
        let best = best.expect("at least one epoch ran");
        let model = if self.config.average_last > 1 {
            let n = self.config.average_last.min(epochs.len());
            average_checkpoints(&epochs[epochs.len() - n..])?
        } else {
            best.clone()
        };
        Ok(TrainOutcome {
            model,
            best,
            epochs,
            history,
        })
    }
}

/// Parameter-wise difference `a − b`, for update comparisons.
pub fn param_delta<T: Scalar>(a: &ParamStore<T>, b: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
    a.iter()
        .filter_map(|(k, x)| {
            b.get(k)
                .and_then(|y| x.zip_map(y, |p, q| p - q).ok())
                .map(|d| (k.clone(), d))
        })
        .collect()
}
