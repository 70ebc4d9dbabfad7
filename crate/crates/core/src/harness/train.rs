//! Supervised fine-tuning and pretext pretraining loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{TrainConfig, TransformSet};
use crate::arch::{
    forward_extractor, forward_segment, segmentation_loss, split_batch, stack, update_running_stats, LossConfig,
    ModelParams, Mode, NetworkSpec,
};
use crate::autodiff::Graph;
use crate::data::{apply_transform, ssl_transforms, Dataset, SegSample, TransformKind};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, Confusion, SegMetrics};
use crate::optim::{NamedTensors, OptimizerState};

pub const METRICS_HEADER: &str = "iter,split,loss_total,loss_margin,loss_ce,loss_recon,dice_mean";

/// One line of the metrics CSV. Columns that do not apply are left empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub split: &'static str,
    pub loss_total: f64,
    pub loss_margin: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_recon: Option<f64>,
    pub dice_mean: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.split,
            self.loss_total,
            opt(self.loss_margin),
            opt(self.loss_ce),
            opt(self.loss_recon),
            opt(self.dice_mean)
        )
    }
}

/// Everything a run needs to continue: parameters, optimizer and position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(params: ModelParams, cfg: &TrainConfig) -> TrainState {
        let optimizer = OptimizerState::new(cfg.adam(), &params.params);
        TrainState { params, optimizer, iteration: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    /// No validation improvement for the early-stop budget.
    EarlyStop,
    TargetReached,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub stop: StopReason,
    pub final_metric: Option<f64>,
    pub best_metric: f64,
}

/// Loss terms summed (not averaged) over a set of forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub total: f64,
    pub margin: f64,
    pub cross_entropy: f64,
    pub reconstruction: Option<f64>,
    pub count: usize,
}

impl LossSums {
    fn add(&mut self, other: &LossSums) {
        self.total += other.total;
        self.margin += other.margin;
        self.cross_entropy += other.cross_entropy;
        self.reconstruction = match (self.reconstruction, other.reconstruction) {
            (None, r) | (r, None) => r,
            (Some(a), Some(b)) => Some(a + b),
        };
        self.count += other.count;
    }

    fn row(&self, iter: u64, split: &'static str, dice: Option<f64>) -> MetricsRow {
        let n = self.count.max(1) as f64;
        MetricsRow {
            iter,
            split,
            loss_total: self.total / n,
            loss_margin: Some(self.margin / n),
            loss_ce: Some(self.cross_entropy / n),
            loss_recon: self.reconstruction.map(|r| r / n),
            dice_mean: dice,
        }
    }
}

/// Samples of iteration `iter`: consecutive in dataset order, wrapping around.
fn batch_of(data: &Dataset, iter: u64, batch: usize) -> Vec<&SegSample> {
    let n = data.len() as u64;
    (0..batch as u64).map(|b| &data.samples[((iter * batch as u64 + b) % n) as usize]).collect()
}

/// Validation pass in eval mode: merged confusion over every sample plus summed losses.
pub fn validate(spec: &NetworkSpec, params: &ModelParams, data: &Dataset, loss: &LossConfig) -> Result<(SegMetrics, LossSums)> {
    let per_sample: Vec<Result<(Confusion, LossSums)>> = data
        .samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let input = stack(&[&s.image])?;
            let labels = vec![s.labels()];
            let out = forward_segment(&mut g, spec, params, &input, Some(&labels), Mode::Eval)?;
            let l = segmentation_loss(&mut g, spec, &out, &input, &labels, loss)?;
            let probs = split_batch(g.value(out.probs), 1).remove(0);
            let mut c = Confusion::new(spec.classes);
            c.add(&argmax_labels(&probs), &labels[0])?;
            let sums = LossSums {
                total: g.value(l.total).item(),
                margin: g.value(l.margin).item(),
                cross_entropy: g.value(l.cross_entropy).item(),
                reconstruction: l.reconstruction.map(|r| g.value(r).item()),
                count: 1,
            };
            Ok((c, sums))
        })
        .collect();
    let mut confusion = Confusion::new(spec.classes);
    let mut sums = LossSums::default();
    for r in per_sample {
        let (c, s) = r?;
        confusion.merge(&c);
        sums.add(&s);
    }
    Ok((confusion.metrics(), sums))
}

/// Mean Dice of predicting background everywhere; the floor a trained model must beat.
pub fn background_baseline(data: &Dataset) -> Result<f64> {
    let mut c = Confusion::new(data.classes);
    for s in &data.samples {
        let truth = s.labels();
        c.add(&vec![0; truth.len()], &truth)?;
    }
    Ok(c.metrics().mean_dice)
}

fn check_finite(iter: u64, sums: &LossSums) -> Result<()> {
    let terms = [
        ("total", Some(sums.total)),
        ("margin", Some(sums.margin)),
        ("cross_entropy", Some(sums.cross_entropy)),
        ("reconstruction", sums.reconstruction),
    ];
    for (name, v) in terms {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss is {v} at iteration {iter}")));
            }
        }
    }
    Ok(())
}

/// Applies the decay/early-stop rules after an evaluation; returns a stop reason if the run is over.
fn schedule(state: &mut TrainState, cfg: &TrainConfig, metric: f64) -> Option<StopReason> {
    state.optimizer.observe_metric(metric, cfg.eval_interval, cfg.patience, cfg.lr_decay);
    if cfg.target_dice.is_some_and(|t| metric >= t) {
        return Some(StopReason::TargetReached);
    }
    if state.optimizer.since_best >= cfg.early_stop {
        return Some(StopReason::EarlyStop);
    }
    None
}

/// Supervised training from `state.iteration` up to `cfg.max_iterations`.
///
/// Every `eval_interval` iterations (counted from zero, so a resumed run
/// evaluates at the same points and nowhere else) a `train` row with the losses of the latest
/// step and an `eval` row with validation losses and Dice are passed to `emit`.
pub fn train_loop(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    state: &mut TrainState,
    mut emit: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if train.classes > spec.classes {
        return Err(Error::ManifestMismatch(format!(
            "dataset has {} classes, network {}",
            train.classes, spec.classes
        )));
    }
    let loss_cfg = cfg.loss();
    let mut final_metric = None;
    while state.iteration < cfg.max_iterations {
        let it = state.iteration;
        let batch = batch_of(train, it, cfg.batch_size);
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let input = stack(&images)?;
        let labels: Vec<Vec<usize>> = batch.iter().map(|s| s.labels()).collect();
        let mut g = Graph::new();
        let out = forward_segment(&mut g, spec, &state.params, &input, Some(&labels), Mode::Train)?;
        let l = segmentation_loss(&mut g, spec, &out, &input, &labels, &loss_cfg)?;
        let step = LossSums {
            total: g.value(l.total).item(),
            margin: g.value(l.margin).item(),
            cross_entropy: g.value(l.cross_entropy).item(),
            reconstruction: l.reconstruction.map(|r| g.value(r).item()),
            count: 1,
        };
        check_finite(it, &step)?;
        let mut train_conf = Confusion::new(spec.classes);
        for (probs, truth) in split_batch(g.value(out.probs), labels.len()).iter().zip(&labels) {
            train_conf.add(&argmax_labels(probs), truth)?;
        }
        g.backward(l.total)?;
        let grads = g.param_grads();
        state.optimizer.adam_step(&mut state.params.params, &grads)?;
        update_running_stats(&mut state.params, &out.batch_stats);
        state.iteration += 1;

        if state.iteration.is_multiple_of(cfg.eval_interval) {
            emit(&step.row(state.iteration, "train", Some(train_conf.metrics().mean_dice)))?;
            let metric = if val.is_empty() {
                train_conf.metrics().mean_dice
            } else {
                let (m, sums) = validate(spec, &state.params, val, &loss_cfg)?;
                emit(&sums.row(state.iteration, "eval", Some(m.mean_dice)))?;
                m.mean_dice
            };
            final_metric = Some(metric);
            if let Some(stop) = schedule(state, cfg, metric) {
                return Ok(TrainSummary { stop, final_metric, best_metric: state.optimizer.best_metric });
            }
        }
    }
    Ok(TrainSummary {
        stop: StopReason::MaxIterations,
        final_metric,
        best_metric: state.optimizer.best_metric,
    })
}

/// Splits a model's parameters into the extractor subset the pretext task trains.
pub fn extractor_params(spec: &NetworkSpec, params: &ModelParams) -> ModelParams {
    let names = params.extractor_names(spec);
    ModelParams {
        params: names.iter().map(|n| (n.clone(), params.params[n].clone())).collect(),
        buffers: NamedTensors::new(),
    }
}

fn transform_set(cfg: &TrainConfig, channels: usize) -> Vec<TransformKind> {
    match cfg.transforms {
        TransformSet::All => ssl_transforms(channels),
        TransformSet::IdentityOnly => vec![TransformKind::Identity],
    }
}

/// The two views of one pretext step: transforms drawn independently and
/// uniformly, stochastic ones reseeded per application.
fn draw_pair(set: &[TransformKind], seed: u64, stream: u64, index: u64) -> (TransformKind, TransformKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 16);
    let (i, j) = (rng.random_range(0..set.len()), rng.random_range(0..set.len()));
    (set[i].reseed(rng.random()), set[j].reseed(rng.random()))
}

fn pretext_step(spec: &NetworkSpec, params: &ModelParams, image: &crate::tensor::Tensor, pair: (TransformKind, TransformKind), want_grads: bool) -> Result<(f64, Option<NamedTensors>)> {
    let vi = stack(&[&apply_transform(image, pair.0)?])?;
    let vj = stack(&[&apply_transform(image, pair.1)?])?;
    let mut g = Graph::new();
    let fi = forward_extractor(&mut g, spec, params, &vi)?;
    let fj = forward_extractor(&mut g, spec, params, &vj)?;
    let loss = g.pretext_loss(fi, fj)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("pretext loss is {value}")));
    }
    if !want_grads {
        return Ok((value, None));
    }
    g.backward(loss)?;
    Ok((value, Some(g.param_grads())))
}

/// Mean pretext loss over `data` with a fixed pair per sample, so successive
/// evaluations are comparable.
pub fn pretext_eval(spec: &NetworkSpec, params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let set = transform_set(cfg, data.samples[0].channels());
    let losses: Vec<Result<f64>> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| Ok(pretext_step(spec, params, &s.image, draw_pair(&set, cfg.seed, 1, k as u64), false)?.0))
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// Pretext pretraining of the extractor parameters held in `state`
/// (see [`extractor_params`]). Rows carry only the pretext loss; the
/// validation metric driving decay and early stopping is its negation.
pub fn pretrain_loop(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    state: &mut TrainState,
    mut emit: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let set = transform_set(cfg, train.samples[0].channels());
    let row = |iter, split, loss| MetricsRow {
        iter,
        split,
        loss_total: loss,
        loss_margin: None,
        loss_ce: None,
        loss_recon: None,
        dice_mean: None,
    };
    let mut final_metric = None;
    while state.iteration < cfg.max_iterations {
        let it = state.iteration;
        let sample = &train.samples[(it % train.len() as u64) as usize];
        let pair = draw_pair(&set, cfg.seed, 0, it);
        let (loss, grads) = pretext_step(spec, &state.params, &sample.image, pair, true)?;
        let mut grads = grads.unwrap();
        // parameters that never reached the loss still need an entry for Adam
        for (name, t) in &state.params.params {
            grads.entry(name.clone()).or_insert_with(|| crate::tensor::Tensor::zeros(t.shape()));
        }
        grads.retain(|name, _| state.params.params.contains_key(name));
        state.optimizer.adam_step(&mut state.params.params, &grads)?;
        state.iteration += 1;

        if state.iteration.is_multiple_of(cfg.eval_interval) {
            emit(&row(state.iteration, "train", loss))?;
            let metric = if val.is_empty() {
                -loss
            } else {
                let l = pretext_eval(spec, &state.params, val, cfg)?;
                emit(&row(state.iteration, "eval", l))?;
                -l
            };
            final_metric = Some(metric);
            state.optimizer.observe_metric(metric, cfg.eval_interval, cfg.patience, cfg.lr_decay);
            if state.optimizer.since_best >= cfg.early_stop {
                return Ok(TrainSummary {
                    stop: StopReason::EarlyStop,
                    final_metric,
                    best_metric: state.optimizer.best_metric,
                });
            }
        }
    }
    Ok(TrainSummary {
        stop: StopReason::MaxIterations,
        final_metric,
        best_metric: state.optimizer.best_metric,
    })
}
