//! Training loop, Adam, checkpoints and evaluation.
//!
//! Each epoch shuffles the training split with a stream derived from the
//! seed and the epoch number, takes one Adam step per batch, then (for the
//! `crac` loss) scores the validation split and updates the multipliers
//! followed by the penalty parameters. A checkpoint `epoch_XXX.crck` and a
//! copy `last.crck` are written after every epoch, and one row is appended
//! to `train_log.csv`.
//!
//! Checkpoints hold the model, the Adam moments and step, the epoch and the
//! scheduler state, so a resumed run continues bit-identically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crac_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::NamedTensors;
use crate::config::TrainConfig;
use crate::datagen::{read_dataset, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::losses::{compute_loss, constraint_stats, BatchTargets, LossKind};
use crate::metrics::{MetricsAccumulator, MetricsConfig, MetricsReport};
use crate::model::{batch_tensor, forward, ModelParams};
use crate::priors::PriorMode;
use crate::scheduler::{SchedulerState, ValidationAccumulator};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Moments and parameters are stored as
/// `f32`, arithmetic is in `f64`.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.params().len() {
        return Err(invalid("one gradient per parameter tensor expected"));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if g.len() != p.len() {
            return Err(invalid(format!("gradient for {} has the wrong size", p.name)));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * g[j];
            let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * g[j] * g[j];
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + EPSILON);
            p.data[j] = (p.data[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Everything needed to continue training after `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub scheduler: Option<SchedulerState>,
}

impl TrainState {
    pub fn to_named(&self) -> Result<NamedTensors> {
        let mut out = self.params.to_named();
        for (i, p) in self.params.params().iter().enumerate() {
            out.push(format!("adam.m.{}", p.name), p.shape.clone(), self.adam.m[i].clone())?;
            out.push(format!("adam.v.{}", p.name), p.shape.clone(), self.adam.v[i].clone())?;
        }
        out.push("adam.step", vec![1], vec![self.adam.step as f32])?;
        out.push("train.epoch", vec![1], vec![self.epoch as f32])?;
        if let Some(s) = &self.scheduler {
            s.to_named(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_named(named: &NamedTensors, config: &TrainConfig) -> Result<Self> {
        let params = ModelParams::from_named(named)?;
        let mut adam = AdamState::new(&params);
        for (i, p) in params.params().iter().enumerate() {
            adam.m[i] = named.require(&format!("adam.m.{}", p.name))?.data.clone();
            adam.v[i] = named.require(&format!("adam.v.{}", p.name))?.data.clone();
        }
        let scalar = |name: &str| -> Result<f32> {
            named
                .require(name)?
                .data
                .first()
                .copied()
                .ok_or_else(|| Error::Incompatible(format!("{name} is empty")))
        };
        adam.step = scalar("adam.step")? as u64;
        let epoch = scalar("train.epoch")? as usize;
        let classes = params.classes();
        let scheduler = if config.loss_kind(classes)?.uses_scheduler() {
            Some(SchedulerState::from_named(named, config.scheduler.clone(), classes)?)
        } else {
            None
        };
        Ok(Self {
            epoch,
            params,
            adam,
            scheduler,
        })
    }
}

/// Targets for every sample of a split.
pub fn split_targets(split: &Split, mode: PriorMode) -> Result<Vec<BatchTargets>> {
    split
        .samples
        .iter()
        .map(|s| BatchTargets::from_labels(&s.labels, s.height, s.width, split.classes, mode))
        .collect()
}

/// Sample order for an epoch (1-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Logits for a list of samples, `[N, K, H, W]`.
pub fn predict(params: &ModelParams, split: &Split, indices: &[usize]) -> Result<Tensor> {
    let images: Vec<&[f32]> = indices.iter().map(|&i| split.samples[i].image.as_slice()).collect();
    let mut g = Graph::new();
    let vars = params.register(&mut g, false)?;
    let input = g.constant(batch_tensor(&images, split.height, split.width)?)?;
    let y = forward(&mut g, &vars, input)?;
    Ok(g.value(y).clone())
}

/// One `train_log.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_penalty_inner: f64,
    pub train_penalty_outer: f64,
    pub val_loss: f64,
    /// `λ`, `ρ` and mean validation `|τ − l|`, `[k][r]`, for `crac` only.
    pub scheduler: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub wall_seconds: Option<f64>,
}

pub fn log_header(classes: usize, with_scheduler: bool, wall: bool) -> String {
    let mut h = String::from("epoch,lr,train_loss,train_ce,train_penalty_inner,train_penalty_outer,val_loss");
    if with_scheduler {
        for prefix in ["lambda", "rho", "violation"] {
            for k in 0..classes {
                for r in ["inner", "outer"] {
                    write!(h, ",{prefix}_{k}_{r}").expect("string write");
                }
            }
        }
    }
    if wall {
        h.push_str(",wall_seconds");
    }
    h
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_ce,
            self.train_penalty_inner,
            self.train_penalty_outer,
            self.val_loss
        );
        if let Some((l, r, v)) = &self.scheduler {
            for x in l.iter().chain(r).chain(v) {
                write!(s, ",{x}").expect("string write");
            }
        }
        if let Some(w) = self.wall_seconds {
            write!(s, ",{w:.3}").expect("string write");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub last_checkpoint: PathBuf,
}

pub fn checkpoint_path(output: &Path, epoch: usize) -> PathBuf {
    output.join(format!("epoch_{epoch:03}.crck"))
}

fn validation_pass(
    state: &TrainState,
    kind: &LossKind,
    val: &Split,
    targets: &[BatchTargets],
    batch: usize,
) -> Result<(f64, Option<ValidationAccumulator>)> {
    let classes = state.params.classes();
    let mut acc = state.scheduler.as_ref().map(|_| ValidationAccumulator::new(classes));
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(batch) {
        let logits = predict(&state.params, val, chunk)?;
        let parts: Vec<&BatchTargets> = chunk.iter().map(|&i| &targets[i]).collect();
        let t = BatchTargets::concat(&parts)?;
        let mut g = Graph::new();
        let l = g.constant(logits.clone())?;
        let alm = state.scheduler.as_ref().map(|s| s.alm_params());
        let out = compute_loss(&mut g, l, &t, kind, alm.as_ref())?;
        loss_sum += out.breakdown.total * chunk.len() as f64;
        if let (Some(acc), Some(alm)) = (acc.as_mut(), alm.as_ref()) {
            acc.add(&constraint_stats(&logits, &t, alm)?)?;
        }
    }
    Ok((loss_sum / val.len().max(1) as f64, acc))
}

fn truncate_log(path: &Path, header: &str, keep: usize) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = std::fs::read_to_string(path) {
        let mut lines = text.lines();
        if lines.next() != Some(header) {
            return Err(Error::Incompatible(format!("{} has a different header", path.display())));
        }
        for line in lines {
            let epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| Error::Malformed(format!("bad log row {line:?}")))?;
            if epoch <= keep {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains from scratch, or from `resume` when given.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = read_dataset(&config.dataset)?;
    train_on(config, &data, resume)
}

pub fn train_on(config: &TrainConfig, data: &Dataset, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = data.classes();
    let kind = config.loss_kind(classes)?;
    if data.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    if kind.uses_scheduler() && data.val.is_empty() {
        return Err(invalid("the crac loss needs a validation split"));
    }
    let train_targets = split_targets(&data.train, config.prior)?;
    let val_targets = split_targets(&data.val, config.prior)?;

    let mut state = match resume {
        Some(path) => {
            let s = TrainState::from_named(&NamedTensors::read(path)?, config)?;
            if s.params.classes() != classes {
                return Err(Error::Incompatible(format!(
                    "checkpoint has {} classes, dataset has {classes}",
                    s.params.classes()
                )));
            }
            s
        }
        None => {
            let params = ModelParams::build(config.seed, classes)?;
            let scheduler = if kind.uses_scheduler() {
                let mut s = SchedulerState::new(classes, config.scheduler.clone())?;
                s.quantize();
                Some(s)
            } else {
                None
            };
            TrainState {
                epoch: 0,
                adam: AdamState::new(&params),
                params,
                scheduler,
            }
        }
    };

    std::fs::create_dir_all(&config.output)?;
    let log_path = config.output.join("train_log.csv");
    let header = log_header(classes, kind.uses_scheduler(), config.log_wall_time);
    let mut log_text = if resume.is_some() {
        truncate_log(&log_path, &header, state.epoch)?
    } else {
        format!("{header}\n")
    };
    std::fs::write(&log_path, &log_text)?;

    let mut log = Vec::new();
    let last = config.output.join("last.crck");
    let (h, w) = (data.train.height, data.train.width);
    for epoch in state.epoch + 1..=config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate(epoch);
        let order = epoch_order(config.seed, epoch, data.train.len());
        let mut sums = [0.0; 4];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let parts: Vec<&BatchTargets> = chunk.iter().map(|&i| &train_targets[i]).collect();
            let t = BatchTargets::concat(&parts)?;
            let images: Vec<&[f32]> = chunk.iter().map(|&i| data.train.samples[i].image.as_slice()).collect();
            let mut g = Graph::new();
            let vars = state.params.register(&mut g, true)?;
            let input = g.constant(batch_tensor(&images, h, w)?)?;
            let logits = forward(&mut g, &vars, input)?;
            let alm = state.scheduler.as_ref().map(|s| s.alm_params());
            let out = compute_loss(&mut g, logits, &t, &kind, alm.as_ref()).map_err(|e| match e {
                Error::Tensor(_) => Error::NonFinite(format!("epoch {epoch}, batch {b} (samples {chunk:?}): {e}")),
                e => e,
            })?;
            let br = &out.breakdown;
            if !br.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b} (samples {chunk:?})")));
            }
            let n = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([br.total, br.ce_term, br.penalty_inner, br.penalty_outer]) {
                *s += v * n;
            }
            let grads = g.backward(out.loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
            adam_step(&mut state.params, &grads, &mut state.adam, lr)?;
        }
        let n = data.train.len() as f64;
        let (val_loss, acc) = validation_pass(&state, &kind, &data.val, &val_targets, config.batch_size)?;
        let mut sched_cols = None;
        if let (Some(s), Some(acc)) = (state.scheduler.as_mut(), acc) {
            let stats = acc.finish()?;
            s.update_multipliers(&stats)?;
            s.update_rho(&stats)?;
            s.quantize();
            sched_cols = Some((
                s.lambda.values().to_vec(),
                s.rho.values().to_vec(),
                stats.mean_abs_violation.values().to_vec(),
            ));
        }
        state.epoch = epoch;
        let named = state.to_named()?;
        named.write(checkpoint_path(&config.output, epoch))?;
        named.write(&last)?;
        let row = LogRow {
            epoch,
            lr,
            train_loss: sums[0] / n,
            train_ce: sums[1] / n,
            train_penalty_inner: sums[2] / n,
            train_penalty_outer: sums[3] / n,
            val_loss,
            scheduler: sched_cols,
            wall_seconds: config.log_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        log_text.push_str(&row.to_csv());
        log_text.push('\n');
        std::fs::write(&log_path, &log_text)?;
        log.push(row);
    }
    Ok(TrainOutcome {
        state,
        log,
        last_checkpoint: last,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::from_named(&NamedTensors::read(path)?)
}

/// Metrics for every image of a split.
pub fn evaluate(params: &ModelParams, split: &Split, config: &MetricsConfig) -> Result<MetricsReport> {
    if params.classes() != split.classes {
        return Err(Error::Incompatible(format!(
            "model predicts {} classes, split has {}",
            params.classes(),
            split.classes
        )));
    }
    let mut acc = MetricsAccumulator::new(split.classes, config.clone())?;
    let hw = split.height * split.width;
    let k = split.classes;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(16) {
        let logits = predict(params, split, chunk)?;
        for (j, &i) in chunk.iter().enumerate() {
            let s = &split.samples[i];
            acc.add_image(&logits.data()[j * k * hw..(j + 1) * k * hw], &s.labels, s.height, s.width)?;
        }
    }
    acc.finish()
}
