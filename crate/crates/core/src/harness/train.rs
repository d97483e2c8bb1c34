//! Mini-batch training with periodic validation and early stopping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::metrics::{evaluate, MetricsReport};
use crate::error::{GemtError, Result};
use crate::model::{batch_dims, full_forward, EncoderConfig, GemTransModel, Mode, Task, VideoSample};
use crate::supervision::{overall_loss, task_loss, total_attention_loss, AttnLossWeights};
use crate::synth::Splits;
use crate::tensor::params::Bound;
use crate::tensor::{OptimizerState, ParameterStore, Scalar, Tape, Var};

const EVAL_BATCH: usize = 32;

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub task: Var,
    pub spatial: Var,
    pub temporal: Var,
}

/// Forward pass plus the overall objective for a batch.
pub fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    model: &EncoderConfig,
    samples: &[&VideoSample],
    task: Task,
    weights: &AttnLossWeights,
    mode: &mut Mode,
) -> Result<BatchLoss> {
    let out = full_forward(tape, bound, model, samples, task, mode)?;
    let dims = batch_dims(samples)?;
    let tl = task_loss(tape, &out, samples, task)?;
    let al = total_attention_loss(tape, &out, samples, dims, model.patch_size, weights)?;
    let total = overall_loss(tape, tl, al.total)?;
    Ok(BatchLoss {
        total,
        task: tl,
        spatial: al.spatial,
        temporal: al.temporal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub task: f64,
    pub spatial: f64,
    pub temporal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// Optimizer steps taken before this evaluation.
    pub step: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct History {
    pub train: Vec<StepLoss>,
    pub validation: Vec<Evaluation>,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation score.
    pub best: GemTransModel<f32>,
    pub last: GemTransModel<f32>,
    pub history: History,
}

/// Higher is better: −MAE for EF, accuracy for AS.
pub fn validation_score(m: &MetricsReport) -> f64 {
    match m.task {
        Task::Ef => -m.mae.unwrap_or(f64::INFINITY),
        Task::As => m.accuracy.unwrap_or(0.0),
    }
}

fn value<F: Scalar>(tape: &Tape<F>, v: Var) -> f64 {
    tape.value(v).item().to_f64().unwrap_or(f64::NAN)
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut ParameterStore<F>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::lit(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Learning-rate multiplier for 1-based `step`: linear warmup, then an
/// optional cosine decay that reaches zero after `steps`.
pub fn lr_factor(step: usize, warmup: usize, steps: usize, cosine: bool) -> f64 {
    if warmup > 0 && step <= warmup {
        return step as f64 / warmup as f64;
    }
    if !cosine || steps <= warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (steps - warmup) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = GemTransModel::<f32>::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optim, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let train: Vec<&VideoSample> = splits.train.iter().collect();
    let val: Vec<&VideoSample> = splits.val.iter().collect();
    let bs = cfg.train.batch_size.min(train.len());

    let first = evaluate(&model, &val, cfg.task, EVAL_BATCH)?;
    let mut best_score = validation_score(&first);
    let mut best = model.clone();
    let mut history = History {
        train: Vec::with_capacity(cfg.train.steps),
        validation: vec![Evaluation {
            step: 0,
            metrics: first,
        }],
        best_step: 0,
        steps_run: 0,
        stopped_early: false,
    };
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    for step in 1..=cfg.train.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&VideoSample> = order[cursor..cursor + bs].iter().map(|&i| train[i]).collect();
        cursor += bs;
        let mut mode = if cfg.model.dropout > 0.0 {
            Mode::Train {
                rng: ChaCha8Rng::seed_from_u64(rng.gen()),
                p: cfg.model.dropout,
            }
        } else {
            Mode::Eval
        };

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let loss = batch_loss(&mut tape, &bound, &model.config, &batch, cfg.task, &cfg.attn, &mut mode)?;
        let total = value(&tape, loss.total);
        if !total.is_finite() {
            return Err(GemtError::NonFinite {
                op: format!("training loss at step {step}"),
            });
        }
        let grads = tape.backward(loss.total).map_err(|e| match e {
            GemtError::NonFinite { op } => GemtError::NonFinite {
                op: format!("{op} at step {step}"),
            },
            other => other,
        })?;
        let mut g = bound.gradients(&grads);
        clip_gradients(&mut g, cfg.train.clip_norm);
        opt.config.lr = cfg.optim.lr * lr_factor(step, cfg.train.warmup, cfg.train.steps, cfg.train.cosine);
        opt.step(&mut model.params, &g)?;
        history.train.push(StepLoss {
            step,
            total,
            task: value(&tape, loss.task),
            spatial: value(&tape, loss.spatial),
            temporal: value(&tape, loss.temporal),
        });
        history.steps_run = step;

        if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
            let m = evaluate(&model, &val, cfg.task, EVAL_BATCH)?;
            let score = validation_score(&m);
            history.validation.push(Evaluation { step, metrics: m });
            if score > best_score {
                best_score = score;
                best = model.clone();
                history.best_step = step;
                stale = 0;
            } else {
                stale += 1;
                if cfg.train.patience > 0 && stale >= cfg.train.patience {
                    history.stopped_early = step < cfg.train.steps;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        history,
    })
}
