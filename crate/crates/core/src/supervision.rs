//! Attention supervision: coarse LV masks, the spatial and temporal attention
//! penalties, and the overall training objective.
//!
//! Spatial: `Σ_s attn_s²` over patches outside the ED ∪ ES mask.
//! Temporal: `Σ_t (attn_t − 1)²` over target frames.
//! Total: `λ_temporal · Σ temporal + λ_spatial · Σ spatial`, summed over the
//! videos (and frames) of a sample, then averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{GemtError, Result};
use crate::model::{tokenizer::patchify, BatchDims, ForwardOutput, Task, VideoSample, VideoSupervision};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One bit per patch, in patchify order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseMask(pub Vec<u8>);

impl CoarseMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }
}

/// Which frames the temporal loss pulls attention toward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    /// Exactly the ED and ES frames.
    #[default]
    Frames,
    /// Every frame in the closed range between ED and ES.
    Interval,
}

impl std::str::FromStr for TemporalMode {
    type Err = GemtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" => Ok(TemporalMode::Frames),
            "interval" => Ok(TemporalMode::Interval),
            other => Err(GemtError::Config(format!(
                "unknown temporal mode `{other}` (expected frames|interval)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttnLossWeights {
    pub lambda_spatial: f64,
    pub lambda_temporal: f64,
    pub temporal_mode: TemporalMode,
}

impl Default for AttnLossWeights {
    fn default() -> Self {
        AttnLossWeights {
            lambda_spatial: 1.0,
            lambda_temporal: 1.0,
            temporal_mode: TemporalMode::Frames,
        }
    }
}

impl AttnLossWeights {
    pub fn disabled() -> Self {
        AttnLossWeights {
            lambda_spatial: 0.0,
            lambda_temporal: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("attn.lambda_spatial", self.lambda_spatial),
            ("attn.lambda_temporal", self.lambda_temporal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GemtError::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// OR-pools an H×W bit mask onto the p×p patch grid.
pub fn coarsen_mask(mask: &[u8], h: usize, w: usize, p: usize) -> Result<CoarseMask> {
    let patches = patchify(mask, h, w, p)?;
    Ok(CoarseMask(
        patches
            .chunks_exact(p * p)
            .map(|c| u8::from(c.iter().any(|&b| b != 0)))
            .collect(),
    ))
}

pub fn union_masks(ed: &CoarseMask, es: &CoarseMask) -> Result<CoarseMask> {
    if ed.len() != es.len() {
        return Err(GemtError::shape("union_masks", &[ed.len()], &[es.len()]));
    }
    Ok(CoarseMask(ed.0.iter().zip(&es.0).map(|(&a, &b)| a | b).collect()))
}

/// Coarse ED ∪ ES mask of one supervised video.
pub fn video_union(sup: &VideoSupervision, h: usize, w: usize, p: usize) -> Result<CoarseMask> {
    union_masks(
        &coarsen_mask(&sup.ed_mask, h, w, p)?,
        &coarsen_mask(&sup.es_mask, h, w, p)?,
    )
}

/// Frame indices the temporal loss targets.
pub fn temporal_targets(ed: usize, es: usize, t: usize, mode: TemporalMode) -> Result<Vec<usize>> {
    if ed >= t || es >= t {
        return Err(GemtError::arg(
            "temporal_targets",
            format!("ed {ed} / es {es} outside [0, {t})"),
        ));
    }
    Ok(match mode {
        TemporalMode::Frames if ed == es => vec![ed],
        TemporalMode::Frames => {
            let mut v = vec![ed.min(es), ed.max(es)];
            v.dedup();
            v
        }
        TemporalMode::Interval => (ed.min(es)..=ed.max(es)).collect(),
    })
}

/// `Σ attn_s²` over entries whose `outside` weight is 1. `outside` matches the
/// shape of `attn` and holds 0/1.
fn masked_square_sum<F: Scalar>(tape: &mut Tape<F>, attn: Var, outside: Tensor<F>) -> Result<Var> {
    if tape.shape(attn) != outside.shape() {
        return Err(GemtError::shape(
            "spatial_attention_loss",
            tape.shape(attn),
            outside.shape(),
        ));
    }
    let m = tape.constant(outside);
    let sq = tape.square(attn);
    let masked = tape.mul(sq, m)?;
    Ok(tape.sum(masked))
}

/// Spatial penalty for a single attention vector over HW/p² patches.
pub fn spatial_attention_loss<F: Scalar>(tape: &mut Tape<F>, attn: Var, union: &CoarseMask) -> Result<Var> {
    let n = tape.value(attn).numel();
    if n != union.len() {
        return Err(GemtError::shape("spatial_attention_loss", &[n], &[union.len()]));
    }
    let outside = union.0.iter().map(|&b| F::lit(1.0 - b as f64)).collect();
    let shape = tape.shape(attn).to_vec();
    masked_square_sum(tape, attn, Tensor::new(&shape, outside)?)
}

/// Temporal penalty for a single attention vector over T frames.
pub fn temporal_attention_loss<F: Scalar>(
    tape: &mut Tape<F>,
    attn: Var,
    ed: usize,
    es: usize,
    mode: TemporalMode,
) -> Result<Var> {
    let t = tape.value(attn).numel();
    let targets = temporal_targets(ed, es, t, mode)?;
    let mut sel = vec![F::zero(); t];
    for i in targets {
        sel[i] = F::one();
    }
    let shape = tape.shape(attn).to_vec();
    target_loss(tape, attn, Tensor::new(&shape, sel)?)
}

fn target_loss<F: Scalar>(tape: &mut Tape<F>, attn: Var, selected: Tensor<F>) -> Result<Var> {
    let diff = tape.add_scalar(attn, -F::one());
    let sq = tape.square(diff);
    let m = tape.constant(selected);
    let masked = tape.mul(sq, m)?;
    Ok(tape.sum(masked))
}

/// The two attention penalties for a batch, each summed per sample and
/// averaged over the batch, before weighting.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLoss {
    pub spatial: Var,
    pub temporal: Var,
    /// `λ_spatial · spatial + λ_temporal · temporal`
    pub total: Var,
}

/// Builds the weighted attention loss for a batch. Videos without supervision
/// contribute zero. The spatial term covers every frame of a supervised
/// video, each against that video's ED ∪ ES mask.
pub fn total_attention_loss<F: Scalar>(
    tape: &mut Tape<F>,
    out: &ForwardOutput,
    samples: &[&VideoSample],
    dims: BatchDims,
    patch_size: usize,
    weights: &AttnLossWeights,
) -> Result<AttentionLoss> {
    let n_patches = tape.shape(out.spatial_attention)[1];
    let mut outside = vec![F::zero(); dims.b * dims.k * dims.t * n_patches];
    let mut targets = vec![F::zero(); dims.b * dims.k * dims.t];
    for (b, s) in samples.iter().enumerate() {
        let Some(sup) = &s.supervision else { continue };
        for (k, v) in sup.iter().enumerate() {
            let union = video_union(v, s.h, s.w, patch_size)?;
            for t in 0..dims.t {
                let row = (b * dims.k + k) * dims.t + t;
                for (i, &bit) in union.0.iter().enumerate() {
                    outside[row * n_patches + i] = F::lit(1.0 - bit as f64);
                }
            }
            for t in temporal_targets(v.ed_index, v.es_index, dims.t, weights.temporal_mode)? {
                targets[(b * dims.k + k) * dims.t + t] = F::one();
            }
        }
    }
    let inv_b = F::one() / F::from_usize(dims.b).unwrap();
    let spatial = masked_square_sum(
        tape,
        out.spatial_attention,
        Tensor::new(&[dims.b * dims.k * dims.t, n_patches], outside)?,
    )?;
    let spatial = tape.scale(spatial, inv_b);
    let temporal = target_loss(
        tape,
        out.temporal_attention,
        Tensor::new(&[dims.b * dims.k, dims.t], targets)?,
    )?;
    let temporal = tape.scale(temporal, inv_b);
    let ws = tape.scale(spatial, F::lit(weights.lambda_spatial));
    let wt = tape.scale(temporal, F::lit(weights.lambda_temporal));
    let total = tape.add(ws, wt)?;
    Ok(AttentionLoss {
        spatial,
        temporal,
        total,
    })
}

/// Task loss averaged over the batch: squared error for EF, cross-entropy
/// for AS.
pub fn task_loss<F: Scalar>(
    tape: &mut Tape<F>,
    out: &ForwardOutput,
    samples: &[&VideoSample],
    task: Task,
) -> Result<Var> {
    match task {
        Task::Ef => {
            let labels = samples
                .iter()
                .map(|s| {
                    s.ef_label
                        .map(|y| F::lit(y as f64))
                        .ok_or_else(|| GemtError::arg("task_loss", format!("{} has no EF label", s.sample_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let y = tape.constant(Tensor::new(&[samples.len()], labels)?);
            let diff = tape.sub(out.prediction, y)?;
            let sq = tape.square(diff);
            Ok(tape.mean(sq))
        }
        Task::As => {
            let labels = samples
                .iter()
                .map(|s| {
                    s.as_label
                        .ok_or_else(|| GemtError::arg("task_loss", format!("{} has no AS label", s.sample_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            tape.cross_entropy(out.logits, &labels)
        }
    }
}

/// Task loss plus attention loss.
pub fn overall_loss<F: Scalar>(tape: &mut Tape<F>, task_loss: Var, attn_loss: Var) -> Result<Var> {
    tape.add(task_loss, attn_loss)
}

// Plain-value metrics of the same quantities, used for reporting.

/// Share of attention on patches inside the mask.
pub fn in_mask_fraction(attn: &[f64], union: &CoarseMask) -> f64 {
    attn.iter()
        .zip(union.bits())
        .filter(|(_, &b)| b == 1)
        .map(|(a, _)| a)
        .sum()
}

/// Attention mass on the target frames.
pub fn target_mass(attn: &[f64], targets: &[usize]) -> f64 {
    targets.iter().map(|&t| attn[t]).sum()
}
