//! The three-level encoder: spatial (patches of a frame), temporal (frames of
//! a video) and video (views of a sample), plus the EF and AS heads.

mod config;
pub mod encoder;
mod sample;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::EncoderConfig;
pub use encoder::{encoder_forward, EncoderOutput, Level, Mode};
pub use sample::{VideoSample, VideoSupervision, AS_CLASSES, AS_CLASS_NAMES};

use crate::error::{GemtError, Result};
use crate::tensor::checkpoint::validate_against;
use crate::tensor::params::{trunc_normal, Bound};
use crate::tensor::{ParameterStore, Scalar, Tape, Tensor, Var};
use encoder::{init_level, linear_params, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ef,
    As,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ef => "ef",
            Task::As => "as",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = GemtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ef" => Ok(Task::Ef),
            "as" => Ok(Task::As),
            other => Err(GemtError::Config(format!("unknown task `{other}` (expected ef|as)"))),
        }
    }
}

/// Encoder configuration plus its parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct GemTransModel<F> {
    pub config: EncoderConfig,
    pub params: ParameterStore<F>,
}

impl<F: Scalar> GemTransModel<F> {
    /// Freshly initialized model: truncated normal (σ = 0.02) for projections,
    /// cls tokens and embeddings; zeros for biases; unit LayerNorm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let d = config.embed_dim;
        linear_params(&mut p, "ste.patch", config.patch_dim(), d, &mut rng)?;
        init_level(
            &mut p,
            &config,
            Level::Spatial,
            Some(config.patches_per_frame() + 1),
            &mut rng,
        )?;
        init_level(&mut p, &config, Level::Temporal, Some(config.t + 1), &mut rng)?;
        init_level(&mut p, &config, Level::Video, None, &mut rng)?;
        p.insert("vte.view", trunc_normal(&[config.k, d], INIT_STD, &mut rng))?;
        linear_params(&mut p, "ef_head.fc1", d, config.head_hidden, &mut rng)?;
        linear_params(&mut p, "ef_head.fc2", config.head_hidden, 1, &mut rng)?;
        linear_params(&mut p, "as_head.fc1", d, config.head_hidden, &mut rng)?;
        linear_params(&mut p, "as_head.fc2", config.head_hidden, AS_CLASSES, &mut rng)?;
        Ok(GemTransModel { config, params: p })
    }

    /// Wraps existing parameters after checking every path and shape against
    /// a fresh model of the same config.
    pub fn from_params(config: EncoderConfig, params: ParameterStore<F>) -> Result<Self> {
        let template = GemTransModel::<f32>::init(config.clone(), 0)?;
        validate_against(&params.cast(), &template.params)?;
        Ok(GemTransModel { config, params })
    }

    pub fn cast<G: Scalar>(&self) -> GemTransModel<G> {
        GemTransModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Backbone parameters only (everything except `proto.*`).
    pub fn backbone(&self) -> ParameterStore<F> {
        let mut s = self.params.clone();
        let proto: Vec<String> = s.paths().filter(|p| p.starts_with("proto.")).cloned().collect();
        for p in proto {
            s.remove(&p);
        }
        s
    }
}

/// Everything a forward pass over a batch of B samples produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, d]` sample embeddings.
    pub u: Var,
    /// EF: `[B]` sigmoid outputs. AS: `[B, 4]` probabilities.
    pub prediction: Var,
    /// EF: `[B]` pre-sigmoid values. AS: `[B, 4]` logits.
    pub logits: Var,
    /// `[B·K·T, HW/p²]`
    pub spatial_attention: Var,
    /// `[B·K, T]`
    pub temporal_attention: Var,
    /// `[B, K]`
    pub video_attention: Var,
    /// `[B·K·T, d]`
    pub frame_embeddings: Var,
    /// `[B·K, d]`
    pub video_embeddings: Var,
    /// `[B·K·T, HW/p², d]` spatial-level tokens for the prototype branch.
    pub patch_tokens: Var,
    /// `[B·K, T, d]` temporal-level tokens for the prototype branch.
    pub frame_tokens: Var,
}

/// Shared dimensions of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchDims {
    pub b: usize,
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

pub fn batch_dims(samples: &[&VideoSample]) -> Result<BatchDims> {
    let first = samples
        .first()
        .ok_or_else(|| GemtError::arg("forward", "empty batch"))?;
    for s in samples {
        if (s.k, s.t, s.h, s.w) != (first.k, first.t, first.h, first.w) {
            return Err(GemtError::shape(
                "forward",
                &[first.k, first.t, first.h, first.w],
                &[s.k, s.t, s.h, s.w],
            ));
        }
    }
    Ok(BatchDims {
        b: samples.len(),
        k: first.k,
        t: first.t,
        h: first.h,
        w: first.w,
    })
}

/// Subtracted from every pixel before tokenizing, so dark and bright
/// patches embed in opposite directions rather than differing only in scale.
pub const PIXEL_CENTER: f64 = 0.5;

/// Patches of every frame in the batch, `[B·K·T, HW/p², p²]`, centered.
pub fn batch_patches<F: Scalar>(samples: &[&VideoSample], p: usize) -> Result<Tensor<F>> {
    let dims = batch_dims(samples)?;
    let mut data = Vec::with_capacity(dims.b * dims.k * dims.t * dims.h * dims.w);
    for s in samples {
        for k in 0..s.k {
            for t in 0..s.t {
                let patches = tokenizer::patchify(s.frame(k, t), s.h, s.w, p)?;
                data.extend(patches.into_iter().map(|v| F::lit(v as f64 - PIXEL_CENTER)));
            }
        }
    }
    let n_frames = dims.b * dims.k * dims.t;
    Tensor::new(&[n_frames, dims.h * dims.w / (p * p), p * p], data)
}

/// Spatial level: tokenizes every frame and encodes frames independently
/// with shared weights. Input `[N, HW/p², p²]` patches.
pub fn ste_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &EncoderConfig,
    patches: Var,
    mode: &mut Mode,
) -> Result<EncoderOutput> {
    let tokens = tokenizer::tokenize(tape, patches, p.var("ste.patch.weight")?, p.var("ste.patch.bias")?)?;
    encoder_forward(tape, p, cfg, Level::Spatial, tokens, mode)
}

/// Temporal level over frame embeddings `[B·K, T, d]`.
pub fn tte_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &EncoderConfig,
    frames: Var,
    mode: &mut Mode,
) -> Result<EncoderOutput> {
    encoder_forward(tape, p, cfg, Level::Temporal, frames, mode)
}

/// Video level over video embeddings `[B, K, d]`; each video token gets the
/// learnable view-type embedding of its slot.
pub fn vte_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &EncoderConfig,
    videos: Var,
    mode: &mut Mode,
) -> Result<EncoderOutput> {
    let k = tape.shape(videos)[1];
    let view = p.var("vte.view")?;
    let capacity = tape.shape(view)[0];
    if k > capacity {
        return Err(GemtError::Capacity {
            level: Level::Video.name(),
            tokens: k,
            capacity,
        });
    }
    let view = tape.slice(view, 0, 0, k)?;
    let tokens = tape.add(videos, view)?;
    encoder_forward(tape, p, cfg, Level::Video, tokens, mode)
}

fn head_mlp<F: Scalar>(tape: &mut Tape<F>, p: &Bound, name: &str, u: Var) -> Result<Var> {
    let h = tape.linear(
        u,
        p.var(&format!("{name}.fc1.weight"))?,
        Some(p.var(&format!("{name}.fc1.bias"))?),
    )?;
    let h = tape.gelu(h);
    tape.linear(
        h,
        p.var(&format!("{name}.fc2.weight"))?,
        Some(p.var(&format!("{name}.fc2.bias"))?),
    )
}

/// EF head: `σ(MLP(u))`, returns (pre-sigmoid `[B]`, prediction `[B]`).
pub fn ef_head<F: Scalar>(tape: &mut Tape<F>, p: &Bound, u: Var) -> Result<(Var, Var)> {
    let b = tape.shape(u)[0];
    let z = head_mlp(tape, p, "ef_head", u)?;
    let z = tape.reshape(z, &[b])?;
    let y = tape.sigmoid(z);
    Ok((z, y))
}

/// AS head: `softmax(MLP(u))`, returns (logits `[B,4]`, probabilities `[B,4]`).
pub fn as_head<F: Scalar>(tape: &mut Tape<F>, p: &Bound, u: Var) -> Result<(Var, Var)> {
    let z = head_mlp(tape, p, "as_head", u)?;
    let y = tape.softmax(z, 1)?;
    Ok((z, y))
}

/// Patch → frame → video → head for a batch of samples sharing dimensions.
pub fn full_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &EncoderConfig,
    samples: &[&VideoSample],
    task: Task,
    mode: &mut Mode,
) -> Result<ForwardOutput> {
    let dims = batch_dims(samples)?;
    let d = cfg.embed_dim;
    let patches = tape.constant(batch_patches(samples, cfg.patch_size)?);
    let ste = ste_forward(tape, p, cfg, patches, mode)?;
    let frames = tape.reshape(ste.summary, &[dims.b * dims.k, dims.t, d])?;
    let tte = tte_forward(tape, p, cfg, frames, mode)?;
    let videos = tape.reshape(tte.summary, &[dims.b, dims.k, d])?;
    let vte = vte_forward(tape, p, cfg, videos, mode)?;
    let (logits, prediction) = match task {
        Task::Ef => ef_head(tape, p, vte.summary)?,
        Task::As => as_head(tape, p, vte.summary)?,
    };
    Ok(ForwardOutput {
        u: vte.summary,
        prediction,
        logits,
        spatial_attention: ste.cls_attention,
        temporal_attention: tte.cls_attention,
        video_attention: vte.cls_attention,
        frame_embeddings: ste.summary,
        video_embeddings: tte.summary,
        patch_tokens: ste.tokens,
        frame_tokens: tte.tokens,
    })
}

/// Attention captured from one sample, converted to plain vectors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    /// `[k][t]` → HW/p² weights.
    pub spatial: Vec<Vec<Vec<f64>>>,
    /// `[k]` → T weights.
    pub temporal: Vec<Vec<f64>>,
    /// K weights.
    pub video: Vec<f64>,
}

impl AttentionRecord {
    /// Splits batch attention tensors into per-sample records.
    pub fn from_output<F: Scalar>(tape: &Tape<F>, out: &ForwardOutput, dims: BatchDims) -> Vec<AttentionRecord> {
        let sp = tape.value(out.spatial_attention);
        let tp = tape.value(out.temporal_attention);
        let vd = tape.value(out.video_attention);
        let (np, nt) = (sp.shape()[1], tp.shape()[1]);
        (0..dims.b)
            .map(|b| AttentionRecord {
                spatial: (0..dims.k)
                    .map(|k| {
                        (0..dims.t)
                            .map(|t| {
                                let row = (b * dims.k + k) * dims.t + t;
                                sp.data()[row * np..(row + 1) * np]
                                    .iter()
                                    .map(|v| v.to_f64().unwrap())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
                temporal: (0..dims.k)
                    .map(|k| {
                        let row = b * dims.k + k;
                        tp.data()[row * nt..(row + 1) * nt]
                            .iter()
                            .map(|v| v.to_f64().unwrap())
                            .collect()
                    })
                    .collect(),
                video: vd.data()[b * dims.k..(b + 1) * dims.k]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect(),
            })
            .collect()
    }
}

/// Result of running the model without gradients.
#[derive(Clone, Debug)]
pub struct Inference {
    /// EF: one value per sample. AS: four probabilities per sample.
    pub predictions: Vec<Vec<f64>>,
    pub attention: Vec<AttentionRecord>,
}

/// Evaluation-mode forward pass, in chunks of `batch` samples.
pub fn infer<F: Scalar>(
    model: &GemTransModel<F>,
    samples: &[&VideoSample],
    task: Task,
    batch: usize,
) -> Result<Inference> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut attention = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let out = full_forward(&mut tape, &bound, &model.config, chunk, task, &mut Mode::Eval)?;
        tape.check_finite()?;
        let dims = batch_dims(chunk)?;
        let pred = tape.value(out.prediction);
        let per = pred.numel() / chunk.len();
        for row in pred.data().chunks(per) {
            predictions.push(row.iter().map(|v| v.to_f64().unwrap()).collect());
        }
        attention.extend(AttentionRecord::from_output(&tape, &out, dims));
    }
    Ok(Inference { predictions, attention })
}
