//! Prototype branches trained after the backbone, on its frozen tokens.
//!
//! Each branch keeps C×B prototype vectors. A sample is scored by the cosine
//! similarity of every prototype to its attention-filtered tokens, max-pooled
//! over tokens, then mapped to class logits by a linear readout. After
//! training, every prototype is linked to its most similar training token so
//! explanations can point at a concrete patch or frame.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemtError, Result};
use crate::model::{batch_dims, full_forward, GemTransModel, Level, Mode, Task, VideoSample, AS_CLASSES};
use crate::tensor::{AdamConfig, OptimizerState, ParameterStore, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-12;

/// Tokens kept by attention filtering, in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredTokens {
    /// `[m, d]`
    pub tokens: Tensor<f32>,
    pub indices: Vec<usize>,
    pub attention: Vec<f64>,
}

/// Keeps the `m` tokens with the highest attention. Ties go to the lower index.
pub fn filter_tokens(tokens: &Tensor<f32>, attention: &[f64], m: usize) -> Result<FilteredTokens> {
    if tokens.rank() != 2 || tokens.shape()[0] != attention.len() {
        return Err(GemtError::shape("filter_tokens", tokens.shape(), &[attention.len(), 0]));
    }
    let n = attention.len();
    if m == 0 || m > n {
        return Err(GemtError::arg("filter_tokens", format!("m = {m} outside [1, {n}]")));
    }
    let d = tokens.shape()[1];
    let indices = top_m(attention, m);
    let mut data = Vec::with_capacity(m * d);
    for &i in &indices {
        data.extend_from_slice(tokens.row(i));
    }
    Ok(FilteredTokens {
        tokens: Tensor::new(&[m, d], data)?,
        attention: indices.iter().map(|&i| attention[i]).collect(),
        indices,
    })
}

fn top_m(attention: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Number of tokens kept for a fraction of `n`, at least one.
pub fn keep_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let den = (aa * bb).sqrt();
    if den < NORM_EPS {
        0.0
    } else {
        (ab / den).clamp(-1.0, 1.0)
    }
}

/// Where a token came from. `s` is the patch index for spatial tokens and
/// `None` for temporal (frame) tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub k: usize,
    pub t: usize,
    pub s: Option<usize>,
}

/// One projected prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEntry {
    pub prototype: usize,
    pub class: usize,
    pub sample_id: String,
    pub k: usize,
    pub t: usize,
    pub s: Option<usize>,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub level: Level,
    pub classes: usize,
    pub per_class: usize,
    /// `[C·B, d]`, row `c·B + b` belongs to class c.
    pub prototypes: Tensor<f32>,
    /// `[C·B, C]`
    pub readout_weight: Tensor<f32>,
    /// `[C]`
    pub readout_bias: Tensor<f32>,
    /// EF quartile edges; empty for AS.
    pub bins: Vec<f32>,
    pub projection: Vec<ProjectionEntry>,
}

impl PrototypeBank {
    pub fn count(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn prototype(&self, j: usize) -> &[f32] {
        self.prototypes.row(j)
    }

    pub fn class_of(&self, j: usize) -> usize {
        j / self.per_class
    }

    fn prefix(level: Level) -> String {
        format!("proto.{}", level.name())
    }

    /// Parameters under `proto.{spatial|temporal}.*`.
    pub fn to_params(&self) -> Result<ParameterStore<f32>> {
        let pre = Self::prefix(self.level);
        let mut s = ParameterStore::new();
        s.insert(format!("{pre}.prototypes"), self.prototypes.clone())?;
        s.insert(format!("{pre}.readout.weight"), self.readout_weight.clone())?;
        s.insert(format!("{pre}.readout.bias"), self.readout_bias.clone())?;
        if !self.bins.is_empty() {
            s.insert(
                format!("{pre}.bins"),
                Tensor::new(&[self.bins.len()], self.bins.clone())?,
            )?;
        }
        Ok(s)
    }

    /// Reads a bank back from a parameter store; `None` if the level has no
    /// prototypes. The projection table lives in its own JSON file.
    pub fn from_params(store: &ParameterStore<f32>, level: Level) -> Result<Option<Self>> {
        let pre = Self::prefix(level);
        let path = format!("{pre}.prototypes");
        if !store.contains(&path) {
            return Ok(None);
        }
        let prototypes = store.get(&path)?.clone();
        let w = store.get(&format!("{pre}.readout.weight"))?.clone();
        let b = store.get(&format!("{pre}.readout.bias"))?.clone();
        let classes = b.numel();
        let count = prototypes.shape().first().copied().unwrap_or(0);
        if prototypes.rank() != 2 || classes == 0 || count % classes != 0 || w.shape() != [count, classes] {
            return Err(GemtError::Checkpoint(format!(
                "inconsistent prototype bank under {pre}"
            )));
        }
        let bins = match store.get(&format!("{pre}.bins")) {
            Ok(t) => t.data().to_vec(),
            Err(_) => vec![],
        };
        Ok(Some(PrototypeBank {
            level,
            classes,
            per_class: count / classes,
            prototypes,
            readout_weight: w,
            readout_bias: b,
            bins,
            projection: vec![],
        }))
    }

    /// Projection table keyed by prototype id.
    pub fn projection_json(&self) -> Result<String> {
        let map: BTreeMap<String, &ProjectionEntry> = self
            .projection
            .iter()
            .map(|e| (format!("{:03}", e.prototype), e))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }
}

/// Max-pooled cosine similarity of every prototype to the tokens `[m, d]`.
pub fn prototype_similarity(tokens: &Tensor<f32>, bank: &PrototypeBank) -> Result<Vec<f64>> {
    if tokens.rank() != 2 || tokens.shape()[1] != bank.dim() || tokens.shape()[0] == 0 {
        return Err(GemtError::shape(
            "prototype_similarity",
            tokens.shape(),
            &[0, bank.dim()],
        ));
    }
    Ok((0..bank.count())
        .map(|j| {
            (0..tokens.shape()[0])
                .map(|i| cosine(tokens.row(i), bank.prototype(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

pub fn proto_logits(sims: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if sims.len() != bank.count() {
        return Err(GemtError::shape("proto_logits", &[sims.len()], &[bank.count()]));
    }
    let c = bank.classes;
    let w = bank.readout_weight.data();
    Ok((0..c)
        .map(|k| {
            bank.readout_bias.data()[k] as f64
                + sims
                    .iter()
                    .enumerate()
                    .map(|(j, s)| s * w[j * c + k] as f64)
                    .sum::<f64>()
        })
        .collect())
}

/// Differentiable branch: tokens `[N, m, d]` (constant), prototypes `[P, d]`,
/// readout `[P, C]` + `[C]`. Returns similarities `[N, P]` and logits `[N, C]`.
pub fn branch_forward<F: Scalar>(
    tape: &mut Tape<F>,
    tokens: Var,
    prototypes: Var,
    weight: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(GemtError::shape("branch_forward", &s, &[0, 0, 0]));
    }
    let (n, m, d) = (s[0], s[1], s[2]);
    let p = tape.shape(prototypes)[0];
    let tn = unit_rows(tape, tokens)?;
    let pn = unit_rows(tape, prototypes)?;
    let flat = tape.reshape(tn, &[n * m, d])?;
    let pt = tape.transpose(pn)?;
    let cos = tape.matmul(flat, pt)?;
    let cos = tape.reshape(cos, &[n, m, p])?;
    let sims = tape.max_axis(cos, 1, false)?;
    let logits = tape.linear(sims, weight, Some(bias))?;
    Ok((sims, logits))
}

fn unit_rows<F: Scalar>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    let sq = tape.square(x);
    let ss = tape.sum_axis(sq, axis, true)?;
    let ss = tape.add_scalar(ss, F::lit(NORM_EPS));
    let norm = tape.sqrt(ss);
    tape.div(x, norm)
}

/// Branch hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtoConfig {
    /// B, prototypes per class.
    pub per_class: usize,
    /// M as a fraction of the patches in a frame.
    pub spatial_fraction: f64,
    /// M' as a fraction of the frames in a video.
    pub temporal_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            per_class: 4,
            spatial_fraction: 0.25,
            temporal_fraction: 0.5,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_frac = |f: f64| f > 0.0 && f <= 1.0;
        if self.per_class == 0 || self.batch_size == 0 {
            return Err(GemtError::Config(
                "proto.per_class and proto.batch_size must be >= 1".into(),
            ));
        }
        if !ok_frac(self.spatial_fraction) || !ok_frac(self.temporal_fraction) {
            return Err(GemtError::Config("proto fractions must lie in (0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(GemtError::Config("proto.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Filtered tokens of one sample, pooled over its videos and frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTokens {
    pub sample_id: String,
    /// `[m_total, d]`
    pub tokens: Tensor<f32>,
    pub refs: Vec<TokenRef>,
}

/// Runs the frozen backbone and keeps the attention-filtered tokens of each
/// sample at `level`.
pub fn collect_tokens(
    model: &GemTransModel<f32>,
    samples: &[&VideoSample],
    task: Task,
    level: Level,
    cfg: &ProtoConfig,
    batch: usize,
) -> Result<Vec<SampleTokens>> {
    if level == Level::Video {
        return Err(GemtError::arg(
            "collect_tokens",
            "prototypes exist at the spatial and temporal levels",
        ));
    }
    let d = model.config.embed_dim;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let dims = batch_dims(chunk)?;
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let fw = full_forward(&mut tape, &bound, &model.config, chunk, task, &mut Mode::Eval)?;
        tape.check_finite()?;
        let (tokens, attn) = match level {
            Level::Spatial => (fw.patch_tokens, fw.spatial_attention),
            _ => (fw.frame_tokens, fw.temporal_attention),
        };
        let tok = tape.value(tokens);
        let att = tape.value(attn);
        let n = att.shape()[1];
        let m = match level {
            Level::Spatial => keep_count(n, cfg.spatial_fraction),
            _ => keep_count(n, cfg.temporal_fraction),
        };
        // rows per sample: K·T frames (spatial) or K videos (temporal)
        let rows = att.shape()[0] / dims.b;
        for (b, s) in chunk.iter().enumerate() {
            let mut data = Vec::with_capacity(rows * m * d);
            let mut refs = Vec::with_capacity(rows * m);
            for r in 0..rows {
                let row = b * rows + r;
                let seq = Tensor::new(&[n, d], tok.data()[row * n * d..(row + 1) * n * d].to_vec())?;
                let a: Vec<f64> = att.row(row).iter().map(|&v| v as f64).collect();
                let f = filter_tokens(&seq, &a, m)?;
                data.extend_from_slice(f.tokens.data());
                for &i in &f.indices {
                    refs.push(match level {
                        Level::Spatial => TokenRef {
                            k: r / dims.t,
                            t: r % dims.t,
                            s: Some(i),
                        },
                        _ => TokenRef { k: r, t: i, s: None },
                    });
                }
            }
            out.push(SampleTokens {
                sample_id: s.sample_id.clone(),
                tokens: Tensor::new(&[refs.len(), d], data)?,
                refs,
            });
        }
    }
    Ok(out)
}

/// Quartile edges of the EF labels.
pub fn quartile_edges(labels: &[f32]) -> Vec<f32> {
    let mut v = labels.to_vec();
    v.sort_by(f32::total_cmp);
    if v.is_empty() {
        return vec![0.25, 0.5, 0.75];
    }
    [0.25, 0.5, 0.75]
        .iter()
        .map(|q| v[((v.len() - 1) as f64 * q).round() as usize])
        .collect()
}

pub fn bin_of(y: f32, edges: &[f32]) -> usize {
    edges.iter().filter(|&&e| y >= e).count()
}

/// Class labels the branch is trained on: AS classes, or EF quartile bins.
pub fn branch_labels(samples: &[&VideoSample], task: Task, edges: &[f32]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match task {
            Task::As => s
                .as_label
                .ok_or_else(|| GemtError::arg("branch_labels", "missing AS label")),
            Task::Ef => s
                .ef_label
                .map(|y| bin_of(y, edges))
                .ok_or_else(|| GemtError::arg("branch_labels", "missing EF label")),
        })
        .collect()
}

/// Prototypes start as random training tokens of their class; the readout
/// starts at +1 for a prototype's own class and −0.5 elsewhere.
pub fn init_bank(
    level: Level,
    caches: &[SampleTokens],
    labels: &[usize],
    classes: usize,
    per_class: usize,
    rng: &mut impl Rng,
) -> Result<PrototypeBank> {
    let d = caches
        .first()
        .map(|c| c.tokens.shape()[1])
        .ok_or_else(|| GemtError::arg("init_bank", "no samples"))?;
    let mut protos = Vec::with_capacity(classes * per_class * d);
    for c in 0..classes {
        let members: Vec<usize> = (0..caches.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(GemtError::arg(
                "init_bank",
                format!("class {c} has no training samples"),
            ));
        }
        for _ in 0..per_class {
            let s = &caches[*members.choose(rng).expect("non-empty")];
            let i = rng.gen_range(0..s.tokens.shape()[0]);
            protos.extend_from_slice(s.tokens.row(i));
        }
    }
    let p = classes * per_class;
    let w = (0..p * classes)
        .map(|i| {
            if (i / classes) / per_class == i % classes {
                1.0
            } else {
                -0.5
            }
        })
        .collect();
    Ok(PrototypeBank {
        level,
        classes,
        per_class,
        prototypes: Tensor::new(&[p, d], protos)?,
        readout_weight: Tensor::new(&[p, classes], w)?,
        readout_bias: Tensor::zeros(&[classes]),
        bins: vec![],
        projection: vec![],
    })
}

fn stack_tokens(caches: &[SampleTokens], idx: &[usize]) -> Result<Tensor<f32>> {
    let shape = caches[idx[0]].tokens.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * shape[0] * shape[1]);
    for &i in idx {
        if caches[i].tokens.shape() != shape.as_slice() {
            return Err(GemtError::shape("stack_tokens", caches[i].tokens.shape(), &shape));
        }
        data.extend_from_slice(caches[i].tokens.data());
    }
    Tensor::new(&[idx.len(), shape[0], shape[1]], data)
}

const P_PROTO: &str = "prototypes";
const P_W: &str = "readout.weight";
const P_B: &str = "readout.bias";

/// Trains prototypes and readout with cross-entropy. Returns the mean loss
/// of each epoch.
pub fn train_bank(
    bank: &mut PrototypeBank,
    caches: &[SampleTokens],
    labels: &[usize],
    cfg: &ProtoConfig,
) -> Result<Vec<f64>> {
    if caches.len() != labels.len() || caches.is_empty() {
        return Err(GemtError::arg("train_bank", "need one label per sample"));
    }
    let mut params = ParameterStore::new();
    params.insert(P_PROTO, bank.prototypes.clone())?;
    params.insert(P_W, bank.readout_weight.clone())?;
    params.insert(P_B, bank.readout_bias.clone())?;
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..caches.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let tokens = tape.constant(stack_tokens(caches, idx)?);
            let (_, logits) = branch_forward(&mut tape, tokens, bound.var(P_PROTO)?, bound.var(P_W)?, bound.var(P_B)?)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(logits, &y)?;
            let grads = tape.backward(loss)?;
            total += tape.value(loss).item() as f64 * idx.len() as f64;
            opt.step(&mut params, &bound.gradients(&grads))?;
        }
        history.push(total / caches.len() as f64);
    }
    bank.prototypes = params.get(P_PROTO)?.clone();
    bank.readout_weight = params.get(P_W)?.clone();
    bank.readout_bias = params.get(P_B)?.clone();
    Ok(history)
}

/// Branch class predictions for cached samples.
pub fn predict_classes(bank: &PrototypeBank, caches: &[SampleTokens]) -> Result<Vec<usize>> {
    caches
        .iter()
        .map(|c| {
            let logits = proto_logits(&prototype_similarity(&c.tokens, bank)?, bank)?;
            Ok(argmax(&logits))
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Links every prototype to its most similar surviving training token.
/// Ties go to the earlier sample, then the earlier token.
pub fn project_prototypes(bank: &mut PrototypeBank, caches: &[SampleTokens]) -> Result<()> {
    let mut table = Vec::with_capacity(bank.count());
    for j in 0..bank.count() {
        let mut best: Option<(f64, usize, usize)> = None;
        for (si, c) in caches.iter().enumerate() {
            for ti in 0..c.tokens.shape()[0] {
                let sim = cosine(c.tokens.row(ti), bank.prototype(j));
                if best.is_none_or(|(b, _, _)| sim > b) {
                    best = Some((sim, si, ti));
                }
            }
        }
        let (similarity, si, ti) = best.ok_or_else(|| GemtError::arg("project_prototypes", "no candidate tokens"))?;
        let r = &caches[si].refs[ti];
        table.push(ProjectionEntry {
            prototype: j,
            class: bank.class_of(j),
            sample_id: caches[si].sample_id.clone(),
            k: r.k,
            t: r.t,
            s: r.s,
            similarity,
        });
    }
    bank.projection = table;
    Ok(())
}

/// Result of fitting one branch.
#[derive(Clone, Debug)]
pub struct BranchFit {
    pub bank: PrototypeBank,
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
}

/// Fits a prototype branch on a frozen backbone. Fails with a contract error
/// if the backbone parameters change while the branch trains.
pub fn train_prototype_branch(
    model: &GemTransModel<f32>,
    train: &[&VideoSample],
    task: Task,
    level: Level,
    cfg: &ProtoConfig,
) -> Result<BranchFit> {
    cfg.validate()?;
    let before = model.backbone().checksum();
    let caches = collect_tokens(model, train, task, level, cfg, 32)?;
    let bins = match task {
        Task::Ef => quartile_edges(&train.iter().filter_map(|s| s.ef_label).collect::<Vec<_>>()),
        Task::As => vec![],
    };
    let labels = branch_labels(train, task, &bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4f54);
    let mut bank = init_bank(level, &caches, &labels, AS_CLASSES, cfg.per_class, &mut rng)?;
    bank.bins = bins;
    let loss_history = train_bank(&mut bank, &caches, &labels, cfg)?;
    project_prototypes(&mut bank, &caches)?;
    if model.backbone().checksum() != before {
        return Err(GemtError::Contract(
            "backbone parameters changed while training prototypes".into(),
        ));
    }
    let pred = predict_classes(&bank, &caches)?;
    let correct = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(BranchFit {
        bank,
        loss_history,
        train_accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Branch accuracy on held-out samples.
pub fn branch_accuracy(
    model: &GemTransModel<f32>,
    bank: &PrototypeBank,
    samples: &[&VideoSample],
    task: Task,
    cfg: &ProtoConfig,
) -> Result<f64> {
    let caches = collect_tokens(model, samples, task, bank.level, cfg, 32)?;
    let labels = branch_labels(samples, task, &bank.bins)?;
    let pred = predict_classes(bank, &caches)?;
    Ok(pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
}
