//! Shared pre-norm transformer encoder used at the patch, frame and video level.
//!
//! `h⁰ = [cls; x] + E_pos`, then L blocks of
//! `h' = MHA(LN(h)) + h`, `h = MLP(LN(h')) + h'`, and the summary is
//! `LN(h^L)` at the cls position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::{GemtError, Result};
use crate::tensor::params::{trunc_normal, Bound};
use crate::tensor::{ParameterStore, Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Spatial,
    Temporal,
    Video,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Spatial, Level::Temporal, Level::Video];

    /// Parameter namespace of the level.
    pub fn prefix(self) -> &'static str {
        match self {
            Level::Spatial => "ste",
            Level::Temporal => "tte",
            Level::Video => "vte",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Spatial => "spatial",
            Level::Temporal => "temporal",
            Level::Video => "video",
        }
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
#[allow(clippy::large_enum_variant)]
pub enum Mode {
    Eval,
    Train { rng: ChaCha8Rng, p: f64 },
}

impl Mode {
    pub(crate) fn dropout<F: Scalar>(&mut self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train { rng, p } => tape.dropout(x, *p, rng),
        }
    }
}

/// Output of one encoder level for a batch of N sequences of n tokens.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[N, d]` final-LayerNorm cls embeddings.
    pub summary: Var,
    /// `[N, n]` head-averaged last-layer cls attention over the input tokens,
    /// renormalized after dropping the cls→cls entry.
    pub cls_attention: Var,
    /// `[N, n, d]` final-LayerNorm embeddings at the input-token positions.
    pub tokens: Var,
}

pub(crate) fn linear_params<F: Scalar, R: Rng>(
    store: &mut ParameterStore<F>,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{path}.weight"),
        trunc_normal(&[fan_in, fan_out], INIT_STD, rng),
    )?;
    store.insert(format!("{path}.bias"), Tensor::zeros(&[fan_out]))
}

fn layernorm_params<F: Scalar>(store: &mut ParameterStore<F>, path: &str, d: usize) -> Result<()> {
    store.insert(format!("{path}.gain"), Tensor::ones(&[d]))?;
    store.insert(format!("{path}.bias"), Tensor::zeros(&[d]))
}

/// Adds the parameters of one encoder level. `positions` is the number of
/// positional slots (tokens + cls); `None` omits positional embeddings.
pub fn init_level<F: Scalar, R: Rng>(
    store: &mut ParameterStore<F>,
    cfg: &EncoderConfig,
    level: Level,
    positions: Option<usize>,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.embed_dim;
    let pre = level.prefix();
    store.insert(format!("{pre}.cls"), trunc_normal(&[d], INIT_STD, rng))?;
    if let Some(cap) = positions {
        store.insert(format!("{pre}.pos"), trunc_normal(&[cap, d], INIT_STD, rng))?;
    }
    for l in 0..cfg.layers {
        let b = format!("{pre}.blocks.{l}");
        layernorm_params(store, &format!("{b}.ln1"), d)?;
        for proj in ["q", "k", "v", "out"] {
            linear_params(store, &format!("{b}.attn.{proj}"), d, d, rng)?;
        }
        layernorm_params(store, &format!("{b}.ln2"), d)?;
        linear_params(store, &format!("{b}.mlp.fc1"), d, cfg.mlp_hidden, rng)?;
        linear_params(store, &format!("{b}.mlp.fc2"), cfg.mlp_hidden, d, rng)?;
    }
    layernorm_params(store, &format!("{pre}.ln_final"), d)
}

struct Attention {
    out: Var,
    /// Scaled pre-softmax scores, `[N·heads, n, n]`.
    scores: Var,
}

fn layernorm<F: Scalar>(tape: &mut Tape<F>, p: &Bound, path: &str, x: Var, eps: f64) -> Result<Var> {
    let g = p.var(&format!("{path}.gain"))?;
    let b = p.var(&format!("{path}.bias"))?;
    tape.layernorm(x, g, b, F::lit(eps))
}

fn linear<F: Scalar>(tape: &mut Tape<F>, p: &Bound, path: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{path}.weight"))?;
    let b = p.var(&format!("{path}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// `[N, n, d]` → `[N·heads, n, d/heads]`
fn split_heads<F: Scalar>(tape: &mut Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n_seq, n, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[n_seq, n, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n_seq * heads, n, d / heads])
}

fn merge_heads<F: Scalar>(tape: &mut Tape<F>, x: Var, n_seq: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let x = tape.reshape(x, &[n_seq, heads, n, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n_seq, n, heads * dh])
}

fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    path: &str,
    x: Var,
    heads: usize,
    mode: &mut Mode,
) -> Result<Attention> {
    let n_seq = tape.shape(x)[0];
    let d = tape.shape(x)[2];
    let q = linear(tape, p, &format!("{path}.q"), x)?;
    let k = linear(tape, p, &format!("{path}.k"), x)?;
    let v = linear(tape, p, &format!("{path}.v"), x)?;
    let (q, k, v) = (
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    );
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, F::lit(1.0 / ((d / heads) as f64).sqrt()));
    let probs = tape.softmax(scores, 2)?;
    let dropped = mode.dropout(tape, probs);
    let ctx = tape.bmm(dropped, v, false)?;
    let ctx = merge_heads(tape, ctx, n_seq, heads)?;
    let out = linear(tape, p, &format!("{path}.out"), ctx)?;
    Ok(Attention { out, scores })
}

fn logsumexp<F: Scalar>(tape: &mut Tape<F>, x: Var, axis: usize) -> Result<Var> {
    let m = tape.max_axis(x, axis, true)?;
    let z = tape.sub(x, m)?;
    let e = tape.exp(z);
    let s = tape.sum_axis(e, axis, true)?;
    let l = tape.ln(s);
    tape.add(l, m)
}

/// Head-averaged cls attention over the `n` tokens with the cls→cls entry
/// dropped and the row renormalized. Computed from the scores as a mixture of
/// per-head token softmaxes weighted by each head's token mass, which stays
/// finite when cls attends almost only to itself.
fn cls_token_attention<F: Scalar>(
    tape: &mut Tape<F>,
    scores: Var,
    n_seq: usize,
    heads: usize,
    n: usize,
) -> Result<Var> {
    let scores = tape.reshape(scores, &[n_seq, heads, n + 1, n + 1])?;
    let row = tape.select(scores, 2, 0)?;
    let tok = tape.slice(row, 2, 1, n)?;
    let per_head = tape.softmax(tok, 2)?;
    // log of each head's mass on tokens, then normalized across heads
    let log_mass = logsumexp(tape, tok, 2)?;
    let log_all = logsumexp(tape, row, 2)?;
    let log_mass = tape.sub(log_mass, log_all)?;
    let top = tape.max_axis(log_mass, 1, true)?;
    let shifted = tape.sub(log_mass, top)?;
    let w = tape.exp(shifted);
    let mixed = tape.mul(per_head, w)?;
    let num = tape.sum_axis(mixed, 1, false)?;
    let den = tape.sum_axis(w, 1, false)?;
    tape.div(num, den)
}

/// Runs one encoder level over `tokens: [N, n, d]`.
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &EncoderConfig,
    level: Level,
    tokens: Var,
    mode: &mut Mode,
) -> Result<EncoderOutput> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.embed_dim || shape[1] == 0 {
        return Err(GemtError::shape("encoder_forward", &shape, &[0, 0, cfg.embed_dim]));
    }
    let (n_seq, n, d) = (shape[0], shape[1], shape[2]);
    let pre = level.prefix();

    let cls = p.var(&format!("{pre}.cls"))?;
    let cls = tape.reshape(cls, &[1, 1, d])?;
    let cls = tape.broadcast_to(cls, &[n_seq, 1, d])?;
    let mut h = tape.concat(&[cls, tokens], 1)?;
    if let Ok(pos) = p.var(&format!("{pre}.pos")) {
        let capacity = tape.shape(pos)[0];
        if n + 1 > capacity {
            return Err(GemtError::Capacity {
                level: level.name(),
                tokens: n + 1,
                capacity,
            });
        }
        let pos = tape.slice(pos, 0, 0, n + 1)?;
        h = tape.add(h, pos)?;
    }

    let mut last_scores = None;
    for l in 0..cfg.layers {
        let b = format!("{pre}.blocks.{l}");
        let x = layernorm(tape, p, &format!("{b}.ln1"), h, cfg.ln_eps)?;
        let att = attention(tape, p, &format!("{b}.attn"), x, cfg.heads, mode)?;
        h = tape.add(h, att.out)?;
        let x = layernorm(tape, p, &format!("{b}.ln2"), h, cfg.ln_eps)?;
        let x = linear(tape, p, &format!("{b}.mlp.fc1"), x)?;
        let x = tape.gelu(x);
        let x = mode.dropout(tape, x);
        let x = linear(tape, p, &format!("{b}.mlp.fc2"), x)?;
        h = tape.add(h, x)?;
        last_scores = Some(att.scores);
    }
    let hn = layernorm(tape, p, &format!("{pre}.ln_final"), h, cfg.ln_eps)?;
    let summary = tape.select(hn, 1, 0)?;
    let out_tokens = tape.slice(hn, 1, 1, n)?;

    let scores = last_scores.expect("layers >= 1");
    let cls_attention = cls_token_attention(tape, scores, n_seq, cfg.heads, n)?;

    Ok(EncoderOutput {
        summary,
        cls_attention,
        tokens: out_tokens,
    })
}
