//! Two-layer attention decoder.
//!
//! Per word: an Attention LSTM reads `[h2_prev ∥ v̄ ∥ embed(prev)]`; its
//! state scores every frame with `w_aᵀ tanh(W_h h1 + W_c k_t)`; the softmax
//! of those scores weights both the projected frames (v̂) and, under
//! co-attention, the interaction states (ĥ); a Language LSTM reads
//! `[h1 ∥ v̂ ∥ ĥ]` and a linear layer produces word logits.
//!
//! Frame keys `k_t` are the projected image features `g_φ(v_t)`. With the
//! image pathway off, the interaction states serve as keys instead, so the
//! decoder never touches image features except through the interaction
//! module.

use rand::Rng;

use crate::data::{SegmentFeatures, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::interaction::{interaction_sequence, InteractionSequence};
use crate::layers::{lstm_step, mlp_forward, Activation, LstmParams, MlpParams};
use crate::model::{Model, ModelConfig};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CaptionerParams {
    pub g_phi: MlpParams,
    pub att_lstm: LstmParams,
    /// d_φ × H₁
    pub w_h: ParamId,
    /// d_φ × key width
    pub w_c: ParamId,
    /// d_φ
    pub w_a: ParamId,
    /// E × Σ, one column per word.
    pub w_e: ParamId,
    pub lang_lstm: LstmParams,
    /// Σ × H₂
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl CaptionerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![cfg.d_img];
        widths.extend(&cfg.phi_hidden);
        widths.push(cfg.d_phi);
        let acts = vec![Activation::Tanh; widths.len() - 1];
        let g_phi = MlpParams::init(store, "captioner.g_phi", &widths, &acts, rng)?;
        let att_lstm = LstmParams::init(
            store,
            "captioner.att_lstm",
            cfg.att_input_width(),
            cfg.att_hidden,
            rng,
        )?;
        let w_h = store.insert("captioner.att.w_h", glorot(cfg.d_phi, cfg.att_hidden, rng))?;
        let w_c = store.insert("captioner.att.w_c", glorot(cfg.d_phi, cfg.key_width(), rng))?;
        let w_a = store.insert(
            "captioner.att.w_a",
            glorot(1, cfg.d_phi, rng).reshaped(&[cfg.d_phi])?,
        )?;
        let w_e = store.insert("captioner.w_e", glorot(cfg.embed, cfg.vocab_size, rng))?;
        let lang_lstm = LstmParams::init(
            store,
            "captioner.lang_lstm",
            cfg.lang_input_width(),
            cfg.lang_hidden,
            rng,
        )?;
        let w_out = store.insert(
            "captioner.out.w",
            glorot(cfg.vocab_size, cfg.lang_hidden, rng),
        )?;
        let b_out = store.insert("captioner.out.b", Tensor::zeros(&[cfg.vocab_size]))?;
        Ok(Self {
            g_phi,
            att_lstm,
            w_h,
            w_c,
            w_a,
            w_e,
            lang_lstm,
            w_out,
            b_out,
        })
    }
}

/// Per-segment quantities shared by every decode step.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext {
    pub frames: usize,
    /// Projected frames `g_φ(v_c)`, T × d_φ (image pathway only).
    pub projected: Option<Var>,
    /// Keys scored by the temporal attention, T × key width.
    pub keys: Var,
    /// Mean of the keys over time (v̄).
    pub mean_key: Var,
    /// `keys · W_cᵀ`, hoisted out of the per-word loop.
    pub keys_proj: Var,
    /// Interaction states stacked T × H (object pathway only).
    pub interactions: Option<Var>,
    pub mean_interaction: Option<Var>,
}

/// Projects frames through g_φ and pools them over time.
pub fn precompute_frames(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    image: Var,
    interactions: &[Var],
) -> Result<FrameContext> {
    let cfg = &model.config;
    let p = &model.captioner;
    let frames = match tape.shape(image) {
        [t, d] if *t > 0 && *d == cfg.d_img => *t,
        s => return Err(Error::shape("precompute_frames", s, &[0, cfg.d_img])),
    };
    let stacked = if cfg.use_objects {
        if interactions.len() != frames {
            return Err(Error::contract(format!(
                "{} interaction states for {frames} frames",
                interactions.len()
            )));
        }
        Some(tape.stack_rows(interactions)?)
    } else {
        None
    };
    let projected = if cfg.use_image {
        Some(mlp_forward(tape, &p.g_phi, bound, image)?)
    } else {
        None
    };
    let keys = projected
        .or(stacked)
        .expect("validated config has at least one pathway");
    let mean_key = tape.mean_rows(keys)?;
    let wc_t = tape.transpose(bound.var(p.w_c))?;
    let keys_proj = tape.matmul(keys, wc_t)?;
    let mean_interaction = match stacked {
        Some(s) if !cfg.use_coattention => Some(tape.mean_rows(s)?),
        _ => None,
    };
    Ok(FrameContext {
        frames,
        projected,
        keys,
        mean_key,
        keys_proj,
        interactions: stacked,
        mean_interaction,
    })
}

/// A segment pushed through the interaction module and frame projection.
#[derive(Debug, Clone)]
pub struct EncodedSegment {
    pub context: FrameContext,
    pub interaction: Option<InteractionSequence>,
}

pub fn encode_segment(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    segment: &SegmentFeatures,
) -> Result<EncodedSegment> {
    let image = tape.constant(segment.image.clone());
    let interaction = if model.config.use_objects {
        let mut frames = Vec::with_capacity(segment.frames());
        for (t, objs) in segment.objects.iter().enumerate() {
            let o = tape.constant(objs.clone());
            let v = tape.constant(Tensor::vector(segment.image.row(t).to_vec()));
            frames.push((o, v));
        }
        Some(interaction_sequence(tape, &model.interaction, bound, &frames)?)
    } else {
        None
    };
    let hidden = interaction.as_ref().map_or(&[][..], |s| &s.hidden[..]);
    let context = precompute_frames(tape, model, bound, image, hidden)?;
    Ok(EncodedSegment {
        context,
        interaction,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

impl DecoderState {
    pub fn zeros(tape: &mut Tape, cfg: &ModelConfig) -> Self {
        Self {
            h1: tape.constant(Tensor::zeros(&[cfg.att_hidden])),
            c1: tape.constant(Tensor::zeros(&[cfg.att_hidden])),
            h2: tape.constant(Tensor::zeros(&[cfg.lang_hidden])),
            c2: tape.constant(Tensor::zeros(&[cfg.lang_hidden])),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeStep {
    pub state: DecoderState,
    /// Temporal attention over frames (length T). The same vector weights
    /// both the frames and, under co-attention, the interaction states.
    pub alpha_temp: Var,
    pub attended_frames: Option<Var>,
    pub attended_interactions: Option<Var>,
    pub logits: Var,
}

pub fn decode_step(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &FrameContext,
    prev_word: usize,
    state: DecoderState,
) -> Result<DecodeStep> {
    let cfg = &model.config;
    let p = &model.captioner;
    if prev_word >= cfg.vocab_size {
        return Err(Error::contract(format!(
            "word id {prev_word} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let embedded = tape.column(bound.var(p.w_e), prev_word)?;
    let x1 = tape.concat(&[state.h2, ctx.mean_key, embedded])?;
    let (h1, c1) = lstm_step(tape, &p.att_lstm, bound, x1, state.h1, state.c1)?;

    let query = tape.matvec(bound.var(p.w_h), h1)?;
    let xa = tape.add_row(ctx.keys_proj, query)?;
    let act = tape.tanh(xa);
    let scores = tape.matvec(act, bound.var(p.w_a))?;
    let alpha = tape.softmax(scores, 0)?;

    let mut parts = vec![h1];
    let attended_frames = match ctx.projected {
        Some(v) => {
            let v_hat = tape.vecmat(alpha, v)?;
            parts.push(v_hat);
            Some(v_hat)
        }
        None => None,
    };
    let attended_interactions = match (ctx.interactions, ctx.mean_interaction) {
        (_, Some(mean)) => Some(mean),
        (Some(hs), None) => Some(tape.vecmat(alpha, hs)?),
        (None, None) => None,
    };
    if let Some(h_hat) = attended_interactions {
        parts.push(h_hat);
    }
    let x2 = tape.concat(&parts)?;
    let (h2, c2) = lstm_step(tape, &p.lang_lstm, bound, x2, state.h2, state.c2)?;
    let proj = tape.matvec(bound.var(p.w_out), h2)?;
    let logits = tape.add(proj, bound.var(p.b_out))?;
    Ok(DecodeStep {
        state: DecoderState { h1, c1, h2, c2 },
        alpha_temp: alpha,
        attended_frames,
        attended_interactions,
        logits,
    })
}

/// Sum of token losses over a teacher-forced caption.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub loss_sum: Var,
    pub scored: usize,
    pub logits: Vec<Var>,
    pub alphas: Vec<Var>,
}

/// Runs the decoder on gold previous words. Position `i` consumes
/// `tokens[i]` and is scored on `tokens[i + 1]`; PAD targets are skipped.
pub fn teacher_forced(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &FrameContext,
    tokens: &[usize],
) -> Result<TeacherForced> {
    if tokens.len() < 2 {
        return Err(Error::contract("caption needs at least BOS and EOS"));
    }
    if tokens[0] != BOS || *tokens.last().expect("non-empty") != EOS {
        return Err(Error::contract("caption must start with BOS and end with EOS"));
    }
    if tokens.len() > crate::data::MAX_CAPTION_WORDS + 2 {
        return Err(Error::contract(format!(
            "caption of {} tokens exceeds the cap",
            tokens.len()
        )));
    }
    let mut state = DecoderState::zeros(tape, &model.config);
    let mut terms = Vec::new();
    let mut logits = Vec::new();
    let mut alphas = Vec::new();
    for pair in tokens.windows(2) {
        let step = decode_step(tape, model, bound, ctx, pair[0], state)?;
        state = step.state;
        logits.push(step.logits);
        alphas.push(step.alpha_temp);
        if pair[1] != PAD {
            terms.push(tape.cross_entropy(step.logits, pair[1])?);
        }
    }
    if terms.is_empty() {
        return Err(Error::contract("caption has no scored positions"));
    }
    let as_vectors = terms
        .iter()
        .map(|&t| tape.reshape(t, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&as_vectors)?;
    let loss_sum = tape.sum(stacked);
    Ok(TeacherForced {
        loss_sum,
        scored: terms.len(),
        logits,
        alphas,
    })
}

/// Mean cross-entropy of a caption given a segment, plus per-step logits.
pub fn forward_teacher_forced(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    segment: &SegmentFeatures,
    tokens: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let enc = encode_segment(tape, model, bound, segment)?;
    let tf = teacher_forced(tape, model, bound, &enc.context, tokens)?;
    let mean = tape.scale(tf.loss_sum, 1.0 / tf.scored as f64);
    Ok((mean, tf.logits))
}
