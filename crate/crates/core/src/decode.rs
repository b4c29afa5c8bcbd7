//! Greedy and beam-search caption generation.
//!
//! Beam search keeps finished and live hypotheses in one pool ranked by
//! summed word log-probability (no length normalisation). Ties are broken
//! by lexicographic token order, which makes width 1 coincide with greedy
//! argmax decoding under lowest-id tie-breaking.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::captioner::{decode_step, encode_segment, DecoderState, EncodedSegment};
use crate::data::{decode_caption, SegmentFeatures, Vocabulary, BOS, EOS, MAX_CAPTION_WORDS};
use crate::error::{Error, Result};
use crate::interaction::ObjectAttentionRecord;
use crate::model::Model;
use crate::params::Bound;
use crate::tape::{log_softmax, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Cap on generated tokens (words plus the closing EOS).
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: MAX_CAPTION_WORDS,
        }
    }
}

/// Decoder state values detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StateValues {
    pub h1: Tensor,
    pub c1: Tensor,
    pub h2: Tensor,
    pub c2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished by the model.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    /// Temporal attention used to emit each token after BOS.
    pub alpha_temp: Vec<Vec<f64>>,
    pub state: StateValues,
}

impl Hypothesis {
    /// Generated words, without BOS and the closing EOS.
    pub fn words(&self) -> &[usize] {
        let end = if self.tokens.last() == Some(&EOS) && self.tokens.len() > 1 {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }
}

/// A decoded caption plus the attention that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub words: Vec<usize>,
    pub log_prob: f64,
    /// One temporal-attention vector per entry of `words`.
    pub alpha_temp: Vec<Vec<f64>>,
    pub objects: Vec<ObjectAttentionRecord>,
}

struct Decoder<'a> {
    model: &'a Model,
    tape: Tape,
    bound: Bound,
    enc: EncodedSegment,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a Model, segment: &SegmentFeatures) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let enc = encode_segment(&mut tape, model, &bound, segment)?;
        Ok(Self {
            model,
            tape,
            bound,
            enc,
        })
    }

    fn start(&mut self) -> DecoderState {
        DecoderState::zeros(&mut self.tape, &self.model.config)
    }

    /// Log-probabilities of the next word, the attention and the new state.
    fn step(&mut self, word: usize, state: DecoderState) -> Result<(Vec<f64>, Vec<f64>, DecoderState)> {
        let ctx = self.enc.context;
        let s = decode_step(&mut self.tape, self.model, &self.bound, &ctx, word, state)?;
        let logp = log_softmax(self.tape.value(s.logits).data());
        let alpha = self.tape.value(s.alpha_temp).data().to_vec();
        Ok((logp, alpha, s.state))
    }

    fn values(&self, s: DecoderState) -> StateValues {
        StateValues {
            h1: self.tape.value(s.h1).clone(),
            c1: self.tape.value(s.c1).clone(),
            h2: self.tape.value(s.h2).clone(),
            c2: self.tape.value(s.c2).clone(),
        }
    }

    fn objects(&self) -> Vec<ObjectAttentionRecord> {
        self.enc
            .interaction
            .as_ref()
            .map(|s| s.records(&self.tape))
            .unwrap_or_default()
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding from BOS until EOS or `max_len` generated tokens.
pub fn decode_greedy(model: &Model, segment: &SegmentFeatures, max_len: usize) -> Result<Caption> {
    let mut dec = Decoder::new(model, segment)?;
    let mut state = dec.start();
    let mut word = BOS;
    let mut caption = Caption {
        words: Vec::new(),
        log_prob: 0.0,
        alpha_temp: Vec::new(),
        objects: Vec::new(),
    };
    for _ in 0..max_len {
        let (logp, alpha, next) = dec.step(word, state)?;
        state = next;
        word = argmax(&logp);
        caption.log_prob += logp[word];
        if word == EOS {
            break;
        }
        caption.words.push(word);
        caption.alpha_temp.push(alpha);
    }
    caption.objects = dec.objects();
    Ok(caption)
}

struct Entry {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
    state: DecoderState,
    alphas: Vec<Vec<f64>>,
}

fn rank(a: &Entry, b: &Entry) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search; returns the best hypothesis in the final pool.
pub fn beam_search(model: &Model, segment: &SegmentFeatures, opts: DecodeOptions) -> Result<(Hypothesis, Vec<ObjectAttentionRecord>)> {
    if opts.beam == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    if opts.max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut dec = Decoder::new(model, segment)?;
    let start = dec.start();
    let mut pool = vec![Entry {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
        state: start,
        alphas: Vec::new(),
    }];

    while pool.iter().any(|e| !e.finished) {
        let mut candidates = Vec::new();
        for entry in pool {
            if entry.finished {
                candidates.push(entry);
                continue;
            }
            let last = *entry.tokens.last().expect("starts with BOS");
            let (logp, alpha, next) = dec.step(last, entry.state)?;
            let generated = entry.tokens.len();
            for (w, lp) in logp.iter().enumerate() {
                let mut tokens = entry.tokens.clone();
                tokens.push(w);
                let mut alphas = entry.alphas.clone();
                alphas.push(alpha.clone());
                candidates.push(Entry {
                    tokens,
                    log_prob: entry.log_prob + lp,
                    finished: w == EOS || generated >= opts.max_len,
                    state: next,
                    alphas,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(opts.beam);
        pool = candidates;
    }

    let best = pool.into_iter().next().expect("beam keeps at least one entry");
    let hyp = Hypothesis {
        log_prob: best.log_prob,
        finished: best.finished,
        alpha_temp: best.alphas,
        state: dec.values(best.state),
        tokens: best.tokens,
    };
    Ok((hyp, dec.objects()))
}

/// Beam search packaged like [`decode_greedy`]'s output.
pub fn caption(model: &Model, segment: &SegmentFeatures, opts: DecodeOptions) -> Result<Caption> {
    let (hyp, objects) = beam_search(model, segment, opts)?;
    let words = hyp.words().to_vec();
    let alpha_temp = hyp.alpha_temp[..words.len()].to_vec();
    Ok(Caption {
        words,
        log_prob: hyp.log_prob,
        alpha_temp,
        objects,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTrace {
    pub word: String,
    pub alpha_temp: Vec<f64>,
}

/// Attention behind one generated caption. Object attention does not
/// depend on the word being generated, so it is stored once per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTrace {
    pub segment_id: String,
    pub words: Vec<WordTrace>,
    pub objects: Vec<ObjectAttentionRecord>,
}

/// Captions every segment; returns predictions keyed by segment id and the
/// attention traces in segment order.
pub fn caption_segments<'a>(
    model: &Model,
    vocab: &Vocabulary,
    segments: impl IntoIterator<Item = &'a SegmentFeatures>,
    opts: DecodeOptions,
) -> Result<(BTreeMap<String, String>, Vec<SegmentTrace>)> {
    let mut predictions = BTreeMap::new();
    let mut traces = Vec::new();
    for seg in segments {
        let c = caption(model, seg, opts)?;
        let text = decode_caption(vocab, &c.words);
        if predictions.insert(seg.segment_id.clone(), text).is_some() {
            return Err(Error::validation("segment_id", format!("duplicate id {}", seg.segment_id)));
        }
        let words = c
            .words
            .iter()
            .zip(c.alpha_temp)
            .map(|(&w, alpha_temp)| WordTrace {
                word: vocab.word(w).unwrap_or("<unk>").to_string(),
                alpha_temp,
            })
            .collect();
        traces.push(SegmentTrace {
            segment_id: seg.segment_id.clone(),
            words,
            objects: c.objects,
        });
    }
    Ok((predictions, traces))
}

/// Reference captions keyed by segment id.
pub fn references<'a>(segments: impl IntoIterator<Item = &'a SegmentFeatures>) -> BTreeMap<String, Vec<String>> {
    segments
        .into_iter()
        .map(|s| (s.segment_id.clone(), s.captions.clone()))
        .collect()
}
