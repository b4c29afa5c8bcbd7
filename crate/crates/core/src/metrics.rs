//! Caption metrics: corpus BLEU@1-4, ROUGE-L and CIDEr-D.
//!
//! Captions are compared as lowercase whitespace tokens. METEOR is not
//! provided; reports omit it rather than approximating it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;
pub const CIDER_MAX_N: usize = 4;

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn check_inputs(candidates: &[String], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("segment {i} has no references")));
    }
    Ok(())
}

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Default)]
struct BleuStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ..Default::default()
        }
    }

    fn add(&mut self, cand: &[String], refs: &[Vec<String>]) {
        for n in 1..=self.matches.len() {
            let cc = ngram_counts(cand, n);
            let mut max_ref: HashMap<&Ngram, usize> = HashMap::new();
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for rc in &ref_counts {
                for (g, &c) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let clipped: usize = cc
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            self.matches[n - 1] += clipped;
            self.totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
        self.cand_len += cand.len();
        // closest reference length, shorter one on ties
        let c = cand.len() as i64;
        let closest = refs
            .iter()
            .map(|r| r.len() as i64)
            .min_by_key(|&r| ((r - c).abs(), r))
            .unwrap_or(0);
        self.ref_len += closest as usize;
    }

    fn scores(&self) -> Vec<f64> {
        let bp = if self.cand_len == 0 {
            0.0
        } else if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        let mut out = Vec::with_capacity(self.matches.len());
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..self.matches.len() {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                zero = true;
            } else {
                log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            }
            out.push(if zero {
                0.0
            } else {
                bp * (log_sum / (n + 1) as f64).exp()
            });
        }
        out
    }
}

/// Clipped n-gram precision of order `n` for one candidate, as
/// `(matches, total)`.
pub fn clipped_precision(candidate: &str, references: &[String], n: usize) -> (usize, usize) {
    let refs: Vec<_> = references.iter().map(|r| tokenize(r)).collect();
    let mut s = BleuStats::new(n);
    s.add(&tokenize(candidate), &refs);
    (s.matches[n - 1], s.totals[n - 1])
}

/// Corpus-level BLEU@1..=max_n: clipped n-gram counts are summed over the
/// corpus before taking precisions; brevity penalty uses the closest
/// reference length per segment.
pub fn bleu(candidates: &[String], references: &[Vec<String>], max_n: usize) -> Result<Vec<f64>> {
    check_inputs(candidates, references)?;
    let mut stats = BleuStats::new(max_n);
    for (c, refs) in candidates.iter().zip(references) {
        let r: Vec<_> = refs.iter().map(|s| tokenize(s)).collect();
        stats.add(&tokenize(c), &r);
    }
    Ok(stats.scores())
}

fn sentence_bleu(cand: &[String], refs: &[Vec<String>], max_n: usize) -> Vec<f64> {
    let mut s = BleuStats::new(max_n);
    s.add(cand, refs);
    s.scores()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn rouge_l_segment(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter()
        .map(|r| rouge_l_pair(cand, r))
        .fold(0.0, f64::max)
}

/// Mean over segments of the best LCS F-measure against any reference.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            let r: Vec<_> = refs.iter().map(|s| tokenize(s)).collect();
            rouge_l_segment(&tokenize(c), &r)
        })
        .sum();
    Ok(total / candidates.len() as f64)
}

struct CiderVec {
    weights: Vec<HashMap<Ngram, f64>>,
    norms: Vec<f64>,
    len: usize,
}

struct Cider {
    doc_freq: HashMap<Ngram, usize>,
    log_docs: f64,
}

impl Cider {
    fn new(references: &[Vec<Vec<String>>]) -> Self {
        let mut doc_freq = HashMap::new();
        for refs in references {
            let mut seen: std::collections::HashSet<Ngram> = Default::default();
            for r in refs {
                for n in 1..=CIDER_MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Self {
            doc_freq,
            log_docs: (references.len() as f64).ln(),
        }
    }

    fn vectorize(&self, tokens: &[String]) -> CiderVec {
        let mut weights = Vec::with_capacity(CIDER_MAX_N);
        let mut norms = Vec::with_capacity(CIDER_MAX_N);
        for n in 1..=CIDER_MAX_N {
            let mut w = HashMap::new();
            let mut sq = 0.0;
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.doc_freq.get(&g).copied().unwrap_or(0).max(1) as f64;
                let v = tf as f64 * (self.log_docs - df.ln());
                sq += v * v;
                w.insert(g, v);
            }
            weights.push(w);
            norms.push(sq.sqrt());
        }
        CiderVec {
            weights,
            norms,
            len: tokens.len(),
        }
    }

    fn similarity(&self, cand: &CiderVec, reference: &CiderVec) -> f64 {
        let delta = cand.len as f64 - reference.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..CIDER_MAX_N {
            let mut dot = 0.0;
            for (g, &cv) in &cand.weights[n] {
                if let Some(&rv) = reference.weights[n].get(g) {
                    dot += cv.min(rv) * rv;
                }
            }
            if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= cand.norms[n] * reference.norms[n];
            }
            total += dot * penalty;
        }
        total / CIDER_MAX_N as f64
    }

    fn segment(&self, cand: &[String], refs: &[Vec<String>]) -> f64 {
        let cv = self.vectorize(cand);
        let sum: f64 = refs
            .iter()
            .map(|r| self.similarity(&cv, &self.vectorize(r)))
            .sum();
        CIDER_SCALE * sum / refs.len() as f64
    }
}

fn cider_scores(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Vec<f64> {
    let cider = Cider::new(references);
    candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider.segment(c, r))
        .collect()
}

/// CIDEr-D: TF-IDF n-gram cosine (n = 1..4) with clipped candidate weights
/// and a Gaussian length penalty, document frequencies taken from the
/// references. A single-segment corpus has zero IDF everywhere and scores 0.
pub fn cider_d(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let cands: Vec<_> = candidates.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<_>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
        .collect();
    let scores = cider_scores(&cands, &refs);
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub cider_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// B@1..B@4, corpus level.
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub segments: usize,
    pub bleu_aggregation: String,
    pub per_segment: BTreeMap<String, SegmentScores>,
}

/// Scores predictions against references, both keyed by segment id.
/// Every predicted id needs references; references without a prediction
/// are an error too, so nothing is silently dropped.
pub fn evaluate(
    predictions: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<MetricReport> {
    for id in predictions.keys() {
        if !references.contains_key(id) {
            return Err(Error::validation("predictions", format!("no references for segment {id}")));
        }
    }
    for id in references.keys() {
        if !predictions.contains_key(id) {
            return Err(Error::validation("predictions", format!("missing prediction for segment {id}")));
        }
    }
    let ids: Vec<&String> = predictions.keys().collect();
    let cands: Vec<String> = ids.iter().map(|id| predictions[*id].clone()).collect();
    let refs: Vec<Vec<String>> = ids.iter().map(|id| references[*id].clone()).collect();

    let bleu_corpus = bleu(&cands, &refs, 4)?;
    let rouge = rouge_l(&cands, &refs)?;

    let ctoks: Vec<_> = cands.iter().map(|c| tokenize(c)).collect();
    let rtoks: Vec<Vec<_>> = refs
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
        .collect();
    let cider_each = cider_scores(&ctoks, &rtoks);
    let cider = cider_each.iter().sum::<f64>() / cider_each.len() as f64;

    let per_segment = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            (
                (*id).clone(),
                SegmentScores {
                    bleu: sentence_bleu(&ctoks[i], &rtoks[i], 4),
                    rouge_l: rouge_l_segment(&ctoks[i], &rtoks[i]),
                    cider_d: cider_each[i],
                },
            )
        })
        .collect();

    Ok(MetricReport {
        bleu: bleu_corpus,
        rouge_l: rouge,
        cider_d: cider,
        segments: ids.len(),
        bleu_aggregation: "corpus".into(),
        per_segment,
    })
}
