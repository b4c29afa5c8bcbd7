//! Shared fixtures and plain-`f64` oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinet_core::data::SegmentFeatures;
use sinet_core::interaction::ScoreNorm;
use sinet_core::params::ParamStore;
use sinet_core::{Model, ModelConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Small dimensions for gradient checks and oracles.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_img: 5,
        d_obj: 4,
        groups: 2,
        d_theta: 4,
        interaction_hidden: 4,
        theta_hidden: Vec::new(),
        score_norm: ScoreNorm::Row,
        d_phi: 4,
        phi_hidden: Vec::new(),
        embed: 3,
        att_hidden: 4,
        lang_hidden: 4,
        vocab_size: vocab,
        use_image: true,
        use_objects: true,
        use_coattention: true,
    }
}

/// Replaces every parameter (biases included) with uniform noise.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

pub fn random_model(cfg: ModelConfig, seed: u64, scale: f64) -> Model {
    let mut model = Model::init(cfg, seed).unwrap();
    randomize(&mut model.store, &mut rng(seed ^ 0x5eed), scale);
    model
}

pub fn random_segment(
    rng: &mut ChaCha8Rng,
    counts: &[usize],
    d_img: usize,
    d_obj: usize,
) -> SegmentFeatures {
    SegmentFeatures {
        segment_id: "s".into(),
        image: rand_tensor(rng, &[counts.len(), d_img], 1.0),
        objects: counts.iter().map(|&n| rand_tensor(rng, &[n, d_obj], 1.0)).collect(),
        d_obj,
        captions: Vec::new(),
    }
}

// ---- scalar oracles -------------------------------------------------------

pub type Mat = Vec<Vec<f64>>;

pub fn param_mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.find(name).unwrap_or_else(|| panic!("no param {name}")));
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn param_vec(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap()).data().to_vec()
}

pub fn mv(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn mean_rows(rows: &Mat) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

pub fn weighted_rows(alpha: &[f64], rows: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (a, r) in alpha.iter().zip(rows) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += a * v;
        }
    }
    out
}

/// LSTM step with gates stacked i, f, g, o.
pub fn lstm(store: &ParamStore, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w_ih = param_mat(store, &format!("{prefix}.w_ih"));
    let w_hh = param_mat(store, &format!("{prefix}.w_hh"));
    let b = param_vec(store, &format!("{prefix}.b"));
    let pre = add(&add(&mv(&w_ih, x), &mv(&w_hh, h)), &b);
    let hd = h.len();
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(pre[j]);
        let f = sigmoid(pre[hd + j]);
        let g = pre[2 * hd + j].tanh();
        let o = sigmoid(pre[3 * hd + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// Single tanh layer `tanh(W x + b)` stored as `{prefix}.0.w` / `.0.b`.
pub fn tanh_layer(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = param_mat(store, &format!("{prefix}.0.w"));
    let b = param_vec(store, &format!("{prefix}.0.b"));
    add(&mv(&w, x), &b).iter().map(|v| v.tanh()).collect()
}

/// Row-softmax attention of one group; returns (alpha, pooled).
pub fn group_oracle(
    store: &ParamStore,
    k: usize,
    d_theta: usize,
    objects: &Mat,
    v: &[f64],
    h: &[f64],
) -> (Mat, Vec<f64>) {
    let pre = format!("interaction.group{k}");
    let u = add(
        &mv(&param_mat(store, &format!("{pre}.w_h")), h),
        &mv(&param_mat(store, &format!("{pre}.w_c")), v),
    );
    let g: Mat = objects.iter().map(|o| tanh_layer(store, &format!("{pre}.theta"), o)).collect();
    let x: Mat = g.iter().map(|r| add(r, &u)).collect();
    let scale = (d_theta as f64).sqrt();
    let alpha: Mat = x
        .iter()
        .map(|xi| softmax(&x.iter().map(|xj| dot(xi, xj) / scale).collect::<Vec<_>>()))
        .collect();
    let attended: Mat = alpha.iter().map(|a| weighted_rows(a, &g)).collect();
    let pooled = mean_rows(&attended);
    (alpha, pooled)
}

/// Interaction states h_1..h_T from a zero state.
pub fn interaction_oracle(model: &Model, seg: &SegmentFeatures) -> Mat {
    let cfg = &model.config;
    let mut h = vec![0.0; cfg.interaction_hidden];
    let mut c = h.clone();
    let mut out = Vec::new();
    for t in 0..seg.frames() {
        let objs: Mat = (0..seg.objects[t].rows()).map(|i| seg.objects[t].row(i).to_vec()).collect();
        let v = seg.image.row(t);
        let mut input = Vec::new();
        for k in 0..cfg.groups {
            if objs.is_empty() {
                input.extend(vec![0.0; cfg.d_theta]);
            } else {
                input.extend(group_oracle(&model.store, k, cfg.d_theta, &objs, v, &h).1);
            }
        }
        let (h2, c2) = lstm(&model.store, "interaction.lstm", &input, &h, &c);
        h = h2;
        c = c2;
        out.push(h.clone());
    }
    out
}

/// Teacher-forced logits and temporal attention under co-attention mode.
pub fn decoder_oracle(model: &Model, seg: &SegmentFeatures, tokens: &[usize]) -> (Mat, Mat) {
    let cfg = &model.config;
    let s = &model.store;
    let hs = interaction_oracle(model, seg);
    let frames: Mat = (0..seg.frames())
        .map(|t| tanh_layer(s, "captioner.g_phi", seg.image.row(t)))
        .collect();
    let v_bar = mean_rows(&frames);
    let w_e = param_mat(s, "captioner.w_e");
    let w_h = param_mat(s, "captioner.att.w_h");
    let w_c = param_mat(s, "captioner.att.w_c");
    let w_a = param_vec(s, "captioner.att.w_a");
    let w_out = param_mat(s, "captioner.out.w");
    let b_out = param_vec(s, "captioner.out.b");
    let (mut h1, mut c1) = (vec![0.0; cfg.att_hidden], vec![0.0; cfg.att_hidden]);
    let (mut h2, mut c2) = (vec![0.0; cfg.lang_hidden], vec![0.0; cfg.lang_hidden]);
    let mut logits = Vec::new();
    let mut alphas = Vec::new();
    for &w in &tokens[..tokens.len() - 1] {
        let emb: Vec<f64> = w_e.iter().map(|row| row[w]).collect();
        let x1: Vec<f64> = h2.iter().chain(&v_bar).chain(&emb).cloned().collect();
        let (a, b) = lstm(s, "captioner.att_lstm", &x1, &h1, &c1);
        h1 = a;
        c1 = b;
        let q = mv(&w_h, &h1);
        let scores: Vec<f64> = frames
            .iter()
            .map(|f| {
                let z: Vec<f64> = add(&q, &mv(&w_c, f)).iter().map(|v| v.tanh()).collect();
                dot(&w_a, &z)
            })
            .collect();
        let alpha = softmax(&scores);
        let v_hat = weighted_rows(&alpha, &frames);
        let h_hat = weighted_rows(&alpha, &hs);
        let x2: Vec<f64> = h1.iter().chain(&v_hat).chain(&h_hat).cloned().collect();
        let (a, b) = lstm(s, "captioner.lang_lstm", &x2, &h2, &c2);
        h2 = a;
        c2 = b;
        logits.push(add(&mv(&w_out, &h2), &b_out));
        alphas.push(alpha);
    }
    (logits, alphas)
}

// ---- CIDEr-D oracle over explicit dense vectors ---------------------------

fn ngrams(tokens: &[&str], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

/// Materialises every TF-IDF vector over the sorted n-gram universe of the
/// corpus, then scores with dense arithmetic.
pub fn cider_oracle(cands: &[&str], references: &[&[&str]]) -> f64 {
    let n_docs = references.len() as f64;
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(references) {
        let ct = toks(c);
        let mut seg = 0.0;
        for r in rs.iter() {
            let rt = toks(r);
            let mut per_n = 0.0;
            for n in 1..=4 {
                let mut universe = BTreeSet::new();
                let all_texts = cands.iter().chain(references.iter().flat_map(|x| x.iter()));
                for text in all_texts {
                    let t = toks(text);
                    universe.extend(ngrams(&t.iter().map(String::as_str).collect::<Vec<_>>(), n));
                }
                let universe: Vec<String> = universe.into_iter().collect();
                let df: Vec<f64> = universe
                    .iter()
                    .map(|g| {
                        references
                            .iter()
                            .filter(|doc| {
                                doc.iter().any(|d| {
                                    let t = toks(d);
                                    ngrams(&t.iter().map(String::as_str).collect::<Vec<_>>(), n).contains(g)
                                })
                            })
                            .count() as f64
                    })
                    .collect();
                let dense = |t: &[String]| -> Vec<f64> {
                    let gs = ngrams(&t.iter().map(String::as_str).collect::<Vec<_>>(), n);
                    universe
                        .iter()
                        .zip(&df)
                        .map(|(g, &d)| {
                            let tf = gs.iter().filter(|x| *x == g).count() as f64;
                            tf * (n_docs.ln() - d.max(1.0).ln())
                        })
                        .collect()
                };
                let cv = dense(&ct);
                let rv = dense(&rt);
                let mut val: f64 = cv.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
                let nc = cv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc != 0.0 && nr != 0.0 {
                    val /= nc * nr;
                }
                let delta = ct.len() as f64 - rt.len() as f64;
                per_n += val * (-(delta * delta) / 72.0).exp();
            }
            seg += per_n / 4.0;
        }
        total += 10.0 * seg / rs.len() as f64;
    }
    total / cands.len() as f64
}

