//! Recurrent higher-order object interaction.
//!
//! Each frame carries an unordered set of object features. K attention
//! groups each pick out a weighted subset of objects, conditioned on the
//! frame's image feature and the previous interaction state; the K pooled
//! vectors are concatenated and fed to an LSTM that runs across frames.
//!
//! Layout: objects are rows. Group k forms `X = g(O) + 1·uᵀ` with
//! `u = W_h h_prev + W_c v`, scores `S = X Xᵀ / √d`, applies softmax per row
//! (one distribution over objects per query object) and pools
//! `mean_rows(α · g(O))`. Row-softmax and the row mean commute with any
//! simultaneous permutation of rows and columns, so the pooled vector does
//! not depend on object order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{lstm_step, mlp_forward, Activation, LstmParams, MlpParams};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the n×n score matrix is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    /// Softmax per row; every row of α sums to one.
    #[default]
    Row,
    /// One softmax over all n² entries.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub d_img: usize,
    pub d_obj: usize,
    pub groups: usize,
    pub d_theta: usize,
    pub hidden: usize,
    /// Hidden widths of each group MLP before its final `d_theta` layer.
    #[serde(default)]
    pub theta_hidden: Vec<usize>,
    #[serde(default)]
    pub score_norm: ScoreNorm,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            d_img: 32,
            d_obj: 32,
            groups: 2,
            d_theta: 32,
            hidden: 32,
            theta_hidden: Vec::new(),
            score_norm: ScoreNorm::Row,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupParams {
    pub w_h: ParamId,
    pub w_c: ParamId,
    pub theta: MlpParams,
}

#[derive(Debug, Clone)]
pub struct InteractionParams {
    pub config: InteractionConfig,
    pub groups: Vec<GroupParams>,
    pub lstm: LstmParams,
}

impl InteractionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &InteractionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.groups == 0 || config.d_theta == 0 || config.hidden == 0 {
            return Err(Error::validation(
                "interaction",
                "groups, d_theta and hidden must be positive",
            ));
        }
        let mut groups = Vec::with_capacity(config.groups);
        for k in 0..config.groups {
            let w_h = store.insert(
                format!("interaction.group{k}.w_h"),
                glorot(config.d_theta, config.hidden, rng),
            )?;
            let w_c = store.insert(
                format!("interaction.group{k}.w_c"),
                glorot(config.d_theta, config.d_img, rng),
            )?;
            let mut widths = vec![config.d_obj];
            widths.extend(&config.theta_hidden);
            widths.push(config.d_theta);
            let acts = vec![Activation::Tanh; widths.len() - 1];
            let theta = MlpParams::init(
                store,
                &format!("interaction.group{k}.theta"),
                &widths,
                &acts,
                rng,
            )?;
            groups.push(GroupParams { w_h, w_c, theta });
        }
        let lstm = LstmParams::init(
            store,
            "interaction.lstm",
            config.groups * config.d_theta,
            config.hidden,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            groups,
            lstm,
        })
    }
}

/// Attention of one group on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttention {
    /// n×n, row-stochastic under [`ScoreNorm::Row`]. Empty for n = 0.
    pub alpha: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

/// Per-frame record: one entry per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttentionRecord {
    pub groups: Vec<GroupAttention>,
}

#[derive(Debug, Clone, Copy)]
pub struct InteractionState {
    pub h: Var,
    pub c: Var,
}

impl InteractionState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[hidden])),
            c: tape.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// Tape handles of one group's attention.
#[derive(Debug, Clone, Copy)]
pub struct GroupOutput {
    pub alpha: Option<Var>,
    pub pooled: Var,
}

fn matrix_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Attention of group `k` over the objects of one frame (n ≥ 1).
pub fn group_attend(
    tape: &mut Tape,
    p: &InteractionParams,
    k: usize,
    bound: &Bound,
    objects: Var,
    v_ct: Var,
    h_prev: Var,
) -> Result<GroupOutput> {
    let cfg = &p.config;
    let group = &p.groups[k];
    let n = match tape.shape(objects) {
        [n, d] if *d == cfg.d_obj => *n,
        s => return Err(Error::shape("group_attend objects", s, &[0, cfg.d_obj])),
    };
    if n == 0 {
        return Err(Error::contract("group_attend needs at least one object"));
    }
    let from_h = tape.matvec(bound.var(group.w_h), h_prev)?;
    let from_c = tape.matvec(bound.var(group.w_c), v_ct)?;
    let context = tape.add(from_h, from_c)?;

    let projected = mlp_forward(tape, &group.theta, bound, objects)?;
    let x = tape.add_row(projected, context)?;
    let xt = tape.transpose(x)?;
    let gram = tape.matmul(x, xt)?;
    let scores = tape.scale(gram, 1.0 / (cfg.d_theta as f64).sqrt());
    let alpha = match cfg.score_norm {
        ScoreNorm::Row => tape.softmax(scores, 1)?,
        ScoreNorm::Flat => {
            let flat = tape.reshape(scores, &[n * n])?;
            let soft = tape.softmax(flat, 0)?;
            tape.reshape(soft, &[n, n])?
        }
    };
    let attended = tape.matmul(alpha, projected)?;
    let pooled = tape.mean_rows(attended)?;
    Ok(GroupOutput {
        alpha: Some(alpha),
        pooled,
    })
}

/// Advances the interaction LSTM by one frame.
pub fn interaction_step(
    tape: &mut Tape,
    p: &InteractionParams,
    bound: &Bound,
    objects: Var,
    v_ct: Var,
    state: InteractionState,
) -> Result<(InteractionState, Vec<GroupOutput>)> {
    let cfg = &p.config;
    if tape.shape(v_ct) != [cfg.d_img] {
        return Err(Error::shape("interaction_step image", tape.shape(v_ct), &[cfg.d_img]));
    }
    let n = tape.shape(objects).first().copied().unwrap_or(0);
    let mut outputs = Vec::with_capacity(p.groups.len());
    for k in 0..p.groups.len() {
        let out = if n == 0 {
            GroupOutput {
                alpha: None,
                pooled: tape.constant(Tensor::zeros(&[cfg.d_theta])),
            }
        } else {
            group_attend(tape, p, k, bound, objects, v_ct, state.h)?
        };
        outputs.push(out);
    }
    let pooled: Vec<Var> = outputs.iter().map(|o| o.pooled).collect();
    let input = tape.concat(&pooled)?;
    let (h, c) = lstm_step(tape, &p.lstm, bound, input, state.h, state.c)?;
    Ok((InteractionState { h, c }, outputs))
}

/// Result of running the interaction module over a whole segment.
#[derive(Debug, Clone)]
pub struct InteractionSequence {
    pub hidden: Vec<Var>,
    pub groups: Vec<Vec<GroupOutput>>,
}

impl InteractionSequence {
    /// Copies the per-frame attention out of the tape.
    pub fn records(&self, tape: &Tape) -> Vec<ObjectAttentionRecord> {
        self.groups
            .iter()
            .map(|frame| ObjectAttentionRecord {
                groups: frame
                    .iter()
                    .map(|g| GroupAttention {
                        alpha: g.alpha.map_or_else(Vec::new, |a| matrix_rows(tape.value(a))),
                        pooled: tape.value(g.pooled).data().to_vec(),
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Folds [`interaction_step`] over `(objects, image)` frame pairs from a
/// zero state.
pub fn interaction_sequence(
    tape: &mut Tape,
    p: &InteractionParams,
    bound: &Bound,
    frames: &[(Var, Var)],
) -> Result<InteractionSequence> {
    if frames.is_empty() {
        return Err(Error::contract("interaction_sequence over zero frames"));
    }
    let mut state = InteractionState::zeros(tape, p.config.hidden);
    let mut seq = InteractionSequence {
        hidden: Vec::with_capacity(frames.len()),
        groups: Vec::with_capacity(frames.len()),
    };
    for &(objects, image) in frames {
        let (next, groups) = interaction_step(tape, p, bound, objects, image, state)?;
        seq.hidden.push(next.h);
        seq.groups.push(groups);
        state = next;
    }
    Ok(seq)
}
