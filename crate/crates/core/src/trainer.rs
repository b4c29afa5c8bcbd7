//! ADAM, the plateau learning-rate schedule and the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{encode_segment, teacher_forced};
use crate::data::{build_vocab, encode_caption, Dataset, SegmentFeatures, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    /// Epochs without improvement before the learning rate drops.
    pub plateau_patience: usize,
    /// Minimum absolute decrease of validation loss that counts as progress.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub min_count: usize,
    /// Architecture and mode flags. `d_img`, `d_obj` and `vocab_size` are
    /// overwritten from the dataset.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            min_count: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("plateau_threshold", self.plateau_threshold),
            ("eps", self.eps),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(field, format!("{v} must be positive")));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::validation("plateau_factor", "must lie in (0, 1)"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(field, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::validation("plateau_patience", "must be positive"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::validation("clip_norm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update of a flat parameter buffer. `t` is the
/// 1-based step number.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    t: u64,
    hyper: AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::contract(format!(
            "adam buffers differ in length: param {}, grad {}, m {}, v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::contract("adam step counter starts at 1"));
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// ADAM moment buffers for a whole parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract("adam: parameter and gradient counts differ"));
        }
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != grads[i].shape() {
                return Err(Error::shape("adam", p.shape(), grads[i].shape()));
            }
            adam_step(
                p.data_mut(),
                grads[i].data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                lr,
                self.step,
                self.hyper,
            )?;
        }
        Ok(())
    }
}

/// Drops the learning rate by `factor` after `patience` consecutive
/// epochs whose validation loss fails to beat the best by `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(best) if val_loss >= best - self.threshold => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model: Model,
    pub vocab: Vocabulary,
    pub adam: Adam,
    pub plateau: Plateau,
    pub log: Vec<EpochLog>,
}

struct Item<'a> {
    segment: &'a SegmentFeatures,
    tokens: Vec<usize>,
}

fn scored(tokens: &[usize]) -> usize {
    tokens[1..].iter().filter(|&&t| t != PAD).count()
}

fn items<'a>(segments: &'a [SegmentFeatures], vocab: &Vocabulary) -> Vec<Item<'a>> {
    segments
        .iter()
        .flat_map(|s| {
            s.captions.iter().map(move |c| Item {
                segment: s,
                tokens: encode_caption(vocab, c),
            })
        })
        .collect()
}

/// Per-token mean cross-entropy of every caption in `segments`.
pub fn evaluate_loss(model: &Model, vocab: &Vocabulary, segments: &[SegmentFeatures]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for item in items(segments, vocab) {
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let enc = encode_segment(&mut tape, model, &bound, item.segment)?;
        let tf = teacher_forced(&mut tape, model, &bound, &enc.context, &item.tokens)?;
        total += tape.value(tf.loss_sum).item();
        count += tf.scored;
    }
    Ok(total / count.max(1) as f64)
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Model configuration implied by the dataset and the training config.
pub fn resolve_model_config(config: &TrainConfig, dataset: &Dataset, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d_img: dataset.manifest.d_img,
        d_obj: dataset.manifest.d_obj,
        vocab_size: vocab.len(),
        ..config.model.clone()
    }
}

/// Trains from a seeded initialisation. Deterministic in `(config, dataset)`.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if dataset.val.is_empty() {
        return Err(Error::contract("validation split is empty"));
    }
    let vocab = build_vocab(
        dataset.train.iter().flat_map(|s| s.captions.iter().map(String::as_str)),
        config.min_count,
    );
    let mut model = Model::init(resolve_model_config(config, dataset, &vocab), config.seed)?;
    let hyper = AdamHyper {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
    };
    let mut adam = Adam::new(model.store.tensors(), hyper);
    let mut plateau = Plateau::new(
        config.lr0,
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_threshold,
    );
    let train_items = items(&dataset.train, &vocab);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        let lr = plateau.lr;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0;
        for batch in order.chunks(config.batch_size) {
            let tokens: usize = batch.iter().map(|&i| scored(&train_items[i].tokens)).sum();
            let inv = 1.0 / tokens as f64;
            let mut grads: Vec<Tensor> = model
                .store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &i in batch {
                let item = &train_items[i];
                let mut tape = Tape::new();
                let bound = model.store.bind(&mut tape);
                let enc = encode_segment(&mut tape, &model, &bound, item.segment)?;
                let tf = teacher_forced(&mut tape, &model, &bound, &enc.context, &item.tokens)?;
                epoch_loss += tape.value(tf.loss_sum).item();
                epoch_tokens += tf.scored;
                let loss = tape.scale(tf.loss_sum, inv);
                tape.backward(loss)?;
                for (acc, g) in grads.iter_mut().zip(bound.grads(&tape, &model.store)) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            if let Some(max) = config.clip_norm {
                let norm = global_norm(&grads);
                if norm > max {
                    let s = max / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            adam.update(model.store.tensors_mut(), &grads, lr)?;
        }
        let train_loss = epoch_loss / epoch_tokens.max(1) as f64;
        let val_loss = evaluate_loss(&model, &vocab, &dataset.val)?;
        plateau.observe(val_loss);
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    Ok(TrainOutcome {
        config: config.clone(),
        model,
        vocab,
        adam,
        plateau,
        log,
    })
}
