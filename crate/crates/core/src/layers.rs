//! LSTM cell and MLP, the two reusable layers of the model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// LSTM weights. Gate blocks are stacked in the order input, forget,
/// cell-candidate, output; each block is `hidden` rows tall.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub biases: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input_weights = store.insert(format!("{prefix}.w_ih"), glorot(4 * hidden, input, rng))?;
        let recurrent_weights =
            store.insert(format!("{prefix}.w_hh"), glorot(4 * hidden, hidden, rng))?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let biases = store.insert(format!("{prefix}.b"), b)?;
        Ok(Self {
            input_weights,
            recurrent_weights,
            biases,
            input,
            hidden,
        })
    }
}

/// One LSTM step. Returns `(h, c)`.
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmParams,
    bound: &Bound,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hd = p.hidden;
    if tape.shape(x) != [p.input] {
        return Err(Error::shape("lstm_step input", tape.shape(x), &[p.input]));
    }
    if tape.shape(h_prev) != [hd] || tape.shape(c_prev) != [hd] {
        return Err(Error::shape("lstm_step state", tape.shape(h_prev), &[hd]));
    }
    let wx = tape.matvec(bound.var(p.input_weights), x)?;
    let wh = tape.matvec(bound.var(p.recurrent_weights), h_prev)?;
    let pre = tape.add(wx, wh)?;
    let pre = tape.add(pre, bound.var(p.biases))?;

    let i_pre = tape.slice(pre, 0, hd)?;
    let f_pre = tape.slice(pre, hd, hd)?;
    let g_pre = tape.slice(pre, 2 * hd, hd)?;
    let o_pre = tape.slice(pre, 3 * hd, hd)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weights: ParamId,
    pub biases: ParamId,
    pub activation: Activation,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
}

impl MlpParams {
    /// `widths` lists every layer boundary, e.g. `[in, hidden, out]`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::contract(format!(
                "mlp needs one activation per layer: widths {widths:?}, activations {}",
                activations.len()
            )));
        }
        let mut layers = Vec::new();
        for (l, (pair, &activation)) in widths.windows(2).zip(activations).enumerate() {
            let (input, output) = (pair[0], pair[1]);
            let weights = store.insert(format!("{prefix}.{l}.w"), glorot(output, input, rng))?;
            let biases = store.insert(format!("{prefix}.{l}.b"), Tensor::zeros(&[output]))?;
            layers.push(MlpLayer {
                weights,
                biases,
                activation,
                input,
                output,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }
}

/// Applies the MLP to a vector `[D]` or to each row of a matrix `[n×D]`.
pub fn mlp_forward(tape: &mut Tape, p: &MlpParams, bound: &Bound, x: Var) -> Result<Var> {
    let last = *tape.shape(x).last().unwrap_or(&0);
    if last != p.input_width() || tape.shape(x).len() > 2 {
        return Err(Error::shape("mlp_forward", tape.shape(x), &[p.input_width()]));
    }
    let mut h = x;
    for layer in &p.layers {
        let w = bound.var(layer.weights);
        let b = bound.var(layer.biases);
        let affine = if tape.shape(h).len() == 1 {
            let wx = tape.matvec(w, h)?;
            tape.add(wx, b)?
        } else {
            let wt = tape.transpose(w)?;
            let xw = tape.matmul(h, wt)?;
            tape.add_row(xw, b)?
        };
        h = match layer.activation {
            Activation::Tanh => tape.tanh(affine),
            Activation::Relu => tape.relu(affine),
            Activation::Identity => affine,
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_lstm_gives_exact_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "l", 3, 2, &mut rng).unwrap();
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::vector(vec![0.7, -2.0, 5.0]));
        let h0 = tape.constant(Tensor::zeros(&[2]));
        let c0 = tape.constant(Tensor::zeros(&[2]));
        let (h, c) = lstm_step(&mut tape, &p, &bound, x, h0, c0).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "l", 3, 2, &mut rng).unwrap();
        assert_eq!(store.get(p.biases).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    // Scalar LSTM (H = D = 1) driven by constant input, checked against a
    // hand-written recurrence.
    #[test]
    fn constant_input_matches_scalar_recurrence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(&mut store, "l", 1, 1, &mut rng).unwrap();
        let wi = [0.3, -0.2, 0.8, 0.5];
        let wh = [0.1, 0.4, -0.6, 0.2];
        let b = [0.05, 1.0, -0.1, 0.0];
        *store.get_mut(p.input_weights) = Tensor::new(vec![4, 1], wi.to_vec()).unwrap();
        *store.get_mut(p.recurrent_weights) = Tensor::new(vec![4, 1], wh.to_vec()).unwrap();
        *store.get_mut(p.biases) = Tensor::vector(b.to_vec());

        let x = 0.9;
        let (mut hs, mut cs) = (0.0f64, 0.0f64);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(Tensor::vector(vec![x]));
        let mut h = tape.constant(Tensor::zeros(&[1]));
        let mut c = tape.constant(Tensor::zeros(&[1]));
        for _ in 0..6 {
            let pre = |k: usize| wi[k] * x + wh[k] * hs + b[k];
            let (i, f, g, o) = (sigmoid(pre(0)), sigmoid(pre(1)), pre(2).tanh(), sigmoid(pre(3)));
            cs = f * cs + i * g;
            hs = o * cs.tanh();
            (h, c) = lstm_step(&mut tape, &p, &bound, xv, h, c).unwrap();
            assert!((tape.value(c).item() - cs).abs() < 1e-14);
            assert!((tape.value(h).item() - hs).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_rejects_bad_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "l", 3, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4]));
        let h0 = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            lstm_step(&mut tape, &p, &bound, x, h0, h0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identity_mlp_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = MlpParams::init(&mut store, "m", &[3, 3], &[Activation::Identity], &mut rng).unwrap();
        *store.get_mut(p.layers[0].weights) = Tensor::eye(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let y = mlp_forward(&mut tape, &p, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_tanh_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = MlpParams::init(&mut store, "m", &[3, 2], &[Activation::Tanh], &mut rng).unwrap();
        store.get_mut(p.layers[0].weights).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap());
        let y = mlp_forward(&mut tape, &p, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = MlpParams::init(&mut store, "m", &[3, 2], &[Activation::Tanh], &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4]));
        assert!(mlp_forward(&mut tape, &p, &bound, x).is_err());
    }
}
