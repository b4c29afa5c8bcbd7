//! Backward pass against central finite differences, op by op and
//! through the composed modules.

mod common;

use common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sinet_core::captioner::forward_teacher_forced;
use sinet_core::gradcheck::{check, DEFAULT_STEP};
use sinet_core::interaction::{interaction_sequence, InteractionConfig, InteractionParams};
use sinet_core::layers::{lstm_step, LstmParams};
use sinet_core::params::{Bound, ParamStore};
use sinet_core::tape::{Tape, Var};
use sinet_core::{Result, Tensor};

const TOL: f64 = 1e-5;
const TRIALS: u64 = 100;

/// Weighted sum `Σ out ⊙ R` with a fixed random `R`, so that ops with a
/// constant plain sum (softmax) still receive informative gradients.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(&mut rng(seed), tape.shape(out), 1.0);
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn check_op<F>(name: &str, shapes: &[Vec<usize>], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for trial in 0..TRIALS {
        let mut r = rng(trial);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.insert(format!("x{i}"), rand_tensor(&mut r, s, 1.0)).unwrap())
            .collect();
        let report = check(&store, DEFAULT_STEP, |tape: &mut Tape, b: &Bound| {
            let xs: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
            let out = op(tape, &xs)?;
            project(tape, out, 1000 + trial)
        })
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} trial {trial}: {:?}",
            report.worst
        );
    }
}

fn s(dims: &[usize]) -> Vec<usize> {
    dims.to_vec()
}

#[test]
fn matmul_family() {
    check_op("matmul", &[s(&[3, 4]), s(&[4, 2])], |t, x| t.matmul(x[0], x[1]));
    check_op("matvec", &[s(&[3, 4]), s(&[4])], |t, x| t.matvec(x[0], x[1]));
    check_op("vecmat", &[s(&[3]), s(&[3, 2])], |t, x| t.vecmat(x[0], x[1]));
    check_op("transpose", &[s(&[2, 3])], |t, x| t.transpose(x[0]));
    check_op("reshape", &[s(&[2, 3])], |t, x| t.reshape(x[0], &[3, 2]));
}

#[test]
fn elementwise() {
    check_op("add", &[s(&[2, 3]), s(&[2, 3])], |t, x| t.add(x[0], x[1]));
    check_op("sub", &[s(&[4]), s(&[4])], |t, x| t.sub(x[0], x[1]));
    check_op("mul", &[s(&[2, 3]), s(&[2, 3])], |t, x| t.mul(x[0], x[1]));
    check_op("scale", &[s(&[5])], |t, x| Ok(t.scale(x[0], -1.7)));
    check_op("add_row", &[s(&[3, 2]), s(&[2])], |t, x| t.add_row(x[0], x[1]));
    check_op("sigmoid", &[s(&[6])], |t, x| Ok(t.sigmoid(x[0])));
    check_op("tanh", &[s(&[6])], |t, x| Ok(t.tanh(x[0])));
    check_op("sum", &[s(&[2, 2])], |t, x| {
        let v = t.sum(x[0]);
        t.reshape(v, &[1])
    });
}

#[test]
fn relu_away_from_kink() {
    // Inputs shifted so no entry lies within the difference step of zero.
    check_op("relu", &[s(&[8])], |t, x| {
        let shift = t.constant(Tensor::vector(vec![0.3, -0.3, 0.3, -0.3, 0.3, -0.3, 0.3, -0.3]));
        let sq = t.mul(x[0], x[0])?;
        let signed = t.mul(sq, shift)?;
        let moved = t.add(signed, shift)?;
        Ok(t.relu(moved))
    });
}

#[test]
fn softmax_both_axes() {
    check_op("softmax vec", &[s(&[5])], |t, x| t.softmax(x[0], 0));
    check_op("softmax rows", &[s(&[3, 4])], |t, x| t.softmax(x[0], 1));
    check_op("softmax cols", &[s(&[3, 4])], |t, x| t.softmax(x[0], 0));
    check_op("cross_entropy", &[s(&[6])], |t, x| {
        let l = t.cross_entropy(x[0], 4)?;
        t.reshape(l, &[1])
    });
}

#[test]
fn structural() {
    check_op("concat", &[s(&[2]), s(&[3])], |t, x| t.concat(&[x[0], x[1], x[0]]));
    check_op("slice", &[s(&[6])], |t, x| t.slice(x[0], 2, 3));
    check_op("mean_rows", &[s(&[4, 3])], |t, x| t.mean_rows(x[0]));
    check_op("stack_rows", &[s(&[3]), s(&[3])], |t, x| t.stack_rows(&[x[0], x[1], x[0]]));
    check_op("select_row", &[s(&[3, 2])], |t, x| t.select_row(x[0], 1));
    check_op("column", &[s(&[3, 4])], |t, x| t.column(x[0], 2));
}

#[test]
fn lstm_sum_of_hidden() {
    for trial in 0..20 {
        let mut r = rng(trial);
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "lstm", 3, 4, &mut r).unwrap();
        randomize(&mut store, &mut r, 0.8);
        let x = rand_tensor(&mut r, &[3], 1.0);
        let h0 = rand_tensor(&mut r, &[4], 1.0);
        let c0 = rand_tensor(&mut r, &[4], 1.0);
        let report = check(&store, DEFAULT_STEP, |t: &mut Tape, b: &Bound| {
            let (x, h, c) = (t.constant(x.clone()), t.constant(h0.clone()), t.constant(c0.clone()));
            let (h1, c1) = lstm_step(t, &p, b, x, h, c)?;
            let (h2, _) = lstm_step(t, &p, b, x, h1, c1)?;
            Ok(t.sum(h2))
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{:?}", report.worst);
    }
}

fn frames(t: &mut Tape, r: &mut ChaCha8Rng, counts: &[usize], d_img: usize, d_obj: usize) -> Vec<(Var, Var)> {
    counts
        .iter()
        .map(|&n| {
            let o = t.constant(rand_tensor(r, &[n, d_obj], 1.0));
            let v = t.constant(rand_tensor(r, &[d_img], 1.0));
            (o, v)
        })
        .collect()
}

#[test]
fn interaction_loss_on_last_state() {
    let cfg = InteractionConfig {
        d_img: 5,
        d_obj: 4,
        groups: 2,
        d_theta: 4,
        hidden: 4,
        ..Default::default()
    };
    for trial in 0..10 {
        let mut r = rng(trial);
        let mut store = ParamStore::new();
        let p = InteractionParams::init(&mut store, &cfg, &mut r).unwrap();
        randomize(&mut store, &mut r, 0.8);
        let feature_seed = r.gen::<u64>();
        let report = check(&store, DEFAULT_STEP, |t: &mut Tape, b: &Bound| {
            let fr = frames(t, &mut rng(feature_seed), &[3, 1, 2], 5, 4);
            let seq = interaction_sequence(t, &p, b, &fr)?;
            project(t, *seq.hidden.last().unwrap(), trial)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{:?}", report.worst);
    }
}

#[test]
fn captioner_loss_all_modes() {
    for mode in sinet_core::Mode::ALL {
        let model = random_model(tiny_config(6).with_mode(mode), 11, 0.5);
        let seg = random_segment(&mut rng(3), &[3, 3], 5, 4);
        let tokens = [1, 4, 5, 3, 2];
        let report = check(&model.store, DEFAULT_STEP, |t: &mut Tape, b: &Bound| {
            Ok(forward_teacher_forced(t, &model, b, &seg, &tokens)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{mode:?}: {:?}", report.worst);
    }
}
