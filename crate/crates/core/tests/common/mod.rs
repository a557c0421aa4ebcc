#![allow(dead_code)]

use std::sync::Arc;

use moticomp::autodiff::{grad_check, Tape, Tensor, Var};
use moticomp::exit::tendency_loss_on_tape;
use moticomp::motion::{Matrix, MotionSequence, Part};
use moticomp::params::grad_check_params;
use moticomp::predictor::{Predictor, PredictorConfig, TrainRouting};
use moticomp::train::mpjpe_loss_on_tape;
use moticomp::vae::{elbo_on_tape, reparameterize_on_tape, VaeConfig, VaeModel};
use moticomp::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_seq(rng: &mut impl Rng, rows: usize, joints: usize) -> MotionSequence {
    MotionSequence::new(random_matrix(rng, rows, 3 * joints, 100.0), 10.0, "x").unwrap()
}

/// Scalar probe `sum(weights ⊙ y)` so that no output entry cancels out.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.hadamard(y, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One `(name, input, f)` finite-difference case per tape op, drawn from
/// `seed`. Each `f` maps the input to the op output; the probe reduction
/// is applied by the caller.
fn op_cases(seed: u64) -> Vec<(&'static str, Tensor, OpFn)> {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let other_kn = random_tensor(&mut r, &[k, n], -1.0, 1.0);
    let other_mk = random_tensor(&mut r, &[m, k], -1.0, 1.0);
    let row_k = random_tensor(&mut r, &[1, k], -1.0, 1.0);
    let scalar = r.gen_range(-2.0..2.0);
    let extra = random_tensor(&mut r, &[m, 2], -1.0, 1.0);
    let idx: Arc<[usize]> = (0..k + 1).map(|_| r.gen_range(0..k)).collect::<Vec<_>>().into();
    let x = random_tensor(&mut r, &[m, k], -1.5, 1.5);
    let pos = random_tensor(&mut r, &[m, k], 0.5, 2.0);
    let sc = random_tensor(&mut r, &[1, 1], 0.5, 2.0);
    let (s0, s1) = if k > 1 { (r.gen_range(0..k - 1), k) } else { (0, 1) };

    let c = |t: &Tensor| t.clone();
    let mut cases: Vec<(&'static str, Tensor, OpFn)> = Vec::new();
    {
        let o = c(&other_kn);
        cases.push(("matmul_left", c(&x), Box::new(move |t, v| {
            let b = t.constant(o.clone())?;
            t.matmul(v, b)
        })));
    }
    {
        let o = c(&other_mk);
        cases.push(("matmul_right", random_tensor(&mut r, &[k, n], -1.0, 1.0), Box::new(move |t, v| {
            let a = t.constant(o.clone())?;
            t.matmul(a, v)
        })));
    }
    {
        let o = c(&other_mk);
        cases.push(("add", c(&x), Box::new(move |t, v| {
            let b = t.constant(o.clone())?;
            t.add(v, b)
        })));
    }
    {
        let o = c(&other_mk);
        cases.push(("sub", c(&x), Box::new(move |t, v| {
            let b = t.constant(o.clone())?;
            t.sub(b, v)
        })));
    }
    {
        let o = c(&other_mk);
        cases.push(("hadamard", c(&x), Box::new(move |t, v| {
            let b = t.constant(o.clone())?;
            t.hadamard(v, b)
        })));
    }
    cases.push(("hadamard_self", c(&x), Box::new(|t, v| t.hadamard(v, v))));
    cases.push(("scale", c(&x), Box::new(move |t, v| t.scale(v, scalar))));
    {
        let xx = c(&x);
        cases.push(("scale_by_scalar", c(&sc), Box::new(move |t, s| {
            let a = t.constant(xx.clone())?;
            t.scale_by(a, s)
        })));
    }
    {
        let s = c(&sc);
        cases.push(("scale_by_tensor", c(&x), Box::new(move |t, v| {
            let s = t.constant(s.clone())?;
            t.scale_by(v, s)
        })));
    }
    {
        let rr = c(&row_k);
        cases.push(("add_row_matrix", c(&x), Box::new(move |t, v| {
            let b = t.constant(rr.clone())?;
            t.add_row(v, b)
        })));
    }
    {
        let xx = c(&x);
        cases.push(("add_row_bias", c(&row_k), Box::new(move |t, b| {
            let a = t.constant(xx.clone())?;
            t.add_row(a, b)
        })));
    }
    cases.push(("tanh", c(&x), Box::new(|t, v| t.tanh(v))));
    cases.push(("sigmoid", c(&x), Box::new(|t, v| t.sigmoid(v))));
    cases.push(("exp", c(&x), Box::new(|t, v| t.exp(v))));
    cases.push(("sqrt", c(&pos), Box::new(|t, v| t.sqrt(v))));
    cases.push(("recip", c(&pos), Box::new(|t, v| t.recip(v))));
    cases.push(("softmax_lastdim", c(&x), Box::new(|t, v| t.softmax_lastdim(v))));
    cases.push(("mean", c(&x), Box::new(|t, v| t.mean(v))));
    cases.push(("sum", c(&x), Box::new(|t, v| t.sum(v))));
    cases.push(("sum_sq", c(&x), Box::new(|t, v| t.sum_sq(v))));
    {
        let e = c(&extra);
        cases.push(("concat_lastdim", c(&x), Box::new(move |t, v| {
            let b = t.constant(e.clone())?;
            t.concat_lastdim(&[b, v, v])
        })));
    }
    cases.push(("slice_lastdim", c(&x), Box::new(move |t, v| t.slice_lastdim(v, s0, s1))));
    {
        let idx = idx.clone();
        cases.push(("gather_cols", c(&x), Box::new(move |t, v| t.gather_cols(v, idx.clone()))));
    }
    cases.push(("transpose", c(&x), Box::new(|t, v| t.transpose(v))));
    cases.push(("reshape", c(&x), Box::new(move |t, v| t.reshape(v, &[k, m]))));
    cases.push(("composite_chain", c(&x), Box::new(move |t, v| {
        let a = t.tanh(v)?;
        let b = t.softmax_lastdim(a)?;
        let tr = t.transpose(v)?;
        let mm = t.matmul(b, tr)?;
        t.exp(mm)
    })));
    cases
}

/// Worst relative error per op over one seed.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (i, (name, x, f)) in op_cases(seed).into_iter().enumerate() {
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let yv = f(&mut t, xv).unwrap();
        let shape = t.value(yv).shape().to_vec();
        let w = random_tensor(&mut rng(seed ^ (1000 + i as u64)), &shape, -1.0, 1.0);
        let err = grad_check(
            |t, v| {
                let y = f(t, v)?;
                probe(t, y, &w)
            },
            &x,
            EPS,
        )
        .unwrap();
        out.push((name, err));
    }
    out
}

/// The straight-through op passes the upstream gradient unchanged.
pub fn straight_through_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.gen_range(2..6);
    let x = random_tensor(&mut r, &[1, d], 0.0, 1.0);
    let w = random_tensor(&mut r, &[1, d], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.param(x).unwrap();
    let h = t.straight_through(v).unwrap();
    let l = probe(&mut t, h, &w).unwrap();
    t.backward(l).unwrap();
    t.grad(v).data().iter().zip(w.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn tiny_vae(seed: u64) -> VaeModel {
    let cfg = VaeConfig {
        seq_len: 5,
        num_coeffs: 4,
        width: 6,
        hidden_dims: vec![5, 3],
        latent_dim: 2,
    };
    let mut r = rng(seed ^ 77);
    let mean = (0..24).map(|_| r.gen_range(-1.0..1.0)).collect();
    VaeModel::new(cfg, seed, mean, 0.7).unwrap()
}

/// ELBO through encoder, reparameterization and decoder, checked on every
/// scalar of every tensor.
pub fn elbo_gradient_error(seed: u64) -> f64 {
    let model = tiny_vae(seed);
    let mut r = rng(seed ^ 99);
    let x = random_tensor(&mut r, &[2, 24], -1.0, 1.0);
    let target = random_tensor(&mut r, &[2, 24], -1.0, 1.0);
    let noise = random_tensor(&mut r, &[2, 2], -1.0, 1.0);
    let kl = r.gen_range(0.1..2.0);
    let select: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().entries()[id.index()].trainable)
        .flat_map(|id| (0..model.params().get(id).numel()).map(move |i| (id, i)))
        .collect();
    grad_check_params(
        model.params(),
        |t, p| {
            let xv = t.constant(x.clone())?;
            let (mu, lv) = model.encode_on_tape(t, p, xv)?;
            let e = t.constant(noise.clone())?;
            let z = reparameterize_on_tape(t, mu, lv, e)?;
            let rec = model.decode_on_tape(t, p, z)?;
            let tg = t.constant(target.clone())?;
            elbo_on_tape(t, tg, rec, mu, lv, kl)
        },
        EPS,
        &select,
    )
    .unwrap()
}

pub fn toy_predictor_config() -> PredictorConfig {
    let parts = vec![Part::Lower, Part::Upper, Part::Upper, Part::Lower];
    PredictorConfig {
        feature_width: 4,
        heads: 2,
        policy_hidden: 3,
        key_dim: 3,
        ..PredictorConfig::desk(parts, 8, 4)
    }
}

/// Replaces every trainable tensor with small random values so that no
/// gradient path is masked by zero initialization.
pub fn randomize(model: &mut Predictor, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if !model.params().entries()[id.index()].trainable {
            continue;
        }
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
}

/// Reconstruction plus tendency loss of the J=4, N=8, T=4 model under soft
/// routing, checked on every scalar of every tensor.
pub fn predictor_gradient_error(seed: u64) -> f64 {
    let cfg = toy_predictor_config();
    let mut model = Predictor::new(cfg, seed).unwrap();
    randomize(&mut model, seed ^ 5);
    let mut r = rng(seed ^ 6);
    let hist = random_matrix(&mut r, 8, 12, 100.0);
    let gt = Tensor::from_matrix(&random_matrix(&mut r, 12, 12, 100.0));
    let w = r.gen_range(0.5..5.0);
    let select: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().entries()[id.index()].trainable)
        .flat_map(|id| (0..model.params().get(id).numel()).map(move |i| (id, i)))
        .collect();
    grad_check_params(
        model.params(),
        |t, p| {
            let out = model.forward_train(t, p, &hist, TrainRouting::Soft { temperature: 1.0 })?;
            let g = t.constant(gt.clone())?;
            let lr = mpjpe_loss_on_tape(t, out.pred, g)?;
            let soft = out.soft.expect("training forward has probabilities");
            let a = t.add(soft[0], soft[1])?;
            let tallies = t.add(a, soft[2])?;
            let lt = tendency_loss_on_tape(t, tallies, w)?;
            t.add(lr, lt)
        },
        EPS,
        &select,
    )
    .unwrap()
}
