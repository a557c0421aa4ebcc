//! Early-exit routing: per-branch policy networks, straight-through
//! Gumbel-Softmax exit selection, exit tendency statistics and the
//! analytic multiply-accumulate accounting of a routed forward pass.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Dense, ParamSet};
use crate::predictor::{BranchKind, PredictorConfig, ATTENTION_EVERY, LAYERS_PER_BLOCK};

/// Number of exits per branch.
pub const NUM_EXITS: usize = 3;

/// Mean-pooled branch features -> tanh hidden layer -> one logit per exit.
#[derive(Debug, Clone, Copy)]
pub struct PolicyNet {
    pub hidden: Dense,
    pub out: Dense,
}

impl PolicyNet {
    /// The output layer starts at zero, so every exit is equally likely
    /// until the policy has been trained.
    pub fn register(params: &mut ParamSet, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        PolicyNet {
            hidden: Dense::register(params, rng, &format!("{name}.hidden"), width, hidden),
            out: Dense::register_zero(params, &format!("{name}.out"), hidden, NUM_EXITS),
        }
    }

    /// `x` is the `n x width` encoded branch input; returns `1 x D` logits.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let n = tape.value(x).dims2()?.0;
        let pool = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64))?;
        let pooled = tape.matmul(pool, x)?;
        let h = self.hidden.forward(tape, p, pooled)?;
        let h = tape.tanh(h)?;
        self.out.forward(tape, p, h)
    }
}

/// One-hot exit choice of a single branch for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    pub b: Vec<f64>,
    pub soft: Vec<f64>,
    pub temperature: f64,
}

impl ExitDecision {
    /// Zero-based index of the selected exit.
    pub fn index(&self) -> usize {
        self.b.iter().position(|&v| v == 1.0).expect("decision is one-hot")
    }
}

/// Standard Gumbel draws `-ln(-ln u)`, `u` uniform on (0, 1).
pub fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// `soft = softmax((logits + noise) / temperature)`, `b = one_hot(argmax(soft))`.
pub fn gumbel_softmax_st(logits: &[f64], temperature: f64, noise: &[f64]) -> Result<ExitDecision> {
    check_temperature(temperature)?;
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(Error::shape(format!("{} logits with {} noise values", logits.len(), noise.len())));
    }
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
    let max = perturbed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = perturbed.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let soft: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut b = vec![0.0; logits.len()];
    b[argmax(&perturbed)] = 1.0;
    Ok(ExitDecision { b, soft, temperature })
}

/// Straight-through Gumbel-Softmax on the tape: returns `(b, soft)` where
/// `b` is one-hot in the forward pass and passes gradients to `soft`.
pub fn gumbel_softmax_st_on_tape(tape: &mut Tape, logits: Var, temperature: f64, noise: &[f64]) -> Result<(Var, Var)> {
    check_temperature(temperature)?;
    let shape = tape.value(logits).shape().to_vec();
    let g = tape.constant(Tensor::new(shape, noise.to_vec())?)?;
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature)?;
    let soft = tape.softmax_lastdim(scaled)?;
    let b = tape.straight_through(soft)?;
    Ok((b, soft))
}

/// Per-exit selection counts across every branch of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TendencyStats {
    pub counts: Vec<u64>,
    pub w_tendency: f64,
}

impl TendencyStats {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merges another tally (associative and commutative).
    pub fn merge(&mut self, other: &TendencyStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn tendency_counts(decisions: &[ExitDecision], w_tendency: f64) -> Result<TendencyStats> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::Contract("tendency_counts of an empty batch".into()))?;
    let mut counts = vec![0u64; first.b.len()];
    for d in decisions {
        if d.b.len() != counts.len() {
            return Err(Error::shape("decisions with differing exit counts"));
        }
        counts[d.index()] += 1;
    }
    Ok(TendencyStats { counts, w_tendency })
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Contract("coefficient of variation needs a positive mean".into()));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// `w_tendency * CV(counts)`.
pub fn tendency_loss(stats: &TendencyStats) -> Result<f64> {
    if stats.total() == 0 {
        return Err(Error::Contract("tendency_loss of all-zero counts".into()));
    }
    let counts: Vec<f64> = stats.counts.iter().map(|&c| c as f64).collect();
    Ok(stats.w_tendency * coefficient_of_variation(&counts)?)
}

/// `w_tendency * CV(tallies)` on the tape for a `1 x D` tally vector.
/// Training feeds the summed soft exit probabilities here so the loss is
/// differentiable; hard counts are only logged.
pub fn tendency_loss_on_tape(tape: &mut Tape, tallies: Var, w_tendency: f64) -> Result<Var> {
    let d = tape.value(tallies).numel() as f64;
    let sum = tape.sum(tallies)?;
    if !(tape.value(sum).item() > 0.0) {
        return Err(Error::Contract("tendency_loss of all-zero counts".into()));
    }
    let mean = tape.scale(sum, 1.0 / d)?;
    let shape = tape.value(tallies).shape().to_vec();
    let ones = tape.constant(Tensor::filled(&shape, 1.0))?;
    let mean_row = tape.scale_by(ones, mean)?;
    let centered = tape.sub(tallies, mean_row)?;
    let ss = tape.sum_sq(centered)?;
    let var = tape.scale(ss, 1.0 / d)?;
    let std = tape.sqrt(var)?;
    let inv = tape.recip(mean)?;
    let cv = tape.scale_by(std, inv)?;
    tape.scale(cv, w_tendency)
}

/// Multiply-accumulate counts of a routed forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Motion attention, computed once and shared by all branches.
    pub shared: u64,
    /// `per_exit[branch][d]`: cost of branch `branch` when it stops after
    /// block `d + 1`, including its encoder, policy and decoder.
    pub per_exit: [[u64; NUM_EXITS]; 3],
}

impl FlopsReport {
    /// Total for one sample with the given 1-based exits.
    pub fn total(&self, exits: [usize; 3]) -> u64 {
        self.shared
            + exits
                .iter()
                .enumerate()
                .map(|(b, &d)| self.per_exit[b][d - 1])
                .sum::<u64>()
    }

    pub fn full_depth(&self) -> u64 {
        self.total([NUM_EXITS; 3])
    }

    /// Average per-sample cost over a batch of exit choices.
    pub fn batch_average(&self, exits: &[[usize; 3]]) -> f64 {
        if exits.is_empty() {
            return self.full_depth() as f64;
        }
        exits.iter().map(|&e| self.total(e) as f64).sum::<f64>() / exits.len() as f64
    }

    /// CSV grid: one row per branch, one column per exit, then a summary
    /// row with the batch average and the percentage saved versus always
    /// running every block.
    pub fn to_csv(&self, exits: &[[usize; 3]]) -> String {
        let mut out = String::from("branch,exit1,exit2,exit3\n");
        for kind in BranchKind::ALL {
            let row = &self.per_exit[kind.index()];
            let _ = writeln!(out, "{},{},{},{}", kind.name(), row[0], row[1], row[2]);
        }
        let _ = writeln!(out, "shared,{},{},{}", self.shared, self.shared, self.shared);
        let avg = self.batch_average(exits);
        let full = self.full_depth() as f64;
        let saved = 100.0 * (1.0 - avg / full);
        let _ = writeln!(out, "summary,average={avg:.1},full={full:.0},saved_percent={saved:.3}");
        out
    }
}

fn gc_layer_macs(n: u64, f_in: u64, f_out: u64) -> u64 {
    n * n * f_in + n * f_in * f_out
}

fn attention_macs(n: u64, w: u64) -> u64 {
    // Q, K, V and output projections plus per-head scores and weighted sums
    4 * n * w * w + 2 * n * n * w
}

/// Analytic MAC count: every matrix product of the forward pass, with
/// activations, softmax and elementwise operations excluded.
pub fn count_flops(config: &PredictorConfig) -> FlopsReport {
    let e = config.coord_width() as u64;
    let l = config.seq_len() as u64;
    let f = config.num_coeffs as u64;
    let m = config.sub_len as u64;
    let k = config.key_dim as u64;
    let windows = config.num_windows() as u64;
    let w = config.feature_width as u64;
    let shared = m * e * k + windows * m * e * k + k * windows + windows * l * e + f * l * e;

    let mut per_exit = [[0u64; NUM_EXITS]; 3];
    for kind in BranchKind::ALL {
        let n = config.branch_nodes(kind) as u64;
        let fixed = n * f * w // encoder
            + n * w + w * config.policy_hidden as u64 + config.policy_hidden as u64 * NUM_EXITS as u64 // policy
            + n * w * f // decoder
            + n * f * l; // inverse DCT
        let attn_count = (LAYERS_PER_BLOCK / ATTENTION_EVERY) as u64;
        let block = LAYERS_PER_BLOCK as u64 * gc_layer_macs(n, w, w) + attn_count * attention_macs(n, w);
        for d in 0..NUM_EXITS {
            per_exit[kind.index()][d] = fixed + (d as u64 + 1) * block;
        }
    }
    FlopsReport { shared, per_exit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dominant_logit_and_ties() {
        let d = gumbel_softmax_st(&[10.0, 0.0, 0.0], 1.0, &[0.0; 3]).unwrap();
        assert_eq!(d.b, vec![1.0, 0.0, 0.0]);
        let d = gumbel_softmax_st(&[0.5, 0.5, 0.5], 1.0, &[0.0; 3]).unwrap();
        assert_eq!(d.b, vec![1.0, 0.0, 0.0]);
        assert!(gumbel_softmax_st(&[0.0; 3], 0.0, &[0.0; 3]).is_err());
        assert!(gumbel_softmax_st(&[0.0; 3], -1.0, &[0.0; 3]).is_err());
    }

    #[test]
    fn tape_and_plain_versions_agree() {
        let logits = [0.3, -1.2, 0.8];
        let noise = [0.1, 0.9, -0.4];
        let plain = gumbel_softmax_st(&logits, 0.7, &noise).unwrap();
        let mut t = Tape::new();
        let lv = t.param(Tensor::row(logits.to_vec())).unwrap();
        let (b, soft) = gumbel_softmax_st_on_tape(&mut t, lv, 0.7, &noise).unwrap();
        assert_eq!(t.value(b).data(), &plain.b[..]);
        for (a, c) in t.value(soft).data().iter().zip(&plain.soft) {
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let c = vec![1.5, -0.3, 2.2];
        let noise = vec![0.2, -0.6, 0.05];
        let logits = Tensor::row(vec![0.4, 0.1, -0.2]);
        let weighted = |t: &mut Tape, v: Var| -> Result<Var> {
            let cv = t.constant(Tensor::row(c.clone()))?;
            let p = t.hadamard(v, cv)?;
            t.sum(p)
        };
        let mut t = Tape::new();
        let lv = t.param(logits.clone()).unwrap();
        let (b, _) = gumbel_softmax_st_on_tape(&mut t, lv, 1.0, &noise).unwrap();
        let l = weighted(&mut t, b).unwrap();
        t.backward(l).unwrap();
        let st_grad = t.grad(lv);

        // finite differences of the soft path
        let eps = 1e-6;
        for i in 0..3 {
            let f = |delta: f64| {
                let mut x = logits.data().to_vec();
                x[i] += delta;
                let d = gumbel_softmax_st(&x, 1.0, &noise).unwrap();
                d.soft.iter().zip(&c).map(|(s, w)| s * w).sum::<f64>()
            };
            let numeric = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((st_grad.data()[i] - numeric).abs() < 1e-8);
        }
        let err = grad_check(
            |t, x| {
                let g = t.constant(Tensor::row(noise.clone()))?;
                let p = t.add(x, g)?;
                let s = t.softmax_lastdim(p)?;
                weighted(t, s)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn decisions_are_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let noise = sample_gumbel(&mut rng, 3);
            let d = gumbel_softmax_st(&logits, rng.gen_range(0.1..3.0), &noise).unwrap();
            assert_eq!(d.b.iter().sum::<f64>(), 1.0);
            assert!(d.b.iter().all(|&v| v == 0.0 || v == 1.0));
            let perturbed: Vec<f64> = logits.iter().zip(&noise).map(|(l, g)| l + g).collect();
            assert_eq!(d.index(), argmax(&perturbed));
        }
    }

    #[test]
    fn low_temperature_hardens() {
        let d = gumbel_softmax_st(&[0.3, 0.1, -0.4], 1e-3, &[0.05, 0.0, 0.2]).unwrap();
        for (s, b) in d.soft.iter().zip(&d.b) {
            assert!((s - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            let noise = sample_gumbel(&mut rng, 3);
            counts[gumbel_softmax_st(&[0.0; 3], 1.0, &noise).unwrap().index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    fn decision(idx: usize) -> ExitDecision {
        let mut b = vec![0.0; 3];
        b[idx] = 1.0;
        ExitDecision {
            soft: b.clone(),
            b,
            temperature: 1.0,
        }
    }

    #[test]
    fn tendency_examples() {
        let all_first: Vec<_> = (0..12).map(|_| decision(0)).collect();
        assert_eq!(tendency_counts(&all_first, 1.0).unwrap().counts, vec![12, 0, 0]);
        let balanced: Vec<_> = (0..9).map(|i| decision(i % 3)).collect();
        assert_eq!(tendency_counts(&balanced, 1.0).unwrap().counts, vec![3, 3, 3]);
        assert!(tendency_counts(&[], 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let picks: Vec<usize> = (0..57).map(|_| rng.gen_range(0..3)).collect();
        let stats = tendency_counts(&picks.iter().map(|&i| decision(i)).collect::<Vec<_>>(), 1.0).unwrap();
        for e in 0..3 {
            assert_eq!(stats.counts[e], picks.iter().filter(|&&p| p == e).count() as u64);
        }
    }

    #[test]
    fn tendency_loss_closed_forms() {
        let eq = TendencyStats { counts: vec![10, 10, 10], w_tendency: 1.0 };
        assert_eq!(tendency_loss(&eq).unwrap(), 0.0);
        let skew = TendencyStats { counts: vec![30, 0, 0], w_tendency: 1.0 };
        assert!((tendency_loss(&skew).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let zero = TendencyStats { counts: vec![0, 0, 0], w_tendency: 1.0 };
        assert!(tendency_loss(&zero).is_err());

        // mean 9, deviations (-5, 3, 2): population variance 38/3
        let stats = TendencyStats { counts: vec![4, 12, 11], w_tendency: 0.5 };
        let expected = 0.5 * (38.0f64 / 3.0).sqrt() / 9.0;
        assert!((tendency_loss(&stats).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn tendency_on_tape_matches_and_differentiates() {
        let mut t = Tape::new();
        let c = t.param(Tensor::row(vec![30.0, 0.0, 0.0])).unwrap();
        let l = tendency_loss_on_tape(&mut t, c, 1.0).unwrap();
        assert!((t.value(l).item() - 2f64.sqrt()).abs() < 1e-12);

        let mut t = Tape::new();
        let c = t.param(Tensor::row(vec![10.0, 10.0, 10.0])).unwrap();
        let l = tendency_loss_on_tape(&mut t, c, 1.0).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        t.backward(l).unwrap();
        assert!(t.grad(c).data().iter().all(|g| g.is_finite()));

        let point = Tensor::row(vec![4.0, 12.0, 11.0]);
        let err = grad_check(|t, x| tendency_loss_on_tape(t, x, 0.5), &point, 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn tendency_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let counts: Vec<u64> = (0..3).map(|_| rng.gen_range(0..6)).collect();
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            let equal = counts.iter().all(|&c| c == counts[0]);
            let loss = tendency_loss(&TendencyStats { counts, w_tendency: 1.0 }).unwrap();
            assert_eq!(loss == 0.0, equal);
        }
    }

    #[test]
    fn gc_layer_closed_form() {
        assert_eq!(gc_layer_macs(4, 8, 8), 384);
    }
}
