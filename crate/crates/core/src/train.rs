//! Losses, the Adam optimizer, the predictor training loop and horizon-wise
//! evaluation against the zero-velocity baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exit::{count_flops, sample_gumbel, tendency_loss, tendency_loss_on_tape, TendencyStats, NUM_EXITS};
use crate::motion::{Matrix, MotionSequence};
use crate::params::{add_grads, zero_grads, ParamId, ParamSet};
use crate::predictor::{pad_last_frame, BranchKind, ExitChoice, Predictor, TrainRouting};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            lr_scale: vec![1.0; params.len()],
            t: 0,
        }
    }

    /// Multiplies the learning rate of one tensor.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.v[id.index()]
    }

    /// One update of every trainable tensor. A non-finite gradient aborts
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} tensors", grads.len(), params.len())));
        }
        for (entry, g) in params.entries().iter().zip(grads) {
            if g.shape() != entry.tensor.shape() {
                return Err(Error::shape(format!("gradient of {} has shape {:?}", entry.name, g.shape())));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {} is {bad}", entry.name)));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let i = id.index();
            if !params.entries()[i].trainable {
                continue;
            }
            let step = lr * self.lr_scale[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = params.get_mut(id).data_mut();
            for (((x, &g), mi), vi) in data.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= step * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_same(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() || a.cols() % 3 != 0 {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{} joint matrices",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn joint_distance(a: &[f64], b: &[f64], j: usize) -> f64 {
    let s = 3 * j;
    ((a[s] - b[s]).powi(2) + (a[s + 1] - b[s + 1]).powi(2) + (a[s + 2] - b[s + 2]).powi(2)).sqrt()
}

/// Mean Euclidean per-joint distance over every frame.
pub fn mean_joint_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same(a, b)?;
    let joints = a.cols() / 3;
    let mut total = 0.0;
    for r in 0..a.rows() {
        for j in 0..joints {
            total += joint_distance(a.row(r), b.row(r), j);
        }
    }
    Ok(total / (a.rows() * joints) as f64)
}

/// Mean over joints and frames of the squared per-joint distance.
pub fn mpjpe_loss(pred: &Matrix, gt: &Matrix) -> Result<f64> {
    check_same(pred, gt)?;
    let ss: f64 = pred.as_slice().iter().zip(gt.as_slice()).map(|(p, g)| (p - g).powi(2)).sum();
    Ok(ss / (pred.rows() * pred.cols() / 3) as f64)
}

pub fn mpjpe_loss_on_tape(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let (rows, cols) = tape.value(pred).dims2()?;
    let d = tape.sub(pred, gt)?;
    let ss = tape.sum_sq(d)?;
    tape.scale(ss, 3.0 / (rows * cols) as f64)
}

/// Mean joint distance (mm) at future frame `horizon_frame` (0-based) of
/// two `T x 3J` forecasts.
pub fn mpjpe_metric(pred: &Matrix, gt: &Matrix, horizon_frame: usize) -> Result<f64> {
    check_same(pred, gt)?;
    if horizon_frame >= pred.rows() {
        return Err(Error::range(format!("horizon {horizon_frame} of a {}-frame forecast", pred.rows())));
    }
    let joints = pred.cols() / 3;
    let total: f64 = (0..joints).map(|j| joint_distance(pred.row(horizon_frame), gt.row(horizon_frame), j)).sum();
    Ok(total / joints as f64)
}

/// Reconstruction loss plus the tendency loss during the constraint phase.
pub fn total_loss(pred: &Matrix, gt: &Matrix, stats: &TendencyStats, in_constraint_phase: bool) -> Result<f64> {
    let lr = mpjpe_loss(pred, gt)?;
    if in_constraint_phase {
        Ok(lr + tendency_loss(stats)?)
    } else {
        Ok(lr)
    }
}

/// History followed by `t` copies of its last frame.
pub fn zero_velocity_baseline(history: &MotionSequence, t: usize) -> MotionSequence {
    let data = pad_last_frame(history.data(), t);
    MotionSequence::new(data, history.fps(), history.label()).expect("padding keeps a valid sequence")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub constrain_epochs: usize,
    pub w_tendency: f64,
    pub input_frames: usize,
    pub output_frames: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Learning-rate multiplier for the policy networks.
    pub policy_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            lr_decay_per_epoch: 0.96,
            batch_size: 32,
            epochs: 50,
            constrain_epochs: 20,
            w_tendency: 100.0,
            input_frames: 20,
            output_frames: 10,
            seed: 0,
            temperature: 1.0,
            policy_lr_scale: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(format!("lr decay {} outside (0, 1]", self.lr_decay_per_epoch)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.constrain_epochs > self.epochs {
            return Err(Error::Config(format!(
                "constrain_epochs {} exceeds epochs {}",
                self.constrain_epochs, self.epochs
            )));
        }
        if !(self.temperature > 0.0) || !(self.w_tendency >= 0.0) || !(self.policy_lr_scale > 0.0) {
            return Err(Error::Config("temperature and policy_lr_scale must be positive, w_tendency non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `k` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for _ in 0..epoch {
            lr *= self.lr_decay_per_epoch;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean reconstruction loss.
    pub recon_loss: f64,
    /// Batch-weighted mean tendency loss (0 outside the constraint phase).
    pub tendency_loss: f64,
    /// Mean future-frame error on the validation split.
    pub val_mpjpe: f64,
    /// Hard exit selections per branch (Upper, Lower, Whole).
    pub exit_counts: [[u64; NUM_EXITS]; 3],
}

impl EpochRecord {
    pub fn exit_totals(&self) -> [u64; NUM_EXITS] {
        let mut out = [0; NUM_EXITS];
        for row in &self.exit_counts {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }

    /// Fraction of all selections that went to each exit.
    pub fn exit_shares(&self) -> [f64; NUM_EXITS] {
        let t = self.exit_totals();
        let total: u64 = t.iter().sum();
        t.map(|c| c as f64 / total.max(1) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Predictor,
    /// Lowest validation error seen, including the initial model.
    pub best: Predictor,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,recon_loss,tendency_loss,val_mpjpe,exit1,exit2,exit3\n");
    for r in history {
        let t = r.exit_totals();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.recon_loss, r.tendency_loss, r.val_mpjpe, t[0], t[1], t[2]
        );
    }
    out
}

fn check_split(set: &[MotionSequence], model: &Predictor, what: &str) -> Result<()> {
    let cfg = model.config();
    if let Some(bad) = set.iter().find(|s| s.frames() < cfg.seq_len() || s.data().cols() != cfg.coord_width()) {
        return Err(Error::shape(format!(
            "{what} sequence {} is {}x{}, model needs at least {}x{}",
            bad.label(),
            bad.frames(),
            bad.data().cols(),
            cfg.seq_len(),
            cfg.coord_width()
        )));
    }
    Ok(())
}

/// Observed prefix and full ground truth of a sequence.
fn split_sample(seq: &MotionSequence, n: usize, t: usize) -> (Matrix, Matrix) {
    (seq.data().slice_rows(0, n), seq.data().slice_rows(0, n + t))
}

/// Mean over sequences and future frames of the per-frame metric, with
/// deterministic routing.
pub fn validation_error(model: &Predictor, set: &[MotionSequence]) -> Result<f64> {
    let cfg = model.config();
    let (n, t) = (cfg.input_frames, cfg.output_frames);
    let mut total = 0.0;
    for seq in set {
        let (hist, gt) = split_sample(seq, n, t);
        let hist = MotionSequence::new(hist, seq.fps(), seq.label())?;
        let (pred, _) = model.predict(&hist, ExitChoice::Policy)?;
        let p = pred.data().slice_rows(n, n + t);
        let g = gt.slice_rows(n, n + t);
        for h in 0..t {
            total += mpjpe_metric(&p, &g, h)?;
        }
    }
    Ok(total / (set.len() * t) as f64)
}

/// Trains the predictor with straight-through Gumbel-Softmax routing.
///
/// The tendency loss depends on the soft tallies of the whole batch, so
/// each batch runs in two passes: a cheap policy-only pass fixes the
/// tallies and their gradient, then every sample is differentiated on its
/// own tape with that gradient injected at its exit probabilities.
pub fn train_predictor(
    model: Predictor,
    train_set: &[MotionSequence],
    val_set: &[MotionSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("train_predictor needs a non-empty training set".into()));
    }
    let (n, t) = (model.config().input_frames, model.config().output_frames);
    if (n, t) != (config.input_frames, config.output_frames) {
        return Err(Error::Config(format!(
            "model frames {n}+{t} differ from training frames {}+{}",
            config.input_frames, config.output_frames
        )));
    }
    check_split(train_set, &model, "training")?;
    check_split(val_set, &model, "validation")?;

    let mut model = model;
    let mut adam = Adam::new(model.params());
    for id in model.policy_ids() {
        adam.set_lr_scale(id, config.policy_lr_scale);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples: Vec<(Matrix, Tensor)> = train_set
        .iter()
        .map(|s| {
            let (h, g) = split_sample(s, n, t);
            (h, Tensor::from_matrix(&g))
        })
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_val = if val_set.is_empty() { f64::INFINITY } else { validation_error(&model, val_set)? };
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let constrained = epoch < config.constrain_epochs && config.w_tendency > 0.0;
        order.shuffle(&mut rng);
        let mut recon_total = 0.0;
        let mut tendency_total = 0.0;
        let mut counts = [[0u64; NUM_EXITS]; 3];
        let batches = order.chunks(config.batch_size).count();

        for chunk in order.chunks(config.batch_size) {
            let bsz = chunk.len() as f64;
            let noise: Vec<[[f64; NUM_EXITS]; 3]> = chunk
                .iter()
                .map(|_| {
                    let mut g = [[0.0; NUM_EXITS]; 3];
                    for row in g.iter_mut() {
                        row.copy_from_slice(&sample_gumbel(&mut rng, NUM_EXITS));
                    }
                    g
                })
                .collect();
            let routing = |i: usize| TrainRouting::Hard {
                noise: noise[i],
                temperature: config.temperature,
            };

            // pass 1: soft tallies of the batch and the tendency gradient
            let mut tally_seed = vec![0.0; NUM_EXITS];
            if constrained {
                let mut tallies = vec![0.0; NUM_EXITS];
                for (i, &s) in chunk.iter().enumerate() {
                    let mut tape = Tape::new();
                    let p = model.params().bind(&mut tape)?;
                    for soft in model.policy_probs(&mut tape, &p, &samples[s].0, routing(i))? {
                        for (acc, v) in tallies.iter_mut().zip(tape.value(soft).data()) {
                            *acc += v;
                        }
                    }
                }
                let mut tape = Tape::new();
                let c = tape.param(Tensor::row(tallies))?;
                let lt = tendency_loss_on_tape(&mut tape, c, config.w_tendency)?;
                tendency_total += tape.value(lt).item();
                tape.backward(lt)?;
                tally_seed = tape.grad(c).into_data();
            }

            // pass 2: per-sample reconstruction gradients
            let mut grads = zero_grads(model.params());
            for (i, &s) in chunk.iter().enumerate() {
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape)?;
                let out = model.forward_train(&mut tape, &p, &samples[s].0, routing(i))?;
                for kind in BranchKind::ALL {
                    counts[kind.index()][out.exits[kind.index()] - 1] += 1;
                }
                let gt = tape.constant(samples[s].1.clone())?;
                let l = mpjpe_loss_on_tape(&mut tape, out.pred, gt)?;
                let value = tape.value(l).item();
                recon_total += value;
                let l = tape.scale(l, 1.0 / bsz)?;
                let softs = out.soft.expect("training forward returns probabilities");
                let seeds: Vec<(Var, &[f64])> = if constrained {
                    softs.iter().map(|&v| (v, &tally_seed[..])).collect()
                } else {
                    Vec::new()
                };
                tape.backward_seeded(Some(l), &seeds)?;
                add_grads(&mut grads, &p.gradients(&tape));
            }
            adam.step(model.params_mut(), &grads, lr)?;
        }
        if !recon_total.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        let val_mpjpe = if val_set.is_empty() { f64::NAN } else { validation_error(&model, val_set)? };
        if val_mpjpe < best_val {
            best_val = val_mpjpe;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        history.push(EpochRecord {
            epoch,
            lr,
            recon_loss: recon_total / samples.len() as f64,
            tendency_loss: tendency_total / batches as f64,
            val_mpjpe,
            exit_counts: counts,
        });
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: String,
    pub samples: usize,
    pub model: Vec<f64>,
    pub baseline: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub average_macs: f64,
    pub full_depth_macs: u64,
    pub saved_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// 1-based future-frame numbers.
    pub horizons: Vec<usize>,
    pub fps: f64,
    /// Sorted by action label.
    pub actions: Vec<ActionRow>,
    pub overall_model: Vec<f64>,
    pub overall_baseline: Vec<f64>,
    pub composite: Option<ActionRow>,
    pub atomic: Option<ActionRow>,
    /// Selections per exit summed over branches.
    pub exit_totals: [u64; NUM_EXITS],
    pub flops: FlopsSummary,
}

fn horizon_ms(h: usize, fps: f64) -> f64 {
    h as f64 * 1000.0 / fps
}

fn fmt_row(out: &mut String, action: &str, method: &str, samples: usize, values: &[f64]) {
    let _ = write!(out, "{action},{method},{samples}");
    for v in values {
        let _ = write!(out, ",{v:.6}");
    }
    out.push('\n');
}

impl EvalReport {
    /// Column name of a horizon, e.g. `f1_100ms`.
    pub fn horizon_label(&self, h: usize) -> String {
        format!("f{h}_{}ms", horizon_ms(h, self.fps).round())
    }

    /// Action x horizon grid with model, baseline and delta rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,method,samples");
        for &h in &self.horizons {
            let _ = write!(out, ",{}", self.horizon_label(h));
        }
        out.push('\n');
        let mut rows: Vec<&ActionRow> = self.actions.iter().collect();
        rows.extend(self.composite.iter());
        rows.extend(self.atomic.iter());
        let total = self.actions.iter().map(|a| a.samples).sum();
        let overall = ActionRow {
            action: "overall".into(),
            samples: total,
            model: self.overall_model.clone(),
            baseline: self.overall_baseline.clone(),
        };
        rows.push(&overall);
        for row in rows {
            let delta: Vec<f64> = row.model.iter().zip(&row.baseline).map(|(m, b)| m - b).collect();
            fmt_row(&mut out, &row.action, "model", row.samples, &row.model);
            fmt_row(&mut out, &row.action, "zero_velocity", row.samples, &row.baseline);
            fmt_row(&mut out, &row.action, "delta", row.samples, &delta);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mean per-joint position error (mm), {} sequences", self.actions.iter().map(|a| a.samples).sum::<usize>());
        let _ = write!(out, "{:<16}", "horizon");
        for &h in &self.horizons {
            let _ = write!(out, "{:>10}", format!("{}ms", horizon_ms(h, self.fps).round()));
        }
        out.push('\n');
        let mut line = |name: &str, values: &[f64]| {
            let _ = write!(out, "{name:<16}");
            for v in values {
                let _ = write!(out, "{v:>10.2}");
            }
            out.push('\n');
        };
        line("model", &self.overall_model);
        line("zero-velocity", &self.overall_baseline);
        if let Some(c) = &self.composite {
            line("composite", &c.model);
        }
        if let Some(a) = &self.atomic {
            line("atomic", &a.model);
        }
        let _ = writeln!(
            out,
            "exits {:?}; average MACs {:.0} of {} ({:.2}% saved)",
            self.exit_totals, self.flops.average_macs, self.flops.full_depth_macs, self.flops.saved_percent
        );
        out
    }
}

#[derive(Default)]
struct Accum {
    samples: usize,
    model: Vec<f64>,
    baseline: Vec<f64>,
}

impl Accum {
    fn add(&mut self, model: &[f64], baseline: &[f64]) {
        if self.model.is_empty() {
            self.model = vec![0.0; model.len()];
            self.baseline = vec![0.0; model.len()];
        }
        self.samples += 1;
        self.model.iter_mut().zip(model).for_each(|(a, v)| *a += v);
        self.baseline.iter_mut().zip(baseline).for_each(|(a, v)| *a += v);
    }

    fn row(&self, action: &str) -> ActionRow {
        let k = self.samples as f64;
        ActionRow {
            action: action.to_string(),
            samples: self.samples,
            model: self.model.iter().map(|v| v / k).collect(),
            baseline: self.baseline.iter().map(|v| v / k).collect(),
        }
    }
}

/// Deterministic evaluation at 1-based future frames `horizons`.
pub fn evaluate(model: &Predictor, test_set: &[MotionSequence], horizons: &[usize]) -> Result<EvalReport> {
    let cfg = model.config();
    let (n, t) = (cfg.input_frames, cfg.output_frames);
    if test_set.is_empty() {
        return Err(Error::Contract("evaluate needs a non-empty test set".into()));
    }
    if horizons.is_empty() || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::range("horizons must be non-empty and strictly increasing"));
    }
    if let Some(&bad) = horizons.iter().find(|&&h| h == 0 || h > t) {
        return Err(Error::range(format!("horizon {bad} outside 1..={t}")));
    }
    check_split(test_set, model, "test")?;

    let mut per_action: BTreeMap<String, Accum> = BTreeMap::new();
    let mut composite = Accum::default();
    let mut atomic = Accum::default();
    let mut overall = Accum::default();
    let mut exits = Vec::with_capacity(test_set.len());
    for seq in test_set {
        let (hist, gt) = split_sample(seq, n, t);
        let hist = MotionSequence::new(hist, seq.fps(), seq.label())?;
        let (pred, e) = model.predict(&hist, ExitChoice::Policy)?;
        exits.push(e);
        let base = zero_velocity_baseline(&hist, t);
        let gt_f = gt.slice_rows(n, n + t);
        let p_f = pred.data().slice_rows(n, n + t);
        let b_f = base.data().slice_rows(n, n + t);
        let m: Vec<f64> = horizons.iter().map(|&h| mpjpe_metric(&p_f, &gt_f, h - 1)).collect::<Result<_>>()?;
        let b: Vec<f64> = horizons.iter().map(|&h| mpjpe_metric(&b_f, &gt_f, h - 1)).collect::<Result<_>>()?;
        per_action.entry(seq.label().to_string()).or_default().add(&m, &b);
        if seq.label().contains('+') {
            composite.add(&m, &b);
        } else {
            atomic.add(&m, &b);
        }
        overall.add(&m, &b);
    }
    let mut exit_totals = [0u64; NUM_EXITS];
    for e in &exits {
        for &d in e {
            exit_totals[d - 1] += 1;
        }
    }
    let report = count_flops(cfg);
    let average_macs = report.batch_average(&exits);
    let full = report.full_depth();
    let overall = overall.row("overall");
    Ok(EvalReport {
        horizons: horizons.to_vec(),
        fps: test_set[0].fps(),
        actions: per_action.iter().map(|(k, a)| a.row(k)).collect(),
        overall_model: overall.model,
        overall_baseline: overall.baseline,
        composite: (composite.samples > 0).then(|| composite.row("composite")),
        atomic: (atomic.samples > 0).then(|| atomic.row("atomic")),
        exit_totals,
        flops: FlopsSummary {
            average_macs,
            full_depth_macs: full,
            saved_percent: 100.0 * (1.0 - average_macs / full as f64),
        },
    })
}
