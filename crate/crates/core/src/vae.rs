//! Composite action generation: a VAE over DCT coefficients of atomic
//! actions, and masked fusion of two atomic actions into a composite.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dct::{dct_encode, idct_decode, DctCoeffs};
use crate::error::{Error, Result};
use crate::motion::{Matrix, MotionSequence, PartLayout};
use crate::params::{BoundParams, Dense, ParamId, ParamSet};
use crate::train::{mean_joint_error, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Sequence length N+T the coefficients were computed from.
    pub seq_len: usize,
    /// Number of retained DCT coefficients F.
    pub num_coeffs: usize,
    /// Coordinates per frame (3J).
    pub width: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl VaeConfig {
    pub fn input_dim(&self) -> usize {
        self.num_coeffs * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.num_coeffs == 0 || self.num_coeffs > self.seq_len {
            return Err(Error::Config(format!(
                "num_coeffs {} must lie in 1..={}",
                self.num_coeffs, self.seq_len
            )));
        }
        if self.width == 0 || self.width % 3 != 0 || self.latent_dim == 0 {
            return Err(Error::Config("VAE width must be a positive multiple of 3 and latent_dim positive".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer of width 0".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder MLP weights plus the frozen input normalization.
#[derive(Debug, Clone)]
pub struct VaeModel {
    config: VaeConfig,
    params: ParamSet,
    encoder: Vec<Dense>,
    head: Dense,
    decoder: Vec<Dense>,
    out: Dense,
    norm_mean: ParamId,
    norm_scale: ParamId,
}

/// Mean, log-variance and the reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
    pub noise: Vec<f64>,
}

impl VaeModel {
    /// Fresh model with fan-in uniform weights and zero biases. Inputs are
    /// normalized as `(x - norm_mean) * norm_scale` before the encoder.
    pub fn new(config: VaeConfig, seed: u64, norm_mean: Vec<f64>, norm_scale: f64) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim();
        if norm_mean.len() != d {
            return Err(Error::shape(format!("normalization mean of length {} for input {d}", norm_mean.len())));
        }
        if !(norm_scale.is_finite() && norm_scale > 0.0) {
            return Err(Error::Config(format!("normalization scale {norm_scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut encoder = Vec::new();
        let mut fan_in = d;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            encoder.push(Dense::register(&mut params, &mut rng, &format!("enc.{i}"), fan_in, h));
            fan_in = h;
        }
        let head = Dense::register(&mut params, &mut rng, "enc.head", fan_in, 2 * config.latent_dim);
        let mut decoder = Vec::new();
        let mut fan_in = config.latent_dim;
        for (i, &h) in config.hidden_dims.iter().rev().enumerate() {
            decoder.push(Dense::register(&mut params, &mut rng, &format!("dec.{i}"), fan_in, h));
            fan_in = h;
        }
        let out = Dense::register(&mut params, &mut rng, "dec.out", fan_in, d);
        let norm_mean = params.add_frozen("norm.mean", Tensor::row(norm_mean));
        let norm_scale = params.add_frozen("norm.scale", Tensor::scalar(norm_scale));
        Ok(VaeModel {
            config,
            params,
            encoder,
            head,
            decoder,
            out,
            norm_mean,
            norm_scale,
        })
    }

    /// Normalization statistics from a set of coefficient matrices: the
    /// per-feature mean and the reciprocal RMS of the centered values.
    pub fn normalization(samples: &[DctCoeffs]) -> Result<(Vec<f64>, f64)> {
        let first = samples.first().ok_or_else(|| Error::Contract("no samples for normalization".into()))?;
        let d = first.coeffs().as_slice().len();
        let mut mean = vec![0.0; d];
        for s in samples {
            if s.coeffs().as_slice().len() != d {
                return Err(Error::shape("samples of differing size"));
            }
            for (m, &v) in mean.iter_mut().zip(s.coeffs().as_slice()) {
                *m += v;
            }
        }
        let n = samples.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut ss = 0.0;
        for s in samples {
            ss += s.coeffs().as_slice().iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
        }
        let rms = (ss / (n * d as f64)).sqrt();
        Ok((mean, if rms > 1e-12 { 1.0 / rms } else { 1.0 }))
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameter id of the encoder's final (mean/log-variance) layer.
    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    pub fn decoder_out_ids(&self) -> (ParamId, ParamId) {
        (self.out.w, self.out.b)
    }

    pub fn decoder_layer_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.decoder.iter().map(|d| (d.w, d.b)).collect()
    }

    pub fn encoder_layer_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.encoder.iter().map(|d| (d.w, d.b)).collect()
    }

    fn check_coeffs(&self, a: &DctCoeffs) -> Result<()> {
        let c = a.coeffs();
        if c.rows() != self.config.num_coeffs || c.cols() != self.config.width {
            return Err(Error::shape(format!(
                "VAE expects {}x{} coefficients, got {}x{}",
                self.config.num_coeffs,
                self.config.width,
                c.rows(),
                c.cols()
            )));
        }
        Ok(())
    }

    /// Normalized `B x D` batch of flattened coefficient matrices.
    fn normalized_batch(&self, batch: &[&DctCoeffs]) -> Result<Tensor> {
        let d = self.config.input_dim();
        let mean = self.params.get(self.norm_mean).data();
        let scale = self.params.get(self.norm_scale).item();
        let mut data = Vec::with_capacity(batch.len() * d);
        for a in batch {
            self.check_coeffs(a)?;
            data.extend(a.coeffs().as_slice().iter().zip(mean).map(|(v, m)| (v - m) * scale));
        }
        Tensor::new(vec![batch.len(), d], data)
    }

    /// Encoder on the tape: `x` is a normalized `B x D` batch; returns
    /// `(mu, log_var)`, each `B x latent_dim`.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for layer in &self.encoder {
            let y = layer.forward(tape, p, h)?;
            h = tape.tanh(y)?;
        }
        let out = self.head.forward(tape, p, h)?;
        let k = self.config.latent_dim;
        Ok((tape.slice_lastdim(out, 0, k)?, tape.slice_lastdim(out, k, 2 * k)?))
    }

    /// Decoder on the tape: `z` is `B x latent_dim`; returns the
    /// de-normalized `B x D` coefficients.
    pub fn decode_on_tape(&self, tape: &mut Tape, p: &BoundParams, z: Var) -> Result<Var> {
        let mut h = z;
        for layer in &self.decoder {
            let y = layer.forward(tape, p, h)?;
            h = tape.tanh(y)?;
        }
        let out = self.out.forward(tape, p, h)?;
        let scale = self.params.get(self.norm_scale).item();
        let unscaled = tape.scale(out, 1.0 / scale)?;
        tape.add_row(unscaled, p.var(self.norm_mean))
    }

    pub fn encode(&self, a: &DctCoeffs) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        let x = tape.constant(self.normalized_batch(&[a])?)?;
        let (mu, lv) = self.encode_on_tape(&mut tape, &p, x)?;
        Ok((tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec()))
    }

    pub fn decode(&self, z: &[f64]) -> Result<DctCoeffs> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape(format!("latent of length {} for latent_dim {}", z.len(), self.config.latent_dim)));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        let zv = tape.constant(Tensor::row(z.to_vec()))?;
        let out = self.decode_on_tape(&mut tape, &p, zv)?;
        let m = Matrix::from_vec(self.config.num_coeffs, self.config.width, tape.value(out).data().to_vec())?;
        DctCoeffs::new(m, self.config.seq_len)
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        let a = dct_encode(seq.data(), self.config.num_coeffs)?;
        let (mu, _) = self.encode(&a)?;
        let rec = self.decode(&mu)?;
        MotionSequence::new(idct_decode(&rec, self.config.seq_len)?, seq.fps(), seq.label())
    }
}

pub fn reparameterize(mu: &[f64], log_var: &[f64], noise: &[f64]) -> Result<LatentSample> {
    if mu.len() != log_var.len() || mu.len() != noise.len() {
        return Err(Error::shape(format!(
            "reparameterize lengths {} / {} / {}",
            mu.len(),
            log_var.len(),
            noise.len()
        )));
    }
    let z = mu
        .iter()
        .zip(log_var)
        .zip(noise)
        .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
        .collect();
    Ok(LatentSample {
        mu: mu.to_vec(),
        log_var: log_var.to_vec(),
        z,
        noise: noise.to_vec(),
    })
}

/// `z = mu + exp(log_var / 2) * noise` on the tape; `noise` is a constant.
pub fn reparameterize_on_tape(tape: &mut Tape, mu: Var, log_var: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(log_var, 0.5)?;
    let sigma = tape.exp(half)?;
    let spread = tape.hadamard(sigma, noise)?;
    tape.add(mu, spread)
}

/// `-1/2 * sum(1 + log_var - mu^2 - exp(log_var))` over every element.
pub fn kl_on_tape(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let e = tape.exp(log_var)?;
    let se = tape.sum(e)?;
    let slv = tape.sum(log_var)?;
    let smu = tape.sum_sq(mu)?;
    let n = tape.value(mu).numel() as f64;
    let a = tape.sub(se, slv)?;
    let b = tape.add(a, smu)?;
    let c = tape.constant(Tensor::scalar(-n))?;
    let d = tape.add(b, c)?;
    tape.scale(d, 0.5)
}

/// Negative ELBO on the tape for a `B x D` batch: the mean squared error
/// over all coefficients plus `kl_weight` times the batch-mean KL.
pub fn elbo_on_tape(tape: &mut Tape, target: Var, recon: Var, mu: Var, log_var: Var, kl_weight: f64) -> Result<Var> {
    let diff = tape.sub(target, recon)?;
    let sq = tape.hadamard(diff, diff)?;
    let mse = tape.mean(sq)?;
    let batch = tape.value(mu).shape()[0] as f64;
    let kl = kl_on_tape(tape, mu, log_var)?;
    let kl = tape.scale(kl, kl_weight / batch)?;
    tape.add(mse, kl)
}

/// Value of the negative ELBO for one sample.
pub fn elbo_loss(a: &DctCoeffs, a_prime: &DctCoeffs, mu: &[f64], log_var: &[f64], kl_weight: f64) -> Result<f64> {
    if a.coeffs().rows() != a_prime.coeffs().rows() || a.coeffs().cols() != a_prime.coeffs().cols() {
        return Err(Error::shape("elbo_loss: coefficient shapes differ"));
    }
    if mu.len() != log_var.len() {
        return Err(Error::shape("elbo_loss: mu and log_var lengths differ"));
    }
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::from_matrix(a.coeffs()))?;
    let r = tape.constant(Tensor::from_matrix(a_prime.coeffs()))?;
    let m = tape.constant(Tensor::row(mu.to_vec()))?;
    let lv = tape.constant(Tensor::row(log_var.to_vec()))?;
    let l = elbo_on_tape(&mut tape, t, r, m, lv, kl_weight)?;
    Ok(tape.value(l).item())
}

/// KL(N(mu, exp(log_var)) || N(0, 1)) in closed form.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Per-coordinate binary mask: 1 takes the coordinate from the first
/// action, 0 from the second.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMask {
    m: Vec<f64>,
}

impl BodyMask {
    /// Per-joint flags, expanded to the three coordinates of each joint.
    pub fn from_joints(take_first: &[bool]) -> Self {
        BodyMask {
            m: take_first
                .iter()
                .flat_map(|&b| [if b { 1.0 } else { 0.0 }; 3])
                .collect(),
        }
    }

    /// Ones on the upper-body coordinates of `layout`.
    pub fn upper(layout: &PartLayout) -> Self {
        let mut m = vec![0.0; layout.width()];
        for &d in layout.upper_dims() {
            m[d] = 1.0;
        }
        BodyMask { m }
    }

    pub fn ones(width: usize) -> Self {
        BodyMask { m: vec![1.0; width] }
    }

    pub fn from_values(m: Vec<f64>) -> Result<Self> {
        if m.len() % 3 != 0 {
            return Err(Error::shape("mask width is not a multiple of 3"));
        }
        for joint in m.chunks_exact(3) {
            if !(joint[0] == 0.0 || joint[0] == 1.0) || joint[1] != joint[0] || joint[2] != joint[0] {
                return Err(Error::Config("mask entries must be 0/1 and shared per joint".into()));
            }
        }
        Ok(BodyMask { m })
    }

    pub fn values(&self) -> &[f64] {
        &self.m
    }

    pub fn width(&self) -> usize {
        self.m.len()
    }

    /// `M * a + (1 - M) * b`, the mask broadcast down the rows.
    pub fn blend(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows() != b.rows() || a.cols() != b.cols() || a.cols() != self.m.len() {
            return Err(Error::shape(format!(
                "mask of width {} blending {}x{} and {}x{}",
                self.m.len(),
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Matrix::from_fn(a.rows(), a.cols(), |r, c| {
            let m = self.m[c];
            m * a.get(r, c) + (1.0 - m) * b.get(r, c)
        }))
    }
}

pub fn masked_fuse(s_m: &MotionSequence, s_n: &MotionSequence, mask: &BodyMask, num_coeffs: usize) -> Result<DctCoeffs> {
    if s_m.frames() != s_n.frames() || s_m.data().cols() != s_n.data().cols() {
        return Err(Error::shape(format!(
            "fusing sequences of {}x{} and {}x{}",
            s_m.frames(),
            s_m.data().cols(),
            s_n.frames(),
            s_n.data().cols()
        )));
    }
    let a_m = dct_encode(s_m.data(), num_coeffs)?;
    let a_n = dct_encode(s_n.data(), num_coeffs)?;
    let fused = mask.blend(a_m.coeffs(), a_n.coeffs())?;
    DctCoeffs::new(fused, s_m.frames())
}

/// Fuse, encode, sample, decode and invert the DCT. `noise` of all zeros
/// gives the deterministic posterior-mean synthesis.
pub fn synthesize_composite(
    model: &VaeModel,
    s_m: &MotionSequence,
    s_n: &MotionSequence,
    mask: &BodyMask,
    noise: &[f64],
) -> Result<MotionSequence> {
    let fused = masked_fuse(s_m, s_n, mask, model.config.num_coeffs)?;
    let (mu, log_var) = model.encode(&fused)?;
    let sample = reparameterize(&mu, &log_var, noise)?;
    let coeffs = model.decode(&sample.z)?;
    let data = idct_decode(&coeffs, model.config.seq_len)?;
    MotionSequence::new(data, s_m.fps(), format!("{}+{}", s_m.label(), s_n.label()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CagTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Retained DCT coefficients; `None` keeps all N+T.
    pub num_coeffs: Option<usize>,
    pub seed: u64,
}

impl Default for CagTrainConfig {
    fn default() -> Self {
        CagTrainConfig {
            epochs: 400,
            lr: 0.0005,
            batch_size: 32,
            kl_weight: 1.0,
            latent_dim: 16,
            hidden_dims: vec![256, 256],
            num_coeffs: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CagTrainReport {
    /// Mean negative ELBO per epoch.
    pub loss_history: Vec<f64>,
}

/// Trains the VAE to reconstruct atomic sequences. The latent noise of each
/// sample is drawn from the seeded generator, so runs are reproducible.
pub fn train_cag(dataset: &[MotionSequence], config: &CagTrainConfig) -> Result<(VaeModel, CagTrainReport)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Contract("train_cag needs a non-empty dataset".into()))?;
    let (len, width) = (first.frames(), first.data().cols());
    if let Some(bad) = dataset.iter().find(|s| s.frames() != len || s.data().cols() != width) {
        return Err(Error::shape(format!(
            "dataset shapes differ: {}x{} vs {len}x{width} ({})",
            bad.frames(),
            bad.data().cols(),
            bad.label()
        )));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("batch_size must be positive and lr > 0".into()));
    }
    let num_coeffs = config.num_coeffs.unwrap_or(len);
    let coeffs: Vec<DctCoeffs> = dataset
        .iter()
        .map(|s| dct_encode(s.data(), num_coeffs))
        .collect::<Result<_>>()?;
    let (mean, scale) = VaeModel::normalization(&coeffs)?;
    let vae_config = VaeConfig {
        seq_len: len,
        num_coeffs,
        width,
        hidden_dims: config.hidden_dims.clone(),
        latent_dim: config.latent_dim,
    };
    let mut model = VaeModel::new(vae_config, config.seed, mean, scale)?;
    let mut adam = Adam::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe);
    let mut order: Vec<usize> = (0..coeffs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&DctCoeffs> = chunk.iter().map(|&i| &coeffs[i]).collect();
            let raw: Vec<f64> = batch.iter().flat_map(|a| a.coeffs().as_slice().iter().copied()).collect();
            let noise: Vec<f64> = (0..chunk.len() * config.latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();

            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape)?;
            let x = tape.constant(model.normalized_batch(&batch)?)?;
            let target = tape.constant(Tensor::new(vec![chunk.len(), model.config.input_dim()], raw)?)?;
            let (mu, lv) = model.encode_on_tape(&mut tape, &p, x)?;
            let eps = tape.constant(Tensor::new(vec![chunk.len(), config.latent_dim], noise)?)?;
            let z = reparameterize_on_tape(&mut tape, mu, lv, eps)?;
            let recon = model.decode_on_tape(&mut tape, &p, z)?;
            let loss = elbo_on_tape(&mut tape, target, recon, mu, lv, config.kl_weight)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("CAG loss diverged at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let grads = p.gradients(&tape);
            adam.step(model.params_mut(), &grads, config.lr)?;
            total += value * chunk.len() as f64;
        }
        history.push(total / coeffs.len() as f64);
    }
    Ok((model, CagTrainReport { loss_history: history }))
}

/// Mean per-joint Euclidean error (mm) of posterior-mean reconstructions,
/// averaged over every frame of every sequence.
pub fn reconstruction_mpjpe(model: &VaeModel, dataset: &[MotionSequence]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let mut total = 0.0;
    for seq in dataset {
        let rec = model.reconstruct(seq)?;
        total += mean_joint_error(rec.data(), seq.data())?;
    }
    Ok(total / dataset.len() as f64)
}
