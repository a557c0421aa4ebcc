//! Three-branch compositional graph-convolutional predictor.
//!
//! Graph nodes are coordinates: a branch over `n` coordinates sees an
//! `n x F` matrix holding the DCT coefficients of each coordinate's
//! trajectory. The Upper and Lower branches cover their part's coordinates
//! and the Whole branch covers all of them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::dct::{dct_matrix, DctCoeffs};
use crate::error::{Error, Result};
use crate::exit::{gumbel_softmax_st_on_tape, PolicyNet, NUM_EXITS};
use crate::motion::{Matrix, MotionSequence, Part, PartLayout};
use crate::params::{fan_in_uniform, uniform, BoundParams, Dense, ParamId, ParamSet};

pub const LAYERS_PER_BLOCK: usize = 8;
/// A self-attention module follows every `ATTENTION_EVERY` gc layers.
pub const ATTENTION_EVERY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    Upper,
    Lower,
    Whole,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Upper, BranchKind::Lower, BranchKind::Whole];

    pub fn index(self) -> usize {
        match self {
            BranchKind::Upper => 0,
            BranchKind::Lower => 1,
            BranchKind::Whole => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Upper => "upper",
            BranchKind::Lower => "lower",
            BranchKind::Whole => "whole",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    /// Body part of every joint, in joint order.
    pub parts: Vec<Part>,
    pub input_frames: usize,
    pub output_frames: usize,
    pub num_coeffs: usize,
    pub feature_width: usize,
    pub heads: usize,
    pub policy_hidden: usize,
    pub sub_len: usize,
    pub key_dim: usize,
    /// Branch inputs are multiplied by this factor and decoder outputs by
    /// its inverse, keeping the tanh stack in its responsive range.
    pub coord_scale: f64,
    /// Adds each block's input to its output.
    pub block_residual: bool,
}

impl PredictorConfig {
    /// Desk-scale model for the given skeleton and frame counts.
    pub fn desk(parts: Vec<Part>, input_frames: usize, output_frames: usize) -> Self {
        PredictorConfig {
            parts,
            input_frames,
            output_frames,
            num_coeffs: input_frames + output_frames,
            feature_width: 32,
            heads: 2,
            policy_hidden: 16,
            sub_len: (input_frames / 2).min(10),
            key_dim: 16,
            coord_scale: 1e-3,
            block_residual: true,
        }
    }

    /// Full-width variant with 128 features per node.
    pub fn full(parts: Vec<Part>, input_frames: usize, output_frames: usize) -> Self {
        PredictorConfig {
            feature_width: 128,
            heads: 8,
            policy_hidden: 64,
            key_dim: 64,
            ..PredictorConfig::desk(parts, input_frames, output_frames)
        }
    }

    pub fn layout(&self) -> PartLayout {
        PartLayout::from_parts(&self.parts)
    }

    /// Coordinates per frame (3J).
    pub fn coord_width(&self) -> usize {
        3 * self.parts.len()
    }

    pub fn seq_len(&self) -> usize {
        self.input_frames + self.output_frames
    }

    pub fn num_windows(&self) -> usize {
        self.input_frames - self.sub_len
    }

    pub fn branch_nodes(&self, kind: BranchKind) -> usize {
        let layout = self.layout();
        match kind {
            BranchKind::Upper => layout.upper_size(),
            BranchKind::Lower => layout.lower_size(),
            BranchKind::Whole => layout.width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout();
        if layout.upper_size() == 0 || layout.lower_size() == 0 {
            return Err(Error::Config("skeleton needs both upper and lower joints".into()));
        }
        if self.heads == 0 || self.feature_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature width {} is not divisible by {} heads",
                self.feature_width, self.heads
            )));
        }
        if self.output_frames == 0 || self.sub_len == 0 || self.key_dim == 0 || self.policy_hidden == 0 {
            return Err(Error::Config("frame counts and layer sizes must be positive".into()));
        }
        if self.input_frames < 2 * self.sub_len {
            return Err(Error::range(format!(
                "{} input frames cannot hold two sub-sequences of {}",
                self.input_frames, self.sub_len
            )));
        }
        if self.num_coeffs == 0 || self.num_coeffs > self.seq_len() {
            return Err(Error::range(format!(
                "{} coefficients for {} frames",
                self.num_coeffs,
                self.seq_len()
            )));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err(Error::Config("coord_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One graph-convolution layer `tanh(A H W)`.
#[derive(Debug, Clone, Copy)]
pub struct GcLayer {
    pub adjacency: ParamId,
    pub weight: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct SgcBlock {
    pub layers: Vec<GcLayer>,
    /// One module after layer 4 and one after layer 8.
    pub attention: Vec<AttentionParams>,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub kind: BranchKind,
    pub nodes: usize,
    /// Coordinate indices covered by the branch.
    pub dims: Arc<[usize]>,
    pub encoder: Dense,
    pub blocks: Vec<SgcBlock>,
    pub decoder: Dense,
    pub policy: PolicyNet,
}

#[derive(Debug, Clone, Copy)]
pub struct MotionAttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
}

/// How each branch picks its exit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitChoice {
    /// Deterministic argmax of the policy logits.
    Policy,
    /// 1-based exit per branch (Upper, Lower, Whole).
    Fixed([usize; 3]),
}

/// Exit routing while training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainRouting {
    /// Straight-through Gumbel-Softmax with the given noise per branch.
    Hard { noise: [[f64; NUM_EXITS]; 3], temperature: f64 },
    /// Every exit weighted by its softmax probability; fully differentiable.
    Soft { temperature: f64 },
}

#[derive(Debug, Clone)]
pub struct MotionAttentionOut {
    /// `F x 3J` branch input features.
    pub features: Var,
    /// `1 x windows` attention weights.
    pub weights: Var,
    /// History followed by the last observed frame repeated T times.
    pub padded: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `(N+T) x 3J` full reconstruction.
    pub pred: Var,
    /// 1-based exit per branch used in the forward pass (the hard choice
    /// when training with soft routing).
    pub exits: [usize; 3],
    /// `1 x D` policy logits per branch.
    pub logits: [Var; 3],
    /// `1 x D` exit probabilities per branch (training only).
    pub soft: Option<[Var; 3]>,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    config: PredictorConfig,
    params: ParamSet,
    motion: MotionAttentionParams,
    branches: Vec<Branch>,
    fusion: ParamId,
    dct_f: Tensor,
    idct_f: Tensor,
    merge: Arc<[usize]>,
}

fn register_gc(params: &mut ParamSet, rng: &mut impl Rng, name: &str, n: usize, w: usize) -> GcLayer {
    let mut adj = uniform(rng, -0.05, 0.05, &[n, n]);
    for i in 0..n {
        adj.data_mut()[i * n + i] += 1.0;
    }
    GcLayer {
        adjacency: params.add(format!("{name}.adj"), adj),
        weight: params.add(format!("{name}.w"), fan_in_uniform(rng, w, &[w, w])),
    }
}

fn register_attention(params: &mut ParamSet, rng: &mut impl Rng, name: &str, w: usize) -> AttentionParams {
    let mut m = |suffix: &str| params.add(format!("{name}.{suffix}"), fan_in_uniform(rng, w, &[w, w]));
    AttentionParams {
        wq: m("q"),
        wk: m("k"),
        wv: m("v"),
        wo: m("o"),
    }
}

/// `tanh(A H W)` on the tape.
pub fn gc_layer_forward(tape: &mut Tape, p: &BoundParams, layer: &GcLayer, h: Var) -> Result<Var> {
    let ah = tape.matmul(p.var(layer.adjacency), h)?;
    let ahw = tape.matmul(ah, p.var(layer.weight))?;
    tape.tanh(ahw)
}

/// Multi-head scaled dot-product self-attention over the rows of `h`,
/// added back to `h`.
pub fn self_attention(tape: &mut Tape, p: &BoundParams, attn: &AttentionParams, heads: usize, h: Var) -> Result<Var> {
    let w = tape.value(h).dims2()?.1;
    if heads == 0 || w % heads != 0 {
        return Err(Error::Config(format!("width {w} is not divisible by {heads} heads")));
    }
    let dh = w / heads;
    let q = tape.matmul(h, p.var(attn.wq))?;
    let k = tape.matmul(h, p.var(attn.wk))?;
    let v = tape.matmul(h, p.var(attn.wv))?;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qh = tape.slice_lastdim(q, lo, hi)?;
        let kh = tape.slice_lastdim(k, lo, hi)?;
        let vh = tape.slice_lastdim(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.softmax_lastdim(scores)?;
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_lastdim(&outs)? };
    let proj = tape.matmul(cat, p.var(attn.wo))?;
    tape.add(h, proj)
}

fn block_forward(tape: &mut Tape, p: &BoundParams, block: &SgcBlock, heads: usize, residual: bool, x: Var) -> Result<Var> {
    let mut h = x;
    let mut next_attention = block.attention.iter();
    for (i, layer) in block.layers.iter().enumerate() {
        h = gc_layer_forward(tape, p, layer, h)?;
        if (i + 1) % ATTENTION_EVERY == 0 {
            let attn = next_attention.next().expect("one attention module per group of layers");
            h = self_attention(tape, p, attn, heads, h)?;
        }
    }
    if residual {
        tape.add(x, h)
    } else {
        Ok(h)
    }
}

fn route(tape: &mut Tape, logits: Var, kind: BranchKind, routing: TrainRouting) -> Result<(Var, Var)> {
    match routing {
        TrainRouting::Hard { noise, temperature } => gumbel_softmax_st_on_tape(tape, logits, temperature, &noise[kind.index()]),
        TrainRouting::Soft { temperature } => {
            let s = tape.scale(logits, 1.0 / temperature)?;
            let s = tape.softmax_lastdim(s)?;
            Ok((s, s))
        }
    }
}

/// Last frame of `history` repeated `t` more times.
pub fn pad_last_frame(history: &Matrix, t: usize) -> Matrix {
    let n = history.rows();
    let last = history.row(n - 1).to_vec();
    Matrix::from_fn(n + t, history.cols(), |r, c| if r < n { history.get(r, c) } else { last[c] })
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = config.layout();
        let e = config.coord_width();
        let f = config.num_coeffs;
        let w = config.feature_width;
        let mk = config.sub_len * e;
        let motion = MotionAttentionParams {
            wq: params.add("motion.q", fan_in_uniform(&mut rng, mk, &[mk, config.key_dim])),
            wk: params.add("motion.k", fan_in_uniform(&mut rng, mk, &[mk, config.key_dim])),
        };
        let mut branches = Vec::with_capacity(3);
        for kind in BranchKind::ALL {
            let dims: Arc<[usize]> = match kind {
                BranchKind::Upper => layout.upper_dims().into(),
                BranchKind::Lower => layout.lower_dims().into(),
                BranchKind::Whole => (0..e).collect(),
            };
            let n = dims.len();
            let name = kind.name();
            let encoder = Dense::register(&mut params, &mut rng, &format!("{name}.enc"), f, w);
            let blocks = (1..=NUM_EXITS)
                .map(|b| {
                    let mut layers = Vec::with_capacity(LAYERS_PER_BLOCK);
                    let mut attention = Vec::new();
                    for l in 1..=LAYERS_PER_BLOCK {
                        layers.push(register_gc(&mut params, &mut rng, &format!("{name}.b{b}.gc{l}"), n, w));
                        if l % ATTENTION_EVERY == 0 {
                            attention.push(register_attention(&mut params, &mut rng, &format!("{name}.b{b}.att{l}"), w));
                        }
                    }
                    SgcBlock { layers, attention }
                })
                .collect();
            let decoder = Dense::register_zero(&mut params, &format!("{name}.dec"), w, f);
            let policy = PolicyNet::register(&mut params, &mut rng, &format!("{name}.policy"), w, config.policy_hidden);
            branches.push(Branch {
                kind,
                nodes: n,
                dims,
                encoder,
                blocks,
                decoder,
                policy,
            });
        }
        let fusion = params.add("fusion", Tensor::scalar(0.0));
        let full = dct_matrix(config.seq_len());
        let dct_f = Tensor::from_matrix(&full.slice_rows(0, f));
        let idct_f = Tensor::from_matrix(&Matrix::from_fn(config.seq_len(), f, |t, k| full.get(k, t)));
        let merge = layout.merge_permutation().into();
        Ok(Predictor {
            config,
            params,
            motion,
            branches,
            fusion,
            dct_f,
            idct_f,
            merge,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        &self.branches[kind.index()]
    }

    pub fn motion_params(&self) -> MotionAttentionParams {
        self.motion
    }

    pub fn fusion_id(&self) -> ParamId {
        self.fusion
    }

    /// Current blend weight of the Whole branch, `sigmoid(raw)`.
    pub fn fusion_weight(&self) -> f64 {
        let raw = self.params.get(self.fusion).item();
        1.0 / (1.0 + (-raw).exp())
    }

    /// Ids of every policy-network tensor.
    pub fn policy_ids(&self) -> Vec<ParamId> {
        self.branches
            .iter()
            .flat_map(|b| [b.policy.hidden.w, b.policy.hidden.b, b.policy.out.w, b.policy.out.b])
            .collect()
    }

    fn check_history(&self, history: &Matrix) -> Result<()> {
        if history.rows() != self.config.input_frames || history.cols() != self.config.coord_width() {
            return Err(Error::shape(format!(
                "history is {}x{}, model expects {}x{}",
                history.rows(),
                history.cols(),
                self.config.input_frames,
                self.config.coord_width()
            )));
        }
        Ok(())
    }

    /// Similarity of the newest sub-sequence to every earlier window of the
    /// history. Window `i` covers frames `i..i+M`; its value is the
    /// displacement that followed it, relative to its last frame, placed on
    /// the future rows. Features are the DCT of the padded history plus the
    /// attention-weighted sum of values.
    pub fn motion_attention_on_tape(&self, tape: &mut Tape, p: &BoundParams, history: &Matrix) -> Result<MotionAttentionOut> {
        self.check_history(history)?;
        let cfg = &self.config;
        let (n, m, t, e) = (cfg.input_frames, cfg.sub_len, cfg.output_frames, cfg.coord_width());
        let l = n + t;
        let windows = cfg.num_windows();
        let s = cfg.coord_scale;
        let flat = |start: usize| -> Vec<f64> { history.as_slice()[start * e..(start + m) * e].iter().map(|v| v * s).collect() };

        let query = tape.constant(Tensor::new(vec![1, m * e], flat(n - m))?)?;
        let keys_in: Vec<f64> = (0..windows).flat_map(flat).collect();
        let keys = tape.constant(Tensor::new(vec![windows, m * e], keys_in)?)?;
        let q = tape.matmul(query, p.var(self.motion.wq))?;
        let k = tape.matmul(keys, p.var(self.motion.wk))?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (cfg.key_dim as f64).sqrt())?;
        let weights = tape.softmax_lastdim(scores)?;

        let mut values = vec![0.0; windows * l * e];
        for i in 0..windows {
            let anchor = history.row(i + m - 1);
            for r in n..l {
                let src = history.row((i + m + r - n).min(n - 1));
                let dst = &mut values[(i * l + r) * e..(i * l + r + 1) * e];
                for ((d, &a), &b) in dst.iter_mut().zip(src).zip(anchor) {
                    *d = a - b;
                }
            }
        }
        let values = tape.constant(Tensor::new(vec![windows, l * e], values)?)?;
        let mixed = tape.matmul(weights, values)?;
        let mixed = tape.reshape(mixed, &[l, e])?;
        let padded = pad_last_frame(history, t);
        let pv = tape.constant(Tensor::from_matrix(&padded))?;
        let signal = tape.add(pv, mixed)?;
        let basis = tape.constant(self.dct_f.clone())?;
        let features = tape.matmul(basis, signal)?;
        Ok(MotionAttentionOut {
            features,
            weights,
            padded,
        })
    }

    /// Motion-attention features of a plain history.
    pub fn motion_attention(&self, history: &MotionSequence) -> Result<(DctCoeffs, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        let out = self.motion_attention_on_tape(&mut tape, &p, history.data())?;
        let features = DctCoeffs::new(tape.value(out.features).to_matrix()?, self.config.seq_len())?;
        Ok((features, tape.value(out.weights).data().to_vec()))
    }

    /// `n x W` encoded input of a branch from the `F x 3J` features.
    pub fn encode_branch(&self, tape: &mut Tape, p: &BoundParams, kind: BranchKind, features: Var) -> Result<Var> {
        let branch = &self.branches[kind.index()];
        let cols = match kind {
            BranchKind::Whole => features,
            _ => tape.gather_cols(features, branch.dims.clone())?,
        };
        let x = tape.transpose(cols)?;
        let x = tape.scale(x, self.config.coord_scale)?;
        branch.encoder.forward(tape, p, x)
    }

    /// Runs blocks `1..=exit` on the encoded input and decodes, returning
    /// `n x F` coefficients in model units.
    pub fn branch_forward_to_exit(&self, tape: &mut Tape, p: &BoundParams, kind: BranchKind, x: Var, exit: usize) -> Result<Var> {
        let h = self.run_blocks(tape, p, kind, x, exit, |_, _, _| Ok(()))?;
        self.branches[kind.index()].decoder.forward(tape, p, h)
    }

    /// Decoder output after each of the first `depth` blocks.
    fn branch_exits(&self, tape: &mut Tape, p: &BoundParams, kind: BranchKind, x: Var, depth: usize) -> Result<Vec<Var>> {
        let decoder = self.branches[kind.index()].decoder;
        let mut outs = Vec::with_capacity(depth);
        self.run_blocks(tape, p, kind, x, depth, |tape, p, h| {
            outs.push(decoder.forward(tape, p, h)?);
            Ok(())
        })?;
        Ok(outs)
    }

    /// Runs the first `depth` blocks, calling `after_block` on each output.
    fn run_blocks(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        kind: BranchKind,
        x: Var,
        depth: usize,
        mut after_block: impl FnMut(&mut Tape, &BoundParams, Var) -> Result<()>,
    ) -> Result<Var> {
        if !(1..=NUM_EXITS).contains(&depth) {
            return Err(Error::range(format!("exit {depth} outside 1..={NUM_EXITS}")));
        }
        let branch = &self.branches[kind.index()];
        let rows = tape.value(x).dims2()?.0;
        if rows != branch.nodes {
            return Err(Error::shape(format!("{} rows for a {}-node branch", rows, branch.nodes)));
        }
        let mut h = x;
        for block in &branch.blocks[..depth] {
            h = block_forward(tape, p, block, self.config.heads, self.config.block_residual, h)?;
            after_block(tape, p, h)?;
        }
        Ok(h)
    }

    /// Decoder output (`n x F`) to a time-domain `L x n` trajectory in mm.
    fn to_time(&self, tape: &mut Tape, coeffs: Var) -> Result<Var> {
        let c = tape.scale(coeffs, 1.0 / self.config.coord_scale)?;
        let ct = tape.transpose(c)?;
        let basis = tape.constant(self.idct_f.clone())?;
        tape.matmul(basis, ct)
    }

    fn assemble(&self, tape: &mut Tape, p: &BoundParams, padded: &Matrix, coeffs: [Var; 3]) -> Result<Var> {
        let upper = self.to_time(tape, coeffs[0])?;
        let lower = self.to_time(tape, coeffs[1])?;
        let whole = self.to_time(tape, coeffs[2])?;
        let parts = tape.concat_lastdim(&[upper, lower])?;
        let merged = tape.gather_cols(parts, self.merge.clone())?;
        let fw = tape.sigmoid(p.var(self.fusion))?;
        let one = tape.constant(Tensor::scalar(1.0))?;
        let rest = tape.sub(one, fw)?;
        let w_part = tape.scale_by(whole, fw)?;
        let m_part = tape.scale_by(merged, rest)?;
        let blend = tape.add(w_part, m_part)?;
        let pv = tape.constant(Tensor::from_matrix(padded))?;
        tape.add(pv, blend)
    }

    /// Inference forward pass: only the blocks up to each chosen exit run.
    pub fn forward_eval(&self, tape: &mut Tape, p: &BoundParams, history: &Matrix, choice: ExitChoice) -> Result<ForwardOut> {
        let ma = self.motion_attention_on_tape(tape, p, history)?;
        let mut coeffs = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        let mut exits = [0; 3];
        for kind in BranchKind::ALL {
            let branch = &self.branches[kind.index()];
            let x = self.encode_branch(tape, p, kind, ma.features)?;
            let lg = branch.policy.forward(tape, p, x)?;
            let exit = match choice {
                ExitChoice::Policy => argmax(tape.value(lg).data()) + 1,
                ExitChoice::Fixed(e) => e[kind.index()],
            };
            coeffs.push(self.branch_forward_to_exit(tape, p, kind, x, exit)?);
            logits.push(lg);
            exits[kind.index()] = exit;
        }
        let pred = self.assemble(tape, p, &ma.padded, [coeffs[0], coeffs[1], coeffs[2]])?;
        Ok(ForwardOut {
            pred,
            exits,
            logits: [logits[0], logits[1], logits[2]],
            soft: None,
        })
    }

    /// Training forward pass: every exit is decoded and the branch output
    /// is `sum_d b_d out_d` with `b` from the routing.
    pub fn forward_train(&self, tape: &mut Tape, p: &BoundParams, history: &Matrix, routing: TrainRouting) -> Result<ForwardOut> {
        let ma = self.motion_attention_on_tape(tape, p, history)?;
        let mut coeffs = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        let mut softs = Vec::with_capacity(3);
        let mut exits = [0; 3];
        for kind in BranchKind::ALL {
            let branch = &self.branches[kind.index()];
            let x = self.encode_branch(tape, p, kind, ma.features)?;
            let lg = branch.policy.forward(tape, p, x)?;
            let (b, soft) = route(tape, lg, kind, routing)?;
            exits[kind.index()] = argmax(tape.value(b).data()) + 1;
            let outs = self.branch_exits(tape, p, kind, x, NUM_EXITS)?;
            let mut acc = None;
            for (d, &out) in outs.iter().enumerate() {
                let bd = tape.slice_lastdim(b, d, d + 1)?;
                let term = tape.scale_by(out, bd)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            coeffs.push(acc.expect("three exits"));
            logits.push(lg);
            softs.push(soft);
        }
        let pred = self.assemble(tape, p, &ma.padded, [coeffs[0], coeffs[1], coeffs[2]])?;
        Ok(ForwardOut {
            pred,
            exits,
            logits: [logits[0], logits[1], logits[2]],
            soft: Some([softs[0], softs[1], softs[2]]),
        })
    }

    /// Exit probabilities of every branch, identical to those of
    /// [`Predictor::forward_train`] under the same routing.
    pub fn policy_probs(&self, tape: &mut Tape, p: &BoundParams, history: &Matrix, routing: TrainRouting) -> Result<[Var; 3]> {
        let ma = self.motion_attention_on_tape(tape, p, history)?;
        let mut out = Vec::with_capacity(3);
        for kind in BranchKind::ALL {
            let x = self.encode_branch(tape, p, kind, ma.features)?;
            let lg = self.branches[kind.index()].policy.forward(tape, p, x)?;
            out.push(route(tape, lg, kind, routing)?.1);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Full `N+T` reconstruction of a root-centered history and the exits used.
    pub fn predict(&self, history: &MotionSequence, choice: ExitChoice) -> Result<(MotionSequence, [usize; 3])> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        let out = self.forward_eval(&mut tape, &p, history.data(), choice)?;
        let data = tape.value(out.pred).to_matrix()?;
        Ok((MotionSequence::new(data, history.fps(), history.label())?, out.exits))
    }
}
