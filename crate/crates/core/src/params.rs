//! Named parameter storage shared by the models, the optimizer and checkpoints.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen entries (data statistics) are stored and checkpointed but
    /// never updated by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Copies values from `other`, which must hold the same names and shapes
    /// in the same order.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Integrity(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {} {:?} does not match stored {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }

    /// Registers every tensor on `tape`; trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), e.trainable))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }
}

/// Tape handles for a [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Affine layer `x W + b` over the rows of `x`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    /// Fan-in uniform weights, zero bias.
    pub fn register(params: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: params.add(format!("{name}.w"), fan_in_uniform(rng, fan_in, &[fan_in, fan_out])),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn register_zero(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: params.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, -bound, bound, shape)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape and length agree")
}

/// Adds `other` to `acc` elementwise (gradient accumulation across samples).
pub fn add_grads(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, &y) in a.data_mut().iter_mut().zip(o.data()) {
            *x += y;
        }
    }
}

pub fn zero_grads(params: &ParamSet) -> Vec<Tensor> {
    params.entries.iter().map(|e| Tensor::zeros(e.tensor.shape())).collect()
}

fn grad_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference check of `loss` with respect to the coordinates of
/// `params` selected by `select` (entry index, flat index). Returns the
/// largest relative error.
pub fn grad_check_params<F>(
    params: &ParamSet,
    loss: F,
    epsilon: f64,
    select: &[(ParamId, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let l = loss(&mut tape, &bound)?;
    tape.backward(l)?;
    let grads = bound.gradients(&tape);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape)?;
        let l = loss(&mut tape, &bound)?;
        Ok(tape.value(l).item())
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &(id, i) in select {
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(grad_relative_error(grads[id.0].data()[i], numeric));
    }
    Ok(worst)
}
