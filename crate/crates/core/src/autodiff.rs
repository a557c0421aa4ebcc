//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients into every node that requires them. Shapes must
//! match exactly: there is no implicit broadcasting, only the explicit
//! scalar and row-bias operations below.

use std::sync::Arc;

use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};

type Shape = SmallVec<[usize; 4]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.into(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.into(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.into(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: smallvec![1, 1],
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: smallvec![1, data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_matrix(m: &crate::motion::Matrix) -> Self {
        Tensor {
            shape: smallvec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<crate::motion::Matrix> {
        let (r, c) = self.dims2()?;
        crate::motion::Matrix::from_vec(r, c, self.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    SoftmaxLastdim(Var),
    Mean(Var),
    Sum(Var),
    SumSq(Var),
    ConcatLastdim(Vec<Var>),
    SliceLastdim(Var, usize, usize),
    GatherCols(Var, Arc<[usize]>),
    Transpose(Var),
    Reshape(Var),
    StraightThrough(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::SoftmaxLastdim(..) => "softmax_lastdim",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::SumSq(..) => "sum_sq",
            Op::ConcatLastdim(..) => "concat_lastdim",
            Op::SliceLastdim(..) => "slice_lastdim",
            Op::GatherCols(..) => "gather_cols",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in topological order; a node's inputs always precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: Option<u64>,
}

#[inline]
fn matmul_kernel<const COUNT: bool>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    counter: &mut u64,
) {
    if n == 0 || k == 0 {
        return;
    }
    for (dst, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        for (&av, src) in arow.iter().zip(b.chunks_exact(n)) {
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d += av * bv;
            }
            if COUNT {
                *counter += n as u64;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that counts every multiply-accumulate executed by `matmul`.
    pub fn with_mac_counter() -> Self {
        Tape {
            macs: Some(0),
            ..Tape::default()
        }
    }

    pub fn mac_count(&self) -> Option<u64> {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        // x - x is NaN exactly when x is infinite or NaN
        if value.data.iter().fold(0.0, |acc, &v| acc + (v - v)) != 0.0 {
            let bad = value.data.iter().find(|v| !v.is_finite()).copied().unwrap_or(f64::NAN);
            return Err(Error::Numeric(format!("{} produced non-finite value {bad}", op.kind())));
        }
        if self.nodes.capacity() == 0 {
            self.nodes.reserve(1024);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(Error::shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.kind())?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (k2, n) = self.nodes[b.0].value.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        let mut counter = 0u64;
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            if self.macs.is_some() {
                matmul_kernel::<true>(av, bv, &mut out, m, k, n, &mut counter);
            } else {
                matmul_kernel::<false>(av, bv, &mut out, m, k, n, &mut counter);
            }
        }
        if let Some(c) = self.macs.as_mut() {
            *c += counter;
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape: smallvec![m, n], data: out }, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 {
            return Err(Error::shape(format!("scale_by needs a scalar, got shape {:?}", sv.shape)));
        }
        let k = sv.data[0];
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x * k).collect(),
        };
        let rg = self.rg(&[a, s]);
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    /// Adds the `1 x n` row `bias` to every row of the `m x n` matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let bshape = &self.nodes[bias.0].value.shape;
        if bshape[..] != [1, n] {
            return Err(Error::shape(format!("add_row: bias {bshape:?} for a {m}x{n} matrix")));
        }
        let va = &self.nodes[a.0].value.data;
        let vb = &self.nodes[bias.0].value.data;
        let mut data = va.clone();
        for row in data.chunks_exact_mut(n) {
            for (d, &b) in row.iter_mut().zip(vb) {
                *d += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(Tensor { shape: smallvec![m, n], data }, Op::AddRow(a, bias), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].value.data.iter().find(|&&v| v < 0.0) {
            return Err(Error::Numeric(format!("sqrt of negative value {bad}")));
        }
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data.iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("reciprocal of zero".into()));
        }
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = va.last_dim();
        let mut data = va.data.clone();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxLastdim(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let v = va.data.iter().sum::<f64>() / va.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.data.iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.data.iter().map(|x| x * x).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::SumSq(a), rg)
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim of nothing"))?;
        let lead: Vec<usize> = {
            let s = &self.nodes[first.0].value.shape;
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("concat_lastdim: leading dims {s:?} vs {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape: Shape = lead.into();
        shape.push(total);
        let rg = self.rg(parts);
        self.push(Tensor { shape, data }, Op::ConcatLastdim(parts.to_vec()), rg)
    }

    pub fn slice_lastdim(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = va.last_dim();
        if start >= end || end > n {
            return Err(Error::shape(format!("slice_lastdim {start}..{end} of width {n}")));
        }
        let mut data = Vec::with_capacity(va.numel() / n * (end - start));
        for row in va.data.chunks_exact(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = va.shape.clone();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data }, Op::SliceLastdim(a, start, end), rg)
    }

    /// Selects columns `idx` (in that order) of a matrix.
    pub fn gather_cols(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_cols index {bad} of width {n}")));
        }
        let va = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(m * idx.len());
        for row in va.chunks_exact(n) {
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let shape = smallvec![m, idx.len()];
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data }, Op::GatherCols(a, idx), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let va = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor { shape: smallvec![n, m], data }, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.numel() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", va.shape)));
        }
        let value = Tensor {
            shape: shape.into(),
            data: va.data.clone(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Forward: one-hot of the row-wise argmax (lowest index wins ties).
    /// Backward: identity, so gradients reach `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Result<Var> {
        let vs = &self.nodes[soft.0].value;
        let n = vs.last_dim();
        let mut data = vec![0.0; vs.numel()];
        for (src, dst) in vs.data.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            dst[argmax(src)] = 1.0;
        }
        let value = Tensor {
            shape: vs.shape.clone(),
            data,
        };
        let rg = self.rg(&[soft]);
        self.push(value, Op::StraightThrough(soft), rg)
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(Some(loss), &[])
    }

    /// Reverse accumulation from an optional scalar loss plus extra seed
    /// gradients injected at arbitrary nodes.
    pub fn backward_seeded(&mut self, loss: Option<Var>, seeds: &[(Var, &[f64])]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        if let Some(loss) = loss {
            if self.nodes[loss.0].value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    self.nodes[loss.0].value.shape
                )));
            }
            grads[loss.0] = Some(vec![1.0]);
            top = loss.0;
        }
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.numel() {
                return Err(Error::shape(format!(
                    "seed gradient of length {} for a node of {} values",
                    g.len(),
                    self.nodes[v.0].value.numel()
                )));
            }
            accumulate(&mut grads[v.0], g);
            top = top.max(v.0);
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value.data;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape[0], val(a).shape[1]);
                let n = val(b).shape[1];
                let (av, bv) = (&val(a).data, &val(b).data);
                if wants(a) {
                    // dA = dC B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(b) {
                    // dB = A^T dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let w = av[r * k + p];
                            if w == 0.0 {
                                continue;
                            }
                            for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += w * x;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Hadamard(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = g.iter().zip(&val(b).data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g.iter().zip(&val(a).data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::ScaleBy(a, s) => {
                let k = val(s).data[0];
                if wants(a) {
                    let d: Vec<f64> = g.iter().map(|x| x * k).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(s) {
                    let ds: f64 = g.iter().zip(&val(a).data).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads[s.0], &[ds]);
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    let n = val(b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sqrt(a) => {
                // zero subgradient at the origin
                let d: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(x, y)| if *y == 0.0 { 0.0 } else { x / (2.0 * y) })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Recip(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(x, y)| -x * y * y).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::SoftmaxLastdim(a) => {
                let n = node.value.last_dim();
                let mut d = vec![0.0; g.len()];
                for ((s, gr), dr) in out.chunks_exact(n).zip(g.chunks_exact(n)).zip(d.chunks_exact_mut(n)) {
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((dv, &sv), &gv) in dr.iter_mut().zip(s).zip(gr) {
                        *dv = sv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Mean(a) => {
                let n = val(a).numel();
                let d = vec![g[0] / n as f64; n];
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(a).numel()];
                accumulate(&mut grads[a.0], &d);
            }
            Op::SumSq(a) => {
                let d: Vec<f64> = val(a).data.iter().map(|x| 2.0 * x * g[0]).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::ConcatLastdim(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for p in parts {
                    let w = val(p).last_dim();
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::SliceLastdim(a, start, end) => {
                let n = val(a).last_dim();
                let w = end - start;
                let mut d = vec![0.0; val(a).numel()];
                for (dr, gr) in d.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                    dr[*start..*end].copy_from_slice(gr);
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::GatherCols(a, idx) => {
                let n = val(a).shape[1];
                let w = idx.len();
                let mut d = vec![0.0; val(a).numel()];
                for (dr, gr) in d.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                    for (&c, &x) in idx.iter().zip(gr) {
                        dr[c] += x;
                    }
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Transpose(a) => {
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Reshape(a) | Op::StraightThrough(a) => {
                accumulate(&mut grads[a.0], g);
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when
    /// `v` did not take part.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape.clone();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Largest relative discrepancy between backward gradients of `f` at
/// `point` and central differences with step `epsilon`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("grad_check epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone())?;
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check evaluation is not finite".into()));
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data[i], numeric));
    }
    Ok(worst)
}
