//! Skeleton topology, body-part layout and motion sequences.
//!
//! Coordinates are frame-major: row `t` of a sequence holds the 3J values of
//! frame `t`, with `x, y, z` of joint `j` stored at columns `3j, 3j+1, 3j+2`.
//! All values are millimeters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Body part a joint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    Upper,
    Lower,
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    parent: Vec<usize>,
    part_of: Vec<Part>,
    names: Vec<String>,
}

impl Skeleton {
    /// Builds a skeleton, checking that `parent` forms a single tree rooted
    /// at joint 0 (the root is its own parent).
    pub fn new(parent: Vec<usize>, part_of: Vec<Part>, names: Vec<String>) -> Result<Self> {
        let j = parent.len();
        if j == 0 {
            return Err(Error::Config("skeleton needs at least one joint".into()));
        }
        if part_of.len() != j || names.len() != j {
            return Err(Error::Config(format!(
                "skeleton arrays disagree: {} parents, {} part labels, {} names",
                j,
                part_of.len(),
                names.len()
            )));
        }
        if parent[0] != 0 {
            return Err(Error::Config("joint 0 must be the root (its own parent)".into()));
        }
        for (i, &p) in parent.iter().enumerate().skip(1) {
            if p >= j || p == i {
                return Err(Error::Config(format!("joint {i} has invalid parent {p}")));
            }
        }
        // every joint must reach the root without revisiting a joint
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = parent[cur];
                steps += 1;
                if steps > j {
                    return Err(Error::Config(format!("joint {start} is on a parent cycle")));
                }
            }
        }
        Ok(Skeleton {
            parent,
            part_of,
            names,
        })
    }

    /// The 8-joint skeleton used by the synthetic generator: 5 upper joints
    /// (spine, neck, head, hands) and 3 lower joints (pelvis root, feet).
    pub fn desk8() -> Self {
        use Part::*;
        let names = ["pelvis", "spine", "neck", "head", "l_hand", "r_hand", "l_foot", "r_foot"];
        Skeleton::new(
            vec![0, 0, 1, 2, 2, 2, 0, 0],
            vec![Lower, Upper, Upper, Upper, Upper, Upper, Lower, Lower],
            names.iter().map(|s| s.to_string()).collect(),
        )
        .expect("desk8 skeleton is well formed")
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn width(&self) -> usize {
        3 * self.parent.len()
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parent[joint]
    }

    pub fn part_of(&self, joint: usize) -> Part {
        self.part_of[joint]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layout(&self) -> PartLayout {
        PartLayout::from_parts(&self.part_of)
    }
}

/// Coordinate-level partition of the skeleton into the upper and lower body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLayout {
    upper_dims: Vec<usize>,
    lower_dims: Vec<usize>,
}

impl PartLayout {
    pub fn from_parts(parts: &[Part]) -> Self {
        let mut upper_dims = Vec::new();
        let mut lower_dims = Vec::new();
        for (j, part) in parts.iter().enumerate() {
            let dims = match part {
                Part::Upper => &mut upper_dims,
                Part::Lower => &mut lower_dims,
            };
            dims.extend([3 * j, 3 * j + 1, 3 * j + 2]);
        }
        PartLayout {
            upper_dims,
            lower_dims,
        }
    }

    pub fn upper_dims(&self) -> &[usize] {
        &self.upper_dims
    }

    pub fn lower_dims(&self) -> &[usize] {
        &self.lower_dims
    }

    pub fn upper_size(&self) -> usize {
        self.upper_dims.len()
    }

    pub fn lower_size(&self) -> usize {
        self.lower_dims.len()
    }

    pub fn width(&self) -> usize {
        self.upper_dims.len() + self.lower_dims.len()
    }

    /// Column indices of `concat(upper, lower)` in original order: entry
    /// `c` is the position within the concatenation holding coordinate `c`.
    pub fn merge_permutation(&self) -> Vec<usize> {
        let mut perm = vec![0; self.width()];
        for (i, &d) in self.upper_dims.iter().chain(&self.lower_dims).enumerate() {
            perm[d] = i;
        }
        perm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    data: Matrix,
    fps: f64,
    label: String,
}

impl MotionSequence {
    pub fn new(data: Matrix, fps: f64, label: impl Into<String>) -> Result<Self> {
        if data.rows() < 2 {
            return Err(Error::shape(format!(
                "motion sequence needs at least 2 frames, got {}",
                data.rows()
            )));
        }
        if data.cols() == 0 || data.cols() % 3 != 0 {
            return Err(Error::shape(format!(
                "motion width {} is not a positive multiple of 3",
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("motion sequence contains non-finite values".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        let label = label.into();
        if label.contains(['\n', '\r']) {
            return Err(Error::Config(format!("label {label:?} spans several lines")));
        }
        Ok(MotionSequence { data, fps, label })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn joint_count(&self) -> usize {
        self.data.cols() / 3
    }

    pub fn with_label(self, label: impl Into<String>) -> Result<Self> {
        let MotionSequence { data, fps, .. } = self;
        MotionSequence::new(data, fps, label)
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::range(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        MotionSequence::new(self.data.slice_rows(start, end), self.fps, self.label.clone())
    }
}

/// Subtracts the root joint's position from every joint, frame by frame.
pub fn remove_global_translation(seq: &MotionSequence, skeleton: &Skeleton) -> Result<MotionSequence> {
    if seq.data.cols() != skeleton.width() {
        return Err(Error::shape(format!(
            "sequence width {} does not match skeleton width {}",
            seq.data.cols(),
            skeleton.width()
        )));
    }
    let mut out = seq.data.clone();
    for t in 0..out.rows() {
        let row = out.row_mut(t);
        let root = [row[0], row[1], row[2]];
        for joint in row.chunks_exact_mut(3) {
            for k in 0..3 {
                joint[k] -= root[k];
            }
        }
    }
    MotionSequence::new(out, seq.fps, seq.label.clone())
}

/// Keeps every `factor`-th frame starting at frame 0.
pub fn downsample(seq: &MotionSequence, factor: usize) -> Result<MotionSequence> {
    if factor == 0 {
        return Err(Error::range("downsample factor must be at least 1"));
    }
    if factor > seq.frames() {
        return Err(Error::range(format!(
            "downsample factor {factor} exceeds frame count {}",
            seq.frames()
        )));
    }
    let cols = seq.data.cols();
    let mut data = Vec::with_capacity(seq.frames().div_ceil(factor) * cols);
    for t in (0..seq.frames()).step_by(factor) {
        data.extend_from_slice(seq.data.row(t));
    }
    let rows = data.len() / cols;
    MotionSequence::new(
        Matrix::from_vec(rows, cols, data)?,
        seq.fps / factor as f64,
        seq.label.clone(),
    )
}

fn select_columns(data: &Matrix, dims: &[usize]) -> Matrix {
    Matrix::from_fn(data.rows(), dims.len(), |r, c| data.get(r, dims[c]))
}

pub fn split_parts(seq: &MotionSequence, layout: &PartLayout) -> Result<(Matrix, Matrix)> {
    split_matrix(&seq.data, layout)
}

/// Column split of any frame-major matrix by `layout`.
pub fn split_matrix(data: &Matrix, layout: &PartLayout) -> Result<(Matrix, Matrix)> {
    if data.cols() != layout.width() {
        return Err(Error::shape(format!(
            "matrix width {} does not match layout width {}",
            data.cols(),
            layout.width()
        )));
    }
    Ok((
        select_columns(data, &layout.upper_dims),
        select_columns(data, &layout.lower_dims),
    ))
}

/// Scatters upper and lower columns back to their original coordinate indices.
pub fn merge_parts(upper: &Matrix, lower: &Matrix, layout: &PartLayout) -> Result<Matrix> {
    if upper.cols() != layout.upper_size() || lower.cols() != layout.lower_size() {
        return Err(Error::shape(format!(
            "part widths {}+{} do not match layout {}+{}",
            upper.cols(),
            lower.cols(),
            layout.upper_size(),
            layout.lower_size()
        )));
    }
    if upper.rows() != lower.rows() {
        return Err(Error::shape(format!(
            "part row counts differ: {} vs {}",
            upper.rows(),
            lower.rows()
        )));
    }
    let mut out = Matrix::zeros(upper.rows(), layout.width());
    for r in 0..upper.rows() {
        for (c, &d) in layout.upper_dims.iter().enumerate() {
            out.set(r, d, upper.get(r, c));
        }
        for (c, &d) in layout.lower_dims.iter().enumerate() {
            out.set(r, d, lower.get(r, c));
        }
    }
    Ok(out)
}
