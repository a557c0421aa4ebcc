//! Motion text files and binary checkpoints.
//!
//! Motion files start with `champlite v1 J=<J> fps=<fps> frames=<rows>
//! label=<name>` followed by one line of 3J space-separated values per
//! frame, each written with 17 significant digits.
//!
//! Checkpoints are `MOTICKPT`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header (model kind, config echo and the
//! ordered tensor table), the tensor values as little-endian `f64`, and a
//! SHA-256 digest of everything before it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::motion::{Matrix, MotionSequence};
use crate::params::ParamSet;
use crate::predictor::{Predictor, PredictorConfig};
use crate::vae::{VaeConfig, VaeModel};

pub const MOTION_FORMAT: &str = "champlite v1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOTICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn format_motion(seq: &MotionSequence) -> String {
    let d = seq.data();
    let mut out = format!(
        "{MOTION_FORMAT} J={} fps={} frames={} label={}\n",
        seq.joint_count(),
        seq.fps(),
        seq.frames(),
        seq.label()
    );
    for r in 0..d.rows() {
        for (c, v) in d.row(r).iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

fn header_field<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    let parse_err = |msg: String| Error::Parse { line: 1, msg };
    let tok = tok.ok_or_else(|| parse_err(format!("missing {key}= field")))?;
    tok.strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| parse_err(format!("expected {key}=..., found {tok:?}")))
}

pub fn parse_motion(text: &str) -> Result<MotionSequence> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let rest = header.strip_prefix(MOTION_FORMAT).and_then(|r| r.strip_prefix(' ')).ok_or(Error::Parse {
        line: 1,
        msg: format!("header must start with {MOTION_FORMAT:?}"),
    })?;
    let (fields, label) = rest.split_once(" label=").ok_or(Error::Parse {
        line: 1,
        msg: "missing label= field".into(),
    })?;
    let mut toks = fields.split(' ');
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let joints: usize = header_field(toks.next(), "J")?.parse().map_err(|e| bad(format!("J: {e}")))?;
    let fps: f64 = header_field(toks.next(), "fps")?.parse().map_err(|e| bad(format!("fps: {e}")))?;
    let frames: usize = header_field(toks.next(), "frames")?.parse().map_err(|e| bad(format!("frames: {e}")))?;
    if toks.next().is_some() {
        return Err(bad("unexpected header fields".into()));
    }
    let width = joints.checked_mul(3).ok_or_else(|| bad("J too large".into()))?;
    let mut data = Vec::with_capacity(width.saturating_mul(frames).min(1 << 24));
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("{tok:?}: {e}"),
            })?;
            data.push(v);
        }
        let got = data.len() - before;
        if got != width {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {width} values, found {got}"),
            });
        }
        rows += 1;
        if rows > frames {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("more than the declared {frames} frames"),
            });
        }
    }
    if rows != frames {
        return Err(Error::Parse {
            line: rows + 2,
            msg: format!("declared {frames} frames, found {rows}"),
        });
    }
    let m = Matrix::from_vec(rows, width, data)?;
    MotionSequence::new(m, fps, label).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })
}

pub fn save_motion(path: &Path, seq: &MotionSequence) -> Result<()> {
    fs::write(path, format_motion(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_motion(&text)
}

/// Every `*.motion` file of a directory, in file-name order.
pub fn load_motion_dir(dir: &Path) -> Result<Vec<MotionSequence>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "motion"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_motion(p)).collect()
}

pub fn save_motion_dir(dir: &Path, seqs: &[MotionSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in seqs.iter().enumerate() {
        save_motion(&dir.join(format!("{i:05}_{}.motion", s.label())), s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container: model kind, config echo and the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamSet,
}

pub fn encode_checkpoint(kind: &str, config: serde_json::Value, params: &ParamSet) -> Vec<u8> {
    let header = Header {
        kind: kind.into(),
        config,
        tensors: params
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.scalar_count() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in params.entries() {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Integrity(format!("truncated {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 32 + pos {
        return Err(Error::Integrity("truncated checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
    }
    let hlen = u64::from_le_bytes(take(body, &mut pos, 8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| Error::Integrity("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(take(body, &mut pos, hlen, "header")?).map_err(|e| Error::Integrity(format!("header: {e}")))?;
    let mut params = ParamSet::new();
    for t in &header.tensors {
        let n = t
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Integrity(format!("tensor {} is too large", t.name)))?;
        let raw = take(body, &mut pos, n, "tensor data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| Error::Integrity(e.to_string()))?;
        if params.find(&t.name).is_some() {
            return Err(Error::Integrity(format!("duplicate tensor {}", t.name)));
        }
        if t.trainable {
            params.add(t.name.clone(), tensor);
        } else {
            params.add_frozen(t.name.clone(), tensor);
        }
    }
    if pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - pos)));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
    })
}

pub const VAE_KIND: &str = "cag-vae";
pub const PREDICTOR_KIND: &str = "dc-gcn";

pub fn vae_to_bytes(model: &VaeModel) -> Vec<u8> {
    encode_checkpoint(VAE_KIND, serde_json::to_value(model.config()).expect("config serializes"), model.params())
}

pub fn predictor_to_bytes(model: &Predictor) -> Vec<u8> {
    encode_checkpoint(PREDICTOR_KIND, serde_json::to_value(model.config()).expect("config serializes"), model.params())
}

/// Rejects configs whose sizes could not match the stored tensors, before
/// a model of that size is allocated.
fn check_sizes(c: &Checkpoint, dims: &[usize]) -> Result<()> {
    let stored = c.params.scalar_count().max(1);
    if let Some(d) = dims.iter().find(|&&d| d > stored) {
        return Err(Error::Integrity(format!("config dimension {d} exceeds the {stored} stored values")));
    }
    Ok(())
}

fn expect_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(Error::Integrity(format!("checkpoint holds a {} model, expected {kind}", c.kind)));
    }
    Ok(())
}

pub fn vae_from_bytes(bytes: &[u8]) -> Result<VaeModel> {
    let c = decode_checkpoint(bytes)?;
    expect_kind(&c, VAE_KIND)?;
    let config: VaeConfig = serde_json::from_value(c.config.clone()).map_err(|e| Error::Integrity(format!("config: {e}")))?;
    let mut dims = vec![config.width.saturating_mul(config.num_coeffs), config.latent_dim];
    dims.extend(&config.hidden_dims);
    check_sizes(&c, &dims)?;
    let d = config.input_dim();
    let mut model = VaeModel::new(config, 0, vec![0.0; d], 1.0).map_err(|e| Error::Integrity(e.to_string()))?;
    model.params_mut().load_from(&c.params)?;
    Ok(model)
}

pub fn predictor_from_bytes(bytes: &[u8]) -> Result<Predictor> {
    let c = decode_checkpoint(bytes)?;
    expect_kind(&c, PREDICTOR_KIND)?;
    let config: PredictorConfig = serde_json::from_value(c.config.clone()).map_err(|e| Error::Integrity(format!("config: {e}")))?;
    let w = config.feature_width;
    check_sizes(
        &c,
        &[
            w.saturating_mul(w),
            config.parts.len().saturating_mul(3),
            config.num_coeffs.saturating_mul(w),
            config.key_dim,
            config.policy_hidden,
            config.heads,
            config.input_frames.saturating_add(config.output_frames),
        ],
    )?;
    let mut model = Predictor::new(config, 0).map_err(|e| Error::Integrity(e.to_string()))?;
    model.params_mut().load_from(&c.params)?;
    Ok(model)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_vae(path: &Path, model: &VaeModel) -> Result<()> {
    write_bytes(path, &vae_to_bytes(model))
}

pub fn load_vae(path: &Path) -> Result<VaeModel> {
    vae_from_bytes(&read_bytes(path)?)
}

pub fn save_predictor(path: &Path, model: &Predictor) -> Result<()> {
    write_bytes(path, &predictor_to_bytes(model))
}

pub fn load_predictor(path: &Path) -> Result<Predictor> {
    predictor_from_bytes(&read_bytes(path)?)
}
