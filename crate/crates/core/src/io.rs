//! On-disk formats.
//!
//! Both containers share one framing:
//!
//! ```text
//! <MAGIC> <version>\n
//! <header length in bytes>\n
//! <header: pretty-printed JSON>\n
//! <payload: little-endian f64 values>
//! ```
//!
//! Checkpoint payload, in order: every trainable tensor in declaration order
//! (injective part first, then the bijective part), then the Adam first and
//! second moments of the injective group, then those of the bijective group.
//! Tensor shapes, LU permutations and signs, actnorm flags, the training
//! configuration and the loss history live in the header.
//!
//! Dataset payload: one record per item, the ground truth `x` followed by
//! the raw measurement `y`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::flow::Parameters;
use crate::model::{Architecture, CTrumpet};
use crate::problems::ProblemSpec;
use crate::training::{AdamState, EpochLoss, Phase, TrainConfig, TrainState};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "TRUMPETFLOW-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &str = "TRUMPETFLOW-DATASET";
pub const DATASET_VERSION: u32 = 1;

/// Serde adapter writing non-finite floats as the strings `inf`, `-inf`, `nan`.
pub mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

fn frame<H: Serialize>(magic: &str, version: u32, header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = format!("{magic} {version}\n{}\n{text}\n", text.len()).into_bytes();
    out.reserve(payload.len() * 8);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("truncated header".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|e| Error::Format(e.to_string()))
}

fn unframe<H: for<'de> Deserialize<'de>>(bytes: &[u8], magic: &str, version: u32) -> Result<(H, Vec<f64>)> {
    let mut pos = 0;
    let first = read_line(bytes, &mut pos)?;
    let (m, v) = first.split_once(' ').ok_or_else(|| Error::Format(format!("missing magic line, got '{first}'")))?;
    if m != magic {
        return Err(Error::Format(format!("expected a {magic} file, found '{m}'")));
    }
    let v: u32 = v.parse().map_err(|_| Error::Format(format!("bad version '{v}'")))?;
    if v != version {
        return Err(Error::Format(format!("unsupported {magic} version {v} (this build reads {version})")));
    }
    let len: usize = read_line(bytes, &mut pos)?.parse().map_err(|_| Error::Format("bad header length".into()))?;
    if pos + len + 1 > bytes.len() || bytes[pos + len] != b'\n' {
        return Err(Error::Format("truncated header".into()));
    }
    let header = serde_json::from_slice(&bytes[pos..pos + len]).map_err(|e| Error::Format(e.to_string()))?;
    let body = &bytes[pos + len + 1..];
    if !body.len().is_multiple_of(8) {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of f64 values", body.len())));
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, payload))
}

/// Write through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader {
    values: Vec<f64>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if self.pos + n > self.values.len() {
            return Err(Error::Format("payload shorter than the header describes".into()));
        }
        let t = Tensor::new(shape.to_vec(), self.values[self.pos..self.pos + n].to_vec())?;
        self.pos += n;
        Ok(t)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(Error::Format(format!("{} trailing payload values", self.values.len() - self.pos)));
        }
        Ok(())
    }
}

/// Model, training configuration and resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CTrumpet,
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    train_config: TrainConfig,
    phase: Phase,
    epoch: usize,
    adam_gamma_step: u64,
    adam_eta_step: u64,
    history: Vec<EpochLoss>,
    actnorm_initialized: Vec<bool>,
    lu_permutations: Vec<Vec<usize>>,
    lu_signs: Vec<Vec<i8>>,
    gamma_shapes: Vec<Vec<usize>>,
    eta_shapes: Vec<Vec<usize>>,
}

fn shapes(ts: &[&Tensor]) -> Vec<Vec<usize>> {
    ts.iter().map(|t| t.shape().to_vec()).collect()
}

pub fn encode_checkpoint(model: &CTrumpet, config: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let gamma = model.gamma_params();
    let eta = model.eta_params();
    let same = |a: &[Tensor], p: &[&Tensor]| a.len() == p.len() && a.iter().zip(p).all(|(a, p)| a.shape() == p.shape());
    for (s, p) in [(&state.adam_gamma, &gamma), (&state.adam_eta, &eta)] {
        if !same(&s.m, p) || !same(&s.v, p) {
            return Err(Error::Contract("optimizer moments do not match the model parameters".into()));
        }
    }
    let (perms, signs): (Vec<_>, Vec<_>) = model
        .lu_buffers()
        .into_iter()
        .map(|(p, s)| (p, s.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect::<Vec<i8>>()))
        .unzip();
    let header = CheckpointHeader {
        architecture: model.architecture().clone(),
        train_config: config.clone(),
        phase: state.phase,
        epoch: state.epoch,
        adam_gamma_step: state.adam_gamma.step,
        adam_eta_step: state.adam_eta.step,
        history: state.history.clone(),
        actnorm_initialized: model.actnorm_flags(),
        lu_permutations: perms,
        lu_signs: signs,
        gamma_shapes: shapes(&gamma),
        eta_shapes: shapes(&eta),
    };
    let mut payload = Vec::with_capacity(2 * 3 * model.num_parameters());
    for t in model.params() {
        payload.extend_from_slice(t.data());
    }
    for s in [&state.adam_gamma, &state.adam_eta] {
        for t in s.m.iter().chain(&s.v) {
            payload.extend_from_slice(t.data());
        }
    }
    frame(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (h, values): (CheckpointHeader, _) = unframe(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut model = CTrumpet::identity(h.architecture.clone())?;
    if shapes(&model.gamma_params()) != h.gamma_shapes || shapes(&model.eta_params()) != h.eta_shapes {
        return Err(Error::Format("parameter shapes in the header do not match the architecture".into()));
    }
    let mut r = Reader { values, pos: 0 };
    for p in model.params_mut() {
        *p = r.take(p.shape())?;
    }
    let mut moments = |sh: &[Vec<usize>], step: u64| -> Result<AdamState> {
        let m = sh.iter().map(|s| r.take(s)).collect::<Result<Vec<_>>>()?;
        let v = sh.iter().map(|s| r.take(s)).collect::<Result<Vec<_>>>()?;
        Ok(AdamState { step, m, v })
    };
    let adam_gamma = moments(&h.gamma_shapes, h.adam_gamma_step)?;
    let adam_eta = moments(&h.eta_shapes, h.adam_eta_step)?;
    r.finish()?;
    model.set_actnorm_flags(&h.actnorm_initialized)?;
    if h.lu_permutations.len() != h.lu_signs.len() {
        return Err(Error::Format("LU permutation and sign lists differ in length".into()));
    }
    let buffers: Vec<(Vec<usize>, Vec<f64>)> = h
        .lu_permutations
        .into_iter()
        .zip(h.lu_signs)
        .map(|(p, s)| (p, s.into_iter().map(f64::from).collect()))
        .collect();
    model.set_lu_buffers(&buffers)?;
    h.train_config.validate()?;
    let state = TrainState { phase: h.phase, epoch: h.epoch, adam_gamma, adam_eta, history: h.history };
    Ok(Checkpoint { model, config: h.train_config, state })
}

pub fn write_checkpoint(path: &Path, model: &CTrumpet, config: &TrainConfig, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, config, state)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Fail with both descriptors when a checkpoint was built for another architecture.
pub fn ensure_architecture(found: &Architecture, expected: &Architecture) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    let text = |a: &Architecture| serde_json::to_string(a).unwrap_or_else(|e| e.to_string());
    Err(Error::ArchitectureMismatch { expected: text(expected), found: text(found) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub problem: ProblemSpec,
    pub seed: u64,
    pub count: usize,
    pub x_dim: usize,
    pub y_dim: usize,
}

/// Ground truth and raw measurements of a generated problem instance set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(problem: ProblemSpec, seed: u64, x: Tensor, y: Tensor) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
            return Err(Error::Contract(format!("x {:?} and y {:?} must pair up", x.shape(), y.shape())));
        }
        let header = DatasetHeader { problem, seed, count: x.rows(), x_dim: x.cols(), y_dim: y.cols() };
        Ok(Self { header, x, y })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.header.count * (self.header.x_dim + self.header.y_dim));
        for i in 0..self.header.count {
            payload.extend_from_slice(self.x.row(i));
            payload.extend_from_slice(self.y.row(i));
        }
        frame(DATASET_MAGIC, DATASET_VERSION, &self.header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, values): (DatasetHeader, Vec<f64>) = unframe(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let width = header.x_dim + header.y_dim;
        if values.len() != header.count * width {
            return Err(Error::Format(format!("{} values for {} records of width {width}", values.len(), header.count)));
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for rec in values.chunks_exact(width.max(1)) {
            x.extend_from_slice(&rec[..header.x_dim]);
            y.extend_from_slice(&rec[header.x_dim..]);
        }
        let x = Tensor::new(vec![header.count, header.x_dim], x)?;
        let y = Tensor::new(vec![header.count, header.y_dim], y)?;
        Ok(Self { header, x, y })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// CSV with columns `x0..x{D-1}, y0..y{M-1}`, one row per item.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<String> = (0..self.header.x_dim).map(|j| format!("x{j}")).collect();
        cols.extend((0..self.header.y_dim).map(|j| format!("y{j}")));
        let mut out = cols.join(",") + "\n";
        for i in 0..self.header.count {
            let row: Vec<String> = self.x.row(i).iter().chain(self.y.row(i)).map(|v| format!("{v:e}")).collect();
            out += &row.join(",");
            out.push('\n');
        }
        out
    }
}
