//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         8 bytes   "KAFGRUCK"
//! version       u32
//! header_len    u64
//! header        JSON      {config, bn_mode, seed, iteration, config_echo, tensors: [{name, rows, cols}]}
//! payload       f64 LE    each tensor in header order, row-major
//! checksum      u64       FNV-1a over every preceding byte
//! ```
//!
//! Besides the learnable tensors the payload carries the kernel dictionary
//! and the batch-norm running statistics, so a loaded model predicts exactly
//! like the saved one.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::head::BnMode;
use crate::model::{Model, ModelConfig, ModelShape};
use crate::numerics::Rng;
use crate::optim::TensorSet;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KAFGRUCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Free-form JSON echo of the run configuration that produced the model.
    pub config_echo: String,
    pub model: Model,
    pub seed: u64,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn new(model: Model, config_echo: String, seed: u64, iteration: u64) -> Self {
        Self { format_version: CHECKPOINT_VERSION, config_echo, model, seed, iteration }
    }

    /// Fails with a dimension error unless the stored model has `expected` shape.
    pub fn check_shape(&self, expected: &ModelShape) -> Result<()> {
        let found = self.model.shape();
        if &found != expected {
            return Err(Error::Dimension(format!(
                "checkpoint has input {} hidden {} classes {} dictionary {}, expected input {} hidden {} classes {} dictionary {}",
                found.input_size,
                found.hidden_size,
                found.classes,
                found.dict_size,
                expected.input_size,
                expected.hidden_size,
                expected.classes,
                expected.dict_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    bn_mode: BnMode,
    seed: u64,
    iteration: u64,
    config_echo: String,
    tensors: Vec<TensorHeader>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tensor_shape(name: &str, s: &ModelShape) -> (usize, usize) {
    let (i, h, c, d) = (s.input_size, s.hidden_size, s.classes, s.dict_size);
    match name {
        "gru.w_u" | "gru.w_r" | "gru.w_h" => (h, i),
        "gru.v_u" | "gru.v_r" | "gru.v_h" => (h, h),
        "gru.update_gate.alphas" | "gru.reset_gate.alphas" => (h, d),
        "head.a" => (c, h),
        "head.b" => (c, 1),
        "gru.dictionary" => (d, 1),
        _ => (h, 1),
    }
}

const EXTRA_TENSORS: [&str; 3] = ["gru.dictionary", "head.bn.running_mean", "head.bn.running_var"];

fn all_tensors(model: &Model) -> Vec<(&'static str, &[f64])> {
    let mut list = model.tensors();
    list.push((EXTRA_TENSORS[0], model.gru.update_gate.dictionary().elements()));
    list.push((EXTRA_TENSORS[1], &model.head.bn.running_mean));
    list.push((EXTRA_TENSORS[2], &model.head.bn.running_var));
    list
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let shape = ck.model.shape();
    let tensors = all_tensors(&ck.model);
    let header = Header {
        config: ck.model.config.clone(),
        bn_mode: ck.model.head.bn.mode,
        seed: ck.seed,
        iteration: ck.iteration,
        config_echo: ck.config_echo.clone(),
        tensors: tensors
            .iter()
            .map(|(name, _)| {
                let (rows, cols) = tensor_shape(name, &shape);
                TensorHeader { name: name.to_string(), rows, cols }
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ck.format_version.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for ((name, data), th) in tensors.iter().zip(&header.tensors) {
        if data.len() != th.rows * th.cols {
            return Err(Error::Shape(format!("tensor `{name}` has {} values, expected {}x{}", data.len(), th.rows, th.cols)));
        }
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("file ends at byte {}, needed {} more at {}", self.bytes.len(), n, self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let header_len = usize::try_from(r.u64()?).map_err(|_| Error::CorruptCheckpoint("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;

    let mut payload = Vec::with_capacity(header.tensors.len());
    for th in &header.tensors {
        let n = th.rows.checked_mul(th.cols).and_then(|n| n.checked_mul(8));
        let n = n.ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{}` too large", th.name)))?;
        let raw = r.take(n)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        payload.push((th.name.as_str(), th.rows, th.cols, values));
    }
    let body_end = r.pos;
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if fnv1a(&bytes[..body_end]) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }

    // Rebuild a skeleton from the stored config, then overwrite every tensor.
    let mut model = Model::init(header.config.clone(), &mut Rng::new(0))
        .map_err(|e| Error::CorruptCheckpoint(format!("stored config is invalid: {e}")))?;
    let shape = model.shape();
    let expected: Vec<&str> = all_tensors(&model).iter().map(|(n, _)| *n).collect();
    let found: Vec<&str> = payload.iter().map(|(n, ..)| *n).collect();
    if expected != found {
        return Err(Error::CorruptCheckpoint(format!("tensor list {found:?} does not match {expected:?}")));
    }
    for (name, rows, cols, values) in &payload {
        if (*rows, *cols) != tensor_shape(name, &shape) {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has shape {rows}x{cols}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` holds non-finite values")));
        }
    }
    let dict = &payload[expected.len() - 3].3;
    if dict.as_slice() != model.gru.update_gate.dictionary().elements() {
        return Err(Error::CorruptCheckpoint("dictionary does not match stored config".into()));
    }
    for ((_, dst), (_, _, _, src)) in model.tensors_mut().into_iter().zip(&payload) {
        dst.copy_from_slice(src);
    }
    model.head.bn.running_mean.copy_from_slice(&payload[expected.len() - 2].3);
    model.head.bn.running_var.copy_from_slice(&payload[expected.len() - 1].3);
    model.head.bn.mode = header.bn_mode;

    Ok(Checkpoint {
        format_version: version,
        config_echo: header.config_echo,
        model,
        seed: header.seed,
        iteration: header.iteration,
    })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kafgate::GateVariant;

    fn config(hidden: usize, variant: GateVariant) -> ModelConfig {
        ModelConfig {
            input_size: 3,
            hidden_size: hidden,
            classes: 10,
            variant,
            dict_size: 10,
            dict_lo: -4.0,
            dict_hi: 4.0,
            ridge_epsilon: 1e-4,
            random_alpha_scale: 0.3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    fn perturbed(hidden: usize, variant: GateVariant) -> Model {
        let mut m = Model::init(config(hidden, variant), &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(99);
        for (_, t) in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.normal(0.0, 1e-3));
        }
        m.head.bn.running_mean.iter_mut().for_each(|v| *v = rng.normal(0.0, 1.0));
        m.head.bn.running_var.iter_mut().for_each(|v| *v = 1.0 + rng.unit());
        m.head.bn.mode = BnMode::Eval;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [GateVariant::KAF, GateVariant::STANDARD, GateVariant::KAF_RANDOM] {
            let ck = Checkpoint::new(perturbed(6, variant), "{\"a\":1}".into(), 42, 1234);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&path, &ck).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            for ((_, a), (_, b)) in ck.model.tensors().iter().zip(back.model.tensors().iter()) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let ck = Checkpoint::new(perturbed(4, GateVariant::KAF), String::new(), 1, 2);
        let bytes = encode_checkpoint(&ck).unwrap();
        for cut in [0, 5, 13, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last_payload = bytes.len() - 9;
        flipped[last_payload] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let ck = Checkpoint::new(perturbed(4, GateVariant::KAF), String::new(), 1, 2);
        let mut bytes = encode_checkpoint(&ck).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::VersionMismatch { found: 7, expected: 1 })));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let ck = Checkpoint::new(perturbed(100, GateVariant::KAF), String::new(), 1, 2);
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert!(back.check_shape(&config(100, GateVariant::KAF).shape()).is_ok());
        assert!(matches!(back.check_shape(&config(50, GateVariant::KAF).shape()), Err(Error::Dimension(_))));
    }
}
