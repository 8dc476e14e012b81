//! Checkpoint file.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "MC3C"
//! 4       1      version (1)
//! 5       3      padding (0)
//! 8       8      u64 length L of the JSON config block
//! 16      L      config block: architecture, step, metadata
//! ...     8      u64 entry count
//! ...            per entry: u32 name length, UTF-8 name, one tensor container (f64)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SegModel};
use crate::error::{Error, Result};
use crate::synthgen::io::{decode_tensor, encode_tensor, DType};
use crate::synthgen::ClassSplit;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MC3C";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Class ids behind the base and novel heads, when known.
    pub split: Option<ClassSplit>,
    /// Final log-variances of the loss weighting, for novel-step models.
    pub loss_log_variances: Option<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u32,
    meta: CheckpointMeta,
}

pub fn encode_checkpoint(model: &SegModel) -> Result<Vec<u8>> {
    let header = Header {
        model: model.config.clone(),
        step: model.step,
        meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend(encode_tensor(&p.value, DType::F64)?);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated checkpoint while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<SegModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.take(4, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let len = usize::try_from(r.u64("config length")?).map_err(|_| Error::format(path, "config length overflows"))?;
    let header: Header = serde_json::from_slice(r.take(len, "config block")?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let mut model = SegModel::new(header.model, 0)?;
    model.step = header.step;
    model.meta = header.meta;
    let count = r.u64("entry count")?;
    let mut seen = BTreeSet::new();
    let mut unexpected = Vec::new();
    for _ in 0..count {
        let n = u32::from_le_bytes(r.take(4, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(n, "name")?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let (t, _, used) = decode_tensor(&r.bytes[r.pos..], path)?;
        r.pos += used;
        match model.params.position(&name) {
            Some(i) => {
                model.params.set_value(i, t).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
                seen.insert(name);
            }
            None => unexpected.push(name),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let missing: Vec<String> = model
        .params
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| !seen.contains(n))
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: parameters do not match the architecture; missing [{}], unexpected [{}]",
            path.display(),
            missing.join(", "),
            unexpected.join(", ")
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
