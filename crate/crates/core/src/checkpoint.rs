//! Checkpoint directories: `manifest.json` plus `tensors.bin` (and
//! `optimizer.bin` when moments are saved).
//!
//! `tensors.bin` is a sequence of segments in parameter traversal order:
//!
//! ```text
//! 0x01 name_len:u16 name ndim:u8 dims:u64*ndim data:f32*
//! 0x02 name_len:u16 name rows:u64 d_head:u64 mode:u8 seed:u64 multiplier:u64 data:f32*
//! ```
//!
//! Tag `0x02` marks a memory table and carries the hash head that addresses
//! it. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{HashHead, TableMode};
use crate::model::{EngramModel, ModelConfig, ParamId, ParamKind};
use crate::numerics::{Real, Tensor};
use crate::training::AdamState;

pub const FORMAT: &str = "engram-ar-checkpoint";
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const TAG_TENSOR: u8 = 0x01;
const TAG_TABLE: u8 = 0x02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: String,
    pub model: ModelConfig,
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub has_optimizer: bool,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_data<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
}

fn table_head<'a, T: Real>(model: &'a EngramModel<T>, id: &ParamId, index: usize) -> Result<&'a HashHead> {
    let layer = id.layer.ok_or_else(|| Error::Format(format!("table {} without a layer", id.name)))?;
    let heads = model
        .hash_heads(layer)
        .ok_or_else(|| Error::Format(format!("no hash heads at layer {layer}")))?;
    let h = heads.first().map_or(0, Vec::len).max(1);
    heads
        .get(index / h)
        .and_then(|b| b.get(index % h))
        .ok_or_else(|| Error::Format(format!("no hash head for {}", id.name)))
}

fn encode_tensors<T: Real>(model: &EngramModel<T>, ids: &[ParamId], tensors: &[&Tensor<T>], tables: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut table_index = vec![0usize; model.backbone().num_layers];
    for (id, t) in ids.iter().zip(tensors) {
        if tables && id.kind == ParamKind::Table {
            let layer = id.layer.expect("tables belong to a layer");
            let head = table_head(model, id, table_index[layer])?;
            table_index[layer] += 1;
            let mode = model.config().engram_at(layer).map_or(TableMode::Learned, |e| e.table_mode);
            out.push(TAG_TABLE);
            put_name(&mut out, &id.name)?;
            out.extend_from_slice(&(t.shape()[0] as u64).to_le_bytes());
            out.extend_from_slice(&(t.shape()[1] as u64).to_le_bytes());
            out.push(mode.code());
            out.extend_from_slice(&head.seed.to_le_bytes());
            out.extend_from_slice(&head.multiplier.to_le_bytes());
        } else {
            out.push(TAG_TENSOR);
            put_name(&mut out, &id.name)?;
            let nd = u8::try_from(t.shape().len()).map_err(|_| Error::Format("too many dims".into()))?;
            out.push(nd);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        put_data(&mut out, t);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated segment at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Segment {
    name: String,
    shape: Vec<usize>,
    table: Option<(TableMode, u64, u64)>,
    data: Vec<f32>,
}

fn decode_segments(bytes: &[u8]) -> Result<Vec<Segment>> {
    let mut r = Reader { bytes, pos: 0 };
    let mut out = Vec::new();
    while !r.done() {
        let tag = r.u8()?;
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let (shape, table) = match tag {
            TAG_TENSOR => {
                let nd = r.u8()? as usize;
                let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                (shape, None)
            }
            TAG_TABLE => {
                let rows = r.u64()? as usize;
                let dh = r.u64()? as usize;
                let mode = TableMode::from_code(r.u8()?)?;
                let seed = r.u64()?;
                let mult = r.u64()?;
                (vec![rows, dh], Some((mode, seed, mult)))
            }
            t => return Err(Error::Format(format!("unknown segment tag {t:#04x} for {name}"))),
        };
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("segment too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Segment {
            name,
            shape,
            table,
            data,
        });
    }
    Ok(out)
}

/// Write a checkpoint directory. Saving is deterministic: identical models
/// and metadata give byte-identical files.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &EngramModel<T>,
    step: usize,
    seed: u64,
    optimizer: Option<&AdamState<T>>,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ids = model.param_ids();
    let leaves = model.params.leaves();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION.into(),
        model: model.config().clone(),
        step,
        seed,
        tensors: ids
            .iter()
            .zip(&leaves)
            .map(|(id, t)| TensorEntry {
                name: id.name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        has_optimizer: optimizer.is_some(),
        extra,
    };
    fs::write(dir.join("tensors.bin"), encode_tensors(model, &ids, &leaves, true)?)?;
    if let Some(opt) = optimizer {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(opt.step as u64).to_le_bytes());
        let renamed = |prefix: &str| -> Vec<ParamId> {
            ids.iter()
                .map(|id| ParamId {
                    name: format!("{prefix}.{}", id.name),
                    kind: ParamKind::Matrix,
                    layer: id.layer,
                })
                .collect()
        };
        buf.extend(encode_tensors(model, &renamed("m"), &opt.m.leaves(), false)?);
        buf.extend(encode_tensors(model, &renamed("v"), &opt.v.leaves(), false)?);
        fs::write(dir.join("optimizer.bin"), buf)?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("not a checkpoint: format {:?}", m.format)));
    }
    Ok(m)
}

fn tensors_from_segments<T: Real>(segments: Vec<Segment>, ids: &[ParamId]) -> Result<Vec<Tensor<T>>> {
    if segments.len() != ids.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            ids.len(),
            segments.len()
        )));
    }
    segments
        .into_iter()
        .zip(ids)
        .map(|(s, id)| {
            if s.name != id.name {
                return Err(Error::Format(format!("expected tensor {}, found {}", id.name, s.name)));
            }
            Tensor::from_vec(s.shape, s.data.into_iter().map(|x| T::from_f64(f64::from(x))).collect())
        })
        .collect()
}

/// Load a checkpoint; table segments must carry the hash heads the stored
/// configuration derives.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(EngramModel<T>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let template = EngramModel::<T>::init(manifest.model.clone(), 0)?;
    let ids = template.param_ids();
    let segments = decode_segments(&fs::read(dir.join("tensors.bin"))?)?;
    let mut table_index = vec![0usize; template.backbone().num_layers];
    for (s, id) in segments.iter().zip(&ids) {
        match (s.table, id.kind) {
            (Some((mode, seed, mult)), ParamKind::Table) => {
                let layer = id.layer.expect("tables belong to a layer");
                let head = table_head(&template, id, table_index[layer])?;
                table_index[layer] += 1;
                let want = manifest.model.engram_at(layer).map(|e| e.table_mode);
                if head.seed != seed || head.multiplier != mult || want != Some(mode) {
                    return Err(Error::Format(format!("hash head or mode mismatch for {}", s.name)));
                }
            }
            (None, ParamKind::Table) | (Some(_), _) => {
                return Err(Error::Format(format!("segment kind mismatch for {}", s.name)));
            }
            (None, _) => {}
        }
    }
    let tensors = tensors_from_segments(segments, &ids)?;
    let params = template.params.from_leaves(tensors)?;
    Ok((EngramModel::new(manifest.model.clone(), params)?, manifest))
}

/// Optimizer moments saved next to a checkpoint, if any.
pub fn load_optimizer<T: Real>(dir: &Path, model: &EngramModel<T>) -> Result<Option<AdamState<T>>> {
    let path = dir.join("optimizer.bin");
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Format("truncated optimizer state".into()));
    }
    let step = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let mut segments = decode_segments(&bytes[8..])?;
    let ids = model.param_ids();
    if segments.len() != 2 * ids.len() {
        return Err(Error::Format("optimizer state does not match the model".into()));
    }
    let v_segments = segments.split_off(ids.len());
    let named = |prefix: &str| -> Vec<ParamId> {
        ids.iter()
            .map(|id| ParamId {
                name: format!("{prefix}.{}", id.name),
                kind: id.kind,
                layer: id.layer,
            })
            .collect()
    };
    let m = model.params.from_leaves(tensors_from_segments(segments, &named("m"))?)?;
    let v = model.params.from_leaves(tensors_from_segments(v_segments, &named("v"))?)?;
    Ok(Some(AdamState { step, m, v }))
}
