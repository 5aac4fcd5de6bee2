//! Binary containers: `VSMC` model checkpoints and `VSTN` spectrogram tensors.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "VSMC" | u32 version
//! u64 len | graph spec JSON
//! u64 len | metadata JSON
//! u64 len | probe record JSON
//! u32 tensor count
//!   per tensor: u16 name len | name | u8 dtype (0 = f32) | u8 ndim | u64 dims[ndim] | u64 offset | u64 bytes
//! payload (offsets relative to its start, packed in table order)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Tensor layout: `"VSTN" | u32 ndim | u64 dims[ndim] | f32 payload | u32 CRC-32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::keyed_rng;
use crate::nn::graph::{ForwardOpts, Graph, GraphSpec};
use crate::nn::{NnError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSMC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 4] = b"VSTN";
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt tensor file: {0}")]
    CorruptTensor(String),
    #[error("probe activation at '{layer}' does not reproduce the recorded hash")]
    ProbeMismatch { layer: String },
    #[error(transparent)]
    Graph(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub seed: u64,
    pub created_at: String,
    pub source_manifest_hash: String,
    #[serde(default)]
    pub model: Option<String>,
}

/// Hashes of a fixed synthetic probe input and of the graph's activation at
/// `layer` (the cut point when the graph has one, else the output layer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub layer: String,
    pub input_sha256: String,
    pub activation_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub graph: Graph<f32>,
    pub meta: CheckpointMeta,
    pub probe: ProbeRecord,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn f32_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn hash_f32(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Deterministic probe input in `[0, 1)` for a sample shape, batch of one.
pub fn probe_input(sample_shape: &[usize]) -> Tensor<f32> {
    let mut rng = keyed_rng!(0u64, "probe", sample_shape.len());
    let n: usize = sample_shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f32>()).collect();
    let mut shape = vec![1];
    shape.extend_from_slice(sample_shape);
    Tensor::from_vec(&shape, data).expect("probe shape")
}

/// Layer recorded by the probe: the cut point if the graph contains it, else the last layer.
pub fn probe_layer(graph: &Graph<f32>) -> String {
    match graph.cut_point() {
        Some(c) if graph.layer_index(c).is_some() => c.to_string(),
        _ => graph.layers().last().map(|l| l.name().to_string()).unwrap_or_default(),
    }
}

pub fn probe_activation(graph: &Graph<f32>, layer: &str) -> Result<Vec<f32>, PersistError> {
    let i = graph.layer_index(layer).ok_or_else(|| NnError::UnknownLayer(layer.into()))?;
    let x = probe_input(graph.input_shape());
    let trace = graph.forward_until(&x, ForwardOpts::eval(), i)?;
    Ok(trace.output(i).expect("computed").to_vec())
}

pub fn probe_record(graph: &Graph<f32>) -> Result<ProbeRecord, PersistError> {
    let layer = probe_layer(graph);
    let act = probe_activation(graph, &layer)?;
    Ok(ProbeRecord {
        input_sha256: hash_f32(probe_input(graph.input_shape()).data()),
        activation_sha256: hash_f32(&act),
        layer,
    })
}

/// SHA-256 over the names, shapes and little-endian bytes of every parameter
/// and buffer of the given layers (all layers when `layers` is `None`).
pub fn weights_hash(graph: &Graph<f32>, layers: Option<&[String]>) -> String {
    let mut h = Sha256::new();
    for (name, t) in graph.named_tensors() {
        let lname = name.rsplit_once('/').map(|p| p.0).unwrap_or(&name);
        if let Some(sel) = layers {
            if !sel.iter().any(|s| s == lname) {
                continue;
            }
        }
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn encode_checkpoint(graph: &Graph<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>, PersistError> {
    Ok(encode_with_probe(graph, meta)?.0)
}

fn encode_with_probe(graph: &Graph<f32>, meta: &CheckpointMeta) -> Result<(Vec<u8>, ProbeRecord), PersistError> {
    let probe = probe_record(graph)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_blob(&mut out, &serde_json::to_vec(&graph.spec()).expect("spec json"));
    put_blob(&mut out, &serde_json::to_vec(meta).expect("meta json"));
    put_blob(&mut out, &serde_json::to_vec(&probe).expect("probe json"));

    let tensors = graph.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let bytes = (t.len() * 4) as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&bytes.to_le_bytes());
        offset += bytes;
    }
    for (_, t) in &tensors {
        out.extend_from_slice(&f32_le_bytes(t.data()));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok((out, probe))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            PersistError::CorruptCheckpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PersistError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, PersistError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn blob(&mut self) -> Result<&'a [u8], PersistError> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| PersistError::CorruptCheckpoint("oversized field".into()))?)
    }
}

fn json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T, PersistError> {
    serde_json::from_slice(bytes).map_err(|e| PersistError::CorruptCheckpoint(format!("{what}: {e}")))
}

/// Parse and validate a checkpoint image. The probe activation is recomputed
/// and must match the recorded hash.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PersistError> {
    let corrupt = |m: &str| PersistError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 12 {
        return Err(corrupt("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("CRC mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let spec: GraphSpec = json(r.blob()?, "graph descriptor")?;
    let meta: CheckpointMeta = json(r.blob()?, "metadata")?;
    let probe: ProbeRecord = json(r.blob()?, "probe record")?;

    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name not UTF-8"))?;
        if r.u8()? != DTYPE_F32 {
            return Err(corrupt("unknown dtype"));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let (offset, len) = (r.u64()?, r.u64()?);
        table.push((name, dims, offset, len));
    }
    let payload = &body[r.pos..];
    let mut expected = 0u64;
    let mut tensors = BTreeMap::new();
    for (name, dims, offset, len) in table {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("dims overflow"))?;
        if offset != expected || (n as u64).checked_mul(4) != Some(len) || len > payload.len() as u64 - offset {
            return Err(corrupt(&format!("tensor '{name}' has an inconsistent table entry")));
        }
        let raw = &payload[offset as usize..(offset + len) as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        expected += len;
        if tensors.insert(name.clone(), Tensor::from_vec(&dims, data)?).is_some() {
            return Err(corrupt(&format!("duplicate tensor '{name}'")));
        }
    }
    if expected != payload.len() as u64 {
        return Err(corrupt("payload size does not match tensor table"));
    }
    let graph = Graph::from_parts(spec, &tensors)?;
    let act = probe_activation(&graph, &probe.layer)?;
    if hash_f32(probe_input(graph.input_shape()).data()) != probe.input_sha256 || hash_f32(&act) != probe.activation_sha256 {
        return Err(PersistError::ProbeMismatch { layer: probe.layer });
    }
    Ok(Checkpoint { graph, meta, probe })
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let mut tmp = PathBuf::from(path);
    let mut fname = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    fname.push(".tmp");
    tmp.set_file_name(fname);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write atomically (temp file then rename). Returns the probe record stored.
pub fn save_checkpoint(graph: &Graph<f32>, path: &Path, meta: &CheckpointMeta) -> Result<ProbeRecord, PersistError> {
    let (bytes, probe) = encode_with_probe(graph, meta)?;
    atomic_write(path, &bytes)?;
    Ok(probe)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PersistError> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(8 + dims.len() * 8 + data.len() * 4 + 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out.extend_from_slice(&f32_le_bytes(data));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), PersistError> {
    let bad = |m: &str| PersistError::CorruptTensor(m.to_string());
    if bytes.len() < 12 {
        return Err(bad("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(bad("CRC mismatch"));
    }
    if &body[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let ndim = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let header = ndim.checked_mul(8).and_then(|b| b.checked_add(8)).filter(|&h| h <= body.len());
    let Some(header) = header else {
        return Err(bad("truncated header"));
    };
    let dims: Vec<usize> =
        body[8..header].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(4));
    if n != Some(body.len() - header) {
        return Err(bad("payload size does not match dims"));
    }
    let data = body[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dims, data))
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<(), PersistError> {
    atomic_write(path, &encode_tensor(dims, data))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>), PersistError> {
    decode_tensor(&fs::read(path)?)
}
