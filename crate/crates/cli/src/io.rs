//! On-disk formats: atomic writes, canonical JSON, CSV tables, raw volumes
//! with JSON sidecars, binary checkpoints and checksum manifests.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use starfm_core::data::Batch;
use starfm_core::models::{ModelDims, ModelHandle, ModelKind};
use starfm_core::params::{ParamVector, Segment};
use starfm_core::volume::{Dims, MaskVolume, Spacing, VolumeGrid};

use crate::canonical::{self, format_f64};
use crate::error::{CliError, CliResult};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, canonical::to_string(value)?.as_bytes())
}

/// Reads an input file; a missing or unreadable file is an input error.
pub fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// CSV text with a header row; fields must not need quoting.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| CliError::input(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::input(format!("csv: {e}")))
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = read_input(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let err = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    Ok((header, rows))
}

pub fn opt_f64(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

pub fn parse_f64(s: &str, what: &str) -> CliResult<f64> {
    s.trim().parse().map_err(|_| CliError::input(format!("{what}: not a number: {s:?}")))
}

/// Feature rows with labels and, optionally, importance weights.
pub fn batch_csv(batch: &Batch, weights: Option<&[f64]>) -> CliResult<Vec<u8>> {
    let mut header: Vec<String> = (0..batch.dim).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    if weights.is_some() {
        header.push("weight".into());
    }
    let rows: Vec<Vec<String>> = (0..batch.len())
        .map(|i| {
            let mut r: Vec<String> = batch.x(i).iter().map(|v| format_f64(*v)).collect();
            r.push(batch.y(i).to_string());
            if let Some(w) = weights {
                r.push(format_f64(w[i]));
            }
            r
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn read_batch_csv(path: &Path, dim: usize) -> CliResult<(Batch, Option<Vec<f64>>)> {
    let (header, rows) = read_csv(path)?;
    let has_weight = header.last().is_some_and(|h| h == "weight");
    let expect = dim + 1 + usize::from(has_weight);
    if header.len() != expect || header.get(dim).map(String::as_str) != Some("label") {
        return Err(CliError::input(format!("{}: expected {dim} feature columns then `label`", path.display())));
    }
    let mut features = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    let mut weights = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let what = format!("{} row {}", path.display(), i + 1);
        for v in &r[..dim] {
            features.push(parse_f64(v, &what)?);
        }
        labels.push(r[dim].parse().map_err(|_| CliError::input(format!("{what}: bad label {:?}", r[dim])))?);
        if has_weight {
            weights.push(parse_f64(&r[dim + 1], &what)?);
        }
    }
    let batch = Batch::new(dim, features, labels).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok((batch, has_weight.then_some(weights)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    Float32,
    Uint8,
}

impl VoxelType {
    fn tag(self) -> &'static str {
        match self {
            VoxelType::Float32 => "float32",
            VoxelType::Uint8 => "uint8",
        }
    }

    fn size(self) -> usize {
        match self {
            VoxelType::Float32 => 4,
            VoxelType::Uint8 => 1,
        }
    }
}

/// JSON sidecar describing a raw volume payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub byte_order: String,
    pub element_order: String,
}

impl VolumeHeader {
    fn new(dims: Dims, spacing: Spacing, ty: VoxelType) -> Self {
        VolumeHeader {
            dims: dims.as_array(),
            spacing: spacing.0,
            dtype: ty.tag().into(),
            byte_order: "little".into(),
            element_order: "x_fastest".into(),
        }
    }
}

fn sidecar(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes `<stem>.raw` and `<stem>.json`; returns both paths.
pub fn write_image(raw: &Path, v: &VolumeGrid) -> CliResult<[PathBuf; 2]> {
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_atomic(raw, &payload)?;
    let side = sidecar(raw);
    write_json(&side, &VolumeHeader::new(v.dims, v.spacing, VoxelType::Float32))?;
    Ok([raw.to_path_buf(), side])
}

pub fn write_mask(raw: &Path, m: &MaskVolume) -> CliResult<[PathBuf; 2]> {
    write_atomic(raw, &m.data)?;
    let side = sidecar(raw);
    write_json(&side, &VolumeHeader::new(m.dims, m.spacing, VoxelType::Uint8))?;
    Ok([raw.to_path_buf(), side])
}

fn header_error(path: &Path, field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::input(format!("{}: field `{field}`: {msg}", path.display()))
}

/// Validates a sidecar field by field so errors name the offending key.
fn read_header(path: &Path, ty: VoxelType) -> CliResult<(Dims, Spacing)> {
    let bytes = read_input(path)?;
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let obj = v.as_object().ok_or_else(|| CliError::input(format!("{}: header must be a JSON object", path.display())))?;
    const FIELDS: [&str; 5] = ["dims", "spacing", "dtype", "byte_order", "element_order"];
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(header_error(path, k, "unknown field"));
    }
    let get = |k: &str| obj.get(k).ok_or_else(|| header_error(path, k, "missing"));
    let triple = |k: &str| -> CliResult<Vec<&Value>> {
        match get(k)?.as_array() {
            Some(a) if a.len() == 3 => Ok(a.iter().collect()),
            _ => Err(header_error(path, k, "expected an array of 3 numbers")),
        }
    };
    let dims = triple("dims")?
        .iter()
        .map(|d| d.as_u64().filter(|n| *n > 0).map(|n| n as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| header_error(path, "dims", "entries must be positive integers"))?;
    let spacing = triple("spacing")?
        .iter()
        .map(|s| s.as_f64().filter(|x| *x > 0.0 && x.is_finite()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| header_error(path, "spacing", "entries must be positive numbers"))?;
    let text = |k: &str, want: &str| -> CliResult<()> {
        match get(k)?.as_str() {
            Some(s) if s == want => Ok(()),
            other => Err(header_error(path, k, format!("expected \"{want}\", got {other:?}"))),
        }
    };
    text("dtype", ty.tag())?;
    text("byte_order", "little")?;
    text("element_order", "x_fastest")?;
    Ok((Dims::new(dims[0], dims[1], dims[2]), Spacing([spacing[0], spacing[1], spacing[2]])))
}

fn read_payload(raw: &Path, ty: VoxelType) -> CliResult<(Dims, Spacing, Vec<u8>)> {
    let side = sidecar(raw);
    let (dims, spacing) = read_header(&side, ty)?;
    let payload = read_input(raw)?;
    let want = dims.len() * ty.size();
    if payload.len() != want {
        return Err(header_error(&side, "dims", format!("{:?} implies {want} payload bytes, found {}", dims.as_array(), payload.len())));
    }
    Ok((dims, spacing, payload))
}

pub fn read_image(raw: &Path) -> CliResult<VolumeGrid> {
    let (dims, spacing, payload) = read_payload(raw, VoxelType::Float32)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    VolumeGrid::new(dims, spacing, data).map_err(|e| CliError::input(format!("{}: {e}", raw.display())))
}

pub fn read_mask(raw: &Path) -> CliResult<MaskVolume> {
    let (dims, spacing, payload) = read_payload(raw, VoxelType::Uint8)?;
    MaskVolume::new(dims, spacing, payload).map_err(|e| CliError::input(format!("{}: {e}", raw.display())))
}

const CKPT_MAGIC: &[u8; 4] = b"SFMP";
const CKPT_VERSION: u32 = 1;

/// Binary checkpoint, all integers and floats little-endian:
/// `"SFMP"`, u32 version, u32 model kind, u64 input/hidden/classes,
/// f64 temperature, u64 segment count, per segment (u64 name length, UTF-8
/// name, u64 offset, u64 length), u64 value count, f64 values.
pub fn checkpoint_bytes(m: &ModelHandle) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CKPT_MAGIC);
    b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    b.extend_from_slice(&m.kind.code().to_le_bytes());
    for d in [m.dims.input, m.dims.hidden, m.dims.classes] {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    b.extend_from_slice(&m.temperature.to_le_bytes());
    let segs = m.params.segments();
    b.extend_from_slice(&(segs.len() as u64).to_le_bytes());
    for s in segs {
        b.extend_from_slice(&(s.name.len() as u64).to_le_bytes());
        b.extend_from_slice(s.name.as_bytes());
        b.extend_from_slice(&(s.offset as u64).to_le_bytes());
        b.extend_from_slice(&(s.len as u64).to_le_bytes());
    }
    let vals = m.params.values();
    b.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::input("checkpoint truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CliError::input("checkpoint size field overflows"))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> CliResult<ModelHandle> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(CliError::input("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(CliError::input(format!("unsupported checkpoint version {version}")));
    }
    let code = c.u32()?;
    let kind = ModelKind::from_code(code).ok_or_else(|| CliError::input(format!("unknown model kind {code}")))?;
    let dims = ModelDims { input: c.u64()?, hidden: c.u64()?, classes: c.u64()? };
    let temperature = c.f64()?;
    let nseg = c.u64()?;
    let mut segments = Vec::new();
    for _ in 0..nseg {
        let len = c.u64()?;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| CliError::input("segment name is not UTF-8"))?;
        segments.push(Segment::new(name, c.u64()?, c.u64()?));
    }
    let n = c.u64()?;
    let values = (0..n).map(|_| c.f64()).collect::<CliResult<Vec<_>>>()?;
    if c.at != bytes.len() {
        return Err(CliError::input("trailing bytes after checkpoint"));
    }
    let params = ParamVector::new(values, segments)?;
    let model = ModelHandle::from_values(kind, dims, temperature, params.values().to_vec())?;
    if model.params.segments() != params.segments() {
        return Err(CliError::input("checkpoint segment layout does not match the model"));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

/// Checksums of `files`, recorded relative to `root` and sorted by path.
pub fn build_manifest(root: &Path, files: &[PathBuf]) -> CliResult<Manifest> {
    let mut entries = files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(p);
            let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(ManifestEntry { path, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) })
        })
        .collect::<CliResult<Vec<_>>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { files: entries })
}
