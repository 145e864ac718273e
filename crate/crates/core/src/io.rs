//! On-disk formats: checkpoints and raw volumes.
//!
//! A checkpoint is a JSON manifest `<stem>.json` listing every parameter
//! (name, shape, dtype, byte offset) next to a payload `<stem>.bin` holding
//! the values as little-endian `f64`, concatenated in manifest order.
//!
//! A volume is a raw little-endian raster `<name>.vol` in `(D, H, W)` order
//! with a `<name>.json` sidecar `{dims, spacing_mm, dtype}`. Images use
//! `dtype: "f32"`, label maps `dtype: "u8"`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::network::NetworkConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "mamba-home-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub network: NetworkConfig,
    pub step: usize,
    pub payload: String,
    pub params: Vec<ParamEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor>,
}

fn payload_path(manifest: &Path, payload: &str) -> PathBuf {
    manifest.with_file_name(payload)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `<stem>.json` and `<stem>.bin` for `path = <stem>.json`.
pub fn save_checkpoint(path: &Path, network: &NetworkConfig, step: usize, store: &ParamStore) -> Result<()> {
    let payload = path.with_extension("bin");
    let payload_name = payload
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| format_err(path, "checkpoint path has no file name"))?
        .to_string();
    let mut bytes = Vec::with_capacity(store.total_numel() * 8);
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: store.shape(id).to_vec(),
            dtype: "f64".into(),
            offset: bytes.len() as u64,
        });
        for v in store.get(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        network: network.clone(),
        step,
        payload: payload_name,
        params,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&payload, &bytes)?;
    write(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_slice(&read(path)?).map_err(|e| format_err(path, format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(format_err(path, format!("unsupported format `{}`", manifest.format)));
    }
    let payload = payload_path(path, &manifest.payload);
    let bytes = read(&payload)?;
    let mut values = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        if p.dtype != "f64" {
            return Err(format_err(path, format!("{}: unsupported dtype {}", p.name, p.dtype)));
        }
        let n: usize = p.shape.iter().product();
        let start = p.offset as usize;
        let end = start + 8 * n;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| format_err(&payload, format!("{} runs past the payload end", p.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(p.shape.clone(), data)?);
    }
    Ok(Checkpoint { manifest, values })
}

impl Checkpoint {
    /// Copies values into `store` by name; every store parameter must be
    /// present with a matching shape.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let k = self
                .manifest
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            store.set(id, self.values[k].clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    /// Voxel size in millimetres along x (W), y (H), z (D).
    pub spacing_mm: [f64; 3],
    pub dtype: String,
}

impl VolumeHeader {
    /// Spacing reordered to the `(D, H, W)` array axes.
    pub fn axis_spacing(&self) -> [f64; 3] {
        let [x, y, z] = self.spacing_mm;
        [z, y, x]
    }
}

fn sidecar(vol: &Path) -> PathBuf {
    vol.with_extension("json")
}

fn read_header(vol: &Path, dtype: &str) -> Result<VolumeHeader> {
    let path = sidecar(vol);
    let header: VolumeHeader =
        serde_json::from_slice(&read(&path)?).map_err(|e| format_err(&path, format!("bad sidecar: {e}")))?;
    if header.dtype != dtype {
        return Err(format_err(&path, format!("expected dtype {dtype}, found {}", header.dtype)));
    }
    Ok(header)
}

fn write_header(vol: &Path, header: &VolumeHeader) -> Result<()> {
    write(&sidecar(vol), &serde_json::to_vec_pretty(header).expect("header serializes"))
}

/// Reads an `f32` image volume as `f64` values.
pub fn read_image(vol: &Path) -> Result<(VolumeHeader, Vec<f64>)> {
    let header = read_header(vol, "f32")?;
    let bytes = read(vol)?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(format_err(vol, format!("expected {} bytes for {:?}, found {}", 4 * n, header.dims, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, data))
}

pub fn write_image(vol: &Path, dims: [usize; 3], spacing_mm: [f64; 3], data: &[f64]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape("write_image", &dims, &[data.len()]));
    }
    let bytes: Vec<u8> = data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write(vol, &bytes)?;
    write_header(
        vol,
        &VolumeHeader {
            dims,
            spacing_mm,
            dtype: "f32".into(),
        },
    )
}

pub fn read_labels(vol: &Path) -> Result<(VolumeHeader, LabelVolume)> {
    let header = read_header(vol, "u8")?;
    let bytes = read(vol)?;
    let labels = LabelVolume::new(header.dims, bytes).map_err(|_| format_err(vol, "size does not match dims"))?;
    Ok((header, labels))
}

pub fn write_labels(vol: &Path, spacing_mm: [f64; 3], labels: &LabelVolume) -> Result<()> {
    write(vol, &labels.labels)?;
    write_header(
        vol,
        &VolumeHeader {
            dims: labels.dims,
            spacing_mm,
            dtype: "u8".into(),
        },
    )
}
