//! Binary file formats.
//!
//! Every file is `magic`, a little-endian `u32` header length, a UTF-8 JSON
//! header of that length, then a raw little-endian payload whose exact size
//! follows from the header.
//!
//! * `ONIXVOL1`: `f32` volume data, channel-major, `z` slowest within a
//!   channel (the [`GridSpec`] linear index).
//! * `ONIXPRJ1`: `f32` projection data, view-major, then channel-major, then
//!   row-major pixels.
//! * `ONIXCKPT1`: a manifest with a parameter table, followed by the
//!   concatenated parameter blobs in the training precision.
//!
//! ```
//! use sparseview::io::{volume_from_bytes, volume_to_bytes};
//! use sparseview::{GridSpec, RefractiveVolume};
//!
//! let grid = GridSpec::centered([2, 3, 4], 1e-6)?;
//! let mut vol = RefractiveVolume::zeros(grid);
//! vol.beta[5] = 0.25;
//! let bytes = volume_to_bytes(&vol, 18.0)?;
//! let (back, header) = volume_from_bytes(&bytes)?;
//! assert_eq!(back.beta[5], 0.25);
//! assert_eq!(header.dims, [2, 3, 4]);
//! # Ok::<(), sparseview::Error>(())
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldModel};
use crate::geometry::{GridSpec, Vec3, ViewGeometry};
use crate::image::Image;
use crate::nnkit::{ParamStore, Scalar, Tensor};
use crate::physics::Channel;
use crate::projector::{ContrastImage, ProjectionStack};
use crate::volume::RefractiveVolume;

pub const VOLUME_MAGIC: &[u8; 8] = b"ONIXVOL1";
pub const PROJECTION_MAGIC: &[u8; 8] = b"ONIXPRJ1";
pub const CHECKPOINT_MAGIC: &[u8; 9] = b"ONIXCKPT1";

const MAX_HEADER: usize = 64 << 20;

fn frame<H: Serialize>(magic: &[u8], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Header("header too large".into()))?;
    let mut out = Vec::with_capacity(magic.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a file into its parsed header and payload bytes.
fn unframe<'a, H: DeserializeOwned>(magic: &[u8], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let found = &bytes[..magic.len().min(bytes.len())];
    if found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let rest = &bytes[magic.len()..];
    if rest.len() < 4 {
        return Err(Error::PayloadLength {
            expected: magic.len() + 4,
            found: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_HEADER {
        return Err(Error::Header(format!("header length {len} exceeds limit")));
    }
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(Error::PayloadLength {
            expected: magic.len() + 4 + len,
            found: bytes.len(),
        });
    }
    let mut de = serde_json::Deserializer::from_slice(&rest[..len]);
    let header = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, &rest[len..]))
}

fn check_payload(payload: &[u8], expected: usize, header_bytes: usize) -> Result<()> {
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected: header_bytes + expected,
            found: header_bytes + payload.len(),
        });
    }
    Ok(())
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Volume channel names on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeChannel {
    Delta,
    Beta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size_m: f64,
    pub channels: Vec<VolumeChannel>,
    #[serde(rename = "energy_keV")]
    pub energy_kev: f64,
    pub origin: [f64; 3],
}

pub fn volume_to_bytes(vol: &RefractiveVolume, energy_kev: f64) -> Result<Vec<u8>> {
    let g = &vol.grid;
    let header = VolumeHeader {
        dims: g.dims,
        voxel_size_m: g.voxel_size,
        channels: vec![VolumeChannel::Delta, VolumeChannel::Beta],
        energy_kev,
        origin: g.origin.to_array(),
    };
    let mut payload = Vec::with_capacity(8 * g.len());
    push_f32(&mut payload, &vol.delta);
    push_f32(&mut payload, &vol.beta);
    frame(VOLUME_MAGIC, &header, &payload)
}

/// Parses a volume; channels absent from the file are zero.
pub fn volume_from_bytes(bytes: &[u8]) -> Result<(RefractiveVolume, VolumeHeader)> {
    let (header, payload): (VolumeHeader, _) = unframe(VOLUME_MAGIC, bytes)?;
    let grid = GridSpec::new(header.dims, header.voxel_size_m, Vec3::from_array(header.origin))
        .map_err(|e| Error::Header(e.to_string()))?;
    let mut seen = header.channels.clone();
    seen.dedup();
    if seen.len() != header.channels.len() || header.channels.is_empty() || header.channels.len() > 2 {
        return Err(Error::Header(format!("bad channel list {:?}", header.channels)));
    }
    let n = grid.len();
    check_payload(payload, 4 * n * header.channels.len(), bytes.len() - payload.len())?;
    let mut vol = RefractiveVolume::zeros(grid);
    for (i, c) in header.channels.iter().enumerate() {
        let data = read_f32(&payload[4 * n * i..4 * n * (i + 1)]);
        match c {
            VolumeChannel::Delta => vol.delta = data,
            VolumeChannel::Beta => vol.beta = data,
        }
    }
    Ok((vol, header))
}

pub fn write_volume(path: impl AsRef<Path>, vol: &RefractiveVolume, energy_kev: f64) -> Result<()> {
    write_file(path.as_ref(), &volume_to_bytes(vol, energy_kev)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<(RefractiveVolume, VolumeHeader)> {
    volume_from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeader {
    pub n_views: usize,
    #[serde(rename = "H")]
    pub rows: usize,
    #[serde(rename = "W")]
    pub cols: usize,
    pub pixel_size_m: f64,
    #[serde(rename = "energy_keV")]
    pub energy_kev: f64,
    pub channels: Vec<Channel>,
    pub angles_rad: Vec<f64>,
}

pub fn projections_to_bytes(stack: &ProjectionStack) -> Result<Vec<u8>> {
    stack.validate()?;
    let (rows, cols) = stack.detector_dims();
    let channels = stack.channels();
    let header = ProjectionHeader {
        n_views: stack.len(),
        rows,
        cols,
        pixel_size_m: stack.images[0].view.pixel_size,
        energy_kev: stack.energy_kev,
        channels: channels.clone(),
        angles_rad: stack.angles(),
    };
    let mut payload = Vec::with_capacity(4 * stack.len() * channels.len() * rows * cols);
    for im in &stack.images {
        for &c in &channels {
            push_f32(&mut payload, &im.channel(c).expect("validated").data);
        }
    }
    frame(PROJECTION_MAGIC, &header, &payload)
}

pub fn projections_from_bytes(bytes: &[u8]) -> Result<ProjectionStack> {
    let (h, payload): (ProjectionHeader, _) = unframe(PROJECTION_MAGIC, bytes)?;
    if h.angles_rad.len() != h.n_views {
        return Err(Error::Header(format!(
            "{} angles for {} views",
            h.angles_rad.len(),
            h.n_views
        )));
    }
    let has = |c| h.channels.contains(&c);
    if !has(Channel::Attenuation) || h.channels.len() != if has(Channel::Phase) { 2 } else { 1 } {
        return Err(Error::Header(format!("bad channel list {:?}", h.channels)));
    }
    let plane = h.rows * h.cols;
    let nc = h.channels.len();
    check_payload(payload, 4 * h.n_views * nc * plane, bytes.len() - payload.len())?;
    let mut images = Vec::with_capacity(h.n_views);
    for (v, &angle) in h.angles_rad.iter().enumerate() {
        let view = ViewGeometry::new(angle, (h.rows, h.cols), h.pixel_size_m, v).map_err(|e| Error::Header(e.to_string()))?;
        let mut att = None;
        let mut phase = None;
        for (ci, &c) in h.channels.iter().enumerate() {
            let off = 4 * (v * nc + ci) * plane;
            let img = Image::from_vec(h.rows, h.cols, read_f32(&payload[off..off + 4 * plane]));
            match c {
                Channel::Attenuation => att = Some(img),
                Channel::Phase => phase = Some(img),
            }
        }
        images.push(ContrastImage {
            attenuation: att.expect("checked"),
            phase,
            view,
        });
    }
    ProjectionStack::new(images, h.energy_kev).map_err(|e| Error::Header(e.to_string()))
}

pub fn write_projections(path: impl AsRef<Path>, stack: &ProjectionStack) -> Result<()> {
    write_file(path.as_ref(), &projections_to_bytes(stack)?)
}

pub fn read_projections(path: impl AsRef<Path>) -> Result<ProjectionStack> {
    projections_from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub dtype: String,
    #[serde(rename = "energy_keV")]
    pub energy_kev: f64,
    pub config: FieldConfig,
    pub parameters: Vec<ParamEntry>,
    /// Free-form training state (iteration, epoch, loss, seed).
    #[serde(default)]
    pub state: serde_json::Value,
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Header(format!("unsupported dtype {other}"))),
    }
}

pub fn checkpoint_to_bytes<S: Scalar>(model: &FieldModel<S>, state: serde_json::Value) -> Result<Vec<u8>> {
    let width = dtype_width(S::DTYPE)?;
    let mut payload = Vec::with_capacity(width * model.params.num_scalars());
    let mut parameters = Vec::new();
    for (name, t) in model.params.iter() {
        parameters.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            dtype: S::DTYPE.to_string(),
        });
        for &v in t.data() {
            if width == 8 {
                payload.extend_from_slice(&v.as_f64().to_le_bytes());
            } else {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let manifest = CheckpointManifest {
        dtype: S::DTYPE.to_string(),
        energy_kev: model.energy_kev,
        config: model.config.clone(),
        parameters,
        state,
    };
    frame(CHECKPOINT_MAGIC, &manifest, &payload)
}

/// Loads a checkpoint into precision `S`, converting if the stored dtype
/// differs. The parameter table must match the shapes the config implies.
pub fn checkpoint_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(FieldModel<S>, CheckpointManifest)> {
    let (m, payload): (CheckpointManifest, _) = unframe(CHECKPOINT_MAGIC, bytes)?;
    let header_bytes = bytes.len() - payload.len();
    let mut expected = 0;
    for e in &m.parameters {
        if e.offset != expected {
            return Err(Error::Header(format!("parameter {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        expected += dtype_width(&e.dtype)? * e.shape.iter().product::<usize>();
    }
    check_payload(payload, expected, header_bytes)?;
    let template = FieldModel::<S>::new(m.config.clone(), m.energy_kev, 0).map_err(|e| Error::Header(e.to_string()))?;
    let mut params = ParamStore::new();
    for e in &m.parameters {
        let n: usize = e.shape.iter().product();
        let width = dtype_width(&e.dtype)?;
        let raw = &payload[e.offset..e.offset + width * n];
        let data: Vec<S> = if width == 8 {
            raw.chunks_exact(8)
                .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| S::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()
        };
        let want = template.params.get(&e.name).map_err(|_| Error::UnknownParameter(e.name.clone()))?;
        if want.shape() != e.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                left: want.shape().to_vec(),
                right: e.shape.clone(),
            });
        }
        params.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
    }
    if params.len() != template.params.len() {
        let missing = template.params.names().find(|n| params.get(n).is_err()).unwrap_or_default();
        return Err(Error::Header(format!("checkpoint lacks parameter {missing}")));
    }
    Ok((
        FieldModel {
            config: m.config.clone(),
            params,
            energy_kev: m.energy_kev,
        },
        m,
    ))
}

pub fn write_checkpoint<S: Scalar>(path: impl AsRef<Path>, model: &FieldModel<S>, state: serde_json::Value) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_to_bytes(model, state)?)
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(FieldModel<S>, CheckpointManifest)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
