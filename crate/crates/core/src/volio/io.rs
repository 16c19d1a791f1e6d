use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMask, Volume};
use crate::error::{Error, Result};
use crate::grid::voxel_count;

const HEADER_SUFFIX: &str = ".hdr.json";
const RAW_SUFFIX: &str = ".raw";
const LABEL_INFIX: &str = ".label";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

/// Sidecar describing a raw C-order payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub shape: [usize; 3],
    pub dtype: Dtype,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub byte_order: String,
}

/// Strips a trailing `.hdr.json` or `.raw` so either file of a pair names the pair.
fn stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(HEADER_SUFFIX)
        .or_else(|| s.strip_suffix(RAW_SUFFIX))
        .unwrap_or(&s);
    PathBuf::from(base)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn header_path(path: &Path) -> PathBuf {
    with_suffix(&stem(path), HEADER_SUFFIX)
}

pub fn raw_path(path: &Path) -> PathBuf {
    with_suffix(&stem(path), RAW_SUFFIX)
}

fn label_stem(path: &Path) -> PathBuf {
    with_suffix(&stem(path), LABEL_INFIX)
}

fn read_header(stem: &Path) -> Result<Header> {
    let path = with_suffix(stem, HEADER_SUFFIX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if header.byte_order != "little" {
        return Err(Error::format(&path, format!("unsupported byte order `{}`", header.byte_order)));
    }
    Ok(header)
}

fn read_payload(stem: &Path, header: &Header) -> Result<Vec<u8>> {
    let path = with_suffix(stem, RAW_SUFFIX);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = voxel_count(header.shape) * header.dtype.size();
    if bytes.len() != want {
        return Err(Error::format(
            &path,
            format!(
                "payload has {} bytes but header {:?} {:?} needs {want}",
                bytes.len(),
                header.shape,
                header.dtype
            ),
        ));
    }
    Ok(bytes)
}

fn write_pair(stem: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hp = with_suffix(stem, HEADER_SUFFIX);
    let mut text = serde_json::to_string_pretty(header).expect("header serialises");
    text.push('\n');
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    let rp = with_suffix(stem, RAW_SUFFIX);
    fs::write(&rp, payload).map_err(|e| Error::io(&rp, e))
}

fn decode_volume(stem: &Path) -> Result<Volume> {
    let header = read_header(stem)?;
    let bytes = read_payload(stem, &header)?;
    let data = match header.dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::Uint8 => bytes.iter().map(|&b| f32::from(b)).collect(),
    };
    Volume::new(data, header.shape, header.spacing, header.origin)
}

/// Reads an intensity pair and, when `<stem>.label.hdr.json` exists alongside, its labels.
pub fn read_volume(path: &Path) -> Result<(Volume, Option<LabelMask>)> {
    let stem = stem(path);
    let volume = decode_volume(&stem)?;
    let lstem = label_stem(&stem);
    if !with_suffix(&lstem, HEADER_SUFFIX).exists() {
        return Ok((volume, None));
    }
    let mask = read_label(&lstem)?;
    if mask.shape() != volume.shape() || mask.spacing != volume.spacing {
        return Err(Error::format(
            header_path(&lstem),
            "label geometry differs from its volume".to_string(),
        ));
    }
    Ok((volume, Some(mask)))
}

/// Reads a standalone uint8 label pair.
pub fn read_label(path: &Path) -> Result<LabelMask> {
    let stem = stem(path);
    let header = read_header(&stem)?;
    if header.dtype != Dtype::Uint8 {
        return Err(Error::format(header_path(&stem), "labels must be uint8".to_string()));
    }
    let bytes = read_payload(&stem, &header)?;
    LabelMask::new(bytes, header.shape, header.spacing)
}

/// Writes `<stem>.hdr.json` + `<stem>.raw` and, with a mask, the `<stem>.label` pair.
pub fn write_volume(volume: &Volume, mask: Option<&LabelMask>, path: &Path) -> Result<()> {
    let stem = stem(path);
    let header = Header {
        shape: volume.shape(),
        dtype: Dtype::Float32,
        spacing: volume.spacing,
        origin: volume.origin,
        byte_order: "little".into(),
    };
    let payload: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(&stem, &header, &payload)?;
    if let Some(mask) = mask {
        if mask.shape() != volume.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match volume {:?}",
                mask.shape(),
                volume.shape()
            )));
        }
        write_label(mask, volume.origin, &label_stem(&stem))?;
    }
    Ok(())
}

/// Writes a uint8 label pair at `path`.
pub fn write_label(mask: &LabelMask, origin: [f64; 3], path: &Path) -> Result<()> {
    let header = Header {
        shape: mask.shape(),
        dtype: Dtype::Uint8,
        spacing: mask.spacing,
        origin,
        byte_order: "little".into(),
    };
    write_pair(&stem(path), &header, mask.data())
}
