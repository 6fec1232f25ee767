//! Trivially inspectable raw+meta format: `<name>.raw` little-endian
//! scalars next to a `<name>.meta` text sidecar describing the grid.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    Int16,
    Uint16,
    Float32,
}

impl RawDtype {
    pub fn name(self) -> &'static str {
        match self {
            RawDtype::Int16 => "int16",
            RawDtype::Uint16 => "uint16",
            RawDtype::Float32 => "float32",
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            RawDtype::Int16 | RawDtype::Uint16 => 2,
            RawDtype::Float32 => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "int16" => Ok(RawDtype::Int16),
            "uint16" => Ok(RawDtype::Uint16),
            "float32" => Ok(RawDtype::Float32),
            other => Err(Error::Format(format!("unsupported raw dtype `{other}`"))),
        }
    }
}

/// A decoded raw+meta array: `channels` interleaved scalars per grid point,
/// grid stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMetaArray {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub channels: usize,
    pub dtype: RawDtype,
    pub data: Vec<f32>,
    /// Meta lines other than the standard keys, preserved for callers that
    /// attach extra context (e.g. a displacement lattice description).
    pub extra: Vec<(String, String)>,
}

fn meta_path(raw: &Path) -> PathBuf {
    raw.with_extension("meta")
}

pub fn read(path: &Path) -> Result<RawMetaArray> {
    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing: Option<[f32; 3]> = None;
    let mut dtype: Option<RawDtype> = None;
    let mut channels = 1usize;
    let mut order_ok = true;
    let mut extra = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let parse3 = |v: &str| -> Result<Vec<f64>> {
            let toks: Vec<f64> = v
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad numeric token in `{key}`: {e}"),
                })?;
            if toks.len() != 3 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("`{key}` needs 3 values, got {}", toks.len()),
                });
            }
            Ok(toks)
        };
        match key {
            "dims" => {
                let v = parse3(value)?;
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            "spacing" => {
                let v = parse3(value)?;
                spacing = Some([v[0] as f32, v[1] as f32, v[2] as f32]);
            }
            "dtype" => dtype = Some(RawDtype::parse(value)?),
            "channels" => {
                channels = value.parse().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad channels value: {e}"),
                })?
            }
            "order" => order_ok = value == "xyz",
            _ => extra.push((key.to_string(), value.to_string())),
        }
    }

    if !order_ok {
        return Err(Error::Format("raw+meta order must be `xyz`".into()));
    }
    let dims = dims.ok_or_else(|| Error::Format("meta file missing `dims`".into()))?;
    let spacing = spacing.unwrap_or([1.0, 1.0, 1.0]);
    let dtype = dtype.ok_or_else(|| Error::Format("meta file missing `dtype`".into()))?;
    if channels == 0 {
        return Err(Error::Format("channels must be >= 1".into()));
    }

    let n = dims[0] * dims[1] * dims[2] * channels;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = n * dtype.bytes();
    if bytes.len() != expected {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ),
        ));
    }
    let data = decode_scalars(&bytes, dtype);
    Ok(RawMetaArray {
        dims,
        spacing,
        channels,
        dtype,
        data,
        extra,
    })
}

pub fn write(path: &Path, arr: &RawMetaArray) -> Result<()> {
    let n = arr.dims[0] * arr.dims[1] * arr.dims[2] * arr.channels;
    if arr.data.len() != n {
        return Err(Error::Dimension(format!(
            "raw+meta payload length {} does not match dims {:?} x {} channels",
            arr.data.len(),
            arr.dims,
            arr.channels
        )));
    }
    let mut meta = String::new();
    meta.push_str(&format!("dims = {} {} {}\n", arr.dims[0], arr.dims[1], arr.dims[2]));
    meta.push_str(&format!(
        "spacing = {} {} {}\n",
        arr.spacing[0], arr.spacing[1], arr.spacing[2]
    ));
    meta.push_str(&format!("dtype = {}\n", arr.dtype.name()));
    meta.push_str("order = xyz\n");
    if arr.channels != 1 {
        meta.push_str(&format!("channels = {}\n", arr.channels));
    }
    for (k, v) in &arr.extra {
        meta.push_str(&format!("{k} = {v}\n"));
    }
    let meta_file = meta_path(path);
    fs::write(&meta_file, meta).map_err(|e| Error::io(&meta_file, e))?;

    let bytes = encode_scalars(&arr.data, arr.dtype);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_scalars(bytes: &[u8], dtype: RawDtype) -> Vec<f32> {
    match dtype {
        RawDtype::Int16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        RawDtype::Uint16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        RawDtype::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    }
}

fn encode_scalars(data: &[f32], dtype: RawDtype) -> Vec<u8> {
    match dtype {
        RawDtype::Int16 => data
            .iter()
            .flat_map(|&v| (v as i16).to_le_bytes())
            .collect(),
        RawDtype::Uint16 => data
            .iter()
            .flat_map(|&v| (v as u16).to_le_bytes())
            .collect(),
        RawDtype::Float32 => data.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    }
}
