//! Volume, landmark and field I/O. Downstream modules consume only the
//! types defined in [`crate::volume`]; every on-disk format lives here.

pub mod nifti;
pub mod rawmeta;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{DenseField, IntensityUnit, LandmarkSet, Volume3};
use rawmeta::{RawDtype, RawMetaArray};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    RawMeta,
}

fn guess_format(path: &Path) -> VolumeFormat {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        VolumeFormat::Nifti
    } else {
        VolumeFormat::RawMeta
    }
}

/// Load a volume; the format is taken from `format_hint` when given,
/// otherwise from the file extension (`.nii`/`.nii.gz` vs raw+meta).
pub fn load_volume(path: &Path, format_hint: Option<VolumeFormat>) -> Result<Volume3> {
    match format_hint.unwrap_or_else(|| guess_format(path)) {
        VolumeFormat::Nifti => nifti::read(path),
        VolumeFormat::RawMeta => {
            let arr = rawmeta::read(path)?;
            if arr.channels != 1 {
                return Err(Error::Format(format!(
                    "expected a scalar volume, raw+meta has {} channels",
                    arr.channels
                )));
            }
            Volume3::new(arr.dims, arr.spacing, arr.data, IntensityUnit::Arbitrary)
        }
    }
}

/// Save a volume in a round-trippable form (float32 payload either way).
pub fn save_volume(vol: &Volume3, path: &Path) -> Result<()> {
    match guess_format(path) {
        VolumeFormat::Nifti => nifti::write(path, vol),
        VolumeFormat::RawMeta => rawmeta::write(
            path,
            &RawMetaArray {
                dims: vol.dims(),
                spacing: vol.spacing(),
                channels: 1,
                dtype: RawDtype::Float32,
                data: vol.voxels().to_vec(),
                extra: vec![],
            },
        ),
    }
}

/// Load a DIR-Lab style landmark file: whitespace-separated text, one
/// `i j k` triple per non-empty line. Fails atomically.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 numeric tokens, got {}", tokens.len()),
            });
        }
        let mut p = [0f32; 3];
        for (a, t) in tokens.iter().enumerate() {
            p[a] = t.parse::<f32>().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("non-numeric token `{t}`: {e}"),
            })?;
        }
        points.push(p);
    }
    Ok(LandmarkSet::new(points))
}

pub fn save_landmarks(lms: &LandmarkSet, path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in &lms.points {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Dense fields round-trip through raw+meta with 3 interleaved components.
pub fn save_field(field: &DenseField, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(field.vectors().len() * 3);
    for v in field.vectors() {
        data.extend_from_slice(v);
    }
    rawmeta::write(
        path,
        &RawMetaArray {
            dims: field.dims(),
            spacing: field.spacing(),
            channels: 3,
            dtype: RawDtype::Float32,
            data,
            extra: vec![],
        },
    )
}

pub fn load_field(path: &Path) -> Result<DenseField> {
    let arr = rawmeta::read(path)?;
    if arr.channels != 3 {
        return Err(Error::Format(format!(
            "expected a 3-channel field, raw+meta has {} channels",
            arr.channels
        )));
    }
    let vectors: Vec<[f32; 3]> = arr
        .data
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    DenseField::new(arr.dims, arr.spacing, vectors)
}
