//! Minimal NIfTI-1 reader/writer: single-file little-endian `.nii`
//! (optionally gzipped), scalar int16/uint16/float32, 3 spatial dims.
//! Orientation transforms beyond voxel spacing are out of scope.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::volume::{IntensityUnit, Volume3};

const HEADER_LEN: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

fn read_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn read_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn read_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

pub fn read(path: &Path) -> Result<Volume3> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };

    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::Format("missing NIfTI-1 magic `n+1\\0`".into()));
    }
    let sizeof_hdr = read_i32(&bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr = {sizeof_hdr}, expected 348 (big-endian files are unsupported)"
        )));
    }

    let ndim = read_i16(&bytes, 40);
    let mut dim = [1i16; 7];
    for (a, d) in dim.iter_mut().enumerate() {
        *d = read_i16(&bytes, 42 + 2 * a);
    }
    // exactly 3 spatial dims; trailing singleton dims are tolerated
    let trailing_nontrivial = (3..7).any(|a| (a as i16) < ndim && dim[a] > 1);
    if ndim < 3 || trailing_nontrivial {
        return Err(Error::Dimension(format!(
            "expected a 3D volume, header has dim[0] = {ndim}, dim = {dim:?}"
        )));
    }
    let dims = [
        dim[0].max(1) as usize,
        dim[1].max(1) as usize,
        dim[2].max(1) as usize,
    ];

    let datatype = read_i16(&bytes, 70);
    let voxel_bytes = match datatype {
        DT_INT16 | DT_UINT16 => 2usize,
        DT_FLOAT32 => 4usize,
        other => {
            return Err(Error::Format(format!(
                "unsupported NIfTI datatype code {other} (supported: 4, 16, 512)"
            )))
        }
    };

    let spacing = [
        read_f32(&bytes, 80).abs(),
        read_f32(&bytes, 84).abs(),
        read_f32(&bytes, 88).abs(),
    ];
    let spacing = [
        if spacing[0] > 0.0 { spacing[0] } else { 1.0 },
        if spacing[1] > 0.0 { spacing[1] } else { 1.0 },
        if spacing[2] > 0.0 { spacing[2] } else { 1.0 },
    ];

    let vox_offset = read_f32(&bytes, 108).max(HEADER_LEN as f32) as usize;
    let scl_slope = read_f32(&bytes, 112);
    let scl_inter = read_f32(&bytes, 116);

    let n = dims[0] * dims[1] * dims[2];
    let expected = vox_offset + n * voxel_bytes;
    if bytes.len() < expected {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
            ),
        ));
    }

    let payload = &bytes[vox_offset..expected];
    let mut voxels: Vec<f32> = match datatype {
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DT_UINT16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => unreachable!(),
    };
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in &mut voxels {
            *v = *v * scl_slope + scl_inter;
        }
    }

    Volume3::new(dims, spacing, voxels, IntensityUnit::Arbitrary)
}

/// Write the volume as uncompressed float32 NIfTI-1.
pub fn write(path: &Path, vol: &Volume3) -> Result<()> {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let mut header = vec![0u8; 352]; // 348-byte header + 4-byte extension pad
    header[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (a, d) in dim.iter().enumerate() {
        header[40 + 2 * a..42 + 2 * a].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes()); // datatype
    header[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix
    let pixdim: [f32; 8] = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (a, p) in pixdim.iter().enumerate() {
        header[76 + 4 * a..80 + 4 * a].copy_from_slice(&p.to_le_bytes());
    }
    header[108..112].copy_from_slice(&352f32.to_le_bytes()); // vox_offset
    header[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    header[344..348].copy_from_slice(MAGIC);

    let mut bytes = header;
    bytes.reserve(vol.len() * 4);
    for v in vol.voxels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) fn blank_header(dims: [usize; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut header = vec![0u8; 352];
    header[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (a, d) in dim.iter().enumerate() {
        header[40 + 2 * a..42 + 2 * a].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&datatype.to_le_bytes());
    header[72..74].copy_from_slice(&bitpix.to_le_bytes());
    for a in 0..4 {
        header[76 + 4 * a..80 + 4 * a].copy_from_slice(&1f32.to_le_bytes());
    }
    header[108..112].copy_from_slice(&352f32.to_le_bytes());
    header[344..348].copy_from_slice(MAGIC);
    header
}
