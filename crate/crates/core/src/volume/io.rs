//! V4D container.
//!
//! ```text
//! bytes 0..8    magic "V4DVOL01" ("V4DVOL" + two-digit version)
//! bytes 8..12   u32 little endian: header length L
//! bytes 12..12+L UTF-8 JSON header:
//!               {"shape":[nx,ny,nz],"spacing_mm":[..],"origin_mm":[..],
//!                "frame_times":[..],"dtype":"f32le"}
//! then          frames back to back, each nx*ny*nz little endian f32, x fastest
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Volume4D, VolumeError};

pub const V4D_MAGIC: &[u8; 8] = b"V4DVOL01";
const MAGIC_STEM: usize = 6;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    frame_times: Vec<f64>,
    dtype: String,
}

pub fn to_v4d_bytes(volume: &Volume4D) -> Vec<u8> {
    let header = Header {
        shape: volume.shape(),
        spacing_mm: volume.spacing(),
        origin_mm: volume.origin(),
        frame_times: volume.frame_times().to_vec(),
        dtype: "f32le".into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let voxels: usize = volume.shape().iter().product();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * voxels * volume.num_frames());
    out.extend_from_slice(V4D_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for frame in volume.raw_frames() {
        for v in frame {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_v4d_bytes(bytes: &[u8]) -> Result<Volume4D, VolumeError> {
    let magic_len = bytes.len().min(8);
    if let Some(offset) = (0..magic_len.min(MAGIC_STEM)).find(|&i| bytes[i] != V4D_MAGIC[i]) {
        return Err(VolumeError::BadMagic { offset });
    }
    if bytes.len() < 12 {
        return Err(VolumeError::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    if &bytes[MAGIC_STEM..8] != &V4D_MAGIC[MAGIC_STEM..] {
        return Err(VolumeError::UnsupportedVersion(
            String::from_utf8_lossy(&bytes[MAGIC_STEM..8]).into_owned(),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(VolumeError::Truncated {
            expected: header_end,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| VolumeError::Header(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(VolumeError::Header(format!("unsupported dtype {:?}", header.dtype)));
    }
    let voxels = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| VolumeError::Header("shape overflows".into()))?;
    let frame_bytes = voxels * 4;
    let expected = header_end + frame_bytes * header.frame_times.len();
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(VolumeError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        return Err(VolumeError::Invalid(format!(
            "{} trailing bytes after the last frame",
            bytes.len() - expected
        )));
    }
    let frames = bytes[header_end..]
        .chunks_exact(frame_bytes.max(1))
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Volume4D::new(
        header.shape,
        header.spacing_mm,
        header.origin_mm,
        header.frame_times,
        frames,
    )
}

pub fn write_v4d(volume: &Volume4D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    std::fs::write(path, to_v4d_bytes(volume))?;
    Ok(())
}

pub fn read_v4d(path: impl AsRef<Path>) -> Result<Volume4D, VolumeError> {
    from_v4d_bytes(&std::fs::read(path)?)
}
