//! "EVC1" clip files: 24-byte little-endian header followed by raw u8 pixels.
//!
//! ```text
//! 0..4    magic "EVC1"
//! 4..8    t_frames
//! 8..12   channels
//! 12..16  height
//! 16..20  width
//! 20..24  dtype code (0 = u8)
//! 24..    t * c * h * w bytes, frame-major, channel-planar
//! ```

use std::fs;
use std::path::Path;

use super::{VideoClip, VideoError};

pub const MAGIC: [u8; 4] = *b"EVC1";
pub const HEADER_LEN: usize = 24;
const DTYPE_U8: u32 = 0;

pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>, VideoError> {
    let dims = [clip.t_frames, clip.channels, clip.height, clip.width];
    let mut out = Vec::with_capacity(HEADER_LEN + clip.pixels.len());
    out.extend_from_slice(&MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| VideoError::Invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_U8.to_le_bytes());
    out.extend_from_slice(&clip.pixels);
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip, VideoError> {
    if bytes.len() < 4 {
        return Err(VideoError::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(VideoError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(VideoError::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let dims = [field(0), field(1), field(2), field(3)];
    let dtype = field(4);
    if dtype != DTYPE_U8 {
        return Err(VideoError::UnsupportedDtype(dtype));
    }
    let payload = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&n| n <= isize::MAX as u64 - HEADER_LEN as u64)
        .ok_or(VideoError::DimensionOverflow(dims))?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < payload {
        return Err(VideoError::Truncated { expected: payload, found });
    }
    if found > payload {
        return Err(VideoError::Invalid(format!("{} trailing bytes after payload", found - payload)));
    }
    VideoClip::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
        bytes[HEADER_LEN..].to_vec(),
    )
}

pub fn save_clip(clip: &VideoClip, path: impl AsRef<Path>) -> Result<(), VideoError> {
    fs::write(path, encode_clip(clip)?)?;
    Ok(())
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<VideoClip, VideoError> {
    decode_clip(&fs::read(path)?)
}
