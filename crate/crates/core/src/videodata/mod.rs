//! Raw clip storage, dataset manifests, stride sampling and synthetic
//! motion clips with ground-truth masks.

mod format;
mod manifest;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::{Real, Tensor};

pub use format::{decode_clip, encode_clip, load_clip, save_clip, HEADER_LEN, MAGIC};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use synth::{
    gen_motion_class_dataset, gen_moving_square, motion_class_clips, Background, ClassClipSpec, Direction, MotionMask,
    SquareSpec,
};

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("bad magic {0:?}, expected \"EVC1\"")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("clip dimensions overflow: {0:?}")]
    DimensionOverflow([u32; 4]),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("invalid clip: {0}")]
    Invalid(String),
    #[error("frame range out of bounds: {0}")]
    OutOfRange(String),
    #[error("channel {channel} has non-positive std {std}")]
    ZeroStd { channel: usize, std: f64 },
    #[error("{0}")]
    Generator(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("missing clip file {0}")]
    MissingClip(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `t_frames x channels x height x width` u8 pixels, frame-major and
/// channel-planar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub t_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl VideoClip {
    pub fn new(t_frames: usize, channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, VideoError> {
        let expected = t_frames
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or(VideoError::DimensionOverflow([t_frames as u32, channels as u32, height as u32, width as u32]))?;
        if expected != pixels.len() {
            return Err(VideoError::Invalid(format!(
                "{t_frames}x{channels}x{height}x{width} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self { t_frames, channels, height, width, pixels })
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[((t * self.channels + c) * self.height + y) * self.width + x]
    }

    /// New clip made of the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self, VideoError> {
        let mut pixels = Vec::with_capacity(frames.len() * self.frame_len());
        for &t in frames {
            if t >= self.t_frames {
                return Err(VideoError::OutOfRange(format!("frame {t} of {}", self.t_frames)));
            }
            pixels.extend_from_slice(self.frame(t));
        }
        Self::new(frames.len(), self.channels, self.height, self.width, pixels)
    }

    /// Concatenates clips of identical geometry along time.
    pub fn concat(parts: &[&VideoClip]) -> Result<Self, VideoError> {
        let first = parts.first().ok_or_else(|| VideoError::Invalid("nothing to concatenate".into()))?;
        let mut pixels = Vec::new();
        let mut t = 0;
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(VideoError::Invalid("geometry differs between clips".into()));
            }
            pixels.extend_from_slice(&p.pixels);
            t += p.t_frames;
        }
        Self::new(t, first.channels, first.height, first.width, pixels)
    }
}

/// Frame indices `start, start + stride, ...` of a `clip_len`-frame sample.
pub fn uniform_indices(t_frames: usize, clip_len: usize, stride: usize, start: usize) -> Result<Vec<usize>, VideoError> {
    if clip_len == 0 || stride == 0 {
        return Err(VideoError::OutOfRange(format!("clip_len {clip_len}, stride {stride}")));
    }
    let last = start + stride * (clip_len - 1);
    if last >= t_frames {
        return Err(VideoError::OutOfRange(format!(
            "start {start} + stride {stride} x {} = {last} exceeds {t_frames} frames",
            clip_len - 1
        )));
    }
    Ok((0..clip_len).map(|i| start + i * stride).collect())
}

/// Uniform-interval sampling of `clip_len` frames.
pub fn sample_uniform(clip: &VideoClip, clip_len: usize, stride: usize, start: usize) -> Result<VideoClip, VideoError> {
    clip.select_frames(&uniform_indices(clip.t_frames, clip_len, stride, start)?)
}

/// Per-channel normalisation statistics in `[0, 1]` pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn imagenet() -> Self {
        Self { mean: vec![0.485, 0.456, 0.406], std: vec![0.229, 0.224, 0.225] }
    }

    fn validate(&self, channels: usize) -> Result<(), VideoError> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(VideoError::Invalid(format!("norm stats for {} channels, clip has {channels}", self.mean.len())));
        }
        for (channel, &std) in self.std.iter().enumerate() {
            if !(std > 0.0) {
                return Err(VideoError::ZeroStd { channel, std });
            }
        }
        Ok(())
    }
}

/// `(pixel / 255 - mean) / std`, shaped `[t, c, h, w]`.
pub fn normalize<T: Real>(clip: &VideoClip, norm: &ChannelNorm) -> Result<Tensor<T>, VideoError> {
    norm.validate(clip.channels)?;
    let plane = clip.height * clip.width;
    let data = clip
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i / plane) % clip.channels;
            T::from_f64_lossy((p as f64 / 255.0 - norm.mean[c]) / norm.std[c])
        })
        .collect();
    Tensor::new(vec![clip.t_frames, clip.channels, clip.height, clip.width], data)
        .map_err(|e| VideoError::Invalid(e.to_string()))
}

/// Inverse of [`normalize`], rounding to the nearest u8.
pub fn denormalize<T: Real>(frames: &Tensor<T>, norm: &ChannelNorm) -> Result<VideoClip, VideoError> {
    let &[t, c, h, w] = frames.shape() else {
        return Err(VideoError::Invalid(format!("expected [t, c, h, w], got {:?}", frames.shape())));
    };
    norm.validate(c)?;
    let plane = h * w;
    let pixels = frames
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / plane) % c;
            let p = (v.to_f64_lossy() * norm.std[ch] + norm.mean[ch]) * 255.0;
            p.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    VideoClip::new(t, c, h, w, pixels)
}
