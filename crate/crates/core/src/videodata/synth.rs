//! Synthetic clips: a shaded square sliding over a static textured
//! background, with the exact set of changing pixels as ground truth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_clip, DatasetManifest, ManifestEntry, VideoClip, VideoError};
use crate::seed;

const BACKGROUND_RANGE: (f64, f64) = (20.0, 120.0);
const SQUARE_RANGE: (u8, u8) = (150, 255);
const LATTICE_CELL: usize = 8;

/// Per-frame `height x width` map of pixels whose noise-free value changed
/// since the previous frame. Frame 0 has no predecessor and is all false.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl MotionMask {
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.height + y) * self.width + x]
    }

    pub fn frame(&self, t: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.bits[t * n..(t + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether any pixel of the `s x s` patch at (`row`, `col`) moved in frame `t`.
    pub fn patch_moved(&self, t: usize, row: usize, col: usize, s: usize) -> bool {
        (row * s..(row + 1) * s).any(|y| (col * s..(col + 1) * s).any(|x| self.get(t, y, x)))
    }

    /// Computes the mask by direct frame differencing.
    pub fn from_frames(clip: &VideoClip) -> Self {
        let (h, w, c) = (clip.height, clip.width, clip.channels);
        let mut bits = vec![false; clip.t_frames * h * w];
        for t in 1..clip.t_frames {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if clip.pixel(t, ch, y, x) != clip.pixel(t - 1, ch, y, x) {
                            bits[(t * h + y) * w + x] = true;
                        }
                    }
                }
            }
        }
        Self { frames: clip.t_frames, height: h, width: w, bits }
    }
}

/// Parameters of [`gen_moving_square`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub channels: usize,
    pub size: usize,
    /// Pixels per frame along (x, y); reflects off the frame border.
    pub velocity: (i64, i64),
    /// Standard deviation of additive per-pixel Gaussian noise, in u8 units.
    pub noise_amp: f64,
    pub seed: u64,
    /// Top-left corner (x, y) at frame 0; drawn from the seed when absent.
    pub start: Option<(usize, usize)>,
    #[serde(default)]
    pub background: Background,
}

/// Static backdrop behind the square.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Smooth value noise on an 8-pixel lattice.
    #[default]
    ValueNoise,
    /// One grey level everywhere.
    Flat(u8),
}

impl SquareSpec {
    pub fn new(height: usize, width: usize, frames: usize, size: usize, velocity: (i64, i64), seed: u64) -> Self {
        Self {
            height,
            width,
            frames,
            channels: 3,
            size,
            velocity,
            noise_amp: 0.0,
            seed,
            start: None,
            background: Background::ValueNoise,
        }
    }

    pub fn with_background(mut self, background: Background) -> Self {
        self.background = background;
        self
    }

    pub fn with_noise(mut self, noise_amp: f64) -> Self {
        self.noise_amp = noise_amp;
        self
    }
}

/// Position along one axis under reflective motion in `[0, span]`.
fn reflect(p: i64, span: i64) -> i64 {
    if span == 0 {
        return 0;
    }
    let q = p.rem_euclid(2 * span);
    if q <= span {
        q
    } else {
        2 * span - q
    }
}

fn background(spec: &SquareSpec) -> Vec<u8> {
    if let Background::Flat(level) = spec.background {
        return vec![level; spec.channels * spec.height * spec.width];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(spec.seed, 1));
    let (h, w) = (spec.height, spec.width);
    let (lh, lw) = (h / LATTICE_CELL + 2, w / LATTICE_CELL + 2);
    let mut out = vec![0u8; spec.channels * h * w];
    for c in 0..spec.channels {
        let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1)).collect();
        for y in 0..h {
            let fy = y as f64 / LATTICE_CELL as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / LATTICE_CELL as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |yy: usize, xx: usize| lattice[yy * lw + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[(c * h + y) * w + x] = (top * (1.0 - ty) + bottom * ty).round() as u8;
            }
        }
    }
    out
}

/// Per-channel linear ramp across the square, spanning part of
/// `SQUARE_RANGE` in a random direction.
fn square_texture(spec: &SquareSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(spec.seed, 3));
    let s = spec.size;
    let (lo, hi) = (SQUARE_RANGE.0 as f64, SQUARE_RANGE.1 as f64);
    let mut out = Vec::with_capacity(spec.channels * s * s);
    for _ in 0..spec.channels {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (gx, gy) = (angle.cos(), angle.sin());
        let mid = rng.random_range(lo + 30.0..=hi - 30.0);
        let denom = (s.max(2) - 1) as f64;
        for dy in 0..s {
            for dx in 0..s {
                let u = (dx as f64 / denom - 0.5) * gx + (dy as f64 / denom - 0.5) * gy;
                out.push((mid + 40.0 * u).round().clamp(lo, hi) as u8);
            }
        }
    }
    out
}

/// Renders a moving-square clip and its noise-free motion mask.
pub fn gen_moving_square(spec: &SquareSpec) -> Result<(VideoClip, MotionMask), VideoError> {
    let (h, w, c, s) = (spec.height, spec.width, spec.channels, spec.size);
    if s == 0 || s > h || s > w {
        return Err(VideoError::Generator(format!("square of size {s} does not fit a {h}x{w} frame")));
    }
    if spec.frames == 0 || c == 0 {
        return Err(VideoError::Generator("clip needs at least one frame and channel".into()));
    }
    if !(spec.noise_amp >= 0.0) {
        return Err(VideoError::Generator(format!("noise amplitude {} is negative", spec.noise_amp)));
    }
    let (span_x, span_y) = ((w - s) as i64, (h - s) as i64);
    let (x0, y0) = match spec.start {
        Some((x, y)) if x as i64 <= span_x && y as i64 <= span_y => (x as i64, y as i64),
        Some(p) => return Err(VideoError::Generator(format!("start {p:?} places the square outside the frame"))),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(spec.seed, 2));
            (rng.random_range(0..=span_x), rng.random_range(0..=span_y))
        }
    };
    let texture = square_texture(spec);
    let bg = background(spec);
    let frame_len = c * h * w;
    let mut clean = Vec::with_capacity(spec.frames * frame_len);
    for t in 0..spec.frames as i64 {
        let px = reflect(x0 + spec.velocity.0 * t, span_x) as usize;
        let py = reflect(y0 + spec.velocity.1 * t, span_y) as usize;
        let mut frame = bg.clone();
        for ch in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    frame[(ch * h + py + dy) * w + px + dx] = texture[(ch * s + dy) * s + dx];
                }
            }
        }
        clean.extend_from_slice(&frame);
    }
    let clean = VideoClip::new(spec.frames, c, h, w, clean)?;
    let mask = MotionMask::from_frames(&clean);
    if spec.noise_amp == 0.0 {
        return Ok((clean, mask));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(spec.seed, 4));
    let normal = Normal::new(0.0, spec.noise_amp).map_err(|e| VideoError::Generator(e.to_string()))?;
    let noisy = clean
        .pixels
        .iter()
        .map(|&p| (p as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok((VideoClip::new(spec.frames, c, h, w, noisy)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    /// Unit step (dx, dy) in image coordinates (y grows downwards).
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

/// Geometry shared by every clip of a motion-direction dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub max_speed: i64,
    pub noise_amp: f64,
    #[serde(default)]
    pub background: Background,
}

impl Default for ClassClipSpec {
    fn default() -> Self {
        Self { frames: 16, height: 32, width: 32, size: 6, max_speed: 1, noise_amp: 0.0, background: Background::ValueNoise }
    }
}

/// Balanced labelled clips, label `i % classes.len()`. Start positions are
/// chosen so the square never reaches the border, keeping the direction
/// constant over the clip.
pub fn motion_class_clips(
    n_clips: usize,
    classes: &[Direction],
    spec: &ClassClipSpec,
    seed: u64,
) -> Result<Vec<(VideoClip, usize)>, VideoError> {
    if classes.is_empty() || n_clips % classes.len() != 0 {
        return Err(VideoError::Generator(format!("{n_clips} clips cannot be split evenly over {} classes", classes.len())));
    }
    if spec.max_speed < 1 || spec.size > spec.height.min(spec.width) {
        return Err(VideoError::Generator("invalid class clip geometry".into()));
    }
    let travel = spec.max_speed * (spec.frames as i64 - 1);
    let (span_x, span_y) = ((spec.width - spec.size) as i64, (spec.height - spec.size) as i64);
    if travel > span_x.min(span_y) {
        return Err(VideoError::Generator(format!("travel {travel}px exceeds free span")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(seed, 10));
    (0..n_clips)
        .map(|i| {
            let label = i % classes.len();
            let (ux, uy) = classes[label].unit();
            let speed = rng.random_range(1..=spec.max_speed);
            let moved = speed * (spec.frames as i64 - 1);
            let pick = |rng: &mut ChaCha8Rng, u: i64, span: i64| match u {
                1 => rng.random_range(0..=span - moved),
                -1 => rng.random_range(moved..=span),
                _ => rng.random_range(0..=span),
            };
            let x = pick(&mut rng, ux, span_x);
            let y = pick(&mut rng, uy, span_y);
            let square = SquareSpec {
                height: spec.height,
                width: spec.width,
                frames: spec.frames,
                channels: 3,
                size: spec.size,
                velocity: (ux * speed, uy * speed),
                noise_amp: spec.noise_amp,
                seed: seed::derive(seed, i as u64, 0),
                start: Some((x as usize, y as usize)),
                background: spec.background,
            };
            gen_moving_square(&square).map(|(clip, _)| (clip, label))
        })
        .collect()
}

/// Writes a balanced motion-direction dataset as EVC1 files plus
/// `manifest.json` into `dir`.
pub fn gen_motion_class_dataset(
    dir: impl AsRef<Path>,
    n_clips: usize,
    classes: &[Direction],
    spec: &ClassClipSpec,
    seed: u64,
) -> Result<DatasetManifest, VideoError> {
    let dir = dir.as_ref();
    let clips = motion_class_clips(n_clips, classes, spec, seed)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, (clip, label)) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.evc");
        save_clip(clip, dir.join(&name))?;
        entries.push(ManifestEntry { path: name.into(), label: Some(*label), frames: clip.t_frames });
    }
    let manifest = DatasetManifest::new(entries, dir, 1, spec.frames);
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
