//! Tube embedding: one 3D convolution with a `2 x s x s` kernel and equal
//! stride, turning `2τ` frames into a `τ x J x d` token grid.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{matmul, Real, Tensor};

/// Frames merged into one token along time.
pub const TEMPORAL_KERNEL: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("clip {frames}x{height}x{width} is not divisible by kernel 2x{patch}x{patch}")]
    Indivisible { frames: usize, height: usize, width: usize, patch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token index {index} out of range for {len} slots")]
    Index { index: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TubeEmbedConfig {
    pub patch: usize,
    pub embed_dim: usize,
}

impl TubeEmbedConfig {
    /// Length of one flattened `2 x C x s x s` voxel block.
    pub fn patch_dim(&self, channels: usize) -> usize {
        TEMPORAL_KERNEL * channels * self.patch * self.patch
    }

    /// `(tau, patch rows, patch cols)` for a clip, or an error when the
    /// geometry does not tile.
    pub fn grid(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize), EmbedError> {
        let s = self.patch;
        if s == 0 || frames == 0 || frames % TEMPORAL_KERNEL != 0 || height % s != 0 || width % s != 0 {
            return Err(EmbedError::Indivisible { frames, height, width, patch: s });
        }
        Ok((frames / TEMPORAL_KERNEL, height / s, width / s))
    }
}

/// `tau x J x dim` token embeddings with the geometry needed to map a flat
/// spatial index back to its patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tau: usize,
    pub j: usize,
    pub dim: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn from_matrix(tokens: &Tensor<T>, tau: usize, patch: usize, height: usize, width: usize) -> Result<Self, EmbedError> {
        let j = (height / patch) * (width / patch);
        if tokens.rows() != tau * j {
            return Err(EmbedError::Shape(format!("{} rows for a {tau}x{j} grid", tokens.rows())));
        }
        Ok(Self { tau, j, dim: tokens.cols(), patch, height, width, data: tokens.data().to_vec() })
    }

    pub fn token(&self, i: usize, j: usize) -> &[T] {
        let at = (i * self.j + j) * self.dim;
        &self.data[at..at + self.dim]
    }

    pub fn patch_cols(&self) -> usize {
        self.width / self.patch
    }

    /// `(row, col)` of spatial index `j`.
    pub fn patch_coords(&self, j: usize) -> (usize, usize) {
        (j / self.patch_cols(), j % self.patch_cols())
    }

    pub fn to_matrix(&self) -> Tensor<T> {
        Tensor::matrix(self.tau * self.j, self.dim, self.data.clone()).expect("grid is non-empty")
    }
}

/// Convolution weights as a `patch_dim x d` matrix plus a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> EmbedWeights<T> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn init(cfg: &TubeEmbedConfig, channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cfg.patch_dim(channels);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect() };
        let weight = Tensor::matrix(fan_in, cfg.embed_dim, draw(fan_in * cfg.embed_dim)).unwrap();
        let bias = Tensor::new(vec![cfg.embed_dim], draw(cfg.embed_dim)).unwrap();
        Self { weight, bias }
    }

    pub fn zeros(cfg: &TubeEmbedConfig, channels: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cfg.patch_dim(channels), cfg.embed_dim]),
            bias: Tensor::zeros(&[cfg.embed_dim]),
        }
    }
}

/// Flattens each `2 x C x s x s` voxel block of `[2τ, C, H, W]` frames into
/// one row, ordered (frame-in-pair, channel, y, x). Rows are ordered by
/// pair then raster patch index.
pub fn patchify<T: Real>(frames: &Tensor<T>, patch: usize) -> Result<Tensor<T>, EmbedError> {
    let &[t, c, h, w] = frames.shape() else {
        return Err(EmbedError::Shape(format!("expected [t, c, h, w], got {:?}", frames.shape())));
    };
    let cfg = TubeEmbedConfig { patch, embed_dim: 1 };
    let (tau, rows, cols) = cfg.grid(t, h, w)?;
    let s = patch;
    let pd = cfg.patch_dim(c);
    let src = frames.data();
    let mut out = Vec::with_capacity(tau * rows * cols * pd);
    for i in 0..tau {
        for pr in 0..rows {
            for pc in 0..cols {
                for dt in 0..TEMPORAL_KERNEL {
                    let f = 2 * i + dt;
                    for ch in 0..c {
                        for dy in 0..s {
                            let base = ((f * c + ch) * h + pr * s + dy) * w + pc * s;
                            out.extend_from_slice(&src[base..base + s]);
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(tau * rows * cols, pd, out).map_err(|e| EmbedError::Shape(e.to_string()))
}

/// Embeds every tube of a normalised clip.
pub fn tube_embed<T: Real>(frames: &Tensor<T>, weights: &EmbedWeights<T>, cfg: &TubeEmbedConfig) -> Result<TokenGrid<T>, EmbedError> {
    let patches = patchify(frames, cfg.patch)?;
    let &[t, _, h, w] = frames.shape() else { unreachable!() };
    let tokens = embed_patches(&patches, weights)?;
    TokenGrid::from_matrix(&tokens, t / TEMPORAL_KERNEL, cfg.patch, h, w)
}

/// `patches · W + b` for already flattened voxel blocks.
pub fn embed_patches<T: Real>(patches: &Tensor<T>, weights: &EmbedWeights<T>) -> Result<Tensor<T>, EmbedError> {
    if patches.cols() != weights.weight.rows() || weights.bias.len() != weights.weight.cols() {
        return Err(EmbedError::Shape(format!(
            "patches {:?} vs weight {:?}",
            patches.shape(),
            weights.weight.shape()
        )));
    }
    let mut out = matmul(patches, &weights.weight).map_err(|e| EmbedError::Shape(e.to_string()))?;
    let d = out.cols();
    for row in out.data_mut().chunks_mut(d) {
        row.iter_mut().zip(weights.bias.data()).for_each(|(o, &b)| *o += b);
    }
    Ok(out)
}

/// Fixed sinusoidal table of `tau * j` rows: the first half of each row
/// encodes the pair index, the second half the flattened spatial index.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding<T> {
    pub tau: usize,
    pub j: usize,
    pub table: Tensor<T>,
}

fn sinusoid(pos: usize, width: usize, out: &mut [f64]) {
    for (k, slot) in out.iter_mut().enumerate().take(width) {
        let freq = (k / 2) as f64 * 2.0 / width as f64;
        let angle = pos as f64 / 10000f64.powf(freq);
        *slot = if k % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

pub fn positional<T: Real>(tau: usize, j: usize, dim: usize) -> PositionalEmbedding<T> {
    let time_dims = dim / 2;
    let space_dims = dim - time_dims;
    let mut data = Vec::with_capacity(tau * j * dim);
    let mut row = vec![0.0; dim];
    for i in 0..tau {
        for jj in 0..j {
            sinusoid(i, time_dims, &mut row[..time_dims]);
            sinusoid(jj, space_dims, &mut row[time_dims..]);
            data.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
        }
    }
    PositionalEmbedding { tau, j, table: Tensor::matrix(tau * j, dim, data).expect("non-empty table") }
}

impl<T: Real> PositionalEmbedding<T> {
    /// Table rows for the given original slots, in the given order.
    pub fn rows_for(&self, slots: &[usize]) -> Result<Tensor<T>, EmbedError> {
        let len = self.table.rows();
        if let Some(&bad) = slots.iter().find(|&&s| s >= len) {
            return Err(EmbedError::Index { index: bad, len });
        }
        self.table.gather_rows(slots).map_err(|e| EmbedError::Shape(e.to_string()))
    }
}

/// Adds positional rows to `tokens`. With `subset`, row `r` of `tokens`
/// is the token from original slot `subset[r]` and receives that slot's
/// embedding.
pub fn add_positional<T: Real>(
    tokens: &Tensor<T>,
    pe: &PositionalEmbedding<T>,
    subset: Option<&[usize]>,
) -> Result<Tensor<T>, EmbedError> {
    let all: Vec<usize>;
    let slots = match subset {
        Some(s) => s,
        None => {
            all = (0..pe.table.rows()).collect();
            &all
        }
    };
    if tokens.rows() != slots.len() || tokens.cols() != pe.table.cols() {
        return Err(EmbedError::Shape(format!(
            "{:?} tokens for {} slots of width {}",
            tokens.shape(),
            slots.len(),
            pe.table.cols()
        )));
    }
    let rows = pe.rows_for(slots)?;
    let data = tokens.data().iter().zip(rows.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(tokens.shape().to_vec(), data).map_err(|e| EmbedError::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frames(t: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, c, h, w], (0..t * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_grid() {
        let cfg = TubeEmbedConfig { patch: 4, embed_dim: 8 };
        let grid = tube_embed(&random_frames(4, 3, 8, 8, 0), &EmbedWeights::zeros(&cfg, 3), &cfg).unwrap();
        assert_eq!((grid.tau, grid.j, grid.dim), (2, 4, 8));
        assert!(grid.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_weights_sum_each_block() {
        let cfg = TubeEmbedConfig { patch: 2, embed_dim: 1 };
        let frames = random_frames(4, 3, 4, 6, 1);
        let weights = EmbedWeights { weight: Tensor::full(&[cfg.patch_dim(3), 1], 1.0), bias: Tensor::zeros(&[1]) };
        let grid = tube_embed(&frames, &weights, &cfg).unwrap();
        let (h, w) = (4, 6);
        for i in 0..2 {
            for j in 0..grid.j {
                let (r, c) = grid.patch_coords(j);
                let mut sum = 0.0;
                for f in 2 * i..2 * i + 2 {
                    for ch in 0..3 {
                        for y in r * 2..r * 2 + 2 {
                            for x in c * 2..c * 2 + 2 {
                                sum += frames.data()[((f * 3 + ch) * h + y) * w + x];
                            }
                        }
                    }
                }
                assert!((grid.token(i, j)[0] - sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_geometry_rejected() {
        let cfg = TubeEmbedConfig { patch: 4, embed_dim: 2 };
        let w = EmbedWeights::zeros(&cfg, 3);
        assert!(matches!(tube_embed(&random_frames(3, 3, 8, 8, 0), &w, &cfg), Err(EmbedError::Indivisible { .. })));
        assert!(matches!(tube_embed(&random_frames(2, 3, 8, 6, 0), &w, &cfg), Err(EmbedError::Indivisible { .. })));
        // paper-scale kernel
        let paper = TubeEmbedConfig { patch: 16, embed_dim: 768 };
        assert_eq!(paper.grid(16, 224, 224).unwrap(), (8, 14, 14));
        assert_eq!(paper.patch_dim(3), 1536);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let cfg = TubeEmbedConfig { patch: 4, embed_dim: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: EmbedWeights<f64> = EmbedWeights::init(&cfg, 3, &mut rng);
        let bound = 1.0 / (96f64).sqrt();
        assert!(w.weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn positional_cases() {
        let pe: PositionalEmbedding<f64> = positional(2, 3, 6);
        let tokens = Tensor::from_f64(&[6, 6], &[0.5; 36]).unwrap();
        let full = add_positional(&tokens, &pe, None).unwrap();
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(add_positional(&tokens, &pe, Some(&all)).unwrap(), full);
        let zero = PositionalEmbedding { tau: 2, j: 3, table: Tensor::<f64>::zeros(&[6, 6]) };
        assert_eq!(add_positional(&tokens, &zero, None).unwrap(), tokens);
        let two = Tensor::from_f64(&[1, 6], &[0.0; 6]).unwrap();
        assert!(matches!(add_positional(&two, &pe, Some(&[9])), Err(EmbedError::Index { index: 9, .. })));
        assert_eq!(positional::<f64>(2, 3, 6), pe);
    }
}
