//! Patch embeddings: a deterministic statistical encoder, the feature-cache
//! file format for embeddings computed elsewhere, and the learnable linear
//! projection to node-embedding width.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IqaError, Result};
use crate::exec;
use crate::grid::PatchLayout;
use crate::image::Patch;

/// Width of the built-in encoder output.
pub const BUILTIN_DIM: usize = 128;
const HIST_BINS: usize = 32;
const BLOCK: usize = 8;

// Offsets into the built-in feature vector.
const OFF_MEAN: usize = 0;
const OFF_STD: usize = 3;
const OFF_LUMA_HIST: usize = 6;
const OFF_GRAD_HIST: usize = OFF_LUMA_HIST + HIST_BINS;
const OFF_VAR_HIST: usize = OFF_GRAD_HIST + HIST_BINS;
const OFF_LAPLACIAN: usize = OFF_VAR_HIST + HIST_BINS;
const OFF_ENTROPY: usize = OFF_LAPLACIAN + 1;

/// Upper ends of the gradient-magnitude and local-variance histogram ranges
/// for unit-range luminance with half-step central differences.
const GRAD_MAX: f64 = std::f64::consts::FRAC_1_SQRT_2;
const VAR_MAX: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    BuiltinStat,
    ImportedCache,
}

/// Per-patch backbone features, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub matrix: Array2<f64>,
    pub source: FeatureSource,
}

impl RawFeatures {
    pub fn new(matrix: Array2<f64>, source: FeatureSource) -> Result<Self> {
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(IqaError::NumericalBlowUp {
                location: format!("raw feature entry {pos}"),
            });
        }
        Ok(Self { matrix, source })
    }

    pub fn n_patches(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Projected node embeddings `h_i`, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `d_raw x d`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProjectionParams {
    /// Uniform `±1/sqrt(d_raw)` weights, zero bias.
    pub fn init(d_raw: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_raw as f64).sqrt();
        let weight = Array2::from_shape_fn((d_raw, d), |_| rng.gen_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(d),
        }
    }

    pub fn seeded(d_raw: usize, d: usize, seed: u64) -> Self {
        Self::init(d_raw, d, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Row-wise `h_i = raw_i · weight + bias`.
pub fn project(raw: ArrayView2<f64>, params: &ProjectionParams) -> Result<NodeFeatures> {
    if raw.ncols() != params.weight.nrows() {
        return Err(IqaError::shape(
            "projection input width",
            params.weight.nrows(),
            raw.ncols(),
        ));
    }
    if params.bias.len() != params.weight.ncols() {
        return Err(IqaError::shape(
            "projection bias",
            params.weight.ncols(),
            params.bias.len(),
        ));
    }
    let mut matrix = raw.dot(&params.weight);
    matrix += &params.bias;
    Ok(NodeFeatures { matrix })
}

#[inline]
fn luminance(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

#[inline]
fn bin_of(value: f64, max: f64) -> usize {
    // Square-root companding spreads the small values typical of natural
    // images over more bins.
    let t = (value.max(0.0) / max).sqrt();
    ((t * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Statistical descriptor of one RGB patch (128 values).
///
/// Layout: channel means (3), channel standard deviations (3), luminance
/// histogram (32), gradient-magnitude histogram (32), histogram of 8x8 block
/// variances (32), mean squared luminance Laplacian, luminance entropy in
/// bits, zero padding. Gradients and the Laplacian wrap around the patch
/// edges, so a cyclic shift of the patch leaves every component unchanged
/// (block variances are permuted when the shift is a multiple of 8).
/// Inputs with any value above 1 are treated as 8-bit and divided by 255.
pub fn encode_builtin(patch: &Patch) -> Result<Vec<f64>> {
    if patch.data.iter().any(|v| !v.is_finite()) {
        return Err(IqaError::InvalidPixelData);
    }
    let scale = if patch.data.iter().any(|&v| v > 1.0) {
        1.0 / 255.0
    } else {
        1.0
    };
    let p = patch.size;
    let n = (p * p) as f64;
    let mut out = vec![0.0; BUILTIN_DIM];

    let mut luma = Vec::with_capacity(p * p);
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for px in patch.data.chunks_exact(3) {
        let rgb = [
            px[0] as f64 * scale,
            px[1] as f64 * scale,
            px[2] as f64 * scale,
        ];
        for c in 0..3 {
            sums[c] += rgb[c];
            sq[c] += rgb[c] * rgb[c];
        }
        luma.push(luminance(rgb));
    }
    for c in 0..3 {
        let mean = sums[c] / n;
        out[OFF_MEAN + c] = mean;
        out[OFF_STD + c] = (sq[c] / n - mean * mean).max(0.0).sqrt();
    }

    let at = |x: usize, y: usize| luma[y * p + x];
    let left = |x: usize| (x + p - 1) % p;
    let right = |x: usize| (x + 1) % p;

    let mut luma_hist = [0.0f64; HIST_BINS];
    let mut grad_hist = [0.0f64; HIST_BINS];
    let mut lap_energy = 0.0;
    for y in 0..p {
        for x in 0..p {
            let v = at(x, y);
            luma_hist[((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0;
            let gx = (at(right(x), y) - at(left(x), y)) / 2.0;
            let gy = (at(x, right(y)) - at(x, left(y))) / 2.0;
            grad_hist[bin_of((gx * gx + gy * gy).sqrt(), GRAD_MAX)] += 1.0;
            let lap = at(left(x), y) + at(right(x), y) + at(x, left(y)) + at(x, right(y)) - 4.0 * v;
            lap_energy += lap * lap;
        }
    }

    let mut var_hist = [0.0f64; HIST_BINS];
    let block = BLOCK.min(p);
    let blocks_per_side = p / block;
    for by in 0..blocks_per_side {
        for bx in 0..blocks_per_side {
            let (mut s, mut s2) = (0.0, 0.0);
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let v = at(x, y);
                    s += v;
                    s2 += v * v;
                }
            }
            let m = (block * block) as f64;
            let var = (s2 / m - (s / m) * (s / m)).max(0.0);
            var_hist[bin_of(var, VAR_MAX)] += 1.0;
        }
    }
    let n_blocks = (blocks_per_side * blocks_per_side) as f64;

    let mut entropy = 0.0;
    for b in 0..HIST_BINS {
        let pl = luma_hist[b] / n;
        out[OFF_LUMA_HIST + b] = pl;
        out[OFF_GRAD_HIST + b] = grad_hist[b] / n;
        out[OFF_VAR_HIST + b] = var_hist[b] / n_blocks;
        if pl > 0.0 {
            entropy -= pl * pl.log2();
        }
    }
    out[OFF_LAPLACIAN] = lap_energy / n;
    out[OFF_ENTROPY] = entropy;
    Ok(out)
}

/// Encodes every patch with the built-in encoder.
///
/// Values are rounded to `f32` precision so that features written to and
/// read back from a cache are identical to freshly computed ones.
pub fn encode_patches(patches: &[Patch]) -> Result<RawFeatures> {
    let rows = exec::try_map_slice(patches, encode_builtin)?;
    let mut matrix = Array2::zeros((patches.len(), BUILTIN_DIM));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            matrix[[i, j]] = v as f32 as f64;
        }
    }
    RawFeatures::new(matrix, FeatureSource::BuiltinStat)
}

const CACHE_MAGIC: &[u8; 4] = b"UGQF";
const CACHE_VERSION: u32 = 1;

/// Serializes features and normalized centers in the `UGQF` layout:
/// magic, version, N, d_raw (u32 LE), N*d_raw f32 row-major, N (x, y) f32.
pub fn encode_feature_cache(features: &RawFeatures, layout: &PatchLayout) -> Result<Vec<u8>> {
    let n = features.n_patches();
    if layout.len() != n {
        return Err(IqaError::shape("cache layout length", n, layout.len()));
    }
    let d = features.dim();
    let mut buf = Vec::with_capacity(16 + 4 * (n * d + 2 * n));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.matrix.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &[x, y] in &layout.centers_norm {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
        buf.extend_from_slice(&(y as f32).to_le_bytes());
    }
    Ok(buf)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(IqaError::TruncatedPayload)
}

pub fn decode_feature_cache(bytes: &[u8]) -> Result<(RawFeatures, PatchLayout)> {
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(IqaError::BadMagic);
    }
    let version = read_u32(bytes, 4)?;
    if version != CACHE_VERSION {
        return Err(IqaError::UnsupportedVersion(version));
    }
    let n = read_u32(bytes, 8)? as usize;
    let d = read_u32(bytes, 12)? as usize;
    let floats = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(2 * n))
        .ok_or(IqaError::TruncatedPayload)?;
    let payload = &bytes[16..];
    if payload.len() < floats * 4 {
        return Err(IqaError::TruncatedPayload);
    }
    let mut values = payload[..floats * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let matrix = Array2::from_shape_fn((n, d), |_| values.next().unwrap());
    let centers = (0..n)
        .map(|_| [values.next().unwrap(), values.next().unwrap()])
        .collect();
    let features = RawFeatures::new(matrix, FeatureSource::ImportedCache)?;
    Ok((features, PatchLayout::from_normalized(centers)))
}

pub fn save_feature_cache(features: &RawFeatures, layout: &PatchLayout, path: &Path) -> Result<()> {
    let bytes = encode_feature_cache(features, layout)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_feature_cache(path: &Path) -> Result<(RawFeatures, PatchLayout)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_feature_cache(&bytes)
}
