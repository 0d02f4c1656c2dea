//! Latent injection: every modality becomes a `(H', W', C')` latent frame.
//!
//! * Images go through a fixed, seeded linear projection of non-overlapping
//!   `p x p` pixel patches.
//! * Proprioception is normalized to `[-1, 1]` and repeat-padded (tiled) over
//!   the flattened frame; decoding averages the complete chunks.
//! * The scalar value `G in [0, 2]` is broadcast as `G - 1` to every cell;
//!   decoding takes the mean and adds one.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, Proprioception, RgbImage};
use crate::error::{Error, Result};

pub const VALUE_MIN: f64 = 0.0;
pub const VALUE_MAX: f64 = 2.0;

/// Smallest magnitude allowed for the response of an encoder channel to a
/// constant patch.
const MIN_CONSTANT_RESPONSE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentGeometry {
    pub const DEFAULT: LatentGeometry = LatentGeometry {
        height: 8,
        width: 8,
        channels: 4,
    };

    pub fn cells(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl Default for LatentGeometry {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Row-major `(H', W', C')` block.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub geometry: LatentGeometry,
    pub data: Vec<f64>,
}

impl LatentFrame {
    pub fn zeros(geometry: LatentGeometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    pub fn filled(geometry: LatentGeometry, v: f64) -> Self {
        Self {
            geometry,
            data: vec![v; geometry.cells()],
        }
    }

    pub fn from_data(geometry: LatentGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.cells() {
            return Err(Error::Geometry(format!(
                "frame has {} cells, geometry needs {}",
                data.len(),
                geometry.cells()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn at(&self, h: usize, w: usize, c: usize) -> f64 {
        let g = self.geometry;
        self.data[(h * g.width + w) * g.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-dimension affine map from proprioception to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub proprio_min: Vec<f64>,
    pub proprio_max: Vec<f64>,
}

impl NormalizationSpec {
    pub fn new(proprio_min: Vec<f64>, proprio_max: Vec<f64>) -> Result<Self> {
        if proprio_min.len() != proprio_max.len() || proprio_min.is_empty() {
            return Err(Error::invalid("normalization bounds must have equal, non-zero length"));
        }
        if proprio_min.iter().zip(&proprio_max).any(|(lo, hi)| !(hi > lo)) {
            return Err(Error::invalid("proprio_max must exceed proprio_min in every dimension"));
        }
        Ok(Self {
            proprio_min,
            proprio_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.proprio_min.len()
    }

    pub fn value_range(&self) -> (f64, f64) {
        (VALUE_MIN, VALUE_MAX)
    }

    /// Per-dimension min/max over every step of the corpus, widened by 1% of
    /// the span on each side; constant dimensions are widened by `1e-3`.
    pub fn fit(corpus: &[Episode]) -> Result<Self> {
        let first = corpus
            .iter()
            .flat_map(|e| e.steps.first())
            .next()
            .ok_or(Error::EmptyDataset)?;
        let d_q = first.proprio.dim();
        let mut lo = vec![f64::INFINITY; d_q];
        let mut hi = vec![f64::NEG_INFINITY; d_q];
        for step in corpus.iter().flat_map(|e| &e.steps) {
            if step.proprio.dim() != d_q {
                return Err(Error::Geometry("inconsistent d_q in corpus".into()));
            }
            for (i, &v) in step.proprio.values.iter().enumerate() {
                lo[i] = lo[i].min(v as f64);
                hi[i] = hi[i].max(v as f64);
            }
        }
        for i in 0..d_q {
            let span = hi[i] - lo[i];
            if span > 0.0 {
                lo[i] -= 0.01 * span;
                hi[i] += 0.01 * span;
            } else {
                lo[i] -= 1e-3;
                hi[i] += 1e-3;
            }
        }
        Self::new(lo, hi)
    }

    pub fn normalize(&self, i: usize, v: f64) -> f64 {
        let (lo, hi) = (self.proprio_min[i], self.proprio_max[i]);
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    pub fn denormalize(&self, i: usize, n: f64) -> f64 {
        let (lo, hi) = (self.proprio_min[i], self.proprio_max[i]);
        (n + 1.0) * 0.5 * (hi - lo) + lo
    }
}

/// Fixed random linear map from `p x p x 3` pixel patches to `C'` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    patch: usize,
    channels: usize,
    seed: u64,
    /// `channels x (patch * patch * 3)`, row-major.
    weights: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Self {
        let fan_in = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut weights: Vec<f64> = (0..channels * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        for row in weights.chunks_mut(fan_in) {
            let sum: f64 = row.iter().sum();
            if sum.abs() < MIN_CONSTANT_RESPONSE {
                let target = if sum < 0.0 { -MIN_CONSTANT_RESPONSE } else { MIN_CONSTANT_RESPONSE };
                let shift = (target - sum) / fan_in as f64;
                row.iter_mut().for_each(|w| *w += shift);
            }
        }
        Self {
            patch,
            channels,
            seed,
            weights,
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Response of each channel to a constant patch of unit intensity.
    pub fn constant_response(&self) -> Vec<f64> {
        let fan_in = self.patch * self.patch * 3;
        self.weights.chunks(fan_in).map(|r| r.iter().sum()).collect()
    }
}

/// Serializable description of a codec; the encoder weights are regenerated
/// from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub geometry: LatentGeometry,
    pub image_size: (usize, usize),
    pub encoder_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            geometry: LatentGeometry::DEFAULT,
            image_size: (32, 32),
            encoder_seed: 0x5eed_c0de,
        }
    }
}

#[derive(Debug)]
pub struct LatentCodec {
    config: CodecConfig,
    encoder: ImageEncoder,
    clamped: AtomicU64,
}

impl Clone for LatentCodec {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.clone(),
            clamped: AtomicU64::new(self.clamp_count()),
        }
    }
}

impl LatentCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        let g = config.geometry;
        let (h, w) = config.image_size;
        if g.height == 0 || g.width == 0 || g.channels == 0 {
            return Err(Error::Geometry("latent dimensions must be positive".into()));
        }
        if h % g.height != 0 || w % g.width != 0 || h / g.height != w / g.width {
            return Err(Error::Geometry(format!(
                "image {h}x{w} is not an integer square downsample of latent {}x{}",
                g.height, g.width
            )));
        }
        let patch = h / g.height;
        Ok(Self {
            config,
            encoder: ImageEncoder::new(patch, g.channels, config.encoder_seed),
            clamped: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> CodecConfig {
        self.config
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.config.geometry
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    /// Number of proprioception entries clamped into range so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn blank_frame(&self) -> LatentFrame {
        LatentFrame::zeros(self.geometry())
    }

    pub fn encode_proprio(&self, q: &Proprioception, spec: &NormalizationSpec) -> Result<LatentFrame> {
        let g = self.geometry();
        let d_q = q.dim();
        if d_q == 0 || d_q > g.cells() {
            return Err(Error::Geometry(format!(
                "d_q={d_q} does not fit a frame of {} cells",
                g.cells()
            )));
        }
        if d_q != spec.dim() {
            return Err(Error::Geometry(format!(
                "d_q={d_q} but normalization spec has {} dims",
                spec.dim()
            )));
        }
        let mut clamped = 0;
        let normalized: Vec<f64> = q
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let n = spec.normalize(i, v as f64);
                if !(-1.0..=1.0).contains(&n) {
                    clamped += 1;
                }
                n.clamp(-1.0, 1.0)
            })
            .collect();
        if clamped > 0 {
            let total = self.clamped.fetch_add(clamped, Ordering::Relaxed) + clamped;
            if total.is_power_of_two() {
                log::warn!("clamped {total} out-of-range proprioception entries so far");
            }
        }
        let data = (0..g.cells()).map(|i| normalized[i % d_q]).collect();
        Ok(LatentFrame { geometry: g, data })
    }

    pub fn decode_proprio(
        &self,
        z: &LatentFrame,
        d_q: usize,
        spec: &NormalizationSpec,
    ) -> Result<Proprioception> {
        if z.geometry != self.geometry() {
            return Err(Error::Geometry("frame geometry differs from codec".into()));
        }
        if d_q == 0 || d_q > z.data.len() || d_q != spec.dim() {
            return Err(Error::Geometry(format!("cannot decode d_q={d_q}")));
        }
        // Trailing partial chunk is ignored.
        let chunks = z.data.len() / d_q;
        let values = (0..d_q)
            .map(|i| {
                let mean = (0..chunks).map(|c| z.data[c * d_q + i]).sum::<f64>() / chunks as f64;
                spec.denormalize(i, mean) as f32
            })
            .collect();
        Ok(Proprioception::new(values))
    }

    pub fn encode_value(&self, g: f64) -> Result<LatentFrame> {
        if !(VALUE_MIN..=VALUE_MAX).contains(&g) {
            return Err(Error::invalid(format!("value {g} outside [0, 2]")));
        }
        Ok(LatentFrame::filled(self.geometry(), g - 1.0))
    }

    /// Mean of the frame plus one, clamped to `[0, 2]`.
    pub fn decode_value(&self, z: &LatentFrame) -> f64 {
        decode_value_mean(z.mean())
    }

    pub fn encode_image(&self, view: &RgbImage) -> Result<LatentFrame> {
        let (h, w) = self.config.image_size;
        if view.height != h || view.width != w || view.data.len() != h * w * 3 {
            return Err(Error::Geometry(format!(
                "image is {}x{}, codec expects {h}x{w}",
                view.height, view.width
            )));
        }
        let g = self.geometry();
        let p = self.encoder.patch;
        let fan_in = p * p * 3;
        let mut patch = vec![0.0; fan_in];
        let mut data = Vec::with_capacity(g.cells());
        for ph in 0..g.height {
            for pw in 0..g.width {
                let mut k = 0;
                for dy in 0..p {
                    let row = ph * p + dy;
                    let start = (row * w + pw * p) * 3;
                    for &byte in &view.data[start..start + p * 3] {
                        patch[k] = byte as f64 / 127.5 - 1.0;
                        k += 1;
                    }
                }
                for c in 0..g.channels {
                    let wrow = &self.encoder.weights[c * fan_in..(c + 1) * fan_in];
                    data.push(wrow.iter().zip(&patch).map(|(a, b)| a * b).sum());
                }
            }
        }
        Ok(LatentFrame { geometry: g, data })
    }
}

pub fn decode_value_mean(mean: f64) -> f64 {
    (mean + 1.0).clamp(VALUE_MIN, VALUE_MAX)
}
