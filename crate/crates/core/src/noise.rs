//! AWGN synthesis and blind noise-level estimation.
//!
//! The normal sampler is counter-addressable: sample `i` of a seed is the
//! same value no matter how the buffer is split across threads.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::stats::median;

/// Recorded in run metadata next to the seed.
pub const GENERATOR_NAME: &str = "chacha20-boxmuller";

/// Gaussian consistency constant for the median absolute deviation.
pub const MAD_CONSTANT: f64 = 0.6745;

/// Degradation parameters. `sigma` is in 8-bit units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub clip: bool,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 50.0,
            clip: true,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Seeded standard-normal stream (ChaCha20 words, Box-Muller pairs).
///
/// Pair `p` consumes 64-bit words `2p` and `2p + 1` and yields samples
/// `2p` (cosine branch) and `2p + 1` (sine branch).
#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Positions the stream so the next normal is sample `index`.
    pub fn seek(&mut self, index: u64) {
        let pair = index / 2;
        // 32-bit word position; each pair spans four of them.
        self.rng.set_word_pos(u128::from(pair) * 4);
        self.spare = None;
        if index % 2 == 1 {
            let (_, s) = self.pair();
            self.spare = Some(s);
        }
    }

    fn pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let (c, s) = self.pair();
        self.spare = Some(s);
        c
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

const CHUNK: usize = 1 << 14;

/// Adds `sigma/255 * Z` to every sample, then clamps to `[0, 1]` if asked.
///
/// Work is split into fixed-size chunks, each seeking the stream to its
/// first sample index, so the output bytes do not depend on thread count.
pub fn add_awgn(img: &ImageF, spec: &NoiseSpec) -> Result<ImageF> {
    spec.validate()?;
    let mut out = img.clone();
    if spec.sigma > 0.0 {
        let scale = spec.sigma / 255.0;
        out.data_mut()
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(k, chunk)| {
                let mut stream = NormalStream::new(spec.seed);
                stream.seek((k * CHUNK) as u64);
                for v in chunk {
                    *v += scale * stream.next_normal();
                }
            });
    }
    if spec.clip {
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Finest-scale diagonal Haar detail of one plane (non-overlapping 2x2 blocks,
/// orthonormal scaling so white noise keeps its standard deviation).
pub(crate) fn haar_hh(plane: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut hh = Vec::with_capacity((height / 2) * (width / 2));
    for r in (0..height - 1).step_by(2) {
        for c in (0..width - 1).step_by(2) {
            let a = plane[r * width + c];
            let b = plane[r * width + c + 1];
            let d = plane[(r + 1) * width + c];
            let e = plane[(r + 1) * width + c + 1];
            hh.push(0.5 * (a - b - d + e));
        }
    }
    hh
}

/// Blind AWGN level in 8-bit units: `255 * median(|HH1|) / 0.6745`, averaged
/// over channels.
pub fn estimate_sigma(img: &ImageF) -> Result<f64> {
    let (h, w, _) = img.shape();
    if h.min(w) < 2 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            required: 2,
        });
    }
    let per_channel: Vec<f64> = img
        .planes()
        .iter()
        .map(|p| {
            let mut abs: Vec<f64> = haar_hh(p, h, w).into_iter().map(f64::abs).collect();
            255.0 * median(&mut abs).unwrap_or(0.0) / MAD_CONSTANT
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, c: usize, v: f64) -> ImageF {
        ImageF::filled(h, w, c, v).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = ImageF::from_fn(7, 5, 3, |r, c, ch| (r + c + ch) as f64 / 20.0).unwrap();
        for clip in [false, true] {
            let out = add_awgn(&img, &NoiseSpec { sigma: 0.0, clip, seed: 9 }).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        let img = gray(2, 2, 1, 0.5);
        assert!(add_awgn(&img, &NoiseSpec { sigma: -1.0, clip: false, seed: 0 }).is_err());
        assert!(add_awgn(&img, &NoiseSpec { sigma: f64::NAN, clip: false, seed: 0 }).is_err());
    }

    #[test]
    fn clipped_output_in_unit_range() {
        let img = gray(64, 64, 3, 0.9);
        let out = add_awgn(&img, &NoiseSpec { sigma: 50.0, clip: true, seed: 1 }).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn moments_match_sigma() {
        // N = 196 608: the mean's standard error is 0.196/443 = 4.4e-4, so a
        // 0.002 band is ~4.5 standard errors; the std's relative standard
        // error is 1/sqrt(2N) = 0.16%, far inside the 2% band.
        let img = gray(256, 256, 3, 0.5);
        let out = add_awgn(&img, &NoiseSpec { sigma: 50.0, clip: false, seed: 42 }).unwrap();
        let diffs: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.002, "mean {mean}");
        let target = 50.0 / 255.0;
        assert!((var.sqrt() / target - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let img = gray(40, 30, 3, 0.5);
        let spec = NoiseSpec { sigma: 25.0, clip: false, seed: 7 };
        let a = add_awgn(&img, &spec).unwrap();
        let b = add_awgn(&img, &spec).unwrap();
        assert_eq!(a, b);
        let c = add_awgn(&img, &NoiseSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seek_matches_sequential_stream() {
        let mut seq = NormalStream::new(3);
        let all: Vec<f64> = (0..101).map(|_| seq.next_normal()).collect();
        for start in [0u64, 1, 2, 37, 64, 99, 100] {
            let mut s = NormalStream::new(3);
            s.seek(start);
            assert_eq!(s.next_normal(), all[start as usize], "index {start}");
        }
        // Chunked fill reproduces the single-pass buffer.
        let img = gray(200, 100, 3, 0.5);
        let out = add_awgn(&img, &NoiseSpec { sigma: 10.0, clip: false, seed: 3 }).unwrap();
        let mut s = NormalStream::new(3);
        for (i, v) in out.data().iter().enumerate() {
            let expect = 0.5 + 10.0 / 255.0 * s.next_normal();
            assert_eq!(*v, expect, "sample {i}");
        }
    }

    #[test]
    fn clipped_agrees_with_unclipped_inside_range() {
        let img = ImageF::from_fn(32, 32, 1, |r, c, _| (r * 32 + c) as f64 / 1023.0).unwrap();
        let spec = NoiseSpec { sigma: 50.0, clip: false, seed: 5 };
        let raw = add_awgn(&img, &spec).unwrap();
        let clipped = add_awgn(&img, &NoiseSpec { clip: true, ..spec }).unwrap();
        for (u, c) in raw.data().iter().zip(clipped.data()) {
            if *c > 0.0 && *c < 1.0 {
                assert_eq!(u, c);
            }
        }
    }

    #[test]
    fn estimator_zero_on_constant() {
        assert_eq!(estimate_sigma(&gray(16, 16, 3, 0.3)).unwrap(), 0.0);
    }

    #[test]
    fn estimator_rejects_degenerate() {
        assert!(estimate_sigma(&gray(1, 8, 1, 0.3)).is_err());
    }

    fn estimate_median(sigma: f64, seeds: std::ops::Range<u64>) -> f64 {
        let img = gray(256, 256, 1, 0.5);
        let mut est: Vec<f64> = seeds
            .map(|seed| {
                let noisy = add_awgn(&img, &NoiseSpec { sigma, clip: false, seed }).unwrap();
                estimate_sigma(&noisy).unwrap()
            })
            .collect();
        median(&mut est).unwrap()
    }

    #[test]
    fn estimator_on_constant_plus_noise() {
        let img = gray(256, 256, 3, 0.5);
        for seed in 0..10 {
            let noisy = add_awgn(&img, &NoiseSpec { sigma: 50.0, clip: false, seed }).unwrap();
            let e = estimate_sigma(&noisy).unwrap();
            assert!((45.0..=55.0).contains(&e), "seed {seed}: {e}");
        }
    }

    #[test]
    fn estimator_is_monotone_in_sigma() {
        let low = estimate_median(10.0, 0..10);
        let high = estimate_median(50.0, 0..10);
        assert!(high > low, "{high} <= {low}");
    }
}
