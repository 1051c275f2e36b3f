//! Output merging: D4 self-ensemble, weighted model ensembles, multi-scale
//! patch ensembles and Canny edge-guided fusion of two models.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, sobel};
use crate::image::{apply_transform, GeomTransform, ImageF};
use crate::tiling::{run_tiled, TileSpec};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl EdgeMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask buffer of {} entries for {height}x{width}",
                data.len()
            )));
        }
        Ok(EdgeMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        EdgeMask { height, width, data: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn zip_with(&self, other: &EdgeMask, f: impl Fn(bool, bool) -> bool) -> Result<EdgeMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                expected: (self.height, self.width, 1),
                found: (other.height, other.width, 1),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(EdgeMask { height: self.height, width: self.width, data })
    }

    pub fn or(&self, other: &EdgeMask) -> Result<EdgeMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn xor(&self, other: &EdgeMask) -> Result<EdgeMask> {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn and_not(&self, other: &EdgeMask) -> Result<EdgeMask> {
        self.zip_with(other, |a, b| a & !b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    /// Thresholds on the raw (unnormalized) Sobel magnitude of the smoothed
    /// luma in `[0, 1]` units.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { sigma: 1.4, low: 0.1, high: 0.2 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("canny sigma must be > 0"));
        }
        if !(self.low >= 0.0) || !(self.low <= self.high) {
            return Err(Error::invalid(format!(
                "canny thresholds out of order: low {} high {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Canny edges of the Rec.601 luma.
///
/// Non-maximum suppression keeps a pixel when it is `>=` its neighbour
/// behind along the quantized gradient direction and strictly `>` the one
/// ahead, so a symmetric ridge yields a single pixel rather than two. The
/// one-pixel image border is never marked.
pub fn canny(img: &ImageF, params: &CannyParams) -> Result<EdgeMask> {
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    let smooth = gaussian_blur(&img.luma(), h, w, params.sigma);
    let (gx, gy) = sobel(&smooth, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();

    let mut strong = vec![false; h * w];
    let mut weak = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let g = mag[i];
            if g < params.low || g == 0.0 {
                continue;
            }
            // Angle folded into [0, 180) and binned to 0/45/90/135 degrees.
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dy, dx): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let ahead = mag[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
            let behind = mag[((y as isize - dy) as usize) * w + (x as isize - dx) as usize];
            if g >= behind && g > ahead {
                weak[i] = true;
                strong[i] = g >= params.high;
            }
        }
    }

    let mut out = vec![false; h * w];
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| strong[i]).collect();
    for &i in &queue {
        out[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if weak[j] && !out[j] {
                    out[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    EdgeMask::new(h, w, out)
}

/// `b` where only `a` sees an edge, the average of `a` and `b` elsewhere.
pub fn fuse_with_mask(a: &ImageF, b: &ImageF, mask: &EdgeMask) -> Result<ImageF> {
    a.same_shape(b)?;
    if (mask.height(), mask.width()) != (a.height(), a.width()) {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            found: (mask.height(), mask.width(), a.channels()),
        });
    }
    let c = a.channels();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| if mask.data()[i / c] { *y } else { 0.5 * (x + y) })
        .collect();
    ImageF::new(a.height(), a.width(), c, data)
}

/// Fusion mask `(E_a OR E_b) XOR E_b` for edge maps of `a` and `b`.
pub fn fusion_mask(a: &ImageF, b: &ImageF, params: &CannyParams) -> Result<EdgeMask> {
    a.same_shape(b)?;
    let (ea, eb) = (canny(a, params)?, canny(b, params)?);
    ea.or(&eb)?.xor(&eb)
}

/// Edge-guided fusion where `b` is the edge reference model.
pub fn edge_guided_fuse(a: &ImageF, b: &ImageF, params: &CannyParams) -> Result<ImageF> {
    let mask = fusion_mask(a, b, params)?;
    fuse_with_mask(a, b, &mask)
}

/// Mean of `T^-1(denoise(T(img)))` over the eight D4 transforms, reduced in
/// fixed transform order.
pub fn self_ensemble<D: Denoiser + ?Sized>(denoiser: &D, img: &ImageF) -> Result<ImageF> {
    let branches: Vec<ImageF> = GeomTransform::ALL
        .par_iter()
        .map(|&g| {
            let wrap = |e| Error::Transform { transform: g.name(), source: Box::new(e) };
            let input = apply_transform(img, g);
            let out = denoiser.denoise(&input).map_err(wrap)?;
            if out.shape() != input.shape() {
                return Err(wrap(Error::ShapeMismatch { expected: input.shape(), found: out.shape() }));
            }
            Ok(apply_transform(&out, g.inverse()))
        })
        .collect::<Result<_>>()?;
    average(&branches)
}

fn average(images: &[ImageF]) -> Result<ImageF> {
    let n = images.len();
    weighted_sum(images, &vec![1.0 / n as f64; n])
}

fn weighted_sum(images: &[ImageF], weights: &[f64]) -> Result<ImageF> {
    let first = images.first().ok_or_else(|| Error::invalid("nothing to merge"))?;
    let mut acc = vec![0.0; first.len()];
    for (img, &wgt) in images.iter().zip(weights) {
        first.same_shape(img)?;
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += wgt * v;
        }
    }
    let (h, w, c) = first.shape();
    ImageF::new(h, w, c, acc)
}

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("ensemble needs at least one weight"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid(format!("ensemble weights must be >= 0: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::invalid(format!("ensemble weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Per-pixel convex combination of model outputs.
pub fn weighted_ensemble(outputs: &[ImageF], weights: &[f64]) -> Result<ImageF> {
    validate_weights(weights)?;
    if outputs.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} outputs but {} weights",
            outputs.len(),
            weights.len()
        )));
    }
    weighted_sum(outputs, weights)
}

fn maybe_quantize(img: ImageF, quantize: bool) -> ImageF {
    if quantize {
        img.to_u8().to_float()
    } else {
        img
    }
}

/// Mean of tiled inference over several tile specs.
pub fn multiscale<D: Denoiser + ?Sized>(
    denoiser: &D,
    img: &ImageF,
    specs: &[TileSpec],
    quantize_before_merge: bool,
) -> Result<ImageF> {
    if specs.is_empty() {
        return Err(Error::invalid("multiscale ensemble needs at least one tile spec"));
    }
    let outputs = specs
        .iter()
        .map(|s| run_tiled(denoiser, img, s).map(|o| maybe_quantize(o, quantize_before_merge)))
        .collect::<Result<Vec<_>>>()?;
    average(&outputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "params", rename_all = "snake_case")]
pub enum EnsembleMode {
    SelfD4,
    Weighted(Vec<f64>),
    Multiscale(Vec<TileSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub mode: EnsembleMode,
    #[serde(default)]
    pub quantize_before_merge: bool,
}

impl EnsembleSpec {
    pub fn new(mode: EnsembleMode) -> Self {
        EnsembleSpec { mode, quantize_before_merge: false }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            EnsembleMode::SelfD4 => Ok(()),
            EnsembleMode::Weighted(w) => validate_weights(w),
            EnsembleMode::Multiscale(specs) if specs.is_empty() => {
                Err(Error::invalid("multiscale ensemble needs at least one tile spec"))
            }
            EnsembleMode::Multiscale(specs) => specs.iter().try_for_each(TileSpec::validate),
        }
    }

    /// Merges already computed member outputs (weighted mode only).
    pub fn merge(&self, outputs: &[ImageF]) -> Result<ImageF> {
        match &self.mode {
            EnsembleMode::Weighted(w) => {
                let outputs: Vec<ImageF> = outputs
                    .iter()
                    .map(|o| maybe_quantize(o.clone(), self.quantize_before_merge))
                    .collect();
                weighted_ensemble(&outputs, w)
            }
            _ => Err(Error::invalid("merge applies to weighted ensembles only")),
        }
    }

    /// Runs a single denoiser under this ensemble (self-D4 or multiscale).
    pub fn run<D: Denoiser + ?Sized>(&self, denoiser: &D, img: &ImageF) -> Result<ImageF> {
        self.validate()?;
        match &self.mode {
            EnsembleMode::SelfD4 if self.quantize_before_merge => {
                let q = crate::denoisers::FnDenoiser(|x: &ImageF| {
                    denoiser.denoise(x).map(|o| maybe_quantize(o, true))
                });
                self_ensemble(&q, img)
            }
            EnsembleMode::SelfD4 => self_ensemble(denoiser, img),
            EnsembleMode::Multiscale(specs) => multiscale(denoiser, img, specs, self.quantize_before_merge),
            EnsembleMode::Weighted(_) => Err(Error::invalid("weighted ensembles merge several models")),
        }
    }
}

/// A denoiser wrapped in the D4 self-ensemble.
pub struct SelfEnsemble<D>(pub D);

impl<D: Denoiser> Denoiser for SelfEnsemble<D> {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        self_ensemble(&self.0, img)
    }
}

/// A denoiser averaged over several tile specs.
pub struct Multiscale<D> {
    pub inner: D,
    pub specs: Vec<TileSpec>,
    pub quantize_before_merge: bool,
}

impl<D: Denoiser> Denoiser for Multiscale<D> {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        multiscale(&self.inner, img, &self.specs, self.quantize_before_merge)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{DenoiserSpec, FnDenoiser};
    use crate::tiling::BlendMode;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn pattern(h: usize, w: usize, c: usize) -> ImageF {
        ImageF::from_fn(h, w, c, |r, col, ch| {
            (((r * 31 + col * 17 + ch * 7) % 23) as f64 / 22.0) * 0.8 + 0.1
        })
        .unwrap()
    }

    fn step(h: usize, w: usize, at: usize, lo: f64, hi: f64) -> ImageF {
        ImageF::from_fn(h, w, 1, |_, c, _| if c >= at { hi } else { lo }).unwrap()
    }

    #[test]
    fn self_ensemble_of_identity_is_input() {
        let img = pattern(7, 10, 3);
        let out = self_ensemble(&DenoiserSpec::Identity, &img).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn self_ensemble_of_gaussian_matches_plain_and_calls_eight_times() {
        let img = pattern(19, 26, 3);
        let g = DenoiserSpec::Gaussian { sigma: 1.5 };
        let calls = AtomicUsize::new(0);
        let counted = FnDenoiser(|x: &ImageF| {
            calls.fetch_add(1, Ordering::SeqCst);
            g.denoise(x)
        });
        let se = self_ensemble(&counted, &img).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 8);
        let plain = g.denoise(&img).unwrap();
        for (a, b) in se.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn self_ensemble_is_idempotent_for_equivariant_denoisers() {
        let img = pattern(12, 9, 1);
        let g = DenoiserSpec::Gaussian { sigma: 1.0 };
        let once = SelfEnsemble(g.clone()).denoise(&img).unwrap();
        let twice = SelfEnsemble(SelfEnsemble(g)).denoise(&img).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn self_ensemble_names_failing_transform() {
        let img = pattern(4, 6, 1);
        // Fails only on axis-swapping branches (input becomes 6x4).
        let den = FnDenoiser(|x: &ImageF| {
            if x.height() == 6 {
                Err(Error::invalid("tall input"))
            } else {
                Ok(x.clone())
            }
        });
        let e = self_ensemble(&den, &img).unwrap_err();
        assert!(matches!(e, Error::Transform { .. }), "{e}");
        assert!(e.to_string().contains("rot"));
    }

    #[test]
    fn weighted_examples() {
        let a = pattern(5, 5, 3);
        let b = pattern(5, 5, 3).map_planes(|p| p.iter().map(|v| 1.0 - v).collect()).unwrap();
        let out = weighted_ensemble(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap();
        for (x, y) in out.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let zero = ImageF::filled(4, 4, 1, 0.0).unwrap();
        let one = ImageF::filled(4, 4, 1, 1.0).unwrap();
        let out = weighted_ensemble(&[zero, one], &[0.6, 0.4]).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        let same = weighted_ensemble(&[a.clone(), a.clone(), a.clone()], &[0.2, 0.3, 0.5]).unwrap();
        for (x, y) in same.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_rejects_bad_input() {
        let a = pattern(5, 5, 3);
        assert!(weighted_ensemble(&[a.clone(), a.clone()], &[0.6, 0.5]).is_err());
        assert!(weighted_ensemble(&[a.clone(), a.clone()], &[1.2, -0.2]).is_err());
        assert!(weighted_ensemble(std::slice::from_ref(&a), &[0.5, 0.5]).is_err());
        let small = pattern(4, 5, 3);
        let e = weighted_ensemble(&[a, small], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { .. }));
        assert!(validate_weights(&[0.6, 0.4 + 5e-10]).is_ok());
    }

    #[test]
    fn canny_constant_is_empty() {
        let m = canny(&ImageF::filled(20, 24, 3, 0.3).unwrap(), &CannyParams::default()).unwrap();
        assert_eq!((m.height(), m.width(), m.count()), (20, 24, 0));
    }

    #[test]
    fn canny_step_is_one_pixel_wide() {
        // 0 -> 0.5 at column 16; a reference Canny puts the line on
        // column 15 or 16.
        let m = canny(&step(32, 32, 16, 0.0, 0.5), &CannyParams::default()).unwrap();
        for r in 1..31 {
            let cols: Vec<usize> = (0..32).filter(|&c| m.get(r, c)).collect();
            assert_eq!(cols.len(), 1, "row {r}: {cols:?}");
            assert!((15..=16).contains(&cols[0]));
        }
        for c in 0..32 {
            assert!(!m.get(0, c) && !m.get(31, c));
        }
    }

    #[test]
    fn canny_hysteresis_and_thresholds() {
        assert!(canny(&step(8, 8, 4, 0.0, 1.0), &CannyParams { sigma: 1.4, low: 0.3, high: 0.2 }).is_err());
        // A faint step below the high threshold is dropped entirely.
        let faint = canny(&step(32, 32, 16, 0.0, 0.05), &CannyParams::default()).unwrap();
        assert_eq!(faint.count(), 0);
        // With high above the contrast but low below it, nothing seeds the line either.
        let seeded = canny(&step(32, 32, 16, 0.0, 0.5), &CannyParams { sigma: 1.4, low: 0.1, high: 50.0 }).unwrap();
        assert_eq!(seeded.count(), 0);
    }

    #[test]
    fn mask_identity_truth_table() {
        for x in [false, true] {
            for y in [false, true] {
                assert_eq!((x | y) ^ y, x & !y);
            }
        }
        let a = EdgeMask::new(1, 4, vec![false, false, true, true]).unwrap();
        let b = EdgeMask::new(1, 4, vec![false, true, false, true]).unwrap();
        assert_eq!(a.or(&b).unwrap().xor(&b).unwrap(), a.and_not(&b).unwrap());
    }

    #[test]
    fn fuse_equal_inputs_is_identity() {
        let a = step(16, 16, 8, 0.1, 0.9);
        assert_eq!(fusion_mask(&a, &a, &CannyParams::default()).unwrap().count(), 0);
        assert_eq!(edge_guided_fuse(&a, &a, &CannyParams::default()).unwrap(), a);
    }

    #[test]
    fn fuse_without_edges_averages() {
        let a = ImageF::filled(16, 16, 3, 0.2).unwrap();
        let b = ImageF::filled(16, 16, 3, 0.6).unwrap();
        let out = edge_guided_fuse(&a, &b, &CannyParams::default()).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn fuse_keeps_reference_on_edges_of_a() {
        let a = step(16, 16, 8, 0.0, 1.0);
        let b = ImageF::filled(16, 16, 1, 0.3).unwrap();
        let p = CannyParams::default();
        let ea = canny(&a, &p).unwrap();
        assert!(ea.count() > 0);
        let out = edge_guided_fuse(&a, &b, &p).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let expect = if ea.get(r, c) { 0.3 } else { 0.5 * (a.get(r, c, 0) + 0.3) };
                assert_eq!(out.get(r, c, 0), expect);
            }
        }
    }

    #[test]
    fn multiscale_is_mean_of_individual_runs() {
        let img = pattern(40, 52, 3);
        let g = DenoiserSpec::Gaussian { sigma: 1.5 };
        let specs: Vec<TileSpec> = ["16/4", "24/6", "32/8"].iter().map(|s| s.parse().unwrap()).collect();
        let merged = multiscale(&g, &img, &specs, false).unwrap();
        let runs: Vec<ImageF> = specs.iter().map(|s| run_tiled(&g, &img, s).unwrap()).collect();
        for i in 0..img.len() {
            let m = runs.iter().map(|r| r.data()[i]).sum::<f64>() / 3.0;
            assert!((merged.data()[i] - m).abs() < 1e-9);
        }
        let q = multiscale(&g, &img, &specs, true).unwrap();
        for v in q.data() {
            assert!((v * 255.0 * 3.0 - (v * 255.0 * 3.0).round()).abs() < 1e-6);
        }
    }

    #[test]
    fn ensemble_spec_dispatch() {
        let img = pattern(20, 20, 1);
        let g = DenoiserSpec::Gaussian { sigma: 1.5 };
        let se = EnsembleSpec::new(EnsembleMode::SelfD4).run(&g, &img).unwrap();
        assert_eq!(se, self_ensemble(&g, &img).unwrap());
        let ms = EnsembleSpec::new(EnsembleMode::Multiscale(vec![TileSpec::with_overlap(8, 2, BlendMode::Linear).unwrap()]));
        assert!(ms.run(&g, &img).is_ok());
        let wt = EnsembleSpec::new(EnsembleMode::Weighted(vec![0.6, 0.4]));
        assert!(wt.run(&g, &img).is_err());
        assert!(wt.merge(&[img.clone(), img.clone()]).is_ok());
        assert!(EnsembleSpec::new(EnsembleMode::Weighted(vec![0.5])).validate().is_err());
    }

    proptest! {
        #[test]
        fn weighted_is_convex(
            raw in proptest::collection::vec(0.0f64..1.0, 2..5),
            seed in 0usize..1000,
        ) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-3);
            let mut weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
            let rest: f64 = weights[1..].iter().sum();
            weights[0] = (1.0 - rest).max(0.0);
            let imgs: Vec<ImageF> = (0..weights.len())
                .map(|k| ImageF::from_fn(6, 5, 3, |r, c, ch| (((r + 3 * c + 5 * ch + 7 * k + seed) * 2654435761) % 1000) as f64 / 999.0).unwrap())
                .collect();
            let out = weighted_ensemble(&imgs, &weights).unwrap();
            for i in 0..out.len() {
                let lo = imgs.iter().map(|m| m.data()[i]).fold(f64::INFINITY, f64::min);
                let hi = imgs.iter().map(|m| m.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }
    }
}
