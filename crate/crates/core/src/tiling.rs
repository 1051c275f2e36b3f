//! Sliding-window patch inference.
//!
//! Anchors along each axis sit at `k * stride` while the patch fits, plus
//! one final anchor clamped to `dim - patch`. Tile outputs are stitched by
//! uniform averaging or by separable tent weights that ramp only across
//! each tile's overlap margins; both are normalized per pixel by the summed
//! weight, so the identity denoiser reproduces its input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::filter::reflect;
use crate::image::ImageF;
use crate::metrics::psnr;
use crate::stats::mean;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    #[default]
    Average,
    Linear,
}

impl std::str::FromStr for BlendMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(BlendMode::Average),
            "linear" => Ok(BlendMode::Linear),
            other => Err(Error::invalid(format!("unknown blend mode `{other}`"))),
        }
    }
}

/// How tiles meet the image border.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Last anchor moved back to `dim - patch`.
    #[default]
    Clamp,
    /// Reflect-pad bottom/right until the grid lands exactly on the border,
    /// then crop the result.
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub patch: usize,
    pub stride: usize,
    #[serde(default)]
    pub blend: BlendMode,
    #[serde(default)]
    pub edge: EdgeMode,
}

impl TileSpec {
    pub fn with_stride(patch: usize, stride: usize, blend: BlendMode) -> Result<Self> {
        let spec = TileSpec { patch, stride, blend, edge: EdgeMode::Clamp };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_overlap(patch: usize, overlap: usize, blend: BlendMode) -> Result<Self> {
        if overlap >= patch {
            return Err(Error::invalid(format!("overlap {overlap} must be below patch {patch}")));
        }
        Self::with_stride(patch, patch - overlap, blend)
    }

    /// Overlap given as a fraction of the patch, rounded to whole pixels.
    pub fn with_overlap_frac(patch: usize, frac: f64, blend: BlendMode) -> Result<Self> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::invalid(format!("overlap fraction {frac} must be in [0, 1)")));
        }
        Self::with_overlap(patch, (frac * patch as f64).round() as usize, blend)
    }

    pub fn overlap(&self) -> usize {
        self.patch - self.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::invalid("patch must be >= 1"));
        }
        if self.stride == 0 || self.stride > self.patch {
            return Err(Error::invalid(format!(
                "stride {} must be in 1..={} (0 <= overlap < patch)",
                self.stride, self.patch
            )));
        }
        Ok(())
    }
}

/// `"256/48"` is patch 256 with overlap 48.
impl std::str::FromStr for TileSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (p, o) = s
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("expected PATCH/OVERLAP, got `{s}`")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad integer `{v}` in `{s}`")))
        };
        TileSpec::with_overlap(num(p)?, num(o)?, BlendMode::Average)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

impl TilePlan {
    /// Anchors in plan order (row-major).
    pub fn anchors(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .flat_map(|&r| self.cols.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn axis_anchors(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|a| a + patch <= dim).collect();
    let last = dim - patch;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn plan_tiles(height: usize, width: usize, spec: &TileSpec) -> Result<TilePlan> {
    spec.validate()?;
    if spec.patch > height.min(width) {
        return Err(Error::PatchTooLarge { patch: spec.patch, height, width });
    }
    Ok(TilePlan {
        rows: axis_anchors(height, spec.patch, spec.stride),
        cols: axis_anchors(width, spec.patch, spec.stride),
        patch: spec.patch,
        height,
        width,
    })
}

/// Tent weights for the tile at `anchors[idx]`, ramping over the overlap
/// with each neighbour and flat in between.
fn tent(anchors: &[usize], idx: usize, patch: usize) -> Vec<f64> {
    let a = anchors[idx];
    let prev = idx
        .checked_sub(1)
        .map(|j| (anchors[j] + patch).saturating_sub(a))
        .unwrap_or(0);
    let next = anchors
        .get(idx + 1)
        .map(|&n| (a + patch).saturating_sub(n))
        .unwrap_or(0);
    (0..patch)
        .map(|i| {
            let up = (i + 1) as f64 / (prev + 1) as f64;
            let down = (patch - i) as f64 / (next + 1) as f64;
            up.min(down).min(1.0)
        })
        .collect()
}

/// Smallest size `>= dim` (and `>= patch`) on which the stride grid ends
/// exactly at the border.
fn padded_dim(dim: usize, patch: usize, stride: usize) -> usize {
    let base = dim.max(patch);
    patch + (base - patch).div_ceil(stride) * stride
}

fn reflect_pad(img: &ImageF, height: usize, width: usize) -> ImageF {
    ImageF::from_fn(height, width, img.channels(), |r, c, ch| {
        img.get(reflect(r as isize, img.height()), reflect(c as isize, img.width()), ch)
    })
    .expect("padded dims are nonzero")
}

pub fn run_tiled<D: Denoiser + ?Sized>(denoiser: &D, img: &ImageF, spec: &TileSpec) -> Result<ImageF> {
    spec.validate()?;
    let (h, w, _) = img.shape();
    match spec.edge {
        EdgeMode::Pad => {
            let (ph, pw) = (padded_dim(h, spec.patch, spec.stride), padded_dim(w, spec.patch, spec.stride));
            let padded = reflect_pad(img, ph, pw);
            let out = stitch(denoiser, &padded, &plan_tiles(ph, pw, spec)?, spec.blend)?;
            Ok(out.crop(0, 0, h, w))
        }
        EdgeMode::Clamp if spec.patch > h.min(w) => whole(denoiser, img),
        EdgeMode::Clamp => stitch(denoiser, img, &plan_tiles(h, w, spec)?, spec.blend),
    }
}

fn whole<D: Denoiser + ?Sized>(denoiser: &D, img: &ImageF) -> Result<ImageF> {
    let out = denoiser.denoise(img)?;
    if out.shape() != img.shape() {
        return Err(Error::ShapeMismatch { expected: img.shape(), found: out.shape() });
    }
    Ok(out)
}

fn stitch<D: Denoiser + ?Sized>(denoiser: &D, img: &ImageF, plan: &TilePlan, blend: BlendMode) -> Result<ImageF> {
    let (h, w, ch) = img.shape();
    let p = plan.patch;
    let weights = |anchors: &[usize]| -> Vec<Vec<f64>> {
        (0..anchors.len())
            .map(|i| match blend {
                BlendMode::Average => vec![1.0; p],
                BlendMode::Linear => tent(anchors, i, p),
            })
            .collect()
    };
    let (row_w, col_w) = (weights(&plan.rows), weights(&plan.cols));

    let mut acc = vec![0.0; h * w * ch];
    let mut wsum = vec![0.0; h * w];
    let tiles: Vec<(usize, usize, usize, usize)> = plan
        .rows
        .iter()
        .enumerate()
        .flat_map(|(ri, &r)| plan.cols.iter().enumerate().map(move |(ci, &c)| (ri, r, ci, c)))
        .collect();
    // Bounded batches keep memory flat on large images; accumulation stays
    // in plan order so the result does not depend on scheduling.
    let batch = (rayon::current_num_threads() * 2).max(1);
    for chunk in tiles.chunks(batch) {
        let outputs: Vec<ImageF> = chunk
            .par_iter()
            .map(|&(_, r, _, c)| {
                whole(denoiser, &img.crop(r, c, p, p)).map_err(|e| Error::Tile {
                    row: r,
                    col: c,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        for (&(ri, r, ci, c), out) in chunk.iter().zip(&outputs) {
            let data = out.data();
            for y in 0..p {
                for x in 0..p {
                    let wgt = row_w[ri][y] * col_w[ci][x];
                    let dst = (r + y) * w + c + x;
                    wsum[dst] += wgt;
                    for k in 0..ch {
                        acc[dst * ch + k] += wgt * data[(y * p + x) * ch + k];
                    }
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= wsum[i / ch];
    }
    ImageF::new(h, w, ch, acc)
}

/// Patch tiers for adaptive inference; `None` means process the whole image.
pub fn adaptive_patch_size(height: usize, width: usize) -> Option<usize> {
    let m = height.min(width);
    [896, 768, 512].into_iter().find(|&t| m >= t)
}

/// Adaptive tier with half-patch stride and uniform averaging.
pub fn adaptive_spec(height: usize, width: usize) -> Option<TileSpec> {
    adaptive_patch_size(height, width).map(|p| TileSpec {
        patch: p,
        stride: p / 2,
        blend: BlendMode::Average,
        edge: EdgeMode::Clamp,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tiling {
    #[default]
    Whole,
    Fixed(TileSpec),
    Adaptive,
}

impl Tiling {
    /// The spec actually used for an image of the given size.
    pub fn resolve(&self, height: usize, width: usize) -> Option<TileSpec> {
        match self {
            Tiling::Whole => None,
            Tiling::Fixed(spec) if spec.edge == EdgeMode::Clamp && spec.patch > height.min(width) => None,
            Tiling::Fixed(spec) => Some(*spec),
            Tiling::Adaptive => adaptive_spec(height, width),
        }
    }
}

/// A denoiser run through a tiling strategy.
pub struct Tiled<D> {
    pub inner: D,
    pub tiling: Tiling,
}

impl<D: Denoiser> Denoiser for Tiled<D> {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        match self.tiling.resolve(img.height(), img.width()) {
            Some(spec) => run_tiled(&self.inner, img, &spec),
            None => whole(&self.inner, img),
        }
    }
}

/// Mean PSNR of tiled inference at each overlap fraction, for comparing
/// overlap settings on the same denoiser.
pub fn overlap_experiment<D: Denoiser + ?Sized>(
    denoiser: &D,
    pairs: &[(ImageF, ImageF)],
    patch: usize,
    blend: BlendMode,
    fractions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    fractions
        .iter()
        .map(|&frac| {
            let spec = TileSpec::with_overlap_frac(patch, frac, blend)?;
            let scores = pairs
                .iter()
                .map(|(clean, noisy)| {
                    let out = run_tiled(denoiser, noisy, &spec)?;
                    psnr(&out.to_u8(), &clean.to_u8())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((frac, mean(scores).unwrap_or(f64::NAN)))
        })
        .collect()
}
