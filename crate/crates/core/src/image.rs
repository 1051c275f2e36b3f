//! Raster types, 8-bit/float conversion and the dihedral transform group.
//!
//! Both raster types are row-major with interleaved channels, so sample
//! `(row, col, ch)` lives at `(row * width + col) * channels + ch`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_layout(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("image dimensions must be nonzero"));
    }
    if len != height * width * channels {
        return Err(Error::invalid(format!(
            "data length {len} does not match {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

/// 8-bit raster as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_layout(height, width, channels, data.len())?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn to_float(&self) -> ImageF {
        to_float(self)
    }
}

/// Floating-point raster; nominal range `[0, 1]`, every sample finite.
///
/// Samples may leave `[0, 1]` (unclipped noise, ringing filters); they are
/// clamped only when quantizing back to 8 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_layout(height, width, channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros_like(other: &ImageF) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            ..*other
        }
    }

    /// Builds an image from `f(row, col, ch)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Interleaves single-channel planes (each `height * width`) into an image.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::invalid("plane length does not match dimensions"));
        }
        let mut data = vec![0.0; n * channels];
        for (ch, plane) in planes.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + ch] = *v;
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the samples. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// Copies one channel out as a contiguous `height * width` plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|ch| self.plane(ch)).collect()
    }

    /// Applies `f` to every plane and re-interleaves the results.
    pub fn map_planes(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<ImageF> {
        let planes: Vec<Vec<f64>> = self.planes().iter().map(|p| f(p)).collect();
        ImageF::from_planes(self.height, self.width, &planes)
    }

    /// Rectangular crop; panics if the window leaves the image.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> ImageF {
        assert!(row + height <= self.height && col + width <= self.width);
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for r in row..row + height {
            let start = (r * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        ImageF {
            height,
            width,
            channels: c,
            data,
        }
    }

    pub fn same_shape(&self, other: &ImageF) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rec.601 luma plane; grayscale images are returned as-is.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_u8(&self) -> ImageU8 {
        to_u8(self)
    }
}

/// Exact division by 255.
pub fn to_float(img: &ImageU8) -> ImageF {
    ImageF {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
    }
}

/// Clamps to `[0, 1]`, scales by 255 and rounds half away from zero.
pub fn to_u8(img: &ImageF) -> ImageU8 {
    ImageU8 {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.data.iter().map(|&v| quantize(v)).collect(),
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    // f64::round is half-away-from-zero.
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The eight members of the dihedral group D4 acting on the pixel grid.
///
/// Rotations are counter-clockwise. Composite members apply the rotation
/// first, then the horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeomTransform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    HFlipRot90,
    HFlipRot270,
}

impl GeomTransform {
    pub const ALL: [GeomTransform; 8] = [
        GeomTransform::Identity,
        GeomTransform::Rot90,
        GeomTransform::Rot180,
        GeomTransform::Rot270,
        GeomTransform::HFlip,
        GeomTransform::VFlip,
        GeomTransform::HFlipRot90,
        GeomTransform::HFlipRot270,
    ];

    pub fn inverse(self) -> Self {
        match self {
            GeomTransform::Rot90 => GeomTransform::Rot270,
            GeomTransform::Rot270 => GeomTransform::Rot90,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeomTransform::Identity => "identity",
            GeomTransform::Rot90 => "rot90",
            GeomTransform::Rot180 => "rot180",
            GeomTransform::Rot270 => "rot270",
            GeomTransform::HFlip => "hflip",
            GeomTransform::VFlip => "vflip",
            GeomTransform::HFlipRot90 => "hflip_rot90",
            GeomTransform::HFlipRot270 => "hflip_rot270",
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(
            self,
            GeomTransform::Rot90
                | GeomTransform::Rot270
                | GeomTransform::HFlipRot90
                | GeomTransform::HFlipRot270
        )
    }

    /// Output dimensions for an input of `height x width`.
    pub fn output_dims(self, height: usize, width: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (width, height)
        } else {
            (height, width)
        }
    }

    /// Source coordinate in a `height x width` input for output pixel `(i, j)`.
    fn source(self, height: usize, width: usize, i: usize, j: usize) -> (usize, usize) {
        match self {
            GeomTransform::Identity => (i, j),
            GeomTransform::Rot90 => (j, width - 1 - i),
            GeomTransform::Rot180 => (height - 1 - i, width - 1 - j),
            GeomTransform::Rot270 => (height - 1 - j, i),
            GeomTransform::HFlip => (i, width - 1 - j),
            GeomTransform::VFlip => (height - 1 - i, j),
            GeomTransform::HFlipRot90 => (height - 1 - j, width - 1 - i),
            GeomTransform::HFlipRot270 => (j, i),
        }
    }
}

impl std::fmt::Display for GeomTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn permute<T: Copy>(
    data: &[T],
    height: usize,
    width: usize,
    channels: usize,
    g: GeomTransform,
) -> Vec<T> {
    if g == GeomTransform::Identity {
        return data.to_vec();
    }
    let (oh, ow) = g.output_dims(height, width);
    let mut out = Vec::with_capacity(data.len());
    for i in 0..oh {
        for j in 0..ow {
            let (r, c) = g.source(height, width, i, j);
            let base = (r * width + c) * channels;
            out.extend_from_slice(&data[base..base + channels]);
        }
    }
    out
}

/// Pixel permutation under `g`; values are moved, never recomputed.
pub fn apply_transform(img: &ImageF, g: GeomTransform) -> ImageF {
    let (height, width) = g.output_dims(img.height, img.width);
    ImageF {
        height,
        width,
        channels: img.channels,
        data: permute(&img.data, img.height, img.width, img.channels, g),
    }
}

pub fn apply_transform_u8(img: &ImageU8, g: GeomTransform) -> ImageU8 {
    let (height, width) = g.output_dims(img.height, img.width);
    ImageU8 {
        height,
        width,
        channels: img.channels,
        data: permute(&img.data, img.height, img.width, img.channels, g),
    }
}
