//! Undecimated (a trous) Haar wavelet transform.
//!
//! Level `j` filters the previous approximation with taps spaced
//! `2^(j-1)` apart, using orthonormal Haar pairs `(1, 1)/sqrt 2` and
//! `(1, -1)/sqrt 2` and half-sample symmetric extension. Every band keeps
//! the full image resolution. Band naming is horizontal filter first:
//! `HL` is high-pass along rows (responds to vertical edges), `LH` is
//! high-pass along columns.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::filter::reflect;
use crate::image::ImageF;

#[derive(Clone, Debug, PartialEq)]
pub struct SwtLevel {
    pub ll: ImageF,
    pub lh: ImageF,
    pub hl: ImageF,
    pub hh: ImageF,
}

impl SwtLevel {
    pub fn bands(&self) -> [&ImageF; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn details_mut(&mut self) -> [&mut ImageF; 3] {
        [&mut self.lh, &mut self.hl, &mut self.hh]
    }
}

/// One analysis step along rows (`along_rows`) or columns of a plane.
fn analyze(plane: &[f64], h: usize, w: usize, step: usize, along_rows: bool) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![0.0; plane.len()];
    let mut hi = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let j = if along_rows {
                y * w + reflect((x + step) as isize, w)
            } else {
                reflect((y + step) as isize, h) * w + x
            };
            lo[i] = (plane[i] + plane[j]) * FRAC_1_SQRT_2;
            hi[i] = (plane[i] - plane[j]) * FRAC_1_SQRT_2;
        }
    }
    (lo, hi)
}

/// Decomposes `img` into `levels` levels, finest first.
pub fn swt_forward(img: &ImageF, levels: usize) -> Result<Vec<SwtLevel>> {
    if levels == 0 {
        return Err(Error::invalid("SWT needs at least one level"));
    }
    let (h, w, _) = img.shape();
    let mut approx: Vec<Vec<f64>> = img.planes();
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        let step = 1usize << level;
        let mut bands: [Vec<Vec<f64>>; 4] = Default::default();
        for plane in &approx {
            let (l, hpass) = analyze(plane, h, w, step, true);
            let (ll, lh) = analyze(&l, h, w, step, false);
            let (hl, hh) = analyze(&hpass, h, w, step, false);
            for (dst, src) in bands.iter_mut().zip([ll, lh, hl, hh]) {
                dst.push(src);
            }
        }
        let [ll, lh, hl, hh] = bands;
        let next = SwtLevel {
            ll: ImageF::from_planes(h, w, &ll)?,
            lh: ImageF::from_planes(h, w, &lh)?,
            hl: ImageF::from_planes(h, w, &hl)?,
            hh: ImageF::from_planes(h, w, &hh)?,
        };
        approx = ll;
        out.push(next);
    }
    Ok(out)
}

/// Inverts [`swt_forward`]; only the deepest `LL` is read, shallower
/// approximations are rebuilt from the details.
pub fn swt_inverse(levels: &[SwtLevel]) -> Result<ImageF> {
    let deepest = levels
        .last()
        .ok_or_else(|| Error::invalid("empty subband stack"))?;
    let mut approx = deepest.ll.clone();
    for level in levels.iter().rev() {
        let data: Vec<f64> = approx
            .data()
            .iter()
            .zip(level.lh.data())
            .zip(level.hl.data())
            .zip(level.hh.data())
            .map(|(((ll, lh), hl), hh)| 0.5 * (ll + lh + hl + hh))
            .collect();
        let (h, w, c) = approx.shape();
        approx = ImageF::new(h, w, c, data)?;
    }
    Ok(approx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_detail() {
        let img = ImageF::filled(8, 8, 3, 0.4).unwrap();
        let stack = swt_forward(&img, 3).unwrap();
        for (j, level) in stack.iter().enumerate() {
            for band in [&level.lh, &level.hl, &level.hh] {
                assert!(band.data().iter().all(|v| v.abs() < 1e-15));
            }
            // Each level scales the approximation by 2 (two orthonormal lowpasses).
            let expect = 0.4 * 2f64.powi(j as i32 + 1);
            assert!(level.ll.data().iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn step_edge_lands_in_hl() {
        // Intensity steps along x: a vertical edge line.
        let img = ImageF::from_fn(8, 8, 1, |_, c, _| if c >= 4 { 1.0 } else { 0.0 }).unwrap();
        let level = &swt_forward(&img, 1).unwrap()[0];
        let energy = |b: &ImageF| b.data().iter().map(|v| v * v).sum::<f64>();
        assert!(energy(&level.hl) > 1.0);
        assert_eq!(energy(&level.lh), 0.0);
        assert_eq!(energy(&level.hh), 0.0);
        // Only the column just left of the step differs from its right neighbour.
        for r in 0..8 {
            for c in 0..8 {
                let v = level.hl.get(r, c, 0);
                if c == 3 {
                    assert!((v + 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn perfect_reconstruction() {
        let img = ImageF::from_fn(13, 9, 3, |r, c, ch| ((r * 7 + c * 13 + ch * 5) % 17) as f64 / 16.0)
            .unwrap();
        for levels in 1..=4 {
            let back = swt_inverse(&swt_forward(&img, levels).unwrap()).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_levels_rejected() {
        let img = ImageF::filled(4, 4, 1, 0.0).unwrap();
        assert!(swt_forward(&img, 0).is_err());
    }
}
