//! Challenge-protocol PSNR/SSIM and competition ranking.
//!
//! PSNR is computed on 8-bit samples with a single MSE over all channels.
//! SSIM is the single-scale Gaussian-window variant (11x11, sigma 1.5,
//! K1 = 0.01, K2 = 0.03) evaluated on valid windows per channel and averaged.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_kernel_with_radius;
use crate::image::{ImageF, ImageU8};
use crate::stats::{compensated_sum, mean};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_shapes(a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = i64::from(x) - i64::from(y);
            (d * d) as u64
        })
        .sum();
    Ok(psnr_from_mse(sse as f64 / a.data().len() as f64, 255.0))
}

/// PSNR on float images with peak 1 (used before quantization).
pub fn psnr_f(a: &ImageF, b: &ImageF) -> Result<f64> {
    a.same_shape(b)?;
    let mse = compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        / a.len() as f64;
    Ok(psnr_from_mse(mse, 1.0))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// 1-D valid correlation along rows then columns with the same taps.
fn filter_valid(plane: &[f64], height: usize, width: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = width + 1 - n;
    let oh = height + 1 - n;
    let mut tmp = vec![0.0; height * ow];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                acc += w * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all valid windows of one plane pair.
pub fn ssim_plane(x: &[f64], y: &[f64], height: usize, width: usize, data_range: f64) -> f64 {
    let k = gaussian_kernel_with_radius(SSIM_SIGMA, SSIM_WINDOW / 2);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, height, width, &k);
    let mu_y = filter_valid(y, height, width, &k);
    let e_xx = filter_valid(&xx, height, width, &k);
    let e_yy = filter_valid(&yy, height, width, &k);
    let e_xy = filter_valid(&xy, height, width, &k);
    let n = mu_x.len();
    let s = compensated_sum((0..n).map(|i| {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    }));
    s / n as f64
}

fn ssim_images(a: &ImageF, b: &ImageF, data_range: f64) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, _) = a.shape();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            required: SSIM_WINDOW,
        });
    }
    let pa = a.planes();
    let pb = b.planes();
    let per: Vec<f64> = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| ssim_plane(x, y, h, w, data_range))
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// SSIM on 8-bit intensities (data range 255).
pub fn ssim(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    let to_f = |img: &ImageU8| {
        ImageF::new(
            img.height(),
            img.width(),
            img.channels(),
            img.data().iter().map(|&v| f64::from(v)).collect(),
        )
    };
    ssim_images(&to_f(a)?, &to_f(b)?, 255.0)
}

/// SSIM on float images with data range 1.
pub fn ssim_float(a: &ImageF, b: &ImageF) -> Result<f64> {
    ssim_images(a, b, 1.0)
}

/// Per-image score row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Arithmetic means of per-image PSNR and SSIM.
pub fn aggregate(scores: &[ImageScore]) -> Option<(f64, f64)> {
    Some((
        mean(scores.iter().map(|s| s.psnr))?,
        mean(scores.iter().map(|s| s.ssim))?,
    ))
}

/// One leaderboard entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl EvalRecord {
    pub fn new(name: impl Into<String>, psnr: f64, ssim: f64) -> Self {
        Self {
            name: name.into(),
            psnr,
            ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedRow {
    pub rank: usize,
    pub record: EvalRecord,
}

/// Rows ordered by PSNR (2-decimal precision) descending with competition
/// ("1224") ranks. SSIM never affects order; equal keys sort by name.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub rows: Vec<RankedRow>,
}

fn rank_key(psnr: f64) -> i64 {
    if psnr == f64::INFINITY {
        i64::MAX
    } else {
        (psnr * 100.0).round() as i64
    }
}

pub fn rank(records: &[EvalRecord]) -> Result<RankTable> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::DuplicateName(r.name.clone()));
        }
        if r.psnr.is_nan() {
            return Err(Error::NonFinite("psnr"));
        }
    }
    let mut sorted: Vec<EvalRecord> = records.to_vec();
    sorted.sort_by(|a, b| {
        rank_key(b.psnr)
            .cmp(&rank_key(a.psnr))
            .then_with(|| a.name.cmp(&b.name))
    });
    let mut rows: Vec<RankedRow> = Vec::with_capacity(sorted.len());
    for (i, record) in sorted.into_iter().enumerate() {
        let rank = match rows.last() {
            Some(prev) if rank_key(prev.record.psnr) == rank_key(record.psnr) => prev.rank,
            _ => i + 1,
        };
        rows.push(RankedRow { rank, record });
    }
    Ok(RankTable { rows })
}

pub fn format_psnr(psnr: f64) -> String {
    if psnr == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{psnr:.2}")
    }
}

impl RankTable {
    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.record.name == name)
            .map(|r| r.rank)
    }

    /// Markdown table with the Team / Rank / PSNR (primary) / SSIM columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Team | Rank | PSNR (primary) | SSIM |\n");
        s.push_str("|------|-----:|---------------:|-----:|\n");
        for row in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} |",
                row.record.name,
                row.rank,
                format_psnr(row.record.psnr),
                row.record.ssim
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u8img(h: usize, w: usize, c: usize, v: u8) -> ImageU8 {
        ImageU8::filled(h, w, c, v).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let a = u8img(4, 4, 3, 0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &u8img(4, 4, 3, 255)).unwrap(), 0.0);
        // MSE 2500 -> 10 log10(65025 / 2500) = 14.151403...
        let p = psnr(&u8img(8, 8, 1, 100), &u8img(8, 8, 1, 150)).unwrap();
        assert!((p - 14.1514).abs() < 5e-4, "{p}");
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(matches!(
            psnr(&u8img(4, 4, 3, 0), &u8img(4, 4, 1, 0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let base = u8img(8, 8, 1, 100);
        let mut last = f64::INFINITY;
        for off in 1..=100u8 {
            let p = psnr(&base, &u8img(8, 8, 1, 100 + off)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let img = ImageU8::new(16, 20, 3, (0..960).map(|i| (i * 37 % 256) as u8).collect())
            .unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_black_vs_white_closed_form() {
        let c1 = (0.01f64 * 255.0).powi(2);
        let expect = c1 / (255.0 * 255.0 + c1);
        let s = ssim(&u8img(16, 16, 1, 0), &u8img(16, 16, 1, 255)).unwrap();
        assert!((s - expect).abs() < 1e-7, "{s} vs {expect}");
        assert!((s - 9.999e-5).abs() < 1e-7);
    }

    #[test]
    fn ssim_rejects_small_and_mismatched() {
        assert!(matches!(
            ssim(&u8img(10, 40, 1, 0), &u8img(10, 40, 1, 0)),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(ssim(&u8img(12, 12, 1, 0), &u8img(12, 13, 1, 0)).is_err());
    }

    fn table1() -> Vec<EvalRecord> {
        [
            ("SRC-B", 31.20, 0.8884),
            ("SNUCV", 29.95, 0.8676),
            ("BuptMM", 29.89, 0.8664),
            ("HMiDenoise", 29.84, 0.8653),
            ("Pixel Purifiers", 29.83, 0.8652),
            ("Alwaysu", 29.80, 0.8642),
            ("Tcler Denoising", 29.78, 0.8632),
            ("cipher_vision", 29.64, 0.8601),
            ("Sky-D", 29.61, 0.8602),
            ("KLETech-CEVI", 29.60, 0.8602),
            ("xd_denoise", 29.58, 0.8597),
            ("JNU620", 29.55, 0.8590),
            ("PSU team", 29.55, 0.8598),
            ("Aurora", 29.51, 0.8605),
        ]
        .into_iter()
        .map(|(n, p, s)| EvalRecord::new(n, p, s))
        .collect()
    }

    #[test]
    fn reproduces_table_ranks() {
        let mut recs = table1();
        recs.reverse();
        let t = rank(&recs).unwrap();
        assert_eq!(t.rank_of("SRC-B"), Some(1));
        assert_eq!(t.rank_of("SNUCV"), Some(2));
        assert_eq!(t.rank_of("BuptMM"), Some(3));
        assert_eq!(t.rank_of("JNU620"), Some(12));
        assert_eq!(t.rank_of("PSU team"), Some(12));
        assert_eq!(t.rank_of("Aurora"), Some(14));
    }

    #[test]
    fn single_and_duplicate() {
        let t = rank(&[EvalRecord::new("a", 20.0, 0.5)]).unwrap();
        assert_eq!(t.rows[0].rank, 1);
        assert!(matches!(
            rank(&[EvalRecord::new("a", 1.0, 0.0), EvalRecord::new("a", 2.0, 0.0)]),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn infinity_sorts_first_and_renders() {
        let t = rank(&[
            EvalRecord::new("finite", 99.0, 0.9),
            EvalRecord::new("perfect", f64::INFINITY, 1.0),
        ])
        .unwrap();
        assert_eq!(t.rows[0].record.name, "perfect");
        assert!(t.to_markdown().contains("| perfect | 1 | inf | 1.0000 |"));
    }

    #[test]
    fn ssim_does_not_order() {
        let t = rank(&[EvalRecord::new("b", 30.0, 0.1), EvalRecord::new("a", 30.001, 0.9)])
            .unwrap();
        assert_eq!(t.rows[0].rank, 1);
        assert_eq!(t.rows[1].rank, 1);
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let s = vec![
            ImageScore { image: "a".into(), psnr: 20.0, ssim: 0.5 },
            ImageScore { image: "b".into(), psnr: 30.0, ssim: 0.7 },
        ];
        let (p, q) = aggregate(&s).unwrap();
        assert_eq!(p, 25.0);
        assert!((q - 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(data in proptest::collection::vec(any::<u8>(), 2 * 12 * 12)) {
            let a = ImageU8::new(12, 12, 1, data[..144].to_vec()).unwrap();
            let b = ImageU8::new(12, 12, 1, data[144..].to_vec()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!(s1 <= 1.0 + 1e-12);
        }

        #[test]
        fn rank_is_permutation_invariant(scores in proptest::collection::vec(2000u32..2100, 1..12), seed in any::<u64>()) {
            let recs: Vec<EvalRecord> = scores.iter().enumerate()
                .map(|(i, s)| EvalRecord::new(format!("e{i}"), f64::from(*s) / 100.0, 0.5))
                .collect();
            let mut shuffled = recs.clone();
            let n = shuffled.len();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(rank(&recs).unwrap(), rank(&shuffled).unwrap());
        }
    }
}
