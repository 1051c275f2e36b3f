//! Image-pair loss functionals used by the challenge entries.
//!
//! Two of these have no published definition and are our constructions:
//! `GradientWeightedL1` weights the absolute error by `1 + |Sobel(target)|`
//! (edge magnitude normalized to a maximum of 1), and `HighFrequency` is
//! the L1 distance between Gaussian-residual images `x - blur(x, sigma)`.
//!
//! Loss expressions parse from strings such as
//! `0.8*charbonnier(1e-3) + 0.2*gradw_l1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, sobel};
use crate::image::ImageF;
use crate::metrics::ssim_float;
use crate::stats::compensated_sum;
pub use crate::swt::{swt_forward, swt_inverse, SwtLevel};

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_HIGH_FREQ_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Mse,
    Charbonnier { eps: f64 },
    SobelGradient,
    GradientWeightedL1,
    Swt { levels: usize },
    HighFrequency { sigma_blur: f64 },
    SsimLoss,
    WeightedSum(Vec<(LossKind, f64)>),
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::Charbonnier { eps } if !(*eps > 0.0) => {
                Err(Error::invalid("charbonnier eps must be > 0"))
            }
            LossKind::Swt { levels: 0 } => Err(Error::invalid("swt levels must be >= 1")),
            LossKind::HighFrequency { sigma_blur } if !(*sigma_blur > 0.0) => {
                Err(Error::invalid("high-frequency blur sigma must be > 0"))
            }
            LossKind::WeightedSum(terms) => {
                if terms.is_empty() {
                    return Err(Error::invalid("weighted sum needs at least one term"));
                }
                for (kind, w) in terms {
                    if !(*w >= 0.0) || !w.is_finite() {
                        return Err(Error::invalid(format!("loss weight {w} must be >= 0")));
                    }
                    kind.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn mean_of(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    compensated_sum(values) / n as f64
}

fn sobel_planes(img: &ImageF) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (h, w, _) = img.shape();
    img.planes().iter().map(|p| sobel(p, h, w)).collect()
}

fn high_pass(img: &ImageF, sigma: f64) -> Vec<f64> {
    let (h, w, _) = img.shape();
    img.planes()
        .iter()
        .flat_map(|p| {
            let blurred = gaussian_blur(p, h, w, sigma);
            p.iter().zip(blurred).map(|(x, b)| x - b).collect::<Vec<_>>()
        })
        .collect()
}

/// Evaluates `kind` on a prediction/target pair. Every kind is zero on
/// identical inputs except Charbonnier, whose floor is `eps`.
pub fn loss(kind: &LossKind, pred: &ImageF, target: &ImageF) -> Result<f64> {
    kind.validate()?;
    pred.same_shape(target)?;
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("loss input"));
    }
    let n = pred.len();
    let diffs = || pred.data().iter().zip(target.data()).map(|(p, t)| p - t);
    let value = match kind {
        LossKind::L1 => mean_of(diffs().map(f64::abs), n),
        LossKind::Mse => mean_of(diffs().map(|d| d * d), n),
        LossKind::Charbonnier { eps } => {
            mean_of(diffs().map(|d| (d * d + eps * eps).sqrt()), n)
        }
        LossKind::SobelGradient => {
            let sp = sobel_planes(pred);
            let st = sobel_planes(target);
            let terms = sp.iter().zip(&st).flat_map(|((px, py), (tx, ty))| {
                let gx = px.iter().zip(tx).map(|(a, b)| (a - b).abs());
                let gy = py.iter().zip(ty).map(|(a, b)| (a - b).abs());
                gx.chain(gy).collect::<Vec<_>>()
            });
            mean_of(terms, 2 * n)
        }
        LossKind::GradientWeightedL1 => {
            let (h, w, c) = target.shape();
            let mut mag = vec![0.0; n];
            for (ch, (gx, gy)) in sobel_planes(target).iter().enumerate() {
                for i in 0..h * w {
                    mag[i * c + ch] = gx[i].hypot(gy[i]);
                }
            }
            let max = mag.iter().copied().fold(0.0, f64::max);
            let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
            mean_of(
                diffs().zip(&mag).map(|(d, m)| (1.0 + m * scale) * d.abs()),
                n,
            )
        }
        LossKind::Swt { levels } => {
            let sp = swt_forward(pred, *levels)?;
            let st = swt_forward(target, *levels)?;
            let per_band: Vec<f64> = sp
                .iter()
                .zip(&st)
                .flat_map(|(a, b)| {
                    a.bands()
                        .into_iter()
                        .zip(b.bands())
                        .map(|(x, y)| {
                            mean_of(x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()), n)
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            per_band.iter().sum::<f64>() / per_band.len() as f64
        }
        LossKind::HighFrequency { sigma_blur } => {
            let hp = high_pass(pred, *sigma_blur);
            let ht = high_pass(target, *sigma_blur);
            mean_of(hp.iter().zip(&ht).map(|(a, b)| (a - b).abs()), n)
        }
        LossKind::SsimLoss => 1.0 - ssim_float(pred, target)?,
        LossKind::WeightedSum(terms) => {
            let mut total = 0.0;
            for (k, w) in terms {
                total += w * loss(k, pred, target)?;
            }
            total
        }
    };
    Ok(value)
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::L1 => f.write_str("l1"),
            LossKind::Mse => f.write_str("mse"),
            LossKind::Charbonnier { eps } => write!(f, "charbonnier({eps:e})"),
            LossKind::SobelGradient => f.write_str("sobel"),
            LossKind::GradientWeightedL1 => f.write_str("gradw_l1"),
            LossKind::Swt { levels } => write!(f, "swt({levels})"),
            LossKind::HighFrequency { sigma_blur } => write!(f, "hf({sigma_blur})"),
            LossKind::SsimLoss => f.write_str("ssim"),
            LossKind::WeightedSum(terms) => {
                for (i, (k, w)) in terms.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    write!(f, "{w}*{k}")?;
                }
                Ok(())
            }
        }
    }
}

fn parse_term(term: &str) -> Result<LossKind> {
    let term = term.trim();
    let (name, arg) = match term.find('(') {
        Some(open) => {
            let close = term
                .strip_suffix(')')
                .ok_or_else(|| Error::invalid(format!("unbalanced parentheses in `{term}`")))?;
            (term[..open].trim(), Some(close[open + 1..].trim()))
        }
        None => (term, None),
    };
    let num = |default: f64| -> Result<f64> {
        match arg {
            None | Some("") => Ok(default),
            Some(a) => a
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad numeric argument `{a}`"))),
        }
    };
    let kind = match name.to_ascii_lowercase().as_str() {
        "l1" => LossKind::L1,
        "mse" | "l2" => LossKind::Mse,
        "charbonnier" => LossKind::Charbonnier {
            eps: num(DEFAULT_CHARBONNIER_EPS)?,
        },
        "sobel" => LossKind::SobelGradient,
        "gradw_l1" | "gradient_weighted_l1" => LossKind::GradientWeightedL1,
        "swt" => {
            let levels = num(1.0)?;
            if levels.fract() != 0.0 || levels < 1.0 {
                return Err(Error::invalid("swt levels must be a positive integer"));
            }
            LossKind::Swt {
                levels: levels as usize,
            }
        }
        "hf" | "high_frequency" => LossKind::HighFrequency {
            sigma_blur: num(DEFAULT_HIGH_FREQ_SIGMA)?,
        },
        "ssim" => LossKind::SsimLoss,
        other => return Err(Error::invalid(format!("unknown loss `{other}`"))),
    };
    Ok(kind)
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::invalid(format!("malformed loss expression `{s}`")));
        }
        let weighted = parts.len() > 1 || parts[0].contains('*');
        let mut terms = Vec::with_capacity(parts.len());
        for part in parts {
            let (w, body) = match part.split_once('*') {
                Some((w, body)) => (
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad loss weight `{w}`")))?,
                    body,
                ),
                None => (1.0, part),
            };
            terms.push((parse_term(body)?, w));
        }
        let kind = if weighted {
            LossKind::WeightedSum(terms)
        } else {
            terms.pop().map(|(k, _)| k).expect("one term")
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(seed: u64, h: usize, w: usize) -> (ImageF, ImageF) {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let a = ImageF::from_fn(h, w, 3, |_, _, _| next()).unwrap();
        let b = ImageF::from_fn(h, w, 3, |_, _, _| next()).unwrap();
        (a, b)
    }

    fn all_kinds() -> Vec<LossKind> {
        vec![
            LossKind::L1,
            LossKind::Mse,
            LossKind::Charbonnier { eps: 1e-3 },
            LossKind::SobelGradient,
            LossKind::GradientWeightedL1,
            LossKind::Swt { levels: 2 },
            LossKind::HighFrequency { sigma_blur: 1.5 },
            LossKind::SsimLoss,
        ]
    }

    #[test]
    fn zero_at_equality() {
        let (a, _) = pair(1, 12, 12);
        for k in all_kinds() {
            let v = loss(&k, &a, &a).unwrap();
            match k {
                LossKind::Charbonnier { eps } => assert!((v - eps).abs() < 1e-15),
                _ => assert_eq!(v, 0.0, "{k}"),
            }
        }
    }

    #[test]
    fn mse_of_constants() {
        let a = ImageF::filled(4, 4, 1, 0.0).unwrap();
        let b = ImageF::filled(4, 4, 1, 0.5).unwrap();
        assert_eq!(loss(&LossKind::Mse, &a, &b).unwrap(), 0.25);
        assert_eq!(loss(&LossKind::L1, &a, &b).unwrap(), 0.5);
    }

    #[test]
    fn composite_equals_manual_weighting() {
        let (a, b) = pair(7, 8, 8);
        let c1 = loss(&LossKind::Charbonnier { eps: 1e-3 }, &a, &b).unwrap();
        let c2 = loss(&LossKind::GradientWeightedL1, &a, &b).unwrap();
        let parsed: LossKind = "0.8*charbonnier(1e-3) + 0.2*gradw_l1".parse().unwrap();
        let v = loss(&parsed, &a, &b).unwrap();
        assert!((v - (0.8 * c1 + 0.2 * c2)).abs() < 1e-15);
    }

    #[test]
    fn gradient_weighting_comes_from_target() {
        // Flat target: weights are 1 everywhere, so the loss is plain L1.
        let flat = ImageF::filled(8, 8, 1, 0.5).unwrap();
        let edge = ImageF::from_fn(8, 8, 1, |_, c, _| if c < 4 { 0.0 } else { 1.0 }).unwrap();
        let a = loss(&LossKind::GradientWeightedL1, &edge, &flat).unwrap();
        assert_eq!(a, loss(&LossKind::L1, &edge, &flat).unwrap());
        let b = loss(&LossKind::GradientWeightedL1, &flat, &edge).unwrap();
        assert!(b > a);
    }

    #[test]
    fn errors() {
        let (a, _) = pair(1, 12, 12);
        let small = ImageF::filled(4, 4, 3, 0.0).unwrap();
        assert!(matches!(loss(&LossKind::L1, &a, &small), Err(Error::ShapeMismatch { .. })));
        assert!(loss(&LossKind::Charbonnier { eps: 0.0 }, &a, &a).is_err());
        assert!(loss(&LossKind::Swt { levels: 0 }, &a, &a).is_err());
        assert!(loss(&LossKind::WeightedSum(vec![(LossKind::L1, -1.0)]), &a, &a).is_err());
        let mut nan = a.clone();
        nan.data_mut()[0] = f64::NAN;
        assert!(matches!(loss(&LossKind::L1, &nan, &a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn parses_expressions() {
        assert_eq!("l1".parse::<LossKind>().unwrap(), LossKind::L1);
        assert_eq!(
            "swt(2)".parse::<LossKind>().unwrap(),
            LossKind::Swt { levels: 2 }
        );
        assert_eq!(
            "hf".parse::<LossKind>().unwrap(),
            LossKind::HighFrequency { sigma_blur: 1.5 }
        );
        let k: LossKind = "0.8*charbonnier(1e-3) + 0.2*gradw_l1".parse().unwrap();
        assert_eq!(
            k,
            LossKind::WeightedSum(vec![
                (LossKind::Charbonnier { eps: 1e-3 }, 0.8),
                (LossKind::GradientWeightedL1, 0.2)
            ])
        );
        assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        for bad in ["", "l1 +", "foo", "swt(1.5)", "-1*l1", "charbonnier(x)"] {
            assert!(bad.parse::<LossKind>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_and_linear(seed in any::<u64>(), alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
            let (a, b) = pair(seed, 12, 12);
            for k in all_kinds() {
                let ab = loss(&k, &a, &b).unwrap();
                prop_assert!(ab >= 0.0);
                if k != LossKind::GradientWeightedL1 {
                    let ba = loss(&k, &b, &a).unwrap();
                    prop_assert!((ab - ba).abs() < 1e-12, "{} not symmetric", k);
                }
            }
            let ka = LossKind::Mse;
            let kb = LossKind::Swt { levels: 1 };
            let sum = LossKind::WeightedSum(vec![(ka.clone(), alpha), (kb.clone(), beta)]);
            let lhs = loss(&sum, &a, &b).unwrap();
            let rhs = alpha * loss(&ka, &a, &b).unwrap() + beta * loss(&kb, &a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
