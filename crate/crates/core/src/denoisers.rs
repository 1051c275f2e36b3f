//! Uniform denoiser interface: classical built-ins for end-to-end checks
//! and a subprocess adapter for external models.
//!
//! Intensity-valued parameters (`h`, fixed shrinkage thresholds) are given
//! in 8-bit units, like the noise sigma; the Gaussian `sigma` is spatial.
//!
//! External models are wrapped through files: the input is written as an
//! 8-bit PNG, `{in}` and `{out}` in the command template are replaced by
//! (shell-quoted) paths, the command runs under `sh -c` with a timeout, and
//! the PNG it writes is read back.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, gaussian_kernel_with_radius, median_filter, reflect, separable};
use crate::image::ImageF;
use crate::io::{load_png, save_png};
use crate::noise::estimate_sigma;
use crate::swt::{swt_forward, swt_inverse};

/// Environment variable overriding where external-denoiser temp dirs go.
pub const TMPDIR_ENV: &str = "DENOISE_FORGE_TMPDIR";
pub const DEFAULT_TIMEOUT_SECS: f64 = 300.0;
/// NLM filtering strength relative to the estimated noise level.
pub const NLM_H_FACTOR: f64 = 0.8;

/// Anything that maps a noisy image to a same-shaped estimate.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, img: &ImageF) -> Result<ImageF>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        (**self).denoise(img)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        (**self).denoise(img)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for std::sync::Arc<T> {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        (**self).denoise(img)
    }
}

/// Adapts a closure into a [`Denoiser`].
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&ImageF) -> Result<ImageF> + Send + Sync,
{
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        (self.0)(img)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Universal threshold `sigma_hat * sqrt(2 ln n)` from the estimated noise.
    Auto,
    /// Fixed threshold in 8-bit units.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    pub command: String,
    pub timeout_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Identity,
    Gaussian {
        sigma: f64,
    },
    Median {
        radius: usize,
    },
    /// Non-local means; `patch` and `window` are odd side lengths.
    Nlm {
        patch: usize,
        window: usize,
        h: Option<f64>,
    },
    WaveletShrink {
        threshold: Threshold,
        levels: usize,
    },
    External(ExternalSpec),
}

impl DenoiserSpec {
    pub fn external(command: impl Into<String>) -> Self {
        DenoiserSpec::External(ExternalSpec {
            command: command.into(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        })
    }

    pub fn is_external(&self) -> bool {
        matches!(self, DenoiserSpec::External(_))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m));
        match self {
            DenoiserSpec::Identity => Ok(()),
            DenoiserSpec::Gaussian { sigma } if !(*sigma > 0.0) || !sigma.is_finite() => {
                bad("gaussian sigma must be > 0")
            }
            DenoiserSpec::Median { radius: 0 } => bad("median radius must be >= 1"),
            DenoiserSpec::Nlm { patch, window, h } => {
                if *patch == 0 || patch % 2 == 0 || *window == 0 || window % 2 == 0 {
                    return bad("nlm patch and window must be odd and >= 1");
                }
                if matches!(h, Some(v) if !(*v > 0.0)) {
                    return bad("nlm h must be > 0");
                }
                Ok(())
            }
            DenoiserSpec::WaveletShrink { threshold, levels } => {
                if *levels == 0 {
                    return bad("wavelet levels must be >= 1");
                }
                if matches!(threshold, Threshold::Fixed(t) if !(*t >= 0.0)) {
                    return bad("wavelet threshold must be >= 0");
                }
                Ok(())
            }
            DenoiserSpec::External(ext) => {
                if ext.command.trim().is_empty() {
                    return bad("external command must be nonempty");
                }
                if !(ext.timeout_secs > 0.0) {
                    return bad("external timeout must be > 0");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl Denoiser for DenoiserSpec {
    fn denoise(&self, img: &ImageF) -> Result<ImageF> {
        denoise(self, img)
    }
}

pub fn denoise(spec: &DenoiserSpec, img: &ImageF) -> Result<ImageF> {
    spec.validate()?;
    if !img.is_finite() {
        return Err(Error::NonFinite("denoiser input"));
    }
    let (h, w, _) = img.shape();
    match spec {
        DenoiserSpec::Identity => Ok(img.clone()),
        DenoiserSpec::Gaussian { sigma } => img.map_planes(|p| gaussian_blur(p, h, w, *sigma)),
        DenoiserSpec::Median { radius } => img.map_planes(|p| median_filter(p, h, w, *radius)),
        DenoiserSpec::Nlm { patch, window, h: strength } => {
            nl_means(img, *patch / 2, *window / 2, *strength)
        }
        DenoiserSpec::WaveletShrink { threshold, levels } => wavelet_shrink(img, *threshold, *levels),
        DenoiserSpec::External(ext) => run_external(ext, img, None),
    }
}

/// Non-local means with Gaussian-weighted patch distances.
///
/// For each search offset the squared difference image (averaged over
/// channels) is smoothed by the patch kernel, giving the patch distance
/// `d2` at every pixel; the weight is `exp(-max(d2 - 2 sigma^2, 0) / h^2)`.
fn nl_means(img: &ImageF, patch_radius: usize, search_radius: usize, h8: Option<f64>) -> Result<ImageF> {
    let (height, width, channels) = img.shape();
    let sigma = estimate_sigma(img).unwrap_or(0.0) / 255.0;
    let h = h8.map(|v| v / 255.0).unwrap_or(NLM_H_FACTOR * sigma);
    if h <= 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel_with_radius((patch_radius as f64 / 2.0).max(0.5), patch_radius);
    let data = img.data();
    let n = height * width;
    let mut num = vec![0.0; n * channels];
    let mut den = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let r = search_radius as isize;
    let floor = 2.0 * sigma * sigma;
    let inv_h2 = 1.0 / (h * h);
    for dy in -r..=r {
        for dx in -r..=r {
            for y in 0..height {
                let sy = reflect(y as isize + dy, height);
                for x in 0..width {
                    let sx = reflect(x as isize + dx, width);
                    let (p, q) = ((y * width + x) * channels, (sy * width + sx) * channels);
                    let mut acc = 0.0;
                    for c in 0..channels {
                        let d = data[p + c] - data[q + c];
                        acc += d * d;
                    }
                    diff[y * width + x] = acc / channels as f64;
                }
            }
            let dist = separable(&diff, height, width, &kernel);
            for y in 0..height {
                let sy = reflect(y as isize + dy, height);
                for x in 0..width {
                    let sx = reflect(x as isize + dx, width);
                    let i = y * width + x;
                    let wgt = (-(dist[i] - floor).max(0.0) * inv_h2).exp();
                    den[i] += wgt;
                    let q = (sy * width + sx) * channels;
                    for c in 0..channels {
                        num[i * channels + c] += wgt * data[q + c];
                    }
                }
            }
        }
    }
    let out: Vec<f64> = num
        .iter()
        .enumerate()
        .map(|(k, v)| v / den[k / channels])
        .collect();
    ImageF::new(height, width, channels, out)
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Soft-thresholds every detail band of an undecimated Haar transform.
fn wavelet_shrink(img: &ImageF, threshold: Threshold, levels: usize) -> Result<ImageF> {
    let t = match threshold {
        Threshold::Fixed(t8) => t8 / 255.0,
        Threshold::Auto => {
            let sigma = estimate_sigma(img)? / 255.0;
            let n = (img.height() * img.width()) as f64;
            sigma * (2.0 * n.ln()).sqrt()
        }
    };
    let mut stack = swt_forward(img, levels)?;
    if t > 0.0 {
        for level in &mut stack {
            for band in level.details_mut() {
                for v in band.data_mut() {
                    *v = soft(*v, t);
                }
            }
        }
    }
    swt_inverse(&stack)
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

fn temp_root(workdir: Option<&Path>) -> PathBuf {
    workdir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(TMPDIR_ENV).map(PathBuf::from))
        .unwrap_or_else(std::env::temp_dir)
}

/// Runs an external denoiser on `img` through the PNG file protocol.
///
/// Each call gets its own temp directory, so concurrent calls never share
/// files. The returned image is the 8-bit output mapped back to float.
pub fn run_external(spec: &ExternalSpec, img: &ImageF, workdir: Option<&Path>) -> Result<ImageF> {
    let root = temp_root(workdir);
    let dir = tempfile::Builder::new()
        .prefix("denoise-forge-")
        .tempdir_in(&root)
        .map_err(|e| Error::io(&root, e))?;
    let input = dir.path().join("in.png");
    let output = dir.path().join("out.png");
    let stderr_path = dir.path().join("stderr.log");
    save_png(&input, &img.to_u8())?;

    let command = spec
        .command
        .replace("{in}", &shell_quote(&input))
        .replace("{out}", &shell_quote(&output));
    let stderr_file = File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(stderr_file)
        .spawn()
        .map_err(|e| Error::ExternalSpawn(e.to_string()))?;

    let status = match child
        .wait_timeout(Duration::from_secs_f64(spec.timeout_secs))
        .map_err(|e| Error::ExternalSpawn(e.to_string()))?
    {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::ExternalTimeout(spec.timeout_secs));
        }
    };
    if !status.success() {
        let stderr = std::fs::read_to_string(&stderr_path).unwrap_or_default();
        return Err(Error::ExternalFailed {
            status: status.to_string(),
            stderr: stderr.trim().to_string(),
        });
    }
    if !output.exists() {
        return Err(Error::ExternalMissingOutput(output));
    }
    let result = load_png(&output)?;
    if result.shape() != img.shape() {
        return Err(Error::ExternalShapeMismatch {
            expected: img.shape(),
            found: result.shape(),
        });
    }
    Ok(result.to_float())
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserSpec::Identity => f.write_str("identity"),
            DenoiserSpec::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            DenoiserSpec::Median { radius } => write!(f, "median:{radius}"),
            DenoiserSpec::Nlm { patch, window, h: None } => write!(f, "nlm:{patch},{window}"),
            DenoiserSpec::Nlm { patch, window, h: Some(h) } => write!(f, "nlm:{patch},{window},{h}"),
            DenoiserSpec::WaveletShrink { threshold: Threshold::Auto, levels } => {
                write!(f, "wavelet:auto,{levels}")
            }
            DenoiserSpec::WaveletShrink { threshold: Threshold::Fixed(t), levels } => {
                write!(f, "wavelet:{t},{levels}")
            }
            DenoiserSpec::External(ext) => write!(f, "external:{}", ext.command),
        }
    }
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    /// `identity`, `gaussian:1.5`, `median:1`, `nlm[:patch,window[,h]]`,
    /// `wavelet[:auto|T,levels]`, `external:<command template>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        if name == "external" {
            let spec = DenoiserSpec::external(args);
            spec.validate()?;
            return Ok(spec);
        }
        let parts: Vec<&str> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',').map(str::trim).collect()
        };
        let float = |i: usize, default: Option<f64>| -> Result<f64> {
            match parts.get(i) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad number `{v}` in `{s}`"))),
                None => default.ok_or_else(|| Error::invalid(format!("missing argument in `{s}`"))),
            }
        };
        let int = |i: usize, default: usize| -> Result<usize> {
            match parts.get(i) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad integer `{v}` in `{s}`"))),
                None => Ok(default),
            }
        };
        let spec = match name {
            "identity" => DenoiserSpec::Identity,
            "gaussian" => DenoiserSpec::Gaussian {
                sigma: float(0, Some(1.5))?,
            },
            "median" => DenoiserSpec::Median { radius: int(0, 1)? },
            "nlm" => DenoiserSpec::Nlm {
                patch: int(0, 5)?,
                window: int(1, 11)?,
                h: parts.get(2).map(|_| float(2, None)).transpose()?,
            },
            "wavelet" => DenoiserSpec::WaveletShrink {
                threshold: match parts.first() {
                    None | Some(&"auto") => Threshold::Auto,
                    Some(_) => Threshold::Fixed(float(0, None)?),
                },
                levels: int(1, 2)?,
            },
            other => return Err(Error::invalid(format!("unknown denoiser `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}
