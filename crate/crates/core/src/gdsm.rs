//! Generalized denoising score matching (GDSM) coefficient math.
//!
//! A noisy observation `x_data = x0 + sigma_data * N` is corrupted further,
//! `x_t = x_data + sqrt(sigma(t)^2 - sigma_data^2) * Z`, and a denoiser `h`
//! is scored by `|gamma * h(x_t, t) + delta * x_t - x_data|^2`. With the
//! reparameterization `sigma_tau^2 = sigma(t)^2 - sigma_data^2` the added
//! level `tau` can be sampled uniformly on `(0, T']`, and `t` is recovered
//! through the schedule inverse.
//!
//! Here `sigma_tau = tau`, so `tau` is itself a noise standard deviation.
//! Everything works in the float intensity domain (`sigma_data = 50/255`
//! for the challenge noise).
//!
//! The module ends with a Monte-Carlo oracle on a scalar Gaussian toy
//! (`x0 ~ N(0, sigma0^2)`) where the optimal `h` is known in closed form,
//! and a check suite over all of it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::noise::{estimate_sigma, NormalStream};
use crate::stats::compensated_sum;

/// Default ratio between the maximum noise level `T` and `sigma_data`.
pub const DEFAULT_T_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `sigma(t) = t`.
    Identity,
    /// `sigma(t) = sigma_max * (1 - cos(pi t / 2T))`. This exact form is a
    /// choice made here; any strictly increasing map would do.
    Cosine { sigma_max: f64 },
}

/// Monotone noise schedule on `[t_data, T]` with `sigma(t_data) = sigma_data`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigma_data: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    /// Identity schedule with `T = 10 * sigma_data`.
    pub fn identity(sigma_data: f64) -> Result<Self> {
        Self::identity_with_max(sigma_data, DEFAULT_T_FACTOR * sigma_data)
    }

    /// Identity schedule with `sigma_data` estimated from a noisy image.
    pub fn identity_auto(noisy: &ImageF) -> Result<Self> {
        Self::identity(estimate_sigma(noisy)? / 255.0)
    }

    pub fn identity_with_max(sigma_data: f64, t_max: f64) -> Result<Self> {
        let s = NoiseSchedule { kind: ScheduleKind::Identity, sigma_data, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn cosine(sigma_data: f64, sigma_max: f64, t_max: f64) -> Result<Self> {
        let s = NoiseSchedule { kind: ScheduleKind::Cosine { sigma_max }, sigma_data, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) || !self.sigma_data.is_finite() {
            return Err(Error::invalid(format!("sigma_data must be > 0, got {}", self.sigma_data)));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(Error::invalid(format!("T must be > 0, got {}", self.t_max)));
        }
        if let ScheduleKind::Cosine { sigma_max } = self.kind {
            if !(sigma_max > 0.0) {
                return Err(Error::invalid("cosine sigma_max must be > 0"));
            }
        }
        if !(self.sigma(self.t_max) > self.sigma_data) {
            return Err(Error::invalid(format!(
                "sigma(T) = {} must exceed sigma_data = {}",
                self.sigma(self.t_max),
                self.sigma_data
            )));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Identity => t,
            ScheduleKind::Cosine { sigma_max } => {
                // 1 - cos(x) written as 2 sin^2(x/2) to keep small t accurate.
                let half = PI * t / (4.0 * self.t_max);
                2.0 * sigma_max * half.sin().powi(2)
            }
        }
    }

    pub fn inverse(&self, sigma: f64) -> f64 {
        match self.kind {
            ScheduleKind::Identity => sigma,
            ScheduleKind::Cosine { sigma_max } => {
                let s = (sigma / (2.0 * sigma_max)).clamp(0.0, 1.0);
                4.0 * self.t_max * s.sqrt().asin() / PI
            }
        }
    }

    pub fn t_data(&self) -> f64 {
        self.inverse(self.sigma_data)
    }

    /// `T' = sqrt(sigma(T)^2 - sigma_data^2)`, the top of the `tau` range.
    pub fn tau_max(&self) -> f64 {
        (self.sigma(self.t_max).powi(2) - self.sigma_data.powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdsmCoeffs {
    pub gamma: f64,
    pub delta: f64,
}

pub fn coeffs(t: f64, schedule: &NoiseSchedule, sigma_target: f64) -> Result<GdsmCoeffs> {
    if !t.is_finite() || t < schedule.t_data() {
        return Err(Error::invalid(format!("t = {t} must be >= t_data = {}", schedule.t_data())));
    }
    let st2 = schedule.sigma(t).powi(2);
    let sd2 = schedule.sigma_data.powi(2);
    let sg2 = sigma_target.powi(2);
    let den = st2 - sg2;
    if !(den > 0.0) {
        return Err(Error::invalid(format!(
            "sigma(t) = {} must exceed sigma_target = {sigma_target}",
            schedule.sigma(t)
        )));
    }
    Ok(GdsmCoeffs { gamma: (st2 - sd2) / den, delta: (sd2 - sg2) / den })
}

pub fn reparam_coeffs(tau: f64, sigma_data: f64, sigma_target: f64) -> Result<GdsmCoeffs> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be >= 0, got {tau}")));
    }
    let tau2 = tau * tau;
    let num = sigma_data.powi(2) - sigma_target.powi(2);
    let den = tau2 + num;
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::invalid(format!(
            "tau^2 + sigma_data^2 - sigma_target^2 = {den} must be > 0"
        )));
    }
    Ok(GdsmCoeffs { gamma: tau2 / den, delta: num / den })
}

pub fn recover_t(tau: f64, schedule: &NoiseSchedule) -> Result<f64> {
    let tau_max = schedule.tau_max();
    if !(tau >= 0.0) || tau > tau_max * (1.0 + 1e-12) {
        return Err(Error::invalid(format!("tau = {tau} outside [0, {tau_max}]")));
    }
    Ok(schedule.inverse((tau * tau + schedule.sigma_data.powi(2)).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub tau: f64,
}

/// `x_t = x_data + tau * Z`, with `t` recovered from `tau`.
pub fn forward_corrupt(
    x_data: &[f64],
    tau: f64,
    schedule: &NoiseSchedule,
    stream: &mut NormalStream,
) -> Result<ForwardSample> {
    let t = recover_t(tau, schedule)?;
    let x_t = x_data.iter().map(|x| x + tau * stream.next_normal()).collect();
    Ok(ForwardSample { x_t, t, tau })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "tau", rename_all = "snake_case")]
pub enum TauSampler {
    /// Uniform on `(0, T']`.
    Uniform,
    Fixed(f64),
}

impl TauSampler {
    pub fn sample(&self, schedule: &NoiseSchedule, stream: &mut NormalStream) -> f64 {
        match *self {
            TauSampler::Uniform => schedule.tau_max() * (1.0 - stream.next_uniform()),
            TauSampler::Fixed(tau) => tau,
        }
    }
}

fn residual_norm2(estimate: &[f64], x_t: &[f64], x_data: &[f64], c: GdsmCoeffs) -> Result<f64> {
    if estimate.len() != x_data.len() {
        return Err(Error::invalid(format!(
            "denoiser returned {} values for {} inputs",
            estimate.len(),
            x_data.len()
        )));
    }
    if estimate.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denoiser output"));
    }
    Ok(compensated_sum(
        estimate
            .iter()
            .zip(x_t)
            .zip(x_data)
            .map(|((h, xt), x)| (c.gamma * h + c.delta * xt - x).powi(2)),
    ))
}

/// Monte-Carlo GDSM objective: the batch mean of
/// `|gamma' h(x_t, t) + delta' x_t - x_data|^2`, one `tau` draw per sample.
pub fn gdsm_loss<H>(
    h: H,
    batch: &[Vec<f64>],
    schedule: &NoiseSchedule,
    sigma_target: f64,
    sampler: TauSampler,
    stream: &mut NormalStream,
) -> Result<f64>
where
    H: Fn(&[f64], f64) -> Vec<f64>,
{
    if batch.is_empty() {
        return Err(Error::invalid("gdsm loss needs a nonempty batch"));
    }
    let terms = batch
        .iter()
        .map(|x| {
            let tau = sampler.sample(schedule, stream);
            let sample = forward_corrupt(x, tau, schedule, stream)?;
            let c = reparam_coeffs(tau, schedule.sigma_data, sigma_target)?;
            residual_norm2(&h(&sample.x_t, sample.t), &sample.x_t, x, c)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(terms) / batch.len() as f64)
}

/// Supervised phase objective: mean of `|h(x_noisy, t_data) - y|^2`.
pub fn supervised_loss<H>(h: H, noisy: &[Vec<f64>], clean: &[Vec<f64>], t_data: f64) -> Result<f64>
where
    H: Fn(&[f64], f64) -> Vec<f64>,
{
    if noisy.is_empty() || noisy.len() != clean.len() {
        return Err(Error::invalid("supervised loss needs equally many, nonempty pairs"));
    }
    let unit = GdsmCoeffs { gamma: 1.0, delta: 0.0 };
    let terms = noisy
        .iter()
        .zip(clean)
        .map(|(x, y)| residual_norm2(&h(x, t_data), x, y, unit))
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(terms) / noisy.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<AffineFit> {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let sxx = compensated_sum(x.iter().map(|a| (a - mx).powi(2)));
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    if !(sxx > 0.0) {
        return Err(Error::invalid("degenerate variance in least-squares fit"));
    }
    let slope = sxy / sxx;
    Ok(AffineFit { slope, intercept: my - slope * mx })
}

/// Minimum sample count for the Monte-Carlo fit.
pub const MIN_FIT_SAMPLES: usize = 100_000;

/// Fits the affine `h(x) = a x + b` minimizing the GDSM objective (at fixed
/// `t`, `sigma_target = 0`) on the scalar Gaussian toy.
///
/// With `gamma`, `delta` fixed the objective is `gamma^2 |h(x_t) - y|^2`
/// with `y = (x_data - delta x_t) / gamma`, so the minimizer is the OLS
/// fit of `y` on `x_t`. Its slope should be `sigma0^2 / (sigma0^2 + sigma_t^2)`.
pub fn fit_affine_minimizer(
    sigma0: f64,
    sigma_data: f64,
    sigma_t: f64,
    n_samples: usize,
    stream: &mut NormalStream,
) -> Result<AffineFit> {
    if n_samples < MIN_FIT_SAMPLES {
        return Err(Error::invalid(format!("need at least {MIN_FIT_SAMPLES} samples")));
    }
    if !(sigma0 >= 0.0) || !(sigma_data > 0.0) || !(sigma_t > sigma_data) {
        return Err(Error::invalid("need sigma0 >= 0 and 0 < sigma_data < sigma_t"));
    }
    let schedule = NoiseSchedule::identity_with_max(sigma_data, sigma_t)?;
    let c = coeffs(sigma_t, &schedule, 0.0)?;
    let extra = (sigma_t * sigma_t - sigma_data * sigma_data).sqrt();
    let mut xs = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x0 = sigma0 * stream.next_normal();
        let x_data = x0 + sigma_data * stream.next_normal();
        let x_t = x_data + extra * stream.next_normal();
        xs.push(x_t);
        ys.push((x_data - c.delta * x_t) / c.gamma);
    }
    ols(&xs, &ys)
}

/// Posterior-mean slope `sigma0^2 / (sigma0^2 + sigma^2)` of the toy.
pub fn posterior_slope(sigma0: f64, sigma: f64) -> f64 {
    let v0 = sigma0 * sigma0;
    v0 / (v0 + sigma * sigma)
}

pub type ReparamFn = dyn Fn(f64, f64, f64) -> Result<GdsmCoeffs>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub seed: u64,
    pub grid_points: usize,
    pub fit_samples: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { seed: 0, grid_points: 10_000, fit_samples: 1_000_000 }
    }
}

fn row(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), passed, detail }
}

/// Runs the full invariant suite with the library's reparameterized pair.
pub fn run_checks(config: &CheckConfig) -> Vec<CheckResult> {
    run_checks_with(config, &reparam_coeffs)
}

/// Same as [`run_checks`], with the reparameterized coefficients supplied
/// by the caller (lets a deliberately wrong formula be plugged in).
pub fn run_checks_with(config: &CheckConfig, reparam: &ReparamFn) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = NormalStream::new(config.seed);
    let sd_data = 50.0 / 255.0;

    // Coefficient identities over a grid with sigma_target < sigma_data < sigma_t.
    let mut worst = 0.0f64;
    let mut failure = None;
    for _ in 0..config.grid_points {
        let sd = 0.01 + rng.next_uniform();
        let sg = 0.9 * sd * rng.next_uniform();
        let st = sd * (1.01 + 9.0 * rng.next_uniform());
        let tau = (st * st - sd * sd).sqrt();
        let schedule = match NoiseSchedule::identity_with_max(sd, st) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        match (coeffs(st, &schedule, sg), reparam(tau, sd, sg)) {
            (Ok(a), Ok(b)) => {
                worst = worst.max((a.gamma + a.delta - 1.0).abs()).max((b.gamma + b.delta - 1.0).abs());
            }
            (Err(e), _) | (_, Err(e)) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    out.push(match failure {
        Some(e) => row("coefficient identities", false, e),
        None => row(
            "coefficient identities",
            worst <= 1e-12,
            format!("max |gamma+delta-1| = {worst:.2e} over {} points (tol 1e-12)", config.grid_points),
        ),
    });

    // Reparameterization consistency under identity and cosine schedules.
    let mut worst = 0.0f64;
    let mut failure = None;
    for k in 0..100 {
        let sd = 0.02 + 0.5 * rng.next_uniform();
        let sg = if k % 2 == 0 { 0.0 } else { 0.8 * sd * rng.next_uniform() };
        let schedules = [
            NoiseSchedule::identity(sd),
            NoiseSchedule::cosine(sd, 12.0 * sd, 1.0),
        ];
        for schedule in schedules {
            let result = schedule.and_then(|s| {
                let tau = s.tau_max() * (1.0 - rng.next_uniform());
                let a = coeffs(recover_t(tau, &s)?, &s, sg)?;
                let b = reparam(tau, sd, sg)?;
                Ok((a.gamma - b.gamma).abs().max((a.delta - b.delta).abs()))
            });
            match result {
                Ok(d) => worst = worst.max(d),
                Err(e) => failure = Some(e.to_string()),
            }
        }
    }
    out.push(match failure {
        Some(e) => row("reparam consistency", false, e),
        None => row(
            "reparam consistency",
            worst <= 1e-10,
            format!("max |coeffs(recover_t) - reparam| = {worst:.2e} (tol 1e-10)"),
        ),
    });

    // t recovery round trip.
    let mut worst = 0.0f64;
    for schedule in [NoiseSchedule::identity(sd_data), NoiseSchedule::cosine(sd_data, 2.0, 1.0)]
        .into_iter()
        .flatten()
    {
        for _ in 0..1000 {
            let tau = schedule.tau_max() * rng.next_uniform();
            if let Ok(t) = recover_t(tau, &schedule) {
                let err = (schedule.sigma(t).powi(2) - schedule.sigma_data.powi(2) - tau * tau).abs();
                worst = worst.max(err);
            } else {
                worst = f64::INFINITY;
            }
        }
    }
    out.push(row(
        "t recovery round trip",
        worst <= 1e-12,
        format!("max |sigma(t)^2 - sigma_data^2 - tau^2| = {worst:.2e} (tol 1e-12)"),
    ));

    // Gaussian-oracle minimizer.
    let n = config.fit_samples;
    let expect = posterior_slope(1.0, 0.5);
    match fit_affine_minimizer(1.0, 0.2, 0.5, n, &mut NormalStream::new(config.seed ^ 0x5eed)) {
        Ok(fit) => {
            out.push(row(
                "minimizer slope",
                (fit.slope - expect).abs() <= 0.02,
                format!("sigma0=1 sigma_data=0.2 sigma_t=0.5: slope {:.4} vs analytic {expect:.4} (tol 0.02)", fit.slope),
            ));
            out.push(row(
                "minimizer intercept",
                fit.intercept.abs() <= 0.02,
                format!("intercept {:.4} vs 0 (tol 0.02)", fit.intercept),
            ));
            match fit_affine_minimizer(1.0, 0.35, 0.5, n, &mut NormalStream::new(config.seed ^ 0xda7a)) {
                Ok(other) => out.push(row(
                    "minimizer independent of sigma_data",
                    (other.slope - fit.slope).abs() <= 0.03,
                    format!("slope {:.4} at sigma_data=0.35 vs {:.4} at 0.2 (tol 0.03)", other.slope, fit.slope),
                )),
                Err(e) => out.push(row("minimizer independent of sigma_data", false, e.to_string())),
            }
        }
        Err(e) => out.push(row("minimizer slope", false, e.to_string())),
    }
    match fit_affine_minimizer(0.0, 0.2, 0.5, n, &mut NormalStream::new(config.seed ^ 0x0000_ffff)) {
        Ok(fit) => out.push(row(
            "degenerate prior",
            fit.slope.abs() <= 0.02,
            format!("sigma0=0: slope {:.4} vs 0 (tol 0.02)", fit.slope),
        )),
        Err(e) => out.push(row("degenerate prior", false, e.to_string())),
    }

    out.push(loss_optimality(config.seed, reparam));
    out.push(supervised_optimality(config.seed));
    out
}

/// The posterior mean beats ten random affine perturbations of size 0.1
/// under the Monte-Carlo GDSM loss (common random numbers).
fn loss_optimality(seed: u64, reparam: &ReparamFn) -> CheckResult {
    let name = "gdsm loss optimality";
    let sigma0 = 1.0;
    let schedule = match NoiseSchedule::identity_with_max(0.2, 2.0) {
        Ok(s) => s,
        Err(e) => return row(name, false, e.to_string()),
    };
    let mut draw = NormalStream::new(seed ^ 0x1055);
    let batch: Vec<Vec<f64>> = (0..20_000)
        .map(|_| vec![sigma0 * draw.next_normal() + schedule.sigma_data * draw.next_normal()])
        .collect();
    // The loss is evaluated with the supplied reparameterization.
    let eval = |h: &dyn Fn(f64, f64) -> f64| -> Result<f64> {
        let mut rng = NormalStream::new(seed ^ 0x7a0);
        let mut terms = Vec::with_capacity(batch.len());
        for x in &batch {
            let tau = TauSampler::Uniform.sample(&schedule, &mut rng);
            let s = forward_corrupt(x, tau, &schedule, &mut rng)?;
            let c = reparam(tau, schedule.sigma_data, 0.0)?;
            terms.push(residual_norm2(&[h(s.x_t[0], s.t)], &s.x_t, x, c)?);
        }
        Ok(compensated_sum(terms) / batch.len() as f64)
    };
    let best = |x: f64, t: f64| posterior_slope(sigma0, schedule.sigma(t)) * x;
    let base = match eval(&best) {
        Ok(v) => v,
        Err(e) => return row(name, false, e.to_string()),
    };
    let mut pert = NormalStream::new(seed ^ 0x9e47);
    let mut beaten = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..10 {
        let (a, b) = (2.0 * pert.next_uniform() - 1.0, 2.0 * pert.next_uniform() - 1.0);
        let h = |x: f64, t: f64| best(x, t) + 0.1 * (a * x + b);
        match eval(&h) {
            Ok(v) => {
                min_gap = min_gap.min(v - base);
                if v > base {
                    beaten += 1;
                }
            }
            Err(e) => return row(name, false, e.to_string()),
        }
    }
    row(
        name,
        beaten == 10,
        format!("posterior mean beat {beaten}/10 perturbations (smallest gap {min_gap:.2e})"),
    )
}

/// The supervised phase optimum on the toy is the posterior mean at
/// `t_data`: the OLS fit of clean on noisy matches it.
fn supervised_optimality(seed: u64) -> CheckResult {
    let name = "supervised phase optimum";
    let (sigma0, sd) = (1.0, 0.2);
    let mut rng = NormalStream::new(seed ^ 0x5afe);
    let n = MIN_FIT_SAMPLES;
    let clean: Vec<f64> = (0..n).map(|_| sigma0 * rng.next_normal()).collect();
    let noisy: Vec<f64> = clean.iter().map(|x| x + sd * rng.next_normal()).collect();
    let expect = posterior_slope(sigma0, sd);
    let fit = match ols(&noisy, &clean) {
        Ok(f) => f,
        Err(e) => return row(name, false, e.to_string()),
    };
    let wrap = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
    let (xs, ys) = (wrap(&noisy), wrap(&clean));
    let loss_at = |k: f64| supervised_loss(|x: &[f64], _| vec![k * x[0]], &xs, &ys, sd);
    let ok_loss = match (loss_at(expect), loss_at(expect + 0.1), loss_at(expect - 0.1)) {
        (Ok(a), Ok(b), Ok(c)) => a < b && a < c,
        _ => false,
    };
    row(
        name,
        (fit.slope - expect).abs() <= 0.02 && ok_loss,
        format!("fitted slope {:.4} vs analytic {expect:.4}; loss minimal at analytic slope: {ok_loss}", fit.slope),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coefficient_examples() {
        let sd = 50.0 / 255.0;
        let s = NoiseSchedule::identity(sd).unwrap();
        let c = coeffs(0.5, &s, 0.0).unwrap();
        assert!((c.gamma - 0.8462128).abs() < 1e-6, "{}", c.gamma);
        assert!((c.delta - 0.1537872).abs() < 1e-6, "{}", c.delta);
        let c = coeffs(0.5, &s, sd).unwrap();
        assert_eq!((c.gamma, c.delta), (1.0, 0.0));
        assert!(coeffs(0.5, &s, 0.5).is_err());
        assert!(coeffs(0.1, &s, 0.0).is_err());
    }

    #[test]
    fn auto_sigma_data_from_estimate() {
        let gray = ImageF::filled(96, 96, 3, 0.5).unwrap();
        let noisy = crate::noise::add_awgn(&gray, &crate::noise::NoiseSpec { sigma: 50.0, clip: false, seed: 4 }).unwrap();
        let s = NoiseSchedule::identity_auto(&noisy).unwrap();
        assert!((s.sigma_data * 255.0 - 50.0).abs() < 2.5, "{}", s.sigma_data * 255.0);
        assert!((s.t_max - 10.0 * s.sigma_data).abs() < 1e-12);
    }

    #[test]
    fn reparam_examples() {
        let c = reparam_coeffs(0.0, 0.2, 0.0).unwrap();
        assert_eq!((c.gamma, c.delta), (0.0, 1.0));
        let c = reparam_coeffs(1e-9, 0.2, 0.0).unwrap();
        assert!(c.gamma < 1e-15 && (c.delta - 1.0).abs() < 1e-15);
        let c = reparam_coeffs(0.3, 0.2, 0.2).unwrap();
        assert_eq!((c.gamma, c.delta), (1.0, 0.0));
        assert!(reparam_coeffs(0.0, 0.2, 0.2).is_err());
        assert!(reparam_coeffs(-0.1, 0.2, 0.0).is_err());
    }

    #[test]
    fn recover_t_examples() {
        let s = NoiseSchedule::identity(0.3).unwrap();
        assert!((recover_t(0.4, &s).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(recover_t(0.0, &s).unwrap(), s.t_data());
        assert!(recover_t(s.tau_max() * 1.01, &s).is_err());
        assert!(recover_t(-0.1, &s).is_err());
        let c = NoiseSchedule::cosine(0.2, 3.0, 1.0).unwrap();
        assert!((c.sigma(c.t_data()) - 0.2).abs() < 1e-15);
        assert!((c.sigma(c.t_max) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::identity(0.0).is_err());
        assert!(NoiseSchedule::identity_with_max(0.3, 0.2).is_err());
        assert!(NoiseSchedule::cosine(0.3, 0.2, 1.0).is_err());
        let s = NoiseSchedule::identity(0.2).unwrap();
        assert!((s.t_max - 2.0).abs() < 1e-15);
    }

    #[test]
    fn forward_corrupt_moments_and_determinism() {
        let s = NoiseSchedule::identity(0.2).unwrap();
        let x = vec![0.25; 1_000_000];
        let a = forward_corrupt(&x, 0.0, &s, &mut NormalStream::new(1)).unwrap();
        assert_eq!(a.x_t, x);
        let tau = 0.7;
        let b = forward_corrupt(&x, tau, &s, &mut NormalStream::new(2)).unwrap();
        let d: Vec<f64> = b.x_t.iter().zip(&x).map(|(p, q)| p - q).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var / (tau * tau) - 1.0).abs() < 0.01, "{var}");
        let c = forward_corrupt(&x[..100], tau, &s, &mut NormalStream::new(2)).unwrap();
        assert_eq!(&c.x_t[..], &b.x_t[..100]);
        assert!((b.t - (tau * tau + 0.04f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perfect_oracle_has_zero_loss() {
        let s = NoiseSchedule::identity(0.2).unwrap();
        let x = vec![0.3, -0.1, 0.7];
        let batch = vec![x.clone(); 5];
        let h = |x_t: &[f64], t: f64| {
            let tau = (s.sigma(t).powi(2) - s.sigma_data.powi(2)).max(0.0).sqrt();
            let c = reparam_coeffs(tau, s.sigma_data, 0.0).unwrap();
            x.iter().zip(x_t).map(|(xd, xt)| (xd - c.delta * xt) / c.gamma).collect()
        };
        let l = gdsm_loss(h, &batch, &s, 0.0, TauSampler::Uniform, &mut NormalStream::new(3)).unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn target_at_data_level_is_plain_regression() {
        let s = NoiseSchedule::identity(0.2).unwrap();
        let batch: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 50.0, 0.5]).collect();
        let h = |x_t: &[f64], _t: f64| x_t.iter().map(|v| 0.9 * v).collect::<Vec<_>>();
        let sampler = TauSampler::Fixed(0.3);
        let gdsm = gdsm_loss(h, &batch, &s, 0.2, sampler, &mut NormalStream::new(4)).unwrap();
        // Same draws, loss computed directly as |h(x_t) - x_data|^2.
        let mut rng = NormalStream::new(4);
        let mut acc = 0.0;
        for x in &batch {
            let tau = sampler.sample(&s, &mut rng);
            let f = forward_corrupt(x, tau, &s, &mut rng).unwrap();
            acc += h(&f.x_t, f.t).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        assert!((gdsm - acc / batch.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_denoisers() {
        let s = NoiseSchedule::identity(0.2).unwrap();
        let batch = vec![vec![0.1]];
        let nan = |_: &[f64], _: f64| vec![f64::NAN];
        assert!(matches!(
            gdsm_loss(nan, &batch, &s, 0.0, TauSampler::Uniform, &mut NormalStream::new(0)),
            Err(Error::NonFinite(_))
        ));
        let short = |_: &[f64], _: f64| Vec::new();
        assert!(gdsm_loss(short, &batch, &s, 0.0, TauSampler::Uniform, &mut NormalStream::new(0)).is_err());
        assert!(gdsm_loss(|x: &[f64], _| x.to_vec(), &[], &s, 0.0, TauSampler::Uniform, &mut NormalStream::new(0)).is_err());
    }

    #[test]
    fn fit_guards() {
        let mut rng = NormalStream::new(0);
        assert!(fit_affine_minimizer(1.0, 0.2, 0.5, 10, &mut rng).is_err());
        assert!(fit_affine_minimizer(1.0, 0.5, 0.2, MIN_FIT_SAMPLES, &mut rng).is_err());
        assert!(ols(&[1.0, 1.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn fit_matches_posterior_slope() {
        let fit = fit_affine_minimizer(1.0, 0.2, 0.5, 200_000, &mut NormalStream::new(7)).unwrap();
        assert!((fit.slope - 0.8).abs() < 0.02, "{fit:?}");
        assert!(fit.intercept.abs() < 0.02);
        let flat = fit_affine_minimizer(0.0, 0.2, 0.5, 200_000, &mut NormalStream::new(8)).unwrap();
        assert!(flat.slope.abs() < 0.02);
    }

    #[test]
    fn suite_passes_and_catches_wrong_delta() {
        let cfg = CheckConfig { seed: 1, grid_points: 2000, fit_samples: 200_000 };
        let rows = run_checks(&cfg);
        for r in &rows {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(rows.iter().any(|r| r.name == "minimizer slope" && r.detail.contains("0.8000")));

        let wrong = |tau: f64, sd: f64, sg: f64| -> Result<GdsmCoeffs> {
            let c = reparam_coeffs(tau, sd, sg)?;
            Ok(GdsmCoeffs { gamma: c.gamma, delta: (sd * sd) / (tau * tau + sd * sd) })
        };
        let rows = run_checks_with(&cfg, &wrong);
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"reparam consistency"), "{failed:?}");
    }

    proptest! {
        #[test]
        fn coefficients_sum_to_one(sd in 0.01f64..1.0, a in 0.0f64..0.9, b in 0.01f64..9.0) {
            let sg = a * sd;
            let st = sd * (1.0 + b);
            let s = NoiseSchedule::identity_with_max(sd, st).unwrap();
            let c = coeffs(st, &s, sg).unwrap();
            prop_assert!((c.gamma + c.delta - 1.0).abs() <= 1e-12);
            prop_assert!(c.gamma > 0.0 && c.gamma <= 1.0);
            let tau = (st * st - sd * sd).sqrt();
            let r = reparam_coeffs(tau, sd, sg).unwrap();
            prop_assert!((r.gamma + r.delta - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn reparam_matches_coeffs_of_recovered_t(sd in 0.01f64..1.0, u in 0.0f64..1.0, cosine in any::<bool>()) {
            let s = if cosine {
                NoiseSchedule::cosine(sd, 15.0 * sd, 3.0).unwrap()
            } else {
                NoiseSchedule::identity(sd).unwrap()
            };
            let tau = s.tau_max() * (1.0 - u);
            let a = coeffs(recover_t(tau, &s).unwrap(), &s, 0.0).unwrap();
            let b = reparam_coeffs(tau, sd, 0.0).unwrap();
            prop_assert!((a.gamma - b.gamma).abs() <= 1e-10);
            prop_assert!((a.delta - b.delta).abs() <= 1e-10);
            let t = recover_t(tau, &s).unwrap();
            prop_assert!((s.sigma(t).powi(2) - sd * sd - tau * tau).abs() <= 1e-12);
        }
    }
}
