//! Dataset-level operations behind the command-line tool: noisy-set
//! synthesis, the denoising pipeline with its reproducibility manifest,
//! evaluation against ground truth, and leaderboard ranking.
//!
//! Datasets are flat directories of PNGs, matched by filename.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, DenoiserSpec};
use crate::ensemble::{edge_guided_fuse, weighted_ensemble, CannyParams, Multiscale, SelfEnsemble};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::io::{load_png, save_png};
use crate::losses::{loss, LossKind};
use crate::metrics::{aggregate, psnr, psnr_f, rank, ssim, EvalRecord, ImageScore, RankTable};
use crate::noise::{add_awgn, NoiseSpec, GENERATOR_NAME};
use crate::stats::mean;
use crate::tiling::{TileSpec, Tiled, Tiling};

pub const SYNTH_METADATA: &str = "synth.json";
pub const MANIFEST: &str = "manifest.json";
pub const TOOL_NAME: &str = "denoise-forge";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// 64-bit FNV-1a of a filename, mixed into the dataset seed per image.
pub fn name_hash(name: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(name.as_bytes());
    h.finish()
}

pub fn image_seed(seed: u64, name: &str) -> u64 {
    seed ^ name_hash(name)
}

/// Sorted PNG filenames (case-insensitive extension) directly in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn stage<T>(file: &str, stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { file: file.to_string(), stage, source: Box::new(e) })
}

fn check_distinct(a: &Path, b: &Path) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(a) == canon(b) {
        return Err(Error::invalid(format!(
            "input and output directories must differ: {}",
            a.display()
        )));
    }
    Ok(())
}

fn prepare_outputs(dir: &Path, names: &[String], extra: &str, force: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !force {
        for name in names.iter().map(String::as_str).chain([extra]) {
            let p = dir.join(name);
            if p.exists() {
                return Err(Error::OutputExists(p));
            }
        }
    }
    Ok(())
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clean_dir: PathBuf,
    pub output_dir: PathBuf,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub name: String,
    pub seed: u64,
    /// PSNR of the float noisy image against the clean one, before 8-bit
    /// quantization.
    pub psnr_prequant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub tool: String,
    pub version: String,
    pub generator: String,
    pub sigma: f64,
    pub clip: bool,
    pub seed: u64,
    pub seed_derivation: String,
    pub images: Vec<SynthImage>,
    pub mean_psnr_prequant: Option<f64>,
}

/// Writes one noisy PNG per clean PNG plus `synth.json`.
pub fn synth(config: &SynthConfig, force: bool) -> Result<SynthMetadata> {
    config.noise.validate()?;
    check_distinct(&config.clean_dir, &config.output_dir)?;
    let names = list_pngs(&config.clean_dir)?;
    if names.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", config.clean_dir.display())));
    }
    prepare_outputs(&config.output_dir, &names, SYNTH_METADATA, force)?;
    let images = with_pool(config.workers, || {
        names
            .par_iter()
            .map(|name| {
                let clean = stage(name, "load", load_png(config.clean_dir.join(name)))?.to_float();
                let seed = image_seed(config.noise.seed, name);
                let noisy = stage(name, "noise", add_awgn(&clean, &NoiseSpec { seed, ..config.noise }))?;
                let psnr_prequant = stage(name, "score", psnr_f(&noisy, &clean))?;
                stage(name, "save", save_png(config.output_dir.join(name), &noisy.to_u8()))?;
                Ok(SynthImage { name: name.clone(), seed, psnr_prequant })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let meta = SynthMetadata {
        tool: TOOL_NAME.to_string(),
        version: VERSION.to_string(),
        generator: GENERATOR_NAME.to_string(),
        sigma: config.noise.sigma,
        clip: config.noise.clip,
        seed: config.noise.seed,
        seed_derivation: "seed XOR fnv1a64(filename)".to_string(),
        mean_psnr_prequant: mean(images.iter().map(|i| i.psnr_prequant)),
        images,
    };
    write_json(&config.output_dir.join(SYNTH_METADATA), &meta)?;
    Ok(meta)
}

/// Optional merge of the pipeline output with other models' predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fusion {
    /// `weights[0]` applies to this run's output, the rest to the member
    /// directories in order.
    Weighted { weights: Vec<f64>, members: Vec<PathBuf> },
    /// Edge-guided fusion with `reference` as the edge standard.
    Edge { reference: PathBuf, canny: CannyParams },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub tiling: Tiling,
    #[serde(default)]
    pub self_ensemble: bool,
    /// Multi-scale patch ensemble; replaces `tiling` when nonempty.
    #[serde(default)]
    pub multiscale: Vec<TileSpec>,
    #[serde(default)]
    pub quantize_before_merge: bool,
    #[serde(default)]
    pub fusion: Option<Fusion>,
    /// Loss reported per image against `reference_dir`.
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub reference_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
}

impl DenoiseConfig {
    pub fn new(input_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, denoiser: DenoiserSpec) -> Self {
        DenoiseConfig {
            input_dir: input_dir.into(),
            output_dir: output_dir.into(),
            denoiser,
            tiling: Tiling::Whole,
            self_ensemble: false,
            multiscale: Vec::new(),
            quantize_before_merge: false,
            fusion: None,
            loss: None,
            reference_dir: None,
            seed: 0,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        check_distinct(&self.input_dir, &self.output_dir)?;
        if let Tiling::Fixed(spec) = &self.tiling {
            spec.validate()?;
        }
        self.multiscale.iter().try_for_each(TileSpec::validate)?;
        match &self.fusion {
            Some(Fusion::Weighted { weights, members }) => {
                crate::ensemble::validate_weights(weights)?;
                if weights.len() != members.len() + 1 {
                    return Err(Error::invalid(format!(
                        "{} weights for {} models (this run plus {} member dirs)",
                        weights.len(),
                        members.len() + 1,
                        members.len()
                    )));
                }
            }
            Some(Fusion::Edge { canny, .. }) => canny.validate()?,
            None => {}
        }
        if let Some(kind) = &self.loss {
            kind.validate()?;
            if self.reference_dir.is_none() {
                return Err(Error::invalid("a loss report needs a reference directory"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisedImage {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Tile geometry used; absent when processed whole.
    pub patch: Option<usize>,
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub multiscale: Vec<TileSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: DenoiseConfig,
    pub images: Vec<DenoisedImage>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds the per-image denoiser: tiling (or multiscale) inside, the
/// self-ensemble outside.
fn build(config: &DenoiseConfig) -> Box<dyn Denoiser> {
    let base = config.denoiser.clone();
    let inner: Box<dyn Denoiser> = if config.multiscale.is_empty() {
        Box::new(Tiled { inner: base, tiling: config.tiling })
    } else {
        Box::new(Multiscale {
            inner: base,
            specs: config.multiscale.clone(),
            quantize_before_merge: config.quantize_before_merge,
        })
    };
    if config.self_ensemble {
        Box::new(SelfEnsemble(inner))
    } else {
        inner
    }
}

fn fuse(config: &DenoiseConfig, name: &str, out: ImageF) -> Result<ImageF> {
    let load = |dir: &Path| load_png(dir.join(name)).map(|i| i.to_float());
    match &config.fusion {
        None => Ok(out),
        Some(Fusion::Weighted { weights, members }) => {
            let mut outputs = vec![out];
            for dir in members {
                outputs.push(load(dir)?);
            }
            if config.quantize_before_merge {
                outputs = outputs.into_iter().map(|o| o.to_u8().to_float()).collect();
            }
            weighted_ensemble(&outputs, weights)
        }
        Some(Fusion::Edge { reference, canny }) => edge_guided_fuse(&out, &load(reference)?, canny),
    }
}

fn denoise_one(config: &DenoiseConfig, denoiser: &dyn Denoiser, name: &str) -> Result<DenoisedImage> {
    let noisy = stage(name, "load", load_png(config.input_dir.join(name)))?.to_float();
    let (h, w, _) = noisy.shape();
    let out = stage(name, "denoise", denoiser.denoise(&noisy))?;
    let out = stage(name, "fuse", fuse(config, name, out))?;
    let out = out.to_u8();
    let loss_value = match (&config.loss, &config.reference_dir) {
        (Some(kind), Some(dir)) => {
            let target = stage(name, "load reference", load_png(dir.join(name)))?.to_float();
            Some(stage(name, "loss", loss(kind, &out.to_float(), &target))?)
        }
        _ => None,
    };
    stage(name, "save", save_png(config.output_dir.join(name), &out))?;
    let spec = if config.multiscale.is_empty() { config.tiling.resolve(h, w) } else { None };
    Ok(DenoisedImage {
        name: name.to_string(),
        height: h,
        width: w,
        patch: spec.map(|s| s.patch),
        stride: spec.map(|s| s.stride),
        multiscale: config.multiscale.clone(),
        loss: loss_value,
    })
}

/// Denoises every PNG in the input directory and writes `manifest.json`.
pub fn denoise(config: &DenoiseConfig, force: bool) -> Result<Manifest> {
    config.validate()?;
    let names = list_pngs(&config.input_dir)?;
    if names.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", config.input_dir.display())));
    }
    prepare_outputs(&config.output_dir, &names, MANIFEST, force)?;
    let denoiser = build(config);
    let images = with_pool(config.workers, || {
        names
            .par_iter()
            .map(|name| denoise_one(config, denoiser.as_ref(), name))
            .collect::<Result<Vec<_>>>()
    })??;
    let manifest = Manifest {
        tool: TOOL_NAME.to_string(),
        version: VERSION.to_string(),
        config: config.clone(),
        images,
    };
    write_json(&config.output_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Re-runs a recorded manifest, optionally into another directory.
pub fn rerun_manifest(path: &Path, output_dir: Option<&Path>, force: bool) -> Result<Manifest> {
    let mut config = Manifest::load(path)?.config;
    if let Some(dir) = output_dir {
        config.output_dir = dir.to_path_buf();
    }
    denoise(&config, force)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn record(&self) -> EvalRecord {
        EvalRecord::new(self.name.clone(), self.mean_psnr, self.mean_ssim)
    }

    /// Per-image rows with the `name,image,psnr,ssim` header.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv { path: PathBuf::from("<memory>"), message: e.to_string() };
        w.write_record(["name", "image", "psnr", "ssim"]).map_err(csv_err)?;
        for s in &self.images {
            w.write_record([
                self.name.clone(),
                s.image.clone(),
                format_score(s.psnr, 4),
                format_score(s.ssim, 6),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn format_score(v: f64, decimals: usize) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.decimals$}")
    }
}

/// Scores every prediction against its same-named ground truth.
pub fn eval(gt_dir: &Path, pred_dir: &Path, name: &str) -> Result<EvalReport> {
    let gt: BTreeSet<String> = list_pngs(gt_dir)?.into_iter().collect();
    let pred: BTreeSet<String> = list_pngs(pred_dir)?.into_iter().collect();
    let missing: Vec<String> = gt.difference(&pred).cloned().collect();
    let extra: Vec<String> = pred.difference(&gt).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Unmatched { missing, extra });
    }
    if gt.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", gt_dir.display())));
    }
    let names: Vec<String> = gt.into_iter().collect();
    let images = names
        .par_iter()
        .map(|image| {
            let a = stage(image, "load", load_png(gt_dir.join(image)))?;
            let b = stage(image, "load", load_png(pred_dir.join(image)))?;
            let p = stage(image, "psnr", psnr(&b, &a))?;
            let s = stage(image, "ssim", ssim(&b, &a))?;
            Ok(ImageScore { image: image.clone(), psnr: p, ssim: s })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean_psnr, mean_ssim) = aggregate(&images).expect("nonempty");
    Ok(EvalReport { name: name.to_string(), images, mean_psnr, mean_ssim })
}

fn parse_score(path: &Path, field: &str, v: &str) -> Result<f64> {
    match v.trim() {
        "inf" | "+inf" | "Inf" => Ok(f64::INFINITY),
        s => s.parse().map_err(|_| Error::Csv {
            path: path.to_path_buf(),
            message: format!("bad {field} value `{v}`"),
        }),
    }
}

/// Reads leaderboard rows from CSV: either `name,psnr,ssim` summaries or
/// `name,image,psnr,ssim` per-image scores, which are averaged per name.
pub fn read_scores_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => csv_err(e),
        })?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            message: format!("missing `{name}` column"),
        })
    };
    let (ni, pi, si) = (col("name")?, col("psnr")?, col("ssim")?);
    let per_image = headers.iter().any(|h| h.eq_ignore_ascii_case("image"));
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let name = get(ni).to_string();
        let p = parse_score(path, "psnr", get(pi))?;
        let s = parse_score(path, "ssim", get(si))?;
        if !groups.contains_key(&name) {
            order.push(name.clone());
        } else if !per_image {
            return Err(Error::DuplicateName(name));
        }
        groups.entry(name).or_default().push((p, s));
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let rows = &groups[&name];
            let p = mean(rows.iter().map(|r| r.0)).expect("nonempty group");
            let s = mean(rows.iter().map(|r| r.1)).expect("nonempty group");
            EvalRecord::new(name, p, s)
        })
        .collect())
}

/// Ranks the union of rows from several CSV files.
pub fn rank_csv_files(paths: &[PathBuf]) -> Result<RankTable> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_scores_csv(p)?);
    }
    rank(&records)
}
