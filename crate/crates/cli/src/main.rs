//! `denoise-forge`: synthesize noisy sets, run denoising pipelines, score
//! and rank results, and check the GDSM math.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 external-denoiser
//! error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use denoise_forge::ensemble::CannyParams;
use denoise_forge::gdsm::{run_checks, CheckConfig};
use denoise_forge::losses::LossKind;
use denoise_forge::metrics::rank;
use denoise_forge::noise::NoiseSpec;
use denoise_forge::pipeline::{self, DenoiseConfig, Fusion, SynthConfig};
use denoise_forge::tiling::{BlendMode, EdgeMode, TileSpec, Tiling};
use denoise_forge::{DenoiserSpec, Error};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "denoise-forge", version, about = "AWGN denoising benchmark toolkit")]
struct Cli {
    /// TOML file with defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add seeded AWGN to every clean PNG in a directory.
    Synth(SynthArgs),
    /// Run a denoiser pipeline over a directory of noisy PNGs.
    Denoise(Box<DenoiseArgs>),
    /// Score predictions against ground truth (PSNR/SSIM).
    Eval(EvalArgs),
    /// Rank teams from score CSVs.
    Rank(RankArgs),
    /// Run the GDSM invariant suite.
    GdsmCheck(GdsmArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    clean: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Noise standard deviation on the 0..255 scale [default: 50].
    #[arg(long)]
    sigma: Option<f64>,
    /// Keep values outside [0, 1] before quantization (clipping is on by default).
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long, value_name = "DIR")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// identity | gaussian:S | median:R | nlm[:P,W[,H]] | wavelet[:auto|T,L] | external:CMD
    /// [default: gaussian:1.5]
    #[arg(long, value_name = "SPEC")]
    denoiser: Option<String>,
    #[arg(long, conflicts_with_all = ["adaptive", "multiscale"])]
    patch: Option<usize>,
    /// Overlap in pixels [default: patch/2].
    #[arg(long, requires = "patch", conflicts_with = "overlap_frac")]
    overlap: Option<usize>,
    #[arg(long, requires = "patch")]
    overlap_frac: Option<f64>,
    /// average | linear [default: average]
    #[arg(long)]
    blend: Option<String>,
    /// clamp | pad [default: clamp]
    #[arg(long)]
    edge: Option<String>,
    /// Pick the patch size from the image size (896/768/512, stride patch/2).
    #[arg(long, conflicts_with = "multiscale")]
    adaptive: bool,
    /// Average over the eight flips and rotations.
    #[arg(long)]
    self_ensemble: bool,
    /// Patch ensemble as PATCH/OVERLAP list, e.g. 256/48,384/64,512/96.
    #[arg(long, value_name = "LIST")]
    multiscale: Option<String>,
    #[arg(long)]
    quantize_before_merge: bool,
    /// Edge-guided fusion with a reference prediction set: edge:DIR.
    #[arg(long, value_name = "edge:DIR", conflicts_with = "ensemble")]
    fuse: Option<String>,
    #[arg(long)]
    canny_sigma: Option<f64>,
    #[arg(long)]
    canny_low: Option<f64>,
    #[arg(long)]
    canny_high: Option<f64>,
    /// Weights for this run followed by each --ensemble-with directory.
    #[arg(long, value_name = "W1,W2,...")]
    ensemble: Option<String>,
    #[arg(long, value_name = "DIR")]
    ensemble_with: Vec<PathBuf>,
    /// Loss expression reported per image against --reference.
    #[arg(long, value_name = "EXPR")]
    loss: Option<String>,
    #[arg(long, value_name = "DIR")]
    reference: Option<PathBuf>,
    /// Re-run a recorded manifest (only --out and --force apply).
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    gt: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pred: Option<PathBuf>,
    /// Entry name [default: prediction directory name].
    #[arg(long)]
    name: Option<String>,
    /// Per-image CSV output.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Markdown leaderboard output.
    #[arg(long, value_name = "FILE")]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// CSV files with name,psnr,ssim or name,image,psnr,ssim columns.
    #[arg(required = true, value_name = "CSV")]
    files: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct GdsmArgs {
    /// Monte-Carlo samples per minimizer fit.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Random points for the coefficient identities.
    #[arg(long, default_value_t = 10_000)]
    grid: usize,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("missing required --{flag} (flag or config key)")))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("bad {what} `{p}`"))))
        .collect()
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_external() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let file = match &cli.config {
        Some(p) => config::load(p).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let workers = cli.workers.or(file.workers).unwrap_or(0);
    match cli.command {
        Command::Synth(a) => synth(a, &file, seed, workers),
        Command::Denoise(a) => denoise(*a, &file, seed, workers),
        Command::Eval(a) => eval(a, &file),
        Command::Rank(a) => rank_cmd(a),
        Command::GdsmCheck(a) => gdsm_check(a, seed),
    }
}

fn synth(a: SynthArgs, file: &FileConfig, seed: u64, workers: usize) -> CliResult<ExitCode> {
    let cfg = SynthConfig {
        clean_dir: required(a.clean.or(file.clean.clone()), "clean")?,
        output_dir: required(a.out.or(file.out.clone()), "out")?,
        noise: NoiseSpec {
            sigma: a.sigma.or(file.sigma).unwrap_or(50.0),
            clip: !a.no_clip && file.clip.unwrap_or(true),
            seed,
        },
        workers,
    };
    let force = a.force || file.force.unwrap_or(false);
    let meta = pipeline::synth(&cfg, force)?;
    println!(
        "wrote {} noisy images to {} (sigma {}, clip {}, seed {}, mean pre-quantization PSNR {:.4} dB)",
        meta.images.len(),
        cfg.output_dir.display(),
        meta.sigma,
        meta.clip,
        meta.seed,
        meta.mean_psnr_prequant.unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn tiling(a: &DenoiseArgs, file: &FileConfig) -> CliResult<Tiling> {
    let adaptive = a.adaptive || (a.patch.is_none() && file.adaptive.unwrap_or(false));
    let patch = a.patch.or(if adaptive { None } else { file.patch });
    let blend: BlendMode = parse(a.blend.as_deref().or(file.blend.as_deref()).unwrap_or("average"))?;
    let edge = match a.edge.as_deref().or(file.edge.as_deref()).unwrap_or("clamp") {
        "clamp" => EdgeMode::Clamp,
        "pad" => EdgeMode::Pad,
        other => return Err(usage(format!("unknown edge mode `{other}` (clamp|pad)"))),
    };
    match (adaptive, patch) {
        (true, _) => Ok(Tiling::Adaptive),
        (false, None) => Ok(Tiling::Whole),
        (false, Some(patch)) => {
            let spec = match (a.overlap, a.overlap_frac) {
                (Some(o), _) => TileSpec::with_overlap(patch, o, blend),
                (None, Some(f)) => TileSpec::with_overlap_frac(patch, f, blend),
                (None, None) => match (file.overlap, file.overlap_frac) {
                    (Some(o), _) => TileSpec::with_overlap(patch, o, blend),
                    (None, Some(f)) => TileSpec::with_overlap_frac(patch, f, blend),
                    (None, None) => TileSpec::with_stride(patch, (patch / 2).max(1), blend),
                },
            }
            .map_err(|e| usage(e.to_string()))?;
            Ok(Tiling::Fixed(TileSpec { edge, ..spec }))
        }
    }
}

fn fusion(a: &DenoiseArgs, file: &FileConfig) -> CliResult<Option<Fusion>> {
    let fuse = a.fuse.clone().or(file.fuse.clone());
    let ensemble = a.ensemble.clone().or(file.ensemble.as_ref().map(|l| l.joined()));
    let members = if a.ensemble_with.is_empty() {
        file.ensemble_with.clone().unwrap_or_default()
    } else {
        a.ensemble_with.clone()
    };
    match (fuse, ensemble) {
        (Some(_), Some(_)) => Err(usage("--fuse and --ensemble cannot be combined")),
        (Some(f), None) => {
            let dir = f
                .strip_prefix("edge:")
                .ok_or_else(|| usage(format!("--fuse expects edge:DIR, got `{f}`")))?;
            let d = CannyParams::default();
            let canny = CannyParams {
                sigma: a.canny_sigma.or(file.canny_sigma).unwrap_or(d.sigma),
                low: a.canny_low.or(file.canny_low).unwrap_or(d.low),
                high: a.canny_high.or(file.canny_high).unwrap_or(d.high),
            };
            canny.validate().map_err(|e| usage(e.to_string()))?;
            Ok(Some(Fusion::Edge { reference: PathBuf::from(dir), canny }))
        }
        (None, Some(w)) => {
            let weights: Vec<f64> = parse_list(&w, "weight")?;
            if weights.len() != members.len() + 1 {
                return Err(usage(format!(
                    "--ensemble has {} weights; expected one for this run plus one per --ensemble-with ({})",
                    weights.len(),
                    members.len()
                )));
            }
            denoise_forge::ensemble::validate_weights(&weights).map_err(|e| usage(e.to_string()))?;
            Ok(Some(Fusion::Weighted { weights, members }))
        }
        (None, None) if !members.is_empty() => Err(usage("--ensemble-with needs --ensemble weights")),
        (None, None) => Ok(None),
    }
}

fn denoise(a: DenoiseArgs, file: &FileConfig, seed: u64, workers: usize) -> CliResult<ExitCode> {
    let force = a.force || file.force.unwrap_or(false);
    if let Some(manifest) = &a.manifest {
        let m = pipeline::rerun_manifest(manifest, a.out.as_deref(), force)?;
        println!("re-ran {} images into {}", m.images.len(), m.config.output_dir.display());
        return Ok(ExitCode::SUCCESS);
    }
    let denoiser: DenoiserSpec = parse(a.denoiser.as_deref().or(file.denoiser.as_deref()).unwrap_or("gaussian:1.5"))?;
    let multiscale: Vec<TileSpec> = match a.multiscale.clone().or(file.multiscale.as_ref().map(|l| l.joined())) {
        Some(list) => list.split(',').filter(|s| !s.trim().is_empty()).map(parse).collect::<CliResult<_>>()?,
        None => Vec::new(),
    };
    let tiling = tiling(&a, file)?;
    if !multiscale.is_empty() && tiling != Tiling::Whole {
        return Err(usage("--multiscale replaces --patch/--adaptive"));
    }
    let loss: Option<LossKind> = a.loss.as_deref().or(file.loss.as_deref()).map(parse).transpose()?;
    let reference = a.reference.clone().or(file.reference.clone());
    if loss.is_some() && reference.is_none() {
        return Err(usage("--loss needs --reference DIR"));
    }
    let cfg = DenoiseConfig {
        input_dir: required(a.input.clone().or(file.input.clone()), "input")?,
        output_dir: required(a.out.clone().or(file.out.clone()), "out")?,
        denoiser,
        tiling,
        self_ensemble: a.self_ensemble || file.self_ensemble.unwrap_or(false),
        multiscale,
        quantize_before_merge: a.quantize_before_merge || file.quantize_before_merge.unwrap_or(false),
        fusion: fusion(&a, file)?,
        loss,
        reference_dir: reference,
        seed,
        workers,
    };
    let m = pipeline::denoise(&cfg, force)?;
    println!(
        "denoised {} images into {} (manifest {})",
        m.images.len(),
        cfg.output_dir.display(),
        cfg.output_dir.join(pipeline::MANIFEST).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs, file: &FileConfig) -> CliResult<ExitCode> {
    let gt = required(a.gt.or(file.gt.clone()), "gt")?;
    let pred = required(a.pred.or(file.pred.clone()), "pred")?;
    let name = a.name.or(file.name.clone()).unwrap_or_else(|| {
        pred.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "prediction".to_string())
    });
    let report = pipeline::eval(&gt, &pred, &name)?;
    let table = rank(&[report.record()])?;
    if let Some(p) = a.csv.or(file.csv.clone()) {
        write_file(&p, &report.to_csv()?)?;
    }
    if let Some(p) = a.markdown.or(file.markdown.clone()) {
        write_file(&p, &table.to_markdown())?;
    }
    for s in &report.images {
        println!("{}  psnr {}  ssim {:.4}", s.image, denoise_forge::metrics::format_psnr(s.psnr), s.ssim);
    }
    print!("{}", table.to_markdown());
    Ok(ExitCode::SUCCESS)
}

fn rank_cmd(a: RankArgs) -> CliResult<ExitCode> {
    let table = pipeline::rank_csv_files(&a.files)?;
    let md = table.to_markdown();
    if let Some(p) = &a.markdown {
        write_file(p, &md)?;
    }
    print!("{md}");
    Ok(ExitCode::SUCCESS)
}

fn gdsm_check(a: GdsmArgs, seed: u64) -> CliResult<ExitCode> {
    let rows = run_checks(&CheckConfig { seed, grid_points: a.grid, fit_samples: a.samples });
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:width$}  result  detail", "check");
    for r in &rows {
        println!("{:width$}  {:6}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", rows.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} checks failed", rows.len());
        Ok(ExitCode::from(2))
    }
}
