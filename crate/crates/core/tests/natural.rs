use std::path::PathBuf;

use denoise_forge::denoisers::DenoiserSpec;
use denoise_forge::io::load_png;
use denoise_forge::metrics::psnr;
use denoise_forge::noise::{add_awgn, estimate_sigma, NoiseSpec};
use denoise_forge::Denoiser as _;

fn natural(name: &str) -> denoise_forge::ImageF {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural").join(name);
    load_png(p).unwrap().to_float()
}

const IMAGES: [&str; 5] = ["astronaut.png", "brick.png", "camera.png", "chelsea.png", "coffee.png"];

#[test]
fn gaussian_gains_two_db_on_natural_images() {
    for (k, name) in IMAGES.iter().enumerate() {
        let clean = natural(name);
        let noisy = add_awgn(&clean, &NoiseSpec { sigma: 50.0, clip: true, seed: k as u64 }).unwrap();
        let out = DenoiserSpec::Gaussian { sigma: 1.5 }.denoise(&noisy).unwrap();
        let before = psnr(&noisy.to_u8(), &clean.to_u8()).unwrap();
        let after = psnr(&out.to_u8(), &clean.to_u8()).unwrap();
        println!("{name}: {before:.2} -> {after:.2} dB");
        assert!(after >= before + 2.0, "{name}: {before} -> {after}");
    }
}

#[test]
fn estimator_on_natural_images() {
    for (k, name) in IMAGES.iter().enumerate() {
        let clean = natural(name);
        let noisy = add_awgn(&clean, &NoiseSpec { sigma: 50.0, clip: false, seed: 100 + k as u64 }).unwrap();
        let est = estimate_sigma(&noisy).unwrap();
        println!("{name}: estimate {est:.2}");
        assert!((est - 50.0).abs() <= 0.15 * 50.0, "{name}: {est}");
    }
}
