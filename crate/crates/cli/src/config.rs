//! `--config` file: flat TOML keys named like the long flags (hyphens or
//! underscores). Anything given on the command line wins.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub force: Option<bool>,

    // synth
    pub clean: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub clip: Option<bool>,

    // denoise
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub denoiser: Option<String>,
    pub patch: Option<usize>,
    pub overlap: Option<usize>,
    #[serde(alias = "overlap_frac")]
    pub overlap_frac: Option<f64>,
    pub blend: Option<String>,
    pub edge: Option<String>,
    pub adaptive: Option<bool>,
    #[serde(alias = "self_ensemble")]
    pub self_ensemble: Option<bool>,
    pub multiscale: Option<StringList>,
    #[serde(alias = "quantize_before_merge")]
    pub quantize_before_merge: Option<bool>,
    pub fuse: Option<String>,
    #[serde(alias = "canny_sigma")]
    pub canny_sigma: Option<f64>,
    #[serde(alias = "canny_low")]
    pub canny_low: Option<f64>,
    #[serde(alias = "canny_high")]
    pub canny_high: Option<f64>,
    pub ensemble: Option<StringList>,
    #[serde(alias = "ensemble_with")]
    pub ensemble_with: Option<Vec<PathBuf>>,
    pub loss: Option<String>,
    pub reference: Option<PathBuf>,

    // eval
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub name: Option<String>,
    pub csv: Option<PathBuf>,
    pub markdown: Option<PathBuf>,
}

/// Either `"a,b,c"` or `["a", "b", "c"]`; numbers are accepted too.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StringList {
    One(String),
    Many(Vec<toml::Value>),
}

impl StringList {
    pub fn joined(&self) -> String {
        match self {
            StringList::One(s) => s.clone(),
            StringList::Many(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

pub fn load(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}
