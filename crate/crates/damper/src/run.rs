//! Flat `key = value` run configuration and per-run output directories.

use std::fs;
use std::path::{Path, PathBuf};

use damper_core::config::{fnv1a64, TrainConfig, CONFIG_KEYS};
use damper_core::corpus::Split;

use crate::error::{DamperError, Result};

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "DAMPER_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.txt";

/// Keys a run accepts on top of the training keys.
pub const RUN_KEYS: [&str; 4] = ["data", "output_root", "image_size", "split"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub output_root: PathBuf,
    /// Side views are rescaled to; `None` keeps the first view's size.
    pub image_size: Option<usize>,
    /// Split to generate or evaluate; `None` means every study.
    pub split: Option<Split>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let output_root = std::env::var_os(OUTPUT_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        Self {
            train: TrainConfig::default(),
            data: None,
            output_root,
            image_size: None,
            split: Some(Split::Test),
        }
    }
}

pub fn parse_split(v: &str) -> Result<Option<Split>> {
    if v == "all" {
        return Ok(None);
    }
    Split::parse(v)
        .map(Some)
        .ok_or_else(|| DamperError::Usage(format!("split: expected train, val, test or all, got `{v}`")))
}

fn split_name(s: Option<Split>) -> &'static str {
    s.map(Split::as_str).unwrap_or("all")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_root" => self.output_root = PathBuf::from(v),
            "image_size" => {
                self.image_size = match v {
                    "" | "native" => None,
                    _ => Some(v.parse().ok().filter(|&n: &usize| n > 0).ok_or_else(|| {
                        DamperError::Usage(format!("image_size: expected a positive integer, got `{v}`"))
                    })?),
                }
            }
            "split" => self.split = parse_split(v)?,
            _ if CONFIG_KEYS.contains(&key) => self.train.set(key, v)?,
            _ => return Err(DamperError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        match key {
            "data" => Some(self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            "output_root" => Some(self.output_root.display().to_string()),
            "image_size" => Some(self.image_size.map(|n| n.to_string()).unwrap_or_else(|| "native".into())),
            "split" => Some(split_name(self.split).into()),
            _ => self.train.get(key),
        }
    }

    /// `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DamperError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| DamperError::Usage(format!("--set expects key=value, got `{kv}`")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| DamperError::io(path, e))?;
        self.apply_kv(&text)
    }

    /// Every key, run keys first.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in RUN_KEYS.iter().chain(CONFIG_KEYS.iter()) {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("known key")));
        }
        out
    }

    /// Hash of the resolved settings, used in run directory names.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_kv().as_bytes())
    }
}

/// Creates the run directory: `explicit` if given, otherwise
/// `<output_root>/<timestamp>-<hash>` with a numeric suffix on collision.
pub fn create_run_dir(explicit: Option<&Path>, output_root: &Path, hash: u64) -> Result<PathBuf> {
    if let Some(dir) = explicit {
        fs::create_dir_all(dir).map_err(|e| DamperError::io(dir, e))?;
        return Ok(dir.to_path_buf());
    }
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{:08x}", hash >> 32);
    fs::create_dir_all(output_root).map_err(|e| DamperError::io(output_root, e))?;
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = output_root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(DamperError::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

pub fn write_resolved_config(dir: &Path, text: &str) -> Result<PathBuf> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, text).map_err(|e| DamperError::io(&path, e))?;
    Ok(path)
}
