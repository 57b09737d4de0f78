//! JSON-lines study files with PNG views.
//!
//! One object per line:
//! `{"study_id", "image_paths": [...], "report", "mesh": [...], "split"}`.
//! Image paths are relative to the directory holding the dataset file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use damper_core::corpus::{Image, PatientRecord, Split};
use damper_core::tensor::Matrix;
use image::imageops::FilterType;
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{DamperError, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyLine {
    pub study_id: String,
    pub image_paths: Vec<String>,
    #[serde(default)]
    pub report: String,
    #[serde(default)]
    pub mesh: Vec<String>,
    pub split: String,
    /// Optional names for the views, parallel to `image_paths`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub view_labels: Vec<String>,
}

/// Reads every study, rescaling views to `side`×`side`. Without a `side`
/// the first view's width is used for the whole file.
pub fn load_dataset(path: &Path, side: Option<usize>) -> Result<Vec<PatientRecord>> {
    if side == Some(0) {
        return Err(DamperError::Usage("image size must be at least 1".into()));
    }
    let mut side = side;
    let file = fs::File::open(path).map_err(|e| DamperError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DamperError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| DamperError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let study: StudyLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let split = Split::parse(&study.split).ok_or_else(|| parse_err(format!("unknown split `{}`", study.split)))?;
        let views = study
            .image_paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let label = study.view_labels.get(i).cloned().unwrap_or_else(|| format!("view{i}"));
                read_view(&base.join(p), &mut side, &label)
            })
            .collect::<Result<Vec<_>>>()?;
        let record = PatientRecord {
            study_id: study.study_id,
            views,
            report: study.report,
            mesh_terms: study.mesh,
            split,
        }
        .validated()?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(DamperError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: "no studies".into(),
        });
    }
    Ok(records)
}

fn read_view(path: &Path, side: &mut Option<usize>, label: &str) -> Result<Image> {
    let img_err = |reason: String| DamperError::Image {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = image::open(path).map_err(|e| img_err(e.to_string()))?.into_luma8();
    let side = *side.get_or_insert(decoded.width() as usize);
    let gray = if decoded.width() as usize == side && decoded.height() as usize == side {
        decoded
    } else {
        image::imageops::resize(&decoded, side as u32, side as u32, FilterType::Triangle)
    };
    let data = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    let pixels = Matrix::new(side, side, data)?;
    Ok(Image::new(pixels, label).map_err(|e| img_err(e.to_string()))?)
}

fn write_view(path: &Path, img: &Image) -> Result<()> {
    let side = img.side() as u32;
    let px = img.pixels();
    let gray = GrayImage::from_fn(side, side, |x, y| {
        Luma([(px.get(y as usize, x as usize) * 255.0).round() as u8])
    });
    gray.save(path).map_err(|e| DamperError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `dir/dataset.jsonl` plus `dir/images/*.png`; returns the dataset path.
pub fn write_dataset(dir: &Path, records: &[PatientRecord]) -> Result<PathBuf> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| DamperError::io(&images, e))?;
    let path = dir.join(DATASET_FILE);
    let mut out = Vec::new();
    for r in records {
        let mut image_paths = Vec::with_capacity(r.views.len());
        for (i, view) in r.views.iter().enumerate() {
            let name = format!("{}_{i}.png", r.study_id);
            write_view(&images.join(&name), view)?;
            image_paths.push(format!("{IMAGE_DIR}/{name}"));
        }
        let line = StudyLine {
            study_id: r.study_id.clone(),
            image_paths,
            report: r.report.clone(),
            mesh: r.mesh_terms.clone(),
            split: r.split.as_str().into(),
            view_labels: r.views.iter().map(|v| v.view_label.clone()).collect(),
        };
        serde_json::to_writer(&mut out, &line).expect("plain struct serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| DamperError::io(&path, e))?;
    f.write_all(&out).map_err(|e| DamperError::io(&path, e))?;
    Ok(path)
}
