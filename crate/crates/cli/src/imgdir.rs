//! Directory dataset ingestion: one subdirectory per class holding PNG,
//! PGM/PNM or BMP images. Images are luminance-converted, bilinearly
//! resized (align-corners) and scaled to [-1, 1].

use std::fs;
use std::path::Path;

use trigan_core::data::{normalize_u8, resize_bilinear, Dataset, Provenance};
use trigan_core::tensor::Tensor;

use crate::CliError;

/// Rec. 601 luma from 8-bit RGB, rounded back to the 8-bit grid.
fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0)
}

pub fn load_image_dir(root: &Path, image_size: usize) -> Result<Dataset, CliError> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| CliError::new(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .map(|entry| entry.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(CliError::new(format!(
            "{} holds no class subdirectories",
            root.display()
        )));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0usize;
    for (class, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("class{class}"));
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| CliError::new(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for file in files {
            match load_one(&file, image_size) {
                Ok(pixels) => {
                    data.extend_from_slice(&pixels);
                    labels.push(class);
                    loaded += 1;
                }
                Err(e) => {
                    skipped += 1;
                    eprintln!("warning: skipping {}: {e}", file.display());
                }
            }
        }
        if loaded == 0 {
            return Err(CliError::new(format!(
                "class directory {} holds no readable images",
                dir.display()
            )));
        }
        class_names.push(name);
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} unreadable files under {}", root.display());
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 1, image_size, image_size], data).map_err(CliError::from)?;
    Dataset::new(images, labels, class_names, Provenance::Directory).map_err(CliError::from)
}

fn load_one(path: &Path, image_size: usize) -> Result<Vec<f64>, CliError> {
    let img = image::open(path).map_err(|e| CliError::new(format!("{e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut luma = Vec::with_capacity(w * h);
    for p in rgb.pixels() {
        luma.push(luminance(p.0[0], p.0[1], p.0[2]));
    }
    let resized = resize_bilinear(&luma, w, h, image_size, image_size);
    Ok(resized
        .into_iter()
        .map(|v| normalize_u8(v).clamp(-1.0, 1.0))
        .collect())
}
