//! PGM (P5, maxval 255) export of generated images, plus the 8x8 montage.

use std::fs;
use std::io::Write;
use std::path::Path;

use trigan_core::tensor::Tensor;

use crate::CliError;

/// Affine map from [-1, 1] to 0..=255 with rounding; -1 -> 0, +1 -> 255.
pub fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<(), CliError> {
    assert_eq!(bytes.len(), width * height);
    let mut buf = Vec::with_capacity(bytes.len() + 32);
    write!(buf, "P5\n{width} {height}\n255\n").unwrap();
    buf.extend_from_slice(bytes);
    fs::write(path, buf).map_err(|e| CliError::new(format!("cannot write {}: {e}", path.display())))
}

/// One sample (index `idx` of an (N,1,H,W) batch) as PGM bytes.
pub fn sample_bytes(images: &Tensor, idx: usize) -> Vec<u8> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let stride = h * w;
    images.data()[idx * stride..(idx + 1) * stride]
        .iter()
        .map(|&v| to_byte(v))
        .collect()
}

/// 8x8 tile montage of up to 64 samples; missing tiles stay black.
pub fn montage_bytes(images: &Tensor) -> (usize, usize, Vec<u8>) {
    let n = images.shape()[0];
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let (grid_h, grid_w) = (8usize, 8usize);
    let mut out = vec![0u8; grid_h * h * grid_w * w];
    for t in 0..n.min(grid_h * grid_w) {
        let tile = sample_bytes(images, t);
        let (ty, tx) = (t / grid_w, t % grid_w);
        for r in 0..h {
            let dst = (ty * h + r) * grid_w * w + tx * w;
            out[dst..dst + w].copy_from_slice(&tile[r * w..(r + 1) * w]);
        }
    }
    (grid_w * w, grid_h * h, out)
}
