//! On-disk datasets: one subdirectory per class, one image file per item.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::model::ImageShape;

use super::{ImageRecord, ItemSource, LabeledDataset};

/// Load a class-per-directory tree. Classes and files are ordered
/// lexicographically; images are resized to `shape` and scaled to
/// `[0, 1]`.
pub fn load_folder_dataset(root: &Path, shape: ImageShape) -> Result<LabeledDataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|_| Error::MissingRoot(root.to_path_buf()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    class_dirs.sort();

    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut items = Vec::with_capacity(class_dirs.len());
    for dir in &class_dirs {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyClassDir(dir.clone()));
        }
        let mut records = Vec::with_capacity(files.len());
        for f in files {
            records.push(ImageRecord {
                pixels: decode_image(&f, shape)?,
                source: ItemSource::Path(f),
            });
        }
        classes.push(class_name);
        items.push(records);
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "folder".to_string());
    LabeledDataset::new(name, shape, classes, items)
}

fn decode_image(path: &Path, shape: ImageShape) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let resized = img.resize_exact(
        shape.width as u32,
        shape.height as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array3::zeros((shape.channels, shape.height, shape.width));
    match shape.channels {
        1 => {
            let gray = resized.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
        }
        3 => {
            let rgb = resized.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
        }
        other => {
            return Err(Error::InvalidConfig(vec![format!(
                "folder datasets support 1 or 3 channels, got {other}"
            )]))
        }
    }
    Ok(out)
}
