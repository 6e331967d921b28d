//! 8-bit grayscale export with per-image min/max scaling.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

/// Scaling of every exported file, keyed by file name.
pub type Sidecar = BTreeMap<String, Range>;

pub fn to_gray(values: &[f64], h: usize, w: usize) -> (GrayImage, Range) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        let level = if span > 0.0 { (255.0 * (v - min) / span).round() } else { 0.0 };
        Luma([level as u8])
    });
    (img, Range { min, max })
}

pub fn export(dir: &Path, name: &str, values: &[f64], h: usize, w: usize, sidecar: &mut Sidecar) -> CliResult<()> {
    let (img, range) = to_gray(values, h, w);
    img.save(dir.join(name))?;
    sidecar.insert(name.to_string(), range);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_spans_full_range() {
        let (img, r) = to_gray(&[1.0, 2.0, 3.0, 5.0], 2, 2);
        assert_eq!(r, Range { min: 1.0, max: 5.0 });
        assert_eq!(img.get_pixel(0, 0).0, [0]);
        assert_eq!(img.get_pixel(1, 1).0, [255]);
        assert_eq!(img.get_pixel(0, 1).0, [128]);
        assert_eq!(img.get_pixel(1, 0).0, [64]);
    }

    #[test]
    fn constant_image_is_black() {
        let (img, _) = to_gray(&[4.0; 6], 2, 3);
        assert!(img.pixels().all(|p| p.0 == [0]));
        assert_eq!(img.dimensions(), (3, 2));
    }
}
