//! 8-bit binary PGM (P5) images, used for probability maps and heatmaps.

use std::fs;
use std::path::Path;

use crate::crf_model::GridDims;
use crate::error::{shape_err, Error, Result};
use crate::metrics::UncertaintyMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Maximum gray value declared in the header, 1..=255.
    pub max_val: u8,
    /// Row-major.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, max_val: u8, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return shape_err(format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len()));
        }
        if max_val == 0 {
            return Err(Error::InvalidArgument("PGM max value must be positive".into()));
        }
        if let Some(p) = pixels.iter().find(|&&p| p > max_val) {
            return Err(Error::InvalidArgument(format!("pixel value {p} exceeds max value {max_val}")));
        }
        Ok(Self { width, height, max_val, pixels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.max_val).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut p = Header { bytes, pos: 0 };
        let magic = p.token()?;
        match magic.as_str() {
            "P5" => {}
            "P2" => return Err(Error::Format("unsupported PGM variant P2 (ASCII); only binary P5 is supported".into())),
            other => return Err(Error::Format(format!("unsupported PGM variant '{other}'; only binary P5 is supported"))),
        }
        let width = p.number("width")?;
        let height = p.number("height")?;
        let max_val = p.number("max value")?;
        if max_val == 0 || max_val > 255 {
            return Err(Error::Format(format!("PGM max value {max_val} unsupported; only 8-bit images are")));
        }
        // exactly one whitespace byte separates the header from the raster
        if !p.bytes.get(p.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Format("missing whitespace after PGM header".into()));
        }
        let start = p.pos + 1;
        let len = width.checked_mul(height).ok_or_else(|| Error::Format("PGM size overflows".into()))?;
        let raster = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::Format(format!("truncated PGM raster: expected {len} bytes")))?;
        if start + len != bytes.len() {
            return Err(Error::Format("trailing data after PGM raster".into()));
        }
        GrayImage::new(width, height, max_val as u8, raster.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse().map_err(|_| Error::Format(format!("bad PGM {what} '{tok}'")))
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    GrayImage::from_bytes(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    fs::write(path, image.to_bytes())?;
    Ok(())
}

/// Image extent for a grid: the last axis is the width; leading axes are
/// stacked vertically (3D volumes become a column of slices).
pub fn image_extent(dims: &GridDims) -> (usize, usize) {
    let axes = dims.axes();
    let width = *axes.last().expect("grid has at least one axis");
    (width, dims.n_voxels() / width)
}

/// Linear map of `[0, log2 m]` bits onto `[0, 255]`.
pub fn entropy_heatmap(u: &UncertaintyMap, dims: &GridDims) -> Result<GrayImage> {
    if u.len() != dims.n_voxels() {
        return shape_err(format!("uncertainty map has {} voxels, grid has {}", u.len(), dims.n_voxels()));
    }
    let hi = u.max_entropy();
    let pixels = u
        .values()
        .iter()
        .map(|&h| ((h / hi).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (width, height) = image_extent(dims);
    GrayImage::new(width, height, 255, pixels)
}

/// Per-label probability images to an `N x m` probability table. Each pixel
/// is scaled by its image's max value and every voxel is renormalised to sum
/// to one; all-zero voxels become uniform.
pub fn probabilities_from_pgms(images: &[GrayImage], n_voxels: usize) -> Result<Vec<f64>> {
    let m = images.len();
    if m < 2 {
        return Err(Error::InvalidArgument("need one probability image per label (at least 2)".into()));
    }
    for (l, img) in images.iter().enumerate() {
        if img.pixels.len() != n_voxels {
            return shape_err(format!("probability image {l} has {} pixels, grid has {n_voxels}", img.pixels.len()));
        }
    }
    let mut probs = vec![0.0; n_voxels * m];
    for i in 0..n_voxels {
        let row = &mut probs[i * m..(i + 1) * m];
        for (l, img) in images.iter().enumerate() {
            row[l] = img.pixels[i] as f64 / img.max_val as f64;
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        } else {
            row.fill(1.0 / m as f64);
        }
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mean_field::MarginalField;
    use crate::metrics::entropy_map;

    #[test]
    fn zero_image_round_trips() {
        let img = GrayImage::new(2, 2, 255, vec![0; 4]).unwrap();
        assert_eq!(GrayImage::from_bytes(&img.to_bytes()).unwrap(), img);
        let grad = GrayImage::new(3, 2, 200, vec![0, 10, 20, 100, 150, 200]).unwrap();
        assert_eq!(GrayImage::from_bytes(&grad.to_bytes()).unwrap(), grad);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1 # w h\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = GrayImage::from_bytes(&bytes).unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
    }

    #[test]
    fn unsupported_variants() {
        let err = GrayImage::from_bytes(b"P2\n2 2\n255\n0 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("P2"));
        assert!(GrayImage::from_bytes(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(GrayImage::from_bytes(b"P5\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn uniform_four_label_entropy_is_white() {
        let q = MarginalField::new(4, 4, vec![0.25; 16]).unwrap();
        let img = entropy_heatmap(&entropy_map(&q), &GridDims::new(&[2, 2]).unwrap()).unwrap();
        assert_eq!(img.pixels, vec![255; 4]);
        assert_eq!((img.width, img.height), (2, 2));
    }

    #[test]
    fn volume_extent_stacks_slices() {
        assert_eq!(image_extent(&GridDims::new(&[2, 3, 4]).unwrap()), (4, 6));
        assert_eq!(image_extent(&GridDims::new(&[5]).unwrap()), (5, 1));
    }

    #[test]
    fn probability_images_are_normalised() {
        let a = GrayImage::new(3, 1, 255, vec![255, 0, 0]).unwrap();
        let b = GrayImage::new(3, 1, 255, vec![0, 85, 0]).unwrap();
        let c = GrayImage::new(3, 1, 255, vec![255, 170, 0]).unwrap();
        let p = probabilities_from_pgms(&[a, b, c], 3).unwrap();
        assert_eq!(&p[0..3], &[0.5, 0.0, 0.5]);
        assert!((p[4] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(&p[6..9], &[1.0 / 3.0; 3]);
    }
}
