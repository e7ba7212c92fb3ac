//! Binary portable pixmaps (P5 grayscale, P6 RGB), 8-bit. Dependency-free
//! image output that hashes stably and opens anywhere.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header(tag: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{tag}\n{width} {height}\n255\n").into_bytes()
}

/// P5: one byte per pixel, row-major.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "pgm {width}×{height} needs {} bytes, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = header("P5", width, height);
    out.extend_from_slice(pixels);
    Ok(out)
}

/// P6: three bytes per pixel, row-major.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::InvalidArgument(format!(
            "ppm {width}×{height} needs {} bytes, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    let mut out = header("P6", width, height);
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Quantize a [3,H,W] image tensor in [0,1] to interleaved RGB bytes.
pub fn image_to_rgb(img: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::shape("image_to_rgb", format!("expects C×H×W, got {:?}", img.shape())));
    };
    if c != 3 {
        return Err(Error::shape("image_to_rgb", format!("expects 3 channels, got {c}")));
    }
    let d = img.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = d[ch * h * w + y * w + x].clamp(0.0, 1.0);
                rgb.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(rgb)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_pgm(width, height, pixels)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let bytes = encode_ppm(width, height, rgb)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let bytes = encode_pgm(2, 3, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(&bytes[..9], b"P5\n2 3\n25");
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 2, 3, 4, 5]);
        assert!(encode_pgm(2, 3, &[0; 5]).is_err());
    }

    #[test]
    fn ppm_layout() {
        let bytes = encode_ppm(1, 2, &[10, 20, 30, 40, 50, 60]).unwrap();
        assert!(bytes.starts_with(b"P6\n1 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[10, 20, 30, 40, 50, 60]);
        assert!(encode_ppm(2, 2, &[0; 3]).is_err());
    }

    #[test]
    fn rgb_quantization_interleaves_and_clamps() {
        // 3 channels × 1×2: R = [0, 2.0 (clamps to 1)], G = [0.5, 0.25], B = [1, −1 (clamps to 0)]
        let img = Tensor::new(vec![3, 1, 2], vec![0.0, 2.0, 0.5, 0.25, 1.0, -1.0]).unwrap();
        let rgb = image_to_rgb(&img).unwrap();
        assert_eq!(rgb, vec![0, 128, 255, 255, 64, 0]);
        assert!(image_to_rgb(&Tensor::zeros(vec![1, 2, 2])).is_err());
    }
}
