//! Binary PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `[height, width, 3]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("pixel buffer matches dimensions")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a binary PPM (P6) file".into());
        }
        let mut num = |what: &str| -> std::result::Result<usize, String> {
            token()?.parse().map_err(|_| format!("bad {what}"))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format!("unsupported header {width}x{height} maxval {maxval}"));
        }
        // single whitespace byte separates header and raster
        let data = &bytes[pos + 1..];
        let n = width * height * 3;
        let pixels = if maxval < 256 {
            if data.len() < n {
                return Err("truncated raster".into());
            }
            data[..n]
                .iter()
                .map(|&v| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
                .collect()
        } else {
            if data.len() < 2 * n {
                return Err("truncated raster".into());
            }
            data[..2 * n]
                .chunks_exact(2)
                .map(|c| {
                    let v = u16::from_be_bytes([c[0], c[1]]) as u32;
                    ((v * 255 + maxval as u32 / 2) / maxval as u32) as u8
                })
                .collect()
        };
        Ok(RgbImage { width, height, pixels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        RgbImage::decode(&bytes).map_err(|message| Error::Image {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.put(0, 0, [255, 0, 10]);
        img.put(2, 1, [1, 2, 3]);
        let back = RgbImage::decode(&img.encode()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_rejects() {
        let mut bytes = b"P6\n# a comment\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(RgbImage::decode(&bytes).unwrap().get(0, 0), [9, 8, 7]);
        assert!(RgbImage::decode(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(RgbImage::decode(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn tensor_is_normalized() {
        let mut img = RgbImage::new(1, 1);
        img.put(0, 0, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }
}
