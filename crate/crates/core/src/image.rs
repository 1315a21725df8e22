//! RGB float images and the raw `RF32` file format.
//!
//! An `RF32` file is the ASCII header `RF32 <width> <height> 3\n` followed by
//! `width·height·3` little-endian `f32` values, row-major with interleaved
//! RGB and the top row first.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::diffgraph::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data has {len} values, expected {expected}")]
    BadLength { len: usize, expected: usize },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("image dimensions {0}x{1} do not match {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed RF32 header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        let expected = width * height * 3;
        if data.len() != expected || width == 0 || height == 0 {
            return Err(ImageError::BadLength {
                len: data.len(),
                expected,
            });
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(bad));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Channel-major `[3, height, width]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let data = (0..3).flat_map(|c| self.channel(c)).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent image shape")
    }

    pub fn same_size(&self, other: &Image) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn write_rf32<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "RF32 {} {} 3\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&bytes)
    }

    pub fn read_rf32<R: Read>(input: R) -> Result<Self, ImageError> {
        let mut reader = BufReader::new(input);
        let mut header = Vec::new();
        reader.read_until(b'\n', &mut header)?;
        let text = String::from_utf8_lossy(&header);
        let fields: Vec<&str> = text.trim_end_matches('\n').split(' ').collect();
        let bad = || ImageError::BadHeader(text.trim_end().to_string());
        if fields.len() != 4 || fields[0] != "RF32" || fields[3] != "3" {
            return Err(bad());
        }
        let width: usize = fields[1].parse().map_err(|_| bad())?;
        let height: usize = fields[2].parse().map_err(|_| bad())?;
        let n = width * height * 3;
        let mut bytes = vec![0u8; n * 4];
        reader.read_exact(&mut bytes)?;
        let mut extra = [0u8; 1];
        if reader.read(&mut extra)? != 0 {
            return Err(ImageError::BadHeader(
                "trailing bytes after pixel data".into(),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(width, height, data)
    }

    pub fn save_rf32(&self, path: &Path) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = io::BufWriter::new(file);
        self.write_rf32(&mut out)?;
        out.flush()
    }

    pub fn load_rf32(path: &Path) -> Result<Self, ImageError> {
        Self::read_rf32(std::fs::File::open(path)?)
    }

    /// 8-bit interleaved RGB, for previews.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rf32_header_and_layout() {
        let mut img = Image::filled(2, 1, [0.0, 0.0, 0.0]);
        img.set_pixel(1, 0, [0.25, 0.5, 1.0]);
        let mut buf = Vec::new();
        img.write_rf32(&mut buf).unwrap();
        assert!(buf.starts_with(b"RF32 2 1 3\n"));
        assert_eq!(buf.len(), 11 + 6 * 4);
        let px = &buf[11 + 12..11 + 16];
        assert_eq!(f32::from_le_bytes(px.try_into().unwrap()), 0.25);
        assert_eq!(Image::read_rf32(&buf[..]).unwrap(), img);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(Image::read_rf32(&b"RF64 1 1 3\n"[..]).is_err());
        assert!(Image::read_rf32(&b"RF32 1 1 3\n\0\0"[..]).is_err());
        let mut buf = Vec::new();
        Image::filled(1, 1, [0.5; 3]).write_rf32(&mut buf).unwrap();
        buf.push(0);
        assert!(Image::read_rf32(&buf[..]).is_err());
    }

    #[test]
    fn validates_range_and_length() {
        assert!(matches!(
            Image::new(1, 1, vec![0.0, 1.5, 0.0]),
            Err(ImageError::OutOfRange(_))
        ));
        assert!(Image::new(2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn chw_layout() {
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.to_chw().data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }
}
