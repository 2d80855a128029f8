//! Image tensors, lesion heatmaps, and their binary file format.
//!
//! A tensor file is a 12-byte header of three little-endian `u32`
//! (height, width, channels) followed by `height * width * channels`
//! little-endian `f32` values in row-major order (channel fastest).
//! Heatmap files use the same layout with `channels = 1` and one trailing
//! little-endian `f32` holding the detector confidence.

use std::path::Path;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::format(format!(
                "tensor payload has {} values, expected {height}*{width}*{channels} = {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "tensor value at index {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += f64::from(*v);
            }
        }
        let n = self.pixels() as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        write_header(&mut out, self.height, self.width, self.channels);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, w, c) = read_header(bytes)?;
        let n = h * w * c;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(Error::format(format!(
                "tensor header declares {h}x{w}x{c} = {n} values but payload holds {} bytes",
                body.len()
            )));
        }
        Self::new(h, w, c, decode_f32s(body))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionHeatmap {
    height: usize,
    width: usize,
    mask: Vec<f32>,
    confidence: f32,
}

impl LesionHeatmap {
    pub fn new(height: usize, width: usize, mask: Vec<f32>, confidence: f32) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::format(format!(
                "heatmap mask has {} values, expected {height}*{width}",
                mask.len()
            )));
        }
        if let Some(i) = mask.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "heatmap mask value {} at index {i} is outside [0, 1]",
                mask[i]
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::validation(format!(
                "heatmap confidence {confidence} is outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            mask,
            confidence,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32, confidence: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], confidence)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    pub fn confidence(&self) -> f32 {
        self.confidence
    }

    pub fn is_empty_mask(&self) -> bool {
        self.mask.iter().all(|&m| m == 0.0)
    }

    pub fn matches(&self, image: &ImageTensor) -> bool {
        self.height == image.height() && self.width == image.width()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.mask.len() + 1));
        write_header(&mut out, self.height, self.width, 1);
        for v in &self.mask {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.confidence.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, w, c) = read_header(bytes)?;
        if c != 1 {
            return Err(Error::format(format!(
                "heatmap must have 1 channel, header says {c}"
            )));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * (h * w + 1) {
            return Err(Error::format(format!(
                "heatmap header declares {h}x{w} but payload holds {} bytes",
                body.len()
            )));
        }
        let mut values = decode_f32s(body);
        let confidence = values.pop().expect("payload length checked above");
        Self::new(h, w, values, confidence)
    }
}

fn write_header(out: &mut Vec<u8>, h: usize, w: usize, c: usize) {
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!(
            "tensor file is {} bytes, shorter than the 12-byte header",
            bytes.len()
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    Ok((dim(0), dim(1), dim(2)))
}

fn decode_f32s(body: &[u8]) -> Vec<f32> {
    body.chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageTensor::from_bytes(&bytes)
}

pub fn write_tensor(path: &Path, image: &ImageTensor) -> Result<()> {
    std::fs::write(path, image.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap(path: &Path) -> Result<LesionHeatmap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LesionHeatmap::from_bytes(&bytes)
}

pub fn write_heatmap(path: &Path, heatmap: &LesionHeatmap) -> Result<()> {
    std::fs::write(path, heatmap.to_bytes()).map_err(|e| Error::io(path, e))
}
