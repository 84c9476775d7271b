use crate::error::{bail, Result};

/// Toy latent image, `height × width × channels`, stored row-major with the
/// channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class: u32,
    pub data: Vec<f64>,
}

impl LatentImage {
    pub fn new(height: usize, width: usize, channels: usize, class: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            bail!(Dimension, "latent {height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Data, "latent contains non-finite values");
        }
        Ok(Self {
            height,
            width,
            channels,
            class,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Binary PGM (P5) of one channel, min-max scaled to 0..=255.
    pub fn to_pgm(&self, channel: usize) -> Vec<u8> {
        let vals: Vec<f64> = (0..self.height * self.width)
            .map(|p| self.data[p * self.channels + channel])
            .collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(vals.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8));
        out
    }
}
