//! Pages, masks, PGM I/O, patch tiling, datasets and synthetic domains.

mod dataset;
mod patches;
mod pgm;
mod synth;

pub use dataset::{load_dataset, load_ground_truth, Dataset, Role, Split};
pub use patches::{assemble, split_patches, PatchGrid};
pub use pgm::{read_pgm, write_pgm};
pub use synth::{make_synthetic_domains, render_page, DomainStyle, SyntheticDomains, SYNTH_VALIDATION_FRACTION};

use crate::error::{Error, Result};

/// Image with values in `[0, 1]`, stored channel-planar (`[c][h][w]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Page {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Page {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!("pages have 1 or 3 channels, got {channels}")));
        }
        if width * height * channels != pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} page needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Page { width, height, channels, pixels })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// BT.601 luma for colour pages; grayscale pages are returned as is.
    pub fn to_gray(&self) -> Page {
        if self.channels == 1 {
            return self.clone();
        }
        let plane = self.width * self.height;
        let (r, rest) = self.pixels.split_at(plane);
        let (g, b) = rest.split_at(plane);
        let pixels = (0..plane).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
        Page { width: self.width, height: self.height, channels: 1, pixels }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Per-pixel foreground probability for one page.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(ProbabilityMap { width, height, values })
    }

    /// 8-bit grayscale page with `p -> round(255 p)`.
    pub fn to_page(&self) -> Page {
        Page {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.values.clone(),
        }
    }
}

/// Two-class mask, `true` = foreground ink.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

pub type GroundTruth = BinaryMask;

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width * height != bits.len() {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    /// Foreground where the (grayscale) page value is at least 128/255.
    pub fn from_page(page: &Page) -> BinaryMask {
        let gray = page.to_gray();
        BinaryMask {
            width: gray.width,
            height: gray.height,
            bits: gray.pixels.iter().map(|&v| (v * 255.0).round() >= 128.0).collect(),
        }
    }

    /// Foreground as 1.0, background as 0.0.
    pub fn to_page(&self) -> Page {
        Page {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }
}
