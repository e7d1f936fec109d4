//! Non-overlapping tiling with edge-replication padding.

use super::{Page, ProbabilityMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
    /// Unpadded page size.
    pub width: usize,
    pub height: usize,
    /// Row-major `[c, h, w]` patches.
    pub patches: Vec<Tensor>,
}

/// Tiles `page` into `h×w` patches, padding right/bottom edges by
/// replicating the last column/row.
pub fn split_patches(page: &Page, h: usize, w: usize) -> PatchGrid {
    assert!(h >= 1 && w >= 1, "patch sides must be positive");
    let rows = page.height.div_ceil(h);
    let cols = page.width.div_ceil(w);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = Vec::with_capacity(page.channels * h * w);
            for ch in 0..page.channels {
                for y in 0..h {
                    let sy = (r * h + y).min(page.height - 1);
                    for x in 0..w {
                        let sx = (c * w + x).min(page.width - 1);
                        data.push(page.at(ch, sy, sx));
                    }
                }
            }
            patches.push(Tensor::new(vec![page.channels, h, w], data).expect("patch shape"));
        }
    }
    PatchGrid {
        patch: (h, w),
        rows,
        cols,
        pad_right: cols * w - page.width,
        pad_bottom: rows * h - page.height,
        width: page.width,
        height: page.height,
        patches,
    }
}

impl PatchGrid {
    /// Same geometry with the patches replaced (e.g. by predictions).
    pub fn with_patches(&self, patches: Vec<Tensor>) -> PatchGrid {
        PatchGrid { patches, ..self.clone_geometry() }
    }

    fn clone_geometry(&self) -> PatchGrid {
        PatchGrid {
            patch: self.patch,
            rows: self.rows,
            cols: self.cols,
            pad_right: self.pad_right,
            pad_bottom: self.pad_bottom,
            width: self.width,
            height: self.height,
            patches: Vec::new(),
        }
    }

    fn channels(&self) -> Result<usize> {
        if self.patches.len() != self.rows * self.cols {
            return Err(Error::InvalidArgument(format!(
                "grid of {}x{} needs {} patches, have {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.patches.len()
            )));
        }
        let (h, w) = self.patch;
        let channels = self.patches.first().map_or(1, |p| p.shape()[0]);
        if let Some((i, p)) = self
            .patches
            .iter()
            .enumerate()
            .find(|(_, p)| p.shape() != [channels, h, w])
        {
            return Err(Error::shape(
                format!("patch {i}"),
                format!("{:?}, expected {:?}", p.shape(), [channels, h, w]),
            ));
        }
        Ok(channels)
    }

    /// Reassembles the patches into a page and crops the padding.
    pub fn assemble_page(&self) -> Result<Page> {
        let channels = self.channels()?;
        let (h, w) = self.patch;
        let mut pixels = vec![0.0; channels * self.width * self.height];
        for (idx, patch) in self.patches.iter().enumerate() {
            let (r, c) = (idx / self.cols, idx % self.cols);
            let data = patch.data();
            for ch in 0..channels {
                for y in 0..h {
                    let py = r * h + y;
                    if py >= self.height {
                        break;
                    }
                    let x_end = w.min(self.width - c * w);
                    let src = &data[(ch * h + y) * w..(ch * h + y) * w + x_end];
                    let dst_start = (ch * self.height + py) * self.width + c * w;
                    pixels[dst_start..dst_start + x_end].copy_from_slice(src);
                }
            }
        }
        Page::new(self.width, self.height, channels, pixels)
    }

    pub fn assemble(&self) -> Result<ProbabilityMap> {
        assemble(self)
    }
}

/// Reassembles a grid of single-channel maps.
pub fn assemble(grid: &PatchGrid) -> Result<ProbabilityMap> {
    if grid.channels()? != 1 {
        return Err(Error::shape("assemble", "probability maps have one channel"));
    }
    let page = grid.assemble_page()?;
    ProbabilityMap::new(page.width, page.height, page.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Page {
        Page::gray(w, h, (0..w * h).map(|i| i as f64 / (w * h) as f64).collect()).unwrap()
    }

    #[test]
    fn exact_tiling_has_no_padding() {
        let g = split_patches(&ramp(512, 512), 256, 256);
        assert_eq!((g.patches.len(), g.pad_right, g.pad_bottom), (4, 0, 0));
    }

    #[test]
    fn ragged_pages_are_padded() {
        let g = split_patches(&ramp(300, 300), 256, 256);
        assert_eq!((g.patches.len(), g.pad_right, g.pad_bottom), (4, 212, 212));
        let g = split_patches(&ramp(10, 10), 32, 32);
        assert_eq!((g.patches.len(), g.pad_right, g.pad_bottom), (1, 22, 22));
        // Edge replication: the padded corner repeats the last pixel.
        assert_eq!(g.patches[0].data()[32 * 32 - 1], ramp(10, 10).pixels[99]);
    }

    #[test]
    fn single_patch_grid_is_cropped() {
        let page = ramp(5, 3);
        let g = split_patches(&page, 8, 8);
        assert_eq!(g.assemble().unwrap().values, page.pixels);
    }

    #[test]
    fn block_constant_placement() {
        let g = split_patches(&ramp(4, 4), 2, 2);
        let patches = (0..4).map(|i| Tensor::full(&[1, 2, 2], i as f64)).collect();
        let map = g.with_patches(patches).assemble().unwrap();
        #[rustfmt::skip]
        let expected = vec![
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
            2.0, 2.0, 3.0, 3.0,
            2.0, 2.0, 3.0, 3.0,
        ];
        assert_eq!(map.values, expected);
    }

    #[test]
    fn missing_patch_is_an_error() {
        let mut g = split_patches(&ramp(4, 4), 2, 2);
        g.patches.pop();
        assert!(g.assemble().is_err());
    }

    proptest! {
        #[test]
        fn split_assemble_round_trip(w in 1usize..70, h in 1usize..70, ph in 1usize..33, pw in 1usize..33, colour in any::<bool>()) {
            let c = if colour { 3 } else { 1 };
            let px = (0..w * h * c).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
            let page = Page::new(w, h, c, px).unwrap();
            let back = split_patches(&page, ph, pw).assemble_page().unwrap();
            prop_assert_eq!(back, page);
        }
    }
}
