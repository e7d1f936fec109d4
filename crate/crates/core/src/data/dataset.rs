use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_pgm, BinaryMask, Page};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Pages of one domain. Source pages carry ground truth; target pages never do.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: Role,
    pub names: Vec<String>,
    pub pages: Vec<Page>,
    pub ground_truth: Vec<BinaryMask>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Validates the role contract and assigns `round(n · validation_fraction)`
    /// pages to validation by a seeded shuffle.
    pub fn new(
        role: Role,
        names: Vec<String>,
        pages: Vec<Page>,
        ground_truth: Vec<BinaryMask>,
        validation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&validation_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must be in [0, 1], got {validation_fraction}"
            )));
        }
        if names.len() != pages.len() {
            return Err(Error::Dataset("one name per page required".into()));
        }
        match role {
            Role::Target if !ground_truth.is_empty() => {
                return Err(Error::Dataset("target datasets carry no ground truth".into()))
            }
            Role::Source if ground_truth.len() != pages.len() => {
                return Err(Error::Dataset("every source page needs ground truth".into()))
            }
            _ => {}
        }
        for ((name, page), gt) in names.iter().zip(&pages).zip(&ground_truth) {
            if (gt.width, gt.height) != (page.width, page.height) {
                return Err(Error::Dataset(format!(
                    "{name}: page is {}x{} but ground truth is {}x{}",
                    page.width, page.height, gt.width, gt.height
                )));
            }
        }
        let n = pages.len();
        let n_val = ((n as f64 * validation_fraction).round() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut splits = vec![Split::Train; n];
        for &i in &order[..n_val] {
            splits[i] = Split::Validation;
        }
        Ok(Dataset { role, names, pages, ground_truth, splits })
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        self.indices(Split::Validation)
    }
}

fn pgm_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_page(path: &Path) -> Result<Page> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Loads `<dir>/images/*.pgm` and, for sources, `<dir>/gt/*.pgm`.
/// Ground truth is foreground where the stored value is ≥ 128.
pub fn load_dataset(dir: &Path, role: Role, validation_fraction: f64, seed: u64) -> Result<Dataset> {
    let images = pgm_stems(&dir.join("images"))?;
    let mut names = Vec::with_capacity(images.len());
    let mut pages = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        names.push(stem.clone());
        pages.push(read_page(path)?);
    }
    let ground_truth = match role {
        Role::Target => Vec::new(),
        Role::Source => load_ground_truth(&dir.join("gt"), &names)?,
    };
    Dataset::new(role, names, pages, ground_truth, validation_fraction, seed)
}

/// Reads `<gt_dir>/<stem>.pgm` for every stem, failing with the full list
/// of missing stems.
pub fn load_ground_truth(gt_dir: &Path, stems: &[String]) -> Result<Vec<BinaryMask>> {
    let missing: Vec<&str> = stems
        .iter()
        .filter(|s| !gt_dir.join(format!("{s}.pgm")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("missing ground truth for: {}", missing.join(", "))));
    }
    stems
        .iter()
        .map(|s| read_page(&gt_dir.join(format!("{s}.pgm"))).map(|p| BinaryMask::from_page(&p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_pgm;

    fn write(dir: &Path, sub: &str, stem: &str, w: usize, h: usize, v: f64) {
        let d = dir.join(sub);
        fs::create_dir_all(&d).unwrap();
        let page = Page::gray(w, h, vec![v; w * h]).unwrap();
        fs::write(d.join(format!("{stem}.pgm")), write_pgm(&page)).unwrap();
    }

    fn source_dir(n: usize) -> tempfile::TempDir {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..n {
            write(tmp.path(), "images", &format!("p{i:02}"), 4, 3, 0.5);
            write(tmp.path(), "gt", &format!("p{i:02}"), 4, 3, 1.0);
        }
        tmp
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let tmp = source_dir(10);
        let a = load_dataset(tmp.path(), Role::Source, 0.2, 7).unwrap();
        assert_eq!((a.train_indices().len(), a.validation_indices().len()), (8, 2));
        let b = load_dataset(tmp.path(), Role::Source, 0.2, 7).unwrap();
        assert_eq!(a.splits, b.splits);
        assert!(a.ground_truth.iter().all(|m| m.bits.iter().all(|&b| b)));
    }

    #[test]
    fn target_without_gt() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "images", "t0", 5, 5, 0.1);
        let d = load_dataset(tmp.path(), Role::Target, 0.0, 1).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.ground_truth.is_empty());
    }

    #[test]
    fn missing_gt_lists_stems() {
        let tmp = source_dir(3);
        fs::remove_file(tmp.path().join("gt/p01.pgm")).unwrap();
        fs::remove_file(tmp.path().join("gt/p02.pgm")).unwrap();
        let err = load_dataset(tmp.path(), Role::Source, 0.0, 1).unwrap_err().to_string();
        assert!(err.contains("p01") && err.contains("p02"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let tmp = source_dir(1);
        write(tmp.path(), "gt", "p00", 3, 3, 1.0);
        assert!(load_dataset(tmp.path(), Role::Source, 0.0, 1).is_err());
    }

    #[test]
    fn gt_threshold_is_128() {
        let page = Page::gray(3, 1, vec![127.0 / 255.0, 128.0 / 255.0, 1.0]).unwrap();
        assert_eq!(BinaryMask::from_page(&page).bits, vec![false, true, true]);
    }
}
