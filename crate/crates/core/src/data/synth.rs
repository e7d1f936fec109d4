//! Synthetic document domains with exact ink masks.
//!
//! Pages are lines of stroke glyphs over a smoothly varying, noisy
//! background. The three domains differ only in rendering style.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BinaryMask, Dataset, Page, Role};

pub const SYNTH_PAGE_SIDE: usize = 128;
pub const SYNTH_SOURCE_PAGES: usize = 10;
pub const SYNTH_TARGET_PAGES: usize = 8;
pub const SYNTH_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStyle {
    pub background: f64,
    pub ink: f64,
    pub noise: f64,
    /// Amplitude of the low-frequency background illumination.
    pub variation: f64,
    /// Intensity offset of mirrored bleed-through strokes, if any.
    pub ghost: Option<f64>,
}

impl DomainStyle {
    pub const SOURCE: DomainStyle = DomainStyle {
        background: 0.82,
        ink: 0.18,
        noise: 0.04,
        variation: 0.05,
        ghost: None,
    };
    pub const NEAR: DomainStyle = DomainStyle {
        background: 0.80,
        ink: 0.22,
        noise: 0.08,
        variation: 0.06,
        ghost: None,
    };
    pub const FAR: DomainStyle = DomainStyle {
        background: 0.49,
        ink: 0.02,
        noise: 0.04,
        variation: 0.05,
        ghost: Some(-0.12),
    };
}

#[derive(Clone, Debug)]
pub struct SyntheticDomains {
    pub source: Dataset,
    pub near: Dataset,
    pub far: Dataset,
    /// Evaluation-only masks for the target domains.
    pub near_truth: Vec<BinaryMask>,
    pub far_truth: Vec<BinaryMask>,
}

/// Draws a segment of the given thickness into `mask`.
fn stroke(mask: &mut [bool], w: usize, h: usize, a: (f64, f64), b: (f64, f64), thickness: f64) {
    let r = thickness / 2.0;
    let (x0, x1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
    let (y0, y1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in (y0.floor().max(0.0) as usize)..=(y1.ceil().min(h as f64 - 1.0) as usize) {
        for x in (x0.floor().max(0.0) as usize)..=(x1.ceil().min(w as f64 - 1.0) as usize) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if qx * qx + qy * qy <= r * r {
                mask[y * w + x] = true;
            }
        }
    }
}

/// Lines of words made of 2–3 stroke glyphs.
fn text_mask<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    let thickness = rng.random_range(1.4..2.4);
    let margin = 6.0;
    let mut baseline = margin + rng.random_range(10.0..14.0);
    while baseline < h as f64 - margin {
        let x_height = rng.random_range(6.0..9.0);
        let mut x = margin + rng.random_range(0.0..6.0);
        while x < w as f64 - margin - 8.0 {
            let letters = rng.random_range(2..6);
            for _ in 0..letters {
                let gw = rng.random_range(4.0..7.0);
                if x + gw > w as f64 - margin {
                    break;
                }
                let top = if rng.random_bool(0.25) { baseline - 1.6 * x_height } else { baseline - x_height };
                for _ in 0..rng.random_range(2..4) {
                    let p = |rng: &mut R| (x + rng.random_range(0.0..gw), rng.random_range(top..baseline));
                    let (a, b) = (p(rng), p(rng));
                    stroke(&mut mask, w, h, a, b, thickness);
                }
                x += gw + rng.random_range(1.0..2.5);
            }
            x += rng.random_range(4.0..9.0);
        }
        baseline += rng.random_range(15.0..20.0);
    }
    mask
}

/// Renders one page and its mask in `style`.
pub fn render_page<R: Rng>(style: &DomainStyle, w: usize, h: usize, rng: &mut R) -> (Page, BinaryMask) {
    let mask = text_mask(w, h, rng);
    let ghost = style.ghost.map(|_| {
        let m = text_mask(w, h, rng);
        // Mirror horizontally, as ink seen through the back of the sheet.
        (0..w * h).map(|i| m[(i / w) * w + (w - 1 - i % w)]).collect::<Vec<_>>()
    });
    let noise = Normal::new(0.0, style.noise).expect("non-negative sigma");
    let (fx, fy) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let (px, py) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let shade = style.variation
                * (std::f64::consts::TAU * fx * x as f64 / w as f64 + px).sin()
                * (std::f64::consts::TAU * fy * y as f64 / h as f64 + py).cos();
            let mut v = if mask[i] { style.ink } else { style.background + shade };
            if let (Some(g), Some(offset)) = (&ghost, style.ghost) {
                if g[i] && !mask[i] {
                    v += offset;
                }
            }
            v += noise.sample(rng);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    (
        Page::gray(w, h, pixels).expect("page shape"),
        BinaryMask::new(w, h, mask).expect("mask shape"),
    )
}

fn domain(style: &DomainStyle, prefix: &str, pages: usize, seed: u64, stream: u64) -> (Vec<String>, Vec<Page>, Vec<BinaryMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut names = Vec::new();
    let mut out = Vec::new();
    let mut masks = Vec::new();
    for i in 0..pages {
        let (p, m) = render_page(style, SYNTH_PAGE_SIDE, SYNTH_PAGE_SIDE, &mut rng);
        names.push(format!("{prefix}{i:02}"));
        out.push(p);
        masks.push(m);
    }
    (names, out, masks)
}

/// Source (labelled), target-near and target-far domains.
pub fn make_synthetic_domains(seed: u64) -> SyntheticDomains {
    let (names, pages, gt) = domain(&DomainStyle::SOURCE, "s", SYNTH_SOURCE_PAGES, seed, 1);
    let source = Dataset::new(Role::Source, names, pages, gt, SYNTH_VALIDATION_FRACTION, seed)
        .expect("source contract");
    let (names, pages, near_truth) = domain(&DomainStyle::NEAR, "n", SYNTH_TARGET_PAGES, seed, 2);
    let near = Dataset::new(Role::Target, names, pages, Vec::new(), 0.0, seed).expect("target contract");
    let (names, pages, far_truth) = domain(&DomainStyle::FAR, "f", SYNTH_TARGET_PAGES, seed, 3);
    let far = Dataset::new(Role::Target, names, pages, Vec::new(), 0.0, seed).expect("target contract");
    SyntheticDomains { source, near, far, near_truth, far_truth }
}
