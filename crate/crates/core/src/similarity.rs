//! Domain similarity from SAE probability histograms and the adaptation gate.
//!
//! A source-trained SAE is run over the source validation pages and over
//! every target page. The two global, normalized histograms of predicted
//! probabilities are compared with Pearson's correlation; a low correlation
//! means the SAE behaves differently on the target, so adversarial
//! adaptation is worth its cost.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Dataset, Page, ProbabilityMap, Role};
use crate::error::{Error, Result};
use crate::models::{BinDannConfig, Model};
use crate::trainer::{binarize, train_bindann, train_sae, TrainConfig, TrainedBinarizer};

pub const DEFAULT_H_PREC: f64 = 0.1;
pub const DEFAULT_RHO_TH: f64 = 0.25;
/// Added to every bin before KL/JS so empty bins stay finite.
pub const SMOOTHING: f64 = 1e-10;
const SUM_TOLERANCE: f64 = 1e-9;
/// A histogram whose standard deviation is below this fraction of its
/// largest magnitude is treated as constant.
const RELATIVE_SD_FLOOR: f64 = 1e-12;

/// Number of bins for a precision, which must split [0, 1] evenly.
pub fn bin_count(h_prec: f64) -> Result<usize> {
    if !(h_prec > 0.0 && h_prec <= 1.0) {
        return Err(Error::InvalidArgument(format!("histogram precision must be in (0, 1], got {h_prec}")));
    }
    let exact = 1.0 / h_prec;
    let n = exact.round();
    if (exact - n).abs() > 1e-9 * n {
        return Err(Error::InvalidArgument(format!(
            "histogram precision {h_prec} does not split [0, 1] into whole bins"
        )));
    }
    Ok(n as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainHistogram {
    bins: Vec<f64>,
    normalized: bool,
}

impl DomainHistogram {
    /// Empty count histogram.
    pub fn new(h_prec: f64) -> Result<Self> {
        Ok(DomainHistogram { bins: vec![0.0; bin_count(h_prec)?], normalized: false })
    }

    /// Wraps explicit bin values; normalized ones must sum to 1.
    pub fn from_bins(bins: Vec<f64>, normalized: bool) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if bins.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument("histogram bins must be finite and non-negative".into()));
        }
        let h = DomainHistogram { bins, normalized };
        if normalized {
            h.check_normalized()?;
        }
        Ok(h)
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0.0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    fn check_normalized(&self) -> Result<()> {
        let sum = self.total();
        if !self.normalized || (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "histogram is not normalized (flag {}, sum {sum})",
                self.normalized
            )));
        }
        Ok(())
    }

    /// `bin_low,bin_high,mass` rows; counts are normalized on the fly.
    pub fn to_csv(&self) -> String {
        let n = self.bins.len();
        let total = self.total();
        let mut out = String::from("bin_low,bin_high,mass\n");
        for (k, &b) in self.bins.iter().enumerate() {
            let mass = if self.normalized || total == 0.0 { b } else { b / total };
            writeln!(out, "{},{},{}", k as f64 / n as f64, (k + 1) as f64 / n as f64, mass).expect("string write");
        }
        out
    }

    /// Bin-wise sum of two count histograms.
    pub fn merge(mut self, other: &DomainHistogram) -> Result<Self> {
        if self.normalized || other.normalized || self.len() != other.len() {
            return Err(Error::InvalidArgument("only count histograms of equal length can be merged".into()));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        Ok(self)
    }
}

/// Bins every pixel as `floor(p · n)`, with `p = 1` in the last bin.
pub fn accumulate_histogram(map: &ProbabilityMap, h_prec: f64, mut acc: DomainHistogram) -> Result<DomainHistogram> {
    let n = bin_count(h_prec)?;
    if acc.normalized || acc.len() != n {
        return Err(Error::InvalidArgument(format!(
            "accumulator must be a {n}-bin count histogram"
        )));
    }
    for (i, &p) in map.values.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} at pixel {i} is outside [0, 1]")));
        }
        let k = ((p * n as f64).floor() as usize).min(n - 1);
        acc.bins[k] += 1.0;
    }
    Ok(acc)
}

pub fn normalize_histogram(h: DomainHistogram) -> Result<DomainHistogram> {
    let total = h.total();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("cannot normalize an empty histogram".into()));
    }
    let bins = h.bins.iter().map(|b| b / total).collect();
    Ok(DomainHistogram { bins, normalized: true })
}

/// Normalized histogram of a model's predictions over `pages`.
pub fn domain_histogram(model: &Model, pages: &[&Page], h_prec: f64) -> Result<DomainHistogram> {
    let maps = predict_all(model, pages)?;
    histogram_of_maps(&maps, h_prec)
}

pub fn histogram_of_maps(maps: &[ProbabilityMap], h_prec: f64) -> Result<DomainHistogram> {
    let acc = maps
        .iter()
        .try_fold(DomainHistogram::new(h_prec)?, |acc, m| accumulate_histogram(m, h_prec, acc))?;
    normalize_histogram(acc)
}

fn predict_all(model: &Model, pages: &[&Page]) -> Result<Vec<ProbabilityMap>> {
    pages.par_iter().map(|p| model.predict_prob_map(p)).collect()
}

fn same_length(p: &DomainHistogram, q: &DomainHistogram) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!("histograms have {} and {} bins", p.len(), q.len())));
    }
    Ok(())
}

/// Population Pearson correlation of two value sequences.
pub fn pearson_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs two equal-length sequences of at least 2 values".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    for (name, v, xs) in [("first", va, a), ("second", vb, b)] {
        let scale = xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if scale == 0.0 || (v / n).sqrt() <= RELATIVE_SD_FLOOR * scale {
            return Err(Error::Degenerate(format!("{name} histogram has zero variance")));
        }
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson(hs: &DomainHistogram, ht: &DomainHistogram) -> Result<f64> {
    hs.check_normalized()?;
    ht.check_normalized()?;
    same_length(hs, ht)?;
    pearson_raw(&hs.bins, &ht.bins)
}

fn smoothed(h: &DomainHistogram) -> Vec<f64> {
    let total = h.total() + SMOOTHING * h.len() as f64;
    h.bins.iter().map(|b| (b + SMOOTHING) / total).collect()
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>().max(0.0)
}

/// `KL(P ‖ Q)` after smoothing both sides.
pub fn kl_divergence(p: &DomainHistogram, q: &DomainHistogram) -> Result<f64> {
    p.check_normalized()?;
    q.check_normalized()?;
    same_length(p, q)?;
    Ok(kl_raw(&smoothed(p), &smoothed(q)))
}

pub fn js_divergence(p: &DomainHistogram, q: &DomainHistogram) -> Result<f64> {
    p.check_normalized()?;
    q.check_normalized()?;
    same_length(p, q)?;
    let (ps, qs) = (smoothed(p), smoothed(q));
    let m: Vec<f64> = ps.iter().zip(&qs).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl_raw(&ps, &m) + 0.5 * kl_raw(&qs, &m)).clamp(0.0, std::f64::consts::LN_2))
}

pub fn hist_intersection(p: &DomainHistogram, q: &DomainHistogram) -> Result<f64> {
    p.check_normalized()?;
    q.check_normalized()?;
    same_length(p, q)?;
    Ok(p.bins.iter().zip(&q.bins).map(|(a, b)| a.min(*b)).sum::<f64>().clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "UseSAE")]
    UseSae,
    #[serde(rename = "UseDA")]
    UseDa,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::UseSae => "UseSAE",
            Decision::UseDa => "UseDA",
        })
    }
}

/// Adapt when the correlation is at or below the threshold.
pub fn gate_decision(rho: f64, rho_th: f64) -> Decision {
    if rho <= rho_th {
        Decision::UseDa
    } else {
        Decision::UseSae
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// `None` when either histogram is constant.
    pub rho: Option<f64>,
    pub kl_st: f64,
    pub kl_ts: f64,
    pub js: f64,
    pub hist_intersection: f64,
    pub rho_th: f64,
    pub decision: Decision,
    pub degenerate_flag: bool,
}

impl SimilarityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// All four metrics plus the gate; a constant histogram defaults to the SAE.
pub fn compare(hs: &DomainHistogram, ht: &DomainHistogram, rho_th: f64) -> Result<SimilarityReport> {
    let rho = match pearson(hs, ht) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SimilarityReport {
        rho,
        kl_st: kl_divergence(hs, ht)?,
        kl_ts: kl_divergence(ht, hs)?,
        js: js_divergence(hs, ht)?,
        hist_intersection: hist_intersection(hs, ht)?,
        rho_th,
        decision: rho.map_or(Decision::UseSae, |r| gate_decision(r, rho_th)),
        degenerate_flag: rho.is_none(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoConfig {
    /// Architecture and λ schedule; the SAE uses `model.sae`.
    pub model: BinDannConfig,
    pub train: TrainConfig,
    pub h_prec: f64,
    pub rho_th: f64,
}

impl Default for AutoConfig {
    fn default() -> Self {
        AutoConfig {
            model: BinDannConfig::default(),
            train: TrainConfig::default(),
            h_prec: DEFAULT_H_PREC,
            rho_th: DEFAULT_RHO_TH,
        }
    }
}

impl AutoConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        bin_count(self.h_prec)?;
        if !(-1.0..=1.0).contains(&self.rho_th) {
            return Err(Error::InvalidArgument(format!("rho_th must be in [-1, 1], got {}", self.rho_th)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AutoOutcome {
    /// One binarized mask per target page, in dataset order.
    pub masks: Vec<BinaryMask>,
    pub report: SimilarityReport,
    pub source_histogram: DomainHistogram,
    pub target_histogram: DomainHistogram,
    pub sae: TrainedBinarizer,
    /// Present only when the gate chose adaptation.
    pub adapted: Option<TrainedBinarizer>,
}

impl AutoOutcome {
    /// The binarizer that produced `masks`.
    pub fn selected(&self) -> &TrainedBinarizer {
        self.adapted.as_ref().unwrap_or(&self.sae)
    }
}

/// Train the SAE, compare domains, and adapt only if they differ enough.
///
/// The target dataset carries no ground truth, so no target label can
/// influence training, gating or thresholding.
pub fn run_autobindann(source: &Dataset, target: &Dataset, cfg: &AutoConfig) -> Result<AutoOutcome> {
    cfg.validate()?;
    if source.role != Role::Source || target.role != Role::Target {
        return Err(Error::InvalidArgument("expected a labeled source and an unlabeled target dataset".into()));
    }
    if target.pages.is_empty() {
        return Err(Error::InvalidArgument("target dataset is empty".into()));
    }
    let sae = train_sae(source, &cfg.model.sae, &cfg.train)?;
    let validation: Vec<&Page> = source.validation_indices().iter().map(|&i| &source.pages[i]).collect();
    let source_histogram = domain_histogram(&sae.model, &validation, cfg.h_prec)?;
    let target_pages: Vec<&Page> = target.pages.iter().collect();
    let target_maps = predict_all(&sae.model, &target_pages)?;
    let target_histogram = histogram_of_maps(&target_maps, cfg.h_prec)?;
    let report = compare(&source_histogram, &target_histogram, cfg.rho_th)?;
    let (masks, adapted) = match report.decision {
        Decision::UseSae => (target_maps.iter().map(|m| binarize(m, sae.threshold)).collect(), None),
        Decision::UseDa => {
            let dann = train_bindann(source, target, &cfg.model, &cfg.train)?;
            let masks = target_pages.par_iter().map(|p| dann.binarize_page(p)).collect::<Result<_>>()?;
            (masks, Some(dann))
        }
    };
    Ok(AutoOutcome { masks, report, source_histogram, target_histogram, sae, adapted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(bins: &[f64]) -> DomainHistogram {
        DomainHistogram::from_bins(bins.to_vec(), true).unwrap()
    }

    fn map(values: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn bin_counts() {
        assert_eq!(bin_count(0.1).unwrap(), 10);
        assert_eq!(bin_count(0.05).unwrap(), 20);
        assert_eq!(bin_count(1.0).unwrap(), 1);
        assert!(bin_count(0.3).is_err());
        assert!(bin_count(0.0).is_err());
    }

    #[test]
    fn all_zero_map_fills_bin_zero() {
        let h = accumulate_histogram(&map(&[0.0; 7]), 0.1, DomainHistogram::new(0.1).unwrap()).unwrap();
        assert_eq!(h.bins()[0], 7.0);
        assert_eq!(h.total(), 7.0);
    }

    #[test]
    fn hand_binning_with_closed_top_bin() {
        let h = accumulate_histogram(&map(&[0.05, 0.15, 0.95, 1.0]), 0.1, DomainHistogram::new(0.1).unwrap()).unwrap();
        let mut want = vec![0.0; 10];
        want[0] = 1.0;
        want[1] = 1.0;
        want[9] = 2.0;
        assert_eq!(h.bins(), &want[..]);
    }

    #[test]
    fn decimal_edges_land_in_upper_bin() {
        let h = accumulate_histogram(&map(&[0.3, 0.7]), 0.1, DomainHistogram::new(0.1).unwrap()).unwrap();
        assert_eq!(h.bins()[3], 1.0);
        assert_eq!(h.bins()[7], 1.0);
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let acc = DomainHistogram::new(0.1).unwrap();
        assert!(accumulate_histogram(&map(&[0.5, 1.2]), 0.1, acc.clone()).is_err());
        assert!(accumulate_histogram(&map(&[-0.1]), 0.1, acc).is_err());
    }

    #[test]
    fn normalization_examples() {
        let h = normalize_histogram(DomainHistogram::from_bins(vec![2.0, 2.0], false).unwrap()).unwrap();
        assert_eq!(h.bins(), &[0.5, 0.5]);
        let mut counts = vec![0.0; 10];
        counts[0] = 10.0;
        let h = normalize_histogram(DomainHistogram::from_bins(counts, false).unwrap()).unwrap();
        assert_eq!(h.bins()[0], 1.0);
        assert!(h.bins()[1..].iter().all(|&b| b == 0.0));
        assert!(normalize_histogram(DomainHistogram::new(0.1).unwrap()).is_err());
    }

    #[test]
    fn pearson_examples() {
        let a = hist(&[0.5, 0.3, 0.2]);
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let r = pearson(&hist(&[0.9, 0.1]), &hist(&[0.1, 0.9])).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_histogram_is_degenerate() {
        let flat = hist(&[0.25; 4]);
        let other = hist(&[0.4, 0.3, 0.2, 0.1]);
        assert!(matches!(pearson(&flat, &other), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&other, &flat), Err(Error::Degenerate(_))));
        let report = compare(&other, &flat, 0.25).unwrap();
        assert_eq!(report.rho, None);
        assert!(report.degenerate_flag);
        assert_eq!(report.decision, Decision::UseSae);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let counts = DomainHistogram::from_bins(vec![3.0, 1.0], false).unwrap();
        let p = hist(&[0.75, 0.25]);
        assert!(pearson(&counts, &p).is_err());
        assert!(kl_divergence(&counts, &p).is_err());
        assert!(js_divergence(&p, &counts).is_err());
        assert!(hist_intersection(&counts, &p).is_err());
        assert!(DomainHistogram::from_bins(vec![0.6, 0.6], true).is_err());
    }

    #[test]
    fn identical_histograms() {
        let p = hist(&[0.7, 0.0, 0.3]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        assert!(js_divergence(&p, &p).unwrap().abs() < 1e-12);
        assert!((hist_intersection(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_point_masses() {
        let p = hist(&[1.0, 0.0]);
        let q = hist(&[0.0, 1.0]);
        assert!((js_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-8);
        assert_eq!(hist_intersection(&p, &q).unwrap(), 0.0);
        assert!(kl_divergence(&p, &q).unwrap() > 20.0);
    }

    #[test]
    fn kl_matches_direct_sum() {
        let p = hist(&[0.6, 0.3, 0.1]);
        let q = hist(&[0.2, 0.5, 0.3]);
        let direct: f64 = [(0.6, 0.2), (0.3, 0.5), (0.1, 0.3)].iter().map(|(a, b): &(f64, f64)| a * (a / b).ln()).sum();
        assert!((kl_divergence(&p, &q).unwrap() - direct).abs() < 1e-8);
        assert!((kl_divergence(&p, &q).unwrap() - kl_divergence(&q, &p).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate_decision(0.08, 0.25), Decision::UseDa);
        assert_eq!(gate_decision(0.88, 0.25), Decision::UseSae);
        assert_eq!(gate_decision(0.25, 0.25), Decision::UseDa);
        assert_eq!(gate_decision(-1.0, 0.25), Decision::UseDa);
        assert_eq!(gate_decision(1.0, 0.25), Decision::UseSae);
    }

    #[test]
    fn report_json_field_names() {
        let p = hist(&[0.7, 0.2, 0.1]);
        let q = hist(&[0.1, 0.2, 0.7]);
        let report = compare(&p, &q, DEFAULT_RHO_TH).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        for key in ["rho", "kl_st", "kl_ts", "js", "hist_intersection", "rho_th", "decision", "degenerate_flag"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["decision"], "UseDA");
        assert_eq!(serde_json::from_str::<SimilarityReport>(&report.to_json()).unwrap(), report);
    }

    #[test]
    fn csv_export() {
        let h = DomainHistogram::from_bins(vec![1.0, 3.0], false).unwrap();
        assert_eq!(h.to_csv(), "bin_low,bin_high,mass\n0,0.5,0.25\n0.5,1,0.75\n");
    }

    fn direct_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    fn random_hist() -> impl Strategy<Value = DomainHistogram> {
        prop::collection::vec(1u32..1000, 10).prop_map(|c| {
            normalize_histogram(DomainHistogram::from_bins(c.into_iter().map(f64::from).collect(), false).unwrap())
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn pearson_matches_direct_formula(a in random_hist(), b in random_hist()) {
            prop_assume!(pearson(&a, &b).is_ok());
            let r = pearson(&a, &b).unwrap();
            prop_assert!((r - direct_pearson(a.bins(), b.bins())).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert_eq!(r, pearson(&b, &a).unwrap());
        }

        #[test]
        fn pearson_affine_invariant(a in random_hist(), b in random_hist(), scale in 0.01f64..100.0, shift in -5.0f64..5.0) {
            let r = pearson_raw(a.bins(), b.bins()).unwrap();
            let ta: Vec<f64> = a.bins().iter().map(|x| scale * x + shift).collect();
            let tb: Vec<f64> = b.bins().iter().map(|x| scale * x + shift).collect();
            prop_assert!((pearson_raw(&ta, &tb).unwrap() - r).abs() < 1e-9);
        }

        #[test]
        fn divergence_bounds_and_symmetry(a in random_hist(), b in random_hist()) {
            let js = js_divergence(&a, &b).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
            prop_assert!((js - js_divergence(&b, &a).unwrap()).abs() < 1e-12);
            let hi = hist_intersection(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&hi));
            prop_assert_eq!(hi, hist_intersection(&b, &a).unwrap());
            prop_assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn normalized_sums_to_one(counts in prop::collection::vec(0u32..1_000_000, 1..40)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let h = normalize_histogram(DomainHistogram::from_bins(counts.into_iter().map(f64::from).collect(), false).unwrap()).unwrap();
            prop_assert!((h.total() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn accumulation_is_additive(a in prop::collection::vec(0.0f64..=1.0, 1..50), b in prop::collection::vec(0.0f64..=1.0, 1..50)) {
            let empty = DomainHistogram::new(0.1).unwrap();
            let sep = accumulate_histogram(&map(&b), 0.1, accumulate_histogram(&map(&a), 0.1, empty.clone()).unwrap()).unwrap();
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            prop_assert_eq!(sep, accumulate_histogram(&map(&joined), 0.1, empty).unwrap());
        }

        #[test]
        fn gate_partitions_at_threshold(rho in -1.0f64..=1.0, th in -1.0f64..=1.0) {
            prop_assert_eq!(gate_decision(rho, th) == Decision::UseDa, rho <= th);
        }
    }
}
