//! Detection metrics: AUROC, average precision, F1-max and PRO up to a
//! false-positive-rate limit. All sweeps are exact over distinct scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("no ground-truth regions")]
    NoRegions,
    #[error("no negative pixels to measure false positives on")]
    NoNegatives,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid FPR limit {0}")]
    InvalidLimit(f64),
    #[error("non-finite score at {0}")]
    NonFinite(usize),
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    Ok(())
}

/// Indices sorted by descending score; ties keep index order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Walks descending tie groups, yielding cumulative (tp, fp) after each group.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Mann-Whitney statistic with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Step-interpolated area under the precision-recall curve.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in tie_groups(scores, labels) {
        let recall = tp as f64 / pos as f64;
        if tp > 0 {
            ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        }
        prev_recall = recall;
    }
    Ok(ap)
}

/// Best F1 over thresholds at every distinct score (predict `score >= t`).
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(tie_groups(scores, labels)
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (tp + fp + pos) as f64)
        .fold(0.0, f64::max))
}

/// 4-connected components of a binary mask, each as sorted flat indices.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), height * width, "mask shape");
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// One sample's score map with its ground-truth mask.
#[derive(Clone, Copy, Debug)]
pub struct ScoredMask<'a> {
    pub scores: &'a [f64],
    pub mask: &'a [bool],
    pub height: usize,
    pub width: usize,
}

/// Ground-truth regions of a set of samples, indexed into the concatenation
/// of their pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub regions: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
}

impl RegionSet {
    pub fn from_samples(samples: &[ScoredMask<'_>]) -> Result<Self, MetricError> {
        let mut regions = Vec::new();
        let mut scores = Vec::new();
        let mut positive = Vec::new();
        for s in samples {
            let n = s.height * s.width;
            if s.scores.len() != n || s.mask.len() != n {
                return Err(MetricError::LengthMismatch {
                    left: s.scores.len().max(s.mask.len()),
                    right: n,
                });
            }
            let offset = scores.len();
            regions.extend(
                connected_components(s.mask, s.height, s.width)
                    .into_iter()
                    .map(|c| c.into_iter().map(|p| p + offset).collect::<Vec<_>>()),
            );
            scores.extend_from_slice(s.scores);
            positive.extend_from_slice(s.mask);
        }
        check(&scores, &positive)?;
        Ok(Self {
            regions,
            scores,
            positive,
        })
    }
}

/// Normalized area under the mean per-region-overlap curve for FPR in
/// `[0, limit]`. The curve starts at the origin and is traced exactly, one
/// tie group of scores at a time, with linear interpolation at the limit.
pub fn pro_at_fpr(regions: &RegionSet, limit: f64) -> Result<f64, MetricError> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(MetricError::InvalidLimit(limit));
    }
    if regions.regions.is_empty() {
        return Err(MetricError::NoRegions);
    }
    let negatives = regions.positive.iter().filter(|&&p| !p).count();
    if negatives == 0 {
        return Err(MetricError::NoNegatives);
    }
    let mut region_of = vec![usize::MAX; regions.scores.len()];
    for (r, members) in regions.regions.iter().enumerate() {
        for &p in members {
            region_of[p] = r;
        }
    }
    let n_regions = regions.regions.len() as f64;
    let share: Vec<f64> = regions
        .regions
        .iter()
        .map(|m| 1.0 / (m.len() as f64 * n_regions))
        .collect();
    let order = descending(&regions.scores);
    let scores = &regions.scores;
    let (mut fp, mut pro) = (0usize, 0.0f64);
    let (mut prev_fpr, mut prev_pro) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            let p = order[i];
            match region_of[p] {
                usize::MAX => fp += 1,
                r => pro += share[r],
            }
            i += 1;
        }
        let fpr = fp as f64 / negatives as f64;
        if fpr >= limit {
            if fpr > prev_fpr {
                let t = (limit - prev_fpr) / (fpr - prev_fpr);
                let at_limit = prev_pro + t * (pro - prev_pro);
                area += (limit - prev_fpr) * (prev_pro + at_limit) / 2.0;
            }
            return Ok(area / limit);
        }
        area += (fpr - prev_fpr) * (prev_pro + pro) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro;
    }
    // the last group always reaches FPR 1
    Ok(area / limit)
}

/// Pixel-level AUROC / F1-max / AP plus PRO over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub f1_max: f64,
    pub ap: f64,
    pub pro: f64,
}

pub fn pixel_metrics(samples: &[ScoredMask<'_>], pro_limit: f64) -> Result<PixelMetrics, MetricError> {
    let set = RegionSet::from_samples(samples)?;
    Ok(PixelMetrics {
        auroc: auroc(&set.scores, &set.positive)?,
        f1_max: f1_max(&set.scores, &set.positive)?,
        ap: average_precision(&set.scores, &set.positive)?,
        pro: pro_at_fpr(&set, pro_limit)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn thresholds(scores: &[f64]) -> Vec<f64> {
        let mut t = scores.to_vec();
        t.sort_by(|a, b| b.total_cmp(a));
        t.dedup();
        t
    }

    fn confusion(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64, f64, f64) {
        let (mut tp, mut fp, mut fneg, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        (tp, fp, fneg, tn)
    }

    fn roc_trapezoid(scores: &[f64], labels: &[bool]) -> f64 {
        let mut pts = vec![(0.0, 0.0)];
        for t in thresholds(scores) {
            let (tp, fp, fneg, tn) = confusion(scores, labels, t);
            pts.push((fp / (fp + tn), tp / (tp + fneg)));
        }
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    fn ap_exhaustive(scores: &[f64], labels: &[bool]) -> f64 {
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in thresholds(scores) {
            let (tp, fp, fneg, _) = confusion(scores, labels, t);
            let r = tp / (tp + fneg);
            if tp > 0.0 {
                ap += (r - prev_r) * tp / (tp + fp);
            }
            prev_r = r;
        }
        ap
    }

    fn f1_exhaustive(scores: &[f64], labels: &[bool]) -> f64 {
        thresholds(scores)
            .into_iter()
            .map(|t| {
                let (tp, fp, fneg, _) = confusion(scores, labels, t);
                2.0 * tp / (2.0 * tp + fp + fneg)
            })
            .fold(0.0, f64::max)
    }

    fn random_instance(seed: u64, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random_bool(0.2)).collect();
        let scores = labels
            .iter()
            .map(|&l| (rng.random_range(0..levels) as f64 + if l { 2.0 } else { 0.0 }) / levels as f64)
            .collect();
        (scores, labels)
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5; 2], &[true, true]), Err(MetricError::SingleClass));
        for seed in 0..20 {
            let (s, l) = random_instance(seed, 50, 7);
            assert!((auroc(&s, &l).unwrap() - roc_trapezoid(&s, &l)).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_cases() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap();
        assert!((ap - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2, 0.9], &[false, false, true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1], &[false]), Err(MetricError::NoPositives));
        for seed in 0..20 {
            let (s, l) = random_instance(seed, 60, 5);
            assert!((average_precision(&s, &l).unwrap() - ap_exhaustive(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_max(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        for seed in 0..20 {
            let (s, l) = random_instance(seed, 60, 5);
            let f = f1_max(&s, &l).unwrap();
            assert!((f - f1_exhaustive(&s, &l)).abs() < 1e-12);
            let p = l.iter().filter(|&&x| x).count() as f64 / l.len() as f64;
            assert!(f >= 2.0 * p / (1.0 + p) - 1e-12);
        }
    }

    #[test]
    fn components_use_four_connectivity() {
        #[rustfmt::skip]
        let mask = [
            true,  false, false,
            false, true,  true,
            false, false, true,
        ];
        let c = connected_components(&mask, 3, 3);
        assert_eq!(c, vec![vec![0], vec![4, 5, 8]]);
    }

    #[test]
    fn pro_perfect_prediction() {
        let mask: Vec<bool> = (0..64).map(|p| (p / 8 < 2 && p % 8 < 3) || p == 63).collect();
        let scores: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let set = RegionSet::from_samples(&[ScoredMask {
            scores: &scores,
            mask: &mask,
            height: 8,
            width: 8,
        }])
        .unwrap();
        assert_eq!(set.regions.len(), 2);
        assert!((pro_at_fpr(&set, 0.3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pro_constant_map() {
        let mask: Vec<bool> = (0..16).map(|p| p < 4).collect();
        let set = RegionSet::from_samples(&[ScoredMask {
            scores: &[0.5; 16],
            mask: &mask,
            height: 4,
            width: 4,
        }])
        .unwrap();
        // single jump from (0,0) to (1,1): the curve is the diagonal
        assert!((pro_at_fpr(&set, 0.3).unwrap() - 0.15).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(seed in 0u64..500) {
            let (s, l) = random_instance(seed, 40, 6);
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
            prop_assert!((auroc(&s, &l).unwrap() - auroc(&t, &l).unwrap()).abs() < 1e-12);
            prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
            prop_assert!((f1_max(&s, &l).unwrap() - f1_max(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn flipped_labels_complement(scores in prop::collection::hash_set(0u32..100_000, 10..40), seed in 0u64..100) {
            let s: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut l: Vec<bool> = (0..s.len()).map(|_| rng.random_bool(0.5)).collect();
            l[0] = true;
            l[1] = false;
            let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
            prop_assert!((auroc(&s, &l).unwrap() + auroc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ap_at_least_prevalence(seed in 0u64..500) {
            let (s, l) = random_instance(seed, 30, 4);
            let p = l.iter().filter(|&&x| x).count() as f64 / l.len() as f64;
            prop_assert!(average_precision(&s, &l).unwrap() >= p - 1e-12);
        }

        #[test]
        fn pro_non_decreasing_in_limit(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..100).map(|p| (p / 10 + p % 10) % 7 == 0 || rng.random_bool(0.1)).collect();
            let scores: Vec<f64> = mask.iter().map(|&m| rng.random::<f64>() + if m { 0.3 } else { 0.0 }).collect();
            let set = RegionSet::from_samples(&[ScoredMask { scores: &scores, mask: &mask, height: 10, width: 10 }]).unwrap();
            let mut last = 0.0;
            for k in 1..=10 {
                let v = pro_at_fpr(&set, k as f64 / 10.0).unwrap();
                prop_assert!(v >= last - 1e-12);
                last = v;
            }
        }
    }
}
