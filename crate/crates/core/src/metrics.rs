//! Posterior sharpness, attribute spread and rank correlation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::{Dataset, UNKNOWN_ATTRIBUTE};
use crate::modeling::Posterior;
use crate::{Error, Result};

pub const SHARPNESS_BINS: usize = 10;

/// Summary of the per-query maximum posterior probability.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SharpnessStats {
    pub mean: f64,
    pub median: f64,
    /// Counts over [`SHARPNESS_BINS`] equal-width bins spanning [1/K, 1].
    pub histogram: Vec<usize>,
}

/// Bin index of `max_prob` within [1/K, 1].
pub fn sharpness_bin(max_prob: f64, num_classes: usize, bins: usize) -> usize {
    let lo = 1.0 / num_classes as f64;
    let t = ((max_prob - lo) / (1.0 - lo)).clamp(0.0, 1.0);
    ((t * bins as f64) as usize).min(bins - 1)
}

/// Center of bin `b` within [1/K, 1].
pub fn sharpness_bin_center(b: usize, num_classes: usize, bins: usize) -> f64 {
    let lo = 1.0 / num_classes as f64;
    lo + (b as f64 + 0.5) * (1.0 - lo) / bins as f64
}

pub fn max_posterior_stats(posteriors: &[Posterior]) -> Result<SharpnessStats> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::Validation("no posteriors".into()))?;
    let k = first.num_classes();
    if posteriors.iter().any(|p| p.num_classes() != k) {
        return Err(Error::Validation("posteriors have mixed K".into()));
    }
    let mut maxes: Vec<f64> = posteriors.iter().map(Posterior::max_prob).collect();
    let mean = maxes.iter().sum::<f64>() / maxes.len() as f64;
    let mut histogram = vec![0; SHARPNESS_BINS];
    for &m in &maxes {
        histogram[sharpness_bin(m, k, SHARPNESS_BINS)] += 1;
    }
    maxes.sort_by(f64::total_cmp);
    Ok(SharpnessStats {
        mean,
        median: median_sorted(&maxes),
        histogram,
    })
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Population standard deviation of the attribute's value-count histogram.
/// Binary attributes always contribute both values 0 and 1, so a constant
/// attribute over n documents has std n/2. Unknown values are ignored.
pub fn attribute_std(ds: &Dataset, attribute: &str) -> Result<f64> {
    if !ds.attribute_names().iter().any(|a| a == attribute) {
        return Err(Error::Validation(format!("unknown attribute `{attribute}`")));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::from([(0, 0), (1, 0)]);
    for doc in ds.documents() {
        match doc.attribute(attribute) {
            Some(v) if v != UNKNOWN_ATTRIBUTE => *counts.entry(v).or_insert(0) += 1,
            _ => {}
        }
    }
    let values: Vec<f64> = counts.values().map(|&c| c as f64).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(var.sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Ranks starting at 1, ties share their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant or the
/// inputs have fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Attack outcome grouped by the sharpness of a per-document posterior.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SharpnessBin {
    pub center: f64,
    pub count: usize,
    /// 1 − attack accuracy among documents in the bin.
    pub privacy: f64,
}

/// Group documents by max-posterior bin and score empirical privacy per bin.
/// Bins with fewer than `min_count` documents are dropped.
pub fn privacy_by_sharpness(
    max_probs: &[f64],
    attack_correct: &[bool],
    num_classes: usize,
    bins: usize,
    min_count: usize,
) -> Vec<SharpnessBin> {
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&m, &ok) in max_probs.iter().zip(attack_correct) {
        let b = sharpness_bin(m, num_classes, bins);
        counts[b] += 1;
        hits[b] += usize::from(ok);
    }
    (0..bins)
        .filter(|&b| counts[b] >= min_count.max(1))
        .map(|b| SharpnessBin {
            center: sharpness_bin_center(b, num_classes, bins),
            count: counts[b],
            privacy: 1.0 - hits[b] as f64 / counts[b] as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn post(v: &[f64]) -> Posterior {
        Posterior::new(v.to_vec()).unwrap()
    }

    fn ds_with_counts(ones: usize, zeros: usize) -> Dataset {
        let docs = (0..ones + zeros)
            .map(|i| Document::new("x", 0).with_attribute("g", i64::from(i < ones)))
            .collect();
        Dataset::new(docs, 2, vec!["g".into()]).unwrap()
    }

    #[test]
    fn uniform_and_one_hot() {
        let s = max_posterior_stats(&vec![Posterior::uniform(4); 5]).unwrap();
        assert_eq!((s.mean, s.median), (0.25, 0.25));
        assert_eq!(s.histogram[0], 5);
        let s = max_posterior_stats(&[Posterior::one_hot(1, 3), Posterior::one_hot(0, 3)]).unwrap();
        assert_eq!((s.mean, s.median), (1.0, 1.0));
        assert_eq!(s.histogram[SHARPNESS_BINS - 1], 2);
    }

    #[test]
    fn hand_computed_pair() {
        let s = max_posterior_stats(&[post(&[0.9, 0.1]), post(&[0.6, 0.4])]).unwrap();
        assert!((s.mean - 0.75).abs() < 1e-12);
        assert!((s.median - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mixed_inputs() {
        assert!(max_posterior_stats(&[]).is_err());
        assert!(max_posterior_stats(&[Posterior::uniform(2), Posterior::uniform(3)]).is_err());
    }

    #[test]
    fn attribute_std_examples() {
        assert_eq!(attribute_std(&ds_with_counts(50, 50), "g").unwrap(), 0.0);
        assert!((attribute_std(&ds_with_counts(70, 30), "g").unwrap() - 20.0).abs() < 1e-12);
        assert!((attribute_std(&ds_with_counts(100, 0), "g").unwrap() - 50.0).abs() < 1e-12);
        assert!(attribute_std(&ds_with_counts(1, 1), "age").is_err());
    }

    #[test]
    fn attribute_std_relabeling_invariant() {
        assert_eq!(
            attribute_std(&ds_with_counts(70, 30), "g").unwrap(),
            attribute_std(&ds_with_counts(30, 70), "g").unwrap()
        );
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn binned_privacy() {
        let probs = [0.3, 0.32, 0.95, 0.99, 0.97];
        let hits = [true, true, false, true, false];
        let bins = privacy_by_sharpness(&probs, &hits, 4, 5, 1);
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].count, 2);
        assert_eq!(bins[0].privacy, 0.0);
        assert!((bins[1].privacy - 2.0 / 3.0).abs() < 1e-12);
        assert!(privacy_by_sharpness(&probs, &hits, 4, 5, 3).len() == 1);
    }
}
