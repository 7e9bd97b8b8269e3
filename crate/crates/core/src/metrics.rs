//! Segmentation metrics: Dice for binary masks and the Aggregated Jaccard
//! Index for instance label maps.

use alloc::collections::{BTreeMap, BTreeSet};

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("prediction and ground truth shapes differ")]
    ShapeMismatch,
}

/// `2|P ∩ G| / (|P| + |G|)` over nonzero pixels; two empty masks score 1.
pub fn dice_score(pred: &Image, gt: &Image) -> Result<f64, MetricError> {
    if pred.shape != gt.shape {
        return Err(MetricError::ShapeMismatch);
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0.0, b != 0.0);
        p += u64::from(a);
        g += u64::from(b);
        inter += u64::from(a && b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Aggregated Jaccard Index with ground-truth-driven matching.
///
/// Ground-truth instances are visited in ascending label order; each takes
/// the still-unused overlapping prediction with the highest Jaccard (lowest
/// label on ties) and adds its intersection to `C` and union to `U`. An
/// unmatched ground-truth instance adds its area to `U`, and so does every
/// prediction left unused at the end. Label 0 is background; two empty maps
/// score 1.
pub fn aji_score(pred: &Image, gt: &Image) -> Result<f64, MetricError> {
    if pred.shape != gt.shape {
        return Err(MetricError::ShapeMismatch);
    }
    let mut gt_area: BTreeMap<i64, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<i64, u64> = BTreeMap::new();
    let mut overlap: BTreeMap<(i64, i64), u64> = BTreeMap::new();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p as i64, g as i64);
        if p > 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g > 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p > 0 && g > 0 {
            *overlap.entry((g, p)).or_default() += 1;
        }
    }
    let mut used = BTreeSet::new();
    let (mut c, mut u) = (0u64, 0u64);
    for (&g, &g_area) in &gt_area {
        let mut best: Option<(i64, u64, u64)> = None;
        for (&(_, p), &inter) in overlap.range((g, i64::MIN)..=(g, i64::MAX)) {
            if used.contains(&p) {
                continue;
            }
            let union = g_area + pred_area[&p] - inter;
            let better = match best {
                None => true,
                // inter/union > bi/bu, compared exactly
                Some((_, bi, bu)) => (inter as u128) * (bu as u128) > (bi as u128) * (union as u128),
            };
            if better {
                best = Some((p, inter, union));
            }
        }
        match best {
            Some((p, inter, union)) => {
                used.insert(p);
                c += inter;
                u += union;
            }
            None => u += g_area,
        }
    }
    u += pred_area
        .iter()
        .filter(|(p, _)| !used.contains(*p))
        .map(|(_, &a)| a)
        .sum::<u64>();
    if u == 0 {
        return Ok(1.0);
    }
    Ok(c as f64 / u as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn labels(w: usize, data: &[f64]) -> Image {
        Image::new(vec![data.len() / w, w], data.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = labels(4, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let p = labels(4, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = labels(4, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(dice_score(&p, &g).unwrap(), 0.25);
        let empty = labels(2, &[0.0; 4]);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_score(&empty, &a), Err(MetricError::ShapeMismatch));
    }

    #[test]
    fn aji_single_partial_match() {
        // G1 covers the top row (4 px); P1 covers 3 of them plus one more.
        let gt = labels(4, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let pred = labels(4, &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((aji_score(&pred, &gt).unwrap() - 0.6).abs() < 1e-12);
        // A disjoint 2 px spurious prediction only grows the union.
        let pred2 = labels(4, &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!((aji_score(&pred2, &gt).unwrap() - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn aji_identical_partitions_and_asymmetry() {
        let l = labels(3, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 3.0, 0.0, 2.0]);
        assert_eq!(aji_score(&l, &l).unwrap(), 1.0);
        // One GT blob split into two predictions: the GT-driven match uses
        // only one piece and penalizes the other; swapped roles differ.
        let merged = labels(4, &[1.0, 1.0, 1.0, 1.0]);
        let split = labels(4, &[1.0, 1.0, 2.0, 2.0]);
        let a = aji_score(&split, &merged).unwrap();
        let b = aji_score(&merged, &split).unwrap();
        assert!((a - 1.0 / 3.0).abs() < 1e-12);
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        let gt = labels(4, &[1.0, 1.0, 1.0, 0.0]);
        let pred = labels(4, &[1.0, 2.0, 2.0, 2.0]);
        assert_ne!(aji_score(&pred, &gt).unwrap(), aji_score(&gt, &pred).unwrap());
    }

    #[test]
    fn aji_empty_maps() {
        let empty = labels(2, &[0.0; 4]);
        assert_eq!(aji_score(&empty, &empty).unwrap(), 1.0);
        let one = labels(2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(aji_score(&one, &empty).unwrap(), 0.0);
        assert_eq!(aji_score(&empty, &one).unwrap(), 0.0);
    }
}
