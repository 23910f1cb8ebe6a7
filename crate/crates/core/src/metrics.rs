//! Pixel-level precision/recall/F1 and COCO-style mask average recall.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::interchange::{LabelRaster, RleMask};
use crate::matching::{ChangeMap, ChangeProposal};

pub const DEFAULT_MAX_DETS: usize = 1000;
/// IoU thresholds 0.50, 0.55, ..., 0.95 in hundredths.
pub const IOU_THRESHOLDS_PCT: [u64; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PixelReport {
    /// Builds a report from raw counts; empty denominators give 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

pub fn pixel_prf(pred: &ChangeMap, gt: &ChangeMap) -> Result<PixelReport> {
    if pred.size() != gt.size() {
        return Err(Error::SizeMismatch(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.size(),
            gt.size()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(PixelReport::from_counts(tp, fp, fn_))
}

/// Sums counts over pairs before computing the ratios.
pub fn micro_average(reports: &[PixelReport]) -> PixelReport {
    let (tp, fp, fn_) = reports
        .iter()
        .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
    PixelReport::from_counts(tp, fp, fn_)
}

/// Mean of the per-pair ratios (counts are summed for reference).
pub fn macro_average(reports: &[PixelReport]) -> PixelReport {
    let mut out = micro_average(reports);
    if reports.is_empty() {
        return out;
    }
    let n = reports.len() as f64;
    out.precision = reports.iter().map(|r| r.precision).sum::<f64>() / n;
    out.recall = reports.iter().map(|r| r.recall).sum::<f64>() / n;
    out.f1 = reports.iter().map(|r| r.f1).sum::<f64>() / n;
    out
}

/// Multi-class change labels to a binary change map (nonzero = change).
pub fn binarize_gt(labels: &LabelRaster) -> ChangeMap {
    ChangeMap::from_fn(labels.height, labels.width, |y, x| labels.labels[y * labels.width + x] != 0)
}

/// One instance mask per distinct nonzero label, in ascending label order.
pub fn label_instances(labels: &LabelRaster) -> Vec<RleMask> {
    let distinct: std::collections::BTreeSet<u16> = labels.labels.iter().copied().filter(|&l| l != 0).collect();
    distinct
        .into_iter()
        .map(|l| {
            RleMask::encode(&ChangeMap::from_fn(labels.height, labels.width, |y, x| {
                labels.labels[y * labels.width + x] == l
            }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceReport {
    pub ar: f64,
    /// Recall keyed by IoU threshold in hundredths (50 = 0.50).
    pub per_iou_recall: BTreeMap<u64, f64>,
    pub max_dets: usize,
}

/// `inter/union >= pct/100` compared exactly.
fn iou_at_least(inter: u64, union: u64, pct: u64) -> bool {
    100 * inter as u128 >= pct as u128 * union as u128
}

/// Mask AR over IoU thresholds 0.50..0.95.
///
/// `preds` must already be ranked by descending score; only the first
/// `max_dets` are used. At each threshold predictions are visited in rank
/// order and each takes the unmatched ground truth of highest IoU at or above
/// the threshold (ties: lowest ground-truth index).
pub fn mask_ar(preds: &[ChangeProposal], gts: &[RleMask], max_dets: usize) -> Result<InstanceReport> {
    let masks: Vec<&RleMask> = preds.iter().map(|p| &p.mask).collect();
    mask_ar_masks(&masks, gts, max_dets)
}

pub fn mask_ar_masks(preds: &[&RleMask], gts: &[RleMask], max_dets: usize) -> Result<InstanceReport> {
    if gts.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let preds = &preds[..preds.len().min(max_dets)];
    // (intersection, union) for every pred x gt pair
    let mut overlap = Vec::with_capacity(preds.len());
    for p in preds {
        let mut row = Vec::with_capacity(gts.len());
        for g in gts {
            let inter = p.intersection_area(g)?;
            row.push((inter, p.area() + g.area() - inter));
        }
        overlap.push(row);
    }
    let mut per_iou_recall = BTreeMap::new();
    for pct in IOU_THRESHOLDS_PCT {
        let mut taken = vec![false; gts.len()];
        let mut matched = 0usize;
        for row in &overlap {
            let mut best: Option<usize> = None;
            for (g, &(inter, union)) in row.iter().enumerate() {
                if taken[g] || union == 0 || !iou_at_least(inter, union, pct) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => {
                        let (bi, bu) = row[b];
                        // inter/union > bi/bu
                        inter as u128 * bu as u128 > bi as u128 * union as u128
                    }
                };
                if better {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
                matched += 1;
            }
        }
        per_iou_recall.insert(pct, matched as f64 / gts.len() as f64);
    }
    let ar = per_iou_recall.values().sum::<f64>() / IOU_THRESHOLDS_PCT.len() as f64;
    Ok(InstanceReport {
        ar,
        per_iou_recall,
        max_dets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interchange::{BinaryMask, ProposalRecord, Time};

    #[test]
    fn prf_cases() {
        let gt = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        let r = pixel_prf(&gt, &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let all = BinaryMask::from_fn(2, 2, |_, _| true);
        let r = pixel_prf(&all, &gt).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 2, 0));
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert_eq!(r.f1, 2.0 / 3.0);

        let r = pixel_prf(&BinaryMask::zeros(2, 2), &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        assert!(pixel_prf(&BinaryMask::zeros(2, 3), &gt).is_err());
    }

    #[test]
    fn micro_and_macro_differ() {
        let a = PixelReport::from_counts(1, 0, 0);
        let b = PixelReport::from_counts(0, 0, 3);
        let micro = micro_average(&[a, b]);
        assert_eq!(micro.recall, 0.25);
        let mac = macro_average(&[a, b]);
        assert_eq!(mac.recall, 0.5);
    }

    #[test]
    fn binarize_labels() {
        let l = LabelRaster {
            height: 1,
            width: 4,
            labels: vec![0, 3, 7, 0],
        };
        let m = binarize_gt(&l);
        assert_eq!(m.data(), &[false, true, true, false]);
        let zeros = LabelRaster {
            height: 1,
            width: 2,
            labels: vec![0, 0],
        };
        assert_eq!(binarize_gt(&zeros).count_ones(), 0);
        let bin = LabelRaster {
            height: 1,
            width: 4,
            labels: m.data().iter().map(|&b| b as u16).collect(),
        };
        assert_eq!(binarize_gt(&bin), m);
    }

    fn row_mask(width: usize, x0: usize, x1: usize, row: usize) -> RleMask {
        RleMask::encode(&BinaryMask::from_fn(4, width, |y, x| y == row && (x0..x1).contains(&x)))
    }

    fn change(id: u64, mask: RleMask, score: f64) -> ChangeProposal {
        ChangeProposal::from_score(&ProposalRecord::new(id, mask, Time::T0), score)
    }

    #[test]
    fn ar_perfect_and_empty() {
        let gts = vec![row_mask(20, 0, 10, 0), row_mask(20, 0, 10, 2)];
        let preds = vec![change(1, gts[1].clone(), 0.9), change(2, gts[0].clone(), 0.8)];
        assert_eq!(mask_ar(&preds, &gts, 1000).unwrap().ar, 1.0);
        assert_eq!(mask_ar(&[], &gts, 1000).unwrap().ar, 0.0);
        assert!(matches!(mask_ar(&preds, &[], 1000), Err(Error::EmptyGroundTruth)));
        // truncation to max_dets
        assert_eq!(mask_ar(&preds, &gts, 1).unwrap().ar, 0.5);
    }
}
