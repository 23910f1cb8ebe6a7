//! Comparison methods: change vector analysis on embeddings or raw pixels,
//! geometric mask matching, and CVA with instance-level voting. Also hosts the
//! Otsu threshold used across the engine.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;
use crate::interchange::{ProposalRecord, Session, Time};
use crate::matching::{sort_changes, ChangeMap, ChangeProposal};
use crate::proposal::mask_iou;

pub const DEFAULT_OTSU_BINS: usize = 256;

// Keeps the exact between-class comparison inside u128/u64 arithmetic.
const MAX_OTSU_SAMPLES: usize = 1 << 27;

/// Result of an Otsu split over a binned histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    /// Upper edge of the last bin of the lower class.
    pub threshold: f64,
    /// Index of the last bin of the lower class.
    pub bin: usize,
    pub lo: f64,
    pub bin_width: f64,
    pub bins: usize,
}

impl OtsuSplit {
    pub fn bin_of(&self, v: f64) -> usize {
        histogram_bin(v, self.lo, self.bin_width, self.bins)
    }

    /// Whether `v` falls in the upper class.
    pub fn is_upper(&self, v: f64) -> bool {
        self.bin_of(v) > self.bin
    }
}

/// Bin index of `v` for `bins` equal bins starting at `lo`; out-of-range values clamp.
pub fn histogram_bin(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    let b = ((v - lo) / width).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// `a * b` as a 192-bit `(high, low)` pair.
fn wide_mul(a: u128, b: u64) -> (u128, u64) {
    let lo = (a as u64 as u128) * b as u128;
    let hi = (a >> 64) * b as u128 + (lo >> 64);
    (hi, lo as u64)
}

/// Between-class variance maximizing split of a 256-style histogram.
///
/// Bins are indexed values, so the variance of split `k` is proportional to
/// `(N*s0 - n0*S)^2 / (n0*n1)`; candidates are compared exactly by
/// cross-multiplication. Ties resolve to the lowest bin.
pub fn otsu_split(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<OtsuSplit> {
    if bins < 2 {
        return Err(Error::InvalidConfig("otsu needs at least 2 bins".into()));
    }
    if values.len() > MAX_OTSU_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "otsu supports at most {MAX_OTSU_SAMPLES} samples"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateHistogram("non-finite value".into()));
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }),
    };
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::DegenerateHistogram(
            "need at least two distinct values".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u64; bins];
    for &v in values {
        hist[histogram_bin(v, lo, width, bins)] += 1;
    }
    let n: u64 = hist.iter().sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &h)| i as u128 * h as u128).sum();

    let mut best: Option<(usize, u128, u64)> = None;
    let (mut n0, mut s0) = (0u64, 0u128);
    for (k, &h) in hist.iter().enumerate().take(bins - 1) {
        n0 += h;
        s0 += k as u128 * h as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = n as u128 * s0;
        let b = n0 as u128 * s;
        let diff = a.abs_diff(b);
        let num = diff * diff;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bnum, bden)) => wide_mul(num, bden) > wide_mul(bnum, den),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (bin, _, _) = best.ok_or_else(|| {
        Error::DegenerateHistogram("all values fall into a single bin".into())
    })?;
    Ok(OtsuSplit {
        threshold: lo + (bin + 1) as f64 * width,
        bin,
        lo,
        bin_width: width,
        bins,
    })
}

/// Otsu threshold over `bins` equal bins of `range` (default: observed min..max).
pub fn otsu_threshold(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<f64> {
    otsu_split(values, bins, range).map(|s| s.threshold)
}

/// Per-pixel change intensity (l2 norm of the feature difference).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl IntensityMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.values[best] { i } else { best });
        (i / self.width, i % self.width)
    }
}

/// `|pre - post|_2` at every grid position.
pub fn cva_intensity(pre: &EmbeddingGrid, post: &EmbeddingGrid) -> Result<IntensityMap> {
    if pre.shape() != post.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {:?} with {:?}",
            pre.shape(),
            post.shape()
        )));
    }
    let values = pre
        .vectors()
        .zip(post.vectors())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(IntensityMap {
        height: pre.height(),
        width: pre.width(),
        values,
    })
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_upsample(map: &IntensityMap, size: (usize, usize)) -> IntensityMap {
    let (h, w) = size;
    if (map.height, map.width) == size {
        return map.clone();
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..w).map(|x| axis(x, map.width, w)).collect();
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = axis(y, map.height, h);
        for &(x0, x1, fx) in &cols {
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    IntensityMap {
        height: h,
        width: w,
        values,
    }
}

/// Change vector analysis: intensity at image resolution and its binarization.
///
/// With `threshold = None` the Otsu threshold over all pixel intensities is
/// used; a degenerate (constant) intensity field yields an empty map.
pub fn cva_change_map(
    pre: &EmbeddingGrid,
    post: &EmbeddingGrid,
    image_size: (usize, usize),
    threshold: Option<f64>,
) -> Result<(IntensityMap, ChangeMap)> {
    let intensity = bilinear_upsample(&cva_intensity(pre, post)?, image_size);
    let flags: Vec<bool> = match threshold {
        Some(t) => intensity.values.iter().map(|&v| v >= t).collect(),
        None => match otsu_split(&intensity.values, DEFAULT_OTSU_BINS, None) {
            Ok(split) => intensity.values.iter().map(|&v| split.is_upper(v)).collect(),
            Err(Error::DegenerateHistogram(reason)) => {
                tracing::debug!("cva: {reason}; no change flagged");
                vec![false; intensity.values.len()]
            }
            Err(e) => return Err(e),
        },
    };
    let map = ChangeMap::new(image_size.0, image_size.1, flags)?;
    Ok((intensity, map))
}

/// Geometric matching: a proposal is unchanged when some opposite-time
/// proposal overlaps it with IoU strictly above `iou_threshold`.
///
/// Score is `1 - max IoU`.
pub fn mask_match(session: &Session, iou_threshold: f64) -> Result<Vec<ChangeProposal>> {
    let mut out = Vec::new();
    for time in Time::BOTH {
        let others = session.proposals(time.other());
        let scored: Vec<Option<ChangeProposal>> = session
            .proposals(time)
            .par_iter()
            .map(|p| {
                let mut best = 0f64;
                for o in others {
                    best = best.max(mask_iou(&p.mask, &o.mask)?);
                }
                Ok((best <= iou_threshold).then(|| ChangeProposal::from_score(p, 1.0 - best)))
            })
            .collect::<Result<_>>()?;
        out.extend(scored.into_iter().flatten());
    }
    sort_changes(&mut out);
    Ok(out)
}

/// Fraction of the proposal's pixels flagged in `map`.
pub fn flagged_fraction(p: &ProposalRecord, map: &ChangeMap) -> f64 {
    let mut flagged = 0usize;
    for (row, x0, x1) in p.mask.row_segments() {
        flagged += (x0..x1).filter(|&x| map.get(row, x)).count();
    }
    flagged as f64 / p.mask.area() as f64
}

/// Instance-level voting over a pixel change map: a proposal changes when
/// strictly more than `vote_threshold` of its pixels are flagged.
pub fn vote_proposals(session: &Session, map: &ChangeMap, vote_threshold: f64) -> Vec<ChangeProposal> {
    let mut out: Vec<ChangeProposal> = Time::BOTH
        .iter()
        .flat_map(|&t| session.proposals(t))
        .filter_map(|p| {
            let fraction = flagged_fraction(p, map);
            (fraction > vote_threshold).then(|| ChangeProposal::from_score(p, fraction))
        })
        .collect();
    sort_changes(&mut out);
    out
}

/// CVA over the session's embedding grids (Otsu threshold) plus instance voting.
pub fn cva_match(session: &Session, vote_threshold: f64) -> Result<Vec<ChangeProposal>> {
    let (_, map) = cva_change_map(
        session.grid(Time::T0),
        session.grid(Time::T1),
        session.image_size(),
        None,
    )?;
    Ok(vote_proposals(session, &map, vote_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interchange::{BinaryMask, RleMask};

    #[test]
    fn otsu_two_masses_lowest_edge() {
        let mut v = vec![0.0; 100];
        v.extend(vec![10.0; 100]);
        let t = otsu_threshold(&v, 256, Some((0.0, 10.0))).unwrap();
        assert_eq!(t, 10.0 / 256.0);
    }

    #[test]
    fn otsu_rejects_constant() {
        assert!(matches!(otsu_threshold(&[3.0; 10], 256, None), Err(Error::DegenerateHistogram(_))));
        assert!(otsu_threshold(&[3.0; 10], 256, Some((0.0, 10.0))).is_err());
    }

    #[test]
    fn wide_mul_matches_naive() {
        let a = u128::MAX / 3;
        let b = u64::MAX - 7;
        let (hi, lo) = wide_mul(a, b);
        // check (hi * 2^64 + lo) mod 2^128 == a * b mod 2^128
        assert_eq!((hi << 64).wrapping_add(lo as u128), a.wrapping_mul(b as u128));
        assert_eq!(wide_mul(5, 7), (0, 35));
    }

    #[test]
    fn identical_grids_have_no_change() {
        let g = EmbeddingGrid::from_fn(4, 4, 3, |r, c, k| (r + c * k) as f32).unwrap();
        let (i, m) = cva_change_map(&g, &g, (16, 16), Some(0.1)).unwrap();
        assert!(i.values.iter().all(|&v| v == 0.0));
        assert_eq!(m.count_ones(), 0);
        let (_, m) = cva_change_map(&g, &g, (16, 16), None).unwrap();
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn constant_shift_gives_constant_intensity() {
        let g = EmbeddingGrid::from_fn(3, 3, 2, |r, c, k| (r * 3 + c + k) as f32).unwrap();
        let shifted = g.map_channels(|k, v| v + if k == 0 { 3.0 } else { 4.0 }).unwrap();
        let (i, _) = cva_change_map(&g, &shifted, (7, 5), Some(1.0)).unwrap();
        assert!(i.values.iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn single_cell_difference_peaks_in_that_cell() {
        let pre = EmbeddingGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let post = EmbeddingGrid::new(2, 2, 1, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        let (i, _) = cva_change_map(&pre, &post, (8, 8), Some(1.0)).unwrap();
        let (y, x) = i.argmax();
        assert!(y >= 4 && x < 4, "argmax {y},{x}");
        assert_eq!(i.get(7, 0), 3.0);
        // half-pixel centers: pixel row 4 samples source row 0.625
        assert!((i.get(4, 0) - 1.875).abs() < 1e-12);
        assert_eq!(i.get(0, 7), 0.0);
    }

    #[test]
    fn cva_shape_mismatch() {
        let a = EmbeddingGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let b = EmbeddingGrid::new(1, 2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(cva_change_map(&a, &b, (4, 4), None), Err(Error::ShapeMismatch(_))));
    }

    fn grid() -> EmbeddingGrid {
        EmbeddingGrid::new(1, 1, 2, vec![1.0, 0.0]).unwrap()
    }

    fn rect(id: u64, t: Time, y0: usize, y1: usize, x0: usize, x1: usize) -> ProposalRecord {
        let m = BinaryMask::from_fn(8, 8, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x));
        ProposalRecord::new(id, RleMask::encode(&m), t)
    }

    #[test]
    fn mask_match_cases() {
        let same = |t| vec![rect(1, t, 0, 4, 0, 4), rect(2, t, 5, 8, 5, 8)];
        let s = Session::new((8, 8), grid(), grid(), same(Time::T0), same(Time::T1)).unwrap();
        assert!(mask_match(&s, 0.5).unwrap().is_empty());

        let s = Session::new((8, 8), grid(), grid(), same(Time::T0), vec![]).unwrap();
        let out = mask_match(&s, 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.score == 1.0));

        // 4x4 vs 4x2 inside it: IoU exactly 0.5 -> still a change
        let s = Session::new(
            (8, 8),
            grid(),
            grid(),
            vec![rect(1, Time::T0, 0, 4, 0, 4)],
            vec![rect(1, Time::T1, 0, 4, 0, 2)],
        )
        .unwrap();
        let out = mask_match(&s, 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.score == 0.5));
    }

    #[test]
    fn voting_is_strict() {
        let s = Session::new(
            (8, 8),
            grid(),
            grid(),
            vec![rect(1, Time::T0, 0, 4, 0, 4)],
            vec![rect(2, Time::T1, 4, 8, 4, 8)],
        )
        .unwrap();
        let all = BinaryMask::from_fn(8, 8, |_, _| true);
        let out = vote_proposals(&s, &all, 0.5);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.score == 1.0));
        assert!(vote_proposals(&s, &BinaryMask::zeros(8, 8), 0.5).is_empty());
        // exactly half of proposal 1 flagged
        let half = BinaryMask::from_fn(8, 8, |y, _| y < 2);
        assert!(vote_proposals(&s, &half, 0.5).is_empty());
        let more = BinaryMask::from_fn(8, 8, |y, x| y < 2 || (y == 2 && x == 0));
        assert_eq!(vote_proposals(&s, &more, 0.5).len(), 1);
    }
}
