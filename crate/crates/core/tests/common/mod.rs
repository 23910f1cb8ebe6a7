//! Brute-force reference implementations shared by the integration tests.
//!
//! These work on dense rasters and plain loops and deliberately avoid the
//! crate's own geometry and selection helpers.

#![allow(dead_code)]

use changekit::interchange::{RleMask, Session, Time};
use changekit::EmbeddingGrid;
use num_bigint::BigInt;
use num_rational::BigRational;

/// Cells whose pixel block is at least half covered, else the centroid cell.
pub fn footprint(mask: &RleMask, gh: usize, gw: usize) -> Vec<(usize, usize)> {
    let dense = mask.decode();
    let (h, w) = mask.size();
    // one pass over the pixels, tallying each cell's size and coverage
    let mut total = vec![0u64; gh * gw];
    let mut covered = vec![0u64; gh * gw];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * gh / h) * gw + x * gw / w;
            total[cell] += 1;
            covered[cell] += u64::from(dense.get(y, x));
        }
    }
    let mut cells = Vec::new();
    for r in 0..gh {
        for c in 0..gw {
            let i = r * gw + c;
            if total[i] > 0 && 2 * covered[i] >= total[i] {
                cells.push((r, c));
            }
        }
    }
    if cells.is_empty() {
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0f64);
        for y in 0..h {
            for x in 0..w {
                if dense.get(y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        let py = ((sy / n + 0.5).floor() as usize).min(h - 1);
        let px = ((sx / n + 0.5).floor() as usize).min(w - 1);
        cells.push((py * gh / h, px * gw / w));
    }
    cells
}

pub fn pool(grid: &EmbeddingGrid, cells: &[(usize, usize)]) -> Vec<f64> {
    let d = grid.channels();
    let mut sum = vec![0f64; d];
    for &(r, c) in cells {
        let at = (r * grid.width() + c) * d;
        for (s, &v) in sum.iter_mut().zip(&grid.values()[at..at + d]) {
            *s += f64::from(v);
        }
    }
    for s in &mut sum {
        *s /= cells.len() as f64;
    }
    sum
}

/// `(score, angle_deg)` under cosine scoring.
pub fn cosine_score(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mut dot = 0f64;
    let (mut nx, mut ny) = (0f64, 0f64);
    for i in 0..x.len() {
        dot += x[i] * y[i];
    }
    for i in 0..x.len() {
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    let cos = (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0);
    (-cos, cos.acos().to_degrees())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub time: Time,
    pub id: u64,
    pub score: f64,
    pub angle: f64,
}

/// Double loop over both times' proposals.
pub fn candidates(session: &Session, times: &[Time]) -> Vec<Scored> {
    let mut out = Vec::new();
    for &t in times {
        let own = session.grid(t);
        let other = session.grid(if t == Time::T0 { Time::T1 } else { Time::T0 });
        for p in session.proposals(t) {
            let cells = footprint(&p.mask, own.height(), own.width());
            let (score, angle) = cosine_score(&pool(own, &cells), &pool(other, &cells));
            out.push(Scored {
                time: t,
                id: p.id,
                score,
                angle,
            });
        }
    }
    out
}

pub fn full_sort(c: &mut [Scored]) {
    c.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then((a.time == Time::T1).cmp(&(b.time == Time::T1)))
            .then(a.id.cmp(&b.id))
    });
}

/// Exhaustive Otsu over every split of a `bins`-bin histogram, exact
/// rational arithmetic on bin indices. Returns `(last lower bin, threshold)`.
pub fn otsu(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Option<(usize, f64)> {
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0i64; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let i = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        hist[i] += 1;
    }
    let total: i64 = hist.iter().sum();
    let mut best: Option<(usize, BigRational)> = None;
    for k in 0..bins - 1 {
        let n0: i64 = hist[..=k].iter().sum();
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: i64 = hist[..=k].iter().enumerate().map(|(i, h)| i as i64 * h).sum();
        let s1: i64 = hist[k + 1..].iter().enumerate().map(|(i, h)| (i + k + 1) as i64 * h).sum();
        let r = |a: i64, b: i64| BigRational::new(BigInt::from(a), BigInt::from(b));
        let w0 = r(n0, total);
        let w1 = r(n1, total);
        let diff = r(s0, n0) - r(s1, n1);
        let between = w0 * w1 * diff.clone() * diff;
        if best.as_ref().is_none_or(|(_, b)| between > *b) {
            best = Some((k, between));
        }
    }
    best.map(|(k, _)| (k, lo + (k + 1) as f64 * width))
}

pub fn bin_of(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    let b = ((v - lo) / width).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    TopK(usize),
    Threshold(f64),
    Auto,
}

pub fn select(mut cands: Vec<Scored>, mode: Mode) -> Vec<Scored> {
    full_sort(&mut cands);
    match mode {
        Mode::TopK(k) => cands.into_iter().take(k).collect(),
        Mode::Threshold(t) => cands.into_iter().filter(|c| c.angle >= t).collect(),
        Mode::Auto => {
            let angles: Vec<f64> = cands.iter().map(|c| c.angle).collect();
            match otsu(&angles, 256, Some((0.0, 180.0))) {
                Some((k, _)) => cands
                    .into_iter()
                    .filter(|c| bin_of(c.angle, 0.0, 180.0 / 256.0, 256) > k)
                    .collect(),
                None => Vec::new(),
            }
        }
    }
}

fn dense_iou_counts(a: &RleMask, b: &RleMask) -> (u64, u64) {
    let (da, db) = (a.decode(), b.decode());
    let (mut inter, mut union) = (0, 0);
    for (x, y) in da.data().iter().zip(db.data()) {
        inter += u64::from(*x && *y);
        union += u64::from(*x || *y);
    }
    (inter, union)
}

/// Greedy score-order matching per IoU threshold; returns matched counts for
/// thresholds 0.50, 0.55, ..., 0.95.
pub fn greedy_matches(preds: &[RleMask], gts: &[RleMask], max_dets: usize) -> [usize; 10] {
    let ious: Vec<Vec<(u64, u64)>> =
        preds.iter().take(max_dets).map(|p| gts.iter().map(|g| dense_iou_counts(p, g)).collect()).collect();
    let mut out = [0; 10];
    for (t, slot) in out.iter_mut().enumerate() {
        let pct = 50 + 5 * t as u64;
        let mut used = vec![false; gts.len()];
        for row in &ious {
            let mut best: Option<usize> = None;
            for (j, &(i, u)) in row.iter().enumerate() {
                if used[j] || u == 0 || 100 * i < pct * u {
                    continue;
                }
                // i/u > bi/bu, compared by cross-multiplication
                if best.is_none_or(|b| i * row[b].1 > row[b].0 * u) {
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
                *slot += 1;
            }
        }
    }
    out
}

/// Largest matching per IoU threshold over all assignments.
pub fn optimal_matches(preds: &[RleMask], gts: &[RleMask]) -> [usize; 10] {
    let ious: Vec<Vec<(u64, u64)>> =
        preds.iter().map(|p| gts.iter().map(|g| dense_iou_counts(p, g)).collect()).collect();
    let mut out = [0; 10];
    for (t, slot) in out.iter_mut().enumerate() {
        let pct = 50 + 5 * t as u64;
        let ok = |p: usize, g: usize| {
            let (i, u) = ious[p][g];
            u > 0 && 100 * i >= pct * u
        };
        fn best(p: usize, used: &mut Vec<bool>, n: usize, ok: &dyn Fn(usize, usize) -> bool) -> usize {
            if p == n {
                return 0;
            }
            let mut m = best(p + 1, used, n, ok);
            for g in 0..used.len() {
                if !used[g] && ok(p, g) {
                    used[g] = true;
                    m = m.max(1 + best(p + 1, used, n, ok));
                    used[g] = false;
                }
            }
            m
        }
        *slot = best(0, &mut vec![false; gts.len()], preds.len(), &ok);
    }
    out
}
