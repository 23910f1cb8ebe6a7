use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dense binary raster, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.height, self.width, self.count_ones())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::SizeMismatch(format!(
                "{height}x{width} raster needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::SizeMismatch(format!(
                "cannot union {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }
}

/// Scan order of an RLE counts list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RleOrder {
    /// The engine's native order: rows top to bottom, each row left to right.
    #[default]
    RowMajor,
    /// The column-major order used by common detection datasets.
    ColMajor,
}

impl FromStr for RleOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row" | "row-major" => Ok(RleOrder::RowMajor),
            "col" | "column" | "col-major" | "column-major" => Ok(RleOrder::ColMajor),
            _ => Err(format!("unknown rle order {s:?} (expected row-major or col-major)")),
        }
    }
}

/// Run-length encoded binary mask.
///
/// Runs alternate zeros and ones in row-major order, starting with a (possibly
/// empty) zero run. The stored counts are always canonical: no zero-length
/// run except the leading one, so equal masks have equal counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl RleMask {
    /// Builds a mask from row-major counts, canonicalizing them.
    pub fn from_counts(height: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let pixels = (height as u64) * (width as u64);
        if total != pixels {
            return Err(Error::Rle(format!(
                "counts sum to {total} but a {height}x{width} mask has {pixels} pixels"
            )));
        }
        Ok(Self {
            height,
            width,
            counts: canonicalize(&counts),
        })
    }

    pub fn from_ordered_counts(
        height: usize,
        width: usize,
        counts: Vec<u32>,
        order: RleOrder,
    ) -> Result<Self> {
        match order {
            RleOrder::RowMajor => Self::from_counts(height, width, counts),
            RleOrder::ColMajor => {
                // decode as a width x height raster, then transpose
                let transposed = Self::from_counts(width, height, counts)?.decode();
                let dense = BinaryMask::from_fn(height, width, |y, x| transposed.get(x, y));
                Ok(Self::encode(&dense))
            }
        }
    }

    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in mask.data() {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        if run > 0 {
            counts.push(run);
        }
        Self {
            height: mask.height(),
            width: mask.width(),
            counts: canonicalize(&counts),
        }
    }

    pub fn decode(&self) -> BinaryMask {
        let mut data = Vec::with_capacity(self.height * self.width);
        let mut value = false;
        for &c in &self.counts {
            data.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn ordered_counts(&self, order: RleOrder) -> Vec<u32> {
        match order {
            RleOrder::RowMajor => self.counts.clone(),
            RleOrder::ColMajor => {
                let dense = self.decode();
                let transposed = BinaryMask::from_fn(self.width, self.height, |x, y| dense.get(y, x));
                Self::encode(&transposed).counts
            }
        }
    }

    /// Foreground runs as `(flat start index, length)`.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0usize;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as usize;
            (i % 2 == 1 && c > 0).then_some((start, c as usize))
        })
    }

    /// Foreground pixels split per row as `(row, x_start, x_end_exclusive)`.
    pub fn row_segments(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let width = self.width;
        self.foreground_runs().flat_map(move |(start, len)| {
            let end = start + len;
            let mut segments = Vec::new();
            let mut s = start;
            while s < end {
                let row = s / width;
                let row_end = ((row + 1) * width).min(end);
                segments.push((row, s - row * width, row_end - row * width));
                s = row_end;
            }
            segments
        })
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        if self.size() != other.size() {
            return Err(Error::SizeMismatch(format!(
                "masks are {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let a: Vec<_> = self.foreground_runs().collect();
        let b: Vec<_> = other.foreground_runs().collect();
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let (sa, la) = a[i];
            let (sb, lb) = b[j];
            let lo = sa.max(sb);
            let hi = (sa + la).min(sb + lb);
            if hi > lo {
                total += (hi - lo) as u64;
            }
            if sa + la <= sb + lb {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = y * self.width + x;
        self.foreground_runs()
            .take_while(|&(s, _)| s <= idx)
            .any(|(s, l)| idx < s + l)
    }

    /// Mean pixel coordinate `(x, y)` of the foreground, in pixel-index units.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0u64);
        for (row, x0, x1) in self.row_segments() {
            let len = (x1 - x0) as u64;
            // sum of x0..x1-1
            sx += (x0 + x1 - 1) as f64 * len as f64 / 2.0;
            sy += row as f64 * len as f64;
            n += len;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

fn canonicalize(counts: &[u32]) -> Vec<u32> {
    // even indices are zero runs, odd indices one runs
    let mut out = vec![0u32];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        if i % 2 == (out.len() - 1) % 2 {
            *out.last_mut().unwrap() += c;
        } else {
            out.push(c);
        }
    }
    if out == [0] {
        out.clear();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::from_fn(rows.len(), rows[0].len(), |y, x| rows[y][x] == 1)
    }

    #[test]
    fn degenerate_masks() {
        assert_eq!(RleMask::encode(&BinaryMask::zeros(3, 3)).counts(), &[9]);
        let ones = BinaryMask::from_fn(3, 3, |_, _| true);
        assert_eq!(RleMask::encode(&ones).counts(), &[0, 9]);
    }

    #[test]
    fn diagonal_scan() {
        let m = mask(&[&[1, 0], &[0, 1]]);
        assert_eq!(RleMask::encode(&m).counts(), &[0, 1, 2, 1]);
    }

    #[test]
    fn counts_must_cover_raster() {
        assert!(RleMask::from_counts(2, 2, vec![1, 4]).is_err());
        assert!(RleMask::from_counts(2, 2, vec![1, 2]).is_err());
    }

    #[test]
    fn zero_length_runs_are_merged() {
        let rle = RleMask::from_counts(1, 6, vec![1, 2, 0, 1, 2]).unwrap();
        assert_eq!(rle.counts(), &[1, 3, 2]);
        let rle = RleMask::from_counts(1, 4, vec![0, 0, 2, 2]).unwrap();
        assert_eq!(rle.counts(), &[2, 2]);
        let rle = RleMask::from_counts(1, 4, vec![0, 1, 0, 3]).unwrap();
        assert_eq!(rle.counts(), &[0, 4]);
    }

    #[test]
    fn geometry_queries() {
        let m = mask(&[&[0, 0, 0], &[0, 1, 1], &[0, 1, 1]]);
        let rle = RleMask::encode(&m);
        assert_eq!(rle.area(), 4);
        assert!(rle.contains(1, 1));
        assert!(!rle.contains(0, 1));
        assert!(!rle.contains(5, 5));
        assert_eq!(rle.centroid(), Some((1.5, 1.5)));
        let segs: Vec<_> = rle.row_segments().collect();
        assert_eq!(segs, vec![(1, 1, 3), (2, 1, 3)]);
    }

    #[test]
    fn col_major_conversion() {
        // rows [1,1],[0,0]: column-major scan is 1,0,1,0
        let m = mask(&[&[1, 1], &[0, 0]]);
        let rle = RleMask::encode(&m);
        assert_eq!(rle.ordered_counts(RleOrder::ColMajor), vec![0, 1, 1, 1, 1]);
        let back = RleMask::from_ordered_counts(2, 2, vec![0, 1, 1, 1, 1], RleOrder::ColMajor).unwrap();
        assert_eq!(back, rle);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |data| BinaryMask::new(h, w, data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn roundtrip_and_canonical(m in arb_mask()) {
            let rle = RleMask::encode(&m);
            prop_assert_eq!(&rle.decode(), &m);
            let again = RleMask::encode(&rle.decode());
            prop_assert_eq!(again.counts(), rle.counts());
            prop_assert_eq!(rle.area() as usize, m.count_ones());
            let col = rle.ordered_counts(RleOrder::ColMajor);
            let back = RleMask::from_ordered_counts(m.height(), m.width(), col, RleOrder::ColMajor).unwrap();
            prop_assert_eq!(back, rle);
        }

        #[test]
        fn intersection_matches_dense(a in arb_mask(), seed in any::<u64>()) {
            let b = BinaryMask::from_fn(a.height(), a.width(), |y, x| {
                (seed >> ((y * 7 + x * 3) % 64)) & 1 == 1
            });
            let dense = a.data().iter().zip(b.data()).filter(|(&p, &q)| p && q).count() as u64;
            prop_assert_eq!(RleMask::encode(&a).intersection_area(&RleMask::encode(&b)).unwrap(), dense);
        }
    }
}
