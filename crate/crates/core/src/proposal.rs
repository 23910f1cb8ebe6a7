//! Mask geometry, proposal post-processing and mask-embedding pooling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;
use crate::interchange::{ProposalRecord, RleMask, Time};

/// Intersection over union of two same-size masks.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Keeps proposals whose quality scores reach both thresholds (inclusive).
pub fn quality_filter(
    candidates: &[ProposalRecord],
    min_pred_iou: f64,
    min_stability: f64,
) -> Vec<ProposalRecord> {
    candidates
        .iter()
        .filter(|p| p.predicted_iou >= min_pred_iou && p.stability_score >= min_stability)
        .cloned()
        .collect()
}

/// Greedy suppression over `masks` visited in `order`; returns kept indices in visit order.
pub(crate) fn greedy_suppress(masks: &[&RleMask], order: &[usize], iou_threshold: f64) -> Result<Vec<usize>> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        let mut suppressed = false;
        for &k in &kept {
            if mask_iou(masks[i], masks[k])? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Non-maximum suppression keyed on predicted IoU (ties: lower id first).
///
/// Output is sorted by descending predicted IoU.
pub fn nms(proposals: &[ProposalRecord], iou_threshold: f64) -> Result<Vec<ProposalRecord>> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .predicted_iou
            .total_cmp(&proposals[a].predicted_iou)
            .then(proposals[a].id.cmp(&proposals[b].id))
    });
    let masks: Vec<&RleMask> = proposals.iter().map(|p| &p.mask).collect();
    Ok(greedy_suppress(&masks, &order, iou_threshold)?
        .into_iter()
        .map(|i| proposals[i].clone())
        .collect())
}

/// Post-processing applied to raw grid-prompt candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalFilter {
    pub min_pred_iou: f64,
    pub min_stability: f64,
    pub nms_iou: f64,
}

impl Default for ProposalFilter {
    fn default() -> Self {
        Self {
            min_pred_iou: 0.5,
            min_stability: 0.8,
            nms_iou: 0.7,
        }
    }
}

impl ProposalFilter {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_pred_iou", self.min_pred_iou),
            ("min_stability", self.min_stability),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn apply(&self, candidates: &[ProposalRecord]) -> Result<Vec<ProposalRecord>> {
        self.validate()?;
        nms(
            &quality_filter(candidates, self.min_pred_iou, self.min_stability),
            self.nms_iou,
        )
    }
}

/// Grid cells covered by a mask at embedding resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridFootprint {
    /// `(row, col)` cells in row-major order.
    pub cells: Vec<(usize, usize)>,
    pub fallback_used: bool,
}

/// Pixel index -> cell index along one axis, and each cell's pixel extent.
struct AxisMap {
    cell_of: Vec<usize>,
    start: Vec<usize>,
    end: Vec<usize>,
}

impl AxisMap {
    fn new(pixels: usize, cells: usize) -> Self {
        let cell_of: Vec<usize> = (0..pixels).map(|p| p * cells / pixels).collect();
        let mut start = vec![usize::MAX; cells];
        let mut end = vec![0; cells];
        for (p, &c) in cell_of.iter().enumerate() {
            start[c] = start[c].min(p);
            end[c] = p + 1;
        }
        for c in 0..cells {
            if start[c] == usize::MAX {
                start[c] = end[c];
            }
        }
        Self { cell_of, start, end }
    }

    fn len(&self, c: usize) -> usize {
        self.end[c] - self.start[c]
    }
}

/// Projects a full-resolution mask onto an `(height, width)` grid.
///
/// Pixel `y` belongs to cell row `y * He / h` (integer division), likewise for
/// columns. A cell is in the footprint when at least half of its pixels are
/// covered. If no cell qualifies, the cell holding the mask centroid is used.
pub fn project_mask_to_grid(mask: &RleMask, grid: (usize, usize)) -> Result<GridFootprint> {
    let (gh, gw) = grid;
    let (h, w) = mask.size();
    if mask.is_empty() {
        return Err(Error::EmptyMask(None));
    }
    let rows = AxisMap::new(h, gh);
    let cols = AxisMap::new(w, gw);
    let mut covered = vec![0u64; gh * gw];
    for (row, x0, x1) in mask.row_segments() {
        let r = rows.cell_of[row];
        let mut c = cols.cell_of[x0];
        while c < gw && cols.start[c] < x1 {
            let lo = x0.max(cols.start[c]);
            let hi = x1.min(cols.end[c]);
            if hi > lo {
                covered[r * gw + c] += (hi - lo) as u64;
            }
            c += 1;
        }
    }
    let mut cells = Vec::new();
    for r in 0..gh {
        for c in 0..gw {
            let total = (rows.len(r) * cols.len(c)) as u64;
            if total > 0 && 2 * covered[r * gw + c] >= total {
                cells.push((r, c));
            }
        }
    }
    if !cells.is_empty() {
        return Ok(GridFootprint {
            cells,
            fallback_used: false,
        });
    }
    let (cx, cy) = mask.centroid().expect("nonempty mask has a centroid");
    let py = ((cy + 0.5).floor() as usize).min(h - 1);
    let px = ((cx + 0.5).floor() as usize).min(w - 1);
    Ok(GridFootprint {
        cells: vec![(rows.cell_of[py], cols.cell_of[px])],
        fallback_used: true,
    })
}

/// A pooled d_m-vector for one proposal footprint on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEmbedding {
    pub vector: Vec<f64>,
    pub proposal_id: u64,
    /// Grid the vector was pooled from.
    pub embedding_time: Time,
    /// Time of the proposal that supplied the footprint.
    pub mask_time: Time,
}

impl MaskEmbedding {
    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Arithmetic mean of the grid vectors over the footprint cells.
pub fn pool(grid: &EmbeddingGrid, footprint: &GridFootprint) -> Vec<f64> {
    let mut sum = vec![0f64; grid.channels()];
    for &(r, c) in &footprint.cells {
        for (s, &v) in sum.iter_mut().zip(grid.vector(r, c)) {
            *s += f64::from(v);
        }
    }
    let n = footprint.cells.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

pub fn mask_embedding(
    grid: &EmbeddingGrid,
    footprint: &GridFootprint,
    proposal_id: u64,
    embedding_time: Time,
    mask_time: Time,
) -> MaskEmbedding {
    MaskEmbedding {
        vector: pool(grid, footprint),
        proposal_id,
        embedding_time,
        mask_time,
    }
}

/// Footprints for a batch of proposals, in input order.
pub fn project_all(proposals: &[ProposalRecord], grid: (usize, usize)) -> Result<Vec<GridFootprint>> {
    proposals
        .par_iter()
        .map(|p| {
            project_mask_to_grid(&p.mask, grid).map_err(|e| match e {
                Error::EmptyMask(None) => Error::EmptyMask(Some(p.id)),
                other => other,
            })
        })
        .collect()
}

/// Mask embeddings of a batch of proposals pooled from `grid`, in input order.
pub fn extract_embeddings(
    grid: &EmbeddingGrid,
    embedding_time: Time,
    proposals: &[ProposalRecord],
) -> Result<Vec<MaskEmbedding>> {
    let footprints = project_all(proposals, (grid.height(), grid.width()))?;
    Ok(proposals
        .par_iter()
        .zip(footprints.par_iter())
        .map(|(p, f)| mask_embedding(grid, f, p.id, embedding_time, p.source_time))
        .collect())
}
