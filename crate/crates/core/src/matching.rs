//! Change scoring and bitemporal latent matching.
//!
//! Every proposal of either time is pooled twice with the same footprint: once
//! on its own grid and once on the other time's grid. The negative cosine
//! similarity of the two vectors is its change confidence; its arc-cosine is
//! the change angle (0 degrees for unchanged semantics, 180 for opposite).
//! Candidates from both directions are then ranked and selected by top-k,
//! a fixed angle threshold, or an Otsu threshold over the angle distribution.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::otsu_split;
use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;
use crate::interchange::{BinaryMask, ProposalRecord, RleMask, Session, Time};
use crate::proposal::{self, greedy_suppress, l2_norm, pool, project_mask_to_grid, MaskEmbedding};

/// Pixel-level binary change raster (1 = changed).
pub type ChangeMap = BinaryMask;

/// Default operating angle of the fully automatic mode.
pub const DEFAULT_ANGLE_THRESHOLD_DEG: f64 = 155.0;
pub const DEFAULT_SEMANTIC_ANGLE_DEG: f64 = 60.0;
/// Search radius for resolving a point that falls outside every proposal.
pub const POINT_RESOLUTION_RADIUS_PX: f64 = 50.0;
pub const OTSU_ANGLE_BINS: usize = 256;

/// An instance mask asserted to have changed, with its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProposal {
    pub proposal_id: u64,
    pub source_time: Time,
    pub mask: RleMask,
    /// Change confidence in `[-1, 1]` (cosine scoring) or `-x.y/d_m` (raw scoring).
    pub score: f64,
    pub angle_deg: f64,
}

impl ChangeProposal {
    /// A change whose angle is derived from a cosine-like score.
    pub fn from_score(proposal: &ProposalRecord, score: f64) -> Self {
        Self {
            proposal_id: proposal.id,
            source_time: proposal.source_time,
            mask: proposal.mask.clone(),
            score,
            angle_deg: angle_from_cosine(-score),
        }
    }
}

/// Total ranking order: score descending, then T0 before T1, then ascending id.
pub fn rank_order(a: &ChangeProposal, b: &ChangeProposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_time.cmp(&b.source_time))
        .then(a.proposal_id.cmp(&b.proposal_id))
}

pub fn sort_changes(changes: &mut [ChangeProposal]) {
    changes.sort_by(rank_order);
}

pub fn angle_from_cosine(cosine: f64) -> f64 {
    cosine.clamp(-1.0, 1.0).acos().to_degrees()
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $canon:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($canon $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(format!(concat!("unknown ", stringify!($name), " {:?}; expected one of: ") , s)
                        + &[$($canon),+].join(", ")),
                }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $canon,)+ })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    TopK,
    AngleThreshold,
    AutoOtsu,
}
string_enum!(SelectionMode { TopK => "topk", AngleThreshold => "threshold" | "angle", AutoOtsu => "auto" | "otsu" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// `-(x.y) / (|x||y|)`
    Cosine,
    /// `-(x.y) / d_m`, exact only when both vectors lie on the sqrt(d_m) sphere.
    Eq1Raw,
}
string_enum!(Scoring { Cosine => "cosine", Eq1Raw => "raw" | "eq1" | "eq1_raw" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Bidirectional,
    /// Only T0 proposals, scored against the T1 grid.
    Forward,
    /// Only T1 proposals, scored against the T0 grid.
    Backward,
}
string_enum!(Direction { Bidirectional => "bidirectional" | "both", Forward => "forward" | "t_to_t1", Backward => "backward" | "t1_to_t" });

impl Direction {
    fn times(self) -> &'static [Time] {
        match self {
            Direction::Bidirectional => &Time::BOTH,
            Direction::Forward => &[Time::T0],
            Direction::Backward => &[Time::T1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub mode: SelectionMode,
    pub k: usize,
    pub angle_threshold_deg: f64,
    pub scoring: Scoring,
    pub direction: Direction,
    /// Optional NMS over the selected changes.
    pub dedupe_iou: Option<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::AngleThreshold,
            k: 1000,
            angle_threshold_deg: DEFAULT_ANGLE_THRESHOLD_DEG,
            scoring: Scoring::Cosine,
            direction: Direction::Bidirectional,
            dedupe_iou: None,
        }
    }
}

impl MatchConfig {
    pub fn top_k(k: usize) -> Self {
        Self {
            mode: SelectionMode::TopK,
            k,
            ..Self::default()
        }
    }

    pub fn threshold(angle_deg: f64) -> Self {
        Self {
            mode: SelectionMode::AngleThreshold,
            angle_threshold_deg: angle_deg,
            ..Self::default()
        }
    }

    pub fn auto() -> Self {
        Self {
            mode: SelectionMode::AutoOtsu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SelectionMode::TopK && self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1 in topk mode".into()));
        }
        if !(0.0..=180.0).contains(&self.angle_threshold_deg) {
            return Err(Error::InvalidConfig(format!(
                "angle threshold must lie in [0, 180], got {}",
                self.angle_threshold_deg
            )));
        }
        if let Some(t) = self.dedupe_iou {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("dedupe IoU must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Scores a pair of pooled vectors, returning `(score, angle_deg)`.
pub fn score_vectors(x: &[f64], y: &[f64], scoring: Scoring) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings have {} and {} channels",
            x.len(),
            y.len()
        )));
    }
    let d = dot(x, y);
    let norms = l2_norm(x) * l2_norm(y);
    match scoring {
        Scoring::Cosine => {
            if norms == 0.0 {
                return Err(Error::ZeroNorm("cosine scoring needs nonzero embeddings".into()));
            }
            let cosine = (d / norms).clamp(-1.0, 1.0);
            Ok((-cosine, angle_from_cosine(cosine)))
        }
        Scoring::Eq1Raw => {
            let score = -d / x.len() as f64;
            let angle = if norms == 0.0 { 90.0 } else { angle_from_cosine(d / norms) };
            Ok((score, angle))
        }
    }
}

pub fn change_score(x: &MaskEmbedding, y: &MaskEmbedding, scoring: Scoring) -> Result<(f64, f64)> {
    score_vectors(&x.vector, &y.vector, scoring).map_err(|e| match e {
        Error::ZeroNorm(_) => Error::ZeroNorm(format!(
            "proposal {} ({} mask) pooled on the {} or {} grid",
            x.proposal_id, x.mask_time, x.embedding_time, y.embedding_time
        )),
        other => other,
    })
}

/// Scores every proposal of the requested direction(s).
///
/// Output order: T0 proposals in file order, then T1 proposals.
pub fn candidates(session: &Session, scoring: Scoring, direction: Direction) -> Result<Vec<ChangeProposal>> {
    let mut out = Vec::new();
    for &time in direction.times() {
        let own = session.grid(time);
        let other = session.grid(time.other());
        let scored: Result<Vec<_>> = session
            .proposals(time)
            .par_iter()
            .map(|p| {
                let footprint = project_mask_to_grid(&p.mask, (own.height(), own.width()))?;
                let x = proposal::mask_embedding(own, &footprint, p.id, time, time);
                let x_hat = proposal::mask_embedding(other, &footprint, p.id, time.other(), time);
                let (score, angle_deg) = change_score(&x, &x_hat, scoring)?;
                Ok(ChangeProposal {
                    proposal_id: p.id,
                    source_time: time,
                    mask: p.mask.clone(),
                    score,
                    angle_deg,
                })
            })
            .collect();
        out.extend(scored?);
    }
    Ok(out)
}

/// Applies a selection mode to scored candidates; output is ranked.
pub fn select(candidates: &[ChangeProposal], config: &MatchConfig) -> Result<Vec<ChangeProposal>> {
    config.validate()?;
    let mut ranked = candidates.to_vec();
    sort_changes(&mut ranked);
    let mut selected = match config.mode {
        SelectionMode::TopK => {
            ranked.truncate(config.k);
            ranked
        }
        SelectionMode::AngleThreshold => ranked
            .into_iter()
            .filter(|c| c.angle_deg >= config.angle_threshold_deg)
            .collect(),
        SelectionMode::AutoOtsu => {
            let angles: Vec<f64> = ranked.iter().map(|c| c.angle_deg).collect();
            match otsu_split(&angles, OTSU_ANGLE_BINS, Some((0.0, 180.0))) {
                Ok(split) => ranked.into_iter().filter(|c| split.is_upper(c.angle_deg)).collect(),
                Err(e) => {
                    tracing::debug!("no separable angle distribution ({e}); selecting nothing");
                    Vec::new()
                }
            }
        }
    };
    if let Some(iou) = config.dedupe_iou {
        let masks: Vec<&RleMask> = selected.iter().map(|c| &c.mask).collect();
        let order: Vec<usize> = (0..selected.len()).collect();
        let keep = greedy_suppress(&masks, &order, iou)?;
        selected = keep.into_iter().map(|i| selected[i].clone()).collect();
    }
    Ok(selected)
}

/// The Otsu angle threshold the auto mode would use on these candidates.
pub fn auto_threshold(candidates: &[ChangeProposal]) -> Option<f64> {
    let angles: Vec<f64> = candidates.iter().map(|c| c.angle_deg).collect();
    otsu_split(&angles, OTSU_ANGLE_BINS, Some((0.0, 180.0)))
        .ok()
        .map(|s| s.threshold)
}

/// Scores candidates and selects changes in one call.
pub fn bitemporal_latent_match(session: &Session, config: &MatchConfig) -> Result<Vec<ChangeProposal>> {
    config.validate()?;
    select(&candidates(session, config.scoring, config.direction)?, config)
}

/// Union of the selected change masks.
pub fn rasterize_changes(changes: &[ChangeProposal], size: (usize, usize)) -> Result<ChangeMap> {
    let mut map = BinaryMask::zeros(size.0, size.1);
    for c in changes {
        if c.mask.size() != size {
            return Err(Error::SizeMismatch(format!(
                "change {} is {:?}, map is {size:?}",
                c.proposal_id,
                c.mask.size()
            )));
        }
        for (row, x0, x1) in c.mask.row_segments() {
            for x in x0..x1 {
                map.set(row, x, true);
            }
        }
    }
    Ok(map)
}

/// A single-time click in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryPoint {
    pub x: usize,
    pub y: usize,
    pub time: Time,
}

impl FromStr for QueryPoint {
    type Err = String;

    /// Parses `x,y,t` where `t` is `t0`/`t1` (or `0`/`1`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [x, y, t] = parts[..] else {
            return Err(format!("expected x,y,t but got {s:?}"));
        };
        Ok(QueryPoint {
            x: x.parse().map_err(|e| format!("bad x in {s:?}: {e}"))?,
            y: y.parse().map_err(|e| format!("bad y in {s:?}: {e}"))?,
            time: t.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointQuery {
    pub points: Vec<QueryPoint>,
    pub semantic_angle_deg: f64,
}

impl PointQuery {
    pub fn new(points: Vec<QueryPoint>) -> Self {
        Self {
            points,
            semantic_angle_deg: DEFAULT_SEMANTIC_ANGLE_DEG,
        }
    }

    pub fn with_angle(mut self, semantic_angle_deg: f64) -> Self {
        self.semantic_angle_deg = semantic_angle_deg;
        self
    }
}

/// Maps a click to the object proposal it designates.
///
/// The default implementation picks among the session's existing proposals; a
/// backend with a live mask decoder can substitute true point-prompt masks.
pub trait PointResolver: Sync {
    fn resolve(&self, point: &QueryPoint, session: &Session) -> Result<ProposalRecord>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NearestProposal;

impl PointResolver for NearestProposal {
    fn resolve(&self, point: &QueryPoint, session: &Session) -> Result<ProposalRecord> {
        let (h, w) = session.image_size();
        if point.x >= w || point.y >= h {
            return Err(Error::InvalidConfig(format!(
                "point ({}, {}) outside the {h}x{w} image",
                point.x, point.y
            )));
        }
        resolve_point_to_proposal(point, session.proposals(point.time)).cloned()
    }
}

/// Smallest proposal containing the point, else the nearest centroid within
/// 50 px. Ties go to the lower id.
pub fn resolve_point_to_proposal<'a>(
    point: &QueryPoint,
    proposals: &'a [ProposalRecord],
) -> Result<&'a ProposalRecord> {
    let containing = proposals
        .iter()
        .filter(|p| p.mask.contains(point.x, point.y))
        .min_by(|a, b| a.mask.area().cmp(&b.mask.area()).then(a.id.cmp(&b.id)));
    if let Some(p) = containing {
        return Ok(p);
    }
    let nearest = proposals
        .iter()
        .filter_map(|p| {
            let (cx, cy) = p.mask.centroid()?;
            Some((p, (cx - point.x as f64).hypot(cy - point.y as f64)))
        })
        .min_by(|(a, da), (b, db)| da.total_cmp(db).then(a.id.cmp(&b.id)));
    match nearest {
        Some((p, d)) if d <= POINT_RESOLUTION_RADIUS_PX => Ok(p),
        other => Err(Error::UnresolvablePoint {
            x: point.x,
            y: point.y,
            time: point.time,
            nearest_distance: other.map(|(_, d)| d),
        }),
    }
}

/// Mean of the query proposals' embeddings, each pooled on its own time's grid.
pub fn query_embedding(query: &PointQuery, session: &Session, resolver: &dyn PointResolver) -> Result<Vec<f64>> {
    if query.points.is_empty() {
        return Err(Error::InvalidConfig("a point query needs at least one point".into()));
    }
    let mut mean = vec![0f64; session.channels()];
    for point in &query.points {
        let proposal = resolver.resolve(point, session)?;
        let grid = session.grid(point.time);
        let footprint = project_mask_to_grid(&proposal.mask, (grid.height(), grid.width()))?;
        for (m, v) in mean.iter_mut().zip(pool(grid, &footprint)) {
            *m += v;
        }
    }
    let n = query.points.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if l2_norm(&mean) == 0.0 {
        return Err(Error::ZeroNorm("query embedding".into()));
    }
    Ok(mean)
}

fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    let norms = l2_norm(a) * l2_norm(b);
    if norms == 0.0 {
        return Err(Error::ZeroNorm("change embedding".into()));
    }
    Ok(angle_from_cosine(dot(a, b) / norms))
}

/// Smallest angle between `target` and the change's footprint pooled on either grid.
pub fn semantic_angle(change: &ChangeProposal, target: &[f64], session: &Session) -> Result<f64> {
    let grid: &EmbeddingGrid = session.grid(Time::T0);
    let footprint = project_mask_to_grid(&change.mask, (grid.height(), grid.width()))?;
    let mut best = f64::INFINITY;
    for time in Time::BOTH {
        let e = pool(session.grid(time), &footprint);
        best = best.min(angle_between(target, &e)?);
    }
    Ok(best)
}

pub fn point_query_filter(
    changes: &[ChangeProposal],
    query: &PointQuery,
    session: &Session,
) -> Result<Vec<ChangeProposal>> {
    point_query_filter_with(changes, query, session, &NearestProposal)
}

/// Keeps changes within `semantic_angle_deg` of the averaged query embedding.
pub fn point_query_filter_with(
    changes: &[ChangeProposal],
    query: &PointQuery,
    session: &Session,
    resolver: &dyn PointResolver,
) -> Result<Vec<ChangeProposal>> {
    if !(0.0..=180.0).contains(&query.semantic_angle_deg) {
        return Err(Error::InvalidConfig(format!(
            "semantic angle must lie in [0, 180], got {}",
            query.semantic_angle_deg
        )));
    }
    let target = query_embedding(query, session, resolver)?;
    let keep: Vec<bool> = changes
        .par_iter()
        .map(|c| Ok(semantic_angle(c, &target, session)? <= query.semantic_angle_deg))
        .collect::<Result<_>>()?;
    Ok(changes
        .iter()
        .zip(keep)
        .filter(|&(_c, k)| k).map(|(c, _k)| c.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interchange::BinaryMask;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> RleMask {
        RleMask::encode(&BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x)))
    }

    #[test]
    fn score_identities() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let (s, a) = score_vectors(&x, &x, Scoring::Cosine).unwrap();
        assert!((s + 1.0).abs() < 1e-12 && a.abs() < 1e-5);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let (s, a) = score_vectors(&x, &neg, Scoring::Cosine).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && (a - 180.0).abs() < 1e-5);
        let (s, a) = score_vectors(&[1.0, 0.0], &[0.0, 2.0], Scoring::Cosine).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(a, 90.0);
        assert!(matches!(
            score_vectors(&[0.0, 0.0], &[1.0, 0.0], Scoring::Cosine),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn raw_and_cosine_agree_on_sphere() {
        // zero mean, unit variance: |x| = sqrt(d)
        let x = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let (raw, _) = score_vectors(&x, &x, Scoring::Eq1Raw).unwrap();
        let (cos, _) = score_vectors(&x, &x, Scoring::Cosine).unwrap();
        assert!((raw + 1.0).abs() < 1e-12);
        assert!((raw - cos).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(MatchConfig::top_k(0).validate().is_err());
        assert!(MatchConfig::threshold(181.0).validate().is_err());
        assert!(MatchConfig::default().validate().is_ok());
        assert_eq!("otsu".parse::<SelectionMode>().unwrap(), SelectionMode::AutoOtsu);
        assert!("bogus".parse::<Direction>().is_err());
    }

    #[test]
    fn resolve_point_rules() {
        let big = ProposalRecord::new(1, rect(64, 64, 0, 10, 0, 10), Time::T0);
        let small = ProposalRecord::new(2, rect(64, 64, 2, 4, 2, 7), Time::T0);
        let list = vec![big.clone(), small.clone()];
        assert_eq!(big.mask.area(), 100);
        assert_eq!(small.mask.area(), 10);
        let p = |x, y| QueryPoint { x, y, time: Time::T0 };
        assert_eq!(resolve_point_to_proposal(&p(3, 3), &list).unwrap().id, 2);
        assert_eq!(resolve_point_to_proposal(&p(8, 8), &list).unwrap().id, 1);
        // outside every mask but within 50 px of the big one's centroid (4.5, 4.5)
        assert_eq!(resolve_point_to_proposal(&p(30, 30), &list).unwrap().id, 1);
        let far = vec![ProposalRecord::new(1, rect(512, 512, 0, 2, 0, 2), Time::T0)];
        let err = resolve_point_to_proposal(&QueryPoint { x: 200, y: 100, time: Time::T0 }, &far).unwrap_err();
        assert!(err.to_string().contains("unresolvable point"), "{err}");
        assert!(err.to_string().contains("222.9 px"), "{err}");
    }

    #[test]
    fn rasterize_union() {
        let a = ChangeProposal::from_score(&ProposalRecord::new(1, rect(4, 4, 0, 2, 0, 2), Time::T0), 1.0);
        let b = ChangeProposal::from_score(&ProposalRecord::new(2, rect(4, 4, 1, 3, 1, 3), Time::T1), 1.0);
        assert_eq!(rasterize_changes(&[], (4, 4)).unwrap().count_ones(), 0);
        assert_eq!(rasterize_changes(std::slice::from_ref(&a), (4, 4)).unwrap(), a.mask.decode());
        let u = rasterize_changes(&[a.clone(), b.clone()], (4, 4)).unwrap();
        let mut expected = a.mask.decode();
        expected.union_with(&b.mask.decode()).unwrap();
        assert_eq!(u, expected);
        assert_eq!(u.count_ones(), 7);
    }

    #[test]
    fn query_point_parsing() {
        let p: QueryPoint = "12, 40,t1".parse().unwrap();
        assert_eq!(p, QueryPoint { x: 12, y: 40, time: Time::T1 });
        assert!("1,2".parse::<QueryPoint>().is_err());
    }
}
