//! Synthetic sessions for tests, examples and demos.
//!
//! [`random_session`] draws unstructured pairs for property checks.
//! [`two_cluster_fixture`] builds a small scene with two semantically orthogonal
//! object classes, some of which flip between the two times.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::Result;
use crate::grid::EmbeddingGrid;
use crate::interchange::{
    write_proposal_file, write_rgb_png, write_tensor_archive, BinaryMask, ProposalRecord, RleMask, Session,
    SessionManifest, Time,
};
use crate::matching::QueryPoint;

#[derive(Debug, Clone)]
pub struct RandomSessionParams {
    pub max_image_side: usize,
    pub min_image_side: usize,
    pub max_grid_side: usize,
    pub max_proposals: usize,
    pub channels: usize,
    /// Probability that a grid cell is redrawn at T1 instead of lightly perturbed.
    pub change_rate: f64,
}

impl Default for RandomSessionParams {
    fn default() -> Self {
        Self {
            max_image_side: 128,
            min_image_side: 16,
            max_grid_side: 16,
            max_proposals: 50,
            channels: 16,
            change_rate: 0.3,
        }
    }
}

pub fn rect_mask(size: (usize, usize), y0: usize, x0: usize, h: usize, w: usize) -> RleMask {
    RleMask::encode(&BinaryMask::from_fn(size.0, size.1, |y, x| {
        (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x)
    }))
}

fn random_proposals<R: Rng + ?Sized>(
    rng: &mut R,
    size: (usize, usize),
    count: usize,
    time: Time,
) -> Vec<ProposalRecord> {
    let mut next_id = rng.gen_range(0..1000u64);
    (0..count)
        .map(|_| {
            let h = rng.gen_range(1..=size.0);
            let w = rng.gen_range(1..=size.1);
            let y0 = rng.gen_range(0..=size.0 - h);
            let x0 = rng.gen_range(0..=size.1 - w);
            next_id += rng.gen_range(1..4);
            ProposalRecord::new(next_id, rect_mask(size, y0, x0, h, w), time)
                .with_scores(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0))
        })
        .collect()
}

/// A random pair: continuous grids where a fraction of cells is redrawn at T1,
/// and up to `max_proposals` random rectangles per side.
pub fn random_session<R: Rng + ?Sized>(rng: &mut R, params: &RandomSessionParams) -> Session {
    let h = rng.gen_range(params.min_image_side..=params.max_image_side);
    let w = rng.gen_range(params.min_image_side..=params.max_image_side);
    let gh = rng.gen_range(1..=params.max_grid_side.min(h));
    let gw = rng.gen_range(1..=params.max_grid_side.min(w));
    let d = params.channels;
    let pre: Vec<f32> = (0..gh * gw * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut post = pre.clone();
    for cell in post.chunks_exact_mut(d) {
        if rng.gen_bool(params.change_rate) {
            cell.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        } else {
            cell.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
    }
    let n0 = rng.gen_range(0..=params.max_proposals);
    let n1 = rng.gen_range(0..=params.max_proposals);
    let pre_props = random_proposals(rng, (h, w), n0, Time::T0);
    let post_props = random_proposals(rng, (h, w), n1, Time::T1);
    Session::new(
        (h, w),
        EmbeddingGrid::new(gh, gw, d, pre).expect("finite values"),
        EmbeddingGrid::new(gh, gw, d, post).expect("finite values"),
        pre_props,
        post_props,
    )
    .expect("random session is well-formed")
}

/// Row `i` of the 16x16 Sylvester Hadamard matrix. Rows 1..16 have zero mean
/// and all rows have norm 4, so they are valid demodulated vectors.
pub fn hadamard_row(i: usize) -> [f32; 16] {
    std::array::from_fn(|j| if (i & j).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 })
}

fn blend(base: usize, detail: usize, angle_deg: f64) -> Vec<f32> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let a = hadamard_row(base);
    let b = hadamard_row(detail);
    a.iter().zip(&b).map(|(x, y)| (c * f64::from(*x) + s * f64::from(*y)) as f32).collect()
}

/// `v` rotated by `angle_deg` within the plane it spans with Hadamard row `row`.
fn turn(v: &[f32], row: usize, angle_deg: f64) -> Vec<f32> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    v.iter()
        .zip(&hadamard_row(row))
        .map(|(x, y)| (c * f64::from(*x) + s * f64::from(*y)) as f32)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureObject {
    /// 0 or 1.
    pub cluster: usize,
    pub changed: bool,
    /// Proposal id at T0 and at T1.
    pub ids: [u64; 2],
    /// Pixel (x, y) at the object's centre.
    pub center: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ClusterFixture {
    pub session: Session,
    pub objects: Vec<FixtureObject>,
}

impl ClusterFixture {
    /// `(time, id)` of every proposal belonging to a changed object of `cluster`.
    pub fn changed_in(&self, cluster: usize) -> Vec<(Time, u64)> {
        self.objects
            .iter()
            .filter(|o| o.cluster == cluster && o.changed)
            .flat_map(|o| [(Time::T0, o.ids[0]), (Time::T1, o.ids[1])])
            .collect()
    }

    pub fn changed(&self) -> Vec<(Time, u64)> {
        let mut all = self.changed_in(0);
        all.extend(self.changed_in(1));
        all
    }

    /// A click at the centre of the `nth` object of `cluster`.
    pub fn point_on(&self, cluster: usize, nth: usize, time: Time) -> QueryPoint {
        let o = self.objects.iter().filter(|o| o.cluster == cluster).nth(nth).expect("object exists");
        QueryPoint {
            x: o.center.0,
            y: o.center.1,
            time,
        }
    }
}

const FIXTURE_CELL: usize = 16;
const FIXTURE_GRID: usize = 8;
const BACKGROUND_ROW: usize = 15;
const CHANGE_ROW: usize = 11;
const CHANGE_ANGLE_DEG: f64 = 170.0;

/// 128x128 scene on an 8x8x16 grid with eight cell-aligned objects.
///
/// Class 0 objects point near Hadamard row 1, class 1 near row 2; each object
/// is tilted by a few degrees towards its own private row, so the classes are
/// exactly orthogonal while members of one class stay within 30 degrees.
/// Changed objects are turned 170 degrees at T1, towards a row no other object
/// uses; the rest are identical.
pub fn two_cluster_fixture() -> ClusterFixture {
    cluster_scene(&[true, false, true, false, true, false, false, true])
}

/// The same scene with nothing changed.
pub fn no_change_fixture() -> ClusterFixture {
    cluster_scene(&[false; 8])
}

fn cluster_scene(changed: &[bool; 8]) -> ClusterFixture {
    let size = (FIXTURE_CELL * FIXTURE_GRID, FIXTURE_CELL * FIXTURE_GRID);
    // (cluster, grid row, grid col, side in cells)
    let layout = [
        (0, 0, 0, 2),
        (0, 0, 3, 1),
        (0, 3, 0, 1),
        (0, 5, 5, 2),
        (1, 0, 6, 2),
        (1, 3, 3, 2),
        (1, 6, 0, 2),
        (1, 3, 6, 1),
    ];
    let d = 16;
    let mut pre = EmbeddingGrid::from_fn(FIXTURE_GRID, FIXTURE_GRID, d, |_, _, k| hadamard_row(BACKGROUND_ROW)[k])
        .expect("finite")
        .into_values();
    let mut post = pre.clone();
    let mut objects = Vec::new();
    let mut proposals = [Vec::new(), Vec::new()];
    for (i, &(cluster, r0, c0, side)) in layout.iter().enumerate() {
        let base = 1 + cluster;
        let detail = 3 + i;
        let v = blend(base, detail, 5.0 + 5.0 * (i % 4) as f64);
        let turned = turn(&v, CHANGE_ROW, CHANGE_ANGLE_DEG);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                let at = (r * FIXTURE_GRID + c) * d;
                pre[at..at + d].copy_from_slice(&v);
                post[at..at + d].copy_from_slice(if changed[i] { &turned } else { &v });
            }
        }
        let mask = rect_mask(size, r0 * FIXTURE_CELL, c0 * FIXTURE_CELL, side * FIXTURE_CELL, side * FIXTURE_CELL);
        let ids = [i as u64 + 1, i as u64 + 101];
        for (t, time) in Time::BOTH.into_iter().enumerate() {
            proposals[t].push(ProposalRecord::new(ids[t], mask.clone(), time).with_scores(0.95, 0.97));
        }
        let half = side * FIXTURE_CELL / 2;
        objects.push(FixtureObject {
            cluster,
            changed: changed[i],
            ids,
            center: (c0 * FIXTURE_CELL + half, r0 * FIXTURE_CELL + half),
        });
    }
    let [pre_props, post_props] = proposals;
    let session = Session::new(
        size,
        EmbeddingGrid::new(FIXTURE_GRID, FIXTURE_GRID, d, pre).expect("finite").with_demodulated(true),
        EmbeddingGrid::new(FIXTURE_GRID, FIXTURE_GRID, d, post).expect("finite").with_demodulated(true),
        pre_props,
        post_props,
    )
    .expect("fixture is well-formed");
    ClusterFixture { session, objects }
}

/// Renders a grid's first three channels as an image at `size`, one flat
/// colour per cell, so fixtures have something to overlay masks on.
pub fn false_colour(grid: &EmbeddingGrid, size: (usize, usize)) -> image::RgbImage {
    let (h, w) = size;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = grid.vector(y as usize * grid.height() / h, x as usize * grid.width() / w);
        let level = |k: usize| v.get(k).map_or(0, |c| (128.0 + 40.0 * c).clamp(0.0, 255.0) as u8);
        image::Rgb([level(0), level(1), level(2)])
    })
}

/// Writes `session` as `<name>.json` plus its archives, proposal files and
/// false-colour images under `dir`. Returns the manifest path.
pub fn write_session(dir: &Path, name: &str, session: &Session) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let file = |suffix: &str| PathBuf::from(format!("{name}_{suffix}"));
    for (time, tag) in [(Time::T0, "pre"), (Time::T1, "post")] {
        write_tensor_archive(session.grid(time), dir.join(file(&format!("{tag}.actensor"))))?;
        write_proposal_file(dir.join(file(&format!("{tag}.jsonl"))), session.proposals(time))?;
        write_rgb_png(
            &false_colour(session.grid(time), session.image_size()),
            dir.join(file(&format!("{tag}.png"))),
        )?;
    }
    let grid = session.grid(Time::T0);
    let (h, w) = session.image_size();
    let manifest = SessionManifest {
        image_size: [h, w],
        embedding_size: [grid.height(), grid.width()],
        d_m: grid.channels(),
        pre_image: Some(file("pre.png")),
        post_image: Some(file("post.png")),
        pre_embedding: file("pre.actensor"),
        post_embedding: file("post.actensor"),
        pre_proposals: file("pre.jsonl"),
        post_proposals: file("post.jsonl"),
        demodulated: grid.is_demodulated(),
    };
    let path = dir.join(format!("{name}.json"));
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hadamard_rows_are_orthogonal_and_demodulated() {
        for i in 0..16 {
            for j in 0..16 {
                let dot: f32 = hadamard_row(i).iter().zip(hadamard_row(j)).map(|(a, b)| a * b).sum();
                assert_eq!(dot, if i == j { 16.0 } else { 0.0 });
            }
        }
        assert_eq!(hadamard_row(7).iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn fixture_grids_pass_demodulation_check() {
        let f = two_cluster_fixture();
        for t in Time::BOTH {
            assert_eq!(f.session.grid(t).demodulation_violations().0, 0);
        }
        assert_eq!(f.changed().len(), 8);
        assert_eq!(no_change_fixture().changed().len(), 0);
    }

    #[test]
    fn random_sessions_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_session(&mut rng, &RandomSessionParams::default());
            let (h, w) = s.image_size();
            assert!(h <= 128 && w <= 128);
            assert!(s.proposals(Time::T0).len() <= 50);
            assert_eq!(s.channels(), 16);
        }
    }

    #[test]
    fn written_session_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let f = two_cluster_fixture();
        let path = write_session(dir.path(), "pair", &f.session).unwrap();
        let loaded = Session::load_path(&path, &crate::interchange::LoadOptions::unfiltered()).unwrap();
        assert_eq!(loaded.proposals(Time::T1), f.session.proposals(Time::T1));
        assert_eq!(loaded.grid(Time::T0).values(), f.session.grid(Time::T0).values());
        assert!(loaded.image_path(Time::T0).is_some());
    }
}
