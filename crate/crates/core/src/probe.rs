//! Latent-space exploration: PCA colour renders of an embedding grid and
//! proposal-to-proposal semantic queries.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;
use crate::interchange::{ProposalRecord, Time};
use crate::matching::{score_vectors, Scoring};
use crate::proposal::extract_embeddings;

const PCA_TOLERANCE: f64 = 1e-8;
const PCA_MAX_ITERATIONS: usize = 1000;
/// Eigenvalues below this fraction of the total variance count as zero.
const RANK_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, strongest first.
    pub directions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Share of the total variance carried by each direction.
    pub explained: Vec<f64>,
}

impl PcaBasis {
    pub fn project(&self, v: &[f32]) -> Vec<f64> {
        self.directions
            .iter()
            .map(|d| {
                d.iter()
                    .zip(v.iter().zip(&self.mean))
                    .map(|(a, (&x, m))| a * (f64::from(x) - m))
                    .sum()
            })
            .collect()
    }
}

fn covariance(grids: &[&EmbeddingGrid]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = grids[0].channels();
    if grids.iter().any(|g| g.channels() != d) {
        return Err(Error::ShapeMismatch("grids have different channel counts".into()));
    }
    let n: usize = grids.iter().map(|g| g.height() * g.width()).sum();
    let mut mean = vec![0f64; d];
    for g in grids {
        for v in g.vectors() {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += f64::from(x);
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0f64; d * d];
    let mut centered = vec![0f64; d];
    for g in grids {
        for v in g.vectors() {
            for (c, (&x, m)) in centered.iter_mut().zip(v.iter().zip(&mean)) {
                *c = f64::from(x) - m;
            }
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let row = &mut cov[i * d..(i + 1) * d];
                for j in i..d {
                    row[j] += ci * centered[j];
                }
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok((mean, cov))
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
    }
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Power iteration with deflation for the top eigenpairs of a symmetric matrix.
///
/// Stops early (without error) once the next eigenvalue is numerically zero.
fn top_eigenpairs(cov: &[f64], d: usize, wanted: usize) -> Vec<(f64, Vec<f64>)> {
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut work = cov.to_vec();
    let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
    while found.len() < wanted.min(d) && trace > 0.0 {
        let previous: Vec<Vec<f64>> = found.iter().map(|(_, v)| v.clone()).collect();
        // start from the deflated column with the largest diagonal entry
        let start = (0..d)
            .max_by(|&a, &b| work[a * d + a].total_cmp(&work[b * d + b]).then(b.cmp(&a)))
            .unwrap();
        let mut v: Vec<f64> = (0..d).map(|i| work[i * d + start]).collect();
        orthogonalize(&mut v, &previous);
        if normalize(&mut v) == 0.0 {
            break;
        }
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut next = mat_vec(&work, &v);
            orthogonalize(&mut next, &previous);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = next;
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        let lambda: f64 = v.iter().zip(mat_vec(cov, &v)).map(|(a, b)| a * b).sum();
        if lambda <= RANK_EPSILON * trace {
            break;
        }
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        fix_sign(&mut v);
        found.push((lambda, v));
    }
    found
}

fn basis_from(grids: &[&EmbeddingGrid], components: usize, strict: bool) -> Result<PcaBasis> {
    if components == 0 {
        return Err(Error::InvalidConfig("need at least one component".into()));
    }
    let positions: usize = grids.iter().map(|g| g.height() * g.width()).sum();
    if strict && positions < components {
        return Err(Error::RankDeficient {
            requested: components,
            available: positions,
        });
    }
    let (mean, cov) = covariance(grids)?;
    let d = mean.len();
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let pairs = top_eigenpairs(&cov, d, components);
    if pairs.is_empty() || (strict && pairs.len() < components) {
        return Err(Error::RankDeficient {
            requested: components,
            available: pairs.len(),
        });
    }
    Ok(PcaBasis {
        mean,
        explained: pairs.iter().map(|(l, _)| l / trace).collect(),
        eigenvalues: pairs.iter().map(|(l, _)| *l).collect(),
        directions: pairs.into_iter().map(|(_, v)| v).collect(),
    })
}

/// Principal directions of the grid's position-vector cloud.
///
/// Fails with [`Error::RankDeficient`] when fewer than `components` nonzero
/// eigenvalues exist.
pub fn fit_pca(grid: &EmbeddingGrid, components: usize) -> Result<PcaBasis> {
    basis_from(&[grid], components, true)
}

/// Like [`fit_pca`] but returns as many directions as the cloud supports
/// (at least one); only a zero-variance cloud fails.
pub fn fit_pca_up_to(grid: &EmbeddingGrid, components: usize) -> Result<PcaBasis> {
    basis_from(&[grid], components, false)
}

/// One basis fitted on both grids, for side-by-side bitemporal renders.
pub fn fit_pca_joint(a: &EmbeddingGrid, b: &EmbeddingGrid, components: usize) -> Result<PcaBasis> {
    basis_from(&[a, b], components, false)
}

/// 8-bit RGB raster at grid resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster buffer matches its dimensions")
    }
}

/// Projects each position on the first three directions and min-max scales
/// each channel to 0..=255. Missing or constant channels render as 0.
pub fn pca_rgb(grid: &EmbeddingGrid, basis: &PcaBasis) -> Result<RgbRaster> {
    if grid.channels() != basis.mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "basis fitted on {} channels, grid has {}",
            basis.mean.len(),
            grid.channels()
        )));
    }
    let projections: Vec<Vec<f64>> = grid
        .values()
        .par_chunks_exact(grid.channels())
        .map(|v| basis.project(v))
        .collect();
    let mut data = vec![0u8; projections.len() * 3];
    for ch in 0..basis.directions.len().min(3) {
        let (lo, hi) = projections
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[ch]), hi.max(p[ch])));
        let span = hi - lo;
        if span <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            continue;
        }
        for (i, p) in projections.iter().enumerate() {
            data[i * 3 + ch] = ((p[ch] - lo) / span * 255.0).round() as u8;
        }
    }
    Ok(RgbRaster {
        height: grid.height(),
        width: grid.width(),
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedProposal {
    pub proposal: ProposalRecord,
    pub similarity: f64,
}

/// Ranks the other proposals of the same image by cosine similarity to the query.
pub fn semantic_query(
    grid: &EmbeddingGrid,
    proposals: &[ProposalRecord],
    query_id: u64,
    top_n: usize,
) -> Result<Vec<RankedProposal>> {
    rank_against(grid, proposals, query_id, grid, proposals, top_n, true)
}

/// Ranks proposals of another image (pooled on its own grid) against a query
/// proposal pooled on the query image's grid.
pub fn semantic_query_cross(
    query_grid: &EmbeddingGrid,
    query_proposals: &[ProposalRecord],
    query_id: u64,
    target_grid: &EmbeddingGrid,
    target_proposals: &[ProposalRecord],
    top_n: usize,
) -> Result<Vec<RankedProposal>> {
    rank_against(query_grid, query_proposals, query_id, target_grid, target_proposals, top_n, false)
}

fn rank_against(
    query_grid: &EmbeddingGrid,
    query_proposals: &[ProposalRecord],
    query_id: u64,
    target_grid: &EmbeddingGrid,
    target_proposals: &[ProposalRecord],
    top_n: usize,
    exclude_query: bool,
) -> Result<Vec<RankedProposal>> {
    let query = query_proposals
        .iter()
        .find(|p| p.id == query_id)
        .ok_or(Error::UnknownProposal(query_id))?;
    let q = extract_embeddings(query_grid, Time::T0, std::slice::from_ref(query))?.remove(0);
    let pool: Vec<ProposalRecord> = target_proposals
        .iter()
        .filter(|p| !(exclude_query && p.id == query_id))
        .cloned()
        .collect();
    let embeddings = extract_embeddings(target_grid, Time::T0, &pool)?;
    let mut ranked = pool
        .into_iter()
        .zip(embeddings)
        .map(|(proposal, e)| {
            let (score, _) = score_vectors(&q.vector, &e.vector, Scoring::Cosine).map_err(|_| {
                Error::ZeroNorm(format!("proposal {} or query {query_id}", proposal.id))
            })?;
            Ok(RankedProposal {
                proposal,
                similarity: -score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.proposal.id.cmp(&b.proposal.id))
    });
    ranked.truncate(top_n);
    Ok(ranked)
}
