use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::{read_proposal_file, read_tensor_archive, ProposalRecord, RleOrder, SessionManifest, Time};
use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;
use crate::proposal::ProposalFilter;

/// What to do when a grid marked demodulated fails the per-position check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DemodulationPolicy {
    #[default]
    Warn,
    Error,
    Skip,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub demodulation: DemodulationPolicy,
    /// Quality filter and NMS applied to the raw proposal candidates.
    /// `None` keeps the files' proposals untouched.
    pub filter: Option<ProposalFilter>,
    pub rle_order: RleOrder,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            demodulation: DemodulationPolicy::Warn,
            filter: Some(ProposalFilter::default()),
            rle_order: RleOrder::RowMajor,
        }
    }
}

impl LoadOptions {
    pub fn unfiltered() -> Self {
        Self {
            filter: None,
            ..Self::default()
        }
    }
}

/// An immutable bitemporal pair: both embedding grids and both proposal lists.
#[derive(Debug, Clone)]
pub struct Session {
    image_size: (usize, usize),
    grids: [EmbeddingGrid; 2],
    proposals: [Vec<ProposalRecord>; 2],
    images: [Option<PathBuf>; 2],
    warnings: Vec<String>,
}

impl Session {
    pub fn new(
        image_size: (usize, usize),
        pre_grid: EmbeddingGrid,
        post_grid: EmbeddingGrid,
        pre_proposals: Vec<ProposalRecord>,
        post_proposals: Vec<ProposalRecord>,
    ) -> Result<Self> {
        if pre_grid.shape() != post_grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pre grid is {:?} but post grid is {:?}",
                pre_grid.shape(),
                post_grid.shape()
            )));
        }
        for (time, list) in [(Time::T0, &pre_proposals), (Time::T1, &post_proposals)] {
            let mut seen = HashSet::new();
            for p in list {
                if p.source_time != time {
                    return Err(Error::Format(format!(
                        "proposal {} is tagged {} but listed under {time}",
                        p.id, p.source_time
                    )));
                }
                if p.mask.size() != image_size {
                    return Err(Error::SizeMismatch(format!(
                        "proposal {} at {time} is {:?}, image is {image_size:?}",
                        p.id,
                        p.mask.size()
                    )));
                }
                if !seen.insert(p.id) {
                    return Err(Error::Format(format!("duplicate proposal id {} at {time}", p.id)));
                }
                p.validate()?;
            }
        }
        Ok(Self {
            image_size,
            grids: [pre_grid, post_grid],
            proposals: [pre_proposals, post_proposals],
            images: [None, None],
            warnings: Vec::new(),
        })
    }

    pub fn load(manifest: &SessionManifest, options: &LoadOptions) -> Result<Self> {
        let image_size = manifest.image_size();
        let expected = (manifest.embedding_size[0], manifest.embedding_size[1], manifest.d_m);
        let mut grids = Vec::with_capacity(2);
        for path in [&manifest.pre_embedding, &manifest.post_embedding] {
            let grid = read_tensor_archive(path)?.with_demodulated(manifest.demodulated);
            if grid.shape() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {:?}, manifest declares {expected:?}",
                    path.display(),
                    grid.shape()
                )));
            }
            grids.push(grid);
        }
        let post_grid = grids.pop().unwrap();
        let pre_grid = grids.pop().unwrap();

        let mut pre = read_proposal_file(&manifest.pre_proposals, Time::T0, options.rle_order)?;
        let mut post = read_proposal_file(&manifest.post_proposals, Time::T1, options.rle_order)?;
        if let Some(filter) = &options.filter {
            pre = filter.apply(&pre)?;
            post = filter.apply(&post)?;
        }

        for path in [&manifest.pre_image, &manifest.post_image].into_iter().flatten() {
            let (w, h) = image::image_dimensions(path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(format!("{}: {other}", path.display())),
            })?;
            if (h as usize, w as usize) != image_size {
                return Err(Error::SizeMismatch(format!(
                    "{} is {h}x{w}, manifest declares {image_size:?}",
                    path.display()
                )));
            }
        }

        let mut session = Self::new(image_size, pre_grid, post_grid, pre, post)?;
        session.images = [manifest.pre_image.clone(), manifest.post_image.clone()];

        if manifest.demodulated && options.demodulation != DemodulationPolicy::Skip {
            for time in Time::BOTH {
                let (count, first) = session.grid(time).demodulation_violations();
                if count > 0 {
                    let msg = format!(
                        "{time} grid marked demodulated but {count} positions violate the check; first: {}",
                        first.unwrap_or_default()
                    );
                    if options.demodulation == DemodulationPolicy::Error {
                        return Err(Error::Demodulation(msg));
                    }
                    tracing::warn!("{msg}");
                    session.warnings.push(msg);
                }
            }
        }
        Ok(session)
    }

    pub fn load_path(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Self> {
        Self::load(&SessionManifest::read(path)?, options)
    }

    pub fn with_images(mut self, pre: Option<PathBuf>, post: Option<PathBuf>) -> Self {
        self.images = [pre, post];
        self
    }

    /// The same pair with the two acquisition times exchanged.
    pub fn swapped(&self) -> Self {
        let retag = |list: &[ProposalRecord], time: Time| {
            list.iter()
                .map(|p| ProposalRecord {
                    source_time: time,
                    ..p.clone()
                })
                .collect::<Vec<_>>()
        };
        Self {
            image_size: self.image_size,
            grids: [self.grids[1].clone(), self.grids[0].clone()],
            proposals: [retag(&self.proposals[1], Time::T0), retag(&self.proposals[0], Time::T1)],
            images: [self.images[1].clone(), self.images[0].clone()],
            warnings: self.warnings.clone(),
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn grid(&self, time: Time) -> &EmbeddingGrid {
        &self.grids[time.index()]
    }

    pub fn proposals(&self, time: Time) -> &[ProposalRecord] {
        &self.proposals[time.index()]
    }

    pub fn proposal(&self, time: Time, id: u64) -> Option<&ProposalRecord> {
        self.proposals(time).iter().find(|p| p.id == id)
    }

    pub fn image_path(&self, time: Time) -> Option<&Path> {
        self.images[time.index()].as_deref()
    }

    pub fn channels(&self) -> usize {
        self.grids[0].channels()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}
