//! Radiometric perturbation harness.
//!
//! Rescales the channels of both grids independently per time and reports how
//! many proposals enter or leave the selected change set.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;
use crate::interchange::{Session, Time};
use crate::matching::{bitemporal_latent_match, ChangeProposal, MatchConfig};

/// Multiplies channel `k` of every position by `gains[k]`.
pub fn apply_channel_gains(grid: &EmbeddingGrid, gains: &[f32]) -> Result<EmbeddingGrid> {
    if gains.len() != grid.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} gains for {} channels",
            gains.len(),
            grid.channels()
        )));
    }
    if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::InvalidConfig("channel gains must be positive and finite".into()));
    }
    Ok(grid.map_channels(|k, v| v * gains[k])?.with_demodulated(false))
}

/// One positive factor for all channels, drawn from `[lo, hi)`.
pub fn uniform_gains<R: Rng + ?Sized>(rng: &mut R, channels: usize, lo: f32, hi: f32) -> Vec<f32> {
    vec![rng.gen_range(lo..hi); channels]
}

/// Independent per-channel factors in `[1 - strength, 1 + strength)`.
pub fn jitter_gains<R: Rng + ?Sized>(rng: &mut R, channels: usize, strength: f32) -> Vec<f32> {
    (0..channels).map(|_| rng.gen_range(1.0 - strength..1.0 + strength)).collect()
}

/// The session with each time's grid rescaled by its own gains.
pub fn perturbed_session(session: &Session, pre_gains: &[f32], post_gains: &[f32]) -> Result<Session> {
    let out = Session::new(
        session.image_size(),
        apply_channel_gains(session.grid(Time::T0), pre_gains)?,
        apply_channel_gains(session.grid(Time::T1), post_gains)?,
        session.proposals(Time::T0).to_vec(),
        session.proposals(Time::T1).to_vec(),
    )?;
    Ok(out.with_images(
        session.image_path(Time::T0).map(Into::into),
        session.image_path(Time::T1).map(Into::into),
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectionDelta {
    pub added: usize,
    pub removed: usize,
}

impl SelectionDelta {
    pub fn between(before: &[ChangeProposal], after: &[ChangeProposal]) -> Self {
        let key = |c: &ChangeProposal| (c.source_time, c.proposal_id);
        let a: BTreeSet<_> = before.iter().map(key).collect();
        let b: BTreeSet<_> = after.iter().map(key).collect();
        Self {
            added: b.difference(&a).count(),
            removed: a.difference(&b).count(),
        }
    }

    pub fn total(&self) -> usize {
        self.added + self.removed
    }
}

#[derive(Debug, Clone, Default)]
pub struct RobustnessReport {
    pub baseline_selected: Vec<usize>,
    /// One delta per session under a per-time uniform rescaling.
    pub uniform: Vec<SelectionDelta>,
    /// One delta per session under independent per-channel jitter.
    pub jitter: Vec<SelectionDelta>,
}

impl RobustnessReport {
    pub fn uniform_changes(&self) -> usize {
        self.uniform.iter().map(SelectionDelta::total).sum()
    }

    pub fn jitter_changes(&self) -> usize {
        self.jitter.iter().map(SelectionDelta::total).sum()
    }

    /// Jitter deltas as a share of the unperturbed selection size.
    pub fn jitter_rate(&self) -> f64 {
        let base: usize = self.baseline_selected.iter().sum();
        if base == 0 {
            0.0
        } else {
            self.jitter_changes() as f64 / base as f64
        }
    }
}

/// Runs `config` on each session, then again after a uniform rescaling and
/// after per-channel jitter of `jitter_strength`, each drawn independently
/// for the two times.
pub fn radiometric_harness<R: Rng + ?Sized>(
    sessions: &[Session],
    config: &MatchConfig,
    rng: &mut R,
    jitter_strength: f32,
) -> Result<RobustnessReport> {
    let mut report = RobustnessReport::default();
    for session in sessions {
        let d = session.channels();
        let base = bitemporal_latent_match(session, config)?;
        report.baseline_selected.push(base.len());

        let (g0, g1) = (uniform_gains(rng, d, 0.25, 4.0), uniform_gains(rng, d, 0.25, 4.0));
        let scaled = bitemporal_latent_match(&perturbed_session(session, &g0, &g1)?, config)?;
        report.uniform.push(SelectionDelta::between(&base, &scaled));

        let (j0, j1) = (jitter_gains(rng, d, jitter_strength), jitter_gains(rng, d, jitter_strength));
        let jittered = bitemporal_latent_match(&perturbed_session(session, &j0, &j1)?, config)?;
        report.jitter.push(SelectionDelta::between(&base, &jittered));
    }
    Ok(report)
}
