use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RleMask, RleOrder, Time};
use crate::error::{Error, Result};
use crate::matching::ChangeProposal;

/// One object proposal produced by the segmentation model for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub id: u64,
    pub mask: RleMask,
    pub predicted_iou: f64,
    pub stability_score: f64,
    pub source_time: Time,
    /// Grid prompt that produced the mask, `(x, y)` in pixels.
    pub prompt_point: Option<(f64, f64)>,
}

impl ProposalRecord {
    pub fn new(id: u64, mask: RleMask, source_time: Time) -> Self {
        Self {
            id,
            mask,
            predicted_iou: 1.0,
            stability_score: 1.0,
            source_time,
            prompt_point: None,
        }
    }

    pub fn with_scores(mut self, predicted_iou: f64, stability_score: f64) -> Self {
        self.predicted_iou = predicted_iou;
        self.stability_score = stability_score;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.mask.is_empty() {
            return Err(Error::EmptyMask(Some(self.id)));
        }
        for (name, v) in [
            ("predicted_iou", self.predicted_iou),
            ("stability_score", self.stability_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!(
                    "proposal {}: {name} {v} outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Wire form shared by proposal files, change files and service responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeLine {
    pub id: u64,
    pub size: [usize; 2],
    pub counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_time: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
}

impl ChangeLine {
    fn mask(&self, order: RleOrder) -> Result<RleMask> {
        RleMask::from_ordered_counts(self.size[0], self.size[1], self.counts.clone(), order)
    }

    fn from_mask(id: u64, mask: &RleMask) -> Self {
        Self {
            id,
            size: [mask.height(), mask.width()],
            counts: mask.counts().to_vec(),
            source_time: None,
            predicted_iou: None,
            stability_score: None,
            prompt_point: None,
            score: None,
            angle_deg: None,
        }
    }

    pub fn from_proposal(p: &ProposalRecord) -> Self {
        Self {
            source_time: Some(p.source_time),
            predicted_iou: Some(p.predicted_iou),
            stability_score: Some(p.stability_score),
            prompt_point: p.prompt_point.map(|(x, y)| [x, y]),
            ..Self::from_mask(p.id, &p.mask)
        }
    }

    pub fn from_change(c: &ChangeProposal) -> Self {
        Self {
            source_time: Some(c.source_time),
            score: Some(c.score),
            angle_deg: Some(c.angle_deg),
            ..Self::from_mask(c.proposal_id, &c.mask)
        }
    }

    pub fn into_change(self) -> Result<ChangeProposal> {
        let mask = self.mask(RleOrder::RowMajor)?;
        let (Some(source_time), Some(score), Some(angle_deg)) = (self.source_time, self.score, self.angle_deg)
        else {
            return Err(Error::Format(format!(
                "change record {} lacks source_time, score or angle_deg",
                self.id
            )));
        };
        Ok(ChangeProposal {
            proposal_id: self.id,
            source_time,
            mask,
            score,
            angle_deg,
        })
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, ChangeLine)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ChangeLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = ChangeLine>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a proposal file. Lines without `source_time` take `time`; lines
/// that carry a different time are rejected.
pub fn read_proposal_file(path: impl AsRef<Path>, time: Time, order: RleOrder) -> Result<Vec<ProposalRecord>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let at = || format!("{}:{lineno}", path.display());
            if let Some(t) = line.source_time {
                if t != time {
                    return Err(Error::Format(format!("{}: expected source_time {time}, found {t}", at())));
                }
            }
            let record = ProposalRecord {
                id: line.id,
                mask: line.mask(order).map_err(|e| Error::Format(format!("{}: {e}", at())))?,
                predicted_iou: line
                    .predicted_iou
                    .ok_or_else(|| Error::Format(format!("{}: missing predicted_iou", at())))?,
                stability_score: line
                    .stability_score
                    .ok_or_else(|| Error::Format(format!("{}: missing stability_score", at())))?,
                source_time: time,
                prompt_point: line.prompt_point.map(|[x, y]| (x, y)),
            };
            record.validate().map_err(|e| Error::Format(format!("{}: {e}", at())))?;
            Ok(record)
        })
        .collect()
}

pub fn write_proposal_file(path: impl AsRef<Path>, proposals: &[ProposalRecord]) -> Result<()> {
    write_lines(path.as_ref(), proposals.iter().map(ChangeLine::from_proposal))
}

/// Reads bare instance masks (ground truth or any proposal/change file).
pub fn read_mask_file(path: impl AsRef<Path>) -> Result<Vec<(u64, RleMask)>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let mask = line
                .mask(RleOrder::RowMajor)
                .map_err(|e| Error::Format(format!("{}:{lineno}: {e}", path.display())))?;
            Ok((line.id, mask))
        })
        .collect()
}

pub fn read_change_file(path: impl AsRef<Path>) -> Result<Vec<ChangeProposal>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            line.into_change()
                .map_err(|e| Error::Format(format!("{}:{lineno}: {e}", path.display())))
        })
        .collect()
}

pub fn write_change_file(path: impl AsRef<Path>, changes: &[ChangeProposal]) -> Result<()> {
    write_lines(path.as_ref(), changes.iter().map(ChangeLine::from_change))
}
