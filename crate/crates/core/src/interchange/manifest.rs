use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Human-editable JSON object describing one bitemporal pair on disk.
///
/// Relative paths are resolved against the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    /// `[height, width]` of both embedding grids.
    pub embedding_size: [usize; 2],
    pub d_m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_image: Option<PathBuf>,
    pub pre_embedding: PathBuf,
    pub post_embedding: PathBuf,
    pub pre_proposals: PathBuf,
    pub post_proposals: PathBuf,
    #[serde(default)]
    pub demodulated: bool,
}

impl SessionManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad manifest: {e}")))
    }

    /// Reads a manifest and resolves its relative paths against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = Self::from_json(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Ok(manifest.resolved_against(base))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolved_against(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.pre_embedding,
            &mut self.post_embedding,
            &mut self.pre_proposals,
            &mut self.post_proposals,
        ] {
            fix(p);
        }
        for p in [&mut self.pre_image, &mut self.post_image].into_iter().flatten() {
            fix(p);
        }
        self
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.json");
        fs::write(
            &path,
            r#"{"image_size":[64,64],"embedding_size":[4,4],"d_m":8,
                "pre_embedding":"a.actensr","post_embedding":"/abs/b.actensr",
                "pre_proposals":"a.jsonl","post_proposals":"b.jsonl","post_image":"b.png"}"#,
        )
        .unwrap();
        let m = SessionManifest::read(&path).unwrap();
        assert_eq!(m.pre_embedding, dir.path().join("a.actensr"));
        assert_eq!(m.post_embedding, PathBuf::from("/abs/b.actensr"));
        assert_eq!(m.post_image, Some(dir.path().join("b.png")));
        assert_eq!(m.pre_image, None);
        assert!(!m.demodulated);
    }

    #[test]
    fn malformed_manifest_is_a_format_error() {
        assert!(matches!(SessionManifest::from_json("{\"d_m\": 3}"), Err(Error::Format(_))));
    }
}
