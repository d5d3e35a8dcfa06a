//! JSON-lines dataset manifests binding audio files to captions.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    #[default]
    Original,
    LlmAugmented,
}

/// One audio clip with one or more captions.
///
/// `caption_sources` runs parallel to `captions`; when absent every caption
/// carries the record's `source_tag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub audio_path: String,
    pub captions: Vec<String>,
    #[serde(default)]
    pub source_tag: SourceTag,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub caption_sources: Vec<SourceTag>,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, audio_path: impl Into<String>, captions: Vec<String>) -> Self {
        CaptionRecord {
            id: id.into(),
            audio_path: audio_path.into(),
            captions,
            source_tag: SourceTag::Original,
            caption_sources: Vec::new(),
        }
    }

    pub fn caption_source(&self, i: usize) -> SourceTag {
        self.caption_sources.get(i).copied().unwrap_or(self.source_tag)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<CaptionRecord>,
    /// Directory relative audio paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<CaptionRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Unique ids, at least one non-empty caption list, parallel source tags.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(FlapError::Manifest(format!("duplicate id {}", r.id)));
            }
            if r.captions.is_empty() {
                return Err(FlapError::Manifest(format!("record {} has no captions", r.id)));
            }
            if !r.caption_sources.is_empty() && r.caption_sources.len() != r.captions.len() {
                return Err(FlapError::Manifest(format!(
                    "record {} has {} captions but {} source tags",
                    r.id,
                    r.captions.len(),
                    r.caption_sources.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| FlapError::Manifest(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<CaptionRecord>>>()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(records, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| FlapError::io(path, e))?;
        f.write_all(&out).map_err(|e| FlapError::io(path, e))
    }

    pub fn resolve_audio(&self, record: &CaptionRecord) -> PathBuf {
        let p = Path::new(&record.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Ids whose audio file does not exist.
    pub fn missing_audio(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| !self.resolve_audio(r).is_file())
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn caption_count(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }

    pub fn all_captions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| r.captions.iter().map(String::as_str))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"audio_path\":\"a.wav\",\"captions\":[\"Water sound.\"],\"source_tag\":\"original\"}\n\n\
             {\"id\":\"b\",\"audio_path\":\"/abs/b.wav\",\"captions\":[\"x\",\"y\"]}\n",
        )
        .unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.resolve_audio(&m.records[0]), dir.path().join("a.wav"));
        assert_eq!(m.resolve_audio(&m.records[1]), PathBuf::from("/abs/b.wav"));
        assert_eq!(m.caption_count(), 3);
        assert_eq!(m.missing_audio(), vec!["a", "b"]);

        let out = dir.path().join("out.jsonl");
        m.save(&out).unwrap();
        assert_eq!(Manifest::load(&out).unwrap().records, m.records);
    }

    #[test]
    fn rejects_duplicates_and_empty_captions() {
        let r = CaptionRecord::new("a", "a.wav", vec!["x".into()]);
        assert!(Manifest::new(vec![r.clone(), r.clone()], ".").is_err());
        let empty = CaptionRecord::new("b", "b.wav", vec![]);
        assert!(Manifest::new(vec![empty], ".").is_err());
    }
}
