//! Audio event taggers: a JSON sidecar of precomputed scores and a
//! band-energy toy tagger that needs no model.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::mel::{hz_to_mel, mel_to_hz};
use crate::audio::{load_wav, CaptionRecord, FeatureConfig, Manifest, MelExtractor};
use crate::error::{FlapError, Result};

/// Tags kept per record, highest scores first.
pub const TAG_LIMIT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagResult {
    pub id: String,
    /// `(label, score)` with scores in `[0, 1]`, descending.
    pub tags: Vec<(String, f64)>,
}

impl TagResult {
    /// Sorts by score (ties by label), keeps the top [`TAG_LIMIT`].
    pub fn ranked(id: &str, mut tags: Vec<(String, f64)>) -> Result<Self> {
        if tags.is_empty() {
            return Err(FlapError::Tagging {
                id: id.to_string(),
                detail: "no tags".into(),
            });
        }
        if let Some((l, s)) = tags.iter().find(|(_, s)| !(0.0..=1.0).contains(s)) {
            return Err(FlapError::Tagging {
                id: id.to_string(),
                detail: format!("score {s} for {l} is outside [0, 1]"),
            });
        }
        tags.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tags.truncate(TAG_LIMIT);
        Ok(TagResult {
            id: id.to_string(),
            tags,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        self.tags.iter().map(|(l, _)| l.clone()).collect()
    }
}

pub trait Tagger: Sync {
    fn name(&self) -> &str;
    fn tag(&self, record: &CaptionRecord, manifest: &Manifest) -> Result<TagResult>;
}

/// Precomputed tags: a JSON object mapping record id to `{label: score}`.
#[derive(Clone, Debug, Default)]
pub struct SidecarTagger {
    tags: HashMap<String, BTreeMap<String, f64>>,
}

impl SidecarTagger {
    pub fn new(tags: HashMap<String, BTreeMap<String, f64>>) -> Self {
        SidecarTagger { tags }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
        Ok(SidecarTagger {
            tags: serde_json::from_str(&text)?,
        })
    }
}

impl Tagger for SidecarTagger {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn tag(&self, record: &CaptionRecord, _: &Manifest) -> Result<TagResult> {
        let map = self.tags.get(&record.id).ok_or_else(|| FlapError::Tagging {
            id: record.id.clone(),
            detail: "missing from the tag sidecar".into(),
        })?;
        TagResult::ranked(&record.id, map.iter().map(|(l, &s)| (l.clone(), s)).collect())
    }
}

/// Upper band edges (Hz) and their labels.
pub const TOY_BANDS: [(f64, &str); 4] = [
    (250.0, "low rumble"),
    (1000.0, "hum"),
    (4000.0, "whistle"),
    (f64::INFINITY, "hiss"),
];

/// Scores each band of [`TOY_BANDS`] by its share of the clip's mel energy.
pub struct ToyTagger {
    extractor: MelExtractor,
}

impl ToyTagger {
    pub fn new() -> Result<Self> {
        Ok(ToyTagger {
            extractor: MelExtractor::new(FeatureConfig::default())?,
        })
    }
}

impl Tagger for ToyTagger {
    fn name(&self) -> &str {
        "toy-bands"
    }

    fn tag(&self, record: &CaptionRecord, manifest: &Manifest) -> Result<TagResult> {
        let cfg = self.extractor.config();
        let wave = load_wav(&manifest.resolve_audio(record), cfg.sample_rate)?;
        let spec = self.extractor.compute(&wave)?;
        let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
        let mut energy = [0.0; TOY_BANDS.len()];
        for m in 0..cfg.n_mels {
            let centre = mel_to_hz(top * (m + 1) as f64 / (cfg.n_mels + 1) as f64);
            let band = TOY_BANDS
                .iter()
                .position(|&(hi, _)| centre < hi)
                .expect("last band is open");
            energy[band] += (0..spec.num_frames()).map(|t| spec.frame(t)[m].exp()).sum::<f64>();
        }
        let total: f64 = energy.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(FlapError::Tagging {
                id: record.id.clone(),
                detail: "clip has no energy".into(),
            });
        }
        let tags = TOY_BANDS
            .iter()
            .zip(energy)
            .map(|(&(_, label), e)| (label.to_string(), e / total))
            .collect();
        TagResult::ranked(&record.id, tags)
    }
}
