//! Caption enrichment: tag each clip, turn tags plus the original caption
//! into a prompt, ask a text-generation endpoint for a new caption and merge
//! the results into the manifest as extra captions.

pub mod endpoint;
pub mod mock;
pub mod tagging;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use endpoint::{generate_caption, EndpointConfig, Generation};
pub use mock::{MockEndpoint, MockReply};
pub use tagging::{SidecarTagger, TagResult, Tagger, ToyTagger, TAG_LIMIT};

use crate::audio::{Manifest, SourceTag};
use crate::error::{FlapError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// The template word for word.
    #[default]
    Original,
    /// Same content with the caption quoted.
    Cleaned,
}

pub fn build_prompt(tags: &[String], caption: &str, style: PromptStyle) -> Result<String> {
    if tags.is_empty() || caption.trim().is_empty() {
        return Err(FlapError::Input("prompt needs at least one tag and a caption".into()));
    }
    let joined = tags.join(", ");
    Ok(match style {
        PromptStyle::Original => {
            format!("Describe a situation with {joined} sounds and combine it with the {caption} together.")
        }
        PromptStyle::Cleaned => {
            format!("Describe a situation with {joined} sounds and combine it with the caption \"{caption}\".")
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderMeta {
    pub tagger: String,
    pub endpoint: String,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCaption {
    pub id: String,
    pub original: String,
    pub generated: String,
    pub prompt: String,
    pub provider: ProviderMeta,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentOutcome {
    /// In manifest order.
    pub captions: Vec<AugmentedCaption>,
    /// `(record id, reason)` for records that produced nothing.
    pub skipped: Vec<(String, String)>,
}

/// Tags and captions every record, with at most `in_flight` requests open.
/// Failed records are logged and skipped.
pub fn run_augmentation(
    manifest: &Manifest,
    tagger: &dyn Tagger,
    endpoint: &EndpointConfig,
    style: PromptStyle,
    in_flight: usize,
) -> AugmentOutcome {
    let n = manifest.records.len();
    let results: Mutex<Vec<Option<Result<AugmentedCaption>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..in_flight.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = augment_record(manifest, i, tagger, endpoint, style);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut out = AugmentOutcome::default();
    for (rec, r) in manifest.records.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every index visited") {
            Ok(c) => out.captions.push(c),
            Err(e) => {
                log::error!("record {} skipped: {e}", rec.id);
                out.skipped.push((rec.id.clone(), e.to_string()));
            }
        }
    }
    out
}

fn augment_record(
    manifest: &Manifest,
    i: usize,
    tagger: &dyn Tagger,
    endpoint: &EndpointConfig,
    style: PromptStyle,
) -> Result<AugmentedCaption> {
    let rec = &manifest.records[i];
    let original = (0..rec.captions.len())
        .find(|&c| rec.caption_source(c) == SourceTag::Original)
        .map_or(&rec.captions[0], |c| &rec.captions[c]);
    let tags = tagger.tag(rec, manifest)?;
    let prompt = build_prompt(&tags.labels(), original, style)?;
    let generation = generate_caption(&prompt, endpoint)?;
    Ok(AugmentedCaption {
        id: rec.id.clone(),
        original: original.clone(),
        generated: generation.text,
        prompt,
        provider: ProviderMeta {
            tagger: tagger.name().to_string(),
            endpoint: endpoint.url.clone(),
            attempts: generation.attempts,
        },
    })
}

pub fn write_augmented(path: &Path, captions: &[AugmentedCaption]) -> Result<()> {
    let mut out = Vec::new();
    for c in captions {
        serde_json::to_writer(&mut out, c)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| FlapError::io(path, e))?;
    f.write_all(&out).map_err(|e| FlapError::io(path, e))
}

pub fn read_augmented(path: &Path) -> Result<Vec<AugmentedCaption>> {
    let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FlapError::from))
        .collect()
}

/// Appends each generated caption to its record, tagged as LLM-augmented.
/// Captions already present on the record are not added again.
pub fn merge_manifest(original: &Manifest, augmented: &[AugmentedCaption]) -> Result<Manifest> {
    let mut merged = original.clone();
    for a in augmented {
        let rec = merged
            .records
            .iter_mut()
            .find(|r| r.id == a.id)
            .ok_or_else(|| FlapError::Manifest(format!("augmented caption for unknown record {}", a.id)))?;
        if rec.captions.iter().any(|c| c == &a.generated) {
            continue;
        }
        if rec.caption_sources.is_empty() {
            rec.caption_sources = vec![rec.source_tag; rec.captions.len()];
        }
        rec.captions.push(a.generated.clone());
        rec.caption_sources.push(SourceTag::LlmAugmented);
    }
    merged.validate()?;
    Ok(merged)
}
