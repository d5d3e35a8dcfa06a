//! Cross-modal retrieval: recall at 1, 5 and 10 in both directions, with
//! masking and SpecAugment off.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::{tokenize, FeatureConfig, Manifest, Vocab};
use crate::error::{FlapError, Result};
use crate::model::FlapModel;
use crate::numerics::kernels::gemm_nt;
use crate::numerics::Tensor;
use crate::objectives::NORM_TOLERANCE;
use crate::training::{assemble_audio, FeatureStore};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
const EMBED_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToAudio,
    AudioToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub text_to_audio: RetrievalReport,
    pub audio_to_text: RetrievalReport,
    pub skipped: Vec<String>,
}

fn check_unit(what: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(FlapError::shape("similarity_matrix", format!("{what} {:?}", t.shape())));
    }
    for (i, row) in t.data().chunks(t.shape()[1]).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(FlapError::Contract(format!("{what} row {i} has norm {norm}")));
        }
    }
    Ok(())
}

/// `[Q, P]` dot products of unit rows.
pub fn similarity_matrix(queries: &Tensor, items: &Tensor) -> Result<Tensor> {
    check_unit("query", queries)?;
    check_unit("item", items)?;
    let (q, d) = (queries.shape()[0], queries.shape()[1]);
    let p = items.shape()[0];
    if items.shape()[1] != d {
        return Err(FlapError::shape(
            "similarity_matrix",
            format!("{:?} vs {:?}", queries.shape(), items.shape()),
        ));
    }
    let mut out = vec![0.0; q * p];
    gemm_nt(queries.data(), items.data(), &mut out, q, d, p);
    Tensor::new(&[q, p], out)
}

/// 0-based rank of `item` in `row`: higher scores first, ties to the lower index.
pub fn rank_of(row: &[f64], item: usize) -> usize {
    let s = row[item];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < item))
        .count()
}

/// Fraction of queries with a correct item among the top `k`.
pub fn recall_at_k(sim: &Tensor, ground_truth: &[Vec<usize>], k: usize) -> Result<f64> {
    let (q, p) = (sim.shape()[0], sim.shape()[1]);
    if k == 0 || k > p {
        return Err(FlapError::Config(format!("k = {k} is outside 1..={p}")));
    }
    if ground_truth.len() != q {
        return Err(FlapError::Input(format!(
            "{} ground-truth sets for {q} queries",
            ground_truth.len()
        )));
    }
    let mut hits = 0;
    for (i, gt) in ground_truth.iter().enumerate() {
        if gt.is_empty() || gt.iter().any(|&j| j >= p) {
            return Err(FlapError::Input(format!("query {i} has invalid ground truth {gt:?}")));
        }
        if gt.iter().any(|&j| rank_of(sim.row(i), j) < k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

/// Recalls at 1, 5 and 10, each clamped to the candidate count.
pub fn retrieval_report(sim: &Tensor, ground_truth: &[Vec<usize>], direction: Direction) -> Result<RetrievalReport> {
    let p = sim.shape()[1];
    let mut recall_at = BTreeMap::new();
    for k in RECALL_KS {
        recall_at.insert(k, recall_at_k(sim, ground_truth, k.min(p))?);
    }
    Ok(RetrievalReport {
        direction,
        recall_at,
        num_queries: sim.shape()[0],
    })
}

/// Embeds every readable clip and every caption of `manifest` and scores
/// retrieval in both directions.
pub fn evaluate(model: &FlapModel, manifest: &Manifest, vocab: &Vocab, mean: f64, std: f64) -> Result<EvalReport> {
    let features = FeatureConfig {
        n_mels: model.config.mels,
        ..FeatureConfig::default()
    };
    let store = FeatureStore::build(manifest, &features, mean, std)?;
    if store.is_empty() {
        return Err(FlapError::Input("no readable audio to evaluate".into()));
    }
    let mut audio = Vec::new();
    for chunk in store.items.chunks(EMBED_BATCH) {
        let specs: Vec<_> = chunk.iter().map(|(_, s)| s).collect();
        let batch = assemble_audio(&specs, &model.config, None, None)?;
        audio.extend_from_slice(model.embed_audio(&batch.input)?.data());
    }
    let mut captions = Vec::new();
    let mut caption_owner = Vec::new();
    let mut audio_captions = vec![Vec::new(); store.len()];
    for (a, (ri, _)) in store.items.iter().enumerate() {
        for c in &manifest.records[*ri].captions {
            audio_captions[a].push(captions.len());
            caption_owner.push(a);
            captions.push(tokenize(c, vocab));
        }
    }
    let mut text = Vec::new();
    for chunk in captions.chunks(EMBED_BATCH) {
        text.extend_from_slice(model.embed_text(chunk)?.data());
    }
    let d = model.config.shared_dim;
    let audio = Tensor::new(&[store.len(), d], audio)?;
    let text = Tensor::new(&[captions.len(), d], text)?;

    let t2a_gt: Vec<Vec<usize>> = caption_owner.iter().map(|&a| vec![a]).collect();
    let t2a = retrieval_report(&similarity_matrix(&text, &audio)?, &t2a_gt, Direction::TextToAudio)?;
    let a2t = retrieval_report(
        &similarity_matrix(&audio, &text)?,
        &audio_captions,
        Direction::AudioToText,
    )?;
    Ok(EvalReport {
        text_to_audio: t2a,
        audio_to_text: a2t,
        skipped: store.skipped,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table: text→audio R@1/5/10, then audio→text R@1/5/10.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8}| {:^26} | {:^26}", "", "Text-Audio", "Audio-Text");
        let _ = writeln!(
            out,
            "{:<8}| {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
            "", "R@1", "R@5", "R@10", "R@1", "R@5", "R@10"
        );
        let pct = |r: &RetrievalReport, k| 100.0 * r.recall_at.get(&k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{:<8}| {:>8.1} {:>8.1} {:>8.1} | {:>8.1} {:>8.1} {:>8.1}",
            "recall",
            pct(&self.text_to_audio, 1),
            pct(&self.text_to_audio, 5),
            pct(&self.text_to_audio, 10),
            pct(&self.audio_to_text, 1),
            pct(&self.audio_to_text, 5),
            pct(&self.audio_to_text, 10)
        );
        let _ = writeln!(
            out,
            "queries: {} text, {} audio",
            self.text_to_audio.num_queries, self.audio_to_text.num_queries
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_reversed_rankings() {
        let n = 12;
        let eye = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let gt: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        assert_eq!(similarity_matrix(&eye, &eye).unwrap(), eye);
        assert_eq!(recall_at_k(&eye, &gt, 1).unwrap(), 1.0);
        let reversed = Tensor::from_fn(&[n, n], |i| if i / n == i % n { -1.0 } else { (i % n) as f64 * 0.01 });
        assert_eq!(recall_at_k(&reversed, &gt, 10).unwrap(), 0.0);
        assert!(recall_at_k(&eye, &gt, 13).is_err());
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let row = [0.5, 0.5, 0.5];
        assert_eq!(rank_of(&row, 0), 0);
        assert_eq!(rank_of(&row, 2), 2);
        let sim = Tensor::new(&[1, 3], row.to_vec()).unwrap();
        assert_eq!(recall_at_k(&sim, &[vec![1]], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&sim, &[vec![0]], 1).unwrap(), 1.0);
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let t = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(similarity_matrix(&t, &t), Err(FlapError::Contract(_))));
    }

    #[test]
    fn table_has_both_directions() {
        let rep = |direction| RetrievalReport {
            direction,
            recall_at: BTreeMap::from([(1, 0.5), (5, 0.75), (10, 1.0)]),
            num_queries: 4,
        };
        let r = EvalReport {
            text_to_audio: rep(Direction::TextToAudio),
            audio_to_text: rep(Direction::AudioToText),
            skipped: vec![],
        };
        let table = r.to_table();
        assert!(table.contains("Text-Audio") && table.contains("50.0") && table.contains("100.0"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
