use flap::audio::{CaptionRecord, Manifest, Vocab};
use flap::evaluation::{evaluate, recall_at_k, similarity_matrix};
use flap::model::{FlapModel, ModelConfig};
use flap::numerics::{seeded, Stream, Tensor};
use flap::synth::generate_tone_dataset;
use rand::Rng as _;

#[test]
fn similarity_matches_pairwise_cosine() {
    let mut rng = seeded(3, Stream::Synth);
    let mut unit = |n: usize| {
        let mut t = Tensor::from_fn(&[n, 6], |_| rng.gen_range(-1.0..1.0));
        for row in t.data_mut().chunks_mut(6) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        t
    };
    let (q, c) = (unit(5), unit(7));
    let sim = similarity_matrix(&q, &c).unwrap();
    for i in 0..5 {
        for j in 0..7 {
            let (a, b) = (q.row(i), c.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((sim.row(i)[j] - dot / (na * nb)).abs() < 1e-12);
        }
    }
    assert!(recall_at_k(&sim, &vec![vec![0]; 5], 8).is_err());
    assert!(recall_at_k(&sim, &vec![vec![0]; 5], 0).is_err());
}

#[test]
fn single_pair_recalls_everything() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_tone_dataset(dir.path(), 1, 0.64, 0).unwrap();
    let vocab = Vocab::build(manifest.all_captions());
    let model = FlapModel::new(ModelConfig::toy(vocab.len()), 0).unwrap();
    let report = evaluate(&model, &manifest, &vocab, 0.0, 1.0).unwrap();
    for r in [&report.text_to_audio, &report.audio_to_text] {
        assert!(r.recall_at.values().all(|&v| v == 1.0));
        assert_eq!(r.num_queries, 1);
    }
}

#[test]
fn multi_caption_queries_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let base = generate_tone_dataset(dir.path(), 6, 0.64, 0).unwrap();
    let records: Vec<CaptionRecord> = base
        .records
        .iter()
        .map(|r| {
            let extra = format!("{} again", r.captions[0]);
            CaptionRecord::new(r.id.clone(), r.audio_path.clone(), vec![r.captions[0].clone(), extra])
        })
        .collect();
    let manifest = Manifest::new(records, dir.path()).unwrap();
    let vocab = Vocab::build(manifest.all_captions());
    let model = FlapModel::new(ModelConfig::toy(vocab.len()), 2).unwrap();
    let a = evaluate(&model, &manifest, &vocab, 0.0, 1.0).unwrap();
    let b = evaluate(&model, &manifest, &vocab, 0.0, 1.0).unwrap();
    assert_eq!(a.text_to_audio.num_queries, 12);
    assert_eq!(a.audio_to_text.num_queries, 6);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    for r in [&a.text_to_audio, &a.audio_to_text] {
        assert!(r.recall_at[&1] <= r.recall_at[&5] && r.recall_at[&5] <= r.recall_at[&10]);
    }
}

#[test]
fn empty_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_tone_dataset(dir.path(), 2, 0.64, 0).unwrap();
    std::fs::remove_file(manifest.resolve_audio(&manifest.records[0])).unwrap();
    std::fs::remove_file(manifest.resolve_audio(&manifest.records[1])).unwrap();
    let vocab = Vocab::build(manifest.all_captions());
    let model = FlapModel::new(ModelConfig::toy(vocab.len()), 0).unwrap();
    assert!(evaluate(&model, &manifest, &vocab, 0.0, 1.0).is_err());
}
