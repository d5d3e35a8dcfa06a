//! WAV files and caption manifests in, fixed-length mel patch tokens and
//! tokenized captions out.

pub mod fusion;
pub mod manifest;
pub mod mel;
pub mod patch;
pub mod text;
pub mod wav;

pub use manifest::{CaptionRecord, Manifest, SourceTag};
pub use mel::{
    mel_spectrogram, pad_or_crop, spec_augment, FeatureConfig, MelExtractor, MelSpectrogram, SpecAugmentConfig,
};
pub use patch::{depatchify, patchify, PatchGrid, PatchSequence, PatchSize};
pub use text::{tokenize, TokenizedCaption, Vocab, MAX_CAPTION_TOKENS};
pub use wav::{load_wav, write_wav, Waveform};
