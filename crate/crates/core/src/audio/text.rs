//! Lowercase word tokenizer with a corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{FlapError, Result};

pub const MAX_CAPTION_TOKENS: usize = 77;
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

/// Splits on anything that is not alphanumeric; punctuation is dropped.
pub fn split_words(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Special tokens first, then every word seen at least once, sorted.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(split_words).collect();
        let tokens = [PAD, UNK, CLS].into_iter().map(String::from).chain(words).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| FlapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.get(..3) != Some(&[PAD.to_string(), UNK.to_string(), CLS.to_string()][..]) {
            return Err(FlapError::Input(format!(
                "{} does not start with the special tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCaption {
    pub token_ids: Vec<usize>,
}

impl TokenizedCaption {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Word ids truncated to [`MAX_CAPTION_TOKENS`]. A caption with no words
/// becomes a single `[UNK]`.
pub fn tokenize(caption: &str, vocab: &Vocab) -> TokenizedCaption {
    let mut ids: Vec<usize> = split_words(caption)
        .iter()
        .take(MAX_CAPTION_TOKENS)
        .map(|w| vocab.id(w))
        .collect();
    if ids.is_empty() {
        log::warn!("caption {caption:?} has no words; using [UNK]");
        ids.push(UNK_ID);
    }
    TokenizedCaption { token_ids: ids }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_dropped() {
        let vocab = Vocab::build(["A man is speaking."]);
        let t = tokenize("A man is speaking.", &vocab);
        assert_eq!(t.len(), 4);
        assert!(t.token_ids.iter().all(|&i| i > CLS_ID && i < vocab.len()));
        assert_eq!(vocab.token(t.token_ids[0]), Some("a"));
    }

    #[test]
    fn truncates_to_77() {
        let long: String = (0..200).map(|i| format!("w{i} ")).collect();
        let vocab = Vocab::build([long.as_str()]);
        assert_eq!(tokenize(&long, &vocab).len(), 77);
    }

    #[test]
    fn unknown_and_empty() {
        let vocab = Vocab::build(["dog barks"]);
        assert_eq!(tokenize("cat barks", &vocab).token_ids[0], UNK_ID);
        assert_eq!(tokenize("", &vocab).token_ids, vec![UNK_ID]);
        assert_eq!(tokenize(" ?! ", &vocab).token_ids, vec![UNK_ID]);
    }

    #[test]
    fn deterministic() {
        let vocab = Vocab::build(["wind blows", "waves crash"]);
        assert_eq!(tokenize("Waves, wind!", &vocab), tokenize("Waves, wind!", &vocab));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocab::build(["The sound of a boat.", "Water sound."]);
        vocab.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]\na\nboat\n"));
        assert_eq!(Vocab::load(&path).unwrap(), vocab);
    }
}
