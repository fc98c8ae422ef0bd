//! Frozen word-piece tokenizer shipped with the toy backbone.

use std::collections::HashMap;

pub const UNK: &str = "[UNK]";

const WORDS: &[&str] = &[
    "a", "an", "the", "of", "with", "in", "on", "and", "at", "by", "for", "to", "is",
    "photo", "picture", "image", "painting", "drawing", "render", "style", "styled", "art",
    "good", "bad", "high", "low", "quality", "blurry", "sharp", "clean", "noisy",
    // objects
    "car", "apple", "house", "cat", "dog", "tree", "boat", "chair", "bird", "cup", "flower",
    "lamp", "mountain", "bicycle", "clock", "fish", "horse", "teapot", "guitar", "castle",
    // style vocabulary
    "geometric", "relief", "ink", "wash", "bold", "stripe", "checker", "mosaic", "soft",
    "gradient", "pixel", "noise", "texture", "woodcut", "print", "watercolor", "bloom",
    "minimal", "line", "abstract", "pattern", "flat", "shading", "metallic", "sheen",
    "paper", "cut", "pastel", "glaze", "grain", "halftone", "dot", "pop", "neon", "glow",
    "ornate", "filigree", "stained", "glass", "oil", "impasto", "sketch", "charcoal",
    "vintage", "retro", "cubist", "surreal", "tile", "weave", "etched", "layered", "brush",
];

const SUFFIXES: &[&str] = &["s", "es", "ed", "ing", "ly", "er", "y", "ic", "al"];

const PUNCTUATION: &[char] = &[',', '.', '-', '\'', '!', '?', ':', ';', '(', ')', '"', '/'];

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<usize>;
    fn vocab_size(&self) -> usize;
    fn unk_id(&self) -> Option<usize>;
    fn token(&self, id: usize) -> Option<&str>;
}

/// Greedy longest-match-first word-piece over a fixed vocabulary. Lowercases,
/// splits on whitespace and punctuation; continuation pieces carry a `##` prefix.
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl Default for WordPieceTokenizer {
    fn default() -> Self {
        Self::fixture()
    }
}

impl WordPieceTokenizer {
    pub fn fixture() -> Self {
        let mut vocab: Vec<String> = vec![UNK.to_string()];
        vocab.extend(WORDS.iter().map(|w| w.to_string()));
        vocab.extend(SUFFIXES.iter().map(|s| format!("##{s}")));
        let alnum = ('a'..='z').chain('0'..='9');
        vocab.extend(alnum.clone().map(|c| c.to_string()));
        vocab.extend(alnum.map(|c| format!("##{c}")));
        vocab.extend(PUNCTUATION.iter().map(|c| c.to_string()));
        // "a", "##s" and "##y" appear both as words or suffixes and as single characters
        let mut seen = std::collections::HashSet::new();
        vocab.retain(|t| seen.insert(t.clone()));
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let ids: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let max_piece_chars = vocab
            .iter()
            .map(|t| t.trim_start_matches("##").chars().count())
            .max()
            .unwrap_or(1);
        Self {
            vocab,
            ids,
            max_piece_chars,
        }
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len().min(start + self.max_piece_chars);
            let mut found = None;
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let key = if start > 0 { format!("##{body}") } else { body };
                if let Some(&id) = self.ids.get(&key) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.ids[UNK]);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            let mut current = String::new();
            for ch in word.chars() {
                if PUNCTUATION.contains(&ch) {
                    if !current.is_empty() {
                        self.word_pieces(&current, &mut out);
                        current.clear();
                    }
                    out.push(self.ids[&ch.to_string()]);
                } else {
                    current.push(ch);
                }
            }
            if !current.is_empty() {
                self.word_pieces(&current, &mut out);
            }
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn unk_id(&self) -> Option<usize> {
        self.ids.get(UNK).copied()
    }

    fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(t: &WordPieceTokenizer, s: &str) -> Vec<String> {
        t.tokenize(s).into_iter().map(|i| t.token(i).unwrap().to_string()).collect()
    }

    #[test]
    fn whole_words_and_suffixes() {
        let t = WordPieceTokenizer::fixture();
        assert_eq!(pieces(&t, "a photo of a car"), ["a", "photo", "of", "a", "car"]);
        assert_eq!(pieces(&t, "Geometric Reliefs"), ["geometric", "relief", "##s"]);
        assert_eq!(pieces(&t, "ink wash"), ["ink", "wash"]);
    }

    #[test]
    fn unknown_words_fall_back_to_characters() {
        let t = WordPieceTokenizer::fixture();
        assert_eq!(pieces(&t, "zq"), ["z", "##q"]);
        assert_eq!(pieces(&t, "café"), [UNK]);
    }

    #[test]
    fn punctuation_splits() {
        let t = WordPieceTokenizer::fixture();
        assert_eq!(pieces(&t, "good photo."), ["good", "photo", "."]);
        assert!(t.tokenize("   ").is_empty());
    }

    #[test]
    fn vocabulary_has_no_duplicates() {
        let t = WordPieceTokenizer::fixture();
        assert_eq!(t.ids.len(), t.vocab_size());
    }
}
