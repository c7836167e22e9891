//! Whitespace tokenizer over a fixed vocabulary, with integer tokens.
//!
//! Text is lowercased and split on whitespace; punctuation is split off into
//! single-character tokens. Integers up to [`MAX_NUMBER_TOKEN`] are single
//! tokens that carry their numeric value (the value is used as an input
//! feature by the learned extractor). Everything defines token counts for
//! the length rewards, so the same tokenizer is shared by every model.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

/// Largest integer with a dedicated token.
pub const MAX_NUMBER_TOKEN: u32 = 200;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];
const PUNCT: [char; 10] = ['"', ':', ',', '.', '!', '?', '\'', '(', ')', ';'];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
    number_base: u32,
}

impl Tokenizer {
    /// Builds the standard vocabulary: specials, integers `0..=200`,
    /// punctuation, the instruction words used by the bundled template
    /// corpus, then `extra_words` (the synthetic corpus vocabulary).
    pub fn build(extra_words: impl IntoIterator<Item = String>) -> Tokenizer {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for n in 0..=MAX_NUMBER_TOKEN {
            words.push(n.to_string());
        }
        for p in PUNCT {
            words.push(p.to_string());
        }
        for w in instruction_words() {
            words.push(w.to_string());
        }
        for w in extra_words {
            let w = w.to_lowercase();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self::from_words(words)
    }

    /// Builds the standard vocabulary with `n` synthetic corpus words
    /// (`w0`, `w1`, ...), matching [`crate::templates::gen_synthetic_corpus`].
    pub fn for_corpus_vocab(n: usize) -> Tokenizer {
        Self::build((0..n).map(|i| format!("w{i}")))
    }

    /// Rebuilds a tokenizer from an explicit word list (checkpoint restore).
    pub fn from_words(words: Vec<String>) -> Tokenizer {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer {
            words,
            ids,
            number_base: SPECIALS.len() as u32,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_text(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Numeric value when `id` is an integer token.
    pub fn number_value(&self, id: u32) -> Option<u32> {
        if id >= self.number_base && id <= self.number_base + MAX_NUMBER_TOKEN {
            Some(id - self.number_base)
        } else {
            None
        }
    }

    pub fn number_token(&self, n: u32) -> Result<u32> {
        if n <= MAX_NUMBER_TOKEN {
            Ok(self.number_base + n)
        } else {
            Err(Error::InvalidArgument(format!(
                "{n} exceeds the largest integer token {MAX_NUMBER_TOKEN}"
            )))
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIALS.len() as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in text.split_whitespace() {
            self.encode_piece(&piece.to_lowercase(), &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        // Fast path: the whole piece is a token.
        if let Some(&id) = self.ids.get(piece) {
            out.push(id);
            return;
        }
        // Split into alphanumeric runs and single punctuation characters.
        let mut run = String::new();
        for ch in piece.chars() {
            if ch.is_alphanumeric() {
                run.push(ch);
            } else {
                if !run.is_empty() {
                    self.push_word(&run, out);
                    run.clear();
                }
                self.push_word(&ch.to_string(), out);
            }
        }
        if !run.is_empty() {
            self.push_word(&run, out);
        }
    }

    fn push_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(&id) = self.ids.get(word) {
            out.push(id);
            return;
        }
        // Canonicalize integers (drops leading zeros), then give up.
        if word.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(n) = word.parse::<u64>() {
                if n <= MAX_NUMBER_TOKEN as u64 {
                    out.push(self.number_base + n as u32);
                    return;
                }
            }
        }
        out.push(UNK);
    }

    /// Joins token texts with single spaces, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(self.token_text(id));
        }
        s
    }

    /// Number of content tokens: specials (eos, pad, ...) are not counted.
    pub fn content_len(&self, ids: &[u32]) -> u32 {
        ids.iter().filter(|&&id| !self.is_special(id)).count() as u32
    }
}

/// Vocabulary-free split used by surface metrics (ROUGE): lowercase,
/// whitespace-separated, punctuation split off, integers canonicalized.
/// Out-of-vocabulary words survive as themselves.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        let piece = piece.to_lowercase();
        let mut run = String::new();
        for ch in piece.chars() {
            if ch.is_alphanumeric() {
                run.push(ch);
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(ch.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// Words appearing in the bundled template corpus and canonical SCP strings.
fn instruction_words() -> Vec<&'static str> {
    vec![
        "a", "about", "and", "around", "article", "between", "document", "equal", "exactly",
        "following", "for", "from", "generate", "give", "greater", "i", "larger", "length",
        "less", "longer", "me", "more", "need", "no", "none", "of", "over", "please", "shorter",
        "smaller", "summarize", "summary", "than", "the", "this", "to", "token", "tokens",
        "want", "with", "within", "write",
    ]
}
