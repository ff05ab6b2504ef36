//! Word-level tokenizer: lowercase, split on anything that is not
//! alphanumeric, one token per word. Known words get dedicated ids, the rest
//! hash into a fixed number of buckets.

use alloc::string::String;
use alloc::vec::Vec;

use super::{BackendDescriptor, BackendError, TokenIds, TokenSequence, Tokenized, WordSpan};

/// Words with dedicated ids, in id order.
pub const VOCABULARY: &[&str] = &[
    "a",
    "an",
    "the",
    "and",
    "of",
    "in",
    "on",
    "at",
    "with",
    "by",
    "under",
    "near",
    "is",
    "are",
    "boy",
    "girl",
    "dog",
    "cat",
    "man",
    "woman",
    "bird",
    "robot",
    "bear",
    "park",
    "forest",
    "beach",
    "city",
    "house",
    "room",
    "school",
    "garden",
    "street",
    "river",
    "mountain",
    "tree",
    "sky",
    "sun",
    "rain",
    "snow",
    "night",
    "day",
    "ball",
    "book",
    "car",
    "bike",
    "playing",
    "running",
    "sitting",
    "standing",
    "walking",
    "eating",
    "reading",
    "flying",
    "together",
    "happy",
    "sad",
    "cartoon",
    "style",
    "realistic",
    "photo",
    "background",
    "scene",
];

pub const DEFAULT_HASH_BUCKETS: u32 = 64;

#[derive(Debug, Clone)]
pub struct WordTokenizer {
    ids: TokenIds,
    max_len: usize,
    /// Id of vocabulary word `k` is `word_ids[k]`; bucket ids follow.
    word_ids: Vec<u32>,
    bucket_ids: Vec<u32>,
}

impl WordTokenizer {
    pub fn new(descriptor: &BackendDescriptor) -> Self {
        Self::with_buckets(descriptor, DEFAULT_HASH_BUCKETS)
    }

    pub fn with_buckets(descriptor: &BackendDescriptor, buckets: u32) -> Self {
        let ids = descriptor.token_ids;
        let specials = [ids.bos, ids.eos, ids.pad];
        let mut free = (0u32..).filter(|id| !specials.contains(id));
        let word_ids: Vec<u32> = VOCABULARY.iter().map(|_| free.next().unwrap()).collect();
        let bucket_ids: Vec<u32> = (0..buckets.max(1)).map(|_| free.next().unwrap()).collect();
        Self { ids, max_len: descriptor.max_len, word_ids, bucket_ids }
    }

    /// One past the largest id this tokenizer can emit.
    pub fn vocab_size(&self) -> usize {
        let max_word = self.bucket_ids.last().copied().unwrap_or(0);
        let TokenIds { bos, eos, pad } = self.ids;
        max_word.max(bos).max(eos).max(pad) as usize + 1
    }

    pub fn token_ids(&self) -> TokenIds {
        self.ids
    }

    pub fn word_id(&self, word: &str) -> u32 {
        match VOCABULARY.iter().position(|&w| w == word) {
            Some(k) => self.word_ids[k],
            None => self.bucket_ids[(fnv1a(word.as_bytes()) % self.bucket_ids.len() as u64) as usize],
        }
    }

    pub fn words(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase()).collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokenized, BackendError> {
        let words = Self::words(text);
        if words.is_empty() {
            return Err(BackendError::EmptyText);
        }
        if words.len() > self.max_len - 2 {
            return Err(BackendError::TextTooLong { tokens: words.len(), max: self.max_len - 2 });
        }
        let mut tokens = alloc::vec![self.ids.pad; self.max_len];
        tokens[0] = self.ids.bos;
        let mut spans = Vec::with_capacity(words.len());
        for (i, w) in words.into_iter().enumerate() {
            tokens[i + 1] = self.word_id(&w);
            spans.push(WordSpan { word: w, positions: i + 1..i + 2 });
        }
        tokens[spans.len() + 1] = self.ids.eos;
        Ok(Tokenized { tokens: TokenSequence(tokens), words: spans })
    }

    /// Token id of a class noun, which must be exactly one token.
    pub fn single_token(&self, noun: &str) -> Option<u32> {
        let words = Self::words(noun);
        match words.as_slice() {
            [w] if noun.trim() == w.as_str() || noun.trim().to_lowercase() == *w => Some(self.word_id(w)),
            _ => None,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyConfig;

    fn toy_descriptor(max_len: usize) -> BackendDescriptor {
        ToyConfig { max_len, ..ToyConfig::default() }.descriptor()
    }

    #[test]
    fn single_word_prompt_on_l6() {
        let tok = WordTokenizer::new(&toy_descriptor(6));
        let ids = tok.token_ids();
        let out = tok.tokenize("girl").unwrap();
        assert_eq!(out.tokens.as_slice(), &[ids.bos, tok.word_id("girl"), ids.eos, ids.pad, ids.pad, ids.pad]);
        assert_eq!(out.words[0].positions, 1..2);
    }

    #[test]
    fn boy_and_girl_positions_on_sd21_descriptor() {
        let d = BackendDescriptor::stable_diffusion_v2_1();
        let tok = WordTokenizer::new(&d);
        let out = tok.tokenize("a boy and a girl").unwrap();
        assert_eq!(out.tokens.len(), 77);
        let words: Vec<_> = out.words.iter().map(|w| (w.word.as_str(), w.positions.start)).collect();
        assert_eq!(words, [("a", 1), ("boy", 2), ("and", 3), ("a", 4), ("girl", 5)]);
        assert_eq!(out.tokens.0[0], 49406);
        assert_eq!(out.tokens.0[6], 49407);
        assert!(out.tokens.0[7..].iter().all(|&t| t == 0));
        // word ids never collide with specials
        for w in &out.words {
            assert!(![0, 49406, 49407].contains(&out.tokens.0[w.positions.start]));
        }
    }

    #[test]
    fn empty_text_is_empty_not_too_long() {
        let tok = WordTokenizer::new(&toy_descriptor(6));
        assert_eq!(tok.tokenize(""), Err(BackendError::EmptyText));
        assert_eq!(tok.tokenize("   ,, "), Err(BackendError::EmptyText));
    }

    #[test]
    fn too_many_words() {
        let tok = WordTokenizer::new(&toy_descriptor(6));
        assert!(tok.tokenize("a b c d").is_ok());
        assert_eq!(tok.tokenize("a b c d e"), Err(BackendError::TextTooLong { tokens: 5, max: 4 }));
    }

    #[test]
    fn class_noun_must_be_one_token() {
        let tok = WordTokenizer::new(&toy_descriptor(16));
        assert_eq!(tok.single_token("girl"), Some(tok.word_id("girl")));
        assert_eq!(tok.single_token("Girl"), Some(tok.word_id("girl")));
        assert_eq!(tok.single_token("teddy bear"), None);
        assert_eq!(tok.single_token(""), None);
        assert_eq!(tok.single_token("girl!"), None);
    }

    #[test]
    fn unknown_words_are_stable() {
        let tok = WordTokenizer::new(&toy_descriptor(16));
        assert_eq!(tok.word_id("zebra"), tok.word_id("zebra"));
        assert!((tok.word_id("zebra") as usize) < tok.vocab_size());
    }
}
