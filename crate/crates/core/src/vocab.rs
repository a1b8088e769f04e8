//! Character-level tokenizer: 27 text symbols (a–z and space), the three
//! specials BOS/EOS/PAD and the language tags, each a single token.

use crate::error::{Error, Result};

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ";
pub const TAGS: [&str; 3] = ["<|en|>", "<|de|>", "<|zh|>"];

pub const VOCAB_SPEC_CHAR27: &str = "tone_char_v1";

#[derive(Clone, Debug)]
pub struct Tokenizer {
    /// Printable form of every token id. Specials render as empty strings.
    pieces: Vec<String>,
    bos: usize,
    eos: usize,
    pad: usize,
    tag_base: usize,
}

impl Tokenizer {
    /// The fixed `tone_char_v1` vocabulary.
    pub fn tone_char_v1() -> Self {
        let mut pieces: Vec<String> = ALPHABET.chars().map(|c| c.to_string()).collect();
        let bos = pieces.len();
        pieces.push(String::new()); // BOS
        let eos = pieces.len();
        pieces.push(String::new()); // EOS
        let pad = pieces.len();
        pieces.push(String::new()); // PAD
        let tag_base = pieces.len();
        for t in TAGS {
            pieces.push(t.to_string());
        }
        Tokenizer {
            pieces,
            bos,
            eos,
            pad,
            tag_base,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn tag_id(&self, tag: &str) -> Result<usize> {
        TAGS.iter()
            .position(|t| *t == tag)
            .map(|i| self.tag_base + i)
            .ok_or_else(|| Error::Vocab(tag.to_string()))
    }

    pub fn is_tag(&self, id: usize) -> bool {
        id >= self.tag_base && id < self.tag_base + TAGS.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }

    /// Serialized vocabulary table for asset headers.
    pub fn table(&self) -> Vec<String> {
        let mut t = self.pieces.clone();
        t[self.bos] = "<bos>".to_string();
        t[self.eos] = "<eos>".to_string();
        t[self.pad] = "<pad>".to_string();
        t
    }

    /// Encodes text over the alphabet plus tag strings. Tags map to single
    /// ids; any other symbol is a vocabulary error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            for (i, tag) in TAGS.iter().enumerate() {
                if rest.starts_with(tag) {
                    out.push(self.tag_base + i);
                    rest = &rest[tag.len()..];
                    continue 'outer;
                }
            }
            let ch = rest.chars().next().unwrap();
            match ALPHABET.find(ch) {
                Some(i) => out.push(i),
                None => return Err(Error::Vocab(ch.to_string())),
            }
            rest = &rest[ch.len_utf8()..];
        }
        Ok(out)
    }

    /// Inverse of `tokenize`; BOS/EOS/PAD render as nothing.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            s.push_str(&self.pieces[id]);
        }
        s
    }
}
