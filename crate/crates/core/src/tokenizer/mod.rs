//! Byte-level BPE with reserved chat-control tokens.
//!
//! Ids `0..256` are the raw bytes, merge-derived tokens follow in creation
//! order, and special tokens are appended after the merge space so the two
//! can never collide.

mod file;
mod train;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use train::train_bpe;

/// Size of the production tokenizer's vocabulary. Desk-scale vocabularies are
/// trained to whatever size the caller asks for.
pub const PRODUCTION_VOCAB_SIZE: usize = 151_669;

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// The chat-control strings reserved by default.
pub const DEFAULT_SPECIALS: [&str; 4] = [IM_START, IM_END, THINK_OPEN, THINK_CLOSE];

/// A trained byte-level BPE vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    specials: Vec<String>,
    merge_lookup: HashMap<(u32, u32), (usize, u32)>,
    byte_lookup: HashMap<Vec<u8>, u32>,
}

impl Vocab {
    /// Builds a vocabulary by replaying `merges` (in rank order) over the
    /// 256-byte base alphabet. A merge whose bytes already name a token maps to
    /// that token, which keeps the id ↔ bytes table a bijection.
    pub fn from_merges(merges: Vec<(u32, u32)>, specials: Vec<String>) -> Result<Self> {
        let mut vocab = Self {
            merges: Vec::with_capacity(merges.len()),
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            specials: Vec::new(),
            merge_lookup: HashMap::new(),
            byte_lookup: HashMap::new(),
        };
        for (id, bytes) in vocab.tokens.iter().enumerate() {
            vocab.byte_lookup.insert(bytes.clone(), id as u32);
        }
        for (left, right) in merges {
            vocab.push_merge(left, right)?;
        }
        for s in specials {
            if s.is_empty() || vocab.specials.contains(&s) {
                return Err(Error::Config(format!("invalid or duplicate special token {s:?}")));
            }
            vocab.specials.push(s);
        }
        Ok(vocab)
    }

    pub(crate) fn push_merge(&mut self, left: u32, right: u32) -> Result<u32> {
        let n = self.tokens.len() as u32;
        if left >= n || right >= n {
            return Err(Error::Format(format!("merge ({left},{right}) references unknown token")));
        }
        if self.merge_lookup.contains_key(&(left, right)) {
            return Err(Error::Format(format!("duplicate merge ({left},{right})")));
        }
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let id = match self.byte_lookup.get(&bytes) {
            Some(&id) => id,
            None => {
                self.byte_lookup.insert(bytes.clone(), n);
                self.tokens.push(bytes);
                n
            }
        };
        self.merge_lookup.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        Ok(id)
    }

    /// Byte alphabet only, no merges.
    pub fn bytes_only(specials: &[&str]) -> Self {
        Self::from_merges(Vec::new(), specials.iter().map(|s| s.to_string()).collect())
            .expect("distinct specials")
    }

    /// Total number of ids: bytes, merge tokens and specials.
    pub fn len(&self) -> usize {
        self.tokens.len() + self.specials.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of ids in the byte + merge space.
    pub fn merge_space(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        let id = id as usize;
        if id < self.tokens.len() {
            Some(&self.tokens[id])
        } else {
            self.specials.get(id - self.tokens.len()).map(|s| s.as_bytes())
        }
    }

    pub fn special_id(&self, s: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|x| x == s)
            .map(|i| (self.tokens.len() + i) as u32)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let id = id as usize;
        id >= self.tokens.len() && id < self.len()
    }

    /// Encodes `text`. With `allow_specials`, reserved strings are matched
    /// (longest first) before byte-level merging; otherwise they are treated as
    /// ordinary bytes.
    pub fn encode(&self, text: &[u8], allow_specials: bool) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        if !allow_specials || self.specials.is_empty() {
            self.encode_plain(text, &mut out);
            return out;
        }
        let mut start = 0;
        let mut i = 0;
        while i < text.len() {
            if let Some((id, len)) = self.match_special(&text[i..]) {
                self.encode_plain(&text[start..i], &mut out);
                out.push(id);
                i += len;
                start = i;
            } else {
                i += 1;
            }
        }
        self.encode_plain(&text[start..], &mut out);
        out
    }

    pub fn encode_str(&self, text: &str, allow_specials: bool) -> Vec<u32> {
        self.encode(text.as_bytes(), allow_specials)
    }

    fn match_special(&self, rest: &[u8]) -> Option<(u32, usize)> {
        self.specials
            .iter()
            .enumerate()
            .filter(|(_, s)| rest.starts_with(s.as_bytes()))
            .max_by_key(|(_, s)| s.len())
            .map(|(i, s)| ((self.tokens.len() + i) as u32, s.len()))
    }

    fn encode_plain(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_lookup.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else { break };
            ids = merge_pair(&ids, left, right, merged);
        }
        out.extend(ids);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .token_bytes(id)
                .ok_or_else(|| Error::Index(format!("token id {id} not in vocabulary of {}", self.len())))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Lossy UTF-8 decode, for display.
    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    /// Ids of the four chat-control tokens, if all are present.
    pub fn chat_ids(&self) -> Result<ChatTokenIds> {
        let get = |s: &str| {
            self.special_id(s)
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token {s}")))
        };
        Ok(ChatTokenIds {
            im_start: get(IM_START)?,
            im_end: get(IM_END)?,
            think_open: get(THINK_OPEN)?,
            think_close: get(THINK_CLOSE)?,
        })
    }
}

/// Special-token ids the runtime needs to drive thinking mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChatTokenIds {
    pub im_start: u32,
    pub im_end: u32,
    pub think_open: u32,
    pub think_close: u32,
}

pub(crate) fn merge_pair(ids: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}
