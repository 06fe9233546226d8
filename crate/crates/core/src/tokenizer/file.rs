//! Line-oriented vocabulary file:
//!
//! ```text
//! [specials]
//! <hex bytes of special string>
//! [merges]
//! <hex bytes of left token> <hex bytes of right token>
//! ```
//!
//! Merge rank is line order. Special ids follow the merge space in listed order.

use std::fs;
use std::path::Path;

use super::Vocab;
use crate::error::{Error, Result};

impl Vocab {
    pub fn to_text(&self) -> String {
        let mut out = String::from("[specials]\n");
        for s in &self.specials {
            out.push_str(&hex::encode(s.as_bytes()));
            out.push('\n');
        }
        out.push_str("[merges]\n");
        for &(l, r) in &self.merges {
            out.push_str(&hex::encode(&self.tokens[l as usize]));
            out.push(' ');
            out.push_str(&hex::encode(&self.tokens[r as usize]));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Specials,
            Merges,
        }
        let mut section = Section::None;
        let mut specials = Vec::new();
        let mut vocab = Vocab::from_merges(Vec::new(), Vec::new())?;
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("vocab line {}: {what}", lineno + 1));
            match line.trim_end() {
                "" => continue,
                "[specials]" if section == Section::None => section = Section::Specials,
                "[merges]" if section != Section::Merges => section = Section::Merges,
                body => match section {
                    Section::None => return Err(bad("content before [specials]")),
                    Section::Specials => {
                        let bytes = hex::decode(body).map_err(|e| bad(&e.to_string()))?;
                        let s = String::from_utf8(bytes).map_err(|_| bad("special is not UTF-8"))?;
                        specials.push(s);
                    }
                    Section::Merges => {
                        let (l, r) = body.split_once(' ').ok_or_else(|| bad("expected two fields"))?;
                        let lookup = |h: &str| -> Result<u32> {
                            let bytes = hex::decode(h).map_err(|e| bad(&e.to_string()))?;
                            vocab.byte_lookup.get(&bytes).copied().ok_or_else(|| bad("unknown token bytes"))
                        };
                        let (l, r) = (lookup(l)?, lookup(r)?);
                        vocab.push_merge(l, r).map_err(|e| bad(&e.to_string()))?;
                    }
                },
            }
        }
        if section != Section::Merges {
            return Err(Error::Format("vocab file lacks [merges] section".into()));
        }
        Vocab::from_merges(vocab.merges, specials)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
