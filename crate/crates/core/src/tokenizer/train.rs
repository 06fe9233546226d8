use std::collections::HashMap;

use super::{merge_pair, Vocab};
use crate::error::{Error, Result};

/// Greedy byte-level BPE training.
///
/// Repeatedly merges the most frequent adjacent pair until the vocabulary
/// (bytes + merges + specials) reaches `target_vocab` or no adjacent pair is
/// left. Equal counts go to the pair whose left token's bytes sort first, then
/// the right token's. Special strings in the corpus split it into segments and
/// never take part in merges.
pub fn train_bpe(corpus: &[u8], target_vocab: usize, specials: &[&str]) -> Result<Vocab> {
    let minimum = 256 + specials.len();
    if target_vocab < minimum {
        return Err(Error::Config(format!(
            "target vocabulary {target_vocab} below minimum {minimum} (bytes + specials)"
        )));
    }
    let mut vocab = Vocab::from_merges(Vec::new(), specials.iter().map(|s| s.to_string()).collect())?;
    let mut segments = split_on_specials(corpus, specials);

    while vocab.len() < target_vocab {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seg in &segments {
            for w in seg.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let Some(best) = counts
            .into_iter()
            .max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(&cb).then_with(|| {
                    let key = |p: (u32, u32)| (vocab.tokens[p.0 as usize].clone(), vocab.tokens[p.1 as usize].clone());
                    // reversed: the lexicographically smaller pair must compare greater
                    key(pb).cmp(&key(pa))
                })
            })
            .map(|(pair, _)| pair)
        else {
            break;
        };
        let merged = match vocab.merge_lookup.get(&best) {
            Some(&(_, id)) => id,
            None => vocab.push_merge(best.0, best.1)?,
        };
        for seg in &mut segments {
            *seg = merge_pair(seg, best.0, best.1, merged);
        }
    }
    log::debug!("trained BPE: {} merges, {} ids", vocab.merges.len(), vocab.len());
    Ok(vocab)
}

fn split_on_specials(corpus: &[u8], specials: &[&str]) -> Vec<Vec<u32>> {
    let mut segments = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < corpus.len() {
        let hit = specials
            .iter()
            .filter(|s| !s.is_empty() && corpus[i..].starts_with(s.as_bytes()))
            .map(|s| s.len())
            .max();
        if let Some(len) = hit {
            segments.push(corpus[start..i].iter().map(|&b| b as u32).collect());
            i += len;
            start = i;
        } else {
            i += 1;
        }
    }
    segments.push(corpus[start..].iter().map(|&b| b as u32).collect());
    segments.retain(|s: &Vec<u32>| s.len() > 1);
    segments
}
