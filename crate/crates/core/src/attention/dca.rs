use crate::error::{Error, Result};

/// Dual-chunk relative-position remapping.
///
/// Positions are split into chunks of `chunk` tokens. For a query at `q` and
/// a key at `k ≤ q`:
///
/// * same chunk: the true distance `q − k`;
/// * adjacent chunks: the true distance, capped at `max_position − chunk`;
/// * two or more chunks apart: the constant `max_position − chunk/2`.
///
/// Every effective distance therefore stays below the trained window
/// `max_position`, however long the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcaMap {
    pub chunk: usize,
    pub max_position: usize,
}

impl DcaMap {
    pub fn new(chunk: usize, max_position: usize) -> Result<Self> {
        if chunk == 0 || chunk > max_position {
            return Err(Error::Config(format!("dca chunk {chunk} must lie in 1..={max_position}")));
        }
        Ok(Self { chunk, max_position })
    }

    pub fn successive_cap(&self) -> usize {
        self.max_position - self.chunk
    }

    pub fn inter_chunk_distance(&self) -> usize {
        self.max_position - self.chunk / 2
    }

    pub fn effective_distance(&self, q_pos: usize, k_pos: usize) -> Result<usize> {
        if k_pos > q_pos {
            return Err(Error::Contract(format!("non-causal pair: key {k_pos} after query {q_pos}")));
        }
        let (cq, ck) = (q_pos / self.chunk, k_pos / self.chunk);
        let true_dist = q_pos - k_pos;
        Ok(match cq - ck {
            0 => true_dist,
            1 => true_dist.min(self.successive_cap()),
            _ => self.inter_chunk_distance(),
        })
    }
}

/// Effective relative distance between `q_pos` and `k_pos` under [`DcaMap`].
pub fn dca_position_map(q_pos: usize, k_pos: usize, chunk: usize, max_position: usize) -> Result<usize> {
    DcaMap::new(chunk, max_position)?.effective_distance(q_pos, k_pos)
}
