use super::samples::TurnSample;
use crate::error::{Error, Result};

/// Right-padded sequences with per-row lengths and a real-token mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Ids of every row at step `t`.
    pub fn column(&self, t: usize) -> Vec<usize> {
        self.ids.iter().map(|row| row[t]).collect()
    }

    /// Mask of every row at step `t`.
    pub fn keep(&self, t: usize) -> Vec<bool> {
        self.mask.iter().map(|row| row[t]).collect()
    }
}

pub fn pad_batch<S: AsRef<[usize]>>(seqs: &[S], pad_id: usize) -> PaddedBatch {
    let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len());
    let mut mask = Vec::with_capacity(seqs.len());
    let mut lengths = Vec::with_capacity(seqs.len());
    for s in seqs {
        let s = s.as_ref();
        let mut row = s.to_vec();
        row.resize(width, pad_id);
        ids.push(row);
        mask.push((0..width).map(|t| t < s.len()).collect());
        lengths.push(s.len());
    }
    PaddedBatch { ids, lengths, mask }
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub contexts: Vec<Vec<Vec<usize>>>,
    pub query: PaddedBatch,
    pub response: PaddedBatch,
}

/// Splits samples into consecutive batches of at most `batch_size`.
pub fn batch(samples: &[TurnSample], batch_size: usize, pad_id: usize) -> Result<Vec<SampleBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    Ok(samples
        .chunks(batch_size)
        .map(|chunk| {
            let queries: Vec<&[usize]> = chunk.iter().map(|s| s.query.as_slice()).collect();
            let responses: Vec<&[usize]> = chunk.iter().map(|s| s.response.as_slice()).collect();
            SampleBatch {
                contexts: chunk.iter().map(|s| s.context.clone()).collect(),
                query: pad_batch(&queries, pad_id),
                response: pad_batch(&responses, pad_id),
            }
        })
        .collect())
}
