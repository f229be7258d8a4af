use super::EncodedDialogue;

/// Right-padded dialogues of one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Padded rows; each keeps its own context positions and spans, and
    /// `valid_len` marks where padding starts.
    pub rows: Vec<EncodedDialogue>,
    pub width: usize,
}

impl Batch {
    /// Pads every dialogue to `width` (at least the longest one).
    pub fn pad(encoded: &[EncodedDialogue], width: usize, pad_id: u32) -> Batch {
        let width = encoded.iter().map(|e| e.valid_len).max().unwrap_or(0).max(width);
        let rows = encoded
            .iter()
            .map(|e| {
                let mut row = e.clone();
                let extra = width - row.len();
                row.token_ids.extend(std::iter::repeat_n(pad_id, extra));
                row.segment_ids.extend(std::iter::repeat_n(0, extra));
                row.position_ids.extend(std::iter::repeat_n(0, extra));
                row.loss_mask.extend(std::iter::repeat_n(false, extra));
                row
            })
            .collect();
        Batch { rows, width }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn token_matrix(&self) -> Vec<Vec<u32>> {
        self.rows.iter().map(|r| r.token_ids.clone()).collect()
    }

    /// `true` where a position holds a real token.
    pub fn validity_mask(&self) -> Vec<Vec<bool>> {
        self.rows
            .iter()
            .map(|r| (0..self.width).map(|i| i < r.valid_len).collect())
            .collect()
    }
}

/// Chunks dialogues into batches of `batch_size`, each padded to its longest
/// member.
pub fn batch_dialogues(encoded: &[EncodedDialogue], batch_size: usize, pad_id: u32) -> Vec<Batch> {
    encoded
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::pad(chunk, 0, pad_id))
        .collect()
}
