//! Sequence packing and deterministic batching.
//!
//! Documents are tokenized, split at document boundaries into chunks of at
//! most `seq_len`, shuffled per epoch by a seed derived from (seed, epoch),
//! and right-padded into fixed-shape batches. Within an epoch no non-PAD
//! token is dropped or duplicated.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, PAD};

/// Documents shorter than this many tokens are degenerate for masking and
/// are skipped (counted, not silently lost).
pub const MIN_DOC_TOKENS: usize = 4;

/// A batch of right-padded token rows, stored flat row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<TokenId>,
}

impl TokenBatch {
    pub fn from_rows(rows_vec: &[Vec<TokenId>], cols: usize) -> Self {
        let rows = rows_vec.len();
        let mut ids = vec![PAD; rows * cols];
        for (r, row) in rows_vec.iter().enumerate() {
            assert!(row.len() <= cols, "row longer than batch width");
            ids[r * cols..r * cols + row.len()].copy_from_slice(row);
        }
        Self { rows, cols, ids }
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Non-PAD flags, aligned with `ids`.
    pub fn non_pad(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    /// Length of the non-PAD prefix of one row.
    pub fn row_len(&self, r: usize) -> usize {
        self.row(r).iter().take_while(|&&t| t != PAD).count()
    }
}

/// Tokenized corpus with short-document accounting.
#[derive(Debug)]
pub struct PackedCorpus {
    pub chunks: Vec<Vec<TokenId>>,
    pub skipped_short_docs: usize,
    pub total_tokens: usize,
}

pub fn pack_corpus(docs: &[String], vocab: &Vocab, seq_len: usize) -> Result<PackedCorpus> {
    if seq_len < 8 {
        return Err(Error::Config(format!("seq_len must be at least 8, got {seq_len}")));
    }
    let mut chunks = Vec::new();
    let mut skipped = 0usize;
    let mut total = 0usize;
    for doc in docs {
        let ids = vocab.encode(doc);
        if ids.len() < MIN_DOC_TOKENS {
            skipped += 1;
            continue;
        }
        total += ids.len();
        for chunk in ids.chunks(seq_len) {
            chunks.push(chunk.to_vec());
        }
    }
    if chunks.is_empty() {
        return Err(Error::Ingestion(
            "corpus contains no usable documents after skipping short ones".into(),
        ));
    }
    Ok(PackedCorpus {
        chunks,
        skipped_short_docs: skipped,
        total_tokens: total,
    })
}

/// Deterministic epoch iterator over fixed-size batches. The chunk order for
/// epoch e is a shuffle seeded by (seed, e); delivery order never depends
/// on consumer timing.
pub struct BatchIter<'c> {
    corpus: &'c PackedCorpus,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl<'c> BatchIter<'c> {
    pub fn new(corpus: &'c PackedCorpus, seq_len: usize, batch_size: usize, seed: u64) -> Self {
        let mut it = Self {
            corpus,
            seq_len,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        it.reshuffle();
        it
    }

    /// Jump to a stored (epoch, cursor) position; used by checkpoint resume.
    pub fn seek(&mut self, epoch: u64, cursor: usize) {
        self.epoch = epoch;
        self.reshuffle();
        self.cursor = cursor.min(self.order.len());
    }

    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.corpus.chunks.len().div_ceil(self.batch_size)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.corpus.chunks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Next batch within the current epoch, or None at epoch end.
    pub fn next_batch(&mut self) -> Option<TokenBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let rows: Vec<Vec<TokenId>> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.corpus.chunks[i].clone())
            .collect();
        self.cursor = end;
        Some(TokenBatch::from_rows(&rows, self.seq_len))
    }

    /// Next batch, rolling over to the next epoch when the current one ends.
    pub fn next_batch_wrapping(&mut self) -> TokenBatch {
        if let Some(b) = self.next_batch() {
            return b;
        }
        self.epoch += 1;
        self.reshuffle();
        self.next_batch().expect("non-empty corpus always yields a batch")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabMode;
    use std::collections::HashMap;

    fn word_vocab(docs: &[String]) -> Vocab {
        Vocab::build(docs, VocabMode::Word, None, 2).unwrap()
    }

    fn docs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ten_token_doc_splits_into_8_plus_2() {
        let d = docs(&["t0 t1 t2 t3 t4 t5 t6 t7 t8 t9"]);
        let v = word_vocab(&d);
        let packed = pack_corpus(&d, &v, 8).unwrap();
        assert_eq!(packed.chunks.len(), 2);
        assert_eq!(packed.chunks[0].len(), 8);
        assert_eq!(packed.chunks[1].len(), 2);
        let mut it = BatchIter::new(&packed, 8, 4, 7);
        let batch = it.next_batch().unwrap();
        assert_eq!(batch.rows, 2);
        // the short chunk is right-padded to seq_len
        let short = (0..2).find(|&r| batch.row_len(r) == 2).unwrap();
        assert_eq!(&batch.row(short)[2..], &[PAD; 6]);
    }

    #[test]
    fn same_seed_same_batch_order() {
        let d: Vec<String> = (0..30).map(|i| format!("w{i} w{} w{} w{} w{}", i + 1, i + 2, i + 3, i + 4)).collect();
        let v = word_vocab(&d);
        let packed = pack_corpus(&d, &v, 8).unwrap();
        let collect = |seed: u64| {
            let mut it = BatchIter::new(&packed, 8, 4, seed);
            let mut all = Vec::new();
            while let Some(b) = it.next_batch() {
                all.push(b);
            }
            all
        };
        assert_eq!(collect(42), collect(42));
        assert_ne!(collect(42), collect(43));
    }

    #[test]
    fn epochs_reshuffle_but_cover_same_chunks() {
        let d: Vec<String> = (0..20).map(|i| format!("a{i} b{i} c{i} d{i} e{i}")).collect();
        let v = word_vocab(&d);
        let packed = pack_corpus(&d, &v, 8).unwrap();
        let mut it = BatchIter::new(&packed, 8, 3, 9);
        let mut epoch0 = Vec::new();
        while let Some(b) = it.next_batch() {
            epoch0.extend(b.ids.iter().copied().filter(|&t| t != PAD));
        }
        it.seek(1, 0);
        let mut epoch1 = Vec::new();
        while let Some(b) = it.next_batch() {
            epoch1.extend(b.ids.iter().copied().filter(|&t| t != PAD));
        }
        assert_ne!(epoch0, epoch1, "epoch order should differ");
        let sort = |mut v: Vec<TokenId>| {
            v.sort_unstable();
            v
        };
        assert_eq!(sort(epoch0), sort(epoch1), "same multiset across epochs");
    }

    #[test]
    fn token_conservation_over_random_corpus() {
        // multiset of non-PAD tokens in one epoch == corpus multiset
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let d: Vec<String> = (0..100)
            .map(|_| {
                let len = rng.gen_range(4..40);
                (0..len).map(|_| format!("w{}", rng.gen_range(0..50))).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let v = word_vocab(&d);
        let packed = pack_corpus(&d, &v, 16).unwrap();

        let mut corpus_counts: HashMap<TokenId, usize> = HashMap::new();
        for doc in &d {
            for id in v.encode(doc) {
                *corpus_counts.entry(id).or_insert(0) += 1;
            }
        }
        let mut seen: HashMap<TokenId, usize> = HashMap::new();
        let mut it = BatchIter::new(&packed, 16, 7, 5);
        while let Some(b) = it.next_batch() {
            for &t in &b.ids {
                if t != PAD {
                    *seen.entry(t).or_insert(0) += 1;
                }
            }
        }
        assert_eq!(seen, corpus_counts);
    }

    #[test]
    fn short_documents_are_skipped_and_counted() {
        let d = docs(&["a b", "w x y z", "c"]);
        let v = word_vocab(&d);
        let packed = pack_corpus(&d, &v, 8).unwrap();
        assert_eq!(packed.skipped_short_docs, 2);
        assert_eq!(packed.chunks.len(), 1);
    }

    #[test]
    fn tiny_seq_len_rejected() {
        let d = docs(&["a b c d e"]);
        let v = word_vocab(&d);
        assert!(matches!(pack_corpus(&d, &v, 4), Err(Error::Config(_))));
    }
}
