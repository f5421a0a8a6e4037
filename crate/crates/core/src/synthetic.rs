//! Synthetic parallel corpora used by tests, benches and the gradcheck
//! command. Content symbols start right after the reserved ids.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{SentencePair, RESERVED};
use crate::rng;

const TASK: u64 = 0x5359_4e54;

/// First non-reserved id.
pub const FIRST_SYMBOL: usize = RESERVED.len();

/// Uniform random sequence of content symbols from a vocabulary of `vocab`
/// ids in total (reserved ids included).
pub fn random_sequence(r: &mut rng::Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| r.random_range(FIRST_SYMBOL..vocab)).collect()
}

/// Target equals source. Lengths are uniform in `1..=max_len`.
pub fn copy_task(pairs: usize, vocab: usize, max_len: usize, seed: u64) -> Vec<SentencePair> {
    assert!(vocab > FIRST_SYMBOL && max_len >= 1);
    let mut r = rng::stream(seed, &[TASK, 1]);
    (0..pairs)
        .map(|_| {
            let len = r.random_range(1..=max_len);
            let s = random_sequence(&mut r, vocab, len);
            SentencePair::new(s.clone(), &s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgreementTask {
    /// Number of distinct key symbols; each key has its own agreement symbol.
    pub keys: usize,
    /// Size of the filler alphabet. At least `max_filler`, since a filler
    /// never repeats a symbol.
    pub filler_symbols: usize,
    pub min_filler: usize,
    pub max_filler: usize,
}

impl Default for AgreementTask {
    fn default() -> Self {
        AgreementTask {
            keys: 2,
            filler_symbols: 40,
            min_filler: 20,
            max_filler: 40,
        }
    }
}

impl AgreementTask {
    /// Ids: keys, then agreement symbols, then filler symbols.
    pub fn vocab_size(&self) -> usize {
        FIRST_SYMBOL + 2 * self.keys + self.filler_symbols
    }

    pub fn key(&self, k: usize) -> usize {
        FIRST_SYMBOL + k
    }

    pub fn agreement(&self, k: usize) -> usize {
        FIRST_SYMBOL + self.keys + k
    }

    pub fn filler(&self, i: usize) -> usize {
        FIRST_SYMBOL + 2 * self.keys + i
    }

    /// Agreement symbol required by the key at the head of `source`.
    pub fn expected_final(&self, source: &[usize]) -> usize {
        self.agreement(source[0] - FIRST_SYMBOL)
    }

    /// Source `k x_1 .. x_L`, target `k x_1 .. x_L a(k)`. `L` is uniform in
    /// `min_filler..=max_filler` and the `x_i` are distinct filler symbols
    /// in random order, so copying them needs the source while the last
    /// target token depends only on the first one, `L + 1` positions back.
    pub fn generate(&self, pairs: usize, seed: u64) -> Vec<SentencePair> {
        assert!(self.keys >= 1 && self.min_filler <= self.max_filler && self.max_filler <= self.filler_symbols);
        let mut r = rng::stream(seed, &[TASK, 2]);
        let mut pool: Vec<usize> = (0..self.filler_symbols).map(|i| self.filler(i)).collect();
        (0..pairs)
            .map(|_| {
                let k = r.random_range(0..self.keys);
                let len = r.random_range(self.min_filler..=self.max_filler);
                let (chosen, _) = pool.partial_shuffle(&mut r, len);
                let mut src = vec![self.key(k)];
                src.extend_from_slice(chosen);
                let mut tgt = src.clone();
                tgt.push(self.agreement(k));
                SentencePair::new(src, &tgt)
            })
            .collect()
    }
}
