//! Seeded synthetic tasks.
//!
//! **Copy**: the first half of the sequence is random, the second half
//! repeats it. Every row from the last random token on predicts the next
//! copied token.
//!
//! **Needle retrieval** is a three-step lookup. Records `P(k, a) W(y)`
//! sit at the start of aligned key blocks. A table lists a pair `W(y) C(c)`
//! for every `y`, with the `c` values a random permutation. Key and value
//! are separate tokens, so reading the table before knowing `y` yields an
//! unordered bag of keys and values. The sequence ends with one query
//! `Q(k)` per record, targeting `O(a, y, c)`: the record's `a` and `y` and
//! the `c` the table pairs with that `y`.
//!
//! Answering needs the record block (found from its key, which also
//! carries `a`), the `y` right after the key (only reachable once the
//! block is found), and then a lookup in the table. In the far layout
//! (depth at least the window) the table sits at least one window after
//! every record and the queries at least one window after the table. In
//! the near layout a single query follows its record within the window.
//!
//! Far-layout samples end with a few single-step queries: `R(k)` asks for
//! a record's `W(y)` and `S(y)` asks for a table answer. Only training
//! samples score them; held-out accuracy covers the `Q(k)` rows alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    NeedleRetrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    /// Needle retrieval: minimum distance from the target record to the query.
    pub needle_depth: usize,
    /// Needle retrieval: aligned block size records are placed on.
    pub block_size: usize,
    /// Needle retrieval: window the table keeps clear of the records.
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Next-token target per row, `None` where the loss ignores the row.
    pub targets: Vec<Option<usize>>,
}

const RECORDS: usize = 4;
const AS: usize = 2;
const YS: usize = 6;
const FILLER: usize = 0;
const TABLE_LEN: usize = 2 * YS;
const AUX_RECORDS: usize = 2;
const AUX_TABLE: usize = 2;
const AUX: usize = AUX_RECORDS + AUX_TABLE;

fn p_tok(k: usize, a: usize) -> usize {
    1 + k * AS + a
}
fn w_tok(y: usize) -> usize {
    p_tok(RECORDS, 0) + y
}
fn q_tok(k: usize) -> usize {
    w_tok(YS) + k
}
fn c_tok(c: usize) -> usize {
    q_tok(RECORDS) + c
}
fn o_tok(a: usize, y: usize, c: usize) -> usize {
    c_tok(YS) + (a * YS + y) * YS + c
}
fn r_tok(k: usize) -> usize {
    o_tok(AS, 0, 0) + k
}
fn s_tok(y: usize) -> usize {
    r_tok(RECORDS) + y
}

impl SyntheticTask {
    pub fn copy(seq_len: usize, vocab: usize) -> Self {
        Self { kind: TaskKind::Copy, seq_len, vocab, needle_depth: 0, block_size: 1, window: 0 }
    }

    /// Needle retrieval with the smallest sequence that fits `needle_depth`.
    pub fn needle(needle_depth: usize, block_size: usize, window: usize) -> Self {
        let mut task = Self {
            kind: TaskKind::NeedleRetrieval,
            seq_len: 0,
            vocab: Self::needle_vocab(),
            needle_depth,
            block_size,
            window,
        };
        task.seq_len = task.min_needle_len();
        task
    }

    /// Tokens the needle task uses.
    pub fn needle_vocab() -> usize {
        s_tok(YS)
    }

    fn min_needle_len(&self) -> usize {
        let b = self.block_size.max(1);
        if self.is_near() {
            // Table, then record slots, then the query.
            return TABLE_LEN + (RECORDS + 1) * b + 1;
        }
        // Record slots, a window, the table, a window, the queries; the
        // queries must also be `needle_depth` past the last record key.
        let w = self.window;
        let table_at = ((RECORDS + 1) * b + w).max((self.needle_depth + RECORDS * b).saturating_sub(TABLE_LEN + w));
        table_at + TABLE_LEN + w + RECORDS + AUX
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Copy => {
                if self.seq_len < 2 || self.vocab < 2 {
                    return Err(Error::Config("copy task needs seq_len ≥ 2 and vocab ≥ 2".into()));
                }
            }
            TaskKind::NeedleRetrieval => {
                if self.vocab < Self::needle_vocab() {
                    return Err(Error::Config(format!("needle task needs vocab ≥ {}", Self::needle_vocab())));
                }
                if self.block_size < 2 {
                    return Err(Error::Config("needle task needs block_size ≥ 2".into()));
                }
                if self.seq_len < self.min_needle_len() {
                    return Err(Error::Config(format!(
                        "needle task with depth {} needs seq_len ≥ {}",
                        self.needle_depth,
                        self.min_needle_len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// A scored sample: the rows held-out accuracy is measured on.
    pub fn sample(&self, rng: &mut Rng) -> Result<Sample> {
        self.draw(rng, false)
    }

    /// A sample that also targets the auxiliary rows, for training.
    pub fn train_sample(&self, rng: &mut Rng) -> Result<Sample> {
        self.draw(rng, true)
    }

    pub fn batch(&self, rng: &mut Rng, n: usize) -> Result<Vec<Sample>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn train_batch(&self, rng: &mut Rng, n: usize) -> Result<Vec<Sample>> {
        (0..n).map(|_| self.train_sample(rng)).collect()
    }

    fn draw(&self, rng: &mut Rng, aux: bool) -> Result<Sample> {
        self.validate()?;
        Ok(match self.kind {
            TaskKind::Copy => self.copy_sample(rng),
            TaskKind::NeedleRetrieval => self.needle_sample(rng, aux),
        })
    }

    fn copy_sample(&self, rng: &mut Rng) -> Sample {
        let half = self.seq_len / 2;
        let first: Vec<usize> = (0..self.seq_len - half).map(|_| rng.below(self.vocab)).collect();
        let mut tokens = first.clone();
        tokens.extend(first.iter().take(half));
        let targets = (0..self.seq_len)
            .map(|i| (i + 1 >= self.seq_len - half && i + 1 < self.seq_len).then(|| tokens[i + 1]))
            .collect();
        Sample { tokens, targets }
    }

    /// Depths within the window use the near layout.
    fn is_near(&self) -> bool {
        self.needle_depth < self.window
    }

    fn needle_sample(&self, rng: &mut Rng, aux: bool) -> Sample {
        let (len, b) = (self.seq_len, self.block_size);
        let mut tokens = vec![FILLER; len];
        let mut targets = vec![None; len];

        let mut keys: Vec<usize> = (0..RECORDS).collect();
        rng.shuffle(&mut keys);
        let records: Vec<(usize, usize, usize)> = keys.iter().map(|&k| (k, rng.below(AS), rng.below(YS))).collect();
        let mut answer: Vec<usize> = (0..YS).collect();
        rng.shuffle(&mut answer);
        let mut entries: Vec<usize> = (0..YS).collect();
        rng.shuffle(&mut entries);
        let write_table = |tokens: &mut [usize], at: usize| {
            for (i, &y) in entries.iter().enumerate() {
                tokens[at + 2 * i] = w_tok(y);
                tokens[at + 2 * i + 1] = c_tok(answer[y]);
            }
        };

        if self.is_near() {
            let query = len - 1;
            write_table(&mut tokens, 0);
            // The queried record starts `needle_depth` (rounded up to a
            // block start) before the query; the others fill other slots
            // after the table.
            let first = TABLE_LEN.div_ceil(b);
            let last = (query - 2) / b + 1;
            let target = ((query - self.needle_depth.max(2)) / b).clamp(first, last - 1);
            let mut others: Vec<usize> = (first..last).filter(|&s| s != target).collect();
            rng.shuffle(&mut others);
            let slots = std::iter::once(target).chain(others);
            for (&(k, a, y), slot) in records.iter().zip(slots) {
                tokens[slot * b] = p_tok(k, a);
                tokens[slot * b + 1] = w_tok(y);
            }
            let (k, a, y) = records[0];
            tokens[query] = q_tok(k);
            targets[query] = Some(o_tok(a, y, answer[y]));
            return Sample { tokens, targets };
        }

        let queries = len - RECORDS - AUX;
        let table_at = queries - self.window - TABLE_LEN;
        write_table(&mut tokens, table_at);
        // Extra length goes before the records, in whole blocks.
        let extra = len - self.min_needle_len();
        let base = rng.below(extra / b + 1) * b;
        let mut slots: Vec<usize> = (0..=RECORDS).collect();
        rng.shuffle(&mut slots);
        for (&(k, a, y), &slot) in records.iter().zip(&slots) {
            tokens[base + slot * b] = p_tok(k, a);
            tokens[base + slot * b + 1] = w_tok(y);
        }
        let mut order: Vec<usize> = (0..RECORDS).collect();
        rng.shuffle(&mut order);
        for (i, &r) in order.iter().enumerate() {
            let (k, a, y) = records[r];
            tokens[queries + i] = q_tok(k);
            targets[queries + i] = Some(o_tok(a, y, answer[y]));
        }
        let at = queries + RECORDS;
        rng.shuffle(&mut order);
        for (i, &r) in order[..AUX_RECORDS].iter().enumerate() {
            let (k, _, y) = records[r];
            tokens[at + i] = r_tok(k);
            targets[at + i] = aux.then(|| w_tok(y));
        }
        let at = at + AUX_RECORDS;
        for (i, &y) in entries[..AUX_TABLE].iter().enumerate() {
            tokens[at + i] = s_tok(y);
            targets[at + i] = aux.then(|| c_tok(answer[y]));
        }
        Sample { tokens, targets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_second_half() {
        let task = SyntheticTask::copy(8, 5);
        let s = task.sample(&mut Rng::new(1)).unwrap();
        assert_eq!(s.tokens[..4], s.tokens[4..]);
        let rows: Vec<usize> = (0..8).filter(|&i| s.targets[i].is_some()).collect();
        assert_eq!(rows, vec![3, 4, 5, 6]);
        assert_eq!(s.targets[3], Some(s.tokens[4]));
    }

    /// The table's `W(y)`: the one followed by a `C` token.
    fn table_pos(s: &Sample, y: usize) -> usize {
        (0..s.tokens.len() - 1)
            .find(|&i| s.tokens[i] == w_tok(y) && (c_tok(0)..c_tok(YS)).contains(&s.tokens[i + 1]))
            .unwrap()
    }

    fn check_needle(task: &SyntheticTask, queries: usize) {
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let s = task.sample(&mut rng).unwrap();
            assert_eq!(s.tokens.len(), task.seq_len);
            let rows: Vec<usize> = (0..s.tokens.len()).filter(|&i| s.targets[i].is_some()).collect();
            assert_eq!(rows.len(), queries);
            for q in rows {
                let k = s.tokens[q] - q_tok(0);
                let p_pos = s.tokens.iter().position(|&t| (p_tok(k, 0)..p_tok(k, AS)).contains(&t)).unwrap();
                let a = s.tokens[p_pos] - p_tok(k, 0);
                assert_eq!(p_pos % task.block_size, 0);
                assert!(q - p_pos >= task.needle_depth);
                if task.is_near() {
                    assert!(q - p_pos < task.window);
                }
                let y = s.tokens[p_pos + 1] - w_tok(0);
                let e_pos = table_pos(&s, y);
                if !task.is_near() {
                    assert!(e_pos >= p_pos + task.block_size + task.window);
                    assert!(q >= e_pos + task.window);
                }
                let c = s.tokens[e_pos + 1] - c_tok(0);
                assert_eq!(s.targets[q], Some(o_tok(a, y, c)));
            }
        }
    }

    #[test]
    fn needle_far_layout() {
        check_needle(&SyntheticTask::needle(24, 4, 8), RECORDS);
        check_needle(&SyntheticTask { seq_len: 90, ..SyntheticTask::needle(24, 4, 8) }, RECORDS);
        check_needle(&SyntheticTask::needle(200, 4, 8), RECORDS);
    }

    #[test]
    fn needle_auxiliary_rows_score_only_in_training() {
        let task = SyntheticTask::needle(24, 4, 8);
        let s = task.train_sample(&mut Rng::new(3)).unwrap();
        let held = task.sample(&mut Rng::new(3)).unwrap();
        assert_eq!(s.tokens, held.tokens);
        assert_eq!(s.targets.iter().flatten().count(), RECORDS + AUX);
        for (i, &t) in s.tokens.iter().enumerate() {
            if (r_tok(0)..r_tok(RECORDS)).contains(&t) {
                let k = t - r_tok(0);
                let p = s.tokens.iter().position(|&x| (p_tok(k, 0)..p_tok(k, AS)).contains(&x)).unwrap();
                assert_eq!(s.targets[i], Some(s.tokens[p + 1]));
            }
            if (s_tok(0)..s_tok(YS)).contains(&t) {
                let y = t - s_tok(0);
                let e = table_pos(&s, y);
                assert_eq!(s.targets[i], Some(s.tokens[e + 1]));
            }
        }
    }

    #[test]
    fn needle_near_layout() {
        check_needle(&SyntheticTask::needle(4, 4, 8), 1);
    }
}
