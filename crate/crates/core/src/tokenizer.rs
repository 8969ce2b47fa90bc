//! Byte-level byte-pair encoding.
//!
//! The base alphabet is the 256 byte values, so every input encodes without
//! an unknown token. Training greedily merges the most frequent adjacent
//! pair; ties go to the smallest `(left, right)` id pair.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const BASE: usize = 256;
const NONE: usize = usize::MAX;
const FORMAT_VERSION: u32 = 1;

/// A pair must occur at least this often to be merged.
pub const MIN_PAIR_COUNT: i64 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bpe {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

/// Doubly linked symbol sequence shared by training and encoding.
struct Symbols {
    sym: Vec<u32>,
    prev: Vec<usize>,
    next: Vec<usize>,
}

impl Symbols {
    fn new(bytes: &[u8]) -> Self {
        let n = bytes.len();
        Symbols {
            sym: bytes.iter().map(|&b| b as u32).collect(),
            prev: (0..n).map(|i| i.checked_sub(1).unwrap_or(NONE)).collect(),
            next: (0..n)
                .map(|i| if i + 1 < n { i + 1 } else { NONE })
                .collect(),
        }
    }

    /// Replaces the pair starting at `i` by `z`; the right slot is unlinked.
    fn merge_at(&mut self, i: usize, z: u32) {
        let j = self.next[i];
        let k = self.next[j];
        self.sym[i] = z;
        self.next[i] = k;
        if k != NONE {
            self.prev[k] = i;
        }
        self.next[j] = NONE;
        self.prev[j] = NONE;
        self.sym[j] = u32::MAX;
    }

    fn live_pair(&self, i: usize) -> Option<(u32, u32)> {
        let s = self.sym[i];
        let j = self.next[i];
        (s != u32::MAX && j != NONE).then(|| (s, self.sym[j]))
    }
}

impl Bpe {
    /// Learns up to `vocab_size - 256` merges from `corpus`.
    ///
    /// Stops early when no pair occurs at least [`MIN_PAIR_COUNT`] times;
    /// the result then has fewer tokens than requested, which
    /// [`Bpe::vocab_size`] reveals.
    pub fn train(corpus: &[u8], vocab_size: usize) -> Result<Self> {
        if vocab_size <= BASE {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}, got {vocab_size}",
                BASE + 1
            )));
        }
        if vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds the u32 id range".into()));
        }
        if corpus.is_empty() {
            return Err(Error::Input(
                "cannot train a tokenizer on an empty corpus".into(),
            ));
        }
        let mut s = Symbols::new(corpus);
        let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for i in 0..corpus.len().saturating_sub(1) {
            let p = (s.sym[i], s.sym[i + 1]);
            *counts.entry(p).or_default() += 1;
            where_.entry(p).or_default().push(i);
        }
        let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> =
            counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

        let mut bpe = Bpe::base();
        while bpe.tokens.len() < vocab_size {
            let Some((c, Reverse(pair))) = heap.pop() else {
                break;
            };
            let current = counts.get(&pair).copied().unwrap_or(0);
            if c != current {
                // Stale entry; the pair only ever lost occurrences since.
                if current >= MIN_PAIR_COUNT {
                    heap.push((current, Reverse(pair)));
                }
                continue;
            }
            if c < MIN_PAIR_COUNT {
                break;
            }
            let z = bpe.push_merge(pair);
            let mut positions = where_.remove(&pair).unwrap_or_default();
            positions.sort_unstable();
            positions.dedup();
            let mut touched: Vec<(u32, u32)> = Vec::new();
            let mut bump = |counts: &mut HashMap<(u32, u32), i64>, p: (u32, u32), d: i64| {
                *counts.entry(p).or_default() += d;
                if d > 0 {
                    touched.push(p);
                }
            };
            for i in positions {
                if s.live_pair(i) != Some(pair) {
                    continue;
                }
                let left = s.prev[i];
                let right = s.next[s.next[i]];
                if left != NONE {
                    bump(&mut counts, (s.sym[left], pair.0), -1);
                    bump(&mut counts, (s.sym[left], z), 1);
                    where_.entry((s.sym[left], z)).or_default().push(left);
                }
                if right != NONE {
                    bump(&mut counts, (pair.1, s.sym[right]), -1);
                    bump(&mut counts, (z, s.sym[right]), 1);
                    where_.entry((z, s.sym[right])).or_default().push(i);
                }
                bump(&mut counts, pair, -1);
                s.merge_at(i, z);
            }
            counts.remove(&pair);
            touched.sort_unstable();
            touched.dedup();
            for p in touched {
                if let Some(&c) = counts.get(&p) {
                    if c >= MIN_PAIR_COUNT {
                        heap.push((c, Reverse(p)));
                    }
                }
            }
        }
        Ok(bpe)
    }

    fn base() -> Self {
        Bpe {
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let z = self.tokens.len() as u32;
        let mut t = self.tokens[pair.0 as usize].clone();
        t.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.tokens.push(t);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        z
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Id of the token whose bytes are exactly `bytes`.
    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        match bytes {
            [b] => Some(*b as u32),
            _ => self.tokens[BASE..]
                .iter()
                .position(|t| t == bytes)
                .map(|i| (i + BASE) as u32),
        }
    }

    /// Applies merges in learned priority order, leftmost first among
    /// occurrences of the same merge.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        if text.len() < 2 || self.merges.is_empty() {
            return text.iter().map(|&b| b as u32).collect();
        }
        let mut s = Symbols::new(text);
        let mut heap: BinaryHeap<Reverse<(u32, usize)>> = (0..text.len() - 1)
            .filter_map(|i| {
                let r = self.ranks.get(&(s.sym[i], s.sym[i + 1]))?;
                Some(Reverse((*r, i)))
            })
            .collect();
        while let Some(Reverse((rank, i))) = heap.pop() {
            let pair = self.merges[rank as usize];
            if s.live_pair(i) != Some(pair) {
                continue;
            }
            let z = BASE as u32 + rank;
            s.merge_at(i, z);
            let left = s.prev[i];
            if left != NONE {
                if let Some(&r) = self.ranks.get(&(s.sym[left], z)) {
                    heap.push(Reverse((r, left)));
                }
            }
            if let Some(p) = s.live_pair(i) {
                if let Some(&r) = self.ranks.get(&p) {
                    heap.push(Reverse((r, i)));
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i != NONE {
            out.push(s.sym[i]);
            i = s.next[i];
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let t = self.tokens.get(id as usize).ok_or(Error::Index {
                index: id as usize,
                size: self.tokens.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: FORMAT_VERSION,
            vocab: self.tokens.iter().map(|t| hex_encode(t)).collect(),
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    /// Parses and validates a vocabulary document; `origin` prefixes errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        let bad = |msg: String| Error::Parse(format!("{origin}: {msg}"));
        if file.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        if file.vocab.len() != BASE + file.merges.len() {
            return Err(bad(format!(
                "{} tokens do not match 256 base tokens plus {} merges",
                file.vocab.len(),
                file.merges.len()
            )));
        }
        let mut bpe = Bpe::base();
        for (i, h) in file.vocab.iter().take(BASE).enumerate() {
            if hex_decode(h).as_deref() != Some(&[i as u8][..]) {
                return Err(bad(format!("vocab[{i}] must be the single byte {i:02x}")));
            }
        }
        for (i, &[l, r]) in file.merges.iter().enumerate() {
            let id = BASE + i;
            if l as usize >= id || r as usize >= id {
                return Err(bad(format!("merges[{i}] refers to a later token")));
            }
            bpe.push_merge((l, r));
            if hex_decode(&file.vocab[id]).as_deref() != Some(&bpe.tokens[id][..]) {
                return Err(bad(format!("vocab[{id}] disagrees with merges[{i}]")));
            }
        }
        Ok(bpe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    vocab: Vec<String>,
    merges: Vec<[u32; 2]>,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}
