//! Corpus ingestion, fixed-length chunking and batch iteration.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::tensor::rng_from_seed;
use crate::{Error, Result};

/// Raw corpus bytes with the files they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    /// `(path, byte count)` in concatenation order.
    pub sources: Vec<(PathBuf, usize)>,
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Concatenates every file under `paths` (directories are walked) in sorted
/// path order, separated by a single newline.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Corpus> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p.as_ref(), &mut files)?;
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Error::Input("no corpus files found".into()));
    }
    let mut corpus = Corpus::default();
    for (i, f) in files.into_iter().enumerate() {
        if i > 0 {
            corpus.bytes.push(b'\n');
        }
        let before = corpus.bytes.len();
        fs::File::open(&f)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", f.display())))?
            .read_to_end(&mut corpus.bytes)?;
        corpus.sources.push((f, corpus.bytes.len() - before));
    }
    Ok(corpus)
}

/// A token stream cut into non-overlapping `block_size + 1` windows with
/// stride `block_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    tokens: Vec<u32>,
    block_size: usize,
}

impl TokenDataset {
    pub fn new(tokens: Vec<u32>, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if tokens.len() < block_size + 1 {
            return Err(Error::Input(format!(
                "{} tokens are too few for block size {block_size}; at least {} are needed",
                tokens.len(),
                block_size + 1
            )));
        }
        Ok(TokenDataset { tokens, block_size })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn num_chunks(&self) -> usize {
        (self.tokens.len() - 1) / self.block_size
    }

    /// Tokens past the last full chunk, which no chunk serves.
    pub fn dropped_tail(&self) -> usize {
        self.tokens.len() - (self.num_chunks() * self.block_size + 1)
    }

    /// Chunk `i`: tokens `[i * block_size, (i + 1) * block_size]` inclusive.
    pub fn chunk(&self, i: usize) -> &[u32] {
        let s = i * self.block_size;
        &self.tokens[s..s + self.block_size + 1]
    }

    /// Chunk order for one epoch: identity without shuffling, otherwise a
    /// permutation determined by `(seed, epoch)`.
    pub fn order(&self, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.num_chunks()).collect();
        if shuffle {
            let mut rng = rng_from_seed(seed);
            rng.set_stream(epoch);
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Batches of chunks; a final partial batch is kept unless `drop_last`.
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: u64,
        drop_last: bool,
    ) -> impl Iterator<Item = Batch> + '_ {
        let batch_size = batch_size.max(1);
        let order = self.order(shuffle, seed, epoch);
        let n = if drop_last {
            order.len() / batch_size * batch_size
        } else {
            order.len()
        };
        let order = order[..n].to_vec();
        (0..n.div_ceil(batch_size)).map(move |b| {
            let idx = &order[b * batch_size..((b + 1) * batch_size).min(n)];
            let mut ids = Vec::with_capacity(idx.len() * (self.block_size + 1));
            for &i in idx {
                ids.extend_from_slice(self.chunk(i));
            }
            Batch {
                ids,
                rows: idx.len(),
                chunks: idx.to_vec(),
            }
        })
    }

    /// Batches per epoch in training (partial batch dropped).
    pub fn train_batches(&self, batch_size: usize) -> usize {
        self.num_chunks() / batch_size.max(1)
    }
}

/// `rows` chunks of `block_size + 1` ids each, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub rows: usize,
    /// Source chunk indices, one per row.
    pub chunks: Vec<usize>,
}

const CACHE_MAGIC: &[u8; 8] = b"GAMTOK01";

/// Writes a token cache: 8-byte magic, u64 count, then u32 ids, all
/// little-endian.
pub fn write_token_cache(path: &Path, tokens: &[u32]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * tokens.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_token_cache(path: &Path) -> Result<Vec<u32>> {
    let buf = fs::read(path)?;
    let bad = |m: &str| Error::Parse(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..8] != CACHE_MAGIC {
        return Err(bad("not a token cache"));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = &buf[16..];
    if body.len() != n.checked_mul(4).ok_or_else(|| bad("count overflows"))? {
        return Err(bad("length does not match the header count"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_counts() {
        let ds = TokenDataset::new((0..513).collect(), 256).unwrap();
        assert_eq!(ds.num_chunks(), 2);
        assert_eq!(ds.dropped_tail(), 0);
        let ds = TokenDataset::new((0..257).collect(), 256).unwrap();
        assert_eq!(ds.num_chunks(), 1);
        assert_eq!(ds.chunk(0), ds.tokens());
        let ds = TokenDataset::new((0..600).collect(), 256).unwrap();
        assert_eq!(ds.dropped_tail(), 87);
        let err = TokenDataset::new((0..256).collect(), 256).unwrap_err();
        assert!(err.to_string().contains("257"), "{err}");
    }

    #[test]
    fn chunks_tile_the_stream() {
        let ds = TokenDataset::new((0..100).collect(), 7).unwrap();
        for i in 0..ds.num_chunks() {
            let c = ds.chunk(i);
            assert_eq!(c.len(), 8);
            assert_eq!(c[0] as usize, i * 7);
            for w in c.windows(2) {
                assert_eq!(w[1], w[0] + 1);
            }
        }
    }

    #[test]
    fn batch_order_and_coverage() {
        let ds = TokenDataset::new((0..101).collect(), 10).unwrap();
        let plain: Vec<usize> = ds
            .batches(3, false, 0, 0, false)
            .flat_map(|b| b.chunks)
            .collect();
        assert_eq!(plain, (0..10).collect::<Vec<_>>());
        let a: Vec<Batch> = ds.batches(3, true, 9, 2, true).collect();
        let b: Vec<Batch> = ds.batches(3, true, 9, 2, true).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|b| b.rows == 3 && b.ids.len() == 33));
        let mut seen: Vec<usize> = a.iter().flat_map(|b| b.chunks.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_ne!(ds.order(true, 9, 2), ds.order(true, 9, 3));
        let kept: Vec<Batch> = ds.batches(3, true, 9, 2, false).collect();
        assert_eq!(kept.last().unwrap().rows, 1);
    }

    #[test]
    fn corpus_concatenation() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "cd").unwrap();
        fs::write(dir.path().join("a.txt"), "ab").unwrap();
        let c = load_corpus(&[dir.path()]).unwrap();
        assert_eq!(c.bytes, b"ab\ncd");
        assert_eq!(
            c.sources.iter().map(|s| s.1).sum::<usize>() + 1,
            c.bytes.len()
        );
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(&[empty.path()]), Err(Error::Input(_))));
        assert!(matches!(
            load_corpus(&[dir.path().join("missing")]),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn token_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let toks: Vec<u32> = (0..1000).map(|i| i * 7919).collect();
        write_token_cache(&p, &toks).unwrap();
        assert_eq!(read_token_cache(&p).unwrap(), toks);
        fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(read_token_cache(&p), Err(Error::Parse(_))));
    }
}
