//! Ingested corpus on disk, plus atomic file writes.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "EVCP" | version u32 | H u64 | vocabulary table (as in checkpoints)
//! split seed u64 | split ratios 3 x f64
//! per split (train, validation, test): S u64, then per session: len u32, indices u32
//! ```

use std::io::Write;
use std::path::Path;

use crate::catalog::Vocabulary;
use crate::checkpoint::{put_u32, put_u64, put_vocab, read_vocab, Reader};
use crate::error::{Error, Result};
use crate::sessions::SessionCorpus;

pub const CORPUS_MAGIC: &[u8; 4] = b"EVCP";
pub const CORPUS_VERSION: u32 = 1;

/// Writes to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub corpus: SessionCorpus<u32>,
    pub vocab: Vocabulary,
}

impl CorpusFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = self.vocab.len();
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        put_u32(&mut out, CORPUS_VERSION);
        put_u64(&mut out, h as u64);
        put_vocab(&mut out, &self.vocab);
        put_u64(&mut out, self.corpus.split_seed);
        for r in self.corpus.split_ratios {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for split in self.corpus.splits() {
            put_u64(&mut out, split.len() as u64);
            for s in split {
                put_u32(&mut out, s.len() as u32);
                for &i in s {
                    if i as usize >= h {
                        return Err(Error::IndexOutOfRange { index: i as usize, size: h });
                    }
                    put_u32(&mut out, i);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Error::CorpusFile);
        if r.take(4)? != CORPUS_MAGIC {
            return Err(r.fail("not a corpus file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let h = r.u64()? as usize;
        let vocab = read_vocab(&mut r, h)?;
        let split_seed = r.u64()?;
        let split_ratios = [r.f64()?, r.f64()?, r.f64()?];
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u64()? as usize;
            let mut sessions = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let len = r.u32()? as usize;
                let s = (0..len).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
                if let Some(&bad) = s.iter().find(|&&i| i as usize >= h) {
                    return Err(r.fail(format!("hotel index {bad} out of range ({h} hotels)")));
                }
                sessions.push(s);
            }
            splits.push(sessions);
        }
        r.finish()?;
        let test = splits.pop().unwrap();
        let validation = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(CorpusFile {
            corpus: SessionCorpus {
                train,
                validation,
                test,
                split_seed,
                split_ratios,
            },
            vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CorpusFile::from_bytes(&bytes)
    }
}
