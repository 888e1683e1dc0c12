//! Dataset container files.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic     4 bytes "NLDS"
//! version   u32 = 1
//! kind      u16 len + utf8
//! seed      u64
//! split     u16 len + utf8
//! tok hash  u16 len + utf8 (hex; recomputed and validated on read)
//! symbols   u32 count, each u16 len + utf8
//! metadata  u64 len + JSON
//! records   u64 count, each: u32 token count, u32 prompt_len, count × u32 ids
//! ```

use super::{Record, TaskDataset, TaskKind, TaskMeta, Tokenizer};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NLDS";
const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, ds: &TaskDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, ds.kind.as_str())?;
    w.write_all(&ds.seed.to_le_bytes())?;
    write_str(&mut w, &ds.split)?;
    write_str(&mut w, &ds.tokenizer.hash_hex())?;
    let symbols = ds.tokenizer.symbols();
    // The reserved block is implicit in every tokenizer; store only the
    // task symbols after it.
    let task_symbols = &symbols[super::RESERVED.len()..];
    w.write_all(&(task_symbols.len() as u32).to_le_bytes())?;
    for s in task_symbols {
        write_str(&mut w, s)?;
    }
    let meta = serde_json::to_vec(&ds.meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
    for r in &ds.records {
        w.write_all(&(r.tokens.len() as u32).to_le_bytes())?;
        w.write_all(&r.prompt_len.to_le_bytes())?;
        for &t in &r.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TaskDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let kind = TaskKind::parse(&read_str(&mut r)?)?;
    let seed = read_u64(&mut r)?;
    let split = read_str(&mut r)?;
    let stored_hash = read_str(&mut r)?;
    let n_symbols = read_u32(&mut r)? as usize;
    let mut task_symbols = Vec::with_capacity(n_symbols);
    for _ in 0..n_symbols {
        task_symbols.push(read_str(&mut r)?);
    }
    let tokenizer = Tokenizer::new(task_symbols);
    let actual = tokenizer.hash_hex();
    if actual != stored_hash {
        return Err(Error::TokenizerHash { expected: stored_hash, actual });
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: TaskMeta =
        serde_json::from_slice(&meta_buf).map_err(|e| Error::Format(e.to_string()))?;
    let n_records = read_u64(&mut r)? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let n_tokens = read_u32(&mut r)? as usize;
        let prompt_len = read_u32(&mut r)?;
        let mut bytes = vec![0u8; n_tokens * 4];
        r.read_exact(&mut bytes)?;
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        records.push(Record { tokens, prompt_len });
    }
    Ok(TaskDataset { kind, seed, split, tokenizer, meta, records })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let b = s.as_bytes();
    assert!(b.len() <= u16::MAX as usize);
    w.write_all(&(b.len() as u16).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-utf8 string in dataset".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
