//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian, parameters always stored as f64 so
//! round trips are exact in either training precision):
//!
//! ```text
//! magic    4 bytes  "NLCK"
//! version  u32      currently 1
//! dtype    u16 len + utf8   training element type ("f32"/"f64")
//! config   u64 len + utf8   canonical key=value manifest text
//! step     u64              training step the snapshot was taken at
//! rngs     u32 count, each: u16 name-len + name utf8
//!                           + 32-byte ChaCha seed + u128 word position
//! params   u32 count, each: u16 name-len + name utf8
//!                           + u8 ndim + ndim × u64 extents
//!                           + numel × f64 data
//! moments  u8 flag; if 1:   u64 adam step
//!                           + per param (same order): numel × f64 m, numel × f64 v
//! ```

use crate::error::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NLCK";
const VERSION: u32 = 1;

/// Captured position of a named deterministic stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub adam_step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dtype: String,
    pub config_text: String,
    pub step: u64,
    pub rng_states: Vec<(String, RngState)>,
    /// `(name, shape, values)` in model-then-objective parameter order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub moments: Option<Moments>,
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str16(&mut w, &ck.dtype)?;
    let cfg = ck.config_text.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&ck.step.to_le_bytes())?;

    w.write_all(&(ck.rng_states.len() as u32).to_le_bytes())?;
    for (name, st) in &ck.rng_states {
        write_str16(&mut w, name)?;
        w.write_all(&st.seed)?;
        w.write_all(&st.word_pos.to_le_bytes())?;
    }

    w.write_all(&(ck.params.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &ck.params {
        write_str16(&mut w, name)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }

    match &ck.moments {
        None => w.write_all(&[0u8])?,
        Some(mo) => {
            w.write_all(&[1u8])?;
            w.write_all(&mo.adam_step.to_le_bytes())?;
            for (i, (_, _, data)) in ck.params.iter().enumerate() {
                assert_eq!(mo.m[i].len(), data.len(), "moment/param length mismatch");
                assert_eq!(mo.v[i].len(), data.len(), "moment/param length mismatch");
                for &v in &mo.m[i] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for &v in &mo.v[i] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = read_str16(&mut r)?;
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_text =
        String::from_utf8(cfg).map_err(|_| Error::Format("checkpoint config is not utf8".into()))?;
    let step = read_u64(&mut r)?;

    let n_rng = read_u32(&mut r)? as usize;
    let mut rng_states = Vec::with_capacity(n_rng);
    for _ in 0..n_rng {
        let name = read_str16(&mut r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        rng_states.push((name, RngState { seed, word_pos: u128::from_le_bytes(wp) }));
    }

    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_str16(&mut r)?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f64s(&mut r, numel)?;
        params.push((name, shape, data));
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let moments = if flag[0] == 1 {
        let adam_step = read_u64(&mut r)?;
        let mut m = Vec::with_capacity(n_params);
        let mut v = Vec::with_capacity(n_params);
        for (_, _, data) in &params {
            m.push(read_f64s(&mut r, data.len())?);
            v.push(read_f64s(&mut r, data.len())?);
        }
        Some(Moments { adam_step, m, v })
    } else {
        None
    };

    Ok(Checkpoint { dtype, config_text, step, rng_states, params, moments })
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize);
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_str16<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-utf8 name in checkpoint".into()))
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

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
