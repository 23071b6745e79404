//! MMCK encoder checkpoints.
//!
//! Layout (little-endian): magic `MMCK` | u16 version = 1 | u32 h | u32 d |
//! W1, b1, W2, b2, W3, b3 row-major f64 | u64 training step | f64 rho.

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const MMCK_MAGIC: [u8; 4] = *b"MMCK";
pub const MMCK_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub step: u64,
    /// Log-temperature of the owning stage.
    pub rho: f64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(&MMCK_MAGIC);
    w.u16(MMCK_VERSION);
    w.u32(ck.params.hidden() as u32);
    w.u32(ck.params.dim() as u32);
    for &v in &ck.params.flatten() {
        w.f64(v);
    }
    w.u64(ck.step);
    w.f64(ck.rho);
    w.buf
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(buf);
    r.magic(&MMCK_MAGIC)?;
    let version_off = r.offset();
    let version = r.u16("version")?;
    if version != MMCK_VERSION {
        return Err(Error::format(
            version_off,
            format!("unsupported MMCK version {version}, expected {MMCK_VERSION}"),
        ));
    }
    let h = r.u32("hidden width")? as usize;
    let d = r.u32("output dim")? as usize;
    if h < 4 || d < 4 {
        return Err(Error::format(
            8,
            format!("implausible checkpoint shape h={h}, d={d}"),
        ));
    }

    let read_mat = |rows: usize, cols: usize, what: &str, r: &mut ByteReader| -> Result<Mat> {
        let mut m = Mat::zeros(rows, cols);
        for v in &mut m.data {
            *v = r.f64(what)?;
        }
        Ok(m)
    };
    let read_vec = |len: usize, what: &str, r: &mut ByteReader| -> Result<Vec<f64>> {
        let mut out = vec![0.0; len];
        for v in &mut out {
            *v = r.f64(what)?;
        }
        Ok(out)
    };

    let w1 = read_mat(h, 3, "w1", &mut r)?;
    let b1 = read_vec(h, "b1", &mut r)?;
    let w2 = read_mat(h, h, "w2", &mut r)?;
    let b2 = read_vec(h, "b2", &mut r)?;
    let w3 = read_mat(d, h, "w3", &mut r)?;
    let b3 = read_vec(d, "b3", &mut r)?;
    let step = r.u64("step counter")?;
    let rho_off = r.offset();
    let rho = r.f64("rho")?;
    if !rho.is_finite() {
        return Err(Error::format(rho_off, "non-finite rho".to_string()));
    }
    let params = EncoderParams { w1, b1, w2, b2, w3, b3 };
    if params.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::format(14, "non-finite parameter value".to_string()));
    }
    r.expect_eof()?;
    Ok(Checkpoint { params, step, rho })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Load a checkpoint and insist on the expected encoder shape.
pub fn load_checkpoint_expecting(path: &Path, hidden: usize, dim: usize) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.params.hidden() != hidden || ck.params.dim() != dim {
        return Err(Error::shape(
            format!("encoder h={hidden}, d={dim}"),
            format!("checkpoint h={}, d={}", ck.params.hidden(), ck.params.dim()),
        ));
    }
    Ok(ck)
}
