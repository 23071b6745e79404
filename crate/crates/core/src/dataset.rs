//! Synthetic dataset construction and the MMPD point-cloud file format.
//!
//! MMPD layout (all little-endian):
//! magic `MMPD` | u16 version = 1 | u32 record count |
//! per record: u64 id | u16 class_id | u32 n_points | n_points * 3 f64 (x,y,z)

use std::collections::BTreeMap;
use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::geometry::{gen_shape, PointCloud};
use crate::rng;

pub const MMPD_MAGIC: [u8; 4] = *b"MMPD";
pub const MMPD_VERSION: u16 = 1;

/// Build a balanced split: classes assigned round-robin by id, one
/// independent generator seed per sample.
pub fn build_split(
    master_seed: u64,
    num_classes: u16,
    points_per_cloud: usize,
    jitter_sigma: f64,
    size: usize,
    id_offset: u64,
) -> Result<Vec<PointCloud>> {
    if num_classes == 0 {
        return Err(Error::domain("num_classes must be >= 1"));
    }
    let mut out = Vec::with_capacity(size);
    for k in 0..size {
        let id = id_offset + k as u64;
        let class_id = (k as u64 % u64::from(num_classes)) as u16;
        let sample_seed = rng::sub_seed(master_seed, "data", &[id]);
        let mut pc = gen_shape(class_id, points_per_cloud, sample_seed, jitter_sigma)?;
        pc.id = id;
        out.push(pc);
    }
    Ok(out)
}

/// Per-class sample counts, ordered by class id.
pub fn class_counts(clouds: &[PointCloud]) -> BTreeMap<u16, usize> {
    let mut counts = BTreeMap::new();
    for pc in clouds {
        *counts.entry(pc.class_id).or_insert(0) += 1;
    }
    counts
}

pub fn encode_mmpd(clouds: &[PointCloud]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(&MMPD_MAGIC);
    w.u16(MMPD_VERSION);
    let count = u32::try_from(clouds.len())
        .map_err(|_| Error::domain("too many records for MMPD"))?;
    w.u32(count);
    for pc in clouds {
        w.u64(pc.id);
        w.u16(pc.class_id);
        let n = u32::try_from(pc.points.len())
            .map_err(|_| Error::domain("cloud too large for MMPD"))?;
        w.u32(n);
        for p in &pc.points {
            w.f64(p[0]);
            w.f64(p[1]);
            w.f64(p[2]);
        }
    }
    Ok(w.buf)
}

pub fn decode_mmpd(buf: &[u8]) -> Result<Vec<PointCloud>> {
    let mut r = ByteReader::new(buf);
    r.magic(&MMPD_MAGIC)?;
    let version_off = r.offset();
    let version = r.u16("version")?;
    if version != MMPD_VERSION {
        return Err(Error::format(
            version_off,
            format!("unsupported MMPD version {version}, expected {MMPD_VERSION}"),
        ));
    }
    let count = r.u32("record count")?;
    let mut out = Vec::with_capacity(count as usize);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let id_off = r.offset();
        let id = r.u64("record id")?;
        if !seen.insert(id) {
            return Err(Error::format(id_off, format!("duplicate record id {id}")));
        }
        let class_id = r.u16("class id")?;
        let n_points = r.u32("point count")? as usize;
        if n_points == 0 {
            return Err(Error::format(id_off, "record with zero points".to_string()));
        }
        let mut points = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let coord_off = r.offset();
            let p = [r.f64("x")?, r.f64("y")?, r.f64("z")?];
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::format(coord_off, "non-finite coordinate".to_string()));
            }
            points.push(p);
        }
        out.push(PointCloud { id, class_id, points });
    }
    r.expect_eof()?;
    Ok(out)
}

pub fn write_mmpd(path: &Path, clouds: &[PointCloud]) -> Result<()> {
    std::fs::write(path, encode_mmpd(clouds)?)?;
    Ok(())
}

pub fn read_mmpd(path: &Path) -> Result<Vec<PointCloud>> {
    decode_mmpd(&std::fs::read(path)?)
}
