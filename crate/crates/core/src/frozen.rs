//! Synthetic frozen modality encoders and the persisted embedding cache.
//!
//! Text and image towers are stand-ins with analytically known structure:
//! each class owns a unit anchor vector in the shared latent space; text
//! embeddings are the anchors themselves, image embeddings are per-instance
//! noisy anchors. Caches persist bit-exactly in the MMEC format:
//! magic `MMEC` | u16 version = 1 | u8 modality | u32 count | u32 dim |
//! count records of (u64 id, dim f64), sorted ascending by id.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

pub const MMEC_MAGIC: [u8; 4] = *b"MMEC";
pub const MMEC_VERSION: u16 = 1;

/// Maximum allowed pairwise anchor dot product; classes stay separable.
pub const ANCHOR_MAX_DOT: f64 = 0.5;
const ANCHOR_RETRIES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Point,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Point => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            2 => Some(Modality::Point),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Point => "point",
        }
    }
}

/// Frozen stand-in for the image/text towers: one unit anchor per class.
#[derive(Debug, Clone)]
pub struct SyntheticModalityModel {
    pub dim: usize,
    pub num_classes: u16,
    pub anchors: Vec<Vec<f64>>,
    pub sigma_image: f64,
    pub master_seed: u64,
}

/// Build the anchor set, resampling with fresh sub-seeds until every
/// pairwise dot product is at or below [`ANCHOR_MAX_DOT`].
pub fn build_model(
    master_seed: u64,
    num_classes: u16,
    dim: usize,
    sigma_image: f64,
) -> Result<SyntheticModalityModel> {
    if dim < 8 {
        return Err(Error::domain(format!("dim must be >= 8, got {dim}")));
    }
    if num_classes < 2 {
        return Err(Error::domain(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if !(sigma_image.is_finite() && sigma_image >= 0.0) {
        return Err(Error::domain("sigma_image must be finite and >= 0"));
    }

    for attempt in 0..ANCHOR_RETRIES {
        let mut stream = rng::stream(master_seed, "anchors", &[attempt]);
        let mut anchors = Vec::with_capacity(num_classes as usize);
        for _ in 0..num_classes {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut stream)).collect();
            anchors.push(linalg::normalize(&v)?);
        }
        let mut max_dot = f64::NEG_INFINITY;
        for a in 0..anchors.len() {
            for b in (a + 1)..anchors.len() {
                max_dot = max_dot.max(linalg::dot(&anchors[a], &anchors[b]));
            }
        }
        if max_dot <= ANCHOR_MAX_DOT {
            return Ok(SyntheticModalityModel {
                dim,
                num_classes,
                anchors,
                sigma_image,
                master_seed,
            });
        }
    }
    Err(Error::AnchorConstruction(format!(
        "could not separate {num_classes} anchors in {dim} dims within {ANCHOR_RETRIES} retries"
    )))
}

/// Class-level text embedding: exactly the class anchor.
pub fn embed_text(model: &SyntheticModalityModel, class_id: u16) -> Result<Vec<f64>> {
    if class_id >= model.num_classes {
        return Err(Error::domain(format!(
            "class {class_id} out of range (C = {})",
            model.num_classes
        )));
    }
    Ok(model.anchors[class_id as usize].clone())
}

/// Instance-level image embedding: the class anchor plus seeded isotropic
/// noise, renormalized.
pub fn embed_image(
    model: &SyntheticModalityModel,
    class_id: u16,
    instance_seed: u64,
) -> Result<Vec<f64>> {
    if class_id >= model.num_classes {
        return Err(Error::domain(format!(
            "class {class_id} out of range (C = {})",
            model.num_classes
        )));
    }
    let mut stream = rng::stream(
        model.master_seed,
        "image-noise",
        &[u64::from(class_id), instance_seed],
    );
    let anchor = &model.anchors[class_id as usize];
    let noisy: Vec<f64> = anchor
        .iter()
        .map(|a| {
            let eps: f64 = StandardNormal.sample(&mut stream);
            a + model.sigma_image * eps
        })
        .collect();
    linalg::normalize(&noisy)
}

/// Persisted map id -> unit feature vector for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub modality: Modality,
    pub dim: usize,
    pub entries: BTreeMap<u64, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn get(&self, id: u64) -> Result<&[f64]> {
        self.entries
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingCacheId(id, self.modality.name().to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Embed every (id, class) pair of the dataset. Image embeddings consume
/// `per_instance_seeds` positionally; text ignores them.
pub fn precache(
    dataset: &[(u64, u16)],
    model: &SyntheticModalityModel,
    modality: Modality,
    per_instance_seeds: &[u64],
) -> Result<EmbeddingCache> {
    if modality == Modality::Image && per_instance_seeds.len() != dataset.len() {
        return Err(Error::shape(
            format!("{} instance seeds", dataset.len()),
            format!("{}", per_instance_seeds.len()),
        ));
    }
    let mut entries = BTreeMap::new();
    for (k, &(id, class_id)) in dataset.iter().enumerate() {
        let v = match modality {
            Modality::Text => embed_text(model, class_id)?,
            Modality::Image => embed_image(model, class_id, per_instance_seeds[k])?,
            Modality::Point => {
                return Err(Error::domain(
                    "point embeddings come from the trained encoder, not precache",
                ))
            }
        };
        if entries.insert(id, v).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(EmbeddingCache {
        modality,
        dim: model.dim,
        entries,
    })
}

pub fn encode_cache(cache: &EmbeddingCache) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(&MMEC_MAGIC);
    w.u16(MMEC_VERSION);
    w.u8(cache.modality.code());
    let count = u32::try_from(cache.entries.len())
        .map_err(|_| Error::domain("too many entries for MMEC"))?;
    w.u32(count);
    w.u32(cache.dim as u32);
    // BTreeMap iterates ascending by id, which is the on-disk order
    for (&id, v) in &cache.entries {
        if v.len() != cache.dim {
            return Err(Error::shape(
                format!("{} dims", cache.dim),
                format!("{} dims for id {id}", v.len()),
            ));
        }
        w.u64(id);
        for &x in v {
            w.f64(x);
        }
    }
    Ok(w.buf)
}

pub fn decode_cache(buf: &[u8]) -> Result<EmbeddingCache> {
    let mut r = ByteReader::new(buf);
    r.magic(&MMEC_MAGIC)?;
    let version_off = r.offset();
    let version = r.u16("version")?;
    if version != MMEC_VERSION {
        return Err(Error::format(
            version_off,
            format!("unsupported MMEC version {version}, expected {MMEC_VERSION}"),
        ));
    }
    let modality_off = r.offset();
    let modality_code = r.u8("modality")?;
    let modality = Modality::from_code(modality_code).ok_or_else(|| {
        Error::format(modality_off, format!("unknown modality code {modality_code}"))
    })?;
    let count = r.u32("entry count")?;
    let dim = r.u32("dim")? as usize;
    let mut entries = BTreeMap::new();
    let mut prev_id: Option<u64> = None;
    for _ in 0..count {
        let id_off = r.offset();
        let id = r.u64("entry id")?;
        if let Some(prev) = prev_id {
            if id <= prev {
                return Err(Error::format(
                    id_off,
                    format!("ids not strictly ascending: {id} after {prev}"),
                ));
            }
        }
        prev_id = Some(id);
        let vec_off = r.offset();
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(r.f64("feature value")?);
        }
        let norm = linalg::norm(&v);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::format(
                vec_off,
                format!("entry {id} violates unit norm: |v| = {norm}"),
            ));
        }
        entries.insert(id, v);
    }
    r.expect_eof()?;
    Ok(EmbeddingCache { modality, dim, entries })
}

pub fn save_cache(cache: &EmbeddingCache, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cache(cache)?)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<EmbeddingCache> {
    decode_cache(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SyntheticModalityModel {
        build_model(42, 8, 32, 0.1).unwrap()
    }

    #[test]
    fn build_model_is_deterministic_and_unit() {
        let a = model();
        let b = model();
        assert_eq!(a.anchors, b.anchors);
        for anchor in &a.anchors {
            assert!((linalg::norm(anchor) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn anchors_are_separated() {
        let m = model();
        let mut max_dot = f64::NEG_INFINITY;
        for a in 0..m.anchors.len() {
            for b in (a + 1)..m.anchors.len() {
                max_dot = max_dot.max(linalg::dot(&m.anchors[a], &m.anchors[b]));
            }
        }
        assert!(max_dot <= ANCHOR_MAX_DOT, "max dot {max_dot}");
    }

    #[test]
    fn text_embedding_is_the_anchor() {
        let m = model();
        assert_eq!(embed_text(&m, 3).unwrap(), m.anchors[3]);
        assert_eq!(embed_text(&m, 3).unwrap(), embed_text(&m, 3).unwrap());
        assert!(embed_text(&m, 8).is_err());
        let a = embed_text(&m, 1).unwrap();
        let b = embed_text(&m, 6).unwrap();
        assert!(linalg::dot(&a, &b) <= ANCHOR_MAX_DOT);
    }

    #[test]
    fn image_embedding_noise_behaviour() {
        let noiseless = build_model(42, 8, 32, 0.0).unwrap();
        assert_eq!(
            embed_image(&noiseless, 2, 77).unwrap(),
            embed_text(&noiseless, 2).unwrap()
        );

        let m = model();
        let v = embed_image(&m, 2, 77).unwrap();
        assert!((linalg::norm(&v) - 1.0).abs() <= 1e-12);
        assert_eq!(v, embed_image(&m, 2, 77).unwrap());
        assert_ne!(v, embed_image(&m, 2, 78).unwrap());
    }

    #[test]
    fn cross_modal_ground_truth_holds() {
        // Monte-Carlo oracle: a noisy image embedding stays closest to its
        // own class anchor for at least 99% of instances.
        let m = model();
        let trials = 10_000;
        let mut hits = 0;
        for t in 0..trials {
            let class = (t % u64::from(m.num_classes)) as u16;
            let v = embed_image(&m, class, t).unwrap();
            let own = linalg::dot(&v, &m.anchors[class as usize]);
            let best_other = m
                .anchors
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != class as usize)
                .map(|(_, a)| linalg::dot(&v, a))
                .fold(f64::NEG_INFINITY, f64::max);
            if own > best_other {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        assert!(rate >= 0.99, "ground-truth rate {rate}");
    }

    fn sample_cache() -> EmbeddingCache {
        let m = model();
        let dataset: Vec<(u64, u16)> = (0..100).map(|i| (i, (i % 8) as u16)).collect();
        let seeds: Vec<u64> = (0..100).collect();
        precache(&dataset, &m, Modality::Image, &seeds).unwrap()
    }

    #[test]
    fn precache_cardinality_and_determinism() {
        let a = sample_cache();
        assert_eq!(a.len(), 100);
        let b = sample_cache();
        assert_eq!(a, b);
    }

    #[test]
    fn precache_single_class_text_equals_anchor() {
        let m = model();
        let dataset: Vec<(u64, u16)> = (0..10).map(|i| (i, 5)).collect();
        let cache = precache(&dataset, &m, Modality::Text, &[]).unwrap();
        for v in cache.entries.values() {
            assert_eq!(v, &m.anchors[5]);
        }
    }

    #[test]
    fn precache_rejects_duplicate_ids() {
        let m = model();
        let dataset = vec![(3u64, 0u16), (3, 1)];
        assert!(matches!(
            precache(&dataset, &m, Modality::Text, &[]),
            Err(Error::DuplicateId(3))
        ));
    }

    #[test]
    fn cache_roundtrip_bitwise() {
        let cache = sample_cache();
        let bytes = encode_cache(&cache).unwrap();
        let back = decode_cache(&bytes).unwrap();
        assert_eq!(cache, back);
        assert_eq!(bytes, encode_cache(&back).unwrap());
    }

    #[test]
    fn cache_rejects_corrupt_magic_at_offset_zero() {
        let mut bytes = encode_cache(&sample_cache()).unwrap();
        bytes[0] = b'Z';
        match decode_cache(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cache_rejects_non_unit_entry() {
        let mut cache = sample_cache();
        let first = *cache.entries.keys().next().unwrap();
        let dim = cache.dim;
        cache.entries.insert(first, vec![0.9 / (dim as f64).sqrt(); dim]);
        let bytes = encode_cache(&cache).unwrap();
        match decode_cache(&bytes) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("unit norm")),
            other => panic!("expected unit-norm rejection, got {other:?}"),
        }
    }

    #[test]
    fn cache_get_reports_missing_id() {
        let cache = sample_cache();
        assert!(matches!(cache.get(5000), Err(Error::MissingCacheId(5000, _))));
    }
}
