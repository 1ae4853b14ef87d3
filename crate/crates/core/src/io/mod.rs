//! File formats: little-endian binary containers for bulk numeric data, JSON
//! for configuration, ground truth and manifests, TSV for rankings.
//!
//! | magic  | content                                                         |
//! |--------|-----------------------------------------------------------------|
//! | `TKFM` | version, C, H, W, f32 payload in `[C][H][W]` order              |
//! | `TKGD` | version, n, d, n length-prefixed UTF-8 ids, `n×d` f32 payload    |
//! | `TKCK` | version, model config JSON, tensor table (name, rank, dims, f64) |
//! | `TKPQ` | version, d, s, M, `M×256×s` f32 centroids                       |
//! | `TKPC` | count, M, `count×M` code bytes                                  |
//!
//! All integers are u32.

mod binary;
mod text;

pub use text::{
    rankings_to_tsv, read_ground_truth, read_json, read_manifest, read_rankings_tsv, write_ground_truth, write_json,
    write_manifest, write_rankings_tsv, Manifest, ManifestEntry,
};

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use binary::{Reader, Writer};

use crate::aggregation::FeatureMap;
use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::quantization::{PqCodebook, CODEBOOK_SIZE};
use crate::tensor::Tensor;

pub const TKFM_VERSION: u32 = 1;
pub const TKGD_VERSION: u32 = 1;
pub const TKCK_VERSION: u32 = 1;
pub const TKPQ_VERSION: u32 = 1;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn at_path<T>(path: &Path, r: std::result::Result<T, FormatError>) -> Result<T> {
    r.map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Converts to single precision.
pub fn encode_tkfm(f: &FeatureMap) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(b"TKFM");
    w.u32(TKFM_VERSION);
    w.usize(f.channels());
    w.usize(f.height());
    w.usize(f.width());
    w.f32s(&f.values().iter().map(|v| *v as f32).collect::<Vec<_>>());
    w.buf
}

pub fn decode_tkfm(bytes: &[u8]) -> std::result::Result<FeatureMap, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(b"TKFM")?;
    r.version(TKFM_VERSION)?;
    let (c, h, w) = (r.usize()?, r.usize()?, r.usize()?);
    let payload_at = r.offset();
    let count = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| r.invalid("extent product overflows"))?;
    let values = r.f32s(count)?;
    r.finish()?;
    FeatureMap::new(c, h, w, values.into_iter().map(f64::from).collect())
        .map_err(|e| r.invalid_at(payload_at, e.to_string()))
}

pub fn read_tkfm(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    at_path(path, decode_tkfm(&read_bytes(path)?))
}

pub fn write_tkfm(path: impl AsRef<Path>, f: &FeatureMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tkfm(f))
}

/// Contents of a `TKGD` file: `n` ids and an `n×d` single-precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorFile {
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DescriptorFile {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn encode_tkgd(d: &DescriptorFile) -> Result<Vec<u8>> {
    if d.data.len() != d.ids.len() * d.dim {
        return Err(Error::dim("encode_tkgd", &[d.data.len()], &[d.ids.len(), d.dim]));
    }
    let mut w = Writer::default();
    w.raw(b"TKGD");
    w.u32(TKGD_VERSION);
    w.usize(d.ids.len());
    w.usize(d.dim);
    for id in &d.ids {
        w.string(id);
    }
    w.f32s(&d.data);
    Ok(w.buf)
}

pub fn decode_tkgd(bytes: &[u8]) -> std::result::Result<DescriptorFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(b"TKGD")?;
    r.version(TKGD_VERSION)?;
    let n = r.usize()?;
    let dim = r.usize()?;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    let mut seen = HashSet::new();
    for _ in 0..n {
        let at = r.offset();
        let id = r.string()?;
        if !seen.insert(id.clone()) {
            return Err(r.invalid_at(at, format!("duplicate id {id:?}")));
        }
        ids.push(id);
    }
    let count = n.checked_mul(dim).ok_or_else(|| r.invalid("payload size overflows"))?;
    let data = r.f32s(count)?;
    r.finish()?;
    Ok(DescriptorFile { ids, dim, data })
}

pub fn read_tkgd(path: impl AsRef<Path>) -> Result<DescriptorFile> {
    let path = path.as_ref();
    at_path(path, decode_tkgd(&read_bytes(path)?))
}

pub fn write_tkgd(path: impl AsRef<Path>, d: &DescriptorFile) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tkgd(d)?)
}

pub fn encode_tkck(m: &ModelParams) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.raw(b"TKCK");
    w.u32(TKCK_VERSION);
    w.string(&serde_json::to_string(&m.config)?);
    let named = m.named_tensors();
    w.usize(named.len());
    for (name, t) in named {
        w.string(&name);
        w.usize(t.shape().len());
        for d in t.shape() {
            w.usize(*d);
        }
        w.f64s(t.data());
    }
    Ok(w.buf)
}

pub fn decode_tkck(bytes: &[u8]) -> std::result::Result<ModelParams, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(b"TKCK")?;
    r.version(TKCK_VERSION)?;
    let at = r.offset();
    let json = r.string()?;
    let config: ModelConfig =
        serde_json::from_str(&json).map_err(|e| r.invalid_at(at, format!("model config: {e}")))?;
    // the skeleton fixes names, order and shapes; its values are overwritten
    let mut model =
        ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| r.invalid_at(at, e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let at = r.offset();
    let count = r.usize()?;
    if count != expected.len() {
        return Err(r.invalid_at(at, format!("{count} tensors, configuration needs {}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let at = r.offset();
        let found = r.string()?;
        if &found != name {
            return Err(r.invalid_at(at, format!("tensor {found:?} where {name:?} was expected")));
        }
        let at = r.offset();
        let rank = r.usize()?;
        let dims = (0..rank)
            .map(|_| r.usize())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(r.invalid_at(at, format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let data = r.f64s(shape.iter().product())?;
        loaded.push(Tensor::new(dims, data).map_err(|e| r.invalid(e.to_string()))?);
    }
    r.finish()?;
    for (slot, t) in model.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(model)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    at_path(path, decode_tkck(&read_bytes(path)?))
}

pub fn write_checkpoint(path: impl AsRef<Path>, m: &ModelParams) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tkck(m)?)
}

pub fn encode_tkpq(cb: &PqCodebook) -> Result<Vec<u8>> {
    if !cb.trained {
        return Err(Error::State("refusing to store an untrained codebook".into()));
    }
    let mut w = Writer::default();
    w.raw(b"TKPQ");
    w.u32(TKPQ_VERSION);
    w.usize(cb.dim);
    w.usize(cb.sub_dim);
    w.usize(cb.num_subquantizers());
    for table in &cb.centroids {
        w.f32s(table);
    }
    Ok(w.buf)
}

pub fn decode_tkpq(bytes: &[u8]) -> std::result::Result<PqCodebook, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(b"TKPQ")?;
    r.version(TKPQ_VERSION)?;
    let at = r.offset();
    let (dim, sub_dim, m) = (r.usize()?, r.usize()?, r.usize()?);
    let mut cb = PqCodebook::new(dim, sub_dim).map_err(|e| r.invalid_at(at, e.to_string()))?;
    if m != cb.num_subquantizers() {
        return Err(r.invalid_at(at, format!("M = {m} but d/s = {}", cb.num_subquantizers())));
    }
    for table in cb.centroids.iter_mut() {
        let at = r.offset();
        *table = r.f32s(CODEBOOK_SIZE * sub_dim)?;
        if table.iter().any(|v| !v.is_finite()) {
            return Err(r.invalid_at(at, "non-finite centroid"));
        }
    }
    r.finish()?;
    cb.trained = true;
    Ok(cb)
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<PqCodebook> {
    let path = path.as_ref();
    at_path(path, decode_tkpq(&read_bytes(path)?))
}

pub fn write_codebook(path: impl AsRef<Path>, cb: &PqCodebook) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tkpq(cb)?)
}

/// PQ codes: `count×M` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeFile {
    pub count: usize,
    pub subquantizers: usize,
    pub codes: Vec<u8>,
}

pub fn encode_tkpc(c: &CodeFile) -> Result<Vec<u8>> {
    if c.codes.len() != c.count * c.subquantizers {
        return Err(Error::dim("encode_tkpc", &[c.codes.len()], &[c.count, c.subquantizers]));
    }
    let mut w = Writer::default();
    w.raw(b"TKPC");
    w.usize(c.count);
    w.usize(c.subquantizers);
    w.raw(&c.codes);
    Ok(w.buf)
}

pub fn decode_tkpc(bytes: &[u8]) -> std::result::Result<CodeFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(b"TKPC")?;
    let count = r.usize()?;
    let m = r.usize()?;
    let n = count
        .checked_mul(m)
        .ok_or_else(|| r.invalid("payload size overflows"))?;
    let codes = r.bytes(n)?.to_vec();
    r.finish()?;
    Ok(CodeFile {
        count,
        subquantizers: m,
        codes,
    })
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<CodeFile> {
    let path = path.as_ref();
    at_path(path, decode_tkpc(&read_bytes(path)?))
}

pub fn write_codes(path: impl AsRef<Path>, c: &CodeFile) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tkpc(c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::{pq_train, KMeansOptions};
    use crate::tensor::random_tensor;

    #[test]
    fn tkfm_single_value_encoding() {
        let f = FeatureMap::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = encode_tkfm(&f);
        assert_eq!(&bytes[..4], b"TKFM");
        assert_eq!(&bytes[20..], &[0x00, 0x00, 0x00, 0x3F]);
        assert_eq!(decode_tkfm(&bytes).unwrap(), f);
    }

    #[test]
    fn tkfm_errors_are_distinct() {
        let f = FeatureMap::new(2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let mut bytes = encode_tkfm(&f);
        assert!(matches!(
            decode_tkfm(&bytes[..bytes.len() - 2]),
            Err(FormatError::Truncated {
                offset: 20,
                expected: 48,
                actual: 46
            })
        ));
        bytes[4] = 2;
        assert!(matches!(
            decode_tkfm(&bytes),
            Err(FormatError::UnsupportedVersion {
                offset: 4,
                found: 2,
                ..
            })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_tkfm(&bytes),
            Err(FormatError::BadMagic { offset: 0, .. })
        ));
    }

    #[test]
    fn tkgd_round_trip_and_truncation() {
        let d = DescriptorFile {
            ids: vec!["a".into(), "bé".into()],
            dim: 3,
            data: vec![1.0, 0.0, 0.0, 0.0, 0.6, 0.8],
        };
        let bytes = encode_tkgd(&d).unwrap();
        assert_eq!(decode_tkgd(&bytes).unwrap(), d);
        let err = decode_tkgd(&bytes[..bytes.len() - 5]).unwrap_err();
        assert_eq!(
            err,
            FormatError::Truncated {
                offset: bytes.len() - 24,
                expected: 24,
                actual: 19
            }
        );
        assert!(err.to_string().contains("expected 24 bytes, found 19"));
    }

    #[test]
    fn tkgd_rejects_duplicate_ids() {
        let d = DescriptorFile {
            ids: vec!["a".into(), "a".into()],
            dim: 1,
            data: vec![1.0, 1.0],
        };
        assert!(matches!(
            decode_tkgd(&encode_tkgd(&d).unwrap()),
            Err(FormatError::Invalid { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = ModelConfig {
            dim: 8,
            ..ModelConfig::desk(8, 5)
        };
        let mut m = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in m.tensors_mut() {
            *t = random_tensor(t.shape(), 1.0, &mut rng);
        }
        let bytes = encode_tkck(&m).unwrap();
        let back = decode_tkck(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        // the inactive tokenizer tensor is not persisted
        assert_eq!(back.named_tensors(), m.named_tensors());
        assert_eq!(encode_tkck(&back).unwrap(), bytes);
        assert!(decode_tkck(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn codebook_and_codes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = random_tensor(&[300 * 8], 1.0, &mut rng)
            .data()
            .iter()
            .map(|v| *v as f32)
            .collect();
        let cb = pq_train(&data, 8, 4, &KMeansOptions { iters: 3, seed: 0 }).unwrap();
        assert_eq!(decode_tkpq(&encode_tkpq(&cb).unwrap()).unwrap(), cb);
        let codes = CodeFile {
            count: 3,
            subquantizers: 2,
            codes: vec![0, 1, 2, 255, 7, 9],
        };
        assert_eq!(decode_tkpc(&encode_tkpc(&codes).unwrap()).unwrap(), codes);
        assert!(encode_tkpq(&PqCodebook::new(8, 4).unwrap()).is_err());
    }

    #[test]
    fn path_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tkfm");
        std::fs::write(&p, b"TKF").unwrap();
        match read_tkfm(&p) {
            Err(Error::Format { path, source }) => {
                assert_eq!(path, p);
                assert!(matches!(source, FormatError::Truncated { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_tkfm(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
