//! Product quantization of global descriptors with 8-bit codes and
//! asymmetric distance tables.

mod kmeans;

pub use kmeans::{kmeans_fit, KMeans, KMeansOptions};

use crate::error::{Error, Result};
use crate::parallel;

/// Centroids per subquantizer (8-bit codes).
pub const CODEBOOK_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub dim: usize,
    pub sub_dim: usize,
    /// `M` tables of `256×s` values.
    pub centroids: Vec<Vec<f32>>,
    pub trained: bool,
}

/// `M` centroid indices.
pub type PqCode = Vec<u8>;

impl PqCodebook {
    /// An untrained codebook with zeroed tables.
    pub fn new(dim: usize, sub_dim: usize) -> Result<Self> {
        if sub_dim == 0 || dim == 0 || !dim.is_multiple_of(sub_dim) {
            return Err(Error::Config(format!(
                "subvector dimension {sub_dim} does not divide descriptor dimension {dim}"
            )));
        }
        Ok(Self {
            dim,
            sub_dim,
            centroids: vec![vec![0.0; CODEBOOK_SIZE * sub_dim]; dim / sub_dim],
            trained: false,
        })
    }

    pub fn num_subquantizers(&self) -> usize {
        self.dim / self.sub_dim
    }

    fn check_ready(&self, len: usize) -> Result<()> {
        if !self.trained {
            return Err(Error::State("PQ codebook is not trained".into()));
        }
        if len != self.dim {
            return Err(Error::dim("pq", &[len], &[self.dim]));
        }
        Ok(())
    }

    fn centroid(&self, m: usize, j: usize) -> &[f32] {
        &self.centroids[m][j * self.sub_dim..(j + 1) * self.sub_dim]
    }

    /// Bytes per encoded vector.
    pub fn code_bytes(&self) -> usize {
        self.num_subquantizers()
    }
}

/// Runs k-means independently on each of the `d/s` subvector slices of
/// `descriptors` (`n×d`, row-major).
pub fn pq_train(descriptors: &[f32], dim: usize, sub_dim: usize, opts: &KMeansOptions) -> Result<PqCodebook> {
    let mut cb = PqCodebook::new(dim, sub_dim)?;
    if descriptors.is_empty() || !descriptors.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "PQ training needs at least one {dim}-dimensional descriptor"
        )));
    }
    let n = descriptors.len() / dim;
    let slices: Vec<usize> = (0..cb.num_subquantizers()).collect();
    let tables = parallel::map(&slices, |_, &m| -> Result<Vec<f32>> {
        let mut pts = Vec::with_capacity(n * sub_dim);
        for i in 0..n {
            let start = i * dim + m * sub_dim;
            pts.extend(descriptors[start..start + sub_dim].iter().map(|v| *v as f64));
        }
        let opts = KMeansOptions {
            iters: opts.iters,
            seed: opts.seed.wrapping_add(m as u64),
        };
        let km = kmeans_fit(&pts, sub_dim, CODEBOOK_SIZE, &opts)?;
        Ok(km.centroids.iter().map(|v| *v as f32).collect())
    });
    for (m, t) in tables.into_iter().enumerate() {
        cb.centroids[m] = t?;
    }
    cb.trained = true;
    Ok(cb)
}

/// Per-slice nearest centroid; ties go to the lowest index.
pub fn pq_encode(v: &[f32], cb: &PqCodebook) -> Result<PqCode> {
    cb.check_ready(v.len())?;
    let s = cb.sub_dim;
    Ok((0..cb.num_subquantizers())
        .map(|m| {
            let q = &v[m * s..(m + 1) * s];
            let mut best = (0usize, f64::INFINITY);
            for j in 0..CODEBOOK_SIZE {
                let d: f64 = q
                    .iter()
                    .zip(cb.centroid(m, j))
                    .map(|(a, b)| {
                        let t = *a as f64 - *b as f64;
                        t * t
                    })
                    .sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0 as u8
        })
        .collect())
}

/// Encodes `n×d` row-major descriptors into `n×M` bytes.
pub fn pq_encode_all(descriptors: &[f32], cb: &PqCodebook) -> Result<Vec<u8>> {
    let rows: Vec<&[f32]> = descriptors.chunks(cb.dim).collect();
    let codes = parallel::map(&rows, |_, r| pq_encode(r, cb));
    let mut out = Vec::with_capacity(rows.len() * cb.code_bytes());
    for c in codes {
        out.extend(c?);
    }
    Ok(out)
}

pub fn pq_decode(code: &[u8], cb: &PqCodebook) -> Result<Vec<f32>> {
    if !cb.trained {
        return Err(Error::State("PQ codebook is not trained".into()));
    }
    if code.len() != cb.num_subquantizers() {
        return Err(Error::dim("pq_decode", &[code.len()], &[cb.num_subquantizers()]));
    }
    Ok(code
        .iter()
        .enumerate()
        .flat_map(|(m, &j)| cb.centroid(m, j as usize).iter().copied())
        .collect())
}

/// `M×256` squared distances between query slices and centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    pub subquantizers: usize,
    pub values: Vec<f64>,
}

impl AdcTable {
    pub fn get(&self, m: usize, j: usize) -> f64 {
        self.values[m * CODEBOOK_SIZE + j]
    }
}

pub fn adc_table(query: &[f32], cb: &PqCodebook) -> Result<AdcTable> {
    cb.check_ready(query.len())?;
    let s = cb.sub_dim;
    let m_count = cb.num_subquantizers();
    let mut values = Vec::with_capacity(m_count * CODEBOOK_SIZE);
    for m in 0..m_count {
        let q = &query[m * s..(m + 1) * s];
        for j in 0..CODEBOOK_SIZE {
            values.push(
                q.iter()
                    .zip(cb.centroid(m, j))
                    .map(|(a, b)| {
                        let t = *a as f64 - *b as f64;
                        t * t
                    })
                    .sum(),
            );
        }
    }
    Ok(AdcTable {
        subquantizers: m_count,
        values,
    })
}

/// Sum of `M` table lookups.
pub fn adc_distance(code: &[u8], table: &AdcTable) -> f64 {
    code.iter()
        .enumerate()
        .map(|(m, &j)| table.values[m * CODEBOOK_SIZE + j as usize])
        .sum()
}
