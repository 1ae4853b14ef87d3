//! Exact and PQ nearest-neighbor search, Revisited-protocol mAP and
//! latency/memory benchmarks.

mod metrics;

pub use metrics::{average_precision, evaluate_map, ApVariant, MapReport, Protocol};

use std::cmp::Ordering;
use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::quantization::{adc_distance, adc_table, pq_encode_all, pq_train, KMeansOptions, PqCodebook};

/// Tolerance on the unit norm of stored single-precision rows.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub id: String,
    #[serde(default)]
    pub easy: Vec<String>,
    #[serde(default)]
    pub hard: Vec<String>,
    #[serde(default)]
    pub junk: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub queries: Vec<QueryTruth>,
}

impl GroundTruth {
    /// Easy, hard and junk sets must be pairwise disjoint per query.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for q in &self.queries {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::Input(format!("query {} listed twice in ground truth", q.id)));
            }
            let mut ids = HashSet::new();
            for id in q.easy.iter().chain(&q.hard).chain(&q.junk) {
                if !ids.insert(id.as_str()) {
                    return Err(Error::Input(format!(
                        "ground truth of query {} lists {id} in more than one set",
                        q.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&QueryTruth> {
        self.queries.iter().find(|q| q.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub similarity: f64,
}

/// Database ids by descending similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub items: Vec<RankedItem>,
}

impl Ranking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exact,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    pub codebook: PqCodebook,
    /// `n×M` codes, row-major.
    pub codes: Vec<u8>,
}

/// Immutable database of unit-norm single-precision descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f32>,
    pq: Option<PqIndex>,
}

fn norm32(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

impl DescriptorIndex {
    pub fn new(ids: Vec<String>, dim: usize, matrix: Vec<f32>) -> Result<Self> {
        if dim == 0 || matrix.len() != ids.len() * dim {
            return Err(Error::dim("descriptor index", &[matrix.len()], &[ids.len(), dim]));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Input(format!("duplicate descriptor id {id}")));
            }
        }
        for (id, row) in ids.iter().zip(matrix.chunks(dim)) {
            let n = norm32(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Input(format!("descriptor {id} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            ids,
            dim,
            matrix,
            pq: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pq(&self) -> Option<&PqIndex> {
        self.pq.as_ref()
    }

    /// Trains a codebook on the indexed descriptors and encodes them.
    pub fn build_pq(&mut self, sub_dim: usize, opts: &KMeansOptions) -> Result<()> {
        if self.is_empty() {
            return Err(Error::State("cannot quantize an empty index".into()));
        }
        let codebook = pq_train(&self.matrix, self.dim, sub_dim, opts)?;
        let codes = pq_encode_all(&self.matrix, &codebook)?;
        self.pq = Some(PqIndex { codebook, codes });
        Ok(())
    }

    pub fn attach_pq(&mut self, codebook: PqCodebook, codes: Vec<u8>) -> Result<()> {
        if codebook.dim != self.dim {
            return Err(Error::dim("attach_pq", &[codebook.dim], &[self.dim]));
        }
        if codes.len() != self.len() * codebook.code_bytes() {
            return Err(Error::dim(
                "attach_pq",
                &[codes.len()],
                &[self.len(), codebook.code_bytes()],
            ));
        }
        self.pq = Some(PqIndex { codebook, codes });
        Ok(())
    }

    /// Stored bytes for the descriptors searched in `mode`.
    pub fn memory_bytes(&self, mode: SearchMode) -> Result<u64> {
        match mode {
            SearchMode::Exact => Ok(memory_bytes(self.len() as u64, self.dim as u64, None)),
            SearchMode::Pq => {
                let pq = self
                    .pq
                    .as_ref()
                    .ok_or_else(|| Error::State("index has no PQ codes".into()))?;
                Ok(memory_bytes(
                    self.len() as u64,
                    self.dim as u64,
                    Some(pq.codebook.sub_dim as u64),
                ))
            }
        }
    }
}

/// `n·d·4` for raw single precision, `n·d/s` for 8-bit PQ codes.
pub fn memory_bytes(n: u64, dim: u64, pq_sub_dim: Option<u64>) -> u64 {
    match pq_sub_dim {
        None => n * dim * 4,
        Some(s) => n * (dim / s),
    }
}

fn order(a: &(f64, usize), b: &(f64, usize), ids: &[String], ascending: bool) -> Ordering {
    let primary = if ascending {
        a.0.total_cmp(&b.0)
    } else {
        b.0.total_cmp(&a.0)
    };
    primary.then_with(|| ids[a.1].cmp(&ids[b.1]))
}

/// Top-`k` database items for a normalized query. Ties are broken by
/// ascending database id.
pub fn search_topk(index: &DescriptorIndex, query_id: &str, q: &[f32], k: usize, mode: SearchMode) -> Result<Ranking> {
    if index.is_empty() {
        return Err(Error::State("search on an empty index".into()));
    }
    if q.len() != index.dim {
        return Err(Error::dim("search_topk", &[q.len()], &[index.dim]));
    }
    let k = k.min(index.len());
    let (mut scored, ascending): (Vec<(f64, usize)>, bool) = match mode {
        SearchMode::Exact => (
            (0..index.len())
                .map(|i| {
                    let s = index.row(i).iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
                    (s, i)
                })
                .collect(),
            false,
        ),
        SearchMode::Pq => {
            let pq = index
                .pq
                .as_ref()
                .ok_or_else(|| Error::State("index has no PQ codes".into()))?;
            let table = adc_table(q, &pq.codebook)?;
            let m = pq.codebook.code_bytes();
            (
                pq.codes
                    .chunks(m)
                    .enumerate()
                    .map(|(i, c)| (adc_distance(c, &table), i))
                    .collect(),
                true,
            )
        }
    };
    scored.sort_by(|a, b| order(a, b, &index.ids, ascending));
    scored.truncate(k);
    let items = scored
        .into_iter()
        .map(|(s, i)| RankedItem {
            id: index.ids[i].clone(),
            // squared distance between unit vectors is 2 − 2·cos
            similarity: if ascending { 1.0 - s / 2.0 } else { s },
        })
        .collect();
    Ok(Ranking {
        query_id: query_id.to_string(),
        items,
    })
}

/// Searches every query concurrently; output follows query order.
pub fn search_batch(
    index: &DescriptorIndex,
    queries: &DescriptorIndex,
    k: usize,
    mode: SearchMode,
) -> Result<Vec<Ranking>> {
    if queries.dim != index.dim {
        return Err(Error::dim("search_batch", &[queries.dim], &[index.dim]));
    }
    let idx: Vec<usize> = (0..queries.len()).collect();
    parallel::map(&idx, |_, &i| {
        search_topk(index, &queries.ids[i], queries.row(i), k, mode)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: SearchMode,
    pub database_size: usize,
    pub dim: usize,
    pub queries: usize,
    pub memory_bytes: u64,
    pub mean_latency_seconds: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let b = self.memory_bytes as f64;
        format!(
            "mode\tdatabase\tdim\tqueries\tmemory_bytes\tmemory_gb\tmemory_gib\tmean_latency_s\n\
             {:?}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.6e}\n",
            self.mode,
            self.database_size,
            self.dim,
            self.queries,
            self.memory_bytes,
            b / 1e9,
            b / (1u64 << 30) as f64,
            self.mean_latency_seconds
        )
    }
}

/// Mean single-threaded wall-clock latency of full-database searches.
pub fn bench(index: &DescriptorIndex, queries: &DescriptorIndex, mode: SearchMode) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::Input("bench needs at least one query".into()));
    }
    // warm-up
    search_topk(index, &queries.ids[0], queries.row(0), index.len(), mode)?;
    let start = Instant::now();
    for i in 0..queries.len() {
        search_topk(index, &queries.ids[i], queries.row(i), index.len(), mode)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        mode,
        database_size: index.len(),
        dim: index.dim,
        queries: queries.len(),
        memory_bytes: index.memory_bytes(mode)?,
        mean_latency_seconds: elapsed / queries.len() as f64,
    })
}
