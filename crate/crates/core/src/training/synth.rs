use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureMap;
use crate::error::{Error, Result};
use crate::retrieval::{GroundTruth, QueryTruth};

/// Feature maps whose class evidence lives in a few spatial patches.
///
/// Every image is isotropic Gaussian background tiled into
/// `patch_extent×patch_extent` cells. Class images overwrite `patch_count`
/// random cells with the class prototype plus per-position jitter, and
/// `clutter_count` further cells with a fresh random vector of norm
/// `clutter_norm` that carries no class information. Finally a per-image
/// shift drawn from a fixed `nuisance_rank`-dimensional subspace is added at
/// every position, modelling global appearance changes shared by all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub database_per_class: usize,
    pub queries_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Drawn at random with norm `prototype_norm` when absent.
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub prototype_norm: f64,
    pub patch_count: usize,
    /// Side of the square block each patch or clutter vector covers.
    pub patch_extent: usize,
    /// Patches in hard database images.
    pub hard_patch_count: usize,
    /// Patches in junk database images.
    pub junk_patch_count: usize,
    pub noise_std: f64,
    pub jitter_std: f64,
    pub clutter_count: usize,
    pub clutter_norm: f64,
    /// Rank of the shared subspace carrying each image's global appearance shift.
    pub nuisance_rank: usize,
    /// Per-coordinate standard deviation of the shift within that subspace.
    pub nuisance_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 25,
            database_per_class: 5,
            queries_per_class: 2,
            channels: 32,
            height: 8,
            width: 8,
            prototypes: None,
            prototype_norm: 6.0,
            patch_count: 3,
            patch_extent: 2,
            hard_patch_count: 2,
            junk_patch_count: 1,
            noise_std: 1.0,
            jitter_std: 0.3,
            clutter_count: 3,
            clutter_norm: 6.0,
            nuisance_rank: 4,
            nuisance_std: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Database,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Database => "database",
            Split::Query => "query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
    Junk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// Database images only.
    pub difficulty: Option<Difficulty>,
    pub map: FeatureMap,
    /// `(h, w)` of every class patch.
    pub patches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticDatasetSpec,
    pub prototypes: Vec<Vec<f64>>,
    pub images: Vec<SyntheticImage>,
    pub ground_truth: GroundTruth,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    /// `(map, label)` pairs of the training split.
    pub fn training_pairs(&self) -> Vec<(FeatureMap, usize)> {
        self.split(Split::Train).map(|i| (i.map.clone(), i.label)).collect()
    }
}

impl SyntheticDatasetSpec {
    /// Non-overlapping `patch_extent`-sized cells available for patches and clutter.
    pub fn cells(&self) -> usize {
        (self.height / self.patch_extent.max(1)) * (self.width / self.patch_extent.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return fail("classes and feature-map extents must be positive".into());
        }
        if self.patch_extent == 0 || self.patch_extent > self.height.min(self.width) {
            return fail("patch_extent must lie between 1 and the smaller map extent".into());
        }
        let cells = self.cells();
        let most = self.patch_count.max(self.hard_patch_count).max(self.junk_patch_count);
        if most + self.clutter_count > cells {
            return fail(format!(
                "{most} patches plus {} clutter blocks exceed {cells} cells",
                self.clutter_count
            ));
        }
        for v in [
            self.prototype_norm,
            self.noise_std,
            self.jitter_std,
            self.clutter_norm,
            self.nuisance_std,
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail("norms and standard deviations must be finite and non-negative".into());
            }
        }
        if self.nuisance_rank > self.channels {
            return fail("nuisance_rank cannot exceed channels".into());
        }
        if let Some(p) = &self.prototypes {
            if p.len() < self.num_classes {
                return fail(format!("{} prototypes for {} classes", p.len(), self.num_classes));
            }
            if p.iter().any(|v| v.len() != self.channels) {
                return fail(format!("prototypes must have {} channels", self.channels));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn scaled_direction(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Vec<f64> {
    let v = gaussian(rng, n, 1.0);
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x * norm / len).collect()
}

/// Gram-Schmidt on Gaussian draws; `rank <= n`.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rank: usize, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while rows.len() < rank {
        let mut v = gaussian(rng, n, 1.0);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-6 {
            rows.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    rows
}

fn draw_image(
    spec: &SyntheticDatasetSpec,
    proto: &[f64],
    nuisance: &[Vec<f64>],
    patches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureMap, Vec<(usize, usize)>)> {
    let (c, h, w, e) = (spec.channels, spec.height, spec.width, spec.patch_extent);
    let hw = h * w;
    let cells_w = w / e;
    let mut positions = gaussian(rng, hw * c, spec.noise_std);
    let picked = sample(rng, spec.cells(), patches + spec.clutter_count).into_vec();
    let mut locs = Vec::with_capacity(patches * e * e);
    for (k, &cell) in picked.iter().enumerate() {
        let (y0, x0) = ((cell / cells_w) * e, (cell % cells_w) * e);
        let clutter = (k >= patches).then(|| scaled_direction(rng, c, spec.clutter_norm));
        for (y, x) in (y0..y0 + e).flat_map(|y| (x0..x0 + e).map(move |x| (y, x))) {
            let p = y * w + x;
            let row = &mut positions[p * c..(p + 1) * c];
            match &clutter {
                None => {
                    let jitter = gaussian(rng, c, spec.jitter_std);
                    for ((r, base), j) in row.iter_mut().zip(proto).zip(jitter) {
                        *r = base + j;
                    }
                    locs.push((y, x));
                }
                Some(v) => row.copy_from_slice(v),
            }
        }
    }
    let mut shift = vec![0.0; c];
    for (u, z) in nuisance.iter().zip(gaussian(rng, nuisance.len(), spec.nuisance_std)) {
        for (s, x) in shift.iter_mut().zip(u) {
            *s += z * x;
        }
    }
    // positions are HW×C; FeatureMap stores [C][H][W]
    let mut values = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            values[ch * hw + p] = positions[p * c + ch] + shift[ch];
        }
    }
    Ok((FeatureMap::new(c, h, w, values)?, locs))
}

/// Deterministic in `spec` (including its seed).
pub fn synth_generate(spec: &SyntheticDatasetSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = match &spec.prototypes {
        Some(p) => p[..spec.num_classes].to_vec(),
        None => (0..spec.num_classes)
            .map(|_| scaled_direction(&mut rng, spec.channels, spec.prototype_norm))
            .collect(),
    };
    let nuisance = orthonormal_rows(&mut rng, spec.nuisance_rank, spec.channels);
    let mut images = Vec::new();
    let mut queries = Vec::new();
    for (class, proto) in prototypes.iter().enumerate() {
        for i in 0..spec.train_per_class {
            let (map, patches) = draw_image(spec, proto, &nuisance, spec.patch_count, &mut rng)?;
            images.push(SyntheticImage {
                id: format!("train-c{class:03}-{i:04}"),
                label: class,
                split: Split::Train,
                difficulty: None,
                map,
                patches,
            });
        }
        for j in 0..spec.database_per_class {
            let difficulty = match j {
                0 => Difficulty::Junk,
                j if j % 2 == 1 => Difficulty::Hard,
                _ => Difficulty::Easy,
            };
            let count = match difficulty {
                Difficulty::Easy => spec.patch_count,
                Difficulty::Hard => spec.hard_patch_count,
                Difficulty::Junk => spec.junk_patch_count,
            };
            let (map, patches) = draw_image(spec, proto, &nuisance, count, &mut rng)?;
            images.push(SyntheticImage {
                id: format!("db-c{class:03}-{j:04}"),
                label: class,
                split: Split::Database,
                difficulty: Some(difficulty),
                map,
                patches,
            });
        }
        for q in 0..spec.queries_per_class {
            let (map, patches) = draw_image(spec, proto, &nuisance, spec.patch_count, &mut rng)?;
            let id = format!("q-c{class:03}-{q:04}");
            queries.push(id.clone());
            images.push(SyntheticImage {
                id,
                label: class,
                split: Split::Query,
                difficulty: None,
                map,
                patches,
            });
        }
    }
    let truth = queries
        .into_iter()
        .map(|qid| {
            let label = images.iter().find(|i| i.id == qid).map(|i| i.label).unwrap_or_default();
            let of = |d: Difficulty| -> Vec<String> {
                images
                    .iter()
                    .filter(|i| i.split == Split::Database && i.label == label && i.difficulty == Some(d))
                    .map(|i| i.id.clone())
                    .collect()
            };
            QueryTruth {
                easy: of(Difficulty::Easy),
                hard: of(Difficulty::Hard),
                junk: of(Difficulty::Junk),
                id: qid,
            }
        })
        .collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        prototypes,
        images,
        ground_truth: GroundTruth { queries: truth },
    })
}
