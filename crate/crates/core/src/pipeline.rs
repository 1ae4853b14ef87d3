//! Glue between the model and the retrieval stack: multi-scale extraction
//! into a [`DescriptorIndex`] and held-out mAP on a synthetic corpus.

use crate::aggregation::FeatureMap;
use crate::error::{Error, Result};
use crate::model::{multiscale_descriptor, ModelParams};
use crate::parallel;
use crate::retrieval::{evaluate_map, search_batch, ApVariant, DescriptorIndex, MapReport, Protocol, SearchMode};
use crate::training::{Split, SyntheticCorpus};

/// Resamples `map` by every factor in `scales`; factor 1 is the map itself.
pub fn scale_pyramid(map: &FeatureMap, scales: &[f64]) -> Result<Vec<FeatureMap>> {
    scales
        .iter()
        .map(|&s| if s == 1.0 { Ok(map.clone()) } else { map.resample(s) })
        .collect()
}

/// One unit-norm multi-scale descriptor per item, stored in single precision.
pub fn extract_index(model: &ModelParams, items: &[(String, Vec<FeatureMap>)]) -> Result<DescriptorIndex> {
    let rows = parallel::map(items, |_, (_, maps)| multiscale_descriptor(maps, model));
    let mut matrix = Vec::with_capacity(items.len() * model.config.dim);
    for (row, (id, _)) in rows.into_iter().zip(items) {
        let row = row.map_err(|e| Error::Input(format!("{id}: {e}")))?;
        matrix.extend(row.iter().map(|v| *v as f32));
    }
    DescriptorIndex::new(
        items.iter().map(|(id, _)| id.clone()).collect(),
        model.config.dim,
        matrix,
    )
}

fn split_index(model: &ModelParams, corpus: &SyntheticCorpus, split: Split, scales: &[f64]) -> Result<DescriptorIndex> {
    let items = corpus
        .split(split)
        .map(|img| Ok((img.id.clone(), scale_pyramid(&img.map, scales)?)))
        .collect::<Result<Vec<_>>>()?;
    extract_index(model, &items)
}

/// Exact-search mAP of the query split against the database split.
pub fn heldout_map(
    model: &ModelParams,
    corpus: &SyntheticCorpus,
    scales: &[f64],
    protocol: Protocol,
) -> Result<MapReport> {
    let db = split_index(model, corpus, Split::Database, scales)?;
    let queries = split_index(model, corpus, Split::Query, scales)?;
    let rankings = search_batch(&db, &queries, db.len(), SearchMode::Exact)?;
    evaluate_map(&rankings, &corpus.ground_truth, protocol, ApVariant::Trapezoidal)
}
