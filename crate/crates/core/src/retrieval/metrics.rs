use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, Ranking};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Positives are easy ∪ hard; junk is ignored.
    #[default]
    Medium,
    /// Positives are hard; junk and easy are ignored.
    Hard,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "medium" => Ok(Protocol::Medium),
            "hard" => Ok(Protocol::Hard),
            other => Err(Error::Config(format!("unknown protocol {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApVariant {
    /// Average of the precisions just before and at each positive.
    #[default]
    Trapezoidal,
    /// Mean precision at each positive.
    Naive,
}

/// AP of `ranking` after removing `junk`. Positives absent from the ranking
/// contribute zero.
pub fn average_precision(
    ranking: &Ranking,
    positives: &HashSet<&str>,
    junk: &HashSet<&str>,
    variant: ApVariant,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Evaluation(format!(
            "AP of query {} is undefined without positives",
            ranking.query_id
        )));
    }
    let total = positives.len() as f64;
    let mut found = 0usize;
    let mut rank = 0usize;
    let mut ap = 0.0;
    for id in ranking.ids().filter(|id| !junk.contains(id)) {
        rank += 1;
        if !positives.contains(id) {
            continue;
        }
        found += 1;
        let at = found as f64 / rank as f64;
        ap += match variant {
            ApVariant::Naive => at,
            ApVariant::Trapezoidal => {
                let before = if rank == 1 {
                    1.0
                } else {
                    (found - 1) as f64 / (rank - 1) as f64
                };
                (before + at) / 2.0
            }
        };
    }
    Ok(ap / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub id: String,
    /// `None` when the protocol leaves the query without positives.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub protocol: Protocol,
    pub map: f64,
    pub evaluated: usize,
    pub per_query: Vec<QueryAp>,
}

/// Mean AP over the queries that have positives under `protocol`.
pub fn evaluate_map(
    rankings: &[Ranking],
    gt: &GroundTruth,
    protocol: Protocol,
    variant: ApVariant,
) -> Result<MapReport> {
    let mut per_query = Vec::with_capacity(rankings.len());
    let mut sum = 0.0;
    let mut evaluated = 0;
    for r in rankings {
        let truth = gt
            .get(&r.query_id)
            .ok_or_else(|| Error::Input(format!("no ground truth for query {}", r.query_id)))?;
        let easy = truth.easy.iter().map(String::as_str);
        let hard = truth.hard.iter().map(String::as_str);
        let junk = truth.junk.iter().map(String::as_str);
        let (positives, ignored): (HashSet<&str>, HashSet<&str>) = match protocol {
            Protocol::Medium => (easy.chain(hard).collect(), junk.collect()),
            Protocol::Hard => (hard.collect(), junk.chain(easy).collect()),
        };
        let ap = if positives.is_empty() {
            log::warn!("query {} has no positives under {protocol:?}; skipped", r.query_id);
            None
        } else {
            let ap = average_precision(r, &positives, &ignored, variant)?;
            sum += ap;
            evaluated += 1;
            Some(ap)
        };
        per_query.push(QueryAp {
            id: r.query_id.clone(),
            ap,
        });
    }
    if evaluated == 0 {
        return Err(Error::Evaluation(format!("no query has positives under {protocol:?}")));
    }
    Ok(MapReport {
        protocol,
        map: sum / evaluated as f64,
        evaluated,
        per_query,
    })
}
