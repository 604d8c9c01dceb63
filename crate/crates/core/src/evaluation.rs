//! Retrieval metrics under the camera-aware protocol, and cross-domain
//! evaluation of a trained checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::extract_features;
use crate::data::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::trainer::{self, Checkpoint};

/// Ranks reported in the results file.
pub const REPORTED_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub map: f64,
    /// `cmc[k - 1]` is the Rank-k accuracy.
    pub cmc: Vec<f64>,
    /// One entry per valid query, in query order.
    pub per_query_ap: Vec<f64>,
    pub num_queries: usize,
    pub num_skipped: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        if k == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

fn normalized_rows(m: &[Vec<f64>], which: &'static str) -> Result<Vec<Vec<f64>>> {
    m.iter()
        .enumerate()
        .map(|(row, v)| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::ZeroNorm { which, row });
            }
            Ok(v.iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Cosine distance `1 - cos(q_i, g_j)`.
pub fn distance_matrix(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = query.first().or(gallery.first()).map_or(0, Vec::len);
    if query.iter().chain(gallery).any(|v| v.len() != d) {
        return Err(Error::Shape("query and gallery features must share one dimension".into()));
    }
    let q = normalized_rows(query, "query")?;
    let g = normalized_rows(gallery, "gallery")?;
    Ok(q.iter()
        .map(|qi| {
            g.iter()
                .map(|gj| 1.0 - qi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect())
}

/// Average precision of a ranked relevance list with at least one hit.
fn average_precision(relevant: impl Iterator<Item = bool>) -> (f64, Option<usize>) {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut first = None;
    for (i, r) in relevant.enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
            first.get_or_insert(i);
        }
    }
    (if hits > 0 { sum / hits as f64 } else { 0.0 }, first)
}

/// mAP and CMC up to `max_rank`. Per query, gallery entries sharing both
/// identity and camera are dropped, the rest ranked by ascending distance
/// with ties broken by gallery index; queries left without a relevant
/// entry are skipped.
pub fn map_cmc(
    dist: &[Vec<f64>],
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    max_rank: usize,
) -> Result<RetrievalResult> {
    let nq = dist.len();
    if q_ids.len() != nq || q_cams.len() != nq {
        return Err(Error::Shape(format!("{nq} distance rows for {} query labels", q_ids.len())));
    }
    let ng = g_ids.len();
    if g_cams.len() != ng || dist.iter().any(|r| r.len() != ng) {
        return Err(Error::Shape(format!("distance columns do not match {ng} gallery labels")));
    }
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be positive".into()));
    }
    let mut cmc_hits = vec![0usize; max_rank];
    let mut aps = Vec::new();
    for (qi, row) in dist.iter().enumerate() {
        let mut order: Vec<usize> = (0..ng)
            .filter(|&j| !(g_ids[j] == q_ids[qi] && g_cams[j] == q_cams[qi]))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let (ap, first) = average_precision(order.iter().map(|&j| g_ids[j] == q_ids[qi]));
        let Some(first) = first else { continue };
        aps.push(ap);
        for hit in cmc_hits.iter_mut().skip(first) {
            *hit += 1;
        }
    }
    if aps.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let valid = aps.len() as f64;
    Ok(RetrievalResult {
        map: aps.iter().sum::<f64>() / valid,
        cmc: cmc_hits.iter().map(|&h| h as f64 / valid).collect(),
        num_queries: nq,
        num_skipped: nq - aps.len(),
        per_query_ap: aps,
    })
}

/// Independent reference implementations for tests.
pub mod oracle {
    use crate::error::{Error, Result};

    /// AP by explicit prefix counting: for every relevant position `k`,
    /// recount the relevant entries among the first `k`.
    pub fn brute_force_ap_oracle(ranked_relevance: &[bool]) -> Result<f64> {
        let positions: Vec<usize> = (0..ranked_relevance.len()).filter(|&i| ranked_relevance[i]).collect();
        if positions.is_empty() {
            return Err(Error::InvalidArgument("no relevant entry".into()));
        }
        let total: f64 = positions
            .iter()
            .map(|&k| {
                let upto = ranked_relevance[..=k].iter().filter(|&&r| r).count();
                upto as f64 / (k + 1) as f64
            })
            .sum();
        Ok(total / positions.len() as f64)
    }
}

/// The results file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: String,
    pub target: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<String, f64>,
    pub num_queries: usize,
    pub num_skipped: usize,
}

impl EvalRecord {
    pub fn new(source: &str, target: &str, result: &RetrievalResult) -> Self {
        Self {
            source: source.to_string(),
            target: target.to_string(),
            map: result.map,
            cmc: REPORTED_RANKS.iter().map(|&k| (k.to_string(), result.rank(k))).collect(),
            num_queries: result.num_queries,
            num_skipped: result.num_skipped,
        }
    }

    pub fn rank1(&self) -> f64 {
        self.cmc.get("1").copied().unwrap_or(0.0)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn rows(t: &candle_core::Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
}

/// Evaluates a checkpoint on a target domain's query and gallery splits.
pub fn cross_domain_eval(
    checkpoint: &Path,
    query: &DatasetManifest,
    gallery: &DatasetManifest,
) -> Result<EvalRecord> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let (cfg, model) = trainer::load_model(&ckpt)?;
    let target = query.domains().join("+");
    if query.domains().iter().any(|d| ckpt.meta.sources.contains(d)) {
        log::warn!("target domain {target} overlaps the training domains; identities are not disjoint");
    }
    let q_images = data::load_images(query)?;
    let g_images = data::load_images(gallery)?;
    let qf = extract_features(&model.reid, query, &q_images, cfg.eval_batch_size, cfg.dtype)?;
    let gf = extract_features(&model.reid, gallery, &g_images, cfg.eval_batch_size, cfg.dtype)?;
    let dist = distance_matrix(&rows(&qf)?, &rows(&gf)?)?;
    let max_rank = *REPORTED_RANKS.last().expect("non-empty");
    let result = map_cmc(
        &dist,
        &query.identities(),
        &gallery.identities(),
        &query.cameras(),
        &gallery.cameras(),
        max_rank,
    )?;
    Ok(EvalRecord::new(&ckpt.meta.sources.join("+"), &target, &result))
}

#[cfg(test)]
mod tests {
    use super::oracle::brute_force_ap_oracle;
    use super::*;

    #[test]
    fn oracle_examples() {
        assert_eq!(brute_force_ap_oracle(&[true]).unwrap(), 1.0);
        assert_eq!(brute_force_ap_oracle(&[false, true]).unwrap(), 0.5);
        let v = brute_force_ap_oracle(&[true, false, true]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(brute_force_ap_oracle(&[false, true, false, true]).unwrap(), 0.5);
        assert!(brute_force_ap_oracle(&[false, false]).is_err());
    }

    #[test]
    fn distance_examples() {
        let d = distance_matrix(
            &[vec![1.0, 0.0]],
            &[vec![2.0, 0.0], vec![0.0, 3.0], vec![-1.0, 0.0]],
        )
        .unwrap();
        assert_eq!(d, vec![vec![0.0, 1.0, 2.0]]);
        assert!(matches!(
            distance_matrix(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::ZeroNorm { which: "gallery", row: 1 })
        ));
        assert!(distance_matrix(&[vec![1.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn perfect_match_and_protocol_exclusion() {
        // Gallery 0 is the true match from another camera.
        let r = map_cmc(&[vec![0.1, 0.5]], &[7], &[7, 3], &[0], &[1, 0], 2).unwrap();
        assert_eq!((r.map, r.cmc.clone()), (1.0, vec![1.0, 1.0]));

        // Query 1's only same-id image shares its camera: skipped.
        let d = vec![vec![0.1, 0.2], vec![0.1, 0.2]];
        let r = map_cmc(&d, &[1, 2], &[1, 2], &[0, 1], &[1, 1], 2).unwrap();
        assert_eq!((r.num_queries, r.num_skipped, r.per_query_ap.len()), (2, 1, 1));

        let err = map_cmc(&[vec![0.1]], &[1], &[1], &[0], &[0], 1);
        assert!(matches!(err, Err(Error::NoValidQueries)));
    }

    #[test]
    fn two_relevant_at_ranks_two_and_four() {
        let d = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let r = map_cmc(&d, &[1], &[5, 1, 6, 1], &[0], &[1, 1, 1, 1], 4).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_resolve_by_gallery_index() {
        let d = vec![vec![0.5, 0.5]];
        let first = map_cmc(&d, &[1], &[1, 2], &[0], &[1, 1], 1).unwrap();
        let second = map_cmc(&d, &[1], &[2, 1], &[0], &[1, 1], 1).unwrap();
        assert_eq!((first.map, second.map), (1.0, 0.5));
    }
}
