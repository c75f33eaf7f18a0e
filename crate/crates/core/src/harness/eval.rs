//! Cosine retrieval metrics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::{generate_dataset, Sample};
use crate::harness::model::CascadeModel;
use crate::harness::train::CONFIG_FILE;
use crate::losses::cosine;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub top1: f64,
    pub map: f64,
}

impl RetrievalMetrics {
    /// `top1=<v>` and `mAP=<v>` lines.
    pub fn report(&self) -> String {
        format!("top1={}\nmAP={}\n", self.top1, self.map)
    }
}

/// Gallery indices by decreasing cosine similarity; ties keep gallery order.
pub fn rank_gallery(gallery: &[Vec<f64>], query: &[f64]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(g, query)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order
}

/// Mean over relevant hits of precision at that hit; zero when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn retrieval_metrics(
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    queries: &[Vec<f64>],
    query_labels: &[usize],
) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    if gallery.len() != gallery_labels.len() || queries.len() != query_labels.len() {
        return Err(Error::InvalidArgument(
            "embedding and label counts differ".into(),
        ));
    }
    let mut top1 = 0.0;
    let mut map = 0.0;
    for (q, &y) in queries.iter().zip(query_labels) {
        let relevance: Vec<bool> = rank_gallery(gallery, q)
            .into_iter()
            .map(|g| gallery_labels[g] == y)
            .collect();
        if relevance[0] {
            top1 += 1.0;
        }
        map += average_precision(&relevance);
    }
    let n = queries.len() as f64;
    Ok(RetrievalMetrics {
        top1: top1 / n,
        map: map / n,
    })
}

fn labels_of(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.identity
                .ok_or_else(|| Error::InvalidArgument("retrieval samples must be labeled".into()))
        })
        .collect()
}

/// Embeds both sets with the final stage and scores queries against the gallery.
pub fn evaluate_retrieval(
    model: &CascadeModel,
    gallery: &[Sample],
    queries: &[Sample],
) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    let gl = labels_of(gallery)?;
    let ql = labels_of(queries)?;
    let patches = |s: &[Sample]| s.iter().map(|x| x.patch.clone()).collect::<Vec<_>>();
    let ge = model.embed(&patches(gallery))?;
    let qe = model.embed(&patches(queries))?;
    retrieval_metrics(&ge, &gl, &qe, &ql)
}

/// Loads a checkpoint written by training, regenerates its dataset, and
/// evaluates on the held-out split.
pub fn evaluate_checkpoint(dir: impl AsRef<Path>) -> Result<RetrievalMetrics> {
    let dir = dir.as_ref();
    let cfg = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let model = CascadeModel::load(&cfg, dir)?;
    let data = generate_dataset(&cfg.data)?;
    evaluate_retrieval(&model, &data.gallery, &data.query)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_match_is_perfect() {
        let e: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![(i as f64).cos(), (i as f64).sin(), 0.3])
            .collect();
        let l: Vec<usize> = (0..6).collect();
        let m = retrieval_metrics(&e, &l, &e, &l).unwrap();
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn hand_average_precision() {
        // relevant at ranks 1 and 3: (1/1 + 2/3) / 2
        assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        // relevant at rank 2 only
        assert_eq!(average_precision(&[false, true, false]), 0.5);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    #[test]
    fn two_query_hand_ranking() {
        let gallery = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]];
        let gl = vec![0, 1, 0];
        let queries = vec![vec![1.0, 0.1], vec![0.2, 1.0]];
        let ql = vec![0, 0];
        // q0 ranks g0, g2, g1 -> AP 1; q1 ranks g1, g2, g0 -> AP (1/2 + 2/3) / 2
        let m = retrieval_metrics(&gallery, &gl, &queries, &ql).unwrap();
        assert_eq!(m.top1, 0.5);
        assert!((m.map - (1.0 + (0.5 + 2.0 / 3.0) / 2.0) / 2.0).abs() < 1e-15);
        assert!(retrieval_metrics(&[], &[], &queries, &ql).is_err());
    }
}
