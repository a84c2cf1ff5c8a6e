//! Cross-camera retrieval metrics: CMC curve and mean average precision.
//!
//! For every query, gallery clips of the same identity seen by the same
//! camera are removed before ranking; a query left without any correct
//! match is reported in `excluded_queries` and does not enter the averages.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::aggregation::ClipDescriptor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(q, g)`; a zero vector has cosine 0.
    Cosine,
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < 1e-12 || nb < 1e-12 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// `Q x G` distances, row-major.
pub fn distance_matrix(queries: &[ClipDescriptor], gallery: &[ClipDescriptor], metric: Metric) -> Result<Vec<Vec<f64>>> {
    let d = queries.first().or(gallery.first()).map_or(0, |c| c.vector.len());
    if let Some(bad) = queries.iter().chain(gallery).find(|c| c.vector.len() != d) {
        return Err(Error::shape(format!(
            "descriptor `{}` has dimension {}, expected {d}",
            bad.clip_id,
            bad.vector.len()
        )));
    }
    Ok(queries
        .par_iter()
        .map(|q| gallery.iter().map(|g| distance(&q.vector, &g.vector, metric)).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `cmc[k - 1]`: fraction of valid queries matched within the top `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
}

impl EvalReport {
    /// CMC at rank `k` (1-based); ranks past the gallery saturate.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn to_csv(&self, ranks: &[usize]) -> String {
        let mut out = String::new();
        for &k in ranks {
            let _ = writeln!(out, "rank,{k},{:.6}", self.rank(k));
        }
        let _ = writeln!(out, "mAP,{:.6}", self.map);
        out
    }

    pub fn to_table(&self, ranks: &[usize]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "queries: {} ({} without a valid match)",
            self.num_queries, self.excluded_queries
        );
        for &k in ranks {
            let _ = writeln!(out, "  rank-{k:<3} {:>6.2}%", 100.0 * self.rank(k));
        }
        let _ = writeln!(out, "  mAP      {:>6.2}%", 100.0 * self.map);
        out
    }
}

/// Ranks the gallery for every query; ties go to the lower gallery index.
pub fn evaluate(queries: &[ClipDescriptor], gallery: &[ClipDescriptor], metric: Metric) -> Result<EvalReport> {
    let dist = distance_matrix(queries, gallery, metric)?;
    let per_query: Vec<Option<(usize, f64)>> = queries
        .par_iter()
        .zip(&dist)
        .map(|(q, row)| {
            let mut order: Vec<usize> = (0..gallery.len())
                .filter(|&g| !(gallery[g].identity == q.identity && gallery[g].camera == q.camera))
                .collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut first = None;
            let (mut hits, mut precision_sum) = (0usize, 0.0);
            for (rank, &g) in order.iter().enumerate() {
                if gallery[g].identity == q.identity {
                    hits += 1;
                    first.get_or_insert(rank);
                    precision_sum += hits as f64 / (rank + 1) as f64;
                }
            }
            first.map(|f| (f, precision_sum / hits as f64))
        })
        .collect();

    let valid: Vec<(usize, f64)> = per_query.iter().flatten().copied().collect();
    let k_max = gallery.len();
    let mut cmc = vec![0.0; k_max];
    if !valid.is_empty() {
        let mut counts = vec![0usize; k_max];
        for &(first, _) in &valid {
            counts[first] += 1;
        }
        let mut running = 0;
        for k in 0..k_max {
            running += counts[k];
            cmc[k] = running as f64 / valid.len() as f64;
        }
    }
    let map = if valid.is_empty() {
        0.0
    } else {
        valid.iter().map(|&(_, ap)| ap).sum::<f64>() / valid.len() as f64
    };
    Ok(EvalReport {
        cmc,
        map,
        num_queries: queries.len(),
        excluded_queries: queries.len() - valid.len(),
    })
}
