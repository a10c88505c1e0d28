//! Bidirectional cross-view retrieval: Euclidean ranking, Recall@K and
//! average precision, plus correlation diagnostics on held-out embeddings.
//!
//! Embedding files hold a header `n d` and rows
//! `item_id label platform v_1 … v_d`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use log::warn;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::dataset::{ItemId, Platform};
use crate::error::{Error, Result};
use crate::losses::pearson_matrix;
use crate::matrix::DenseMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<ItemId>,
    pub labels: Vec<usize>,
    pub platform: Platform,
    pub vectors: DenseMatrix,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<ItemId>, labels: Vec<usize>, platform: Platform, vectors: DenseMatrix) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != vectors.rows() {
            return Err(Error::Dimension(format!(
                "{} ids, {} labels and {} vectors do not align",
                ids.len(),
                labels.len(),
                vectors.rows()
            )));
        }
        Ok(Self { ids, labels, platform, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Applies `v ↦ v·m` to every vector.
    pub fn transformed(&self, m: &DenseMatrix) -> Result<Self> {
        Ok(Self { vectors: self.vectors.matmul(m)?, ..self.clone() })
    }
}

/// Writes one or more sets into a single embedding file.
pub fn write_embeddings<W: Write>(mut w: W, sets: &[&EmbeddingSet]) -> Result<()> {
    let n: usize = sets.iter().map(|s| s.len()).sum();
    let d = sets.first().map_or(0, |s| s.dim());
    if sets.iter().any(|s| s.dim() != d) {
        return Err(Error::Dimension("embedding sets differ in dimension".into()));
    }
    writeln!(w, "{n} {d}")?;
    for s in sets {
        for i in 0..s.len() {
            write!(w, "{} {} {}", s.ids[i], s.labels[i], s.platform)?;
            for v in s.vectors.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Reads an embedding file and splits it by platform: `(satellite, drone)`.
pub fn read_embeddings<R: BufRead>(r: R) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header `n d`".into() })?;
    let header = header?;
    let hf: Vec<&str> = header.split_whitespace().collect();
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    if hf.len() != 2 {
        return Err(perr(1, "header must be `n d`".into()));
    }
    let n: usize = hf[0].parse().map_err(|_| perr(1, "bad row count".into()))?;
    let d: usize = hf[1].parse().map_err(|_| perr(1, "bad dimension".into()))?;
    let mut parts: BTreeMap<Platform, (Vec<ItemId>, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut count = 0;
    for (i, line) in lines {
        let line = line?;
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 + d {
            return Err(perr(ln, format!("expected {} fields, found {}", 3 + d, f.len())));
        }
        let id: ItemId = f[0].parse().map_err(|_| perr(ln, "bad item id".into()))?;
        let label: usize = f[1].parse().map_err(|_| perr(ln, "bad label".into()))?;
        let platform: Platform = f[2].parse().map_err(|e| perr(ln, e))?;
        let entry = parts.entry(platform).or_default();
        entry.0.push(id);
        entry.1.push(label);
        for v in &f[3..] {
            entry.2.push(v.parse().map_err(|_| perr(ln, format!("bad value `{v}`")))?);
        }
        count += 1;
    }
    if count != n {
        return Err(perr(1, format!("header declares {n} rows, found {count}")));
    }
    let mut build = |p: Platform| -> Result<EmbeddingSet> {
        let (ids, labels, data) = parts.remove(&p).unwrap_or_default();
        let rows = ids.len();
        EmbeddingSet::new(ids, labels, p, DenseMatrix::from_vec(rows, d, data)?)
    };
    Ok((build(Platform::Satellite)?, build(Platform::Drone)?))
}

/// Gallery indices by ascending Euclidean distance to `query`; ties go to
/// the smaller item id.
pub fn rank_by_euclidean(query: &[f64], gallery: &EmbeddingSet) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if query.len() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "query has {} dims, gallery {}",
            query.len(),
            gallery.dim()
        )));
    }
    let dist: Vec<f64> = (0..gallery.len())
        .map(|i| {
            gallery
                .vectors
                .row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then(gallery.ids[a].cmp(&gallery.ids[b]))
    });
    Ok(order)
}

/// 1 if any relevant index is among the first `k` ranks, else 0.
pub fn recall_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::Data("query has no relevant gallery items".into()));
    }
    let hit = ranking.iter().take(k).any(|i| relevant.contains(i));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Mean precision at the ranks of the relevant items.
pub fn average_precision(ranking: &[usize], relevant: &[usize]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Data("query has no relevant gallery items".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, idx) in ranking.iter().enumerate() {
        if relevant.contains(idx) {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(total / relevant.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub direction: String,
    pub recall_at: BTreeMap<usize, f64>,
    /// Recall at `ceil(0.01 · gallery size)`.
    pub recall_top1_percent: f64,
    pub ap: f64,
    pub num_queries: usize,
    pub skipped: usize,
}

impl RetrievalMetrics {
    pub fn r1(&self) -> f64 {
        self.recall_at.get(&1).copied().unwrap_or(f64::NAN)
    }
}

/// Macro-averaged metrics for every query in `queries` against `gallery`.
/// Queries whose label has no gallery match are skipped and counted.
pub fn evaluate_direction(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    ks: &[usize],
    direction: &str,
) -> Result<RetrievalMetrics> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if ks.contains(&0) {
        return Err(Error::Config("every K must be at least 1".into()));
    }
    let mut by_label: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &l) in gallery.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let top1pct = (gallery.len() as f64 * 0.01).ceil().max(1.0) as usize;
    let mut sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut top_sum = 0.0;
    let mut ap_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for q in 0..queries.len() {
        let Some(relevant) = by_label.get(&queries.labels[q]) else {
            skipped += 1;
            continue;
        };
        let ranking = rank_by_euclidean(queries.vectors.row(q), gallery)?;
        for (&k, s) in sums.iter_mut() {
            *s += recall_at_k(&ranking, relevant, k)?;
        }
        top_sum += recall_at_k(&ranking, relevant, top1pct)?;
        ap_sum += average_precision(&ranking, relevant)?;
        used += 1;
    }
    if skipped > 0 {
        warn!("{direction}: skipped {skipped} queries without a gallery match");
    }
    let denom = used.max(1) as f64;
    Ok(RetrievalMetrics {
        direction: direction.to_string(),
        recall_at: sums.into_iter().map(|(k, s)| (k, s / denom)).collect(),
        recall_top1_percent: top_sum / denom,
        ap: ap_sum / denom,
        num_queries: used,
        skipped,
    })
}

/// `(drone → satellite, satellite → drone)` metrics.
pub fn evaluate_bidirectional(
    sat: &EmbeddingSet,
    drone: &EmbeddingSet,
    ks: &[usize],
) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    Ok((
        evaluate_direction(drone, sat, ks, "drone_to_satellite")?,
        evaluate_direction(sat, drone, ks, "satellite_to_drone")?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffDiagStats {
    pub mean_abs_offdiag: f64,
    pub tau: f64,
    pub frac_above: f64,
    /// Number of off-diagonal entries with `|ρ_ij| > tau`.
    pub count_above: usize,
    pub mean_diag: f64,
}

/// Pairs each class's satellite item with its lowest-id drone item, in
/// ascending label order.
pub fn aligned_pairs(sat: &EmbeddingSet, drone: &EmbeddingSet) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut sat_by_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &l) in sat.labels.iter().enumerate() {
        let e = sat_by_label.entry(l).or_insert(i);
        if sat.ids[i] < sat.ids[*e] {
            *e = i;
        }
    }
    let mut drone_by_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &l) in drone.labels.iter().enumerate() {
        let e = drone_by_label.entry(l).or_insert(i);
        if drone.ids[i] < drone.ids[*e] {
            *e = i;
        }
    }
    let (mut si, mut di) = (Vec::new(), Vec::new());
    for (l, &s) in &sat_by_label {
        if let Some(&d) = drone_by_label.get(l) {
            si.push(s);
            di.push(d);
        }
    }
    Ok((sat.vectors.select_rows(&si), drone.vectors.select_rows(&di)))
}

/// Correlation diagnostics of aligned cross-view pairs.
pub fn offdiag_stats(sat: &EmbeddingSet, drone: &EmbeddingSet, eps: f64, tau: f64) -> Result<OffDiagStats> {
    let (xs, xd) = aligned_pairs(sat, drone)?;
    if xs.rows() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "need at least 2 classes with items on both platforms, got {}",
            xs.rows()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(xs);
    let b = g.constant(xd);
    let rho = pearson_matrix(&mut g, a, b, eps)?;
    Ok(correlation_summary(g.value(rho), tau))
}

pub fn correlation_summary(rho: &DenseMatrix, tau: f64) -> OffDiagStats {
    let d = rho.rows();
    let mut abs_sum = 0.0;
    let mut above = 0usize;
    let mut diag = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = rho.get(i, j);
            if i == j {
                diag += v;
            } else {
                abs_sum += v.abs();
                if v.abs() > tau {
                    above += 1;
                }
            }
        }
    }
    let off = (d * d - d).max(1) as f64;
    OffDiagStats {
        mean_abs_offdiag: abs_sum / off,
        tau,
        frac_above: above as f64 / off,
        count_above: above,
        mean_diag: diag / d as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(platform: Platform, labels: &[usize], rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::new(
            (0..labels.len() as u64).collect(),
            labels.to_vec(),
            platform,
            DenseMatrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn query_equal_to_gallery_item_ranks_first() {
        let g = set(Platform::Satellite, &[0, 1, 2], &[vec![0.0, 1.0], vec![3.0, 3.0], vec![-1.0, 0.5]]);
        assert_eq!(rank_by_euclidean(&[3.0, 3.0], &g).unwrap()[0], 1);
        let one = set(Platform::Satellite, &[0], &[vec![9.0, 9.0]]);
        assert_eq!(rank_by_euclidean(&[0.0, 0.0], &one).unwrap(), vec![0]);
    }

    #[test]
    fn ranking_ties_break_by_id() {
        let mut g = set(Platform::Satellite, &[0, 1], &[vec![1.0], vec![-1.0]]);
        g.ids = vec![7, 3];
        assert_eq!(rank_by_euclidean(&[0.0], &g).unwrap(), vec![1, 0]);
    }

    #[test]
    fn empty_gallery_is_error() {
        let g = EmbeddingSet::new(vec![], vec![], Platform::Satellite, DenseMatrix::zeros(0, 2)).unwrap();
        assert!(matches!(rank_by_euclidean(&[0.0, 0.0], &g), Err(Error::Data(_))));
    }

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at_k(&[4, 1, 2], &[4], 1).unwrap(), 1.0);
        let ranking = [5, 6, 7, 8, 9];
        assert_eq!(recall_at_k(&ranking, &[7], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranking, &[7], 5).unwrap(), 1.0);
        assert!(recall_at_k(&ranking, &[], 1).is_err());
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0, 1, 2], &[0]).unwrap(), 1.0);
        assert!((average_precision(&[0, 1, 2], &[2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&[0, 1, 2], &[0, 2]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn separated_embeddings_are_perfect() {
        let one_hot = |l: usize| (0..3).map(|i| if i == l { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let sat = set(Platform::Satellite, &[0, 1, 2], &[one_hot(0), one_hot(1), one_hot(2)]);
        let mut drone = set(
            Platform::Drone,
            &[0, 0, 1, 2, 2],
            &[one_hot(0), one_hot(0), one_hot(1), one_hot(2), one_hot(2)],
        );
        drone.ids = (10..15).collect();
        let (d2s, s2d) = evaluate_bidirectional(&sat, &drone, &[1, 5]).unwrap();
        for m in [&d2s, &s2d] {
            assert_eq!(m.r1(), 1.0);
            assert_eq!(m.ap, 1.0);
            assert_eq!(m.skipped, 0);
        }
        assert_eq!(d2s.num_queries, 5);
        assert_eq!(s2d.num_queries, 3);
    }

    #[test]
    fn unmatched_queries_are_skipped_and_counted() {
        let sat = set(Platform::Satellite, &[0], &[vec![0.0]]);
        let mut drone = set(Platform::Drone, &[0, 9], &[vec![0.0], vec![1.0]]);
        drone.ids = vec![5, 6];
        let (d2s, _) = evaluate_bidirectional(&sat, &drone, &[1]).unwrap();
        assert_eq!(d2s.num_queries, 1);
        assert_eq!(d2s.skipped, 1);
    }

    #[test]
    fn duplicated_channel_is_perfectly_correlated() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| {
            let a = (i as f64 * 1.3).sin();
            vec![a, a, (i as f64 * 0.7).cos()]
        }).collect();
        let sat = set(Platform::Satellite, &[0, 1, 2, 3, 4, 5], &rows);
        let mut drone = sat.clone();
        drone.platform = Platform::Drone;
        let stats = offdiag_stats(&sat, &drone, 1e-12, 0.2).unwrap();
        assert!((stats.mean_diag - 1.0).abs() < 1e-9);
        let (xs, xd) = aligned_pairs(&sat, &drone).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(xs), g.constant(xd));
        let rho = pearson_matrix(&mut g, a, b, 1e-12).unwrap();
        assert!((g.value(rho).get(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn offdiag_needs_two_classes() {
        let sat = set(Platform::Satellite, &[0], &[vec![0.0, 1.0]]);
        let drone = set(Platform::Drone, &[0], &[vec![0.0, 1.0]]);
        assert!(matches!(offdiag_stats(&sat, &drone, 1e-8, 0.2), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn embedding_file_round_trip() {
        let sat = set(Platform::Satellite, &[0, 1], &[vec![0.5, 1.0], vec![0.1 + 0.2, -3.0]]);
        let mut drone = set(Platform::Drone, &[1, 0, 0], &[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 1e-9]]);
        drone.ids = vec![10, 11, 12];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &[&sat, &drone]).unwrap();
        let (s2, d2) = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(s2, sat);
        assert_eq!(d2, drone);
    }
}
