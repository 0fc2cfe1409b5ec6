//! Retrieval metrics and the classical k-means product-quantization baseline.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::{adc_all, make_lut, IndexFile};
use crate::numerics::{Rng, Tensor};
use crate::pq_head::CodebookSet;

/// AP@R with denominator `min(total_relevant, R)`; 0 when nothing is relevant.
pub fn average_precision(ranked: &[bool], r: usize, total_relevant: usize) -> f64 {
    let denom = total_relevant.min(r);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked.iter().take(r).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Relevance between queries and gallery items via label bitmasks: an item
/// is relevant when it shares at least one label with the query.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceOracle {
    query: Vec<u64>,
    gallery: Vec<u64>,
}

impl RelevanceOracle {
    pub fn from_masks(query: Vec<u64>, gallery: Vec<u64>) -> Result<Self> {
        if query.iter().chain(&gallery).any(|&m| m == 0) {
            return Err(Error::Input("every item needs at least one label".into()));
        }
        Ok(Self { query, gallery })
    }

    pub fn from_class_ids(query: &[u32], gallery: &[u32]) -> Result<Self> {
        let to_mask = |ids: &[u32]| -> Result<Vec<u64>> {
            ids.iter()
                .map(|&l| {
                    if l < 64 {
                        Ok(1u64 << l)
                    } else {
                        Err(Error::Input(format!("class id {l} exceeds 63")))
                    }
                })
                .collect()
        };
        Self::from_masks(to_mask(query)?, to_mask(gallery)?)
    }

    pub fn relevant(&self, q: usize, g: usize) -> bool {
        self.query[q] & self.gallery[g] != 0
    }

    pub fn num_queries(&self) -> usize {
        self.query.len()
    }

    pub fn gallery_len(&self) -> usize {
        self.gallery.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub cutoff: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub r: usize,
    pub map_at_r: f64,
    pub precision_at_k: Vec<(usize, f64)>,
    pub pr_curve: Vec<PrPoint>,
    pub num_queries: usize,
    pub gallery_size: usize,
    pub code_bits: usize,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "queries      {}", self.num_queries);
        let _ = writeln!(s, "gallery      {}", self.gallery_size);
        let _ = writeln!(s, "code bits    {}", self.code_bits);
        let _ = writeln!(s, "mAP@{:<8} {:.6}", self.r, self.map_at_r);
        for (k, p) in &self.precision_at_k {
            let _ = writeln!(s, "P@{:<10} {:.6}", k, p);
        }
        s
    }

    /// `metric,k_or_r,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k_or_r,value\n");
        let _ = writeln!(s, "map,{},{}", self.r, self.map_at_r);
        for (k, p) in &self.precision_at_k {
            let _ = writeln!(s, "precision,{k},{p}");
        }
        s
    }

    /// `cutoff,recall,precision` rows.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("cutoff,recall,precision\n");
        for p in &self.pr_curve {
            let _ = writeln!(s, "{},{},{}", p.cutoff, p.recall, p.precision);
        }
        s
    }
}

/// Rank cutoffs 1, 2, 5, 10, 20, 50, ... capped by and always ending at `n`.
pub fn pr_cutoffs(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut decade = 1usize;
    'outer: loop {
        for mult in [1, 2, 5] {
            let c = decade * mult;
            if c >= n {
                break 'outer;
            }
            out.push(c);
        }
        decade *= 10;
    }
    if n > 0 {
        out.push(n);
    }
    out
}

/// Full ranking of the gallery for one query: ids by ascending ADC distance,
/// ties by id.
pub fn rank_gallery(index: &IndexFile, query: &[f32]) -> Result<Vec<usize>> {
    let lut = make_lut(index, query)?;
    let dists = adc_all(index, &lut);
    let mut ids: Vec<usize> = (0..dists.len()).collect();
    ids.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    Ok(ids)
}

/// Per-query metrics given relevance flags along the full ranking.
struct QueryMetrics {
    ap: f64,
    precision_at_k: Vec<f64>,
    /// `(recall, precision)` at each PR cutoff; recall is `None` when the
    /// query has no relevant items.
    pr: Vec<(Option<f64>, f64)>,
}

fn query_metrics(flags: &[bool], r: usize, k_list: &[usize], cutoffs: &[usize]) -> QueryMetrics {
    let total = flags.iter().filter(|&&f| f).count();
    let mut prefix = Vec::with_capacity(flags.len() + 1);
    prefix.push(0usize);
    for &f in flags {
        prefix.push(prefix.last().unwrap() + f as usize);
    }
    let n = flags.len();
    QueryMetrics {
        ap: average_precision(flags, r, total),
        precision_at_k: k_list
            .iter()
            .map(|&k| {
                let k = k.min(n);
                if k == 0 {
                    0.0
                } else {
                    prefix[k] as f64 / k as f64
                }
            })
            .collect(),
        pr: cutoffs
            .iter()
            .map(|&c| {
                let hits = prefix[c] as f64;
                let recall = (total > 0).then(|| hits / total as f64);
                (recall, hits / c as f64)
            })
            .collect(),
    }
}

/// mAP@R, P@k (k capped at the gallery size) and a PR curve averaged over
/// queries.
pub fn evaluate(
    index: &IndexFile,
    queries: &Tensor<f32>,
    oracle: &RelevanceOracle,
    r: usize,
    k_list: &[usize],
) -> Result<MetricReport> {
    if queries.rows() == 0 || queries.rank() != 2 {
        return Err(Error::Usage("evaluation needs a non-empty [Q, D] query set".into()));
    }
    queries.expect_matrix(index.dim(), "queries")?;
    if oracle.num_queries() != queries.rows() || oracle.gallery_len() != index.len() {
        return Err(Error::Dimension(format!(
            "relevance labels cover {} queries / {} items, have {} / {}",
            oracle.num_queries(),
            oracle.gallery_len(),
            queries.rows(),
            index.len()
        )));
    }
    if index.is_empty() {
        return Err(Error::Usage("evaluation on an empty index".into()));
    }
    let cutoffs = pr_cutoffs(index.len());
    let per_query: Vec<QueryMetrics> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let ranking = rank_gallery(index, queries.row(q))?;
            let flags: Vec<bool> = ranking.iter().map(|&g| oracle.relevant(q, g)).collect();
            Ok(query_metrics(&flags, r, k_list, &cutoffs))
        })
        .collect::<Result<_>>()?;
    Ok(assemble_report(&per_query, r, k_list, &cutoffs, index.len(), index.code_bits()))
}

fn assemble_report(
    per_query: &[QueryMetrics],
    r: usize,
    k_list: &[usize],
    cutoffs: &[usize],
    gallery_size: usize,
    code_bits: usize,
) -> MetricReport {
    let nq = per_query.len() as f64;
    let map_at_r = per_query.iter().map(|m| m.ap).sum::<f64>() / nq;
    let precision_at_k = k_list
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, per_query.iter().map(|m| m.precision_at_k[i]).sum::<f64>() / nq))
        .collect();
    let pr_curve = cutoffs
        .iter()
        .enumerate()
        .map(|(i, &cutoff)| {
            let recalls: Vec<f64> = per_query.iter().filter_map(|m| m.pr[i].0).collect();
            let recall = if recalls.is_empty() {
                0.0
            } else {
                recalls.iter().sum::<f64>() / recalls.len() as f64
            };
            let precision = per_query.iter().map(|m| m.pr[i].1).sum::<f64>() / nq;
            PrPoint { cutoff, recall, precision }
        })
        .collect();
    MetricReport {
        r,
        map_at_r,
        precision_at_k,
        pr_curve,
        num_queries: per_query.len(),
        gallery_size,
        code_bits,
    }
}

/// Lloyd's k-means on one subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `[K][dim]`.
    pub centroids: Vec<f64>,
    /// Objective after each assignment step: the first entry is for the
    /// seeding, then one per iteration.
    pub objective: Vec<f64>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    points
        .chunks_exact(dim)
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.chunks_exact(dim).enumerate() {
                let d = sq(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip()
}

/// k-means++ seeding followed by `iters` Lloyd iterations. An empty cluster
/// is re-seeded at the point farthest from its assigned centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut Rng) -> Result<KMeansResult> {
    let n = points.len() / dim.max(1);
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Dimension("points do not form rows of the given dim".into()));
    }
    if n < k || k == 0 {
        return Err(Error::Parameter(format!("need at least K={k} points, got {n}")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.below(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform(0.0, total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq(row(i), &centroids[start..start + dim]));
        }
    }

    let (mut labels, mut dists) = assign(points, dim, &centroids);
    let mut objective = vec![dists.iter().sum()];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i] * dim..(labels[i] + 1) * dim]
                .iter_mut()
                .zip(row(i))
                .for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            let dst = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for (d, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = s / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                dst.copy_from_slice(row(far));
            }
        }
        (labels, dists) = assign(points, dim, &centroids);
        objective.push(dists.iter().sum());
    }
    Ok(KMeansResult { centroids, objective })
}

/// Classical PQ: independent k-means in each of the `m` subspaces.
pub fn kmeans_pq_baseline(gallery: &Tensor<f64>, m: usize, k: usize, iters: usize, seed: u64) -> Result<CodebookSet> {
    Ok(kmeans_pq_with_trace(gallery, m, k, iters, seed)?.0)
}

/// [`kmeans_pq_baseline`] plus each subspace's objective trace.
pub fn kmeans_pq_with_trace(
    gallery: &Tensor<f64>,
    m: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(CodebookSet, Vec<Vec<f64>>)> {
    if gallery.rank() != 2 || m == 0 || gallery.row_len() % m != 0 {
        return Err(Error::Dimension(format!(
            "gallery {:?} cannot be split into {m} subspaces",
            gallery.shape()
        )));
    }
    let s = gallery.row_len() / m;
    let results: Vec<KMeansResult> = (0..m)
        .into_par_iter()
        .map(|mi| {
            let sub: Vec<f64> = gallery
                .iter_rows()
                .flat_map(|r| r[mi * s..(mi + 1) * s].iter().copied())
                .collect();
            kmeans(&sub, s, k, iters, &mut Rng::derive(seed, &[0x6B6D, mi as u64]))
        })
        .collect::<Result<_>>()?;
    let mut codewords = Vec::with_capacity(m * k * s);
    let mut traces = Vec::with_capacity(m);
    for r in results {
        codewords.extend(r.centroids);
        traces.push(r.objective);
    }
    Ok((CodebookSet::new(m, k, s, codewords)?, traces))
}
