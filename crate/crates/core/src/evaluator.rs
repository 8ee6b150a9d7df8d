//! Retrieval evaluation under the cross-camera protocol: gallery ranking,
//! average precision, CMC and the report file.

use std::fmt::Write as _;

use crate::error::{contract_err, Result};
use crate::model::ScgiModel;
use crate::nn::{Real, Tensor};
use crate::synth::Dataset;

pub const CMC_RANKS: usize = 10;
pub const PROTOCOL: &str = "cross-camera (same identity and camera excluded), cosine similarity, ties by ascending gallery index";
/// Environment variable capping feature-extraction threads.
pub const THREADS_ENV: &str = "SCGI_THREADS";

/// What ranking needs to know about a sample. `index` orders ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub index: usize,
    pub identity: u32,
    pub camera: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    /// Gallery `index` values, best match first.
    pub gallery: Vec<usize>,
    pub scores: Vec<f64>,
    pub relevance: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    /// `cmc[k]` is the fraction of queries with a match within the top `k+1`.
    pub cmc: Vec<f64>,
    pub n_queries: usize,
    pub skipped: usize,
    pub protocol: String,
    pub checkpoint_hash: String,
}

impl MetricsReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "protocol = {}", self.protocol);
        let _ = writeln!(out, "checkpoint_hash = {}", self.checkpoint_hash);
        let _ = writeln!(out, "n_queries = {}", self.n_queries);
        let _ = writeln!(out, "skipped_queries = {}", self.skipped);
        let _ = writeln!(out, "mAP = {}", self.map);
        for (k, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(out, "cmc@{} = {}", k + 1, v);
        }
        out
    }
}

/// Cosine similarity of unit vectors.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks the gallery for one query, dropping entries that share both
/// identity and camera with it. Features must be L2-normalized.
pub fn rank_gallery(query_feat: &[f64], gallery_feats: &[Vec<f64>], query: SampleMeta, gallery: &[SampleMeta]) -> Result<RankedList> {
    if gallery_feats.len() != gallery.len() {
        return Err(contract_err!("{} gallery features for {} entries", gallery_feats.len(), gallery.len()));
    }
    let mut scored: Vec<(f64, SampleMeta)> = gallery_feats
        .iter()
        .zip(gallery)
        .filter(|(_, g)| !(g.identity == query.identity && g.camera == query.camera))
        .map(|(f, g)| {
            if f.len() != query_feat.len() {
                return Err(contract_err!("feature width {} vs query {}", f.len(), query_feat.len()));
            }
            // + 0.0 folds -0.0 into 0.0 so the two tie
            Ok((dot(query_feat, f) + 0.0, *g))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.index.cmp(&b.1.index)));
    Ok(RankedList {
        query: query.index,
        gallery: scored.iter().map(|(_, g)| g.index).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
        relevance: scored.iter().map(|(_, g)| g.identity == query.identity).collect(),
    })
}

/// `(1/R) Σ_{k relevant} hits(≤k)/k`. Short lists are summed as exact
/// fractions so the result is correctly rounded.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0u64;
    let mut float_sum = 0.0;
    // num/den while it fits
    let mut exact: Option<(u128, u128)> = Some((0, 1));
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            let k = k as u64 + 1;
            float_sum += hits as f64 / k as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits as u128, k as u128));
        }
    }
    if hits == 0 {
        return Err(contract_err!("average precision needs a relevant entry"));
    }
    const F64_EXACT: u128 = 1 << 53;
    if let Some((n, d)) = exact {
        if let Some(d) = d.checked_mul(hits as u128).filter(|&d| d <= F64_EXACT && n <= F64_EXACT) {
            return Ok(n as f64 / d as f64);
        }
    }
    Ok(float_sum / hits as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `n/d + a/b` in lowest terms, `None` on overflow.
fn add_fraction(n: u128, d: u128, a: u128, b: u128) -> Option<(u128, u128)> {
    let g = gcd(d, b);
    let den = d.checked_mul(b / g)?;
    let num = n.checked_mul(b / g)?.checked_add(a.checked_mul(d / g)?)?;
    let r = gcd(num, den).max(1);
    Some((num / r, den / r))
}

/// mAP and CMC over ranked lists. Lists without a relevant entry (including
/// empty ones) are skipped and counted.
pub fn summarize(lists: &[RankedList], checkpoint_hash: &str) -> MetricsReport {
    let mut ap_sum = 0.0;
    let mut hits = [0usize; CMC_RANKS];
    let mut n = 0usize;
    let mut skipped = 0usize;
    for l in lists {
        let Some(first) = l.relevance.iter().position(|&r| r) else {
            log::warn!("query {} has no valid match in the gallery; skipped", l.query);
            skipped += 1;
            continue;
        };
        n += 1;
        ap_sum += average_precision(&l.relevance).expect("has a relevant entry");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let denom = n.max(1) as f64;
    MetricsReport {
        map: ap_sum / denom,
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        n_queries: n,
        skipped,
        protocol: PROTOCOL.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
    }
}

/// Thread cap from the environment, default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn meta(data: &Dataset, i: usize) -> SampleMeta {
    SampleMeta {
        index: i,
        identity: data.samples[i].identity_id,
        camera: data.samples[i].camera_id,
    }
}

/// Ranks every query of `data` against the gallery. Indices refer to
/// `data.samples`.
pub fn rank_all<T: Real + Send + Sync>(
    model: &ScgiModel<T>,
    data: &Dataset,
    query: &[usize],
    gallery: &[usize],
    threads: usize,
) -> Result<Vec<RankedList>> {
    let images = |idx: &[usize]| -> Vec<&Tensor<f64>> { idx.iter().map(|&i| &data.samples[i].image).collect() };
    let qf = model.inference_features(&images(query), threads)?;
    let gf = model.inference_features(&images(gallery), threads)?;
    let gm: Vec<SampleMeta> = gallery.iter().map(|&i| meta(data, i)).collect();
    query
        .iter()
        .zip(&qf)
        .map(|(&q, f)| rank_gallery(f, &gf, meta(data, q), &gm))
        .collect()
}

pub fn evaluate<T: Real + Send + Sync>(
    model: &ScgiModel<T>,
    data: &Dataset,
    query: &[usize],
    gallery: &[usize],
    threads: usize,
) -> Result<(MetricsReport, Vec<RankedList>)> {
    let lists = rank_all(model, data, query, gallery, threads)?;
    Ok((summarize(&lists, &model.inference_hash()?), lists))
}

/// Top-10 of each ranked list, one query per line; `+` marks a match.
pub fn format_ranked_lists(data: &Dataset, lists: &[RankedList]) -> String {
    let mut out = String::new();
    for l in lists {
        let q = &data.samples[l.query];
        let _ = write!(out, "{}", q.image_id);
        for (g, rel) in l.gallery.iter().zip(&l.relevance).take(CMC_RANKS) {
            let _ = write!(out, "\t{}{}", data.samples[*g].image_id, if *rel { "+" } else { "-" });
        }
        out.push('\n');
    }
    out
}
