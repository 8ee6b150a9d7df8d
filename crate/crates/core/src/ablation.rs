//! Component ablations, depth and query-count sweeps, and the caption
//! corruption harness, all on a held-out-identity benchmark.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caption::{corrupt_caption, render_caption};
use crate::config::Config;
use crate::error::{contract_err, Result};
use crate::evaluator::{evaluate, MetricsReport};
use crate::synth::{split_query_gallery, Dataset};
use crate::trainer::train;

/// Training identities and a query/gallery split over disjoint test
/// identities.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// The first half of the identities (by id) train; the rest are split into
/// query and gallery with `split_seed`.
pub fn holdout_benchmark(data: &Dataset, split_seed: u64) -> Result<Benchmark> {
    let ids = data.identities();
    if ids.len() < 2 {
        return Err(contract_err!("held-out benchmark needs at least two identities"));
    }
    let cut = ids[ids.len().div_ceil(2) - 1];
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.samples[i].identity_id <= cut);
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let (query, gallery) = split_query_gallery(&test, &mut ChaCha8Rng::seed_from_u64(split_seed))?;
    Ok(Benchmark {
        train,
        test,
        query,
        gallery,
    })
}

/// Trains `config` on the benchmark's training identities and evaluates on
/// the held-out ones.
pub fn run_arm(config: &Config, bench: &Benchmark) -> Result<MetricsReport> {
    match config.train.precision {
        crate::config::Precision::F32 => {
            let (m, _) = train::<f32>(config, &bench.train)?;
            Ok(evaluate(&m, &bench.test, &bench.query, &bench.gallery, 1)?.0)
        }
        crate::config::Precision::F64 => {
            let (m, _) = train::<f64>(config, &bench.train)?;
            Ok(evaluate(&m, &bench.test, &bench.query, &bench.gallery, 1)?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRuns {
    pub name: String,
    /// `(seed, mAP, rank-1)`
    pub runs: Vec<(u64, f64, f64)>,
}

impl ArmRuns {
    pub fn mean_map(&self) -> f64 {
        self.runs.iter().map(|r| r.1).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_rank1(&self) -> f64 {
        self.runs.iter().map(|r| r.2).sum::<f64>() / self.runs.len() as f64
    }

    fn map_for(&self, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.0 == seed).map(|r| r.1)
    }
}

/// Expected orderings of arm means: `(better, worse)`.
pub const ORDERINGS: &[(&str, &str)] = &[("full", "cff_only"), ("cff_only", "cgi_only"), ("full", "image_as_q")];

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub better: String,
    pub worse: String,
    pub holds: bool,
    /// Seeds on which the per-seed mAP disagrees with the ordering.
    pub inversions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub arms: Vec<ArmRuns>,
    pub sweeps: Vec<ArmRuns>,
    pub orderings: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmRuns> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn all_orderings_hold(&self) -> bool {
        self.orderings.iter().all(|o| o.holds)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# arm seed mAP rank1\n");
        for a in self.arms.iter().chain(&self.sweeps) {
            for (seed, map, r1) in &a.runs {
                let _ = writeln!(out, "{} {seed} {map} {r1}", a.name);
            }
        }
        out.push_str("# arm mean_mAP mean_rank1\n");
        for a in self.arms.iter().chain(&self.sweeps) {
            let _ = writeln!(out, "{} mean {} {}", a.name, a.mean_map(), a.mean_rank1());
        }
        out.push_str("# ordering on mean mAP\n");
        for o in &self.orderings {
            let inv: Vec<String> = o.inversions.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{} > {}: {} (per-seed inversions: {})",
                o.better,
                o.worse,
                if o.holds { "holds" } else { "violated" },
                if inv.is_empty() { "none".to_string() } else { inv.join(",") }
            );
        }
        out
    }
}

/// The four component arms derived from `base`.
pub fn arm_configs(base: &Config) -> Vec<(String, Config)> {
    let mut full = base.clone();
    full.cgi.enabled = true;
    full.cff.enabled = true;
    full.cff.replace_q_with_image = false;
    let mut cff_only = full.clone();
    cff_only.cgi.enabled = false;
    let mut cgi_only = full.clone();
    cgi_only.cff.enabled = false;
    let mut image_as_q = full.clone();
    image_as_q.cff.replace_q_with_image = true;
    vec![
        ("full".into(), full),
        ("cff_only".into(), cff_only),
        ("cgi_only".into(), cgi_only),
        ("image_as_q".into(), image_as_q),
    ]
}

/// Inversion depth 1..=6 at the base query count, then query count
/// 1, 2, 4, 8 at the base depth. One axis varies at a time.
pub fn sweep_configs(base: &Config) -> Vec<(String, Config)> {
    let mut full = base.clone();
    full.cgi.enabled = true;
    full.cff.enabled = true;
    full.cff.replace_q_with_image = false;
    let mut out = Vec::new();
    for depth in 1..=6 {
        let mut c = full.clone();
        c.cgi.depth = depth;
        out.push((format!("depth{depth}"), c));
    }
    for k in [1, 2, 4, 8] {
        let mut c = full.clone();
        c.cgi.num_queries = k;
        out.push((format!("queries{k}"), c));
    }
    out
}

fn run_all(configs: &[(String, Config)], bench: &Benchmark, seeds: &[u64]) -> Result<Vec<ArmRuns>> {
    configs
        .iter()
        .map(|(name, c)| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let mut c = c.clone();
                    c.train.seed = seed;
                    let r = run_arm(&c, bench)?;
                    log::info!("{name} seed {seed}: mAP {} rank1 {}", r.map, r.rank1());
                    Ok((seed, r.map, r.rank1()))
                })
                .collect::<Result<_>>()?;
            Ok(ArmRuns { name: name.clone(), runs })
        })
        .collect()
}

pub fn run_ablation_suite(base: &Config, bench: &Benchmark, seeds: &[u64], sweeps: bool) -> Result<AblationReport> {
    if seeds.len() < 2 {
        return Err(contract_err!("ablation needs at least two seeds, got {}", seeds.len()));
    }
    let arms = run_all(&arm_configs(base), bench, seeds)?;
    let sweeps = if sweeps { run_all(&sweep_configs(base), bench, seeds)? } else { Vec::new() };
    let find = |n: &str| arms.iter().find(|a| a.name == n).expect("arm exists");
    let orderings = ORDERINGS
        .iter()
        .map(|&(b, w)| {
            let (ab, aw) = (find(b), find(w));
            OrderingCheck {
                better: b.into(),
                worse: w.into(),
                holds: ab.mean_map() > aw.mean_map(),
                inversions: seeds
                    .iter()
                    .copied()
                    .filter(|&s| ab.map_for(s) <= aw.map_for(s))
                    .collect(),
            }
        })
        .collect();
    Ok(AblationReport { arms, sweeps, orderings })
}

/// Re-renders every caption from its attributes with each field resampled
/// with probability `p`.
pub fn corrupt_dataset(data: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    for s in &mut out.samples {
        let attrs = corrupt_caption(&s.attrs, p, &mut rng)?;
        s.caption = render_caption(&attrs);
        s.caption_ids = out.vocab.tokenize(&s.caption, out.max_len);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionReport {
    /// `(p, mAP, rank-1)` in the order run.
    pub points: Vec<(f64, f64, f64)>,
}

impl CorruptionReport {
    /// Whether mAP never increases as corruption grows.
    pub fn non_increasing(&self) -> bool {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# corrupt_p mAP rank1\n");
        for (p, map, r1) in &self.points {
            let _ = writeln!(out, "{p} {map} {r1}");
        }
        let _ = writeln!(
            out,
            "# mAP non-increasing in corruption: {}",
            if self.non_increasing() { "yes" } else { "no" }
        );
        out
    }
}

/// Trains the full model on captions corrupted at each level and evaluates
/// on the held-out identities. Measurement only.
pub fn run_corruption_suite(base: &Config, bench: &Benchmark, levels: &[f64]) -> Result<CorruptionReport> {
    let points = levels
        .iter()
        .map(|&p| {
            let mut b = bench.clone();
            b.train = corrupt_dataset(&bench.train, p, base.train.seed)?;
            let r = run_arm(base, &b)?;
            Ok((p, r.map, r.rank1()))
        })
        .collect::<Result<_>>()?;
    Ok(CorruptionReport { points })
}
