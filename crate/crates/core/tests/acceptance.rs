//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scgi::ablation::{holdout_benchmark, run_ablation_suite, run_corruption_suite, Benchmark};
use scgi::config::{Config, FuseMode, TripletOn};
use scgi::evaluator::{average_precision, evaluate, rank_gallery, summarize, RankedList, SampleMeta, CMC_RANKS};
use scgi::losses::{contrastive_i2t, contrastive_t2i, id_loss, supervised_contrastive, triplet_loss};
use scgi::model::{ScgiModel, StepInput};
use scgi::nn::gradcheck::check_params;
use scgi::nn::{Checkpoint, Graph, Tensor};
use scgi::synth::{generate_dataset, split_query_gallery, Dataset};
use scgi::trainer::{evaluate_checkpoint, train, train_checkpoint};

/// Synthetic benchmark for the ablation and corruption criteria: half the
/// identities train, the other half are held out for retrieval.
const BENCH_IDS: usize = 96;
const BENCH_PER_ID: usize = 8;
const BENCH_CAMS: usize = 3;
const BENCH_SEED: u64 = 7;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

fn tiny_config(rng: &mut ChaCha8Rng) -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("model.dim", "8"),
        ("model.word_dim", "8"),
        ("model.heads", "2"),
        ("model.image_blocks", "1"),
        ("model.text_blocks", "1"),
        ("model.patch_h", "16"),
        ("model.patch_w", "16"),
        ("cgi.num_queries", "2"),
        ("cff.heads", "2"),
        ("cff.blocks", "1"),
    ] {
        c.set(k, v).unwrap();
    }
    c.cgi.depth = rng.random_range(1..=2);
    c.cff.mode = if rng.random_bool(0.5) { FuseMode::ClsOnly } else { FuseMode::AllTokens };
    c.cff.replace_q_with_image = rng.random_bool(0.25);
    c.loss.triplet_on = if rng.random_bool(0.5) { TripletOn::Fused } else { TripletOn::ImageCls };
    c.train.seed = rng.random();
    c
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let n_configs = 20;
    for i in 0..n_configs {
        let c = tiny_config(&mut rng);
        let data = generate_dataset(2, 2, 2, rng.random()).unwrap();
        let model = ScgiModel::<f64>::new(&c, data.vocab.len(), 2).unwrap();
        assert_eq!(model.image.m, 2);
        let input = StepInput {
            images: data.samples.iter().map(|s| &s.image).collect(),
            identities: data.samples.iter().map(|s| s.identity_id).collect(),
            labels: data.samples.iter().map(|s| s.identity_id as usize).collect(),
            captions: data.samples.iter().map(|s| &s.caption_ids).collect(),
        };
        let mut store = model.store.clone();
        let report = check_params(&mut store, 4, &mut rng, |s| Ok(model.step_losses(s, &input)?.total)).unwrap();
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_at = format!("config {i}: {}", report.worst);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{n_configs} configs, max rel err {worst:.2e} ({worst_at}), {secs:.1}s"),
    )
}

// ------------------------------------------------------------- loss oracles

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn oracle_contrastive(anchor: &[Vec<f64>], cand: &[Vec<f64>], ids: &[u32], tau: f64) -> f64 {
    let b = ids.len();
    let a: Vec<Vec<f64>> = anchor.iter().map(|v| unit(v)).collect();
    let c: Vec<Vec<f64>> = cand.iter().map(|v| unit(v)).collect();
    let mut total = 0.0;
    for i in 0..b {
        let sims: Vec<f64> = (0..b)
            .map(|k| a[i].iter().zip(&c[k]).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let ls = log_softmax_row(&sims);
        let pos: Vec<usize> = (0..b).filter(|&p| ids[p] == ids[i]).collect();
        let mut s = 0.0;
        for &p in &pos {
            s -= ls[p];
        }
        total += s / pos.len() as f64;
    }
    total / b as f64
}

fn oracle_id(logits: &[Vec<f64>], labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let c = row.len();
        let ls = log_softmax_row(row);
        for (k, l) in ls.iter().enumerate() {
            let q = if k == y { 1.0 - eps + eps / c as f64 } else { eps / c as f64 };
            total -= q * l;
        }
    }
    total / labels.len() as f64
}

fn oracle_triplet(f: &[Vec<f64>], ids: &[u32], margin: f64) -> f64 {
    let b = ids.len();
    let d = |i: usize, j: usize| {
        (f[i].iter().zip(&f[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() + 1e-12).sqrt()
    };
    let mut total = 0.0;
    for i in 0..b {
        let mut dp = f64::NEG_INFINITY;
        let mut dn = f64::INFINITY;
        for j in 0..b {
            if j != i && ids[j] == ids[i] {
                dp = dp.max(d(i, j));
            }
            if ids[j] != ids[i] {
                dn = dn.min(d(i, j));
            }
        }
        total += (dp - dn + margin).max(0.0);
    }
    total / b as f64
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..w).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

/// Identity labels for `b` samples where every identity has at least two
/// samples and at least two identities appear.
fn random_ids(rng: &mut ChaCha8Rng, b: usize) -> Vec<u32> {
    let n_ids = rng.random_range(2..=b / 2);
    let mut ids: Vec<u32> = (0..b).map(|i| (i % n_ids) as u32 * 7 + 3).collect();
    ids.shuffle(rng);
    ids
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let b = 2 * rng.random_range(2..=4);
        let w = rng.random_range(2..=6);
        let c = rng.random_range(2..=6);
        let ids = random_ids(&mut rng, b);
        let tau = [1.0, 0.5, 0.07][rng.random_range(0..3)];
        let eps = rng.random_range(0.0..0.3);
        let x = random_rows(&mut rng, b, w);
        let y = random_rows(&mut rng, b, w);
        let logits = random_rows(&mut rng, b, c);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let g = Graph::new();
        let (vx, vy, vl) = (g.constant(tensor(&x)), g.constant(tensor(&y)), g.constant(tensor(&logits)));
        let pairs = [
            (contrastive_t2i(vx, vy, &ids, tau).unwrap().value().item(), oracle_contrastive(&x, &y, &ids, tau)),
            (contrastive_i2t(vy, vx, &ids, tau).unwrap().value().item(), oracle_contrastive(&y, &x, &ids, tau)),
            (id_loss(vl, &labels, eps).unwrap().value().item(), oracle_id(&logits, &labels, eps)),
            (triplet_loss(vx, &ids, 0.3).unwrap().value().item(), oracle_triplet(&x, &ids, 0.3)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    let g = Graph::new();
    let uniform = supervised_contrastive(g.constant(Tensor::<f64>::full(&[4, 4], 0.7)), &[0, 1, 2, 3])
        .unwrap()
        .value()
        .item();
    let rect = |dp: f64, dn: f64| {
        let g = Graph::new();
        let f = g.constant(Tensor::new(&[4, 2], vec![0.0, 0.0, dp, 0.0, 0.0, dn, dp, dn]).unwrap());
        triplet_loss(f, &[0, 0, 1, 1], 0.3).unwrap().value().item()
    };
    let (zero, hinge) = (rect(0.2, 0.5), rect(0.5, 0.2));
    let closed = (uniform - 4f64.ln()).abs() < 1e-12 && zero.abs() < 1e-9 && (hinge - 0.6).abs() < 1e-9;
    outcome(
        worst < 1e-9 && closed,
        format!("100 batches, max abs err {worst:.2e}; uniform B=4 {uniform}, hinge {zero:.1e} / {hinge}"),
    )
}

// ----------------------------------------------------------- metric oracles

/// Rank by counting: an entry's position is the number of entries that beat
/// it (higher score, or equal score and lower index).
fn oracle_metrics(qf: &[Vec<f64>], gf: &[Vec<f64>], qm: &[SampleMeta], gm: &[SampleMeta]) -> (f64, Vec<f64>, usize) {
    let mut ap_sum = 0.0;
    let mut cmc = vec![0.0; CMC_RANKS];
    let mut n = 0;
    for (q, meta) in qf.iter().zip(qm) {
        let valid: Vec<usize> = (0..gf.len())
            .filter(|&j| !(gm[j].identity == meta.identity && gm[j].camera == meta.camera))
            .collect();
        let score = |j: usize| q.iter().zip(&gf[j]).map(|(a, b)| a * b).sum::<f64>();
        let mut ordered = vec![usize::MAX; valid.len()];
        for &j in &valid {
            let pos = valid
                .iter()
                .filter(|&&o| score(o) > score(j) || (score(o) == score(j) && gm[o].index < gm[j].index))
                .count();
            ordered[pos] = j;
        }
        let rel: Vec<bool> = ordered.iter().map(|&j| gm[j].identity == meta.identity).collect();
        let r = rel.iter().filter(|&&x| x).count();
        if r == 0 {
            continue;
        }
        n += 1;
        let mut ap = 0.0;
        for k in 0..rel.len() {
            if rel[k] {
                let hits = rel[..=k].iter().filter(|&&x| x).count();
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        ap_sum += ap / r as f64;
        for (k, c) in cmc.iter_mut().enumerate() {
            if rel.iter().take(k + 1).any(|&x| x) {
                *c += 1.0;
            }
        }
    }
    let d = n.max(1) as f64;
    (ap_sum / d, cmc.into_iter().map(|c| c / d).collect(), n)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut leaked = 0usize;
    let mut excluded_expected = 0usize;
    for _ in 0..100 {
        let nq = rng.random_range(1..=8);
        let ng = rng.random_range(1..=40);
        let w = rng.random_range(2..=5);
        let ids = rng.random_range(1..=5);
        let cams = rng.random_range(1..=3);
        // coarse values make exact score ties common
        let coarse = rng.random_bool(0.5);
        let feat = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..w)
                .map(|_| if coarse { rng.random_range(-1..=1) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect();
            if v.iter().all(|&x| x == 0.0) {
                v[0] = 1.0;
            }
            unit(&v)
        };
        let qf: Vec<Vec<f64>> = (0..nq).map(|_| feat(&mut rng)).collect();
        let gf: Vec<Vec<f64>> = (0..ng).map(|_| feat(&mut rng)).collect();
        let meta = |rng: &mut ChaCha8Rng, index: usize| SampleMeta {
            index,
            identity: rng.random_range(0..ids),
            camera: rng.random_range(0..cams),
        };
        let qm: Vec<SampleMeta> = (0..nq).map(|i| meta(&mut rng, 1000 + i)).collect();
        let mut gidx: Vec<usize> = (0..ng).collect();
        gidx.shuffle(&mut rng);
        let gm: Vec<SampleMeta> = gidx.iter().map(|&i| meta(&mut rng, i)).collect();
        let lists: Vec<RankedList> = qf
            .iter()
            .zip(&qm)
            .map(|(f, m)| rank_gallery(f, &gf, *m, &gm).unwrap())
            .collect();
        for (l, m) in lists.iter().zip(&qm) {
            excluded_expected += gm.iter().filter(|g| g.identity == m.identity && g.camera == m.camera).count();
            leaked += l
                .gallery
                .iter()
                .filter(|&&i| gm.iter().any(|g| g.index == i && g.identity == m.identity && g.camera == m.camera))
                .count();
            assert_eq!(
                l.gallery.len() + gm.iter().filter(|g| g.identity == m.identity && g.camera == m.camera).count(),
                gm.len()
            );
        }
        let report = summarize(&lists, "");
        let (map, cmc, n) = oracle_metrics(&qf, &gf, &qm, &gm);
        assert_eq!(report.n_queries, n);
        worst = worst.max((report.map - map).abs());
        for (a, b) in report.cmc.iter().zip(&cmc) {
            worst = worst.max((a - b).abs());
        }
    }
    let ap = average_precision(&[true, false, true]).unwrap();
    outcome(
        worst < 1e-9 && ap == 5.0 / 6.0 && leaked == 0,
        format!(
            "100 configs, max abs err {worst:.2e}; AP([1,0,1]) = {ap}; {leaked} of {excluded_expected} same-id/same-cam entries leaked"
        ),
    )
}

// ---------------------------------------------------------------- training

struct Overfit {
    data: Dataset,
    query: Vec<usize>,
    gallery: Vec<usize>,
    checkpoint: Checkpoint,
    report: String,
}

fn overfit() -> (Outcome, Overfit) {
    let data = generate_dataset(16, 8, 3, 7).unwrap();
    let (query, gallery) = split_query_gallery(&data, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let config = Config::default();
    let started = Instant::now();
    let (checkpoint, _) = train_checkpoint(&config, &data).unwrap();
    let (report, _) = evaluate_checkpoint(&checkpoint, &data, &query, &gallery, 1).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let o = outcome(
        report.rank1() >= 0.95 && report.map >= 0.90 && secs < 300.0,
        format!("rank-1 {:.4}, mAP {:.4}, {secs:.1}s", report.rank1(), report.map),
    );
    (
        o,
        Overfit {
            report: report.to_text(),
            data,
            query,
            gallery,
            checkpoint,
        },
    )
}

fn benchmark() -> Benchmark {
    let data = generate_dataset(BENCH_IDS, BENCH_PER_ID, BENCH_CAMS, BENCH_SEED).unwrap();
    holdout_benchmark(&data, 0).unwrap()
}

fn ablation(bench: &Benchmark) -> Outcome {
    let started = Instant::now();
    let report = run_ablation_suite(&Config::default(), bench, &ABLATION_SEEDS, false).unwrap();
    for line in report.to_text().lines() {
        println!("    {line}");
    }
    let means: Vec<String> = report
        .arms
        .iter()
        .map(|a| format!("{} {:.4}", a.name, a.mean_map()))
        .collect();
    outcome(
        report.all_orderings_hold(),
        format!("mean mAP {}; {:.0}s", means.join(", "), started.elapsed().as_secs_f64()),
    )
}

fn branch_removal(o: &Overfit) -> Outcome {
    let mut stripped = o.checkpoint.clone();
    let removed = stripped.remove_prefix("cgi.");
    let (report, _) = evaluate_checkpoint(&stripped, &o.data, &o.query, &o.gallery, 1).unwrap();
    let full = ScgiModel::<f32>::from_checkpoint(&o.checkpoint).unwrap();
    let bare = ScgiModel::<f32>::from_checkpoint(&stripped).unwrap();
    let images: Vec<&Tensor<f64>> = o.data.samples.iter().map(|s| &s.image).collect();
    let same_features = full.inference_features(&images, 1).unwrap() == bare.inference_features(&images, 1).unwrap();
    outcome(
        removed > 0 && bare.cgi.is_none() && same_features && report.to_text() == o.report,
        format!("{removed} tensors removed; features identical: {same_features}; report identical: {}", report.to_text() == o.report),
    )
}

fn determinism(o: &Overfit) -> Outcome {
    let data = generate_dataset(8, 4, 3, 11).unwrap();
    let mut c = Config::default();
    for (k, v) in [("train.epochs", "3"), ("train.warmup_epochs", "1"), ("train.steps_per_epoch", "5"), ("train.p_ids", "4")] {
        c.set(k, v).unwrap();
    }
    let (a, log_a) = train::<f32>(&c, &data).unwrap();
    let (b, log_b) = train::<f32>(&c, &data).unwrap();
    let same_log = log_a.to_text() == log_b.to_text();
    let same_ckpt = a.to_checkpoint().unwrap().to_bytes() == b.to_checkpoint().unwrap().to_bytes();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    o.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let model = ScgiModel::<f32>::from_checkpoint(&loaded).unwrap();
    let (report, _) = evaluate(&model, &o.data, &o.query, &o.gallery, 1).unwrap();
    let same_report = report.to_text() == o.report;
    outcome(
        same_log && same_ckpt && same_report,
        format!("run log identical: {same_log}; checkpoint identical: {same_ckpt}; reloaded report identical: {same_report}"),
    )
}

fn corruption(bench: &Benchmark) -> Outcome {
    let started = Instant::now();
    let report = run_corruption_suite(&Config::default(), bench, &[0.0, 0.2, 0.5]).unwrap();
    for line in report.to_text().lines() {
        println!("    {line}");
    }
    outcome(
        report.points.len() == 3,
        format!(
            "measurement only; mAP non-increasing: {}; {:.0}s",
            report.non_increasing(),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 gradient suite", gradient_suite());
    report("2 loss oracles", loss_oracles());
    report("3 metric oracles", metric_oracles());
    let (o4, trained) = overfit();
    report("4 overfit", o4);
    report("6 branch-removal parity", branch_removal(&trained));
    report("7 determinism and persistence", determinism(&trained));
    let bench = benchmark();
    report("5 ablation directionality", ablation(&bench));
    report("8 caption-corruption harness", corruption(&bench));
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join("; "));
        std::process::exit(1);
    }
}
