//! Training loop with warmup and step-decay schedule over two learning-rate
//! groups, and the run log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, MetricsReport};
use crate::losses::LossBundle;
use crate::model::{ScgiModel, StepInput};
use crate::nn::{AdamState, Graph, ParamGroup, Real, Session, Tensor};
use crate::synth::{augment, sample_pk_batch, Augment, Dataset};

/// Offset separating the batch-sampling stream from parameter init.
const SAMPLER_STREAM: u64 = 0x5eed_ba7c;

/// Learning rates `(base, new_module)` at `epoch`: linear warmup from a
/// tenth of the base rate, then step decay every `decay_epochs`.
pub fn lr_schedule(config: &Config, epoch: usize) -> (f64, f64) {
    let t = &config.train;
    let base = if epoch < t.warmup_epochs {
        let start = t.base_lr / 10.0;
        start + (t.base_lr - start) * epoch as f64 / t.warmup_epochs as f64
    } else {
        t.base_lr * t.decay_factor.powi((epoch / t.decay_epochs) as i32)
    };
    (base, t.new_module_lr * base / t.base_lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBundle,
    pub lr_base: f64,
    pub lr_new: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config_hash: String,
    /// Learning-rate group of every parameter, by name.
    pub groups: BTreeMap<String, ParamGroup>,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Not written to the log file, which must be reproducible.
    pub wall_seconds: f64,
}

impl RunLog {
    pub fn initial_total(&self) -> Option<f64> {
        self.records.first().map(|r| r.losses.total())
    }

    pub fn final_total(&self) -> Option<f64> {
        self.records.last().map(|r| r.losses.total())
    }

    /// Mean loss components per epoch.
    pub fn epoch_means(&self) -> Vec<(usize, LossBundle)> {
        let mut out: Vec<(usize, LossBundle, usize)> = Vec::new();
        for r in &self.records {
            if out.last().map(|(e, _, _)| *e) != Some(r.epoch) {
                out.push((r.epoch, LossBundle::default(), 0));
            }
            let (_, b, n) = out.last_mut().expect("pushed above");
            b.l_id += r.losses.l_id;
            b.l_tri += r.losses.l_tri;
            b.l_t2i += r.losses.l_t2i;
            b.l_i2t += r.losses.l_i2t;
            *n += 1;
        }
        out.into_iter()
            .map(|(e, b, n)| {
                let k = n as f64;
                (
                    e,
                    LossBundle {
                        l_id: b.l_id / k,
                        l_tri: b.l_tri / k,
                        l_t2i: b.l_t2i / k,
                        l_i2t: b.l_i2t / k,
                    },
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_hash {}", self.config_hash);
        for (name, g) in &self.groups {
            let _ = writeln!(out, "# group {name} {}", g.name());
        }
        for s in &self.snapshots {
            let _ = writeln!(out, "# snapshot epoch {} mAP {} rank1 {}", s.epoch, s.map, s.rank1);
        }
        out.push_str("# epoch step l_id l_tri l_t2i l_i2t lr_base lr_new\n");
        for r in &self.records {
            let l = &r.losses;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                r.epoch, r.step, l.l_id, l.l_tri, l.l_t2i, l.l_i2t, r.lr_base, r.lr_new
            );
        }
        out
    }
}

/// Held-out evaluation run at the end of training.
pub struct EvalSplit<'a> {
    pub data: &'a Dataset,
    pub query: &'a [usize],
    pub gallery: &'a [usize],
}

/// Classifier index of each identity in `data`, by ascending id.
pub fn class_map(data: &Dataset) -> BTreeMap<u32, usize> {
    data.identities().into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

pub fn train<T: Real + Send + Sync>(config: &Config, data: &Dataset) -> Result<(ScgiModel<T>, RunLog)> {
    train_with_eval(config, data, None)
}

/// Trains from scratch. Deterministic given `(config, data)`.
pub fn train_with_eval<T: Real + Send + Sync>(
    config: &Config,
    data: &Dataset,
    eval: Option<&EvalSplit<'_>>,
) -> Result<(ScgiModel<T>, RunLog)> {
    config.validate()?;
    if data.max_len != config.model.max_len {
        return Err(Error::Validation(format!(
            "dataset tokenized to {} tokens, model expects {}",
            data.max_len, config.model.max_len
        )));
    }
    let started = Instant::now();
    let classes = class_map(data);
    let mut model = ScgiModel::<T>::new(config, data.vocab.len(), classes.len())?;
    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ SAMPLER_STREAM);
    let aug = Augment {
        flip: config.data.flip,
        erasing: config.data.erasing,
    };
    let mut log = RunLog {
        config_hash: config.hash(),
        groups: model.store.iter().map(|(_, p)| (p.name.clone(), p.group)).collect(),
        records: Vec::new(),
        snapshots: Vec::new(),
        wall_seconds: 0.0,
    };
    for epoch in 0..config.train.epochs {
        let (lr_base, lr_new) = lr_schedule(config, epoch);
        for step in 0..config.train.steps_per_epoch {
            let batch = sample_pk_batch(data, config.train.p_ids, config.train.k_per, &mut rng)?;
            let images: Vec<Tensor<f64>> = batch.samples(data).map(|s| augment(&s.image, aug, &mut rng)).collect();
            let samples: Vec<_> = batch.samples(data).collect();
            let input = StepInput {
                images: images.iter().collect(),
                identities: samples.iter().map(|s| s.identity_id).collect(),
                labels: samples.iter().map(|s| classes[&s.identity_id]).collect(),
                captions: samples.iter().map(|s| &s.caption_ids).collect(),
            };
            let grads = {
                let g = Graph::new();
                let s = Session::new(&g, &model.store);
                let losses = model.step_losses(&s, &input).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} step {step}: {m}")),
                    e => e,
                })?;
                let bundle = losses.bundle();
                if !bundle.total().is_finite() {
                    let culprit = g.first_non_finite().unwrap_or_else(|| "l_total".into());
                    return Err(Error::NonFinite(format!("epoch {epoch} step {step}: first non-finite tensor {culprit}")));
                }
                log.records.push(StepRecord {
                    epoch,
                    step,
                    losses: bundle,
                    lr_base,
                    lr_new,
                });
                let mut grads = g.backward(losses.total)?;
                s.param_grads(&mut grads)
            };
            if let Some((_, p)) = model
                .store
                .iter()
                .zip(&grads)
                .find(|(_, g)| g.as_ref().is_some_and(|t| t.data().iter().any(|v| !v.is_finite())))
                .map(|((id, p), _)| (id, p))
            {
                return Err(Error::NonFinite(format!("epoch {epoch} step {step}: gradient of {}", p.name)));
            }
            adam.step(&mut model.store, &grads, |g| match g {
                ParamGroup::Base => lr_base,
                ParamGroup::NewModule => lr_new,
            })?;
        }
    }
    if let Some(split) = eval {
        let (report, _) = evaluate(&model, split.data, split.query, split.gallery, 1)?;
        log.snapshots.push(Snapshot {
            epoch: config.train.epochs,
            map: report.map,
            rank1: report.rank1(),
        });
    }
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Trains at the precision the config names and returns the checkpoint.
pub fn train_checkpoint(config: &Config, data: &Dataset) -> Result<(crate::nn::Checkpoint, RunLog)> {
    match config.train.precision {
        crate::config::Precision::F32 => {
            let (m, log) = train::<f32>(config, data)?;
            Ok((m.to_checkpoint()?, log))
        }
        crate::config::Precision::F64 => {
            let (m, log) = train::<f64>(config, data)?;
            Ok((m.to_checkpoint()?, log))
        }
    }
}

/// Evaluates a checkpoint at its stored precision.
pub fn evaluate_checkpoint(
    ck: &crate::nn::Checkpoint,
    data: &Dataset,
    query: &[usize],
    gallery: &[usize],
    threads: usize,
) -> Result<(MetricsReport, Vec<crate::evaluator::RankedList>)> {
    match ck.dtype {
        crate::nn::DType::F32 => evaluate(&ScgiModel::<f32>::from_checkpoint(ck)?, data, query, gallery, threads),
        crate::nn::DType::F64 => evaluate(&ScgiModel::<f64>::from_checkpoint(ck)?, data, query, gallery, threads),
    }
}

/// Fails unless a PK batch can be drawn from `data`.
pub fn check_pk(config: &Config, data: &Dataset) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    sample_pk_batch(data, config.train.p_ids, config.train.k_per, &mut rng).map(|_| ())
}
