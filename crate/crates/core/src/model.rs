//! The full model: encoders, inversion branch, fusion module and identity
//! classifier, with the training objective, the inference feature and
//! checkpoint conversion.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cff::Cff;
use crate::cgi::Cgi;
use crate::config::{Config, TripletOn};
use crate::encoders::{ImageEncoder, ImageGeometry, TextEncoder, TextTokens};
use crate::error::{contract_err, Error, Result};
use crate::losses::{contrastive_i2t, contrastive_t2i, id_loss, triplet_loss, LossBundle};
use crate::nn::layers::{Builder, Linear};
use crate::nn::{Checkpoint, Graph, ParamGroup, ParamStore, Real, Session, Tensor, Var};
use crate::synth::{CHANNELS, HEIGHT, WIDTH};
use crate::vocab::{TokenIds, Vocabulary};

pub const MODEL_FORMAT: &str = "scgi-model v1";
/// Images per forward pass when extracting inference features.
pub const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct ScgiModel<T> {
    pub config: Config,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub store: ParamStore<T>,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub cgi: Option<Cgi>,
    pub cff: Option<Cff>,
    pub classifier: Linear,
    /// `a photo of a [PSEUDO] person`
    pub prompt: TokenIds,
    /// `a photo of a person`
    pub plain_prompt: TokenIds,
}

/// One training batch.
pub struct StepInput<'a> {
    pub images: Vec<&'a Tensor<f64>>,
    pub identities: Vec<u32>,
    /// Classifier targets.
    pub labels: Vec<usize>,
    pub captions: Vec<&'a TokenIds>,
}

pub struct StepLosses<'g, T> {
    pub l_id: Var<'g, T>,
    pub l_tri: Var<'g, T>,
    pub l_t2i: Var<'g, T>,
    pub l_i2t: Var<'g, T>,
    pub total: Var<'g, T>,
}

impl<T: Real> StepLosses<'_, T> {
    pub fn bundle(&self) -> LossBundle {
        LossBundle {
            l_id: self.l_id.value().item().f64(),
            l_tri: self.l_tri.value().item().f64(),
            l_t2i: self.l_t2i.value().item().f64(),
            l_i2t: self.l_i2t.value().item().f64(),
        }
    }
}

/// Learning-rate group of a parameter: encoders train at the base rate,
/// everything else at the new-module rate.
pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("image.") || name.starts_with("text.") {
        ParamGroup::Base
    } else {
        ParamGroup::NewModule
    }
}

/// Repeats a single encoded sequence `batch` times.
fn tile_text<'g, T: Real>(t: &TextTokens<'g, T>, batch: usize) -> TextTokens<'g, T> {
    let len = t.len;
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let mask: Vec<bool> = (0..batch).flat_map(|_| t.mask.iter().copied()).collect();
    TextTokens {
        seq: t.seq.select_rows(idx),
        batch,
        len,
        eos: vec![t.eos[0]; batch],
        mask: mask.into(),
    }
}

impl<T: Real> ScgiModel<T> {
    /// Fresh parameters drawn from `seed`. `with_cgi` overrides
    /// `config.cgi.enabled` for building the branch.
    fn build(config: &Config, vocab_size: usize, n_classes: usize, seed: u64, with_cgi: bool) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(contract_err!("classifier needs at least one class"));
        }
        let mc = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let geo = ImageGeometry {
            channels: CHANNELS,
            height: HEIGHT,
            width: WIDTH,
            patch_h: mc.patch_h,
            patch_w: mc.patch_w,
        };
        let image = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Base, "image");
            ImageEncoder::new(&mut b, &geo, mc.dim, mc.heads, mc.image_blocks)?
        };
        let text = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Base, "text");
            TextEncoder::new(&mut b, vocab_size, mc.max_len, mc.word_dim, mc.dim, mc.heads, mc.text_blocks)
        };
        let cgi = if with_cgi {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::NewModule, "cgi");
            Some(Cgi::new(&mut b, mc.dim, mc.word_dim, mc.heads, config.cgi.depth, config.cgi.num_queries)?)
        } else {
            None
        };
        let cff = config.cff.enabled.then(|| {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::NewModule, "cff");
            let c = &config.cff;
            Cff::new(&mut b, mc.dim, c.heads, c.blocks, c.mode, c.replace_q_with_image)
        });
        let classifier = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::NewModule, "classifier");
            Linear::new(&mut b, mc.dim, n_classes, false)
        };
        let vocab = Vocabulary::build_default();
        Ok(ScgiModel {
            config: config.clone(),
            n_classes,
            vocab_size,
            store,
            image,
            text,
            cgi,
            cff,
            classifier,
            prompt: prompt_ids(&vocab, true, mc.max_len)?,
            plain_prompt: prompt_ids(&vocab, false, mc.max_len)?,
        })
    }

    pub fn new(config: &Config, vocab_size: usize, n_classes: usize) -> Result<Self> {
        Self::build(config, vocab_size, n_classes, config.train.seed, config.cgi.enabled)
    }

    /// Per-sample losses of one batch on graph `s`.
    pub fn step_losses<'g>(&self, s: &Session<'g, T>, input: &StepInput<'_>) -> Result<StepLosses<'g, T>> {
        let b = input.images.len();
        if input.identities.len() != b || input.labels.len() != b || input.captions.len() != b {
            return Err(contract_err!("batch fields disagree in length"));
        }
        let temp = self.config.loss.temperature;
        let img = self.image.encode(s, &input.images)?;
        let v_cls = img.cls().label("v_cls");
        let prompt = match &self.cgi {
            Some(cgi) => {
                // each identity's caption is encoded once
                let mut unique: Vec<&TokenIds> = Vec::new();
                let mut slot: HashMap<&TokenIds, usize> = HashMap::new();
                let map: Vec<usize> = input
                    .captions
                    .iter()
                    .map(|&c| {
                        *slot.entry(c).or_insert_with(|| {
                            unique.push(c);
                            unique.len() - 1
                        })
                    })
                    .collect();
                let caps = self.text.encode(s, &unique, None)?;
                let cap_global = caps.global().select_rows(map).label("caption_global");
                let pw = cgi.forward(s, &img, cap_global)?;
                let prompts = vec![&self.prompt; b];
                self.text.encode(s, &prompts, Some(pw.s_star.label("s_star")))?
            }
            None => {
                let plain = self.text.encode(s, &[&self.plain_prompt], None)?;
                tile_text(&plain, b)
            }
        };
        let t_global = prompt.global().label("prompt_global");
        let l_t2i = contrastive_t2i(t_global, v_cls, &input.identities, temp)?.label("l_t2i");
        let l_i2t = contrastive_i2t(v_cls, t_global, &input.identities, temp)?.label("l_i2t");
        let h = match &self.cff {
            Some(cff) => cff.fuse(s, &prompt, &img)?.global.label("h_global"),
            None => v_cls,
        };
        let logits = self.classifier.forward(s, h);
        let l_id = id_loss(logits, &input.labels, self.config.loss.label_smoothing)?.label("l_id");
        let tri_feat = match self.config.loss.triplet_on {
            TripletOn::Fused => h,
            TripletOn::ImageCls => v_cls,
        };
        let l_tri = triplet_loss(tri_feat, &input.identities, self.config.loss.margin)?.label("l_tri");
        let total = l_id.add(l_tri).add(l_t2i).add(l_i2t).label("l_total");
        Ok(StepLosses {
            l_id,
            l_tri,
            l_t2i,
            l_i2t,
            total,
        })
    }

    /// Retrieval embedding of each image: the plain prompt fused with the
    /// image tokens (class token when fusion is disabled), L2-normalized.
    /// Never touches captions or the inversion branch.
    pub fn features_on<'g>(&self, s: &Session<'g, T>, images: &[&Tensor<f64>]) -> Result<Var<'g, T>> {
        let img = self.image.encode(s, images)?;
        let h = match &self.cff {
            Some(cff) => {
                let plain = self.text.encode(s, &[&self.plain_prompt], None)?;
                cff.fuse(s, &tile_text(&plain, images.len()), &img)?.global
            }
            None => img.cls(),
        };
        Ok(h.l2_normalize())
    }

    /// Inference features in fixed chunks of [`EVAL_CHUNK`] images, spread
    /// over up to `threads` threads. Results do not depend on `threads`.
    pub fn inference_features(&self, images: &[&Tensor<f64>], threads: usize) -> Result<Vec<Vec<f64>>>
    where
        T: Send + Sync,
    {
        let chunks: Vec<&[&Tensor<f64>]> = images.chunks(EVAL_CHUNK).collect();
        let run = |chunk: &[&Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
            let g = Graph::new();
            let s = Session::frozen(&g, &self.store);
            let f = self.features_on(&s, chunk)?.value();
            Ok((0..f.rows()).map(|r| f.row(r).iter().map(|v| v.f64()).collect()).collect())
        };
        let threads = threads.max(1).min(chunks.len().max(1));
        let mut out: Vec<Result<Vec<Vec<f64>>>> = Vec::with_capacity(chunks.len());
        if threads == 1 {
            out.extend(chunks.iter().map(|c| run(c)));
        } else {
            let per = chunks.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunks
                    .chunks(per)
                    .map(|group| scope.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                    .collect();
                for h in handles {
                    out.extend(h.join().expect("feature worker panicked"));
                }
            });
        }
        let mut feats = Vec::with_capacity(images.len());
        for r in out {
            feats.extend(r?);
        }
        Ok(feats)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(T::DTYPE);
        ck.meta = self.config.to_meta();
        ck.meta.insert("format".into(), MODEL_FORMAT.into());
        ck.meta.insert("n_classes".into(), self.n_classes.to_string());
        ck.meta.insert("vocab_size".into(), self.vocab_size.to_string());
        for (_, p) in self.store.iter() {
            ck.insert(&p.name, &p.value)?;
        }
        Ok(ck)
    }

    /// Rebuilds the model from a checkpoint. The inversion branch is
    /// optional: a checkpoint without `cgi.*` tensors loads without it.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("format").map(String::as_str) != Some(MODEL_FORMAT) {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let config = Config::from_meta(&ck.meta)?;
        let num = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or invalid meta {k}")))
        };
        let has_cgi = ck.tensors.keys().any(|k| k.starts_with("cgi."));
        let mut model = Self::build(&config, num("vocab_size")?, num("n_classes")?, 0, has_cgi)?;
        let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in &names {
            let t: Tensor<T> = ck.get(name)?;
            model.store.set(name, t)?;
        }
        if let Some(extra) = ck.tensors.keys().find(|k| model.store.lookup(k).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    /// SHA-256 over every parameter the inference feature depends on.
    pub fn inference_hash(&self) -> Result<String> {
        Ok(self.to_checkpoint()?.tensor_hash(is_inference_param))
    }
}

pub fn is_inference_param(name: &str) -> bool {
    !name.starts_with("cgi.") && !name.starts_with("classifier.")
}

fn prompt_ids(vocab: &Vocabulary, with_pseudo: bool, max_len: usize) -> Result<TokenIds> {
    if max_len < 8 {
        return Err(contract_err!("max_len {max_len} cannot hold the prompt"));
    }
    Ok(vocab.prompt(with_pseudo, max_len))
}
