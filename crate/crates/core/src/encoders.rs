//! Tiny image and text transformers mapping into a shared joint space.

use std::rc::Rc;

use rand::Rng;

use crate::error::{contract_err, shape_err, Result};
use crate::nn::layers::{Builder, LayerNorm, Linear, TransformerBlock};
use crate::nn::{ParamId, Real, Session, Tensor, Var};
use crate::vocab::{TokenIds, PSEUDO};

/// Image token sequences for a batch: per image the class token followed by
/// `m` patch tokens, stacked into `[batch·(m+1) × d]`.
#[derive(Clone, Copy)]
pub struct ImageTokens<'g, T> {
    pub seq: Var<'g, T>,
    pub batch: usize,
    pub m: usize,
}

impl<'g, T: Real> ImageTokens<'g, T> {
    pub fn tokens_per_image(&self) -> usize {
        self.m + 1
    }

    /// `v_cls` rows, `[batch × d]`.
    pub fn cls(&self) -> Var<'g, T> {
        let n = self.tokens_per_image();
        self.seq.select_rows((0..self.batch).map(|b| b * n).collect::<Vec<_>>())
    }

    /// `v_1..v_M` rows, `[batch·m × d]`.
    pub fn locals(&self) -> Var<'g, T> {
        let n = self.tokens_per_image();
        let idx: Vec<usize> = (0..self.batch)
            .flat_map(|b| (1..n).map(move |j| b * n + j))
            .collect();
        self.seq.select_rows(idx)
    }
}

/// Text token sequences for a batch, trimmed to the longest effective
/// length `len` and stacked into `[batch·len × d]`.
#[derive(Clone)]
pub struct TextTokens<'g, T> {
    pub seq: Var<'g, T>,
    pub batch: usize,
    pub len: usize,
    pub eos: Vec<usize>,
    /// `batch·len` flags; positions after `[EOS]` are padding.
    pub mask: Rc<[bool]>,
}

impl<'g, T: Real> TextTokens<'g, T> {
    /// The `[EOS]`-position token of every sequence, `[batch × d]`.
    pub fn global(&self) -> Var<'g, T> {
        global_rows(self.seq, self.len, &self.eos)
    }
}

/// Row `eos[b]` of each `len`-row block of `seq`.
pub fn global_rows<'g, T: Real>(seq: Var<'g, T>, len: usize, eos: &[usize]) -> Var<'g, T> {
    seq.select_rows(eos.iter().enumerate().map(|(b, &e)| b * len + e).collect::<Vec<_>>())
}

/// Splits `[C×H×W]` images into `[batch·m × C·ph·pw]` patch rows, patches in
/// row-major order, each flattened channel-major.
pub fn patchify<T: Real>(images: &[&Tensor<f64>], ph: usize, pw: usize) -> Result<(Tensor<T>, usize)> {
    let first = images.first().ok_or_else(|| contract_err!("empty image batch"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("image must be [C×H×W], got {shape:?}"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % ph != 0 || w % pw != 0 {
        return Err(shape_err!("image {h}×{w} not divisible into {ph}×{pw} patches"));
    }
    let (gh, gw) = (h / ph, w / pw);
    let m = gh * gw;
    let width = c * ph * pw;
    let mut out = Vec::with_capacity(images.len() * m * width);
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(shape_err!("mixed image shapes {:?} and {shape:?}", img.shape()));
        }
        let d = img.data();
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for r in 0..ph {
                        let row = (ch * h + py * ph + r) * w + px * pw;
                        out.extend(d[row..row + pw].iter().map(|&v| T::c(v)));
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[images.len() * m, width], out)?, m))
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
    pub patch_h: usize,
    pub patch_w: usize,
    pub m: usize,
}

pub struct ImageGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl ImageEncoder {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        geo: &ImageGeometry,
        dim: usize,
        heads: usize,
        blocks: usize,
    ) -> Result<Self> {
        if geo.patch_h == 0 || geo.patch_w == 0 || geo.height % geo.patch_h != 0 || geo.width % geo.patch_w != 0 {
            return Err(shape_err!(
                "image {}×{} not divisible into {}×{} patches",
                geo.height,
                geo.width,
                geo.patch_h,
                geo.patch_w
            ));
        }
        let m = (geo.height / geo.patch_h) * (geo.width / geo.patch_w);
        let patch_dim = geo.channels * geo.patch_h * geo.patch_w;
        Ok(ImageEncoder {
            patch: Linear::new(&mut b.sub("patch"), patch_dim, dim, true),
            cls: b.trunc_normal("cls", &[1, dim]),
            pos: b.trunc_normal("pos", &[m + 1, dim]),
            blocks: (0..blocks)
                .map(|i| TransformerBlock::new(&mut b.sub(&format!("block{i}")), dim, heads))
                .collect(),
            ln_post: LayerNorm::new(&mut b.sub("ln_post"), dim),
            proj: Linear::new(&mut b.sub("proj"), dim, dim, false),
            patch_h: geo.patch_h,
            patch_w: geo.patch_w,
            m,
        })
    }

    /// Patch embedding, prepended class token, positional embeddings,
    /// transformer blocks, final norm and per-token projection.
    pub fn encode<'g, T: Real>(&self, s: &Session<'g, T>, images: &[&Tensor<f64>]) -> Result<ImageTokens<'g, T>> {
        let (patches, m) = patchify::<T>(images, self.patch_h, self.patch_w)?;
        if m != self.m {
            return Err(shape_err!("encoder expects {} patches per image, got {m}", self.m));
        }
        let batch = images.len();
        let n = m + 1;
        let emb = self.patch.forward(s, s.constant(patches));
        // row 0 is the class token, row 1 + b·m + j is patch j of image b
        let all = Var::concat_rows(&[s.param(self.cls), emb]);
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..m).map(move |j| 1 + b * m + j)))
            .collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let mut x = all.select_rows(order).add(s.param(self.pos).select_rows(pos));
        for block in &self.blocks {
            x = block.forward(s, x, batch, n, None);
        }
        let x = self.proj.forward(s, self.ln_post.forward(s, x));
        Ok(ImageTokens { seq: x, batch, m })
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    pub width: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        vocab_size: usize,
        max_len: usize,
        width: usize,
        dim: usize,
        heads: usize,
        blocks: usize,
    ) -> Self {
        TextEncoder {
            token: b.trunc_normal("token", &[vocab_size, width]),
            pos: b.trunc_normal("pos", &[max_len, width]),
            blocks: (0..blocks)
                .map(|i| TransformerBlock::new(&mut b.sub(&format!("block{i}")), width, heads))
                .collect(),
            ln_final: LayerNorm::new(&mut b.sub("ln_final"), width),
            proj: Linear::new(&mut b.sub("proj"), width, dim, false),
            width,
            max_len,
        }
    }

    /// Encodes token id sequences. Where a sequence holds `[PSEUDO]`, the
    /// word embedding at that position is replaced by the matching row of
    /// `pseudo` (`[batch × width]`, one row per sequence).
    pub fn encode<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        ids: &[&TokenIds],
        pseudo: Option<Var<'g, T>>,
    ) -> Result<TextTokens<'g, T>> {
        let batch = ids.len();
        if batch == 0 {
            return Err(contract_err!("empty text batch"));
        }
        let len = ids.iter().map(|t| t.effective_len()).max().expect("non-empty");
        if len > self.max_len || ids.iter().any(|t| t.ids.len() < len) {
            return Err(shape_err!("token sequence longer than max_len {}", self.max_len));
        }
        let mut flat = Vec::with_capacity(batch * len);
        let mut mask = Vec::with_capacity(batch * len);
        let mut pseudo_rows = Vec::new();
        for (b, t) in ids.iter().enumerate() {
            for (j, &id) in t.ids[..len].iter().enumerate() {
                if id == PSEUDO && j < t.effective_len() {
                    pseudo_rows.push(b * len + j);
                }
                flat.push(id as usize);
                mask.push(j <= t.eos_index);
            }
        }
        let vocab = s.store().value(self.token).rows();
        if let Some(bad) = flat.iter().find(|&&i| i >= vocab) {
            return Err(contract_err!("token id {bad} outside vocabulary of {vocab}"));
        }
        let mut x = s.param(self.token).select_rows(flat);
        match pseudo {
            None if !pseudo_rows.is_empty() => {
                return Err(contract_err!("[PSEUDO] token present without a pseudo-word embedding"));
            }
            None => {}
            Some(p) => {
                if pseudo_rows.len() != batch || p.rows() != batch {
                    return Err(contract_err!(
                        "pseudo-word rows must match sequences: {} slots, {} sequences, {} embeddings",
                        pseudo_rows.len(),
                        batch,
                        p.rows()
                    ));
                }
                if p.cols() != self.width {
                    return Err(shape_err!("pseudo-word width {} vs {}", p.cols(), self.width));
                }
                x = x.replace_rows(p, pseudo_rows);
            }
        }
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        x = x.add(s.param(self.pos).select_rows(pos));
        let mask: Rc<[bool]> = mask.into();
        for block in &self.blocks {
            x = block.forward(s, x, batch, len, Some(mask.clone()));
        }
        let x = self.proj.forward(s, self.ln_final.forward(s, x));
        Ok(TextTokens {
            seq: x,
            batch,
            len,
            eos: ids.iter().map(|t| t.eos_index).collect(),
            mask,
        })
    }
}
