//! Contextual feature fusion: text tokens query the image tokens through
//! cross-attention, followed by self-attention blocks over the text
//! positions. The `[EOS]` row of the result is the fused feature.

use std::rc::Rc;

use rand::Rng;

use crate::config::FuseMode;
use crate::encoders::{global_rows, ImageTokens, TextTokens};
use crate::error::{shape_err, Result};
use crate::nn::layers::{Builder, CrossAttentionBlock, LayerNorm, TransformerBlock};
use crate::nn::{AttnLayout, Real, Session, Var};

#[derive(Debug, Clone)]
pub struct Cff {
    pub cross: CrossAttentionBlock,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub mode: FuseMode,
    pub heads: usize,
    /// Image tokens query the text instead (ablation arm).
    pub image_queries: bool,
}

pub struct Fused<'g, T> {
    /// `[batch·len × d]`, `len` being the query length.
    pub seq: Var<'g, T>,
    pub global: Var<'g, T>,
    pub len: usize,
    /// Cross-attention weights, `[batch × heads × len × keys]`.
    pub attention: Rc<Vec<T>>,
}

impl Cff {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        dim: usize,
        heads: usize,
        blocks: usize,
        mode: FuseMode,
        image_queries: bool,
    ) -> Self {
        Cff {
            cross: CrossAttentionBlock::new(&mut b.sub("cross"), dim, heads, false),
            blocks: (0..blocks)
                .map(|i| TransformerBlock::new(&mut b.sub(&format!("block{i}")), dim, heads))
                .collect(),
            ln: LayerNorm::new(&mut b.sub("ln"), dim),
            mode,
            heads,
            image_queries,
        }
    }

    /// Image key/value rows for the configured mode, with their count per
    /// image.
    fn image_side<'g, T: Real>(&self, img: &ImageTokens<'g, T>) -> (Var<'g, T>, usize) {
        match self.mode {
            FuseMode::ClsOnly => (img.cls(), 1),
            FuseMode::AllTokens => (img.seq, img.tokens_per_image()),
        }
    }

    pub fn fuse<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        text: &TextTokens<'g, T>,
        img: &ImageTokens<'g, T>,
    ) -> Result<Fused<'g, T>> {
        if text.batch != img.batch || text.seq.cols() != img.seq.cols() {
            return Err(shape_err!(
                "fusion of {} texts of width {} with {} images of width {}",
                text.batch,
                text.seq.cols(),
                img.batch,
                img.seq.cols()
            ));
        }
        let batch = img.batch;
        let (image, n_img) = self.image_side(img);
        let (q, kv, q_len, k_len, q_mask, k_mask) = if self.image_queries {
            (image, text.seq, n_img, text.len, None, Some(text.mask.clone()))
        } else {
            (text.seq, image, text.len, n_img, Some(text.mask.clone()), None)
        };
        let layout = AttnLayout {
            groups: batch,
            q_len,
            k_len,
            heads: self.heads,
            key_mask: k_mask,
        };
        let (mut x, attention) = self.cross.forward(s, q, kv, layout);
        for block in &self.blocks {
            x = block.forward(s, x, batch, q_len, q_mask.clone());
        }
        let x = self.ln.forward(s, x);
        let global = if self.image_queries {
            global_rows(x, q_len, &vec![0; batch])
        } else {
            global_rows(x, q_len, &text.eos)
        };
        Ok(Fused {
            seq: x,
            global,
            len: q_len,
            attention,
        })
    }
}
