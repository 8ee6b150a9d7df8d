//! Layers built on the graph: linear maps, layer norm, multi-head
//! attention, feed-forward blocks and pre-norm transformer blocks.

use std::rc::Rc;

use rand::Rng;

use super::graph::{AttnLayout, Var};
use super::params::{trunc_normal, ParamGroup, ParamId, ParamStore, Session, INIT_STD};
use super::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const FFN_EXPANSION: usize = 4;

/// Registers parameters under a dotted path prefix.
pub struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    group: ParamGroup,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, group: ParamGroup, prefix: &str) -> Self {
        Builder {
            store,
            rng,
            group,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = self.path(name);
        Builder {
            store: self.store,
            rng: self.rng,
            group: self.group,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let path = self.path(name);
        self.store.add(path, self.group, value)
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let v = trunc_normal(shape, INIT_STD, self.rng);
        self.param(name, v)
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = b.trunc_normal("weight", &[out_dim, in_dim]);
        let bias = bias.then(|| b.param("bias", Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(s.param(self.weight), self.bias.map(|b| s.param(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize) -> Self {
        LayerNorm {
            gain: b.param("gain", Tensor::ones(&[dim])),
            bias: b.param("bias", Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(s.param(self.gain), s.param(self.bias), LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{heads} heads do not divide width {dim}");
        MultiHeadAttention {
            heads,
            head_dim: dim / heads,
            q: Linear::new(&mut b.sub("q"), dim, dim, true),
            k: Linear::new(&mut b.sub("k"), dim, dim, true),
            v: Linear::new(&mut b.sub("v"), dim, dim, true),
            o: Linear::new(&mut b.sub("o"), dim, dim, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `query` rows are grouped as `layout.groups × layout.q_len`, `kv` rows
    /// as `layout.groups × layout.k_len`. `layout.heads` is overwritten.
    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        query: Var<'g, T>,
        key: Var<'g, T>,
        value: Var<'g, T>,
        mut layout: AttnLayout,
    ) -> (Var<'g, T>, Rc<Vec<T>>) {
        layout.heads = self.heads;
        let q = self.q.forward(s, query);
        let k = self.k.forward(s, key);
        let v = self.v.forward(s, value);
        let (ctx, probs) = q.attention(k, v, layout);
        (self.o.forward(s, ctx), probs)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize) -> Self {
        FeedForward {
            fc1: Linear::new(&mut b.sub("fc1"), dim, dim * FFN_EXPANSION, true),
            fc2: Linear::new(&mut b.sub("fc2"), dim * FFN_EXPANSION, dim, true),
        }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.fc2.forward(s, self.fc1.forward(s, x).gelu())
    }
}

/// Pre-norm self-attention block: `x + attn(ln1 x)`, then `x + ffn(ln2 x)`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize, heads: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(&mut b.sub("ln1"), dim),
            attn: MultiHeadAttention::new(&mut b.sub("attn"), dim, heads),
            ln2: LayerNorm::new(&mut b.sub("ln2"), dim),
            ffn: FeedForward::new(&mut b.sub("ffn"), dim),
        }
    }

    /// `x` holds `groups × len` rows; `key_mask` marks valid positions.
    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        x: Var<'g, T>,
        groups: usize,
        len: usize,
        key_mask: Option<Rc<[bool]>>,
    ) -> Var<'g, T> {
        let layout = AttnLayout {
            groups,
            q_len: len,
            k_len: len,
            heads: self.attn.heads,
            key_mask,
        };
        let h = self.ln1.forward(s, x);
        let (a, _) = self.attn.forward(s, h, h, h, layout);
        let x = x.add(a);
        let h = self.ln2.forward(s, x);
        x.add(self.ffn.forward(s, h))
    }
}

/// Residual cross-attention, `q + attn(ln_q q, ln_kv kv, ln_kv kv)`,
/// optionally followed by a residual pre-norm feed-forward.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: Option<(LayerNorm, FeedForward)>,
}

impl CrossAttentionBlock {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize, heads: usize, with_ffn: bool) -> Self {
        let ln_q = LayerNorm::new(&mut b.sub("ln_q"), dim);
        let ln_kv = LayerNorm::new(&mut b.sub("ln_kv"), dim);
        let attn = MultiHeadAttention::new(&mut b.sub("attn"), dim, heads);
        let ffn = with_ffn.then(|| {
            (
                LayerNorm::new(&mut b.sub("ln_ffn"), dim),
                FeedForward::new(&mut b.sub("ffn"), dim),
            )
        });
        CrossAttentionBlock {
            ln_q,
            ln_kv,
            attn,
            ffn,
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        q: Var<'g, T>,
        kv: Var<'g, T>,
        layout: AttnLayout,
    ) -> (Var<'g, T>, Rc<Vec<T>>) {
        let hq = self.ln_q.forward(s, q);
        let hkv = self.ln_kv.forward(s, kv);
        let (a, probs) = self.attn.forward(s, hq, hkv, hkv, layout);
        let mut x = q.add(a);
        if let Some((ln, ffn)) = &self.ffn {
            let h = ln.forward(s, x);
            x = x.add(ffn.forward(s, h));
        }
        (x, probs)
    }
}

/// Three fully connected layers with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp3 {
            layers: [
                Linear::new(&mut b.sub("fc1"), in_dim, hidden, true),
                Linear::new(&mut b.sub("fc2"), hidden, hidden, true),
                Linear::new(&mut b.sub("fc3"), hidden, out_dim, true),
            ],
        }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let [a, b, c] = &self.layers;
        let h = a.forward(s, x).gelu();
        let h = b.forward(s, h).gelu();
        c.forward(s, h)
    }
}
