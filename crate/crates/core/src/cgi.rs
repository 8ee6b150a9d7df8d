//! Caption-guided inversion: image tokens modulated by the caption feature
//! are mapped to a pseudo-word embedding `s* = s_global + s_local`.

use rand::Rng;

use crate::encoders::ImageTokens;
use crate::error::{contract_err, shape_err, Result};
use crate::nn::layers::{Builder, CrossAttentionBlock, Mlp3};
use crate::nn::params::{normal, INIT_STD};
use crate::nn::{AttnLayout, ParamId, Real, Session, Var};

#[derive(Debug, Clone)]
pub struct Cgi {
    pub f_global: Mlp3,
    pub queries: ParamId,
    pub blocks: Vec<CrossAttentionBlock>,
    pub f_local: Mlp3,
    pub num_queries: usize,
    pub heads: usize,
}

pub struct PseudoWord<'g, T> {
    pub s_global: Var<'g, T>,
    pub s_local: Var<'g, T>,
    pub s_star: Var<'g, T>,
}

/// Multiplies every token of image `b` elementwise by row `b` of
/// `caption_global` (`[batch × d]`).
pub fn modulate<'g, T: Real>(img: &ImageTokens<'g, T>, caption_global: Var<'g, T>) -> Result<ImageTokens<'g, T>> {
    let (rows, cols) = (caption_global.rows(), caption_global.cols());
    if rows != img.batch || cols != img.seq.cols() {
        return Err(shape_err!(
            "caption features [{rows}×{cols}] vs {} images of width {}",
            img.batch,
            img.seq.cols()
        ));
    }
    let n = img.tokens_per_image();
    let spread: Vec<usize> = (0..img.batch).flat_map(|b| std::iter::repeat_n(b, n)).collect();
    Ok(ImageTokens {
        seq: img.seq.mul(caption_global.select_rows(spread)),
        ..*img
    })
}

impl Cgi {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        dim: usize,
        word_dim: usize,
        heads: usize,
        depth: usize,
        num_queries: usize,
    ) -> Result<Self> {
        if depth < 1 || num_queries < 1 {
            return Err(contract_err!("inversion needs depth >= 1 and at least one query"));
        }
        let f_global = Mlp3::new(&mut b.sub("f_global"), dim, dim, word_dim);
        let q = normal(&[num_queries, dim], INIT_STD, b.rng());
        let queries = b.param("queries", q);
        let blocks = (0..depth)
            .map(|i| CrossAttentionBlock::new(&mut b.sub(&format!("block{i}")), dim, heads, true))
            .collect();
        let f_local = Mlp3::new(&mut b.sub("f_local"), dim, dim, word_dim);
        Ok(Cgi {
            f_global,
            queries,
            blocks,
            f_local,
            num_queries,
            heads,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `[batch × d]` modulated class tokens to `[batch × d_w]`.
    pub fn invert_global<'g, T: Real>(&self, s: &Session<'g, T>, v_cls: Var<'g, T>) -> Var<'g, T> {
        self.f_global.forward(s, v_cls)
    }

    /// Learnable queries attend over each image's `m` modulated patch tokens
    /// through the stacked blocks; the outputs are averaged over queries and
    /// mapped to `[batch × d_w]`.
    pub fn invert_local<'g, T: Real>(&self, s: &Session<'g, T>, locals: Var<'g, T>, batch: usize, m: usize) -> Var<'g, T> {
        let k = self.num_queries;
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..k).collect();
        let mut q = s.param(self.queries).select_rows(tiled);
        for block in &self.blocks {
            let layout = AttnLayout {
                groups: batch,
                q_len: k,
                k_len: m,
                heads: self.heads,
                key_mask: None,
            };
            q = block.forward(s, q, locals, layout).0;
        }
        self.f_local.forward(s, q.group_mean(k))
    }

    /// Modulation, both inversion branches and their sum.
    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        img: &ImageTokens<'g, T>,
        caption_global: Var<'g, T>,
    ) -> Result<PseudoWord<'g, T>> {
        let modulated = modulate(img, caption_global)?;
        let s_global = self.invert_global(s, modulated.cls());
        let s_local = self.invert_local(s, modulated.locals(), img.batch, img.m);
        Ok(PseudoWord {
            s_global,
            s_local,
            s_star: s_global.add(s_local),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::{Graph, ParamGroup, ParamStore, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens<'g>(g: &'g Graph<f64>, batch: usize, m: usize, d: usize, rng: &mut ChaCha8Rng) -> ImageTokens<'g, f64> {
        ImageTokens {
            seq: g.constant(normal(&[batch * (m + 1), d], 1.0, rng)),
            batch,
            m,
        }
    }

    fn build(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, d: usize, dw: usize, depth: usize, k: usize) -> Cgi {
        let mut b = Builder::new(store, rng, ParamGroup::NewModule, "cgi");
        Cgi::new(&mut b, d, dw, 2, depth, k).unwrap()
    }

    fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for p in store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = normal(&shape, 0.3, rng);
        }
    }

    proptest! {
        #[test]
        fn modulation_identities(seed in any::<u64>(), batch in 1usize..4, m in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Graph::new();
            let img = tokens(&g, batch, m, 4, &mut rng);
            let ones = modulate(&img, g.constant(Tensor::ones(&[batch, 4]))).unwrap();
            let (a, b) = (ones.seq.value(), img.seq.value());
            prop_assert_eq!(a.data(), b.data());
            let zeros = modulate(&img, g.constant(Tensor::zeros(&[batch, 4]))).unwrap();
            prop_assert!(zeros.seq.value().data().iter().all(|v| *v == 0.0));
            let t = normal::<f64>(&[batch, 4], 1.0, &mut rng);
            let out = modulate(&img, g.constant(t.clone())).unwrap().seq.value();
            let v = img.seq.value();
            for b in 0..batch {
                for j in 0..=m {
                    for c in 0..4 {
                        let r = b * (m + 1) + j;
                        prop_assert_eq!(out.data()[r * 4 + c], v.data()[r * 4 + c] * t.data()[b * 4 + c]);
                    }
                }
            }
        }
    }

    #[test]
    fn modulation_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::new();
        let img = tokens(&g, 2, 3, 4, &mut rng);
        assert!(matches!(modulate(&img, g.constant(Tensor::ones(&[2, 5]))), Err(crate::Error::Shape(_))));
        assert!(matches!(modulate(&img, g.constant(Tensor::ones(&[3, 4]))), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_global_network_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cgi = build(&mut store, &mut rng, 8, 6, 1, 2);
        for p in store.iter_mut().filter(|p| p.name.starts_with("cgi.f_global")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let out = cgi.invert_global(&s, g.constant(normal(&[3, 8], 1.0, &mut rng)));
        assert_eq!(out.shape(), [3, 6]);
        assert!(out.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn depth_zero_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::NewModule, "cgi");
        assert!(matches!(Cgi::new(&mut b, 8, 8, 2, 0, 2), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn single_query_single_token_closed_form() {
        // with one key the attention weight is 1: the block is
        // q + W_o(W_v ln_kv(x) + b_v) + b_o, then the residual FFN
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cgi = build(&mut store, &mut rng, 4, 4, 1, 1);
        randomize(&mut store, &mut rng);
        let x = normal::<f64>(&[1, 4], 1.0, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let out = cgi.invert_local(&s, g.constant(x.clone()), 1, 1).value();

        let val = |name: &str| store.value(store.lookup(name).unwrap()).clone();
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|i| b.data()[i] + w.row(i).iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
        };
        let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let p = "cgi.block0.";
        let q = val("cgi.queries").data().to_vec();
        let kv = ln(x.data(), &val(&format!("{p}ln_kv.gain")), &val(&format!("{p}ln_kv.bias")));
        let v = lin(&val(&format!("{p}attn.v.weight")), &val(&format!("{p}attn.v.bias")), &kv);
        let o = lin(&val(&format!("{p}attn.o.weight")), &val(&format!("{p}attn.o.bias")), &v);
        let qc: Vec<f64> = q.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h = ln(&qc, &val(&format!("{p}ln_ffn.gain")), &val(&format!("{p}ln_ffn.bias")));
        let h: Vec<f64> = lin(&val(&format!("{p}ffn.fc1.weight")), &val(&format!("{p}ffn.fc1.bias")), &h)
            .into_iter()
            .map(gelu)
            .collect();
        let f = lin(&val(&format!("{p}ffn.fc2.weight")), &val(&format!("{p}ffn.fc2.bias")), &h);
        let pvec: Vec<f64> = qc.iter().zip(&f).map(|(a, b)| a + b).collect();
        let mut y = pvec;
        for (i, layer) in ["fc1", "fc2", "fc3"].iter().enumerate() {
            y = lin(&val(&format!("cgi.f_local.{layer}.weight")), &val(&format!("cgi.f_local.{layer}.bias")), &y);
            if i < 2 {
                y = y.into_iter().map(gelu).collect();
            }
        }
        for (a, b) in out.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn equal_queries_match_a_single_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut one = ParamStore::new();
        let c1 = build(&mut one, &mut ChaCha8Rng::seed_from_u64(7), 8, 8, 2, 1);
        let mut three = ParamStore::new();
        let c3 = build(&mut three, &mut ChaCha8Rng::seed_from_u64(7), 8, 8, 2, 3);
        let row = one.value(c1.queries).clone();
        for (name, id) in one.sorted().collect::<Vec<_>>() {
            if name != "cgi.queries" {
                three.set(name, one.value(id).clone()).unwrap();
            }
        }
        let tiled = Tensor::from_rows(&vec![row.row(0).to_vec(); 3]).unwrap();
        three.set("cgi.queries", tiled).unwrap();
        let g = Graph::new();
        let locals = g.constant(normal(&[2 * 5, 8], 1.0, &mut rng));
        let a = c1.invert_local(&Session::new(&g, &one), locals, 2, 5).value();
        let b = c3.invert_local(&Session::new(&g, &three), locals, 2, 5).value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_word_is_the_sum_and_depends_on_the_caption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cgi = build(&mut store, &mut rng, 64, 64, 1, 2);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let img = tokens(&g, 2, 8, 64, &mut rng);
        let t1 = g.constant(normal(&[2, 64], 1.0, &mut rng));
        let t2 = g.constant(normal(&[2, 64], 1.0, &mut rng));
        let p1 = cgi.forward(&s, &img, t1).unwrap();
        assert_eq!(p1.s_star.shape(), [2, 64]);
        let (sg, sl, ss) = (p1.s_global.value(), p1.s_local.value(), p1.s_star.value());
        for i in 0..ss.numel() {
            assert_eq!(ss.data()[i], sg.data()[i] + sl.data()[i]);
        }
        let p2 = cgi.forward(&s, &img, t2).unwrap();
        assert_ne!(p1.s_star.value().data(), p2.s_star.value().data());
    }

    #[test]
    fn gradients_reach_queries_and_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cgi = build(&mut store, &mut rng, 8, 6, 2, 2);
        randomize(&mut store, &mut rng);
        let img_v = normal::<f64>(&[2 * 3, 8], 1.0, &mut rng);
        let cap = normal::<f64>(&[2, 8], 1.0, &mut rng);
        let target = normal::<f64>(&[2, 6], 1.0, &mut rng);
        let report = check_params(&mut store, 5, &mut rng, |s| {
            let img = ImageTokens {
                seq: s.constant(img_v.clone()),
                batch: 2,
                m: 2,
            };
            let p = cgi.forward(s, &img, s.constant(cap.clone()))?;
            Ok(p.s_star.mul(s.constant(target.clone())).sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");

        let g = Graph::new();
        let s = Session::new(&g, &store);
        let img = ImageTokens {
            seq: s.constant(img_v.clone()),
            batch: 2,
            m: 2,
        };
        let p = cgi.forward(&s, &img, s.constant(cap.clone())).unwrap();
        let l = p.s_star.mul(s.constant(target.clone())).sum();
        let mut grads = g.backward(l).unwrap();
        let qg = s.param_grads(&mut grads)[cgi.queries.0].clone().unwrap();
        assert!(qg.data().iter().any(|v| v.abs() > 1e-8));
    }
}
