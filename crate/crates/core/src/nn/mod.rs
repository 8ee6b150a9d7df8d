//! Minimal neural-network substrate: tensors, reverse-mode differentiation,
//! layers, Adam and the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use graph::{AttnLayout, Gradients, Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore, Session};
pub use tensor::{DType, Real, Tensor};

use crate::error::{shape_err, Result};

/// Single-head `softmax(Q·Kᵀ/√d)·V` for `Q: [n_q×d]`, `K, V: [n_k×d]`.
/// Returns the output and the `[n_q × n_k]` attention weights.
pub fn scaled_dot_attention<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
) -> Result<(Var<'g, T>, Tensor<T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(shape_err!("attention expects matrices, got {qs:?} {ks:?} {vs:?}"));
    }
    if qs[1] != ks[1] || ks[1] != vs[1] {
        return Err(shape_err!("attention trailing dims differ: {qs:?} {ks:?} {vs:?}"));
    }
    if ks[0] != vs[0] {
        return Err(shape_err!("key/value lengths differ: {ks:?} vs {vs:?}"));
    }
    let (out, probs) = q.attention(k, v, AttnLayout::single(qs[0], ks[0]));
    let weights = Tensor::new(&[qs[0], ks[0]], probs.to_vec())?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        params::normal(shape, 1.0, rng)
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::new();
        let v = rand_t(&[1, 4], &mut rng);
        let (out, w) = scaled_dot_attention(
            g.constant(rand_t(&[1, 4], &mut rng)),
            g.constant(rand_t(&[1, 4], &mut rng)),
            g.constant(v.clone()),
        )
        .unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(*out.value(), v);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let v = rand_t(&[3, 4], &mut rng);
        let (out, w) = scaled_dot_attention(
            g.constant(Tensor::zeros(&[2, 4])),
            g.constant(rand_t(&[3, 4], &mut rng)),
            g.constant(v.clone()),
        )
        .unwrap();
        for p in w.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        for i in 0..2 {
            for c in 0..4 {
                let mean = (0..3).map(|j| v.data()[j * 4 + c]).sum::<f64>() / 3.0;
                assert!((out.value().data()[i * 4 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_t(&[2, 4], &mut rng), rand_t(&[3, 4], &mut rng), rand_t(&[3, 4], &mut rng));
        let g = Graph::new();
        let (out, _) =
            scaled_dot_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())).unwrap();
        for i in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.data()[i * 4 + c] * k.data()[j * 4 + c]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += logits[j].exp() / z * v.data()[j * 4 + c];
                }
                assert!((out.value().data()[i * 4 + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_widths_are_shape_errors() {
        let g = Graph::new();
        let r = scaled_dot_attention(
            g.constant(Tensor::<f64>::zeros(&[1, 4])),
            g.constant(Tensor::zeros(&[2, 3])),
            g.constant(Tensor::zeros(&[2, 4])),
        );
        assert!(matches!(r, Err(crate::Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn attention_rows_are_stochastic(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..6, heads in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4 * heads;
            let g = Graph::new();
            let q = g.constant(params::normal(&[2 * nq, d], 3.0, &mut rng));
            let k = g.constant(params::normal(&[2 * nk, d], 3.0, &mut rng));
            let v = g.constant(params::normal(&[2 * nk, d], 1.0, &mut rng));
            let layout = AttnLayout { groups: 2, q_len: nq, k_len: nk, heads, key_mask: None };
            let (_, probs) = q.attention(k, v, layout);
            for row in probs.chunks(nk) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }
}
