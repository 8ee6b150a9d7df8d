//! Training objectives: supervised image/text contrastive losses, identity
//! cross-entropy with label smoothing and batch-hard triplet loss.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Real, Tensor, Var};

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_t2i: f64,
    pub l_i2t: f64,
}

impl LossBundle {
    pub fn l_con(&self) -> f64 {
        self.l_t2i + self.l_i2t
    }

    pub fn total(&self) -> f64 {
        self.l_id + self.l_tri + self.l_con()
    }
}

/// `S[i][j] = x̂_i · ŷ_j / τ` over L2-normalized rows.
pub fn similarity<'g, T: Real>(x: Var<'g, T>, y: Var<'g, T>, temperature: f64) -> Var<'g, T> {
    x.l2_normalize()
        .matmul_nt(y.l2_normalize())
        .scale(T::c(1.0 / temperature))
}

/// Mean over anchors `i` of the mean over positives `p` (same identity,
/// including `i` itself) of `−log softmax_k(S[i][k])[p]`.
pub fn supervised_contrastive<'g, T: Real>(sim: Var<'g, T>, ids: &[u32]) -> Result<Var<'g, T>> {
    let b = ids.len();
    if sim.shape() != [b, b] {
        return Err(shape_err!("similarity {:?} for {b} labels", sim.shape()));
    }
    let mut w = vec![T::zero(); b * b];
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| ids[j] == ids[i]).collect();
        let share = T::c(1.0 / (b * pos.len()) as f64);
        for j in pos {
            w[i * b + j] = share;
        }
    }
    let w = sim.graph().constant(Tensor::new(&[b, b], w)?);
    Ok(sim.log_softmax().mul(w).sum().scale(-T::one()))
}

/// Text anchors against image candidates.
pub fn contrastive_t2i<'g, T: Real>(text: Var<'g, T>, image: Var<'g, T>, ids: &[u32], temperature: f64) -> Result<Var<'g, T>> {
    supervised_contrastive(similarity(text, image, temperature), ids)
}

/// Image anchors against text candidates.
pub fn contrastive_i2t<'g, T: Real>(image: Var<'g, T>, text: Var<'g, T>, ids: &[u32], temperature: f64) -> Result<Var<'g, T>> {
    supervised_contrastive(similarity(image, text, temperature), ids)
}

/// Cross-entropy against `(1−ε)·onehot + ε/C`, averaged over the batch.
pub fn id_loss<'g, T: Real>(logits: Var<'g, T>, labels: &[usize], smoothing: f64) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!("logits {shape:?} for {} labels", labels.len()));
    }
    let c = shape[1];
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(contract_err!("label {bad} outside {c} classes"));
    }
    let b = labels.len();
    let off = smoothing / c as f64;
    let mut q = vec![T::c(off / b as f64); b * c];
    for (i, &l) in labels.iter().enumerate() {
        q[i * c + l] = T::c((1.0 - smoothing + off) / b as f64);
    }
    let q = logits.graph().constant(Tensor::new(&[b, c], q)?);
    Ok(logits.log_softmax().mul(q).sum().scale(-T::one()))
}

/// Batch-hard triplet loss: per anchor the farthest positive and nearest
/// negative (Euclidean), `mean(max(d_p − d_n + α, 0))`.
pub fn triplet_loss<'g, T: Real>(features: Var<'g, T>, ids: &[u32], margin: f64) -> Result<Var<'g, T>> {
    let b = ids.len();
    if features.rows() != b {
        return Err(shape_err!("{} feature rows for {b} labels", features.rows()));
    }
    let dist = features.pairwise_dist();
    let d = dist.value();
    if let Some(v) = d.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "triplet distance {v:?} from {}",
            features.graph().first_non_finite().unwrap_or_else(|| "features".into())
        )));
    }
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for i in 0..b {
        let row = d.row(i);
        let p = (0..b)
            .filter(|&j| j != i && ids[j] == ids[i])
            .max_by(|&x, &y| row[x].partial_cmp(&row[y]).expect("finite distances").then(y.cmp(&x)));
        let n = (0..b)
            .filter(|&j| ids[j] != ids[i])
            .min_by(|&x, &y| row[x].partial_cmp(&row[y]).expect("finite distances").then(x.cmp(&y)));
        match (p, n) {
            (Some(p), Some(n)) => {
                pos.push(i * b + p);
                neg.push(i * b + n);
            }
            _ => {
                return Err(contract_err!(
                    "triplet anchor {i} (identity {}) lacks a positive or a negative",
                    ids[i]
                ))
            }
        }
    }
    let m = dist.graph().constant(Tensor::full(&[b], T::c(margin)));
    Ok(dist.gather(pos).sub(dist.gather(neg)).add(m).relu().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::normal;
    use crate::nn::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_sample_contrastive_is_zero() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = contrastive_t2i(x, x, &[0], 1.0).unwrap();
        assert!(l.value().item().abs() < 1e-15);
    }

    #[test]
    fn uniform_similarities_give_log_b() {
        let g = Graph::new();
        let sim = g.constant(Tensor::<f64>::full(&[4, 4], 0.3));
        let l = supervised_contrastive(sim, &[0, 1, 2, 3]).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_inputs_give_equal_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::new();
        let x = g.constant(normal::<f64>(&[6, 4], 1.0, &mut rng));
        let ids = [0, 0, 1, 1, 2, 2];
        let a = contrastive_t2i(x, x, &ids, 1.0).unwrap().value().item();
        let b = contrastive_i2t(x, x, &ids, 1.0).unwrap().value().item();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }

    #[test]
    fn id_loss_closed_forms() {
        let g = Graph::new();
        let uniform = g.constant(Tensor::<f64>::zeros(&[2, 5]));
        let l = id_loss(uniform, &[1, 3], 0.0).unwrap().value().item();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let sharp = g.constant(Tensor::new(&[1, 3], vec![0.0, 60.0, 0.0]).unwrap());
        assert!(id_loss(sharp, &[1], 0.0).unwrap().value().item() < 1e-20);
        // ε = 0.1, C = 4, hand formula
        let logits = [0.5, -1.0, 2.0, 0.25];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let q = [0.025, 0.025, 0.925, 0.025];
        let expect: f64 = -(0..4).map(|k| q[k] * (logits[k].exp() / z).ln()).sum::<f64>();
        let v = g.constant(Tensor::new(&[1, 4], logits.to_vec()).unwrap());
        let got = id_loss(v, &[2], 0.1).unwrap().value().item();
        assert!((got - expect).abs() < 1e-12);
        assert!(matches!(id_loss(v, &[4], 0.1), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn triplet_hinge_cases() {
        // rectangle: every anchor's farthest positive is dp away and its
        // nearest negative dn away
        let case = |dp: f64, dn: f64| {
            let g = Graph::new();
            let f = g.constant(Tensor::new(&[4, 2], vec![0.0, 0.0, dp, 0.0, 0.0, dn, dp, dn]).unwrap());
            triplet_loss(f, &[0, 0, 1, 1], 0.3).unwrap().value().item()
        };
        assert!(case(0.2, 0.5).abs() < 1e-9);
        assert!((case(0.5, 0.2) - 0.6).abs() < 1e-9);
    }

    #[test]
    fn triplet_zero_region_and_preconditions() {
        let g = Graph::new();
        let f = g.constant(Tensor::new(&[4, 1], vec![0.0, 0.1, 5.0, 5.1]).unwrap());
        assert_eq!(triplet_loss(f, &[0, 0, 1, 1], 0.3).unwrap().value().item(), 0.0);
        assert!(triplet_loss(f, &[0, 1, 2, 2], 0.3).is_err());
        assert!(triplet_loss(f, &[0, 0, 0, 0], 0.3).is_err());
    }

    #[test]
    fn bundle_sums() {
        let b = LossBundle {
            l_id: 1.0,
            l_tri: 0.5,
            l_t2i: 0.125,
            l_i2t: 0.125,
        };
        assert_eq!(b.l_con(), 0.25);
        assert_eq!(b.total(), 1.75);
        assert_eq!(LossBundle::default().total(), 0.0);
    }
}
