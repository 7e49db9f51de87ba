//! Label-smoothed negative log-likelihood over token logits.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Mean over unmasked positions of
/// `-[(1-eps) * log p(target) + (eps/K) * sum_k log p(k)]`.
///
/// `ignore` marks positions excluded from the loss; `None` keeps all.
/// Differentiable with respect to the logits.
pub fn label_smoothed_nll(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    ignore: Option<&[bool]>,
) -> Result<Var> {
    let (t_len, k) = {
        let t = g.value(logits);
        (t.rows(), t.cols())
    };
    if !(0.0..1.0).contains(&epsilon) {
        return Err(AutodiffError::InvalidArgument {
            op: "label_smoothed_nll",
            detail: format!("epsilon must be in [0, 1), got {epsilon}"),
        });
    }
    if targets.len() != t_len {
        return Err(AutodiffError::ShapeMismatch {
            op: "label_smoothed_nll",
            detail: format!("{} targets for {} logit rows", targets.len(), t_len),
        });
    }
    let active: Vec<bool> = match ignore {
        Some(m) => {
            if m.len() != t_len {
                return Err(AutodiffError::ShapeMismatch {
                    op: "label_smoothed_nll",
                    detail: "ignore mask length mismatch".into(),
                });
            }
            m.iter().map(|&x| !x).collect()
        }
        None => vec![true; t_len],
    };
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "label_smoothed_nll",
            detail: "all positions masked".into(),
        });
    }

    // Target-weight matrix: smoothed one-hot per active row, scaled so a
    // plain weighted sum over log-probabilities is the mean loss.
    let mut w = vec![0.0; t_len * k];
    for (t, (&y, &a)) in targets.iter().zip(&active).enumerate() {
        if y >= k {
            return Err(AutodiffError::IndexOutOfRange {
                op: "label_smoothed_nll",
                detail: format!("target {} out of vocabulary {}", y, k),
            });
        }
        if !a {
            continue;
        }
        let s = 1.0 / n_active as f64;
        for wk in &mut w[t * k..(t + 1) * k] {
            *wk = s * epsilon / k as f64;
        }
        w[t * k + y] += s * (1.0 - epsilon);
    }

    let logp = g.log_softmax_rows(logits)?;
    let wc = g.constant(Tensor::matrix(t_len, k, w)?)?;
    let weighted = g.mul(logp, wc)?;
    let total = g.sum_all(weighted)?;
    g.scale(total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fdcheck::{central_difference, max_rel_error};
    use crate::autodiff::ParamStore;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(3, 4, vec![0.0; 12]).unwrap()).unwrap();
        for eps in [0.0, 0.1, 0.2] {
            let loss = label_smoothed_nll(&mut g, logits, &[0, 3, 2], eps, None).unwrap();
            assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epsilon_is_plain_nll() {
        let logits_data = vec![2.0, 0.0, -1.0, 0.5, 1.0, 0.0];
        let targets = [1usize, 0];
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 3, logits_data.clone()).unwrap()).unwrap();
        let loss = label_smoothed_nll(&mut g, logits, &targets, 0.0, None).unwrap();

        // independent scalar NLL
        let mut expect = 0.0;
        for (row, &y) in logits_data.chunks(3).zip(&targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            expect += -(row[y] - lse);
        }
        expect /= 2.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_closed_form_scalar_oracle() {
        // K=2, logits (2, 0), target 0, eps=0.2.
        let (z0, z1, eps) = (2.0f64, 0.0f64, 0.2f64);
        let lse = (z0.exp() + z1.exp()).ln();
        let (lp0, lp1) = (z0 - lse, z1 - lse);
        let expect = -((1.0 - eps) * lp0 + eps / 2.0 * (lp0 + lp1));

        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 2, vec![z0, z1]).unwrap()).unwrap();
        let loss = label_smoothed_nll(&mut g, logits, &[0], eps, None).unwrap();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_target_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        assert!(label_smoothed_nll(&mut g, logits, &[3], 0.1, None).is_err());
    }

    #[test]
    fn all_masked_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        assert!(label_smoothed_nll(&mut g, logits, &[0, 1], 0.1, Some(&[true, true])).is_err());
    }

    #[test]
    fn mlp_loss_matches_finite_differences() {
        // 2-layer perceptron, gradient w.r.t. both weight matrices.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (din, dh, k, t) = (4, 5, 3, 2);
        let x_data: Vec<f64> = (0..t * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1_data: Vec<f64> = (0..din * dh).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let w2_data: Vec<f64> = (0..dh * k).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let targets = [2usize, 0];

        let eval = |w: &[f64]| -> f64 {
            let (w1, w2) = w.split_at(din * dh);
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(t, din, x_data.clone()).unwrap()).unwrap();
            let w1v = g.input(Tensor::matrix(din, dh, w1.to_vec()).unwrap()).unwrap();
            let w2v = g.input(Tensor::matrix(dh, k, w2.to_vec()).unwrap()).unwrap();
            let h = g.matmul(x, w1v, false, false).unwrap();
            let h = g.gelu(h).unwrap();
            let logits = g.matmul(h, w2v, false, false).unwrap();
            let loss = label_smoothed_nll(&mut g, logits, &targets, 0.2, None).unwrap();
            g.value(loss).item()
        };

        let point: Vec<f64> = w1_data.iter().chain(&w2_data).cloned().collect();
        let fd = central_difference(&eval, &point, 1e-5);

        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(t, din, x_data.clone()).unwrap()).unwrap();
        let w1v = g.input(Tensor::matrix(din, dh, w1_data.clone()).unwrap()).unwrap();
        let w2v = g.input(Tensor::matrix(dh, k, w2_data.clone()).unwrap()).unwrap();
        let h = g.matmul(x, w1v, false, false).unwrap();
        let h = g.gelu(h).unwrap();
        let logits = g.matmul(h, w2v, false, false).unwrap();
        let loss = label_smoothed_nll(&mut g, logits, &targets, 0.2, None).unwrap();
        let mut s = ParamStore::new();
        g.backward(loss, &mut s).unwrap();

        let mut ad = g.leaf_grad(w1v).unwrap().to_vec();
        ad.extend_from_slice(g.leaf_grad(w2v).unwrap());
        assert!(max_rel_error(&ad, &fd) <= 1e-4);
    }
}
