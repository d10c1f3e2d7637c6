//! Cell-patch alignment objectives and the image-text contrastive loss.

use super::tensor::{dot, softmax_in_place, TokenMatrix};
use super::AlignError;

/// A scalar loss with gradients for each of its two token-block inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_a: TokenMatrix,
    pub grad_b: TokenMatrix,
}

fn check_same_shape(what: &str, a: &TokenMatrix, b: &TokenMatrix) -> Result<(), AlignError> {
    if a.shape() != b.shape() {
        return Err(AlignError::ShapeMismatch {
            what: what.into(),
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(())
}

/// `‖(1/N) Σᵢ (Vpⁱ − Vcⁱ)‖`: distance between the mean patch token and the mean cell token.
///
/// At zero the subgradient is taken as zero.
pub fn loss_global(patch: &TokenMatrix, cell: &TokenMatrix) -> Result<LossValue, AlignError> {
    check_same_shape("global alignment tokens", patch, cell)?;
    let n = patch.rows();
    let mp = patch.mean_row();
    let mc = cell.mean_row();
    let diff: Vec<f64> = mp.iter().zip(&mc).map(|(a, b)| a - b).collect();
    let value = dot(&diff, &diff).sqrt();

    let mut grad_a = TokenMatrix::zeros(n, patch.cols());
    if value > 0.0 {
        let coef = 1.0 / (n as f64 * value);
        for i in 0..n {
            for (g, v) in grad_a.row_mut(i).iter_mut().zip(&diff) {
                *g = v * coef;
            }
        }
    }
    let grad_b = grad_a.scaled(-1.0);
    Ok(LossValue { value, grad_a, grad_b })
}

/// Token-level contrastive loss: each patch token `i` should score its own
/// cell token `i` above the other cell tokens `j` of the same pair.
pub fn loss_local(patch: &TokenMatrix, cell: &TokenMatrix) -> Result<LossValue, AlignError> {
    check_same_shape("local alignment tokens", patch, cell)?;
    let n = patch.rows();
    let mut probs = patch.matmul_t(cell);
    let mut value = 0.0;
    for i in 0..n {
        let target = probs[(i, i)];
        let log_z = softmax_in_place(probs.row_mut(i));
        value += log_z - target;
    }
    value /= n as f64;

    // dL/dlogits = (P − I) / N
    for i in 0..n {
        probs[(i, i)] -= 1.0;
    }
    probs.scale(1.0 / n as f64);
    let grad_a = probs.matmul(cell);
    let grad_b = probs.t_matmul(patch);
    Ok(LossValue {
        value: value.max(0.0),
        grad_a,
        grad_b,
    })
}

/// Symmetric InfoNCE over the `B × B` cosine-similarity matrix of pooled
/// image and text embeddings, divided by `temperature`.
pub fn loss_itc(image: &TokenMatrix, text: &TokenMatrix, temperature: f64) -> Result<LossValue, AlignError> {
    check_same_shape("contrastive batch", image, text)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AlignError::Temperature(temperature));
    }
    let b = image.rows();
    let (u, u_norms) = normalize_rows(image, "image")?;
    let (v, v_norms) = normalize_rows(text, "text")?;
    let logits = u.matmul_t(&v).scaled(1.0 / temperature);

    let mut row_p = logits.clone();
    let mut col_p = logits.transpose();
    let mut value = 0.0;
    for i in 0..b {
        let lz_r = softmax_in_place(row_p.row_mut(i));
        let lz_c = softmax_in_place(col_p.row_mut(i));
        value += (lz_r - logits[(i, i)]) + (lz_c - logits[(i, i)]);
    }
    value /= 2.0 * b as f64;

    // dL/dlogits = ((P_row − I) + (P_colᵀ − I)) / 2B
    let mut grad_logits = row_p;
    grad_logits.add_assign(&col_p.transpose());
    for i in 0..b {
        grad_logits[(i, i)] -= 2.0;
    }
    grad_logits.scale(1.0 / (2.0 * b as f64 * temperature));
    let grad_u = grad_logits.matmul(&v);
    let grad_v = grad_logits.t_matmul(&u);
    Ok(LossValue {
        value: value.max(0.0),
        grad_a: backprop_normalize(&u, &u_norms, &grad_u),
        grad_b: backprop_normalize(&v, &v_norms, &grad_v),
    })
}

fn normalize_rows(m: &TokenMatrix, which: &str) -> Result<(TokenMatrix, Vec<f64>), AlignError> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if norm == 0.0 {
            return Err(AlignError::ZeroNorm {
                which: which.into(),
                row: i,
            });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Gradient through `u = x / ‖x‖`: `(g − u (u·g)) / ‖x‖`.
fn backprop_normalize(unit: &TokenMatrix, norms: &[f64], grad_unit: &TokenMatrix) -> TokenMatrix {
    let mut out = grad_unit.clone();
    for (i, norm) in norms.iter().enumerate() {
        let proj = dot(unit.row(i), grad_unit.row(i));
        for (o, u) in out.row_mut(i).iter_mut().zip(unit.row(i)) {
            *o = (*o - u * proj) / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn global_zero_when_equal() {
        let a = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let l = loss_global(&a, &a).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_a.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn global_single_token_norm() {
        let l = loss_global(&m(&[&[3.0, 4.0]]), &m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(l.value, 5.0);
    }

    #[test]
    fn local_single_token_is_zero() {
        let l = loss_local(&m(&[&[0.3, -2.0]]), &m(&[&[5.0, 1.0]])).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn local_equal_tokens_give_ln_n() {
        let row: &[f64] = &[0.4, -0.2, 1.1];
        let a = m(&[row, row, row, row]);
        let l = loss_local(&a, &a).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn local_orthonormal_pair() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = loss_local(&a, &a).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn itc_cases() {
        let one = loss_itc(&m(&[&[1.0, 2.0]]), &m(&[&[-3.0, 0.5]]), 0.07).unwrap();
        assert_eq!(one.value, 0.0);

        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = loss_itc(&a, &a, 1.0).unwrap();
        assert!((l.value - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);

        assert!(matches!(loss_itc(&a, &a, 0.0), Err(AlignError::Temperature(_))));
        let z = m(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(loss_itc(&z, &a, 1.0), Err(AlignError::ZeroNorm { row: 0, .. })));
    }

    #[test]
    fn itc_batch_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = TokenMatrix::random_normal(5, 4, 1.0, &mut rng);
        let txt = TokenMatrix::random_normal(5, 4, 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let a = loss_itc(&img, &txt, 0.5).unwrap().value;
        let b = loss_itc(&img.permute_rows(&perm), &txt.permute_rows(&perm), 0.5).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = TokenMatrix::zeros(2, 3);
        let b = TokenMatrix::zeros(3, 3);
        assert!(loss_global(&a, &b).is_err());
        assert!(loss_local(&a, &b).is_err());
    }
}
