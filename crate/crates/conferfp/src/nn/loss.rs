//! Classification losses with analytic logit gradients.

use ndarray::Array2;

/// Row-wise stable softmax.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f32 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy against hard targets.
/// Returns `(loss, dloss/dlogits)` with the 1/B factor folded in.
pub fn cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f32, Array2<f32>) {
    let b = logits.nrows();
    assert_eq!(b, targets.len());
    let log_p = log_softmax(logits);
    let mut loss = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        loss -= log_p[[i, t]] as f64;
    }
    let mut grad = softmax(logits);
    for (i, &t) in targets.iter().enumerate() {
        grad[[i, t]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / b as f32);
    ((loss / b as f64) as f32, grad)
}

/// Mean KL(teacher || student) where `teacher` holds probability rows and
/// the student is given by `logits`. Returns `(loss, dloss/dlogits)`; the
/// gradient is `(softmax(logits) - teacher) / B`.
pub fn distillation_kl(logits: &Array2<f32>, teacher: &Array2<f32>) -> (f32, Array2<f32>) {
    let b = logits.nrows();
    assert_eq!(logits.dim(), teacher.dim());
    let log_q = log_softmax(logits);
    let mut loss = 0.0f64;
    for (p_row, lq_row) in teacher.rows().into_iter().zip(log_q.rows()) {
        for (&p, &lq) in p_row.iter().zip(lq_row.iter()) {
            if p > 0.0 {
                loss += p as f64 * (p.max(1e-12).ln() as f64 - lq as f64);
            }
        }
    }
    let mut grad = softmax(logits);
    grad -= teacher;
    grad.mapv_inplace(|v| v / b as f32);
    ((loss / b as f64) as f32, grad)
}

/// Targeted margin loss `mean(max(0, max_{i != t} z_i - z_t))`; driving it
/// to zero makes `t` the top class. Subgradient at the kink is zero.
pub fn cw_margin(logits: &Array2<f32>, targets: &[usize]) -> (f32, Array2<f32>) {
    let b = logits.nrows();
    assert_eq!(b, targets.len());
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let mut best = f32::NEG_INFINITY;
        let mut best_j = 0;
        for (j, &v) in row.iter().enumerate() {
            if j != t && v > best {
                best = v;
                best_j = j;
            }
        }
        let margin = best - row[t];
        if margin > 0.0 {
            loss += margin as f64;
            grad[[i, best_j]] = 1.0 / b as f32;
            grad[[i, t]] = -1.0 / b as f32;
        }
    }
    ((loss / b as f64) as f32, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = array![[1.0f32, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax(&l);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let l = array![[0.3f32, -0.7, 1.2], [2.0, 0.1, -1.0]];
        let t = [2usize, 0];
        let (_, grad) = cross_entropy(&l, &t);
        let eps = 1e-3f32;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = l.clone();
                let mut lm = l.clone();
                lp[[i, j]] += eps;
                lm[[i, j]] -= eps;
                let fd = (cross_entropy(&lp, &t).0 - cross_entropy(&lm, &t).0) / (2.0 * eps);
                assert!((fd - grad[[i, j]]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn distillation_kl_zero_when_student_matches_teacher() {
        let l = array![[0.5f32, 1.5, -0.3]];
        let teacher = softmax(&l);
        let (loss, grad) = distillation_kl(&l, &teacher);
        assert!(loss.abs() < 1e-6);
        assert!(grad.iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn cw_margin_zero_when_target_dominates() {
        let l = array![[5.0f32, 0.0, 0.0]];
        let (loss, grad) = cw_margin(&l, &[0]);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let (loss2, _) = cw_margin(&l, &[1]);
        assert!((loss2 - 5.0).abs() < 1e-6);
    }
}
