//! Masked next-token cross-entropy with a per-column decomposition.
//!
//! A token at `(b, t)` with `target_mask` set is predicted from the logits at
//! `(b, t-1)`; its loss is attributed to the column the target token belongs
//! to. Accumulation is in f64 regardless of the model's element type, so the
//! token-weighted recombination of per-column losses equals the total to
//! near machine precision.

use ndarray::Array2;

use super::scalar::Scalar;
use super::{Batch, LossBreakdown, ModelError};

pub(super) fn ce_and_grad<F: Scalar>(
    logits: &Array2<F>,
    batch: &Batch,
    n_columns: usize,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<F>>), ModelError> {
    let (b_sz, t_len) = batch.tokens.dim();
    let vocab = logits.dim().1;

    let n_masked = batch
        .target_mask
        .iter()
        .zip(batch.pad.iter())
        .filter(|(&m, &p)| m && !p)
        .count();
    if n_masked == 0 {
        return Err(ModelError::NoSupervisedTokens);
    }
    let inv_n = 1.0 / n_masked as f64;

    let mut sum = 0.0f64;
    let mut col_sums = vec![0.0f64; n_columns];
    let mut col_tokens = vec![0usize; n_columns];
    let mut dlogits = want_grad.then(|| Array2::<F>::zeros(logits.dim()));

    let mut row_f64 = vec![0.0f64; vocab];
    for b in 0..b_sz {
        for t in 1..t_len {
            if !batch.target_mask[[b, t]] || batch.pad[[b, t]] {
                continue;
            }
            let target = batch.tokens[[b, t]];
            let pred_row = b * t_len + t - 1;
            for (dst, &z) in row_f64.iter_mut().zip(logits.row(pred_row)) {
                *dst = z.as_f64();
            }
            let max = row_f64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row_f64.iter().map(|z| (z - max).exp()).sum();
            let lse = max + denom.ln();
            let li = lse - row_f64[target];

            sum += li;
            let col = batch.column_ids[[b, t]];
            col_sums[col] += li;
            col_tokens[col] += 1;

            if let Some(d) = dlogits.as_mut() {
                for (j, &z) in row_f64.iter().enumerate() {
                    let mut p = (z - lse).exp();
                    if j == target {
                        p -= 1.0;
                    }
                    d[[pred_row, j]] = F::of_f64(p * inv_n);
                }
            }
        }
    }

    let per_column = col_sums
        .iter()
        .zip(&col_tokens)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    Ok((
        LossBreakdown {
            total: sum * inv_n,
            per_column,
            column_tokens: col_tokens,
            total_tokens: n_masked,
        },
        dlogits,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch_of(tokens: Vec<usize>, cols: Vec<usize>, t_len: usize) -> Batch {
        let b = tokens.len() / t_len;
        let mut mask = Array2::from_elem((b, t_len), true);
        for bi in 0..b {
            mask[[bi, 0]] = false;
        }
        Batch {
            tokens: Array2::from_shape_vec((b, t_len), tokens).unwrap(),
            column_ids: Array2::from_shape_vec((b, t_len), cols).unwrap(),
            target_mask: mask,
            pad: Array2::from_elem((b, t_len), false),
        }
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let vocab = 50;
        let t_len = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens: Vec<usize> = (0..4 * t_len).map(|_| rng.random_range(0..vocab)).collect();
        let batch = batch_of(tokens, vec![0; 4 * t_len], t_len);
        let logits = Array2::<f64>::zeros((4 * t_len, vocab));
        let (b, _) = ce_and_grad(&logits, &batch, 1, false).unwrap();
        assert!((b.total - (vocab as f64).ln()).abs() < 0.01);
    }

    #[test]
    fn per_column_losses_recombine_to_total() {
        let vocab = 20;
        let t_len = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b_sz = 3;
            let tokens: Vec<usize> = (0..b_sz * t_len).map(|_| rng.random_range(0..vocab)).collect();
            let cols: Vec<usize> = (0..b_sz * t_len).map(|_| rng.random_range(0..4)).collect();
            let batch = batch_of(tokens, cols, t_len);
            let logits = Array2::from_shape_fn((b_sz * t_len, vocab), |_| {
                rng.random_range(-3.0..3.0)
            });
            let (br, _) = ce_and_grad(&logits, &batch, 4, false).unwrap();
            let recombined: f64 = br
                .per_column
                .iter()
                .zip(&br.column_tokens)
                .map(|(&l, &n)| l * n as f64)
                .sum::<f64>()
                / br.total_tokens as f64;
            assert!((recombined - br.total).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let t_len = 4;
        let mut batch = batch_of(vec![0; 8], vec![0; 8], t_len);
        batch.target_mask.fill(false);
        let logits = Array2::<f64>::zeros((8, 5));
        assert_eq!(
            ce_and_grad(&logits, &batch, 1, false).unwrap_err(),
            ModelError::NoSupervisedTokens
        );
    }

    #[test]
    fn grad_rows_are_zero_outside_predictor_positions() {
        let t_len = 4;
        let mut batch = batch_of(vec![1, 2, 3, 0], vec![0; 4], t_len);
        // only token at t=2 supervised -> only predictor row 1 gets gradient
        batch.target_mask.fill(false);
        batch.target_mask[[0, 2]] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let (_, d) = ce_and_grad(&logits, &batch, 1, true).unwrap();
        let d = d.unwrap();
        for row in [0, 2, 3] {
            assert!(d.row(row).iter().all(|&x: &f64| x == 0.0));
        }
        assert!(d.row(1).iter().any(|&x| x != 0.0));
        // softmax minus one-hot sums to zero along the row
        assert!(d.row(1).sum().abs() < 1e-12);
    }
}
