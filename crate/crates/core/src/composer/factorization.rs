use crate::codebook::DiscreteCodeTable;
use crate::diffcore::Tensor;
use crate::{Error, Result};

use super::{CodeBook, ComposerKind};

/// `N×(K·D)` binary matrix with a one in column `j·K + c_j` of each row.
pub fn binary_code_matrix(table: &DiscreteCodeTable) -> Tensor {
    let (k, dims) = (table.k(), table.dims());
    let mut b = Tensor::zeros(vec![table.len(), k * dims]);
    for (i, code) in table.codes().enumerate() {
        let row = b.row_mut(i);
        for (j, &c) in code.iter().enumerate() {
            row[j * k + c as usize] = 1.0;
        }
    }
    b
}

/// `(K·D)×d'` stack of the code embedding tables `W^1..W^D`.
pub fn stacked_code_embeddings(book: &CodeBook) -> Tensor {
    let spec = book.spec();
    let mut data = Vec::with_capacity(spec.k * spec.dims * spec.code_dim);
    for j in 0..spec.dims {
        data.extend_from_slice(book.code_embedding(j).data());
    }
    Tensor::new(vec![spec.k * spec.dims, spec.code_dim], data).expect("stacked shape")
}

/// Maximum absolute difference between the composed embedding matrix and
/// the product `B·C` of the binary code matrix and the stacked code
/// embeddings. Only defined for an unprojected linear-sum composer.
pub fn factorization_equivalence_check(table: &DiscreteCodeTable, book: &CodeBook) -> Result<f64> {
    let spec = book.spec();
    if spec.kind != ComposerKind::LinearSum || spec.has_projection() {
        return Err(Error::invalid("factorization form needs a linear-sum composer without projection"));
    }
    let composed = book.compose_batch(table)?;
    let b = binary_code_matrix(table);
    let c = stacked_code_embeddings(book);
    let (n, kd, d) = (table.len(), spec.k * spec.dims, spec.code_dim);
    let mut worst = 0.0f64;
    for i in 0..n {
        for col in 0..d {
            let mut acc = 0.0;
            for r in 0..kd {
                acc += b.row(i)[r] * c.row(r)[col];
            }
            worst = worst.max((acc - composed.row(i)[col]).abs());
        }
    }
    Ok(worst)
}

/// Rank of a matrix by Gaussian elimination with partial pivoting; pivots
/// below `tol · max|a|` count as zero.
pub fn numerical_rank(m: &Tensor, tol: f64) -> usize {
    let (rows, cols) = (m.row_count(), m.row_len());
    let mut a: Vec<Vec<f64>> = m.rows().map(<[f64]>::to_vec).collect();
    let scale = m.data().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return 0;
    }
    let threshold = tol * scale;
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() <= threshold {
            continue;
        }
        a.swap(rank, pivot);
        for r in rank + 1..rows {
            let f = a[r][col] / a[rank][col];
            if f != 0.0 {
                for c in col..cols {
                    a[r][c] -= f * a[rank][c];
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Upper limit on the number of code assignments `best_linear_sum_error`
/// will enumerate.
pub const MAX_ASSIGNMENTS: u64 = 1 << 24;

/// Lowest mean squared row error any linear-sum composer with `K^D` codes
/// can reach on `target`, found by enumerating every code assignment and
/// projecting the target onto the column space of its binary code matrix.
/// The code embeddings are unconstrained, so this also bounds every
/// projection width `d'`.
pub fn best_linear_sum_error(target: &Tensor, k: usize, dims: usize) -> Result<f64> {
    if target.rank() != 2 || k < 2 || dims == 0 {
        return Err(Error::invalid("need a matrix target, K >= 2 and D >= 1"));
    }
    let n = target.row_count();
    let codes = (k as u64).checked_pow(dims as u32).unwrap_or(u64::MAX);
    let total = codes.checked_pow(n as u32).unwrap_or(u64::MAX);
    if total > MAX_ASSIGNMENTS {
        return Err(Error::invalid(format!("{total} assignments exceed the enumeration limit")));
    }
    let d = target.row_len();
    let energy: f64 = target.data().iter().map(|v| v * v).sum();
    let mut assignment = vec![0u64; n];
    let mut best = f64::INFINITY;
    for _ in 0..total {
        // Orthonormal basis of the span of B's columns, built column by column.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..dims {
            let shift = (k as u64).pow(j as u32);
            for c in 0..k as u64 {
                let mut col: Vec<f64> =
                    assignment.iter().map(|&a| f64::from(u8::from((a / shift) % k as u64 == c))).collect();
                for _ in 0..2 {
                    for q in &basis {
                        let dot: f64 = q.iter().zip(&col).map(|(x, y)| x * y).sum();
                        col.iter_mut().zip(q).for_each(|(v, x)| *v -= dot * x);
                    }
                }
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    col.iter_mut().for_each(|v| *v /= norm);
                    basis.push(col);
                }
            }
        }
        let mut captured = 0.0;
        for q in &basis {
            for col in 0..d {
                let dot: f64 = (0..n).map(|i| q[i] * target.row(i)[col]).sum();
                captured += dot * dot;
            }
        }
        best = best.min((energy - captured).max(0.0));
        for a in assignment.iter_mut() {
            *a += 1;
            if *a < codes {
                break;
            }
            *a = 0;
        }
    }
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::composer::ComposerSpec;
    use crate::rng::seeded;

    #[test]
    fn binary_matrix_has_one_per_digit() {
        let table = DiscreteCodeTable::anonymous(3, 2, vec![2, 0, 1, 1]).unwrap();
        let b = binary_code_matrix(&table);
        assert_eq!(b.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.row(1), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn composition_is_a_low_rank_product() {
        let mut rng = seeded(21);
        let spec = ComposerSpec { kind: ComposerKind::LinearSum, k: 3, dims: 2, code_dim: 10, out_dim: 10 };
        let book = CodeBook::init(spec, &mut rng).unwrap();
        let digits: Vec<u32> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let table = DiscreteCodeTable::anonymous(3, 2, digits).unwrap();
        assert!(factorization_equivalence_check(&table, &book).unwrap() < 1e-12);
        let e = book.compose_batch(&table).unwrap();
        assert!(numerical_rank(&e, 1e-10) <= 6);
    }

    #[test]
    fn rank_of_known_matrices() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(numerical_rank(&id, 1e-12), 3);
        let dup = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(numerical_rank(&dup, 1e-12), 1);
        assert_eq!(numerical_rank(&Tensor::zeros(vec![2, 2]), 1e-12), 0);
    }

    #[test]
    fn rejects_projected_or_nonlinear_composers() {
        let mut rng = seeded(1);
        let table = DiscreteCodeTable::anonymous(2, 1, vec![0, 1]).unwrap();
        let projected = ComposerSpec { kind: ComposerKind::LinearSum, k: 2, dims: 1, code_dim: 2, out_dim: 3 };
        let book = CodeBook::init(projected, &mut rng).unwrap();
        assert!(factorization_equivalence_check(&table, &book).is_err());
    }

    #[test]
    fn linear_sum_oracle_matches_hand_cases() {
        // Four points on a parallelogram are reproduced exactly.
        let para = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(best_linear_sum_error(&para, 2, 2).unwrap() < 1e-20);
        // Four orthogonal points of norm 3 miss the parallelogram constraint
        // by a quarter of |a + d - b - c|^2 per row.
        let orth = Tensor::from_rows(&[
            vec![3.0, 0.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0, 0.0],
            vec![0.0, 0.0, 3.0, 0.0],
            vec![0.0, 0.0, 0.0, 3.0],
        ])
        .unwrap();
        assert!((best_linear_sum_error(&orth, 2, 2).unwrap() - 2.25).abs() < 1e-9);
        // With K^D >= N and K*D >= N every target is reachable.
        assert!(best_linear_sum_error(&orth, 4, 1).unwrap() < 1e-20);
        assert!(best_linear_sum_error(&Tensor::zeros(vec![20, 2]), 4, 2).is_err());
    }
}
