use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{code_space_size, DiscreteCodeTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeSpaceStats {
    pub unique_codes: usize,
    /// `unique / K^D`.
    pub utilization: f64,
    /// `N - unique`.
    pub collisions: usize,
}

pub fn code_space_stats(table: &DiscreteCodeTable) -> CodeSpaceStats {
    let unique: HashSet<&[u32]> = table.codes().collect();
    let unique_codes = unique.len();
    CodeSpaceStats {
        unique_codes,
        utilization: unique_codes as f64 / code_space_size(table.k(), table.dims()),
        collisions: table.len() - unique_codes,
    }
}

/// Largest `N` for which [`no_collision_probability`] multiplies out the
/// exact product; above it the birthday approximation is used.
pub const EXACT_PRODUCT_LIMIT: u64 = 1_000_000;

/// Probability that `N` codes drawn uniformly from `K^D` are all distinct.
///
/// Uses `Π_{i<N} (1 - i/K^D)` for `N ≤ EXACT_PRODUCT_LIMIT`, otherwise
/// `exp(-N(N-1) / (2 K^D))`.
pub fn no_collision_probability(n: u64, k: u64, dims: u32) -> f64 {
    let space = code_space_size(k as usize, dims as usize);
    let nf = n as f64;
    if nf > space {
        return 0.0;
    }
    if n <= EXACT_PRODUCT_LIMIT {
        let log_p: f64 = (0..n).map(|i| (-(i as f64) / space).ln_1p()).sum();
        log_p.exp()
    } else {
        (-nf * (nf - 1.0) / (2.0 * space)).exp()
    }
}

/// Smallest `D` with `K^D ≥ N`.
pub fn min_dimension(n: u64, k: u64) -> u32 {
    assert!(k >= 2, "K must be at least 2");
    let mut dims = 0;
    let mut capacity: u128 = 1;
    while capacity < n as u128 {
        capacity *= k as u128;
        dims += 1;
    }
    dims
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn distinct_and_identical_tables() {
        let t = DiscreteCodeTable::anonymous(3, 2, vec![0, 0, 0, 1, 2, 2]).unwrap();
        let s = code_space_stats(&t);
        assert_eq!((s.unique_codes, s.collisions), (3, 0));
        assert_abs_diff_eq!(s.utilization, 3.0 / 9.0);
        let same = DiscreteCodeTable::anonymous(3, 2, vec![1, 2, 1, 2, 1, 2]).unwrap();
        assert_eq!(code_space_stats(&same).unique_codes, 1);
        assert_eq!(code_space_stats(&same).collisions, 2);
    }

    #[test]
    fn undersized_code_space_forces_collisions() {
        // 6^4 = 1296 codes for a 10K vocabulary.
        assert_eq!(code_space_size(6, 4), 1296.0);
        let digits: Vec<u32> = (0..10_000u32).flat_map(|i| [i % 6, (i / 6) % 6, (i / 36) % 6, (i / 216) % 6]).collect();
        let s = code_space_stats(&DiscreteCodeTable::anonymous(6, 4, digits).unwrap());
        assert!(s.collisions >= 8704);
        assert_eq!(s.unique_codes, 1296);
    }

    #[test]
    fn billion_symbols_rarely_collide() {
        let p = no_collision_probability(1_000_000_000, 100, 10);
        assert!((p - 0.995).abs() <= 0.001, "{p}");
    }

    #[test]
    fn small_cases_are_exact() {
        assert_eq!(no_collision_probability(1, 2, 1), 1.0);
        // Of the four equally likely assignments of two symbols to two codes,
        // two are collision free.
        assert_abs_diff_eq!(no_collision_probability(2, 2, 1), 0.5, epsilon = 1e-15);
        assert_eq!(no_collision_probability(5, 2, 2), 0.0);
    }

    #[test]
    fn exact_and_approximate_forms_agree_near_the_switch() {
        let n = EXACT_PRODUCT_LIMIT;
        let exact = no_collision_probability(n, 1000, 5);
        let nf = n as f64;
        let approx = (-nf * (nf - 1.0) / 2e15).exp();
        assert_abs_diff_eq!(exact, approx, epsilon = 1e-6);
    }

    #[test]
    fn min_dimension_examples() {
        assert_eq!(min_dimension(10_000, 32), 3);
        assert_eq!(min_dimension(10_000, 2), 14);
        assert_eq!(min_dimension(7, 7), 1);
        for (n, k) in [(1000u64, 10u64), (1001, 10), (65_536, 16), (3, 2)] {
            let d = min_dimension(n, k);
            assert!(k.pow(d) >= n && k.pow(d - 1) < n);
        }
    }
}
