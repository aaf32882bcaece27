use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codebook::DiscreteCodeTable;
use crate::diffcore::Tensor;
use crate::rng::seeded;
use crate::{Error, Result};

fn unit_rows(m: &Tensor) -> Vec<Vec<f64>> {
    m.rows()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                r.to_vec()
            } else {
                r.iter().map(|x| x / norm).collect()
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn top_k(units: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut sims: Vec<(f64, usize)> =
        (0..units.len()).filter(|&j| j != i).map(|j| (dot(&units[i], &units[j]), j)).collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = sims[..k].iter().map(|&(_, j)| j).collect();
    out.sort_unstable();
    out
}

/// Mean fraction of each symbol's `k` cosine nearest neighbours (self
/// excluded, ties to the lower index) shared between `reference` and
/// `other`.
pub fn nn_overlap(reference: &Tensor, other: &Tensor, k: usize) -> Result<f64> {
    let n = reference.row_count();
    if reference.rank() != 2 || other.rank() != 2 || other.row_count() != n {
        return Err(Error::invalid("nn_overlap needs two matrices with the same row count"));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must lie in 1..{n}, got {k}")));
    }
    let (a, b) = (unit_rows(reference), unit_rows(other));
    let mut total = 0.0;
    for i in 0..n {
        let (ta, tb) = (top_k(&a, i, k), top_k(&b, i, k));
        let shared = ta.iter().filter(|x| tb.binary_search(x).is_ok()).count();
        total += shared as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// Cosine similarity among symbols sharing a code versus all pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeProbe {
    /// Mean cosine over pairs of symbols with identical codes.
    pub intra: f64,
    /// Mean cosine over all distinct pairs.
    pub global: f64,
    pub intra_pairs: usize,
    /// Standard deviation of `intra` when codes are randomly reassigned to
    /// symbols (group sizes kept).
    pub null_std: f64,
}

impl CodeProbe {
    /// `(intra − global) / null_std`.
    pub fn z_score(&self) -> f64 {
        (self.intra - self.global) / self.null_std
    }
}

fn intra_mean(groups: &[Vec<usize>], units: &[Vec<f64>], perm: &[usize]) -> (f64, usize) {
    let (mut sum, mut pairs) = (0.0, 0usize);
    for g in groups {
        for (x, &a) in g.iter().enumerate() {
            for &b in &g[x + 1..] {
                sum += dot(&units[perm[a]], &units[perm[b]]);
                pairs += 1;
            }
        }
    }
    (sum / pairs as f64, pairs)
}

/// Compares similarity within code groups to the global mean. Returns
/// `None` when no two symbols share a code. The null spread comes from
/// `trials` seeded random relabellings.
pub fn code_semantics_probe(table: &DiscreteCodeTable, embeddings: &Tensor, trials: usize, seed: u64) -> Result<Option<CodeProbe>> {
    let n = table.len();
    if embeddings.rank() != 2 || embeddings.row_count() != n {
        return Err(Error::invalid("one embedding row per coded symbol required"));
    }
    let mut by_code: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
    for (i, c) in table.codes().enumerate() {
        by_code.entry(c).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_code.into_values().filter(|g| g.len() > 1).collect();
    if groups.is_empty() || n < 2 {
        return Ok(None);
    }
    let units = unit_rows(embeddings);
    let identity: Vec<usize> = (0..n).collect();
    let (intra, intra_pairs) = intra_mean(&groups, &units, &identity);
    // Σ_{i<j} u_i·u_j = (‖Σ u‖² − Σ ‖u‖²) / 2
    let d = embeddings.row_len();
    let mut total = vec![0.0; d];
    let mut self_sum = 0.0;
    for u in &units {
        total.iter_mut().zip(u).for_each(|(t, x)| *t += x);
        self_sum += dot(u, u);
    }
    let pair_count = (n * (n - 1) / 2) as f64;
    let global = (dot(&total, &total) - self_sum) / 2.0 / pair_count;
    let mut rng = seeded(seed);
    let mut perm = identity;
    let null: Vec<f64> = (0..trials.max(2))
        .map(|_| {
            perm.shuffle(&mut rng);
            intra_mean(&groups, &units, &perm).0
        })
        .collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let var = null.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (null.len() - 1) as f64;
    Ok(Some(CodeProbe { intra, global, intra_pairs, null_std: var.sqrt() }))
}

/// Symbols grouped by code, most populated codes first, as
/// `(rendered code, symbols)`.
pub fn group_by_code(table: &DiscreteCodeTable) -> Vec<(String, Vec<String>)> {
    let mut by_code: BTreeMap<&[u32], Vec<String>> = BTreeMap::new();
    for (i, c) in table.codes().enumerate() {
        by_code.entry(c).or_default().push(table.symbols()[i].clone());
    }
    let mut out: Vec<(String, Vec<String>)> =
        by_code.into_iter().map(|(c, s)| (DiscreteCodeTable::render(c), s)).collect();
    out.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));
    out
}
