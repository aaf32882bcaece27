//! Comparison methods: low-rank factorization, product and scalar
//! quantization, random codes, and two-stage pre-trained codes.

mod kmeans;
mod lowrank;

pub use kmeans::{kmeans, KMeans, MAX_ITERATIONS, RELATIVE_TOLERANCE};
pub use lowrank::{low_rank_fit, LowRank, LowRankConfig};

use rand::Rng as _;

use crate::codebook::{embedding_layer_bits, DiscreteCodeTable, LayerSize};
use crate::composer::{CodeBook, ComposerKind, ComposerSpec};
use crate::diffcore::{ParamStore, Tensor};
use crate::rng::{derived, seeded};
use crate::tasks::ReconstructionTask;
use crate::trainer::{fit, LayerSpec, TrainConfig};
use crate::{Error, Result};

/// A compressed stand-in for an embedding matrix, sized through the shared
/// accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub method: String,
    pub reconstruction: Tensor,
    pub layer: LayerSize,
    pub params: u64,
    pub bits: u64,
    /// Mean over symbols of the squared row error.
    pub error: f64,
}

impl QuantizationResult {
    pub fn new(method: impl Into<String>, target: &Tensor, reconstruction: Tensor, layer: LayerSize) -> Result<Self> {
        if target.shape() != reconstruction.shape() {
            return Err(Error::invalid("reconstruction shape differs from target"));
        }
        let sq: f64 = target.data().iter().zip(reconstruction.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(Self {
            method: method.into(),
            error: sq / target.row_count() as f64,
            params: layer.params(),
            bits: embedding_layer_bits(&layer),
            reconstruction,
            layer,
        })
    }
}

/// Per-block k-means codebooks and each symbol's centroid per block.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductQuantizer {
    /// `M` tables of `K×(d/M)` centroids.
    pub centroids: Vec<Tensor>,
    /// Digit `j` of symbol `i` is its centroid in block `j`.
    pub codes: DiscreteCodeTable,
    /// Final inertia of each block.
    pub inertia: Vec<f64>,
}

impl ProductQuantizer {
    pub fn blocks(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid_count(&self) -> usize {
        self.centroids[0].row_count()
    }

    pub fn block_width(&self) -> usize {
        self.centroids[0].row_len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let (m, w) = (self.blocks(), self.block_width());
        let mut out = Tensor::zeros(vec![self.codes.len(), m * w]);
        for (i, code) in self.codes.codes().enumerate() {
            for (j, &c) in code.iter().enumerate() {
                out.row_mut(i)[j * w..(j + 1) * w].copy_from_slice(self.centroids[j].row(c as usize));
            }
        }
        out
    }

    pub fn layer_size(&self) -> LayerSize {
        LayerSize::Kd {
            vocab: self.codes.len(),
            k: self.centroid_count(),
            dims: self.blocks(),
            code_dim: self.block_width(),
            composer_params: 0,
        }
    }

    /// The same quantizer as a linear-sum KD codebook: code embedding `j`
    /// holds block `j`'s centroids zero-padded to the full width.
    pub fn as_codebook(&self) -> Result<CodeBook> {
        let (m, w, k) = (self.blocks(), self.block_width(), self.centroid_count());
        let d = m * w;
        let spec = ComposerSpec { kind: ComposerKind::LinearSum, k, dims: m, code_dim: d, out_dim: d };
        let mut store = ParamStore::new();
        for (j, c) in self.centroids.iter().enumerate() {
            let mut padded = Tensor::zeros(vec![k, d]);
            for r in 0..k {
                padded.row_mut(r)[j * w..(j + 1) * w].copy_from_slice(c.row(r));
            }
            store.insert(ComposerSpec::code_emb_name(j), padded);
        }
        CodeBook::from_params(spec, &store)
    }
}

/// Splits the columns of `u` into `m` contiguous blocks and clusters each
/// into `k` centroids.
pub fn product_quantize(u: &Tensor, m: usize, k: usize, seed: u64) -> Result<ProductQuantizer> {
    if u.rank() != 2 || m == 0 || !u.row_len().is_multiple_of(m) {
        return Err(Error::invalid(format!("width {} is not divisible into {m} blocks", u.row_len())));
    }
    let n = u.row_count();
    if k > n {
        return Err(Error::invalid(format!("{k} centroids exceed {n} points")));
    }
    if k < 2 {
        return Err(Error::invalid("product quantization needs at least two centroids"));
    }
    let w = u.row_len() / m;
    let mut centroids = Vec::with_capacity(m);
    let mut inertia = Vec::with_capacity(m);
    let mut digits = vec![0u32; n * m];
    for j in 0..m {
        let mut block = Vec::with_capacity(n * w);
        for row in u.rows() {
            block.extend_from_slice(&row[j * w..(j + 1) * w]);
        }
        let block = Tensor::new(vec![n, w], block)?;
        let km = kmeans(&block, k, &mut derived(seed, j as u64))?;
        for (i, &a) in km.assignments.iter().enumerate() {
            digits[i * m + j] = a as u32;
        }
        inertia.push(*km.inertia.last().expect("at least one inertia value"));
        centroids.push(km.centroids);
    }
    Ok(ProductQuantizer { centroids, codes: DiscreteCodeTable::anonymous(k, m, digits)?, inertia })
}

/// Uniform min-max quantization of a whole matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarQuantized {
    pub shape: Vec<usize>,
    pub levels: Vec<u32>,
    pub min: f64,
    /// Grid spacing; zero for a constant matrix.
    pub step: f64,
    pub bits: u32,
}

impl ScalarQuantized {
    pub fn dequantize(&self) -> Tensor {
        let data = self.levels.iter().map(|&q| self.min + q as f64 * self.step).collect();
        Tensor::new(self.shape.clone(), data).expect("stored shape")
    }

    pub fn layer_size(&self) -> LayerSize {
        LayerSize::Scalar { vocab: self.shape[0], dim: self.len() / self.shape[0], bits: self.bits }
    }

    fn len(&self) -> usize {
        self.levels.len()
    }
}

/// Rounds every entry to the nearest of `2^bits` evenly spaced values
/// between the matrix minimum and maximum.
pub fn scalar_quantize(u: &Tensor, bits: u32) -> Result<ScalarQuantized> {
    if !(1..=32).contains(&bits) {
        return Err(Error::invalid(format!("bits must lie in 1..=32, got {bits}")));
    }
    if u.rank() != 2 {
        return Err(Error::invalid("scalar quantization needs a matrix"));
    }
    let min = u.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = u.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = ((1u64 << bits) - 1) as f64;
    let step = (max - min) / top;
    let levels = u
        .data()
        .iter()
        .map(|&x| if step == 0.0 { 0 } else { ((x - min) / step).round().clamp(0.0, top) as u32 })
        .collect();
    Ok(ScalarQuantized { shape: u.shape().to_vec(), levels, min, step, bits })
}

/// Digits drawn i.i.d. uniform over `0..k`.
pub fn random_codes(n: usize, k: usize, dims: usize, seed: u64) -> DiscreteCodeTable {
    let mut rng = seeded(seed);
    let digits = (0..n * dims).map(|_| rng.random_range(0..k as u32)).collect();
    DiscreteCodeTable::anonymous(k, dims, digits).expect("valid random table")
}

/// Learns codes for `u` by training on reconstruction alone, for use as a
/// frozen table downstream.
pub fn pretrained_codes(u: &Tensor, composer: ComposerSpec, config: &TrainConfig, validation_fraction: f64) -> Result<DiscreteCodeTable> {
    let task = ReconstructionTask::new(u.clone(), validation_fraction, config.seed)?;
    let out = fit(config, &task, LayerSpec::Kd { composer, frozen: None }, Some(u))?;
    Ok(out.table.expect("learned codes"))
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::codebook::{code_space_stats, no_collision_probability};
    use crate::tasks::clustered_embeddings;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn one_centroid_per_symbol_is_lossless() {
        let u = gaussian(20, 6, 1);
        let pq = product_quantize(&u, 1, 20, 0).unwrap();
        assert_eq!(pq.reconstruct(), u);
    }

    #[test]
    fn repeated_rows_are_lossless() {
        let base = gaussian(4, 6, 2);
        let rows: Vec<Vec<f64>> = (0..30).map(|i| base.row(i % 4).to_vec()).collect();
        let u = Tensor::from_rows(&rows).unwrap();
        let pq = product_quantize(&u, 1, 4, 3).unwrap();
        assert!(pq.reconstruct().max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn pq_rejects_bad_shapes() {
        let u = gaussian(10, 6, 3);
        assert!(product_quantize(&u, 4, 2, 0).is_err());
        assert!(product_quantize(&u, 2, 11, 0).is_err());
    }

    #[test]
    fn pq_bits_follow_accounting() {
        let layer = LayerSize::Kd { vocab: 10_000, k: 64, dims: 2, code_dim: 325, composer_params: 0 };
        assert_eq!(embedding_layer_bits(&layer), 120_000 + 32 * 64 * 650);
    }

    #[test]
    fn pq_is_a_linear_sum_code() {
        for seed in 0..5 {
            let u = gaussian(60, 12, seed);
            let pq = product_quantize(&u, 3, 5, seed).unwrap();
            let composed = pq.as_codebook().unwrap().compose_batch(&pq.codes).unwrap();
            assert!(composed.max_abs_diff(&pq.reconstruct()) < 1e-10);
        }
    }

    #[test]
    fn scalar_error_bound() {
        let mut rng = seeded(4);
        let u = Tensor::new(vec![100, 100], (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let q = scalar_quantize(&u, 8).unwrap();
        let (lo, hi) = (q.min, q.min + q.step * 255.0);
        let bound = (hi - lo) / 510.0;
        assert!(u.max_abs_diff(&q.dequantize()) <= bound + 1e-15);
        assert!(bound <= 1.0 / 510.0);
    }

    #[test]
    fn scalar_edge_cases() {
        let c = Tensor::full(vec![3, 4], 2.5);
        assert_eq!(scalar_quantize(&c, 3).unwrap().dequantize(), c);
        let u = gaussian(10, 10, 5);
        let q = scalar_quantize(&u, 32).unwrap();
        let range = u.data().iter().copied().fold(f64::NEG_INFINITY, f64::max) - q.min;
        assert!(u.max_abs_diff(&q.dequantize()) < range * f32::EPSILON as f64);
        assert!(scalar_quantize(&u, 0).is_err());
        assert!(scalar_quantize(&u, 33).is_err());
    }

    #[test]
    fn random_codes_are_uniform_and_reproducible() {
        assert_eq!(random_codes(50, 4, 3, 9), random_codes(50, 4, 3, 9));
        let t = random_codes(100_000, 8, 1, 1);
        let mut hist = [0usize; 8];
        t.digits().iter().for_each(|&d| hist[d as usize] += 1);
        for h in hist {
            assert!((h as f64 / 1e5 - 0.125).abs() < 0.005, "{h}");
        }
    }

    #[test]
    fn random_collisions_match_closed_form() {
        let trials = 2000;
        let free = (0..trials).filter(|&s| code_space_stats(&random_codes(30, 10, 2, s)).collisions == 0).count();
        let p = no_collision_probability(30, 10, 2);
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((free as f64 / trials as f64 - p).abs() < 3.0 * se.max(1e-3));
    }

    #[test]
    fn pretrained_codes_group_clusters() {
        let (u, assign) = clustered_embeddings(120, 8, 6, 0.05, &mut seeded(11));
        let spec = ComposerSpec { kind: ComposerKind::LinearSum, k: 4, dims: 3, code_dim: 8, out_dim: 8 };
        let cfg = TrainConfig { epochs: 30, batch_size: 16, learning_rate: 0.02, ..Default::default() };
        let table = pretrained_codes(&u, spec, &cfg, 0.1).unwrap();
        let (mut same_in, mut n_in, mut same_out, mut n_out) = (0, 0, 0, 0);
        for i in 0..120 {
            for j in i + 1..120 {
                let eq = usize::from(table.code(i) == table.code(j));
                if assign[i] == assign[j] {
                    same_in += eq;
                    n_in += 1;
                } else {
                    same_out += eq;
                    n_out += 1;
                }
            }
        }
        assert!(same_in as f64 / n_in as f64 > same_out as f64 / n_out as f64);
        let cfg0 = TrainConfig { epochs: 0, ..cfg };
        let t0 = pretrained_codes(&u, spec, &cfg0, 0.1).unwrap();
        assert_eq!(t0.len(), 120);
    }
}
