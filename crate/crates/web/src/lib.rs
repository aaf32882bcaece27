//! Browser front end: a layer-size calculator, code training on a small
//! clustered embedding matrix, and a baseline comparison on the same data.
//!
//! The plain functions are usable natively; the `*_json` wrappers are the
//! JavaScript surface and exchange JSON strings.

use kdcode::baselines::{product_quantize, random_codes, scalar_quantize};
use kdcode::codebook::{
    code_bits, code_space_stats, embedding_layer_bits, min_dimension, no_collision_probability, FullBitsConvention,
    LayerSize,
};
use kdcode::composer::{ComposerKind, ComposerSpec};
use kdcode::diffcore::Tensor;
use kdcode::rng::seeded;
use kdcode::tasks::{clustered_embeddings, ReconstructionTask};
use kdcode::trainer::{fit, LayerSpec, RecordKind, TrainConfig};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Largest vocabulary the demo will train on.
pub const MAX_VOCAB: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeSummary {
    pub code_bits: u64,
    /// Codes plus a `K×D×d` linear-sum codebook.
    pub kd_bits: u64,
    pub full_bits: u64,
    pub compression_ratio: f64,
    pub no_collision_probability: f64,
    /// Smallest `D` that gives every symbol its own code.
    pub min_dims: u32,
}

pub fn layer_size(vocab: usize, k: usize, dims: usize, dim: usize) -> Result<SizeSummary, String> {
    if vocab == 0 || k < 2 || dims == 0 || dim == 0 {
        return Err("need N ≥ 1, K ≥ 2, D ≥ 1 and d ≥ 1".into());
    }
    let kd = LayerSize::Kd { vocab, k, dims, code_dim: dim, composer_params: 0 };
    let full = LayerSize::Full { vocab, dim, convention: FullBitsConvention::Matrix };
    let (kd_bits, full_bits) = (embedding_layer_bits(&kd), embedding_layer_bits(&full));
    Ok(SizeSummary {
        code_bits: code_bits(vocab, k, dims),
        kd_bits,
        full_bits,
        compression_ratio: full_bits as f64 / kd_bits as f64,
        no_collision_probability: no_collision_probability(vocab as u64, k as u64, dims as u32),
        min_dims: min_dimension(vocab as u64, k as u64),
    })
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoData {
    pub vocab: usize,
    pub dim: usize,
    pub clusters: usize,
    pub seed: u64,
}

impl Default for DemoData {
    fn default() -> Self {
        Self { vocab: 300, dim: 16, clusters: 12, seed: 0 }
    }
}

impl DemoData {
    fn build(&self) -> Result<(Tensor, Vec<usize>), String> {
        if !(2..=MAX_VOCAB).contains(&self.vocab) || self.dim == 0 || self.clusters == 0 {
            return Err(format!("need 2 ≤ N ≤ {MAX_VOCAB}, d ≥ 1 and at least one cluster"));
        }
        Ok(clustered_embeddings(self.vocab, self.dim, self.clusters, 0.3, &mut seeded(self.seed)))
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRequest {
    #[serde(flatten)]
    pub data: DemoData,
    pub k: usize,
    pub dims: usize,
    /// `linear-sum`, `linear-hidden` or `lstm`.
    pub composer: String,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Symbols listed in the returned code sample.
    pub sample: usize,
}

impl Default for TrainRequest {
    fn default() -> Self {
        Self {
            data: DemoData::default(),
            k: 8,
            dims: 3,
            composer: "linear-sum".into(),
            epochs: 20,
            learning_rate: 0.01,
            sample: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleCode {
    pub symbol: usize,
    pub cluster: usize,
    pub code: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub learned_error: f64,
    pub random_error: f64,
    pub bits: u64,
    pub full_bits: u64,
    pub unique_codes: usize,
    pub best_epoch: usize,
    /// Hard-code validation loss after each epoch, starting from epoch 0.
    pub curve: Vec<f64>,
    pub sample: Vec<SampleCode>,
}

fn composer_kind(name: &str) -> Result<ComposerKind, String> {
    match name {
        "linear-sum" => Ok(ComposerKind::LinearSum),
        "linear-hidden" => Ok(ComposerKind::LinearHidden { width: 64 }),
        "lstm" => Ok(ComposerKind::Lstm { literal_gates: false }),
        other => Err(format!("unknown composer {other:?}")),
    }
}

pub fn train_codes(req: &TrainRequest) -> Result<TrainSummary, String> {
    let (target, clusters) = req.data.build()?;
    let n = req.data.vocab;
    if req.k < 2 || req.dims == 0 || (req.k as f64).powi(req.dims as i32) < n as f64 {
        return Err(format!("K^D must cover the {n} symbols"));
    }
    if req.epochs > 200 || !(req.learning_rate > 0.0) {
        return Err("need at most 200 epochs and a positive learning rate".into());
    }
    let composer = ComposerSpec {
        kind: composer_kind(&req.composer)?,
        k: req.k,
        dims: req.dims,
        code_dim: req.data.dim,
        out_dim: req.data.dim,
    };
    let task = ReconstructionTask::new(target, 0.1, req.data.seed).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: req.epochs,
        batch_size: 32,
        learning_rate: req.learning_rate,
        seed: req.data.seed,
        ..Default::default()
    };
    let score = |layer| -> Result<_, String> {
        let out = fit(&config, &task, layer, None).map_err(|e| e.to_string())?;
        let (table, book) = (out.table.clone().expect("kd table"), out.codebook.clone().expect("kd codebook"));
        let error = task.loss(&book.compose_batch(&table).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        Ok((out, table, book, error))
    };
    let (out, table, book, learned_error) = score(LayerSpec::Kd { composer, frozen: None })?;
    let frozen = Some(random_codes(n, req.k, req.dims, req.data.seed));
    let (_, _, _, random_error) = score(LayerSpec::Kd { composer, frozen })?;
    let size = LayerSize::Kd { vocab: n, k: req.k, dims: req.dims, code_dim: req.data.dim, composer_params: book.spec().composer_params() };
    let full = LayerSize::Full { vocab: n, dim: req.data.dim, convention: FullBitsConvention::Matrix };
    Ok(TrainSummary {
        learned_error,
        random_error,
        bits: embedding_layer_bits(&size),
        full_bits: embedding_layer_bits(&full),
        unique_codes: code_space_stats(&table).unique_codes,
        best_epoch: out.best_epoch,
        curve: out.history.iter().filter(|r| r.kind == RecordKind::Validation).filter_map(|r| r.val_loss).collect(),
        sample: (0..req.sample.min(n))
            .map(|i| SampleCode { symbol: i, cluster: clusters[i], code: table.code(i).iter().map(u32::to_string).collect::<Vec<_>>().join("-") })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRow {
    pub method: String,
    pub bits: u64,
    pub reconstruction_error: f64,
}

/// Product quantization at every block count dividing `d` (up to 8) with
/// 16 centroids, and scalar quantization at 8, 4 and 2 bits.
pub fn compare_baselines(data: &DemoData) -> Result<Vec<BaselineRow>, String> {
    let (u, _) = data.build()?;
    let task = ReconstructionTask::new(u.clone(), 0.1, data.seed).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let centroids = 16.min(data.vocab);
    for m in (1..=8).filter(|m| data.dim.is_multiple_of(*m)) {
        let pq = product_quantize(&u, m, centroids, data.seed).map_err(|e| e.to_string())?;
        rows.push(BaselineRow {
            method: format!("pq-{centroids}x{m}"),
            bits: embedding_layer_bits(&pq.layer_size()),
            reconstruction_error: task.loss(&pq.reconstruct()).map_err(|e| e.to_string())?,
        });
    }
    for bits in [8, 4, 2] {
        let q = scalar_quantize(&u, bits).map_err(|e| e.to_string())?;
        rows.push(BaselineRow {
            method: format!("scalar-{bits}bit"),
            bits: embedding_layer_bits(&q.layer_size()),
            reconstruction_error: task.loss(&q.dequantize()).map_err(|e| e.to_string())?,
        });
    }
    Ok(rows)
}

fn to_js<T: Serialize>(result: Result<T, String>) -> Result<String, JsValue> {
    result.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

fn parse<T: for<'de> Deserialize<'de>>(request: &str) -> Result<T, String> {
    serde_json::from_str(request).map_err(|e| format!("bad request: {e}"))
}

#[wasm_bindgen]
pub fn layer_size_json(vocab: u32, k: u32, dims: u32, dim: u32) -> Result<String, JsValue> {
    to_js(layer_size(vocab as usize, k as usize, dims as usize, dim as usize))
}

#[wasm_bindgen]
pub fn train_codes_json(request: &str) -> Result<String, JsValue> {
    to_js(parse(request).and_then(|r: TrainRequest| train_codes(&r)))
}

#[wasm_bindgen]
pub fn baselines_json(request: &str) -> Result<String, JsValue> {
    to_js(parse(request).and_then(|d: DemoData| compare_baselines(&d)))
}
