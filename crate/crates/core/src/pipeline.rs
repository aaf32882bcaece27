//! End-to-end runs behind the command-line tools: data preparation,
//! training, evaluation, baselines, sweeps and the code probe.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{low_rank_fit, pretrained_codes, product_quantize, random_codes, scalar_quantize, LowRankConfig};
use crate::codebook::{DiscreteCodeTable, LayerSize};
use crate::composer::{CodeBook, ComposerSpec};
use crate::config::{CodeSource, ComposerName, ExperimentConfig, LayerKind, TaskKind};
use crate::diffcore::{ParamStore, Tensor};
use crate::guidance::GuidanceMode;
use crate::rng::derived;
use crate::tasks::{
    clustered_embeddings, code_semantics_probe, group_by_code, load_embeddings, marker_corpus, nn_overlap, sweep,
    write_embeddings, write_reports, ClassificationTask, CodeProbe, LabeledCorpus, ReconstructionTask, RunReport,
    SweepAxis, SweepOutcome, VocabTable,
};
use crate::trainer::{fit, write_metrics, LayerSpec, MetricRecord, Task, TrainConfig};
use crate::{Error, Result};

/// Input data of an experiment.
#[derive(Clone, Debug)]
pub enum Dataset {
    Reconstruction {
        vocab: VocabTable,
        target: Tensor,
        /// Generating cluster of each symbol, for synthetic data.
        clusters: Option<Vec<usize>>,
    },
    Classification {
        vocab: VocabTable,
        train: LabeledCorpus,
        valid: LabeledCorpus,
        /// Embeddings read from `embeddings`, if configured.
        pretrained: Option<Tensor>,
    },
}

impl Dataset {
    /// Reads or generates the data; generation is seeded by `data_seed`
    /// only, so every training seed sees the same data and split.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let file = cfg.embeddings.as_deref().map(load_embeddings).transpose()?;
        match cfg.task {
            TaskKind::Reconstruction => Ok(match file {
                Some((vocab, target)) => Dataset::Reconstruction { vocab, target, clusters: None },
                None => {
                    let mut rng = derived(cfg.data_seed, 0);
                    let (target, assign) = clustered_embeddings(cfg.vocab, cfg.dim, cfg.clusters, cfg.cluster_spread, &mut rng);
                    Dataset::Reconstruction { vocab: VocabTable::numbered(cfg.vocab), target, clusters: Some(assign) }
                }
            }),
            TaskKind::Classification => {
                let (vocab, pretrained) = match file {
                    Some((v, u)) => (v, Some(u)),
                    None => (VocabTable::numbered(cfg.vocab), None),
                };
                let mut spec = cfg.corpus_spec();
                spec.vocab = vocab.len();
                let corpus = marker_corpus(&spec, &mut derived(cfg.data_seed, 1))?;
                let (train, valid) = corpus.split(cfg.validation_fraction, &mut derived(cfg.data_seed, 2));
                Ok(Dataset::Classification { vocab, train, valid, pretrained })
            }
        }
    }

    pub fn vocab(&self) -> &VocabTable {
        match self {
            Dataset::Reconstruction { vocab, .. } | Dataset::Classification { vocab, .. } => vocab,
        }
    }

    /// Embedding width `d` of the layer under study.
    pub fn dim(&self, cfg: &ExperimentConfig) -> usize {
        match self {
            Dataset::Reconstruction { target, .. } => target.row_len(),
            Dataset::Classification { pretrained, .. } => pretrained.as_ref().map_or(cfg.dim, Tensor::row_len),
        }
    }
}

enum TaskImpl {
    Reconstruction(ReconstructionTask),
    Classification(ClassificationTask),
}

impl TaskImpl {
    fn new(cfg: &ExperimentConfig, data: &Dataset) -> Result<Self> {
        Ok(match data {
            Dataset::Reconstruction { target, .. } => {
                TaskImpl::Reconstruction(ReconstructionTask::new(target.clone(), cfg.validation_fraction, cfg.data_seed)?)
            }
            Dataset::Classification { train, valid, .. } => {
                TaskImpl::Classification(ClassificationTask::new(train.clone(), valid.clone(), data.dim(cfg))?)
            }
        })
    }

    fn as_task(&self) -> &dyn Task {
        match self {
            TaskImpl::Reconstruction(t) => t,
            TaskImpl::Classification(t) => t,
        }
    }
}

/// What inference needs: codes and codebook (or a plain matrix) plus the
/// task parameters.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub table: Option<DiscreteCodeTable>,
    pub codebook: Option<CodeBook>,
    pub embedding: Option<Tensor>,
    /// Task parameters, e.g. the classifier's affine layer.
    pub head: ParamStore,
}

impl Artifacts {
    pub fn embeddings(&self) -> Result<Tensor> {
        match (&self.embedding, &self.table, &self.codebook) {
            (Some(e), _, _) => Ok(e.clone()),
            (None, Some(t), Some(b)) => b.compose_batch(t),
            _ => Err(Error::invalid("artifacts hold neither an embedding matrix nor codes with a codebook")),
        }
    }

    fn layer_size(&self, convention: crate::codebook::FullBitsConvention) -> Result<LayerSize> {
        match (&self.embedding, &self.table, &self.codebook) {
            (Some(e), _, _) => Ok(LayerSize::Full { vocab: e.row_count(), dim: e.row_len(), convention }),
            (None, Some(t), Some(b)) => Ok(kd_layer(t.len(), b.spec())),
            _ => Err(Error::invalid("artifacts hold no embedding layer")),
        }
    }
}

fn kd_layer(vocab: usize, spec: &ComposerSpec) -> LayerSize {
    LayerSize::Kd {
        vocab,
        k: spec.k,
        dims: spec.dims,
        code_dim: spec.code_dim,
        composer_params: spec.composer_params(),
    }
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct FitRun {
    pub artifacts: Artifacts,
    pub report: RunReport,
    pub history: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub diverged_at: Option<u64>,
}

/// Method tag of a training configuration.
pub fn method_tag(cfg: &ExperimentConfig) -> String {
    let base = match (cfg.layer, cfg.codes) {
        (LayerKind::Full, _) => return "full".into(),
        (LayerKind::Kd, CodeSource::Learned) => format!("kd-{}", cfg.composer_kind().tag()),
        (LayerKind::Kd, CodeSource::Random) => "random-codes".into(),
        (LayerKind::Kd, CodeSource::Pretrained) => "pretrained-codes".into(),
    };
    match cfg.guidance {
        GuidanceMode::None => base,
        GuidanceMode::Odg => format!("{base}+odg"),
        GuidanceMode::Pdg => format!("{base}+pdg"),
    }
}

fn config_echo(cfg: &ExperimentConfig, vocab: usize) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v["vocab"] = vocab.into();
    v
}

fn without_guidance(cfg: &ExperimentConfig) -> TrainConfig {
    let mut t = cfg.train_config();
    t.guidance.mode = GuidanceMode::None;
    t
}

/// Trains a full embedding layer on the task: the reference for
/// classification baselines.
fn full_reference(cfg: &ExperimentConfig, task: &TaskImpl) -> Result<(Tensor, ParamStore)> {
    let out = fit(&without_guidance(cfg), task.as_task(), LayerSpec::Full, None)?;
    let head = task_params(task, &out.params);
    Ok((out.embedding.expect("full layer"), head))
}

fn task_params(task: &TaskImpl, params: &ParamStore) -> ParamStore {
    let mut head = ParamStore::new();
    let names = task.as_task().init_params(&mut derived(0, 0));
    for (name, _) in names.iter() {
        if let Some(t) = params.get(name) {
            head.insert(name, t.clone());
        }
    }
    head
}

/// Pre-trained embeddings `U`: the reconstruction target, the configured
/// file, or a freshly trained full layer.
fn pretrained_embeddings(cfg: &ExperimentConfig, data: &Dataset, task: &TaskImpl) -> Result<Tensor> {
    match data {
        Dataset::Reconstruction { target, .. } => Ok(target.clone()),
        Dataset::Classification { pretrained: Some(u), .. } => Ok(u.clone()),
        Dataset::Classification { pretrained: None, .. } => Ok(full_reference(cfg, task)?.0),
    }
}

/// Trains the configured layer and scores it.
pub fn fit_codes(cfg: &ExperimentConfig) -> Result<FitRun> {
    cfg.validate()?;
    let start = Instant::now();
    let data = Dataset::load(cfg)?;
    let task = TaskImpl::new(cfg, &data)?;
    let n = data.vocab().len();
    let dim = data.dim(cfg);
    let needs_u = cfg.layer == LayerKind::Kd && (cfg.guidance == GuidanceMode::Pdg || cfg.codes == CodeSource::Pretrained);
    let u = if needs_u { Some(pretrained_embeddings(cfg, &data, &task)?) } else { None };
    let layer = match cfg.layer {
        LayerKind::Full => LayerSpec::Full,
        LayerKind::Kd => {
            cfg.code_config(n).validate()?;
            let composer = cfg.composer_spec(dim);
            let frozen = match cfg.codes {
                CodeSource::Learned => None,
                CodeSource::Random => Some(random_codes(n, cfg.k, cfg.dims, cfg.seed)),
                CodeSource::Pretrained => {
                    let u = u.as_ref().expect("pre-trained embeddings");
                    Some(pretrained_codes(u, composer, &without_guidance(cfg), cfg.validation_fraction)?)
                }
            };
            LayerSpec::Kd { composer, frozen }
        }
    };
    let out = fit(&cfg.train_config(), task.as_task(), layer, u.as_ref())?;
    let symbols = data.vocab().symbols().to_vec();
    let artifacts = Artifacts {
        table: out.table.clone().map(|t| t.with_symbols(symbols)).transpose()?,
        // Scored as stored: 32-bit codebook parameters.
        codebook: out.codebook.as_ref().map(CodeBook::rounded_to_f32),
        embedding: out.embedding.clone(),
        head: task_params(&task, &out.params),
    };
    let reference = match &data {
        Dataset::Reconstruction { target, .. } => Some(target.clone()),
        Dataset::Classification { pretrained, .. } => u.or_else(|| pretrained.clone()),
    };
    let layer = artifacts.layer_size(cfg.full_bits)?;
    let mut report = score(cfg, &data, &task, &artifacts.embeddings()?, &artifacts.head, layer, method_tag(cfg), reference.as_ref())?;
    if cfg.timing {
        report.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    Ok(FitRun { artifacts, report, history: out.history, best_epoch: out.best_epoch, diverged_at: out.diverged_at })
}

/// Scores stored artifacts against the configured data.
pub fn evaluate(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<RunReport> {
    let data = Dataset::load(cfg)?;
    let task = TaskImpl::new(cfg, &data)?;
    if let Some(t) = &artifacts.table {
        if t.symbols() != data.vocab().symbols() {
            return Err(Error::invalid("code table symbols differ from the configured vocabulary"));
        }
    }
    let reference = match &data {
        Dataset::Reconstruction { target, .. } => Some(target.clone()),
        Dataset::Classification { pretrained, .. } => pretrained.clone(),
    };
    let layer = artifacts.layer_size(cfg.full_bits)?;
    score(cfg, &data, &task, &artifacts.embeddings()?, &artifacts.head, layer, method_tag(cfg), reference.as_ref())
}

#[allow(clippy::too_many_arguments)]
fn score(
    cfg: &ExperimentConfig,
    data: &Dataset,
    task: &TaskImpl,
    embeddings: &Tensor,
    head: &ParamStore,
    layer: LayerSize,
    method: String,
    reference: Option<&Tensor>,
) -> Result<RunReport> {
    let n = data.vocab().len();
    let dim = data.dim(cfg);
    if embeddings.shape() != [n, dim] {
        return Err(Error::invalid(format!("embeddings {:?}, expected [{n}, {dim}]", embeddings.shape())));
    }
    let mut echo = config_echo(cfg, n);
    if let LayerSize::Kd { k, dims, code_dim, .. } = layer {
        echo["k"] = k.into();
        echo["dims"] = dims.into();
        echo["code_dim"] = code_dim.into();
    }
    let mut report = RunReport::new(method, echo, layer, dim, cfg.full_bits);
    match task {
        TaskImpl::Reconstruction(t) => {
            report.reconstruction_error = Some(t.loss(embeddings)?);
            report.task_loss = Some(t.loss_on(embeddings, t.validation_rows())?);
        }
        TaskImpl::Classification(t) => {
            let v = t.evaluate(embeddings, head, t.held_out())?;
            report.task_loss = Some(v.loss);
            report.task_metric = v.metric;
            if let Some(u) = reference {
                let sq: f64 = u.data().iter().zip(embeddings.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                report.reconstruction_error = Some(sq / n as f64);
            }
        }
    }
    if let Some(u) = reference {
        if cfg.nn_k < n {
            report.nn_overlap = Some(nn_overlap(u, embeddings, cfg.nn_k)?);
        }
    }
    report.check()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Full,
    LowRank,
    ProductQuantization,
    Scalar,
    RandomCodes,
    PretrainedCodes,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::Full,
        Baseline::LowRank,
        Baseline::ProductQuantization,
        Baseline::Scalar,
        Baseline::RandomCodes,
        Baseline::PretrainedCodes,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Baseline::Full => "full",
            Baseline::LowRank => "low-rank",
            Baseline::ProductQuantization => "pq",
            Baseline::Scalar => "scalar",
            Baseline::RandomCodes => "random-codes",
            Baseline::PretrainedCodes => "pretrained-codes",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.tag() == s || (s == "product-quantization" && *b == Baseline::ProductQuantization))
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }
}

/// Runs one comparison method. Matrix compressions of a classifier are
/// applied after training a full layer and reuse its affine head.
pub fn run_baseline(cfg: &ExperimentConfig, method: Baseline) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = match method {
        Baseline::RandomCodes | Baseline::PretrainedCodes => {
            let mut c = cfg.clone();
            c.layer = LayerKind::Kd;
            c.codes = if method == Baseline::RandomCodes { CodeSource::Random } else { CodeSource::Pretrained };
            c.guidance = GuidanceMode::None;
            return Ok(fit_codes(&c)?.report);
        }
        _ => {
            let data = Dataset::load(cfg)?;
            let task = TaskImpl::new(cfg, &data)?;
            let (u, head) = match &data {
                Dataset::Reconstruction { target, .. } => (target.clone(), ParamStore::new()),
                Dataset::Classification { .. } => full_reference(cfg, &task)?,
            };
            let (n, d) = (u.row_count(), u.row_len());
            let (approx, layer, tag) = match method {
                Baseline::Full => (u.clone(), LayerSize::Full { vocab: n, dim: d, convention: cfg.full_bits }, "full".to_string()),
                Baseline::LowRank => {
                    let lr = LowRankConfig { max_steps: cfg.low_rank_steps, seed: cfg.seed, ..Default::default() };
                    let fit = low_rank_fit(&u, cfg.low_rank, &lr)?;
                    (fit.reconstruct(), LayerSize::LowRank { vocab: n, dim: d, rank: cfg.low_rank }, format!("low-rank-{}", cfg.low_rank))
                }
                Baseline::ProductQuantization => {
                    let pq = product_quantize(&u, cfg.pq_subspaces, cfg.pq_centroids, cfg.seed)?;
                    let tag = format!("pq-{}x{}", cfg.pq_centroids, pq.block_width());
                    (pq.reconstruct(), pq.layer_size(), tag)
                }
                Baseline::Scalar => {
                    let q = scalar_quantize(&u, cfg.scalar_bits)?;
                    (q.dequantize(), q.layer_size(), format!("scalar-{}bit", cfg.scalar_bits))
                }
                Baseline::RandomCodes | Baseline::PretrainedCodes => unreachable!(),
            };
            score(cfg, &data, &task, &approx, &head, layer, tag, Some(&u))?
        }
    };
    if cfg.timing {
        report.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    Ok(report)
}

/// Stages of the ablation axis, each adding one feature to the previous.
pub const ABLATION_STAGES: [&str; 6] = ["cr", "ste", "schedule", "entropy", "pdg-no-ae", "pdg"];

/// Sets the configuration key behind `axis` to `value`.
pub fn apply_axis(target: &mut ExperimentConfig, axis: SweepAxis, value: &str) -> Result<()> {
    let mut next = target.clone();
    let cfg = &mut next;
    let int = || value.parse::<usize>().map_err(|_| Error::invalid(format!("`{value}` is not a count")));
    match axis {
        SweepAxis::K => cfg.k = int()?,
        SweepAxis::D => cfg.dims = int()?,
        SweepAxis::CodeDim => cfg.code_dim = int()?,
        SweepAxis::Composer => {
            cfg.composer = match value {
                "linear-sum" => ComposerName::LinearSum,
                "linear-hidden" => ComposerName::LinearHidden,
                "lstm" => ComposerName::Lstm,
                other => return Err(Error::invalid(format!("unknown composer `{other}`"))),
            }
        }
        SweepAxis::Guidance => {
            cfg.guidance = match value {
                "none" => GuidanceMode::None,
                "odg" => GuidanceMode::Odg,
                "pdg" => GuidanceMode::Pdg,
                other => return Err(Error::invalid(format!("unknown guidance `{other}`"))),
            }
        }
        SweepAxis::Ablation => {
            let stage = ABLATION_STAGES
                .iter()
                .position(|s| *s == value)
                .ok_or_else(|| Error::invalid(format!("unknown ablation stage `{value}`")))?;
            cfg.straight_through = stage >= 1;
            if stage < 2 {
                cfg.tau_schedule = crate::trainer::ScheduleKind::Constant;
            }
            if stage < 3 {
                cfg.entropy_weight = 0.0;
            }
            cfg.guidance = if stage >= 4 { GuidanceMode::Pdg } else { GuidanceMode::None };
            cfg.pdg_autoencoder = stage >= 5;
        }
    }
    next.validate()?;
    *target = next;
    Ok(())
}

/// One fit per value and seed; the same seeds are used for every value so
/// runs are paired. Report method tags read `<axis>=<value>`.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], seeds: &[u64]) -> SweepOutcome {
    let mut all = SweepOutcome::default();
    for &seed in seeds {
        let out = sweep(axis, values, |axis, value| {
            let mut c = cfg.clone();
            c.seed = seed;
            apply_axis(&mut c, axis, value)?;
            let mut report = fit_codes(&c)?.report;
            report.method = format!("{}={value}", axis.key());
            Ok(report)
        });
        all.reports.extend(out.reports);
        all.failures.extend(out.failures);
    }
    all
}

/// Symbols grouped by code plus the similarity statistic.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub groups: Vec<(String, Vec<String>)>,
    pub probe: Option<CodeProbe>,
}

pub fn probe_codes(cfg: &ExperimentConfig, table: &DiscreteCodeTable, embeddings: &Tensor) -> Result<ProbeResult> {
    Ok(ProbeResult {
        groups: group_by_code(table),
        probe: code_semantics_probe(table, embeddings, cfg.probe_trials, cfg.seed)?,
    })
}

/// Listing of the `limit` most populated codes, one per line.
pub fn render_probe(result: &ProbeResult, limit: usize) -> String {
    let mut out = String::new();
    for (code, symbols) in result.groups.iter().take(limit) {
        out.push_str(&format!("{code}\t{}\n", symbols.join(" ")));
    }
    match &result.probe {
        Some(p) => out.push_str(&format!(
            "intra-code cosine {:.4} over {} pairs, global {:.4}, null std {:.4}, z {:.2}\n",
            p.intra,
            p.intra_pairs,
            p.global,
            p.null_std,
            p.z_score()
        )),
        None => out.push_str("no shared codes: probe N/A\n"),
    }
    out
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Named tensors as a JSON object; values round-trip exactly.
pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let map: BTreeMap<&str, StoredTensor> = store
        .iter()
        .map(|(k, t)| (k, StoredTensor { shape: t.shape().to_vec(), data: t.data().to_vec() }))
        .collect();
    std::fs::write(path, serde_json::to_string(&map)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, StoredTensor> = serde_json::from_str(&text)?;
    let mut store = ParamStore::new();
    for (k, t) in map {
        store.insert(k, Tensor::new(t.shape, t.data)?);
    }
    Ok(store)
}

pub const CODES_FILE: &str = "codes.txt";
pub const CODEBOOK_FILE: &str = "codebook.kdcb";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const HEAD_FILE: &str = "head.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const TABLE_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Writes whichever artifacts are present into `dir`.
pub fn save_artifacts(dir: &Path, artifacts: &Artifacts, vocab: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(t) = &artifacts.table {
        t.save(&dir.join(CODES_FILE))?;
    }
    if let Some(b) = &artifacts.codebook {
        b.save(&dir.join(CODEBOOK_FILE))?;
    }
    if let Some(e) = &artifacts.embedding {
        write_embeddings(&dir.join(EMBEDDINGS_FILE), &VocabTable::new(vocab.to_vec())?, e)?;
    }
    if !artifacts.head.is_empty() {
        save_params(&dir.join(HEAD_FILE), &artifacts.head)?;
    }
    Ok(())
}

pub fn load_artifacts(dir: &Path) -> Result<Artifacts> {
    let path = |f: &str| dir.join(f);
    let mut a = Artifacts::default();
    if path(CODES_FILE).exists() {
        a.table = Some(DiscreteCodeTable::load(&path(CODES_FILE))?);
    }
    if path(CODEBOOK_FILE).exists() {
        a.codebook = Some(CodeBook::load(&path(CODEBOOK_FILE))?);
    }
    if path(EMBEDDINGS_FILE).exists() {
        a.embedding = Some(load_embeddings(&path(EMBEDDINGS_FILE))?.1);
    }
    if path(HEAD_FILE).exists() {
        a.head = load_params(&path(HEAD_FILE))?;
    }
    Ok(a)
}

/// Saves a training run: artifacts, report (structured and table) and the
/// metrics stream.
pub fn save_run(dir: &Path, run: &FitRun, vocab: &[String]) -> Result<()> {
    save_artifacts(dir, &run.artifacts, vocab)?;
    write_reports(&dir.join(REPORT_FILE), std::slice::from_ref(&run.report))?;
    let table = crate::tasks::render_table(std::slice::from_ref(&run.report));
    std::fs::write(dir.join(TABLE_FILE), table).map_err(|e| Error::io(dir.join(TABLE_FILE), e))?;
    write_metrics(&dir.join(METRICS_FILE), &run.history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::read_reports;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            vocab: 60,
            dim: 8,
            clusters: 6,
            k: 4,
            dims: 3,
            code_dim: 8,
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.01,
            nn_k: 5,
            probe_trials: 20,
            ..Default::default()
        }
    }

    fn small_classification() -> ExperimentConfig {
        ExperimentConfig { task: TaskKind::Classification, vocab: 200, docs: 200, dim: 8, k: 8, ..small() }
    }

    #[test]
    fn fit_is_deterministic_and_checked() {
        let a = fit_codes(&small()).unwrap();
        let b = fit_codes(&small()).unwrap();
        assert_eq!(a.artifacts.table, b.artifacts.table);
        assert_eq!(a.report, b.report);
        a.report.check().unwrap();
        assert_eq!(a.report.method, "kd-linear-sum");
        assert_eq!(a.history.len(), b.history.len());
    }

    #[test]
    fn saved_artifacts_evaluate_to_the_same_report() {
        let cfg = small_classification();
        let run = fit_codes(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vocab = Dataset::load(&cfg).unwrap().vocab().symbols().to_vec();
        save_run(dir.path(), &run, &vocab).unwrap();
        let loaded = load_artifacts(dir.path()).unwrap();
        assert_eq!(loaded.head, run.artifacts.head);
        assert_eq!(evaluate(&cfg, &loaded).unwrap(), run.report);
        assert_eq!(read_reports(&dir.path().join(REPORT_FILE)).unwrap(), vec![run.report]);
    }

    #[test]
    fn corrupted_echo_fails_the_check() {
        let mut r = fit_codes(&small()).unwrap().report;
        r.config["k"] = 64.into();
        assert!(r.check().is_err());
    }

    #[test]
    fn every_baseline_reports() {
        let cfg = ExperimentConfig { low_rank: 2, low_rank_steps: 300, pq_subspaces: 2, pq_centroids: 4, ..small() };
        for b in Baseline::ALL {
            let r = run_baseline(&cfg, b).unwrap();
            r.check().unwrap();
            assert!(r.reconstruction_error.is_some(), "{}", b.tag());
        }
        let full = run_baseline(&cfg, Baseline::Full).unwrap();
        assert_eq!(full.reconstruction_error, Some(0.0));
        assert_eq!(full.nn_overlap, Some(1.0));
        assert_eq!(run_baseline(&cfg, Baseline::Scalar).unwrap().method, "scalar-8bit");
    }

    #[test]
    fn classification_baselines_share_the_head() {
        let cfg = ExperimentConfig { pq_subspaces: 2, pq_centroids: 8, ..small_classification() };
        let full = run_baseline(&cfg, Baseline::Full).unwrap();
        let scalar = run_baseline(&cfg, Baseline::Scalar).unwrap();
        assert!(full.task_metric.is_some() && scalar.task_metric.is_some());
        assert_eq!(scalar.bits, full.bits / 4 + 64);
    }

    #[test]
    fn axes_apply() {
        let mut c = small();
        apply_axis(&mut c, SweepAxis::D, "4").unwrap();
        apply_axis(&mut c, SweepAxis::Composer, "lstm").unwrap();
        assert_eq!((c.dims, c.composer), (4, ComposerName::Lstm));
        assert!(apply_axis(&mut c, SweepAxis::K, "1").is_err());
        apply_axis(&mut c, SweepAxis::Ablation, "cr").unwrap();
        assert!(!c.straight_through && c.entropy_weight == 0.0 && c.guidance == GuidanceMode::None);
        let mut c = small();
        apply_axis(&mut c, SweepAxis::Ablation, "pdg-no-ae").unwrap();
        assert!(c.straight_through && c.entropy_weight > 0.0 && c.guidance == GuidanceMode::Pdg && !c.pdg_autoencoder);
    }

    #[test]
    fn sweep_pairs_seeds_and_keeps_failures() {
        let values: Vec<String> = ["3", "0", "4"].iter().map(|s| s.to_string()).collect();
        let out = run_sweep(&small(), SweepAxis::D, &values, &[0, 1]);
        assert_eq!(out.reports.len(), 4);
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.reports[0].method, "dims=3");
        assert_eq!(out.reports[0].config["seed"], 0);
        assert_eq!(out.reports[2].config["seed"], 1);
    }

    #[test]
    fn probe_lists_groups() {
        let cfg = ExperimentConfig { lossy: true, k: 2, dims: 2, ..small() };
        let run = fit_codes(&cfg).unwrap();
        let Dataset::Reconstruction { target, .. } = Dataset::load(&cfg).unwrap() else { unreachable!() };
        let p = probe_codes(&cfg, run.artifacts.table.as_ref().unwrap(), &target).unwrap();
        assert!(p.probe.is_some());
        let text = render_probe(&p, 2);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains('-'));
    }
}
