//! The training loop: tempered softmax over code logits, straight-through
//! selection, composition, guidance, and a task loss, optimized with sparse
//! row updates for per-symbol parameters.

mod metrics;
mod optim;
mod schedule;

pub use metrics::{read_metrics, write_metrics, MetricRecord, RecordKind};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{temperature, ScheduleKind, TauSchedule};

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codebook::{entropy_node, extract_codes, init_logits, DiscreteCodeTable};
use crate::composer::{CodeBook, ComposerSpec, Selection};
use crate::diffcore::{DiffError, GraphBuilder, Inputs, NodeId, ParamStore, Tensor};
use crate::guidance::{
    autoencoder_node, distillation_node, odg_mask, odg_mix_node, odg_regularizer_node, ramp, Encoder, EncoderSpec,
    GuidanceConfig, GuidanceMode,
};
use crate::rng::{derived, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub tau_schedule: ScheduleKind,
    pub tau_init: f64,
    pub tau_min: f64,
    /// Fraction of all training steps over which `tau` decays.
    pub tau_decay_fraction: f64,
    pub entropy_weight: f64,
    /// Fraction of all training steps over which the entropy weight ramps up.
    pub entropy_ramp: f64,
    /// Hard one-hot forward selection; `false` trains on the relaxed codes.
    pub straight_through: bool,
    /// Global gradient-norm cap; zero disables clipping.
    pub clip_norm: f64,
    pub logit_init_std: f64,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            tau_schedule: ScheduleKind::Exponential,
            tau_init: 1.0,
            tau_min: 0.1,
            tau_decay_fraction: 0.5,
            entropy_weight: 0.01,
            entropy_ramp: 0.1,
            straight_through: true,
            clip_norm: 5.0,
            logit_init_std: 0.01,
            guidance: GuidanceConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.tau_min > 0.0 && self.tau_init >= self.tau_min && self.tau_init.is_finite()) {
            return bad(format!("need tau_init >= tau_min > 0, got {} and {}", self.tau_init, self.tau_min));
        }
        for (name, v) in [("tau_decay_fraction", self.tau_decay_fraction), ("entropy_ramp", self.entropy_ramp)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.entropy_weight >= 0.0 && self.clip_norm >= 0.0 && self.logit_init_std > 0.0) {
            return bad("entropy_weight and clip_norm must be non-negative, logit_init_std positive".into());
        }
        self.guidance.validate()
    }

    pub fn schedule(&self, total_steps: u64) -> TauSchedule {
        TauSchedule {
            kind: self.tau_schedule,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            horizon: (self.tau_decay_fraction * total_steps as f64).round() as u64,
        }
    }
}

/// Validation outcome: the loss used for checkpoint selection plus an
/// optional task metric (accuracy for classification).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub metric: Option<f64>,
}

/// A supervised objective over symbol embeddings.
pub trait Task {
    fn vocab(&self) -> usize;
    /// Embedding width `d` the task consumes.
    fn dim(&self) -> usize;
    fn train_len(&self) -> usize;
    /// Sorted distinct symbols used by the given training examples.
    fn batch_symbols(&self, examples: &[usize]) -> Vec<usize>;
    /// Task parameters `Θ`.
    fn init_params(&self, _rng: &mut Rng) -> ParamStore {
        ParamStore::new()
    }
    /// Mean loss over `examples`; `emb` has one row per entry of `symbols`.
    fn loss_node(&self, g: &mut GraphBuilder, emb: NodeId, examples: &[usize], symbols: &[usize]) -> NodeId;
    /// Evaluates held-out data given every symbol's embedding (`N×d`).
    fn validate(&self, embeddings: &Tensor, params: &ParamStore) -> Result<Validation>;
}

/// The embedding layer being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// A free `N×d` embedding matrix.
    Full,
    /// Composed embeddings; codes are learned, or fixed when `frozen` is set.
    Kd { composer: ComposerSpec, frozen: Option<DiscreteCodeTable> },
}

const LOGITS: &str = "pi";
const ODG_U: &str = "odg.u";
const FULL_EMB: &str = "emb";
/// Per-symbol parameters, updated only on the rows of the current batch.
const ROW_PARAMS: [&str; 3] = [LOGITS, ODG_U, FULL_EMB];

fn batch_name(name: &str) -> String {
    format!("{name}@batch")
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let width = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// Trained artifacts at the selected checkpoint.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub table: Option<DiscreteCodeTable>,
    pub codebook: Option<CodeBook>,
    /// The full embedding matrix, for [`LayerSpec::Full`].
    pub embedding: Option<Tensor>,
    /// Every trained tensor at the checkpoint, including `pi` and `Θ`.
    pub params: ParamStore,
    pub history: Vec<MetricRecord>,
    /// Epoch of the checkpoint; 0 is the initial state.
    pub best_epoch: usize,
    pub best: Validation,
    pub diverged_at: Option<u64>,
}

impl FitOutput {
    /// `N×d` inference embeddings of the checkpoint.
    pub fn embeddings(&self) -> Result<Tensor> {
        match (&self.embedding, &self.table, &self.codebook) {
            (Some(e), _, _) => Ok(e.clone()),
            (None, Some(t), Some(b)) => b.compose_batch(t),
            _ => Err(Error::invalid("fit output holds no embedding layer")),
        }
    }
}

/// Loss terms of one batch, per batch symbol and unweighted.
#[derive(Default)]
struct Terms {
    task: Option<NodeId>,
    entropy: Option<NodeId>,
    odg: Option<NodeId>,
    autoencoder: Option<NodeId>,
    distillation: Option<NodeId>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    task: &'a dyn Task,
    layer: LayerSpec,
    pretrained: Option<&'a Tensor>,
    store: ParamStore,
    optimizer: Optimizer,
    rng: Rng,
    schedule: TauSchedule,
    total_steps: u64,
    step: u64,
    epoch: usize,
    history: Vec<MetricRecord>,
}

impl<'a> Trainer<'a> {
    /// Initializes every parameter from `config.seed`. `pretrained` supplies
    /// the `N×d` embeddings used by pre-trained distillation.
    pub fn new(config: TrainConfig, task: &'a dyn Task, layer: LayerSpec, pretrained: Option<&'a Tensor>) -> Result<Self> {
        config.validate()?;
        let (n, d) = (task.vocab(), task.dim());
        let mut init = derived(config.seed, 0);
        let mut store = ParamStore::new();
        let guidance = &config.guidance;
        match &layer {
            LayerSpec::Full => {
                let bound = 1.0 / (d as f64).sqrt();
                store.insert(FULL_EMB, uniform(&mut init, vec![n, d], bound));
            }
            LayerSpec::Kd { composer, frozen } => {
                if composer.out_dim != d {
                    return Err(Error::invalid(format!("composer emits d={}, task needs d={d}", composer.out_dim)));
                }
                CodeBook::init(*composer, &mut init)?.install(&mut store);
                match frozen {
                    Some(t) if t.len() != n || t.k() != composer.k || t.dims() != composer.dims => {
                        return Err(Error::invalid("frozen code table does not match vocabulary or composer"));
                    }
                    Some(_) => {}
                    None => {
                        store.insert(LOGITS, init_logits(n, composer.dims, composer.k, config.logit_init_std, &mut init));
                    }
                }
                if guidance.mode == GuidanceMode::Odg {
                    store.insert(ODG_U, uniform(&mut init, vec![n, d], 1.0 / (d as f64).sqrt()));
                }
                if guidance.mode == GuidanceMode::Pdg {
                    if frozen.is_some() {
                        return Err(Error::invalid("pre-trained distillation needs learned codes"));
                    }
                    let u = pretrained.ok_or_else(|| Error::invalid("pre-trained distillation needs embeddings"))?;
                    if u.shape() != [n, d] {
                        return Err(Error::invalid(format!("pre-trained embeddings {:?}, expected [{n}, {d}]", u.shape())));
                    }
                    if guidance.autoencoder {
                        let spec = EncoderSpec { in_dim: d, hidden: guidance.encoder_width, dims: composer.dims, k: composer.k };
                        Encoder::init(spec, &mut init)?.install(&mut store);
                    }
                }
            }
        }
        for (name, t) in task.init_params(&mut init).iter() {
            store.insert(name, t.clone());
        }
        let per_epoch = task.train_len().div_ceil(config.batch_size) as u64;
        let total_steps = per_epoch * config.epochs as u64;
        Ok(Self {
            schedule: config.schedule(total_steps),
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            rng: derived(config.seed, 1),
            config,
            task,
            layer,
            pretrained,
            store,
            total_steps,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    pub fn tau(&self) -> f64 {
        temperature(self.step, &self.schedule)
    }

    /// Codes currently selected: the frozen table, or the argmax of `pi`.
    pub fn codes(&self) -> Result<Option<DiscreteCodeTable>> {
        match &self.layer {
            LayerSpec::Full => Ok(None),
            LayerSpec::Kd { frozen: Some(t), .. } => Ok(Some(t.clone())),
            LayerSpec::Kd { frozen: None, .. } => Ok(Some(extract_codes(self.store.get(LOGITS).expect("logits"), None)?)),
        }
    }

    pub fn codebook(&self) -> Result<Option<CodeBook>> {
        match &self.layer {
            LayerSpec::Full => Ok(None),
            LayerSpec::Kd { composer, .. } => Ok(Some(CodeBook::from_params(*composer, &self.store)?)),
        }
    }

    /// Inference embeddings (`N×d`) from hard code lookups.
    pub fn embeddings(&self) -> Result<Tensor> {
        match &self.layer {
            LayerSpec::Full => Ok(self.store.get(FULL_EMB).expect("embedding").clone()),
            LayerSpec::Kd { .. } => {
                let table = self.codes()?.expect("kd codes");
                self.codebook()?.expect("kd codebook").compose_batch(&table)
            }
        }
    }

    /// Embeddings of `rows` evaluated through the training graph's
    /// straight-through selection at the current temperature.
    pub fn embeddings_straight_through(&self, rows: &[usize]) -> Result<Tensor> {
        let LayerSpec::Kd { composer, frozen: None } = &self.layer else {
            return Err(Error::invalid("straight-through evaluation needs learned codes"));
        };
        let mut store = ParamStore::new();
        self.codebook()?.expect("kd codebook").install(&mut store);
        store.insert(LOGITS, gather_rows(self.store.get(LOGITS).expect("logits"), rows));
        let mut g = GraphBuilder::new();
        let pi = g.param(LOGITS);
        let probs = g.softmax(pi, self.tau());
        let hard = g.straight_through(probs);
        let sel = composer.split_selection(&mut g, hard, rows.len());
        let out = composer.compose_node(&mut g, &Selection::Relaxed(sel));
        let graph = g.build();
        let inputs = Inputs::new();
        Ok(graph.evaluate(&store, &inputs)?.get(out).clone())
    }

    pub fn validate(&self) -> Result<Validation> {
        self.task.validate(&self.embeddings()?, &self.store)
    }

    /// One pass over the training examples in seeded-shuffled minibatches.
    /// On a non-finite loss or gradient the parameters keep their last
    /// finite values and [`Error::Diverged`] is returned.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.task.train_len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            total += self.step_batch(batch)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches.max(1) as f64)
    }

    /// One optimizer update on the given examples; returns the task loss.
    pub fn step_batch(&mut self, examples: &[usize]) -> Result<f64> {
        let symbols = self.task.batch_symbols(examples);
        let bs = symbols.len();
        let (t, total) = (self.step, self.total_steps);
        let tau = temperature(t, &self.schedule);
        let gamma = ramp(self.config.entropy_weight, self.config.entropy_ramp, t, total);
        let guidance = self.config.guidance.clone();
        for name in ROW_PARAMS {
            if let Some(full) = self.store.get(name) {
                let rows = gather_rows(full, &symbols);
                self.store.insert(batch_name(name), rows);
            }
        }

        let mut g = GraphBuilder::new();
        let mut terms = Terms::default();
        let mut weighted: Vec<(NodeId, f64)> = Vec::new();
        let inv = 1.0 / bs as f64;
        let emb = match &self.layer {
            LayerSpec::Full => g.param(&batch_name(FULL_EMB)),
            LayerSpec::Kd { composer, frozen: Some(table) } => {
                let cols = (0..composer.dims).map(|j| table.column(j, &symbols)).collect();
                composer.compose_node(&mut g, &Selection::Hard(cols))
            }
            LayerSpec::Kd { composer, frozen: None } => {
                let pi = g.param(&batch_name(LOGITS));
                let probs = g.softmax(pi, tau);
                let sel = if self.config.straight_through { g.straight_through(probs) } else { probs };
                let rows = composer.split_selection(&mut g, sel, bs);
                let fc = composer.compose_node(&mut g, &Selection::Relaxed(rows));
                if self.config.entropy_weight > 0.0 {
                    let h = entropy_node(&mut g, probs);
                    terms.entropy = Some(h);
                    weighted.push((h, gamma * inv));
                }
                if guidance.mode == GuidanceMode::Pdg {
                    let u_rows = gather_rows(self.pretrained.expect("checked at construction"), &symbols);
                    let u = g.constant(u_rows);
                    let encoded = if guidance.autoencoder {
                        let enc = EncoderSpec {
                            in_dim: composer.out_dim,
                            hidden: guidance.encoder_width,
                            dims: composer.dims,
                            k: composer.k,
                        };
                        let ae = autoencoder_node(&mut g, &enc, composer, u, bs, tau);
                        terms.autoencoder = Some(ae);
                        weighted.push((ae, inv));
                        Some(enc.logits_node(&mut g, u, bs))
                    } else {
                        None
                    };
                    let dist =
                        distillation_node(&mut g, composer, pi, u, encoded, bs, tau, guidance.alpha, guidance.beta);
                    terms.distillation = Some(dist);
                    weighted.push((dist, inv));
                }
                fc
            }
        };
        let emb = if guidance.mode == GuidanceMode::Odg && matches!(self.layer, LayerSpec::Kd { .. }) {
            let u = g.param(&batch_name(ODG_U));
            let mask = odg_mask(&mut self.rng, bs, self.task.dim(), guidance.p, guidance.mask);
            let reg = odg_regularizer_node(&mut g, u, emb, 1.0);
            terms.odg = Some(reg);
            weighted.push((reg, guidance.lambda_at(t, total) * inv));
            odg_mix_node(&mut g, u, emb, mask)
        } else {
            emb
        };
        let task_loss = self.task.loss_node(&mut g, emb, examples, &symbols);
        terms.task = Some(task_loss);
        let mut objective = task_loss;
        for (node, w) in weighted {
            if w != 0.0 {
                let scaled = g.scale(node, w);
                objective = g.add(objective, scaled);
            }
        }
        let graph = g.build();

        let diverged = |message: String| Error::Diverged { step: t, message };
        let no_inputs = Inputs::new();
        let evaluated = graph.evaluate(&self.store, &no_inputs);
        let values = match evaluated {
            Ok(v) => v,
            Err(DiffError::NonFinite { node }) => {
                self.drop_batch_params();
                return Err(diverged(format!("non-finite value at {node}")));
            }
            Err(e) => {
                self.drop_batch_params();
                return Err(e.into());
            }
        };
        let per_symbol = |n: Option<NodeId>| n.map(|n| values.scalar(n) * inv);
        let mut record = MetricRecord {
            kind: RecordKind::Step,
            step: t,
            epoch: self.epoch,
            tau,
            task_loss: terms.task.map(|n| values.scalar(n)),
            entropy: per_symbol(terms.entropy),
            odg_loss: per_symbol(terms.odg),
            autoencoder_loss: per_symbol(terms.autoencoder),
            distillation_loss: per_symbol(terms.distillation),
            total_loss: Some(values.scalar(objective)),
            grad_norm: None,
            val_loss: None,
            val_metric: None,
        };
        let names: Vec<String> = graph.param_names().map(str::to_string).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let grads = graph.gradient(&values, objective, &refs)?;
        drop(values);
        let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            self.drop_batch_params();
            return Err(diverged("non-finite gradient".into()));
        }
        record.grad_norm = Some(norm);
        let clip = self.config.clip_norm;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };

        self.optimizer.begin_step();
        for (name, grad) in &grads {
            if let Some(full) = name.strip_suffix("@batch") {
                let param = self.store.get_mut(full).expect("row parameter");
                self.optimizer.update_rows(full, param, &symbols, grad, scale);
            } else {
                let param = self.store.get_mut(name).expect("graph parameter");
                self.optimizer.update(name, param, grad, scale);
            }
        }
        self.drop_batch_params();
        self.step += 1;
        let loss = record.task_loss.unwrap_or(f64::NAN);
        self.history.push(record);
        Ok(loss)
    }

    fn drop_batch_params(&mut self) {
        for name in ROW_PARAMS {
            self.store.remove(&batch_name(name));
        }
    }

    fn record_validation(&mut self, v: Validation) {
        let rec = MetricRecord::validation(self.step, self.epoch, self.tau(), v.loss, v.metric);
        self.history.push(rec);
    }

    /// Trains for `config.epochs`, validating with hard codes after every
    /// epoch (and once before training) and keeping the best checkpoint.
    pub fn fit(mut self) -> Result<FitOutput> {
        let mut best = self.validate()?;
        self.record_validation(best);
        let mut best_epoch = 0;
        let mut best_store = self.store.clone();
        let mut diverged_at = None;
        for epoch in 1..=self.config.epochs {
            match self.train_epoch() {
                Ok(train_loss) => debug!("epoch {epoch}: train loss {train_loss:.6}"),
                Err(Error::Diverged { step, message }) => {
                    warn!("training stopped at step {step}: {message}");
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
            let v = self.validate()?;
            self.record_validation(v);
            if v.loss < best.loss {
                best = v;
                best_epoch = epoch;
                best_store = self.store.clone();
            }
        }
        self.store = best_store;
        let table = self.codes()?;
        let codebook = self.codebook()?;
        let embedding = match self.layer {
            LayerSpec::Full => self.store.get(FULL_EMB).cloned(),
            LayerSpec::Kd { .. } => None,
        };
        Ok(FitOutput {
            table,
            codebook,
            embedding,
            params: self.store,
            history: self.history,
            best_epoch,
            best,
            diverged_at,
        })
    }
}

fn uniform(rng: &mut Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

/// Convenience wrapper: builds a [`Trainer`] and runs [`Trainer::fit`].
pub fn fit(config: &TrainConfig, task: &dyn Task, layer: LayerSpec, pretrained: Option<&Tensor>) -> Result<FitOutput> {
    Trainer::new(config.clone(), task, layer, pretrained)?.fit()
}
