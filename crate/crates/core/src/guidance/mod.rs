//! Guidance from continuous embeddings: online distillation (ODG) mixes a
//! free embedding `u` into the composed one during training; pre-trained
//! distillation (PDG) ties code logits to an autoencoder of fixed
//! embeddings.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::composer::{CodeBook, ComposerSpec, Selection};
use crate::diffcore::{GraphBuilder, Inputs, NodeId, ParamStore, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    None,
    Odg,
    Pdg,
}

/// Granularity of the ODG Bernoulli mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskGranularity {
    #[default]
    Coordinate,
    Symbol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Probability that the mask keeps `u`.
    pub p: f64,
    pub lambda: f64,
    /// Fraction of training over which `lambda` ramps up from zero.
    pub lambda_ramp: f64,
    pub mask: MaskGranularity,
    pub alpha: f64,
    pub beta: f64,
    /// Train the autoencoder term alongside distillation.
    pub autoencoder: bool,
    pub encoder_width: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::None,
            p: 0.7,
            lambda: 1.0,
            lambda_ramp: 0.2,
            mask: MaskGranularity::Coordinate,
            alpha: 1.0,
            beta: 1.0,
            autoencoder: true,
            encoder_width: 256,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("guidance p must lie in [0, 1], got {}", self.p)));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("guidance {name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_ramp) {
            return Err(Error::Config(format!("lambda_ramp must lie in [0, 1], got {}", self.lambda_ramp)));
        }
        if self.encoder_width == 0 {
            return Err(Error::Config("encoder_width must be positive".into()));
        }
        Ok(())
    }

    /// ODG match weight after `step` of `total` steps.
    pub fn lambda_at(&self, step: u64, total: u64) -> f64 {
        ramp(self.lambda, self.lambda_ramp, step, total)
    }
}

/// Linear ramp from zero to `target` over the first `fraction` of `total`
/// steps.
pub fn ramp(target: f64, fraction: f64, step: u64, total: u64) -> f64 {
    let horizon = fraction * total as f64;
    if horizon <= 0.0 || step as f64 >= horizon {
        target
    } else {
        target * step as f64 / horizon
    }
}

/// Fresh `rows×d` 0/1 mask, one Bernoulli(p) draw per coordinate or per row.
pub fn odg_mask(rng: &mut Rng, rows: usize, d: usize, p: f64, granularity: MaskGranularity) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        match granularity {
            MaskGranularity::Coordinate => data.extend((0..d).map(|_| f64::from(rng.random_bool(p)))),
            MaskGranularity::Symbol => {
                let keep = f64::from(rng.random_bool(p));
                data.extend(std::iter::repeat_n(keep, d));
            }
        }
    }
    Tensor::new(vec![rows, d], data).expect("mask shape")
}

/// Training-time mixture `m⊙u + (1−m)⊙fc`.
pub fn odg_mix(u: &[f64], fc: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    if u.len() != fc.len() || u.len() != mask.len() {
        return Err(Error::invalid("odg_mix operands differ in length"));
    }
    Ok(u.iter().zip(fc).zip(mask).map(|((&u, &f), &m)| m * u + (1.0 - m) * f).collect())
}

/// Records `fc + m⊙(u − fc)`.
pub fn odg_mix_node(g: &mut GraphBuilder, u: NodeId, fc: NodeId, mask: Tensor) -> NodeId {
    let m = g.constant(mask);
    let diff = g.sub(u, fc);
    let kept = g.mul(m, diff);
    g.add(fc, kept)
}

/// Records `weight·‖stop_gradient(u) − fc‖²`.
pub fn odg_regularizer_node(g: &mut GraphBuilder, u: NodeId, fc: NodeId, weight: f64) -> NodeId {
    let frozen = g.stop_gradient(u);
    let se = g.squared_error(frozen, fc);
    g.scale(se, weight)
}

/// Shapes of the encoder `g`: affine, tanh, affine to `D·K` logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_dim: usize,
    pub hidden: usize,
    pub dims: usize,
    pub k: usize,
}

impl EncoderSpec {
    pub fn param_shapes(&self) -> [(&'static str, Vec<usize>); 4] {
        [
            ("enc.w1", vec![self.in_dim, self.hidden]),
            ("enc.b1", vec![self.hidden]),
            ("enc.w2", vec![self.hidden, self.dims * self.k]),
            ("enc.b2", vec![self.dims * self.k]),
        ]
    }

    /// Records `g(u)` for a `B×d` node, returning `B×D×K` logits.
    pub fn logits_node(&self, g: &mut GraphBuilder, u: NodeId, batch: usize) -> NodeId {
        let (w1, b1, w2, b2) = (g.param("enc.w1"), g.param("enc.b1"), g.param("enc.w2"), g.param("enc.b2"));
        let h = g.matmul(u, w1);
        let h = g.add(h, b1);
        let h = g.tanh(h);
        let z = g.matmul(h, w2);
        let z = g.add(z, b2);
        g.reshape(z, &[batch, self.dims, self.k])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    params: ParamStore,
}

impl Encoder {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        if spec.in_dim == 0 || spec.hidden == 0 || spec.dims == 0 || spec.k < 2 {
            return Err(Error::invalid(format!("degenerate encoder shape {spec:?}")));
        }
        let mut params = ParamStore::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.contains(".b") {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn install(&self, store: &mut ParamStore) {
        for (name, t) in self.params.iter() {
            store.insert(name, t.clone());
        }
    }

    /// Logits `g(u)` (`N×D×K`) for every row of `u`.
    pub fn logits(&self, u: &Tensor) -> Result<Tensor> {
        let mut g = GraphBuilder::new();
        let un = g.constant(u.clone());
        let out = self.spec.logits_node(&mut g, un, u.row_count());
        let graph = g.build();
        let inputs = Inputs::new();
        Ok(graph.evaluate(&self.params, &inputs)?.get(out).clone())
    }
}

/// Records `Σ_i ‖f(softmax(g(u_i)/τ)) − u_i‖²` and returns the loss node.
pub fn autoencoder_node(
    g: &mut GraphBuilder,
    encoder: &EncoderSpec,
    composer: &ComposerSpec,
    u: NodeId,
    batch: usize,
    tau: f64,
) -> NodeId {
    let logits = encoder.logits_node(g, u, batch);
    let probs = g.softmax(logits, tau);
    let rows = composer.split_selection(g, probs, batch);
    let recon = composer.compose_node(g, &Selection::Relaxed(rows));
    g.squared_error(recon, u)
}

/// Records `α Σ_i ‖f(π_i;τ) − u_i‖² + β Σ_i ‖π_i − g(u_i)‖²`. `pi` is the
/// `B×D×K` node of the batch's logits; `encoded` is `g(u)` of the same
/// shape, or `None` to drop the `β` term.
#[allow(clippy::too_many_arguments)]
pub fn distillation_node(
    g: &mut GraphBuilder,
    composer: &ComposerSpec,
    pi: NodeId,
    u: NodeId,
    encoded: Option<NodeId>,
    batch: usize,
    tau: f64,
    alpha: f64,
    beta: f64,
) -> NodeId {
    let probs = g.softmax(pi, tau);
    let rows = composer.split_selection(g, probs, batch);
    let fc = composer.compose_node(g, &Selection::Relaxed(rows));
    let match_u = g.squared_error(fc, u);
    let mut loss = g.scale(match_u, alpha);
    if let Some(enc) = encoded {
        let match_g = g.squared_error(pi, enc);
        let match_g = g.scale(match_g, beta);
        loss = g.add(loss, match_g);
    }
    loss
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_shapes(u: &Tensor, encoder: &Encoder, book: &CodeBook) -> Result<()> {
    let (es, cs) = (encoder.spec(), book.spec());
    if u.rank() != 2 || u.row_len() != es.in_dim || u.row_len() != cs.out_dim {
        return Err(Error::invalid(format!(
            "embeddings {:?} do not match encoder input {} and composer output {}",
            u.shape(),
            es.in_dim,
            cs.out_dim
        )));
    }
    if es.dims != cs.dims || es.k != cs.k {
        return Err(Error::invalid("encoder and composer disagree on K or D"));
    }
    Ok(())
}

fn merged(encoder: &Encoder, book: &CodeBook) -> ParamStore {
    let mut store = ParamStore::new();
    encoder.install(&mut store);
    book.install(&mut store);
    store
}

/// `Σ_i ‖f(softmax(g(u_i)/τ)) − u_i‖²` over every row of `u`.
pub fn autoencoder_loss(u: &Tensor, encoder: &Encoder, book: &CodeBook, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_shapes(u, encoder, book)?;
    let mut g = GraphBuilder::new();
    let un = g.constant(u.clone());
    let loss = autoencoder_node(&mut g, encoder.spec(), book.spec(), un, u.row_count(), tau);
    let graph = g.build();
    let store = merged(encoder, book);
    let inputs = Inputs::new();
    Ok(graph.evaluate(&store, &inputs)?.scalar(loss))
}

/// `Σ_i α‖f(π_i;τ) − u_i‖² + β‖π_i − g(u_i)‖²` with `π` of shape `N×D×K`.
pub fn distillation_loss(
    pi: &Tensor,
    u: &Tensor,
    encoder: &Encoder,
    book: &CodeBook,
    tau: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_shapes(u, encoder, book)?;
    let cs = book.spec();
    if pi.shape() != [u.row_count(), cs.dims, cs.k] {
        return Err(Error::invalid(format!("logits {:?} do not match {} symbols", pi.shape(), u.row_count())));
    }
    if alpha == 0.0 && beta == 0.0 {
        return Ok(0.0);
    }
    let n = u.row_count();
    let mut g = GraphBuilder::new();
    let un = g.constant(u.clone());
    let pin = g.constant(pi.clone());
    let enc = encoder.spec().logits_node(&mut g, un, n);
    let loss = distillation_node(&mut g, cs, pin, un, Some(enc), n, tau, alpha, beta);
    let graph = g.build();
    let store = merged(encoder, book);
    let inputs = Inputs::new();
    Ok(graph.evaluate(&store, &inputs)?.scalar(loss))
}
