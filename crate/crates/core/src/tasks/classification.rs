use log::warn;
use rand::Rng as _;

use crate::diffcore::{softmax_rows, GraphBuilder, NodeId, ParamStore, Tensor};
use crate::rng::Rng;
use crate::trainer::{Task, Validation};
use crate::{Error, Result};

use super::data::LabeledCorpus;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Bag-of-embeddings classifier: the document vector is the mean of its
/// symbols' embeddings, followed by an affine layer and softmax
/// cross-entropy.
#[derive(Clone, Debug)]
pub struct ClassificationTask {
    train: LabeledCorpus,
    valid: LabeledCorpus,
    dim: usize,
    skipped: usize,
}

fn drop_empty(c: &LabeledCorpus) -> (LabeledCorpus, usize) {
    let keep: Vec<usize> = (0..c.len()).filter(|&i| !c.docs[i].is_empty()).collect();
    let skipped = c.len() - keep.len();
    let out = LabeledCorpus {
        docs: keep.iter().map(|&i| c.docs[i].clone()).collect(),
        labels: keep.iter().map(|&i| c.labels[i]).collect(),
        classes: c.classes,
        vocab: c.vocab,
    };
    (out, skipped)
}

impl ClassificationTask {
    /// Empty documents are dropped and counted.
    pub fn new(train: LabeledCorpus, valid: LabeledCorpus, dim: usize) -> Result<Self> {
        if train.classes != valid.classes || train.vocab != valid.vocab {
            return Err(Error::invalid("train and held-out corpora disagree on classes or vocabulary"));
        }
        if dim == 0 {
            return Err(Error::invalid("embedding width must be positive"));
        }
        let (train, a) = drop_empty(&train);
        let (valid, b) = drop_empty(&valid);
        if train.is_empty() {
            return Err(Error::invalid("no non-empty training documents"));
        }
        if a + b > 0 {
            warn!("skipped {} empty documents", a + b);
        }
        Ok(Self { train, valid, dim, skipped: a + b })
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }

    pub fn held_out(&self) -> &LabeledCorpus {
        &self.valid
    }

    /// Class scores of one document given all symbol embeddings.
    pub fn scores(&self, embeddings: &Tensor, params: &ParamStore, doc: &[usize]) -> Result<Vec<f64>> {
        let w = params.get(HEAD_W).ok_or_else(|| Error::invalid("classifier weights missing"))?;
        let b = params.get(HEAD_B).ok_or_else(|| Error::invalid("classifier bias missing"))?;
        if embeddings.rank() != 2 || embeddings.row_len() != self.dim || embeddings.row_count() != self.train.vocab {
            return Err(Error::invalid(format!("embeddings {:?} do not fit the task", embeddings.shape())));
        }
        if doc.is_empty() {
            return Err(Error::invalid("empty document"));
        }
        let mut mean = vec![0.0; self.dim];
        for &s in doc {
            for (m, v) in mean.iter_mut().zip(embeddings.row(s)) {
                *m += v;
            }
        }
        let inv = 1.0 / doc.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let f = self.classes();
        let mut out = b.data().to_vec();
        for (i, &m) in mean.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w.data()[i * f..(i + 1) * f]) {
                *o += m * wv;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, embeddings: &Tensor, params: &ParamStore, doc: &[usize]) -> Result<usize> {
        Ok(crate::diffcore::argmax(&self.scores(embeddings, params, doc)?))
    }

    /// Mean cross-entropy and accuracy on `corpus`.
    pub fn evaluate(&self, embeddings: &Tensor, params: &ParamStore, corpus: &LabeledCorpus) -> Result<Validation> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut count = 0usize;
        for (doc, &label) in corpus.docs.iter().zip(&corpus.labels) {
            if doc.is_empty() {
                continue;
            }
            let z = self.scores(embeddings, params, doc)?;
            let p = softmax_rows(&Tensor::vector(z.clone()), 1.0);
            loss -= p.data()[label].max(1e-300).ln();
            correct += usize::from(crate::diffcore::argmax(&z) == label);
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("no documents to evaluate"));
        }
        Ok(Validation { loss: loss / count as f64, metric: Some(correct as f64 / count as f64) })
    }
}

impl Task for ClassificationTask {
    fn vocab(&self) -> usize {
        self.train.vocab
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_symbols(&self, examples: &[usize]) -> Vec<usize> {
        let mut s: Vec<usize> = examples.iter().flat_map(|&e| self.train.docs[e].iter().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let f = self.classes();
        let bound = 1.0 / (self.dim as f64).sqrt();
        let w = (0..self.dim * f).map(|_| rng.random_range(-bound..bound)).collect();
        let mut p = ParamStore::new();
        p.insert(HEAD_W, Tensor::new(vec![self.dim, f], w).expect("head shape"));
        p.insert(HEAD_B, Tensor::zeros(vec![f]));
        p
    }

    fn loss_node(&self, g: &mut GraphBuilder, emb: NodeId, examples: &[usize], symbols: &[usize]) -> NodeId {
        let (b, f) = (examples.len(), self.classes());
        let mut avg = Tensor::zeros(vec![b, symbols.len()]);
        let mut targets = Tensor::zeros(vec![b, f]);
        for (r, &e) in examples.iter().enumerate() {
            let doc = &self.train.docs[e];
            let inv = 1.0 / doc.len() as f64;
            let row = avg.row_mut(r);
            for s in doc {
                let col = symbols.binary_search(s).expect("batch symbol");
                row[col] += inv;
            }
            targets.row_mut(r)[self.train.labels[e]] = 1.0;
        }
        let a = g.constant(avg);
        let docs = g.matmul(a, emb);
        let (w, bias) = (g.param(HEAD_W), g.param(HEAD_B));
        let z = g.matmul(docs, w);
        let z = g.add(z, bias);
        let t = g.constant(targets);
        g.softmax_cross_entropy(z, t)
    }

    fn validate(&self, embeddings: &Tensor, params: &ParamStore) -> Result<Validation> {
        let corpus = if self.valid.is_empty() { &self.train } else { &self.valid };
        self.evaluate(embeddings, params, corpus)
    }
}
