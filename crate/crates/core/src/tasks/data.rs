use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// Ordered, duplicate-free symbol list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabTable {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl VocabTable {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Symbols `w0`, `w1`, ...
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("w{i}")).collect()).expect("distinct names")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }
}

/// Reads a whitespace-separated embedding file: one symbol per line
/// followed by its `d` coordinates.
pub fn load_embeddings(path: &Path) -> Result<(VocabTable, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<(VocabTable, Tensor)> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut symbols = Vec::new();
    let mut seen = BTreeMap::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(symbol) = fields.next() else { continue };
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(i + 1, format!("`{f}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(i + 1, "non-finite coordinate".into()));
        }
        match dim {
            None if row.is_empty() => return Err(parse_err(i + 1, "no coordinates".into())),
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(parse_err(i + 1, format!("expected {d} coordinates, found {}", row.len())))
            }
            Some(_) => {}
        }
        if seen.insert(symbol.to_string(), i + 1).is_some() {
            return Err(parse_err(i + 1, format!("duplicate symbol `{symbol}`")));
        }
        symbols.push(symbol.to_string());
        data.extend(row);
    }
    let Some(d) = dim else {
        return Err(parse_err(0, "empty vocabulary".into()));
    };
    let n = symbols.len();
    Ok((VocabTable::new(symbols)?, Tensor::new(vec![n, d], data)?))
}

/// Writes embeddings in the format read by [`load_embeddings`], using the
/// shortest decimal form that reads back to the same `f64`.
pub fn write_embeddings(path: &Path, vocab: &VocabTable, embeddings: &Tensor) -> Result<()> {
    if embeddings.rank() != 2 || embeddings.row_count() != vocab.len() {
        return Err(Error::invalid("embedding rows must match the vocabulary"));
    }
    let mut out = String::new();
    for (s, row) in vocab.symbols().iter().zip(embeddings.rows()) {
        out.push_str(s);
        for v in row {
            write!(out, " {v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Documents as symbol-index sequences with class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub docs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub vocab: usize,
}

impl LabeledCorpus {
    pub fn new(docs: Vec<Vec<usize>>, labels: Vec<usize>, classes: usize, vocab: usize) -> Result<Self> {
        if docs.len() != labels.len() {
            return Err(Error::invalid("one label per document required"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} outside {classes} classes")));
        }
        if let Some(&t) = docs.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::invalid(format!("symbol {t} outside vocabulary of {vocab}")));
        }
        Ok(Self { docs, labels, classes, vocab })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Seeded split into (train, held-out) with `fraction` held out.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> (LabeledCorpus, LabeledCorpus) {
        let held = held_out(self.len(), fraction, rng);
        let mut mark = vec![false; self.len()];
        held.iter().for_each(|&i| mark[i] = true);
        let pick = |keep: bool| {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| mark[i] != keep).collect();
            LabeledCorpus {
                docs: idx.iter().map(|&i| self.docs[i].clone()).collect(),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
                classes: self.classes,
                vocab: self.vocab,
            }
        };
        (pick(true), pick(false))
    }
}

/// Sorted seeded sample of `round(fraction·n)` indices (at least one when
/// `fraction > 0`).
pub fn held_out(n: usize, fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let count = ((fraction * n as f64).round() as usize).clamp(usize::from(fraction > 0.0 && n > 0), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

/// `n` points around `clusters` centres. Centre coordinates are
/// `N(0, 1/d)` (unit expected norm); each point adds `N(0, spread²/d)` noise.
/// Returns the points and each point's cluster.
pub fn clustered_embeddings(n: usize, d: usize, clusters: usize, spread: f64, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let centre_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let noise = Normal::new(0.0, spread / (d as f64).sqrt()).expect("valid std");
    let centres: Vec<Vec<f64>> =
        (0..clusters).map(|_| (0..d).map(|_| centre_dist.sample(rng)).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut assign = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % clusters;
        assign.push(c);
        data.extend(centres[c].iter().map(|&x| x + noise.sample(rng)));
    }
    (Tensor::new(vec![n, d], data).expect("shape"), assign)
}

/// Shape of the synthetic marker-token corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarkerCorpusSpec {
    pub vocab: usize,
    pub docs: usize,
    pub classes: usize,
    /// Exclusive marker tokens per class; symbols `c·m .. (c+1)·m`.
    pub markers_per_class: usize,
    pub doc_len: usize,
    /// Marker occurrences per document.
    pub markers_per_doc: usize,
}

impl Default for MarkerCorpusSpec {
    fn default() -> Self {
        Self { vocab: 2000, docs: 2000, classes: 4, markers_per_class: 5, doc_len: 20, markers_per_doc: 2 }
    }
}

/// Documents of uniformly drawn distractor tokens plus a few markers of the
/// document's class, shuffled.
pub fn marker_corpus(spec: &MarkerCorpusSpec, rng: &mut Rng) -> Result<LabeledCorpus> {
    let markers = spec.classes * spec.markers_per_class;
    if spec.classes == 0 || spec.markers_per_class == 0 || markers >= spec.vocab {
        return Err(Error::invalid("marker tokens must leave room for distractors"));
    }
    if spec.markers_per_doc == 0 || spec.markers_per_doc > spec.doc_len {
        return Err(Error::invalid("markers per document must lie in 1..=doc_len"));
    }
    let mut docs = Vec::with_capacity(spec.docs);
    let mut labels = Vec::with_capacity(spec.docs);
    for _ in 0..spec.docs {
        let label = rng.random_range(0..spec.classes);
        let mut doc: Vec<usize> = (0..spec.markers_per_doc)
            .map(|_| label * spec.markers_per_class + rng.random_range(0..spec.markers_per_class))
            .collect();
        doc.extend((spec.markers_per_doc..spec.doc_len).map(|_| rng.random_range(markers..spec.vocab)));
        doc.shuffle(rng);
        docs.push(doc);
        labels.push(label);
    }
    LabeledCorpus::new(docs, labels, spec.classes, spec.vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn parses_two_lines() {
        let (v, e) = parse_embeddings("a 1 2 3\nb 4 5 6\n", Path::new("x")).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(e.shape(), &[2, 3]);
        assert_eq!(v.get("b"), Some(1));
    }

    #[test]
    fn rejects_bad_files() {
        let p = Path::new("emb.txt");
        assert!(parse_embeddings("", p).is_err());
        let ragged = parse_embeddings("a 1 2\nb 1\n", p).unwrap_err();
        assert!(ragged.to_string().contains(":2:"), "{ragged}");
        assert!(parse_embeddings("a 1 x\n", p).is_err());
        assert!(parse_embeddings("a 1\na 2\n", p).is_err());
    }

    #[test]
    fn writer_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        let mut rng = seeded(5);
        let (e, _) = clustered_embeddings(20, 7, 3, 0.3, &mut rng);
        let v = VocabTable::numbered(20);
        write_embeddings(&path, &v, &e).unwrap();
        let (v2, e2) = load_embeddings(&path).unwrap();
        assert_eq!(v2, v);
        assert_eq!(e2, e);
    }

    #[test]
    fn corpus_has_class_markers() {
        let spec = MarkerCorpusSpec::default();
        let c = marker_corpus(&spec, &mut seeded(2)).unwrap();
        assert_eq!(c.len(), 2000);
        for (doc, &label) in c.docs.iter().zip(&c.labels) {
            assert_eq!(doc.len(), spec.doc_len);
            let marks: Vec<usize> = doc.iter().copied().filter(|&t| t < 20).collect();
            assert_eq!(marks.len(), 2);
            assert!(marks.iter().all(|&t| t / 5 == label));
        }
    }

    #[test]
    fn split_partitions() {
        let c = marker_corpus(&MarkerCorpusSpec::default(), &mut seeded(3)).unwrap();
        let (a, b) = c.split(0.1, &mut seeded(4));
        assert_eq!(a.len() + b.len(), c.len());
        assert_eq!(b.len(), 200);
    }
}
