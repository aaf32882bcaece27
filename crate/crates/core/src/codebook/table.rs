use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffcore::{argmax, Tensor};
use crate::{Error, Result};

/// The code allocation: `D` digits in `0..K` for each of `N` symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteCodeTable {
    k: usize,
    dims: usize,
    symbols: Vec<String>,
    digits: Vec<u32>,
}

impl DiscreteCodeTable {
    pub fn new(k: usize, dims: usize, symbols: Vec<String>, digits: Vec<u32>) -> Result<Self> {
        if k < 2 || dims == 0 {
            return Err(Error::invalid(format!("bad code shape K={k} D={dims}")));
        }
        if digits.len() != symbols.len() * dims {
            return Err(Error::invalid(format!(
                "{} digits for {} symbols of {dims} digits",
                digits.len(),
                symbols.len()
            )));
        }
        if let Some(d) = digits.iter().find(|&&d| d as usize >= k) {
            return Err(Error::invalid(format!("digit {d} out of range for K={k}")));
        }
        Ok(Self { k, dims, symbols, digits })
    }

    /// Table with symbols named by their index.
    pub fn anonymous(k: usize, dims: usize, digits: Vec<u32>) -> Result<Self> {
        let n = digits.len() / dims.max(1);
        Self::new(k, dims, (0..n).map(|i| i.to_string()).collect(), digits)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.dims
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

    pub fn code(&self, i: usize) -> &[u32] {
        &self.digits[i * self.dims..(i + 1) * self.dims]
    }

    pub fn codes(&self) -> std::slice::ChunksExact<'_, u32> {
        self.digits.chunks_exact(self.dims)
    }

    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    /// Digit `j` of every symbol in `rows`.
    pub fn column(&self, j: usize, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&i| self.digits[i * self.dims + j] as usize).collect()
    }

    pub fn with_symbols(mut self, symbols: Vec<String>) -> Result<Self> {
        if symbols.len() != self.symbols.len() {
            return Err(Error::invalid("symbol list length differs from table length"));
        }
        self.symbols = symbols;
        Ok(self)
    }

    /// Renders a code as `d1-d2-…-dD`.
    pub fn render(code: &[u32]) -> String {
        let mut s = String::new();
        for (j, d) in code.iter().enumerate() {
            if j > 0 {
                s.push('-');
            }
            write!(s, "{d}").unwrap();
        }
        s
    }

    /// Text export: a `#kd K=.. D=.. N=..` header, then `<symbol> <code>`
    /// per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("#kd K={} D={} N={}\n", self.k, self.dims, self.len());
        for (sym, code) in self.symbols.iter().zip(self.codes()) {
            out.push_str(sym);
            out.push(' ');
            out.push_str(&Self::render(code));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Format {
            what: "code table",
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
        let rest = header
            .strip_prefix("#kd ")
            .ok_or_else(|| fail(1, format!("expected `#kd` header, got `{header}`")))?;
        let (mut k, mut dims, mut n) = (None, None, None);
        for field in rest.split_whitespace() {
            let (key, value) =
                field.split_once('=').ok_or_else(|| fail(1, format!("bad header field `{field}`")))?;
            let value: usize =
                value.parse().map_err(|_| fail(1, format!("bad number in `{field}`")))?;
            match key {
                "K" => k = Some(value),
                "D" => dims = Some(value),
                "N" => n = Some(value),
                _ => return Err(fail(1, format!("unknown header key `{key}`"))),
            }
        }
        let (k, dims, n) = match (k, dims, n) {
            (Some(k), Some(d), Some(n)) => (k, d, n),
            _ => return Err(fail(1, "header needs K, D and N".into())),
        };
        let mut symbols = Vec::with_capacity(n);
        let mut digits = Vec::with_capacity(n * dims);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(sym), Some(code), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(fail(idx + 1, "expected `<symbol> <code>`".into()));
            };
            let before = digits.len();
            for d in code.split('-') {
                let d: u32 = d.parse().map_err(|_| fail(idx + 1, format!("bad digit `{d}`")))?;
                if d as usize >= k {
                    return Err(fail(idx + 1, format!("digit {d} out of range for K={k}")));
                }
                digits.push(d);
            }
            if digits.len() - before != dims {
                return Err(fail(idx + 1, format!("code `{code}` does not have {dims} digits")));
            }
            symbols.push(sym.to_string());
        }
        if symbols.len() != n {
            return Err(fail(0, format!("header promises {n} symbols, found {}", symbols.len())));
        }
        Self::new(k, dims, symbols, digits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(bad) = self.symbols.iter().find(|s| s.is_empty() || s.contains(char::is_whitespace)) {
            return Err(Error::invalid(format!("symbol `{bad}` cannot be exported")));
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Per-row argmax of `N×D×K` code logits, lowest index on ties.
pub fn extract_codes(logits: &Tensor, symbols: Option<&[String]>) -> Result<DiscreteCodeTable> {
    let [n, dims, k] = logits.shape() else {
        return Err(Error::invalid(format!("code logits must be N×D×K, got {:?}", logits.shape())));
    };
    let digits = logits.rows().map(|r| argmax(r) as u32).collect();
    let table = DiscreteCodeTable::anonymous(*k, *dims, digits)?;
    debug_assert_eq!(table.len(), *n);
    match symbols {
        Some(s) => table.with_symbols(s.to_vec()),
        None => Ok(table),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn extracts_per_row_argmax() {
        let logits = Tensor::new(vec![1, 2, 3], vec![0.1, 2.0, -1.0, 5.0, 0.0, 0.0]).unwrap();
        let t = extract_codes(&logits, None).unwrap();
        assert_eq!(t.code(0), &[1, 0]);
    }

    #[test]
    fn zero_logits_give_zero_codes() {
        let t = extract_codes(&Tensor::zeros(vec![4, 3, 5]), None).unwrap();
        assert!(t.digits().iter().all(|&d| d == 0));
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = seeded(9);
        let (n, dims, k) = (50, 4, 7);
        let data: Vec<f64> = (0..n * dims * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = Tensor::new(vec![n, dims, k], data.clone()).unwrap();
        let table = extract_codes(&logits, None).unwrap();
        for i in 0..n {
            for j in 0..dims {
                let base = (i * dims + j) * k;
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..k {
                    if data[base + c] > best_v {
                        best_v = data[base + c];
                        best = c;
                    }
                }
                assert_eq!(table.code(i)[j] as usize, best);
            }
        }
    }

    #[test]
    fn renders_dash_separated_codes() {
        assert_eq!(DiscreteCodeTable::render(&[3, 1, 0, 4]), "3-1-0-4");
    }

    #[test]
    fn parse_errors_are_descriptive() {
        assert!(DiscreteCodeTable::from_text("").is_err());
        assert!(DiscreteCodeTable::from_text("#kd K=2 D=2 N=1\na 0-2\n").is_err());
        assert!(DiscreteCodeTable::from_text("#kd K=2 D=2 N=1\na 0\n").is_err());
        assert!(DiscreteCodeTable::from_text("#kd K=2 D=2 N=2\na 0-1\n").is_err());
        let t = DiscreteCodeTable::from_text("#kd K=3 D=2 N=2\nthe 0-2\ncat 1-1\n").unwrap();
        assert_eq!(t.symbols(), &["the".to_string(), "cat".to_string()]);
        assert_eq!(t.code(1), &[1, 1]);
    }

    #[test]
    fn rejects_out_of_range_digits() {
        assert!(DiscreteCodeTable::anonymous(2, 2, vec![0, 2]).is_err());
        assert!(DiscreteCodeTable::anonymous(2, 2, vec![0, 1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(k in 2usize..20, dims in 1usize..6, raw in prop::collection::vec(any::<u32>(), 1..40)) {
            let n = raw.len();
            let digits: Vec<u32> = (0..n * dims).map(|i| raw[i % n].wrapping_add(i as u32) % k as u32).collect();
            let symbols = (0..n).map(|i| format!("w{i}")).collect();
            let t = DiscreteCodeTable::new(k, dims, symbols, digits).unwrap();
            prop_assert_eq!(DiscreteCodeTable::from_text(&t.to_text()).unwrap(), t);
        }
    }
}
