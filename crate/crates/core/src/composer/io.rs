//! Binary codebook layout (all integers and floats little-endian):
//!
//! ```text
//! "KDCB"  u32 version  u32 K  u32 D  u32 d'  u32 d
//! u32 kind (0 linear-sum, 1 linear-hidden, 2 lstm)  u32 hidden width
//! u32 flags (bit 0: projection present, bit 1: literal lstm gates)
//! f32 W^1 .. W^D (K×d' each), projection H, composer parameters
//! ```
//!
//! Composer parameters: hidden layer weights (d'×h) then bias (h); LSTM
//! recurrent matrices (d'×d') then biases (d') in forget, input, output,
//! cell order, the output gate omitted when literal gates are set.

use crate::diffcore::{ParamStore, Tensor};
use crate::{Error, Result};

use super::{CodeBook, ComposerKind, ComposerSpec};

const MAGIC: &[u8; 4] = b"KDCB";
const VERSION: u32 = 1;

pub(super) fn encode(book: &CodeBook) -> Vec<u8> {
    let spec = book.spec();
    let (kind, width, literal) = match spec.kind {
        ComposerKind::LinearSum => (0, 0, false),
        ComposerKind::LinearHidden { width } => (1, width, false),
        ComposerKind::Lstm { literal_gates } => (2, 0, literal_gates),
    };
    let flags = u32::from(spec.has_projection()) | (u32::from(literal) << 1);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, spec.k as u32, spec.dims as u32, spec.code_dim as u32, spec.out_dim as u32, kind, width as u32, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, _) in spec.param_shapes() {
        for &v in book.params().get(&name).expect("complete codebook").data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub(super) fn decode(bytes: &[u8]) -> Result<CodeBook> {
    let bad = |message: String| Error::Format { what: "codebook", message };
    if bytes.len() < 36 || &bytes[..4] != MAGIC {
        return Err(bad("missing KDCB header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (k, dims, code_dim, out_dim) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let width = word(6) as usize;
    let flags = word(7);
    let kind = match word(5) {
        0 => ComposerKind::LinearSum,
        1 => ComposerKind::LinearHidden { width },
        2 => ComposerKind::Lstm { literal_gates: flags & 2 != 0 },
        other => return Err(bad(format!("unknown composer kind {other}"))),
    };
    let spec = ComposerSpec { kind, k, dims, code_dim, out_dim };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    if spec.has_projection() != (flags & 1 != 0) {
        return Err(bad("projection flag disagrees with shapes".into()));
    }
    let shapes = spec.param_shapes();
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let body = &bytes[36..];
    if body.len() != 4 * total {
        return Err(bad(format!("expected {} payload bytes, found {}", 4 * total, body.len())));
    }
    let mut floats = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        store.insert(name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?);
    }
    CodeBook::from_params(spec, &store).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn rejects_corrupt_input() {
        let spec = ComposerSpec { kind: ComposerKind::LinearSum, k: 2, dims: 2, code_dim: 2, out_dim: 2 };
        let bytes = encode(&CodeBook::init(spec, &mut seeded(0)).unwrap());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOPE").is_err());
        let mut wrong_kind = bytes.clone();
        wrong_kind[24] = 9;
        assert!(decode(&wrong_kind).is_err());
    }

    #[test]
    fn header_layout() {
        let spec = ComposerSpec { kind: ComposerKind::LinearHidden { width: 3 }, k: 4, dims: 2, code_dim: 5, out_dim: 6 };
        let bytes = encode(&CodeBook::init(spec, &mut seeded(0)).unwrap());
        assert_eq!(&bytes[..4], b"KDCB");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 36 + 4 * (2 * 4 * 5 + 3 * 6 + 5 * 3 + 3));
    }
}
