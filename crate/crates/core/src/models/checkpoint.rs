//! Binary checkpoint container.
//!
//! Layout (little-endian): magic, `u32` version, kind, config text, vocabulary,
//! named tensors, then a CRC32 of every preceding byte.

use crate::autodiff::{ParamSet, Tensor};

use super::ModelError;

pub const MAGIC: &[u8; 8] = b"DEPENCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `classifier` or `seq2seq`.
    pub kind: String,
    /// Canonical `key = value` text of the model config.
    pub config: String,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(kind: &str, config: String, vocabulary: Vec<String>, params: &ParamSet) -> Self {
        let tensors = params.iter().map(|p| (p.name.clone(), p.value().clone())).collect();
        Self { kind: kind.to_string(), config, vocabulary, tensors }
    }

    /// Copies every stored tensor into the same-named parameter; names and shapes must match exactly.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<(), ModelError> {
        if self.tensors.len() != params.len() {
            return Err(ModelError::CorruptPayload(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = params
                .find(name)
                .ok_or_else(|| ModelError::CorruptPayload(format!("unknown tensor {name}")))?;
            params
                .set_value(id, t.clone())
                .map_err(|e| ModelError::CorruptPayload(e.to_string()))?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ModelError> {
        if self.kind != kind {
            return Err(ModelError::WrongKind { expected: kind.to_string(), found: self.kind.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        put_u32(&mut out, self.vocabulary.len());
        for tok in &self.vocabulary {
            put_str(&mut out, tok);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptPayload(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ModelError::VersionMismatch { expected: FORMAT_VERSION, found: version });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let kind = r.string()?;
        let config = r.string()?;
        let n_vocab = r.u32()?;
        let vocabulary = (0..n_vocab).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let n_tensors = r.u32()?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| ModelError::CorruptPayload(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { kind, config, vocabulary, tensors })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::CorruptPayload("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::CorruptPayload("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            config: "a = 1\n".into(),
            vocabulary: vec!["[PAD]".into(), "x".into()],
            tensors: vec![
                ("w".into(), Tensor::new(&[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::from_vec(vec![std::f64::consts::PI])),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in c.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(ModelError::CorruptPayload(_))));
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::CorruptPayload(_))));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(ModelError::VersionMismatch { expected: 1, found: 9 })
        ));
    }
}
