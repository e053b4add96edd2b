//! Parameter archives.
//!
//! Layout, all little-endian: magic `FDCK`, `u16` version, `u32` tensor
//! count; then per tensor a `u16` name length, the UTF-8 name, four `u32`
//! dims `(n, c, h, w)` and the values as `f32`.

use std::path::Path;

use freqdet_core::{Error, ParamStore, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode(store: &ParamStore<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + store.numel() * 4 + store.len() * 40);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Contract("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("`{name}` dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected FDCK");
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 2;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: start + 2, message: "name is not UTF-8".into() })?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(nbytes) = numel.and_then(|n| n.checked_mul(4)) else {
            return r.fail(format!("`{name}` has an impossible shape {dims:?}"));
        };
        let data = r.take(nbytes, "tensor data")?;
        let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let t = Tensor::from_values(dims, values)?;
        store.insert(name.clone(), t).map_err(|_| Error::Format { offset: start, message: format!("duplicate tensor `{name}`") })?;
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save(store: &ParamStore<f64>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f64>> {
    decode(&std::fs::read(path)?)
}

/// Checks `loaded` against the parameters a model expects: the same names
/// with the same shapes.
pub fn check_compatible(expected: &ParamStore<f64>, loaded: &ParamStore<f64>) -> Result<()> {
    let missing: Vec<&str> = expected.names().filter(|n| loaded.get(n).is_none()).collect();
    let extra: Vec<&str> = loaded.names().filter(|n| expected.get(n).is_none()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint does not fit the model: missing [{}], extra [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for (name, t) in expected.iter() {
        let got = loaded.require(name)?.shape();
        if got != t.shape() {
            return Err(Error::Config(format!("checkpoint tensor `{name}` is {got}, model expects {}", t.shape())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("b.weight", Tensor::from_fn((2, 3, 1, 1), |_, c, _, _| c as f64 * 0.1 + 1e-9)).unwrap();
        s.insert("a.alpha", Tensor::full((1, 1, 1, 1), -0.25)).unwrap();
        s
    }

    #[test]
    fn roundtrip_within_f32_rounding_and_byte_stable() {
        let s = sample();
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        for (name, t) in s.iter() {
            for (a, b) in t.data().iter().zip(back.require(name).unwrap().data()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("prefix {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn compatibility_lists_names() {
        let mut other = sample();
        other.insert("c.bias", Tensor::zeros((1, 1, 1, 1))).unwrap();
        let mut expected = sample();
        expected.insert("d.beta", Tensor::zeros((1, 1, 1, 1))).unwrap();
        let msg = check_compatible(&expected, &other).unwrap_err().to_string();
        assert!(msg.contains("missing [d.beta]") && msg.contains("extra [c.bias]"), "{msg}");
    }
}
