//! "DCKP" binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DCKP"
//! version  u32
//! count    u32      number of entries
//! entry*   u16 name length, UTF-8 name, u8 rank, u64 dims[rank], f64 values[numel]
//! meta     u64 length, UTF-8 JSON object
//! ```
//!
//! Entries are written in name order. The trainable flag is not stored;
//! every loaded tensor starts frozen.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: String,
    pub seed: u64,
    /// Stage-specific description, e.g. tower specs.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    pub meta: CheckpointMeta,
}

pub fn encode(tensors: &ParamSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Checkpoint(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.array::<4>("magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DCKP file".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(r.array("entry count")?);
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dims")?;
            shape.push(
                usize::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: element count overflows")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflows")))?,
            "values",
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t =
            Tensor::new(&shape, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors
            .insert(&name, t)
            .map_err(|_| Error::Checkpoint(format!("duplicate entry {name}")))?;
    }
    let meta_len = r.u64("metadata length")?;
    let meta_len =
        usize::try_from(meta_len).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { tensors, meta })
}

/// Writes via a temporary sibling and a rename so a failed save never
/// leaves a partial file behind.
pub fn save(path: &Path, tensors: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(tensors, meta)?;
    let tmp = path.with_extension("dckp.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config_hash: "abc".into(),
            stage: "test".into(),
            seed: u64::MAX,
            extra: serde_json::json!({"k": 1}),
        }
    }

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "b.vec",
            Tensor::new(&[3], vec![1.0, -0.0, f64::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        p.insert(
            "a.mat",
            Tensor::new(&[2, 2], vec![0.1, 1e300, -3.5, 7.0]).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode(&sample(), &meta()).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.meta, meta());
        for ((n1, t1), (n2, t2)) in sample().iter().zip(ck.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.to_le_bytes(), t2.to_le_bytes());
        }
        assert_eq!(encode(&ck.tensors, &ck.meta).unwrap(), bytes);
    }

    #[test]
    fn layout_matches_documentation() {
        let bytes = encode(&sample(), &meta()).unwrap();
        assert_eq!(&bytes[0..4], b"DCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first entry in name order is "a.mat"
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 5);
        assert_eq!(&bytes[14..19], b"a.mat");
        assert_eq!(bytes[19], 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[36..44].try_into().unwrap()), 0.1);
    }

    #[test]
    fn empty_set_is_valid() {
        let ck = decode(&encode(&ParamSet::new(), &meta()).unwrap()).unwrap();
        assert!(ck.tensors.is_empty());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode(&sample(), &meta()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        for cut in [3, 11, 30, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dckp");
        save(&path, &sample(), &meta()).unwrap();
        assert_eq!(load(&path).unwrap().tensors, sample());
        assert!(matches!(
            load(&dir.path().join("missing.dckp")),
            Err(Error::MissingFile(_))
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_finite_tensors_round_trip(
            rows in 1usize..5,
            cols in 1usize..5,
            bits in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 25),
        ) {
            let values = bits[..rows * cols].to_vec();
            let mut p = ParamSet::new();
            p.insert("t", Tensor::new(&[rows, cols], values).unwrap()).unwrap();
            let ck = decode(&encode(&p, &meta()).unwrap()).unwrap();
            let back = ck.tensors.get("t").unwrap();
            proptest::prop_assert_eq!(back.to_le_bytes(), p.get("t").unwrap().to_le_bytes());
        }
    }
}
