//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | field                                   |
//! |----------------|-----------------------------------------|
//! | 4              | magic `FCVP`                            |
//! | 4              | format version (`u32`, currently 1)     |
//! | 1              | model kind: 0 = logreg, 1 = mlp         |
//! | 3              | reserved, zero                          |
//! | 4              | input dimension (`u32`)                 |
//! | 4              | number of classes (`u32`)               |
//! | 4              | number of hidden layers `h` (`u32`)     |
//! | 4·h            | hidden layer widths (`u32` each)        |
//! | 8              | parameter count `n` (`u64`)             |
//! | 8·n            | parameters (`f64` each)                 |

use std::path::Path;

use fedcvar_core::numerics::{ModelArch, ModelKind, ModelParams};
use thiserror::Error;

use crate::output::write_atomic;

pub const MAGIC: &[u8; 4] = b"FCVP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a parameter snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown model kind {0}")]
    UnknownKind(u8),
    #[error("invalid snapshot: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let arch = params.arch();
    let values = params.values();
    let mut out = Vec::with_capacity(32 + 4 * arch.hidden_dims().len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match arch.kind() {
        ModelKind::LogReg => 0,
        ModelKind::Mlp2 => 1,
    });
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&(arch.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(arch.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden_dims().len() as u32).to_le_bytes());
    for &h in arch.hidden_dims() {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(SnapshotError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, SnapshotError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| SnapshotError::BadMagic)? != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let head = r.take(4)?;
    let kind = match head[0] {
        0 => ModelKind::LogReg,
        1 => ModelKind::Mlp2,
        other => return Err(SnapshotError::UnknownKind(other)),
    };
    let input_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let num_hidden = r.u32()? as usize;
    if num_hidden > bytes.len() / 4 {
        return Err(SnapshotError::Truncated(bytes.len()));
    }
    let hidden = (0..num_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>, _>>()?;
    let arch = ModelArch::new(kind, input_dim, hidden, num_classes).map_err(|e| SnapshotError::Invalid(e.to_string()))?;
    let count = r.u64()?;
    if count != arch.param_count() as u64 {
        return Err(SnapshotError::Invalid(format!(
            "{count} parameters stored, architecture needs {}",
            arch.param_count()
        )));
    }
    let payload = r.take(8 * count as usize)?;
    if r.pos != bytes.len() {
        return Err(SnapshotError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    ModelParams::new(arch, values).map_err(|e| SnapshotError::Invalid(e.to_string()))
}

pub fn write_snapshot(path: &Path, params: &ModelParams) -> std::io::Result<()> {
    write_atomic(path, &encode(params))
}

pub fn read_snapshot(path: &Path) -> Result<ModelParams, SnapshotError> {
    let bytes = std::fs::read(path).map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedcvar_core::numerics::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        for arch in [ModelArch::logreg(2, 3).unwrap(), ModelArch::mlp(5, vec![4, 3], 2).unwrap()] {
            let mut p = init_params(&arch, 11);
            p.values_mut()[0] = -0.0;
            let bytes = encode(&p);
            let back = decode(&bytes).unwrap();
            assert_eq!(back.arch(), p.arch());
            let bits = |q: &ModelParams| q.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&p));
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn layout_matches_documentation() {
        let p = ModelParams::new(ModelArch::logreg(1, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode(&p);
        assert_eq!(&b[..4], b"FCVP");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[0, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..20], &[2, 0, 0, 0]);
        assert_eq!(&b[20..24], &[0, 0, 0, 0]);
        assert_eq!(&b[24..32], &[4, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[32..40], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32 + 4 * 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&init_params(&ModelArch::logreg(2, 3).unwrap(), 1));
        assert!(matches!(decode(b"NOPE"), Err(SnapshotError::BadMagic)));
        assert!(matches!(decode(&good[..2]), Err(SnapshotError::BadMagic)));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(SnapshotError::UnsupportedVersion(2))));
        let mut kind = good.clone();
        kind[8] = 7;
        assert!(matches!(decode(&kind), Err(SnapshotError::UnknownKind(7))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(SnapshotError::Truncated(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(SnapshotError::Invalid(_))));
        let mut count = good.clone();
        count[24] = 8;
        assert!(decode(&count).is_err());
    }
}
