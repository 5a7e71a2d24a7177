//! Binary model file.
//!
//! Layout (all integers and reals little-endian):
//!
//! | field              | type                          |
//! |--------------------|-------------------------------|
//! | magic              | `b"OSFNET\0\0"`               |
//! | format version     | `u32` (currently 1)           |
//! | layer count `L`    | `u32`                         |
//! | layer dims         | `L + 1` x `u64`               |
//! | activation tags    | `L` x `u8` (0 = ReLU, 1 = identity) |
//! | parameters         | per layer: weights (row-major, `out x in`) then bias, `f64` |
//!
//! The file length must match the header exactly.

use std::fs;
use std::path::Path;

use super::{Activation, Dense, SiameseNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OSFNET\0\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn write_net(net: &SiameseNet) -> Vec<u8> {
    let dims = net.layer_dims();
    let mut out = Vec::with_capacity(32 + dims.len() * 9 + net.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for layer in net.layers() {
        out.push(layer.activation().tag());
    }
    for layer in net.layers() {
        for v in layer.weights().iter().chain(layer.bias()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::CorruptModel(format!(
                "truncated while reading {what}"
            )));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::CorruptModel(format!("{what} size overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_net(bytes: &[u8]) -> Result<SiameseNet> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::CorruptModel("bad magic; not a model file".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let n_layers = r.u32("layer count")? as usize;
    if n_layers == 0 {
        return Err(Error::CorruptModel("layer count is zero".into()));
    }
    let dims = (0..=n_layers)
        .map(|_| {
            let d = r.u64("layer dims")?;
            usize::try_from(d)
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::CorruptModel(format!("invalid layer width {d}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let tags = r.take(n_layers, "activation tags")?;
    let activations = tags
        .iter()
        .map(|&t| {
            Activation::from_tag(t)
                .ok_or_else(|| Error::CorruptModel(format!("unknown activation tag {t}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() * 8;
    if r.bytes.len() != expected {
        return Err(Error::CorruptModel(format!(
            "header dims {dims:?} need {expected} parameter bytes, file has {}",
            r.bytes.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (w, act) in dims.windows(2).zip(activations) {
        let weights = r.f64s(w[0] * w[1], "weights")?;
        let bias = r.f64s(w[1], "bias")?;
        layers.push(
            Dense::new(w[0], w[1], weights, bias, act)
                .map_err(|e| Error::CorruptModel(e.to_string()))?,
        );
    }
    SiameseNet::from_layers(layers)
}

pub fn save_net(net: &SiameseNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_net(net)).map_err(|e| Error::io(path, e))
}

pub fn load_net(path: impl AsRef<Path>) -> Result<SiameseNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_net(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siamese::init_net;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = init_net(&[6, 5, 4, 3], 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_net(&net, &path).unwrap();
        let back = load_net(&path).unwrap();
        assert_eq!(back, net);
        let x1 = crate::dataset::gaussian_vector(6, 1.0, 1);
        let x2 = crate::dataset::gaussian_vector(6, 1.0, 2);
        assert_eq!(
            net.distance(&x1, &x2).unwrap().to_bits(),
            back.distance(&x1, &x2).unwrap().to_bits()
        );
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = write_net(&init_net(&[4, 3, 2], 0).unwrap());
        for cut in [0, 4, 12, 20, bytes.len() - 1] {
            let err = read_net(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptModel(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn mismatched_dims_header_is_rejected() {
        let mut bytes = write_net(&init_net(&[4, 3, 2], 0).unwrap());
        // first dim lives right after magic, version and layer count
        bytes[16..24].copy_from_slice(&5u64.to_le_bytes());
        let err = read_net(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::CorruptModel(ref m) if m.contains("header dims")),
            "{err:?}"
        );
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = write_net(&init_net(&[4, 2], 0).unwrap());
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_net(&bytes),
            Err(Error::UnsupportedVersion {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn bad_magic_and_tag() {
        let good = write_net(&init_net(&[4, 2], 0).unwrap());
        let mut bytes = good.clone();
        bytes[0] = b'X';
        assert!(matches!(read_net(&bytes), Err(Error::CorruptModel(_))));
        let mut bytes = good;
        bytes[32] = 7;
        assert!(matches!(read_net(&bytes), Err(Error::CorruptModel(ref m)) if m.contains("tag")));
    }
}
