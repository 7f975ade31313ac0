//! Binary checkpoint format.
//!
//! ```text
//! magic        4 bytes   "SOUP"
//! version      u32 LE    1
//! layer_count  u32 LE
//! per layer:
//!   name_len   u32 LE
//!   name       name_len bytes, UTF-8
//!   ndim       u32 LE
//!   dims       ndim × u32 LE
//!   payload    numel × f64 LE, row-major
//! trailer      u32 LE    CRC-32 (IEEE, reflected 0xEDB88320) over every payload byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crc32fast::Hasher;

use super::{LayerMap, ParamVector};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SOUP";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 1 << 16;
const MAX_NDIM: u32 = 16;

pub fn write_checkpoint(layers: &LayerMap, params: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if layers.is_empty() {
        return Err(Error::InvalidLayout("cannot write a checkpoint with no layers".into()));
    }
    if params.len() != layers.total_len() {
        return Err(Error::ShapeMismatch {
            expected: layers.total_len(),
            actual: params.len(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut crc = Hasher::new();
    let io = |e| Error::io(path, e);

    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(layers.len() as u32).to_le_bytes()).map_err(io)?;
    for layer in layers.layers() {
        let name = layer.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(layer.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &layer.shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &x in &params[layer.range()] {
            let bytes = x.to_le_bytes();
            crc.update(&bytes);
            w.write_all(&bytes).map_err(io)?;
        }
    }
    w.write_all(&crc.finalize().to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(LayerMap, ParamVector)> {
    let path = path.as_ref();
    let mut r = CheckpointReader::open(path)?;
    let mut specs = Vec::with_capacity(r.layer_count as usize);
    let mut data = Vec::new();
    let mut crc = Hasher::new();
    for _ in 0..r.layer_count {
        let (name, shape) = r.layer_header()?;
        let numel: usize = shape.iter().product();
        data.reserve(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            crc.update(&buf);
            data.push(f64::from_le_bytes(buf));
        }
        specs.push((name, shape));
    }
    let stored = r.u32()?;
    let computed = crc.finalize();
    if stored != computed {
        return Err(Error::CrcMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    r.expect_eof()?;
    let layers = LayerMap::new(specs).map_err(|e| r.malformed(e.to_string()))?;
    Ok((layers, ParamVector::new(data)))
}

/// Reads only the layer map, seeking past payloads without buffering them.
pub fn read_layout(path: impl AsRef<Path>) -> Result<LayerMap> {
    let path = path.as_ref();
    let mut r = CheckpointReader::open(path)?;
    let mut specs = Vec::with_capacity(r.layer_count as usize);
    for _ in 0..r.layer_count {
        let (name, shape) = r.layer_header()?;
        let numel: usize = shape.iter().product();
        r.skip(numel as u64 * 8)?;
        specs.push((name, shape));
    }
    r.u32()?;
    LayerMap::new(specs).map_err(|e| r.malformed(e.to_string()))
}

struct CheckpointReader<'p> {
    path: &'p Path,
    inner: BufReader<File>,
    layer_count: u32,
}

impl<'p> CheckpointReader<'p> {
    fn open(path: &'p Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = CheckpointReader {
            path,
            inner: BufReader::new(file),
            layer_count: 0,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        r.layer_count = r.u32()?;
        if r.layer_count == 0 {
            return Err(r.malformed("zero layers".into()));
        }
        Ok(r)
    }

    fn malformed(&self, reason: String) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Truncated {
                path: self.path.to_path_buf(),
            },
            _ => Error::io(self.path, e),
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn skip(&mut self, n: u64) -> Result<()> {
        let copied = std::io::copy(&mut (&mut self.inner).take(n), &mut std::io::sink())
            .map_err(|e| Error::io(self.path, e))?;
        if copied != n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
            });
        }
        Ok(())
    }

    fn layer_header(&mut self) -> Result<(String, Vec<usize>)> {
        let name_len = self.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(self.malformed(format!("layer name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len as usize];
        self.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| self.malformed("layer name is not UTF-8".into()))?;
        let ndim = self.u32()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(self.malformed(format!("layer {name:?} has ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = self.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| self.malformed(format!("layer {name:?} is too large")))?;
            shape.push(d);
        }
        Ok((name, shape))
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.malformed("trailing bytes after CRC".into())),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> (LayerMap, ParamVector) {
        let map = LayerMap::new([("w0", vec![2, 3]), ("b0", vec![2])]).unwrap();
        let v = ParamVector::new((0..8).map(|i| i as f64 * 0.37 - 1.1).collect());
        (map, v)
    }

    #[test]
    fn round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.soup");
        let (map, v) = sample();
        write_checkpoint(&map, &v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0x53, 0x4F, 0x55, 0x50]);
        let (map2, v2) = read_checkpoint(&path).unwrap();
        assert_eq!(map, map2);
        assert!(v.bit_eq(&v2));
        assert_eq!(read_layout(&path).unwrap(), map);
    }

    #[test]
    fn corrupted_payload_is_a_crc_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.soup");
        let (map, v) = sample();
        write_checkpoint(&map, &v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // last payload byte sits just before the 4-byte trailer
        let n = bytes.len();
        bytes[n - 5] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::CrcMismatch { .. })));
    }

    #[test]
    fn distinct_errors_for_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.soup");

        std::fs::write(&path, b"SOU").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Truncated { .. })));

        std::fs::write(&path, b"NOPE\x01\0\0\0\x01\0\0\0").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::BadMagic { .. })));

        std::fs::write(&path, b"SOUP\x02\0\0\0\x01\0\0\0").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));

        let (map, v) = sample();
        write_checkpoint(&map, &v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn write_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (map, _) = sample();
        let err = write_checkpoint(&map, &[1.0, 2.0], dir.path().join("x.soup")).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { expected: 8, actual: 2 }));
    }

    #[test]
    fn crc_matches_reference_polynomial() {
        // "123456789" is the standard CRC-32 check string.
        let mut h = Hasher::new();
        h.update(b"123456789");
        assert_eq!(h.finalize(), 0xCBF4_3926);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip_is_bit_exact(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5),
            seed in any::<u64>(),
        ) {
            let specs: Vec<(String, Vec<usize>)> =
                shapes.into_iter().enumerate().map(|(i, s)| (format!("layer{i}"), s)).collect();
            let map = LayerMap::new(specs).unwrap();
            let mut state = seed | 1;
            let data: Vec<f64> = (0..map.total_len())
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    f64::from_bits(state & !(0x7FF << 52) | (((state >> 52) % 0x7FE) << 52))
                })
                .collect();
            let v = ParamVector::new(data);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.soup");
            write_checkpoint(&map, &v, &path).unwrap();
            let (map2, v2) = read_checkpoint(&path).unwrap();
            prop_assert_eq!(map, map2);
            prop_assert!(v.bit_eq(&v2));
        }
    }
}
