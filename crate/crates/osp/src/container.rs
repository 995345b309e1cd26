//! The OSPT container: a versioned text manifest followed by one
//! self-describing binary blob per named tensor.
//!
//! File layout (integers little-endian):
//!
//! ```text
//! "OSPT" | u16 version | u32 manifest length | u32 manifest crc32 | manifest
//! blob*  = "OSPT" | u16 version | u8 dtype | u8 rank | u64 extent * rank | payload
//! ```
//!
//! Manifest lines are `tensor <name> <dtype> <extents> <blob bytes> <crc32>`
//! after an `ospt-manifest 1` header. Blobs follow in manifest order and the
//! file ends exactly after the last one.

use std::fmt;
use std::path::Path;

use osp_core::diffcore::Tensor;

use crate::error::{OspError, Result};

pub const MAGIC: &[u8; 4] = b"OSPT";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("not an OSPT container")]
    BadMagic,
    #[error("unsupported container version {found} (expected {VERSION})")]
    Version { found: u16 },
    #[error("truncated {what}")]
    Truncated { what: String },
    #[error("checksum mismatch in {tensor}")]
    Checksum { tensor: String },
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    U8 = 2,
    U32 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 | Self::U32 => 4,
            Self::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
            Self::U8 => "u8",
            Self::U32 => "u32",
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::F64,
            1 => Self::F32,
            2 => Self::U8,
            3 => Self::U32,
            _ => return None,
        })
    }

    fn from_name(s: &str) -> Option<Self> {
        [Self::F64, Self::F32, Self::U8, Self::U32].into_iter().find(|d| d.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F64(_) => DType::F64,
            Self::F32(_) => DType::F32,
            Self::U8(_) => DType::U8,
            Self::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Self::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
            Self::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
            Self::U8(v) => out.extend_from_slice(v),
            Self::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F64 => Self::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
            ),
            DType::F32 => Self::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
            ),
            DType::U8 => Self::U8(bytes.to_vec()),
            DType::U32 => Self::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: &str, dims: &[usize], data: TensorData) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(OspError::Data(format!("tensor {name}: dims {dims:?} do not match {} values", data.len())));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(OspError::Data(format!("tensor name {name:?} must be non-empty without whitespace")));
        }
        Ok(Self {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        Self::new(name, t.dims(), TensorData::F64(t.data().to_vec()))
    }

    /// Numeric contents as a float tensor; unsigned and f32 data widen exactly.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::U32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        Ok(Tensor::new(&self.dims, data)?)
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &e in &self.dims {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        self.data.write_le(&mut out);
        out
    }
}

/// An ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NamedTensor) -> Result<()> {
        if self.get(&t.name).is_some() {
            return Err(OspError::Data(format!("duplicate tensor name {}", t.name)));
        }
        if t.dims.len() > usize::from(u8::MAX) {
            return Err(OspError::Data(format!("tensor {} has rank above 255", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| OspError::Data(format!("container has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.tensors.iter().map(NamedTensor::blob).collect();
        let mut manifest = String::from("ospt-manifest 1\n");
        for (t, b) in self.tensors.iter().zip(&blobs) {
            let dims: Vec<String> = t.dims.iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { String::from("-") } else { dims.join("x") };
            manifest.push_str(&format!(
                "tensor {} {} {} {} {:08x}\n",
                t.name,
                t.data.dtype().name(),
                dims,
                b.len(),
                crc32fast::hash(b)
            ));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(manifest.as_bytes()).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for b in blobs {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ContainerError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < 6 {
            return Err(truncated("header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(ContainerError::Version { found: version });
        }
        if bytes.len() < HEADER {
            return Err(truncated("header"));
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let mcrc = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
        let Some(mbytes) = bytes.get(HEADER..HEADER + mlen) else {
            return Err(truncated("manifest"));
        };
        if crc32fast::hash(mbytes) != mcrc {
            return Err(ContainerError::Checksum {
                tensor: String::from("manifest"),
            });
        }
        let manifest = std::str::from_utf8(mbytes).map_err(|_| malformed("manifest is not UTF-8"))?;
        let mut lines = manifest.lines();
        if lines.next() != Some("ospt-manifest 1") {
            return Err(malformed("missing manifest header"));
        }
        let mut pos = HEADER + mlen;
        let mut out = Container::new();
        for line in lines {
            let entry = ManifestEntry::parse(line)?;
            let Some(blob) = bytes.get(pos..pos + entry.bytes) else {
                return Err(truncated(&format!("payload of {}", entry.name)));
            };
            if crc32fast::hash(blob) != entry.crc {
                return Err(ContainerError::Checksum { tensor: entry.name });
            }
            let data = entry.decode_blob(blob)?;
            pos += entry.bytes;
            if out.get(&entry.name).is_some() {
                return Err(malformed(&format!("duplicate tensor {}", entry.name)));
            }
            out.tensors.push(NamedTensor {
                name: entry.name,
                dims: entry.dims,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(malformed(&format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| OspError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| OspError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| OspError::Container {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl fmt::Display for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(f, "{} {} {:?}", t.name, t.data.dtype().name(), t.dims)?;
        }
        Ok(())
    }
}

struct ManifestEntry {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    bytes: usize,
    crc: u32,
}

impl ManifestEntry {
    fn parse(line: &str) -> std::result::Result<Self, ContainerError> {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 6 || f[0] != "tensor" {
            return Err(malformed(&format!("bad manifest line {line:?}")));
        }
        let dtype = DType::from_name(f[2]).ok_or_else(|| malformed(&format!("unknown dtype {}", f[2])))?;
        let dims = if f[3] == "-" {
            Vec::new()
        } else {
            f[3].split('x')
                .map(|s| s.parse::<usize>().map_err(|_| malformed(&format!("bad extents {}", f[3]))))
                .collect::<std::result::Result<_, _>>()?
        };
        let bytes = f[4].parse().map_err(|_| malformed(&format!("bad blob length {}", f[4])))?;
        let crc = u32::from_str_radix(f[5], 16).map_err(|_| malformed(&format!("bad checksum {}", f[5])))?;
        Ok(Self {
            name: f[1].to_string(),
            dtype,
            dims,
            bytes,
            crc,
        })
    }

    /// Checks the blob header against the manifest and decodes the payload.
    fn decode_blob(&self, blob: &[u8]) -> std::result::Result<TensorData, ContainerError> {
        let head = 8 + 8 * self.dims.len();
        let count: usize = self.dims.iter().product();
        if blob.len() < head {
            return Err(truncated(&format!("blob header of {}", self.name)));
        }
        if &blob[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u16::from_le_bytes([blob[4], blob[5]]);
        if version != VERSION {
            return Err(ContainerError::Version { found: version });
        }
        if DType::from_code(blob[6]) != Some(self.dtype) || usize::from(blob[7]) != self.dims.len() {
            return Err(malformed(&format!("blob header of {} disagrees with manifest", self.name)));
        }
        for (i, &e) in self.dims.iter().enumerate() {
            let at = 8 + 8 * i;
            if u64::from_le_bytes(blob[at..at + 8].try_into().expect("8 bytes")) != e as u64 {
                return Err(malformed(&format!("extents of {} disagree with manifest", self.name)));
            }
        }
        let payload = &blob[head..];
        if payload.len() != count * self.dtype.size() {
            return Err(truncated(&format!("payload of {}", self.name)));
        }
        Ok(TensorData::read_le(self.dtype, payload))
    }
}

fn truncated(what: &str) -> ContainerError {
    ContainerError::Truncated { what: what.to_string() }
}

fn malformed(msg: &str) -> ContainerError {
    ContainerError::Malformed(msg.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push(NamedTensor::new("a", &[2, 3], TensorData::F64(vec![1.0, -2.5, f64::NAN, 0.0, -0.0, 1e300])).unwrap())
            .unwrap();
        c.push(NamedTensor::new("b", &[4], TensorData::U8(vec![0, 1, 2, 255])).unwrap()).unwrap();
        c.push(NamedTensor::new("scalar", &[], TensorData::U32(vec![7])).unwrap()).unwrap();
        c.push(NamedTensor::new("f", &[0, 2], TensorData::F32(vec![])).unwrap()).unwrap();
        c
    }

    #[test]
    fn round_trip_preserves_bits() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let TensorData::F64(v) = &back.get("a").unwrap().data else { panic!() };
        assert!(v[2].is_nan());
        assert_eq!(v[4].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = Container::new().to_bytes();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), Container::new());
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut v = bytes.clone();
        v[4] = 9;
        assert_eq!(Container::from_bytes(&v), Err(ContainerError::Version { found: 9 }));
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 3]), Err(ContainerError::Truncated { .. })));
        let mut v = bytes.clone();
        let last = v.len() - 1;
        v[last] ^= 0x10;
        assert_eq!(Container::from_bytes(&v), Err(ContainerError::Checksum { tensor: "f".into() }));
        assert_eq!(Container::from_bytes(b"NOPE"), Err(ContainerError::BadMagic));
    }

    #[test]
    fn payload_corruption_names_the_tensor() {
        let c = sample();
        let bytes = c.to_bytes();
        // the first blob starts right after the manifest
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut v = bytes.clone();
        v[HEADER + mlen + 20] ^= 1;
        assert_eq!(Container::from_bytes(&v), Err(ContainerError::Checksum { tensor: "a".into() }));
    }

    #[test]
    fn rejects_bad_names_and_duplicates() {
        assert!(NamedTensor::new("has space", &[1], TensorData::U8(vec![1])).is_err());
        assert!(NamedTensor::new("x", &[2], TensorData::U8(vec![1])).is_err());
        let mut c = sample();
        assert!(c.push(NamedTensor::new("a", &[1], TensorData::U8(vec![1])).unwrap()).is_err());
    }
}
