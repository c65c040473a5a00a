//! Tensors, flat checkpoints and the `ADNK` container file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   "ADNK"
//! 4   version: u16 = 1
//! 6   flags:   u16 = 0
//! 8   header length: u64
//! 16  header: UTF-8 JSON
//! ..  zero padding up to the next multiple of 64
//! P   payload: tensors in name order, offsets relative to P
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::numerics::{decode_bf16, decode_fp8, encode_bf16, encode_fp8};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADNK";
pub const VERSION: u16 = 1;
pub const PAYLOAD_ALIGN: usize = 64;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "fp8_e4m3")]
    Fp8E4M3,
    #[serde(rename = "bf16")]
    Bf16,
    #[serde(rename = "fp32")]
    Fp32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::Fp8E4M3 => 1,
            Dtype::Bf16 => 2,
            Dtype::Fp32 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::Fp8E4M3 => "fp8_e4m3",
            Dtype::Bf16 => "bf16",
            Dtype::Fp32 => "fp32",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp8_e4m3" | "fp8" | "e4m3" => Ok(Dtype::Fp8E4M3),
            "bf16" | "bfloat16" => Ok(Dtype::Bf16),
            "fp32" | "f32" | "float32" => Ok(Dtype::Fp32),
            other => Err(Error::InvalidValue(format!("unknown dtype `{other}`"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl TensorSpec {
    pub fn new(
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidTensor {
            name: name.clone(),
            reason,
        };
        if name.is_empty() {
            return Err(invalid("empty name".into()));
        }
        if shape.contains(&0) {
            return Err(invalid(format!("shape {shape:?} has a zero dimension")));
        }
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| invalid(format!("shape {shape:?} overflows")))?;
        if data.len() != expected {
            return Err(invalid(format!(
                "payload is {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(TensorSpec {
            name,
            dtype,
            shape,
            data,
        })
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, Dtype::Fp32, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.width()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Mutable payload access; the length stays fixed.
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Decodes every element to f32. FP8 NaN codes come out as NaN.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::Fp8E4M3 => self.data.iter().map(|&b| decode_fp8(b)).collect(),
            Dtype::Bf16 => self
                .data
                .chunks_exact(2)
                .map(|c| decode_bf16(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            Dtype::Fp32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        }
    }
}

/// Element-wise cast through f32. Same-dtype casts return the input bytes.
///
/// Fails with `InvalidValue` when a NaN or infinity would have to be stored
/// as FP8.
pub fn cast_tensor(t: &TensorSpec, target: Dtype) -> Result<TensorSpec> {
    if t.dtype == target {
        return Ok(t.clone());
    }
    let values = t.to_f32_vec();
    let data = match target {
        Dtype::Fp8E4M3 => values
            .iter()
            .map(|&v| encode_fp8(v))
            .collect::<Result<Vec<u8>>>()
            .map_err(|e| Error::InvalidValue(format!("tensor `{}`: {e}", t.name)))?,
        Dtype::Bf16 => values
            .iter()
            .flat_map(|&v| encode_bf16(v).to_le_bytes())
            .collect(),
        Dtype::Fp32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    Ok(TensorSpec {
        name: t.name.clone(),
        dtype: target,
        shape: t.shape.clone(),
        data,
    })
}

/// Named tensors kept in lexicographic name order, plus string metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlatCheckpoint {
    tensors: Vec<TensorSpec>,
    metadata: BTreeMap<String, String>,
}

impl FlatCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(
        tensors: impl IntoIterator<Item = TensorSpec>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut tensors: Vec<TensorSpec> = tensors.into_iter().collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = tensors.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::DuplicateTensor(w[0].name.clone()));
        }
        Ok(FlatCheckpoint { tensors, metadata })
    }

    pub fn insert(&mut self, tensor: TensorSpec) -> Result<()> {
        match self
            .tensors
            .binary_search_by(|t| t.name.as_str().cmp(&tensor.name))
        {
            Ok(_) => Err(Error::DuplicateTensor(tensor.name)),
            Err(pos) => {
                self.tensors.insert(pos, tensor);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorSpec> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<TensorSpec> {
        self.tensors
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    /// Casts every tensor, in parallel, keeping metadata.
    pub fn cast(&self, target: Dtype) -> Result<FlatCheckpoint> {
        let tensors = self
            .tensors
            .par_iter()
            .map(|t| cast_tensor(t, target))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlatCheckpoint {
            tensors,
            metadata: self.metadata.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            entries.push(HeaderEntry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
                nbytes: t.data.len(),
            });
            offset += t.data.len();
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let payload_start = payload_start(header.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(payload_start, 0);
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing ADNK magic".into()));
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::CorruptFile("truncated preamble".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        if flags != 0 {
            return Err(Error::Format(format!("unsupported flags {flags:#x}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .map_err(|_| Error::CorruptFile("header length overflows".into()))?;
        let header_end = PREAMBLE_LEN
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::CorruptFile("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let payload = bytes
            .get(payload_start(header_len)..)
            .ok_or_else(|| Error::CorruptFile("truncated before payload".into()))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0usize;
        for e in header.tensors {
            if e.offset != expected_offset {
                return Err(Error::CorruptFile(format!(
                    "tensor `{}` at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    Error::CorruptFile(format!("payload of `{}` is truncated", e.name))
                })?;
            let data = payload[e.offset..end].to_vec();
            let tensor = TensorSpec::new(e.name, e.dtype, e.shape, data)
                .map_err(|err| Error::CorruptFile(err.to_string()))?;
            expected_offset = end;
            tensors.push(tensor);
        }
        if expected_offset != payload.len() {
            return Err(Error::CorruptFile(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        if tensors.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(Error::Format("tensors not in canonical name order".into()));
        }
        Ok(FlatCheckpoint {
            tensors,
            metadata: header.metadata,
        })
    }
}

fn payload_start(header_len: usize) -> usize {
    (PREAMBLE_LEN + header_len).next_multiple_of(PAYLOAD_ALIGN)
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
    metadata: BTreeMap<String, String>,
}

/// Writes `contents` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_checkpoint(c: &FlatCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &c.to_bytes()?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<FlatCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FlatCheckpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::numerics::is_fp8_nan;
    use proptest::prelude::*;

    fn fp8(name: &str, bytes: Vec<u8>) -> TensorSpec {
        let n = bytes.len();
        TensorSpec::new(name, Dtype::Fp8E4M3, vec![n], bytes).unwrap()
    }

    #[test]
    fn rejects_bad_payload_length() {
        let err = TensorSpec::new("w", Dtype::Bf16, vec![2, 3], vec![0; 11]).unwrap_err();
        assert!(matches!(err, Error::InvalidTensor { .. }));
        assert!(TensorSpec::new("", Dtype::Fp32, vec![1], vec![0; 4]).is_err());
    }

    #[test]
    fn fp8_to_bf16_holds_one() {
        let t = fp8("w", vec![0x38]);
        let b = cast_tensor(&t, Dtype::Bf16).unwrap();
        assert_eq!(b.dtype(), Dtype::Bf16);
        assert_eq!(b.to_f32_vec(), vec![1.0]);
        assert_eq!(cast_tensor(&b, Dtype::Bf16).unwrap(), b);
    }

    #[test]
    fn fp8_bf16_fp8_is_identity_on_all_codes() {
        let codes: Vec<u8> = (0..=255u8).filter(|b| !is_fp8_nan(*b)).collect();
        assert_eq!(codes.len(), 254);
        let t = fp8("all", codes);
        let back = cast_tensor(&cast_tensor(&t, Dtype::Bf16).unwrap(), Dtype::Fp8E4M3).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn nan_cannot_become_fp8() {
        let t = TensorSpec::from_f32("x", vec![1], &[f32::NAN]).unwrap();
        assert!(matches!(
            cast_tensor(&t, Dtype::Fp8E4M3),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = FlatCheckpoint::new();
        c.insert(fp8("a", vec![1])).unwrap();
        assert!(matches!(
            c.insert(fp8("a", vec![2])),
            Err(Error::DuplicateTensor(_))
        ));
        let dup =
            FlatCheckpoint::from_tensors([fp8("b", vec![1]), fp8("b", vec![1])], BTreeMap::new());
        assert!(dup.is_err());
    }

    #[test]
    fn empty_round_trip() {
        let c = FlatCheckpoint::new();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len() % PAYLOAD_ALIGN, 0);
        assert_eq!(FlatCheckpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn header_layout_is_exact() {
        let mut c = FlatCheckpoint::new();
        c.insert(fp8("b", vec![1, 2])).unwrap();
        c.insert(TensorSpec::from_f32("a", vec![1], &[1.5]).unwrap())
            .unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ADNK");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "a");
        assert_eq!(header["tensors"][0]["dtype"], "fp32");
        assert_eq!(header["tensors"][1]["offset"], 4);
        assert_eq!(header["tensors"][1]["nbytes"], 2);
        let start = (16 + hlen).next_multiple_of(64);
        assert_eq!(&bytes[start..start + 4], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[start + 4..], &[1, 2]);
    }

    #[test]
    fn truncated_and_foreign_files() {
        let mut c = FlatCheckpoint::new();
        c.insert(fp8("w", vec![7; 32])).unwrap();
        let bytes = c.to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 32, 20, 10] {
            assert!(
                matches!(
                    FlatCheckpoint::from_bytes(&bytes[..cut]),
                    Err(Error::CorruptFile(_))
                ),
                "cut at {cut}"
            );
        }
        assert!(matches!(
            FlatCheckpoint::from_bytes(b"GGUF0000"),
            Err(Error::Format(_))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(matches!(
            FlatCheckpoint::from_bytes(&wrong_version),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.adnk");
        let mut c = FlatCheckpoint::new();
        c.metadata_mut().insert("source".into(), "unit".into());
        c.insert(fp8("z", vec![0x38, 0x30])).unwrap();
        write_checkpoint(&c, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), c);
        let missing = read_checkpoint(dir.path().join("nope.adnk")).unwrap_err();
        assert!(missing.is_io());
    }

    fn tensor_strategy() -> impl Strategy<Value = TensorSpec> {
        (
            "[a-z.]{1,12}",
            prop_oneof![Just(Dtype::Fp8E4M3), Just(Dtype::Bf16), Just(Dtype::Fp32)],
            proptest::collection::vec(1usize..4, 0..3),
        )
            .prop_flat_map(|(name, dtype, shape)| {
                let n = shape.iter().product::<usize>() * dtype.width();
                proptest::collection::vec(any::<u8>(), n).prop_map(move |data| {
                    TensorSpec::new(name.clone(), dtype, shape.clone(), data).unwrap()
                })
            })
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            tensors in proptest::collection::vec(tensor_strategy(), 0..5),
            meta in proptest::collection::btree_map("[a-z]{1,4}", "[ -~]{0,8}", 0..3),
        ) {
            let mut c = FlatCheckpoint::new();
            c.metadata_mut().extend(meta);
            for t in tensors {
                let _ = c.insert(t);
            }
            let back = FlatCheckpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
