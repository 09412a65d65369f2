//! Binary container for named tensors.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FNGI"  u16 version  u32 section_count
//! per section:
//!   u16 name_len  name  u8 dtype  u8 rank  u64 extents[rank]
//!   u64 payload_len  payload  u32 crc32(header fields + payload)
//! ```
//!
//! Dtype tags: 0 = f32, 1 = f64, 2 = u8, 3 = i32. Sections with an unknown
//! tag are kept as opaque bytes so files written by newer versions still load
//! and re-serialize unchanged.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FNGI";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
    Opaque { tag: u8, bytes: Vec<u8> },
}

impl SectionData {
    fn tag(&self) -> u8 {
        match self {
            Self::F32(_) => 0,
            Self::F64(_) => 1,
            Self::U8(_) => 2,
            Self::I32(_) => 3,
            Self::Opaque { tag, .. } => *tag,
        }
    }

    fn elem_size(tag: u8) -> Option<usize> {
        match tag {
            0 | 3 => Some(4),
            1 => Some(8),
            2 => Some(1),
            _ => None,
        }
    }

    fn count(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::I32(v) => v.len(),
            Self::Opaque { bytes, .. } => bytes.len(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            Self::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::U8(v) => out.extend_from_slice(v),
            Self::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::Opaque { bytes, .. } => out.extend_from_slice(bytes),
        }
    }

    fn decode(tag: u8, bytes: &[u8]) -> Self {
        match tag {
            0 => Self::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Self::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Self::U8(bytes.to_vec()),
            3 => Self::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Self::Opaque {
                tag,
                bytes: bytes.to_vec(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub extents: Vec<u64>,
    pub data: SectionData,
}

impl Section {
    pub fn new(name: impl Into<String>, extents: Vec<usize>, data: SectionData) -> Result<Self> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("section name too long"));
        }
        if extents.len() > u8::MAX as usize {
            return Err(Error::invalid("section rank too large"));
        }
        if !matches!(data, SectionData::Opaque { .. }) && extents.iter().product::<usize>() != data.count() {
            return Err(Error::shape(
                "store section",
                format!("'{}' extents {:?} hold {} values", name, extents, data.count()),
            ));
        }
        Ok(Self {
            name,
            extents: extents.into_iter().map(|e| e as u64).collect(),
            data,
        })
    }

    pub fn extents(&self) -> Vec<usize> {
        self.extents.iter().map(|&e| e as usize).collect()
    }
}

/// An ordered collection of named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    sections: Vec<Section>,
}

macro_rules! typed_access {
    ($put:ident, $get:ident, $ty:ty, $variant:ident) => {
        pub fn $put(&mut self, name: &str, extents: Vec<usize>, data: Vec<$ty>) -> Result<()> {
            self.insert(Section::new(name, extents, SectionData::$variant(data))?);
            Ok(())
        }

        /// Extents and values of a section of this dtype.
        pub fn $get(&self, name: &str) -> Result<(Vec<usize>, &[$ty])> {
            let s = self.require(name)?;
            match &s.data {
                SectionData::$variant(v) => Ok((s.extents(), v)),
                _ => Err(Error::data(format!("section '{}' is not {}", name, stringify!($ty)))),
            }
        }
    };
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a section, replacing any existing one with the same name in place.
    pub fn insert(&mut self, section: Section) {
        match self.sections.iter_mut().find(|s| s.name == section.name) {
            Some(slot) => *slot = section,
            None => self.sections.push(section),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| Error::data(format!("missing section '{name}'")))
    }

    typed_access!(put_f32, f32s, f32, F32);
    typed_access!(put_f64, f64s, f64, F64);
    typed_access!(put_u8, u8s, u8, U8);
    typed_access!(put_i32, i32s, i32, I32);

    pub fn put_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.put_u8(name, vec![text.len()], text.as_bytes().to_vec())
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let (_, bytes) = self.u8s(name)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::data(format!("section '{name}' is not UTF-8")))
    }

    pub fn put_u64(&mut self, name: &str, value: u64) -> Result<()> {
        self.put_u8(name, vec![8], value.to_le_bytes().to_vec())
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let (_, bytes) = self.u8s(name)?;
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| Error::data(format!("section '{name}' is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            let start = out.len();
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.data.tag());
            out.push(s.extents.len() as u8);
            for e in &s.extents {
                out.extend_from_slice(&e.to_le_bytes());
            }
            let len_at = out.len();
            out.extend_from_slice(&[0; 8]);
            s.data.write_payload(&mut out);
            let payload_len = (out.len() - len_at - 8) as u64;
            out[len_at..len_at + 8].copy_from_slice(&payload_len.to_le_bytes());
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fail("truncated header".into()))?;
        if magic != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = r.u16().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        let mut sections = Vec::with_capacity(count.min(1024) as usize);
        for i in 0..count {
            let trunc = || fail(format!("section {i} truncated"));
            let start = r.pos;
            let name_len = r.u16().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(trunc)?.to_vec())
                .map_err(|_| fail(format!("section {i} name is not UTF-8")))?;
            let tag = r.u8().ok_or_else(trunc)?;
            let rank = r.u8().ok_or_else(trunc)? as usize;
            let extents = (0..rank).map(|_| r.u64()).collect::<Option<Vec<u64>>>().ok_or_else(trunc)?;
            let payload_len = r.u64().ok_or_else(trunc)? as usize;
            let payload = r.take(payload_len).ok_or_else(trunc)?;
            let stored_crc = r.u32().ok_or_else(trunc)?;
            if crc32fast::hash(&bytes[start..r.pos - 4]) != stored_crc {
                return Err(fail(format!("checksum mismatch in section '{name}'")));
            }
            if let Some(size) = SectionData::elem_size(tag) {
                let n: u64 = extents.iter().product();
                if n.checked_mul(size as u64) != Some(payload_len as u64) {
                    return Err(fail(format!("section '{name}' payload length disagrees with extents")));
                }
            }
            sections.push(Section {
                name,
                extents,
                data: SectionData::decode(tag, payload),
            });
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes".into()));
        }
        Ok(Self { sections })
    }

    /// Write atomically: a sibling temporary file is renamed over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Write `bytes` to `path` via a renamed temporary, creating parent dirs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = temp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorStore {
        let mut s = TensorStore::new();
        s.put_f32("weights", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        s.put_f64("pca.mean", vec![2], vec![0.1, -0.2]).unwrap();
        s.put_u8("mask", vec![2, 2], vec![0, 1, 255, 3]).unwrap();
        s.put_i32("labels", vec![3], vec![-1, 0, 42]).unwrap();
        s.put_text("config", "a = 1\n").unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = sample();
        let bytes = s.to_bytes();
        let back = TensorStore::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.text("config").unwrap(), "a = 1\n");
        assert_eq!(back.i32s("labels").unwrap().1, &[-1, 0, 42]);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"FNGI");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 5);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 6] ^= 0x40;
        let err = TensorStore::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert!(TensorStore::from_bytes(&bytes[..20], Path::new("x")).is_err());
        assert!(TensorStore::from_bytes(b"NOPE\x01\x00\x00\x00\x00\x00", Path::new("x")).is_err());
    }

    #[test]
    fn unknown_dtype_sections_survive() {
        let mut s = sample();
        s.insert(Section::new("future", vec![5], SectionData::Opaque { tag: 9, bytes: vec![1, 2, 3] }).unwrap());
        let bytes = s.to_bytes();
        let back = TensorStore::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.f32s("weights").unwrap().0, vec![2, 3]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn extents_must_match_values() {
        assert!(TensorStore::new().put_f32("w", vec![2, 2], vec![1.0]).is_err());
        assert!(sample().f64s("weights").is_err());
        assert!(sample().f32s("missing").is_err());
    }

    #[test]
    fn file_write_is_atomic_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("bank.fngi");
        sample().write(&path).unwrap();
        sample().write(&path).unwrap();
        assert_eq!(TensorStore::read(&path).unwrap(), sample());
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
