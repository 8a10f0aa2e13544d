//! Named-tensor parameter sets and the `.brvt` parameter archive.
//!
//! Archive layout (little-endian): magic `BRVT`, u32 version, u32 tensor
//! count, then per tensor: u16 name length, UTF-8 name, u8 rank,
//! u32 dims[rank], f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"BRVT";
pub const ARCHIVE_VERSION: u32 = 1;

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }

    /// Views the tensor as a matrix, folding all leading axes into rows.
    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        ArrayView2::from_shape((rows, cols), &self.data).expect("contiguous tensor")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        ArrayViewMut2::from_shape((rows, cols), &mut self.data).expect("contiguous tensor")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("missing parameter tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Reads a rank-0 metadata tensor.
    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        t.data
            .first()
            .copied()
            .ok_or_else(|| Error::Format(format!("empty scalar tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
            .collect();
        ParamSet { tensors }
    }

    /// `self += other`, matched by name. Tensors absent from `other` are left alone.
    pub fn add_assign(&mut self, other: &ParamSet) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                for (a, b) in t.data.iter_mut().zip(&o.data) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Rounds every value through `f32`, making the in-memory set identical
    /// to what a save/load cycle produces.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Hex SHA-256 over names, shapes, and the bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<archive>", e);
        w.write_all(ARCHIVE_MAGIC).map_err(io)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Format(format!("tensor rank too large: {name}")))?;
            w.write_all(&name_len.to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&[rank]).map_err(io)?;
            for d in &t.shape {
                let d = u32::try_from(*d)
                    .map_err(|_| Error::Format(format!("dimension overflow in {name}")))?;
                w.write_all(&d.to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format(format!(
                "bad archive magic {magic:?}, expected BRVT"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!(
                "unsupported archive version {version}"
            )));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::Format(format!("dimension overflow in {name}")))?;
            let mut raw = vec![0u8; numel * 4];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            set.insert(name, Tensor { shape, data });
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated payload".into())
        } else {
            Error::io("<stream>", e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's contents.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 0.0, 7.0]).unwrap());
        p.insert("a.bias", Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        p.insert("meta.heads", Tensor::scalar(4.0));
        p
    }

    #[test]
    fn archive_round_trip_preserves_f32_values() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParamSet::read_from(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.scalar("meta.heads").unwrap(), 4.0);
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(ParamSet::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = ParamSet::read_from(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn checksum_sees_single_value_change() {
        let p = sample();
        let mut q = p.clone();
        q.get_mut("a.bias").unwrap().data[1] = -0.5000001;
        assert_ne!(p.checksum(), q.checksum());
    }
}
