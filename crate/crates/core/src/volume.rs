//! Volumes, label maps and their on-disk format.
//!
//! File layout: magic `TVOL`, u32 LE version (1), u8 dtype tag
//! (0 = f32 intensity, 1 = u8 labels), u32 LE dims[3] (depth, height,
//! width), f32 LE voxel size in mm, then the payload little-endian,
//! row-major with width fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"TVOL";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Dense 3D scalar field with voxel-size metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxel_mm: f32,
    pub data: Vec<f32>,
}

/// Per-voxel hard class labels, same geometry conventions as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub voxel_mm: f32,
    pub data: Vec<u8>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_mm: f32, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self {
            dims,
            voxel_mm,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], voxel_mm: f32) -> Self {
        Self {
            dims,
            voxel_mm,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Network input tensor of shape (1, 1, d, h, w).
    pub fn to_input_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.dims[0], self.dims[1], self.dims[2]],
            self.data.clone(),
        )
        .expect("volume data length matches dims")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, DTYPE_F32, self.dims, self.voxel_mm)?;
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (dtype, dims, voxel_mm) = read_header(&mut r)?;
        if dtype != DTYPE_F32 {
            return Err(CoreError::Format(format!(
                "expected intensity dtype 0, found {dtype}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut buf = vec![0u8; n * 4];
        read_exact(&mut r, &mut buf, "volume payload")?;
        expect_eof(&mut r)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            dims,
            voxel_mm,
            data,
        })
    }
}

impl LabelMap {
    pub fn new(dims: [usize; 3], voxel_mm: f32, data: Vec<u8>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self {
            dims,
            voxel_mm,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], voxel_mm: f32) -> Self {
        Self {
            dims,
            voxel_mm,
            data: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Voxel count per class for `num_classes` classes.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for &l in &self.data {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, DTYPE_U8, self.dims, self.voxel_mm)?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (dtype, dims, voxel_mm) = read_header(&mut r)?;
        if dtype != DTYPE_U8 {
            return Err(CoreError::Format(format!(
                "expected label dtype 1, found {dtype}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut data = vec![0u8; n];
        read_exact(&mut r, &mut data, "label payload")?;
        expect_eof(&mut r)?;
        Ok(Self {
            dims,
            voxel_mm,
            data,
        })
    }
}

/// Stack volumes into a network input batch of shape (n, 1, d, h, w).
pub fn batch_tensor(volumes: &[&Volume]) -> Result<Tensor> {
    if volumes.is_empty() {
        return Err(CoreError::InvalidConfig("empty batch".into()));
    }
    let dims = volumes[0].dims;
    let mut data = Vec::with_capacity(volumes.len() * volumes[0].numel());
    for v in volumes {
        if v.dims != dims {
            return Err(CoreError::ShapeMismatch(format!(
                "batch mixes dims {:?} and {:?}",
                dims, v.dims
            )));
        }
        data.extend_from_slice(&v.data);
    }
    Tensor::from_vec(&[volumes.len(), 1, dims[0], dims[1], dims[2]], data)
}

fn check_len(dims: [usize; 3], len: usize) -> Result<()> {
    let n = dims[0] * dims[1] * dims[2];
    if n != len {
        return Err(CoreError::ShapeMismatch(format!(
            "dims {dims:?} imply {n} voxels, data has {len}"
        )));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, dtype: u8, dims: [usize; 3], voxel_mm: f32) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype])?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&voxel_mm.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(u8, [usize; 3], f32)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(CoreError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype, "dtype")?;
    if dtype[0] != DTYPE_F32 && dtype[0] != DTYPE_U8 {
        return Err(CoreError::UnknownDtype(dtype[0]));
    }
    let d = read_u32(r, "dims")? as usize;
    let h = read_u32(r, "dims")? as usize;
    let w = read_u32(r, "dims")? as usize;
    let mut vm = [0u8; 4];
    read_exact(r, &mut vm, "voxel size")?;
    Ok((dtype[0], [d, h, w], f32::from_le_bytes(vm)))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CoreError::Truncated(what.to_string()))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(CoreError::Format("trailing bytes after payload".into())),
    }
}
