//! Raw binary array format.
//!
//! 32-byte header followed by little-endian raw values:
//!
//! | offset | field                    |
//! |--------|--------------------------|
//! | 0      | magic `SEGV`             |
//! | 4      | version (u32, = 1)       |
//! | 8      | dtype (u32: 0 real32, 1 complex32) |
//! | 12     | ndim (u32, <= 4)         |
//! | 16     | dims (4 x u32)           |
//!
//! Complex values are stored interleaved `(re, im)` as f32 pairs.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use num_complex::Complex32;

pub const MAGIC: &[u8; 4] = b"SEGV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    Real(Vec<f32>),
    Complex(Vec<Complex32>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::Real(v) => v.len(),
            ArrayData::Complex(v) => v.len(),
        }
    }

    fn dtype_code(&self) -> u32 {
        match self {
            ArrayData::Real(_) => 0,
            ArrayData::Complex(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn real(dims: Vec<usize>, data: Vec<f32>) -> Array {
        Array { dims, data: ArrayData::Real(data) }
    }

    pub fn complex(dims: Vec<usize>, data: Vec<Complex32>) -> Array {
        Array { dims, data: ArrayData::Complex(data) }
    }

    pub fn expect_real(&self) -> Result<&[f32]> {
        match &self.data {
            ArrayData::Real(v) => Ok(v),
            ArrayData::Complex(_) => bail!("expected a real32 array"),
        }
    }

    pub fn expect_complex(&self) -> Result<&[Complex32]> {
        match &self.data {
            ArrayData::Complex(v) => Ok(v),
            ArrayData::Real(_) => bail!("expected a complex32 array"),
        }
    }
}

pub fn write_array(path: &Path, array: &Array) -> Result<()> {
    if array.dims.is_empty() || array.dims.len() > 4 {
        bail!("arrays carry 1 to 4 dimensions, got {}", array.dims.len());
    }
    let elems: usize = array.dims.iter().product();
    if elems != array.data.len() {
        bail!("dims {:?} do not match {} elements", array.dims, array.data.len());
    }
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&array.data.dtype_code().to_le_bytes());
    header.extend_from_slice(&(array.dims.len() as u32).to_le_bytes());
    for i in 0..4 {
        let d = array.dims.get(i).copied().unwrap_or(0) as u32;
        header.extend_from_slice(&d.to_le_bytes());
    }
    debug_assert_eq!(header.len(), 32);
    file.write_all(&header)?;
    let mut body: Vec<u8> = Vec::new();
    match &array.data {
        ArrayData::Real(v) => {
            body.reserve(v.len() * 4);
            for x in v {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        ArrayData::Complex(v) => {
            body.reserve(v.len() * 8);
            for z in v {
                body.extend_from_slice(&z.re.to_le_bytes());
                body.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    file.write_all(&body)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<Array> {
    let mut file = std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut header = [0u8; 32];
    file.read_exact(&mut header)
        .with_context(|| format!("reading header of {}", path.display()))?;
    if &header[0..4] != MAGIC {
        bail!("{} is not an array file (bad magic)", path.display());
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        bail!("{}: unsupported version {version}", path.display());
    }
    let dtype = word(8);
    let ndim = word(12) as usize;
    if ndim == 0 || ndim > 4 {
        bail!("{}: bad dimension count {ndim}", path.display());
    }
    let dims: Vec<usize> = (0..ndim).map(|i| word(16 + 4 * i) as usize).collect();
    let elems: usize = dims.iter().product();
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;
    let f32_at = |i: usize| f32::from_le_bytes(body[i..i + 4].try_into().unwrap());
    let data = match dtype {
        0 => {
            if body.len() != elems * 4 {
                bail!("{}: expected {} bytes, found {}", path.display(), elems * 4, body.len());
            }
            ArrayData::Real((0..elems).map(|i| f32_at(i * 4)).collect())
        }
        1 => {
            if body.len() != elems * 8 {
                bail!("{}: expected {} bytes, found {}", path.display(), elems * 8, body.len());
            }
            ArrayData::Complex(
                (0..elems)
                    .map(|i| Complex32::new(f32_at(i * 8), f32_at(i * 8 + 4)))
                    .collect(),
            )
        }
        other => bail!("{}: unknown dtype code {other}", path.display()),
    };
    Ok(Array { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_dtypes() {
        let dir = std::env::temp_dir().join(format!("segv-fmt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let real = Array::real(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.25]);
        let p = dir.join("real.segv");
        write_array(&p, &real).unwrap();
        assert_eq!(read_array(&p).unwrap(), real);

        let complex = Array::complex(
            vec![4],
            (0..4).map(|i| Complex32::new(i as f32, -(i as f32) * 0.5)).collect(),
        );
        let p = dir.join("complex.segv");
        write_array(&p, &complex).unwrap();
        assert_eq!(read_array(&p).unwrap(), complex);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn header_is_exactly_32_bytes_and_checked() {
        let dir = std::env::temp_dir().join(format!("segv-fmt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.segv");
        write_array(&p, &Array::real(vec![1], vec![7.0])).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 32 + 4);
        assert_eq!(&bytes[0..4], b"SEGV");

        std::fs::write(&p, b"JUNKJUNKJUNK").unwrap();
        assert!(read_array(&p).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_mismatched_dims() {
        let dir = std::env::temp_dir().join(format!("segv-fmt3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bad = Array::real(vec![2, 2], vec![1.0]);
        assert!(write_array(&dir.join("bad.segv"), &bad).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
