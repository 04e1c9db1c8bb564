//! DAPG raw grids.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DAPG"
//! 4       1     dtype: 0 = u8, 1 = f32, 2 = f64
//! 5       1     ndim (1..=4)
//! 6       2     reserved, zero
//! 8       8     dims[4] as u16; unused trailing dims are 0
//! 16      ...   row-major element data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AppError, AppResult};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"DAPG";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::U8),
            1 => Some(Self::F32),
            2 => Some(Self::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl GridData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::U8(_) => DType::U8,
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::U8(v) => v.len(),
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: Vec<usize>,
    pub data: GridData,
}

impl Grid {
    pub fn new(dims: Vec<usize>, data: GridData) -> AppResult<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(AppError::Format(format!("grid must have 1 to 4 dims, got {}", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u16::MAX as usize) {
            return Err(AppError::Format(format!("grid dimension {d} exceeds u16")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(AppError::Format(format!(
                "grid dims {dims:?} hold {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * self.data.dtype().size());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut header = [0u8; HEADER_LEN];
        header[..4].copy_from_slice(MAGIC);
        header[4] = self.data.dtype() as u8;
        header[5] = self.dims.len() as u8;
        for (i, &d) in self.dims.iter().enumerate() {
            header[8 + 2 * i..10 + 2 * i].copy_from_slice(&(d as u16).to_le_bytes());
        }
        w.write_all(&header)?;
        match &self.data {
            GridData::U8(v) => w.write_all(v)?,
            GridData::F32(v) => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                w.write_all(&bytes)?;
            }
            GridData::F64(v) => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                w.write_all(&bytes)?;
            }
        }
        Ok(())
    }

    /// Reads one grid from the stream, leaving any following bytes unread.
    pub fn read_from<R: Read>(r: &mut R) -> AppResult<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| AppError::Format(format!("truncated grid header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(AppError::Format("bad grid magic".into()));
        }
        let dtype = DType::from_code(header[4])
            .ok_or_else(|| AppError::Format(format!("unknown grid dtype {}", header[4])))?;
        let ndim = header[5] as usize;
        if ndim == 0 || ndim > 4 {
            return Err(AppError::Format(format!("bad grid ndim {ndim}")));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| u16::from_le_bytes([header[8 + 2 * i], header[9 + 2 * i]]) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)
            .map_err(|e| AppError::Format(format!("truncated grid body: {e}")))?;
        let data = match dtype {
            DType::U8 => GridData::U8(raw),
            DType::F32 => GridData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => GridData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn decode(mut bytes: &[u8]) -> AppResult<Self> {
        let g = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(AppError::Format(format!("{} trailing bytes after grid", bytes.len())));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        fsutil::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.at(path))
    }

    pub fn into_u8(self) -> AppResult<(Vec<usize>, Vec<u8>)> {
        match self.data {
            GridData::U8(v) => Ok((self.dims, v)),
            other => Err(AppError::Format(format!("expected u8 grid, got {:?}", other.dtype()))),
        }
    }

    pub fn into_f32(self) -> AppResult<(Vec<usize>, Vec<f32>)> {
        match self.data {
            GridData::F32(v) => Ok((self.dims, v)),
            other => Err(AppError::Format(format!("expected f32 grid, got {:?}", other.dtype()))),
        }
    }

    pub fn into_f64(self) -> AppResult<(Vec<usize>, Vec<f64>)> {
        match self.data {
            GridData::F64(v) => Ok((self.dims, v)),
            other => Err(AppError::Format(format!("expected f64 grid, got {:?}", other.dtype()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let g = Grid::new(vec![2, 3], GridData::U8(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let b = g.encode();
        assert_eq!(&b[..16], b"DAPG\x00\x02\x00\x00\x02\x00\x03\x00\x00\x00\x00\x00");
        assert_eq!(&b[16..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn f32_little_endian() {
        let g = Grid::new(vec![1], GridData::F32(vec![1.0])).unwrap();
        assert_eq!(&g.encode()[16..], &[0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Grid::new(vec![2, 2], GridData::U8(vec![0; 3])).is_err());
        assert!(Grid::new(vec![], GridData::U8(vec![])).is_err());
        assert!(Grid::new(vec![70000], GridData::U8(vec![0; 70000])).is_err());
        let mut b = Grid::new(vec![2], GridData::F64(vec![0.5, 1.5])).unwrap().encode();
        assert!(Grid::decode(&b[..20]).is_err());
        b[0] = b'X';
        assert!(Grid::decode(&b).is_err());
    }
}
