//! Raw binary formats: `A2PC` point clouds and `A2PE` positional-embedding
//! tables. Both are little-endian with float32 payloads.
//!
//! ```text
//! A2PC:  "A2PC" | u32 n | n * (f32 x, f32 y, f32 z) | [u16 label]
//! A2PE:  "A2PE" | u8 mode | u32 dims... | f32 payload (row-major)
//!        mode 1 (line):  u32 length, u32 dim
//!        mode 2 (grid):  u32 rows, u32 cols, u32 dim
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::projection::{PeLayout, PeTable};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CLOUD_MAGIC: &[u8; 4] = b"A2PC";
pub const PE_MAGIC: &[u8; 4] = b"A2PE";

pub fn encode_cloud<T: Scalar>(cloud: &PointCloud<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12 + 2);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&c.as_f32().to_le_bytes());
        }
    }
    if let Some(label) = cloud.label() {
        out.extend_from_slice(&label.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn fail(&self, detail: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail,
        }
    }
}

pub fn decode_cloud<T: Scalar>(bytes: &[u8], path: &Path) -> Result<PointCloud<T>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != CLOUD_MAGIC {
        return Err(r.fail("missing A2PC magic".into()));
    }
    let n = r.u32()? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y, z) = (r.f32()?, r.f32()?, r.f32()?);
        points.push([T::of(x as f64), T::of(y as f64), T::of(z as f64)]);
    }
    let label = match r.remaining() {
        0 => None,
        2 => Some(u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"))),
        extra => return Err(r.fail(format!("{extra} unexpected trailing bytes"))),
    };
    PointCloud::new(points, label)
}

pub fn write_cloud<T: Scalar>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_cloud<T: Scalar>(path: &Path) -> Result<PointCloud<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cloud(&bytes, path)
}

pub fn encode_pe_table<T: Scalar>(table: &PeTable<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PE_MAGIC);
    match table.layout() {
        PeLayout::Line { length } => {
            out.push(1);
            out.extend_from_slice(&(length as u32).to_le_bytes());
        }
        PeLayout::Grid { rows, cols } => {
            out.push(2);
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for v in table.entries().data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    out
}

pub fn decode_pe_table<T: Scalar>(bytes: &[u8], path: &Path) -> Result<PeTable<T>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != PE_MAGIC {
        return Err(r.fail("missing A2PE magic".into()));
    }
    let layout = match r.take(1)?[0] {
        1 => PeLayout::Line {
            length: r.u32()? as usize,
        },
        2 => PeLayout::Grid {
            rows: r.u32()? as usize,
            cols: r.u32()? as usize,
        },
        m => return Err(r.fail(format!("unknown PE mode byte {m}"))),
    };
    let dim = r.u32()? as usize;
    let n = layout.entries() * dim;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::of(r.f32()? as f64));
    }
    if r.remaining() != 0 {
        return Err(r.fail(format!("{} unexpected trailing bytes", r.remaining())));
    }
    PeTable::new(layout, Matrix::from_vec(layout.entries(), dim, data)?)
}

pub fn write_pe_table<T: Scalar>(path: &Path, table: &PeTable<T>) -> Result<()> {
    fs::write(path, encode_pe_table(table)).map_err(|e| Error::io(path, e))
}

pub fn read_pe_table<T: Scalar>(path: &Path) -> Result<PeTable<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pe_table(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cloud_layout_is_bit_exact() {
        let c = PointCloud::new(vec![[1.0f32, -2.0, 0.5]], Some(3)).unwrap();
        let bytes = encode_cloud(&c);
        let mut expect = b"A2PC".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.0f32, -2.0, 0.5] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&3u16.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let c = PointCloud::new(vec![[1.0f32, 2.0, 3.0]; 4], None).unwrap();
        let bytes = encode_cloud(&c);
        let p = Path::new("mem");
        assert!(decode_cloud::<f32>(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_cloud::<f32>(&bad, p).is_err());
    }

    proptest! {
        #[test]
        fn cloud_round_trip(pts in prop::collection::vec(prop::array::uniform3(-10.0f32..10.0), 1..40),
                            label in prop::option::of(any::<u16>())) {
            let c = PointCloud::new(pts, label).unwrap();
            let back: PointCloud<f32> = decode_cloud(&encode_cloud(&c), Path::new("mem")).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn pe_table_round_trip() {
        let layout = PeLayout::Grid { rows: 2, cols: 3 };
        let m = Matrix::from_vec(6, 4, (0..24).map(|i| i as f32 * 0.25).collect()).unwrap();
        let t = PeTable::new(layout, m).unwrap();
        let back: PeTable<f32> = decode_pe_table(&encode_pe_table(&t), Path::new("mem")).unwrap();
        assert_eq!(back.layout(), layout);
        assert_eq!(back.entries(), t.entries());
    }
}
