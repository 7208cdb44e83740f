//! The `TNSR` binary tensor format and its named-record stream.
//!
//! A tensor record is the magic `TNSR`, a version byte (0), a dtype byte
//! (0 = f32, 1 = f64), a rank byte, `rank` little-endian u32 extents and the
//! little-endian values in row-major order. A named stream is a plain
//! concatenation of `u32 LE name length · UTF-8 name · tensor record`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype as u8, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_body<R: Read>(r: &mut R, header: [u8; 7]) -> Result<Tensor> {
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let dtype = DType::from_byte(header[5])?;
    let rank = header[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated extents".into()))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("truncated data for shape {shape:?}")))?;
    let data = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::from_vec(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut header = [0u8; 7];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    read_body(r, header)
}

pub fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor, dtype: DType) -> Result<()> {
    let len = u32::try_from(name.len()).map_err(|_| Error::Format("name too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t, dtype)
}

/// Reads named records until a clean end of stream.
pub fn read_named_all<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(r, &mut len)? {
            return Ok(out);
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let t = read_tensor(r)?;
        out.push((name, t));
    }
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn save_named<'a, I>(path: impl AsRef<Path>, records: I, dtype: DType) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    for (name, t) in records {
        write_named(&mut w, name, t, dtype)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_named(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_named_all(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(&buf[4..7], &[0, 1, 2]);
        assert_eq!(&buf[7..11], &2u32.to_le_bytes());
        assert_eq!(&buf[11..15], &1u32.to_le_bytes());
        assert_eq!(&buf[15..23], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 15 + 16);

        let mut buf32 = Vec::new();
        write_tensor(&mut buf32, &t, DType::F32).unwrap();
        assert_eq!(buf32[5], 0);
        assert_eq!(&buf32[15..19], &1.0f32.to_le_bytes());
        assert_eq!(read_tensor(&mut buf32.as_slice()).unwrap(), t);
    }

    #[test]
    fn named_stream_round_trip() {
        let a = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let b = Tensor::ones(&[1, 2, 2, 1]);
        let mut buf = Vec::new();
        write_named(&mut buf, "backbone/stem/w", &a, DType::F64).unwrap();
        write_named(&mut buf, "x", &b, DType::F64).unwrap();
        let back = read_named_all(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("backbone/stem/w".to_string(), a), ("x".to_string(), b)]);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::ones(&[4]), DType::F64).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[5] = 9;
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
