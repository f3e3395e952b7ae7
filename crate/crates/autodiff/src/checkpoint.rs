//! Flat binary tensor records.
//!
//! Layout: the magic `JNCKPT1\n`, then records of
//! `name_len: u32 LE | name: UTF-8 | rank: u32 LE | dims: u32 LE * rank | payload: f64 LE * numel`.

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"JNCKPT1\n";

pub fn write_records<'a, W, I>(mut w: W, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    w.write_all(MAGIC)?;
    for (name, tensor) in records {
        let name_bytes = name.as_bytes();
        w.write_all(&to_u32(name_bytes.len())?.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&to_u32(tensor.rank())?.to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&to_u32(d)?.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while cursor.pos < bytes.len() {
        let name_len = cursor.u32()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|e| AutodiffError::Checkpoint(format!("record name: {e}")))?
            .to_owned();
        let rank = cursor.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cursor.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = cursor.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| AutodiffError::Checkpoint(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(AutodiffError::Checkpoint("truncated record".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, [("w", &t)]).unwrap();
        let mut expected = b"JNCKPT1\n".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn scalar_record_has_rank_zero() {
        let t = Tensor::scalar(3.0);
        let mut buf = Vec::new();
        write_records(&mut buf, [("s", &t)]).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back[0].1.shape(), &[] as &[usize]);
        assert_eq!(back[0].1.item(), 3.0);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        assert!(read_records(&b"NOTMAGIC"[..]).is_err());
        let t = Tensor::zeros(vec![3]);
        let mut buf = Vec::new();
        write_records(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_records(buf.as_slice()).is_err());
    }
}
