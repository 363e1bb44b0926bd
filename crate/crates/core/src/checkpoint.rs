//! Versioned binary checkpoints.
//!
//! ```text
//! magic    8 bytes   b"PFCKPT\0\0"
//! kind     4 bytes   e.g. b"FELD" or b"PLCY"
//! version  u32 LE
//! n_dims   u32 LE
//! dims     n_dims × u64 LE
//! n_params u64 LE
//! params   n_params × f64 LE
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: [u8; 4],
    pub dims: Vec<u64>,
    pub params: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&ckpt.kind)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.dims.len() as u32).to_le_bytes())?;
    for d in &ckpt.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&(ckpt.params.len() as u64).to_le_bytes())?;
    for p in &ckpt.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R, offset: &mut u64, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint: missing {what} at byte {offset}")))?;
    *offset += N as u64;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R, kind: &[u8; 4]) -> Result<Checkpoint> {
    let mut off = 0u64;
    let magic: [u8; 8] = read_array(&mut r, &mut off, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let got_kind: [u8; 4] = read_array(&mut r, &mut off, "kind")?;
    if &got_kind != kind {
        return Err(Error::Format(format!(
            "expected a `{}` checkpoint, found `{}`",
            String::from_utf8_lossy(kind),
            String::from_utf8_lossy(&got_kind)
        )));
    }
    let version = u32::from_le_bytes(read_array(&mut r, &mut off, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("version {version}, this build reads version {VERSION}")));
    }
    let n_dims = u32::from_le_bytes(read_array(&mut r, &mut off, "dims count")?) as usize;
    if n_dims > 64 {
        return Err(Error::Format(format!("implausible dims count {n_dims}")));
    }
    let dims = (0..n_dims)
        .map(|_| read_array(&mut r, &mut off, "dims").map(u64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let n_params = u64::from_le_bytes(read_array(&mut r, &mut off, "parameter count")?);
    if n_params > (1 << 32) {
        return Err(Error::Format(format!("implausible parameter count {n_params}")));
    }
    let params = (0..n_params)
        .map(|_| read_array(&mut r, &mut off, "parameters").map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format(format!("trailing bytes after byte {off}")));
    }
    Ok(Checkpoint {
        kind: got_kind,
        dims,
        params,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, kind: &[u8; 4]) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(fs::File::open(path)?), kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: *b"TEST",
            dims: vec![3, 4],
            params: vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300],
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 4 + 2 * 8 + 8 + 4 * 8);
        assert_eq!(read_checkpoint(buf.as_slice(), b"TEST").unwrap(), sample());
    }

    #[test]
    fn corruption_is_a_format_error() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let mut bad_version = buf.clone();
        bad_version[12] = 9;
        assert!(matches!(read_checkpoint(bad_version.as_slice(), b"TEST"), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3], b"TEST"), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(buf.as_slice(), b"PLCY"), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&b"garbage"[..], b"TEST"), Err(Error::Format(_))));
    }
}
