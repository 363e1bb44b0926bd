//! Cloud persistence.
//!
//! PLY layout is binary little-endian with one 16-byte record per vertex:
//! `float x, float y, float z, uchar red, uchar green, uchar blue, uchar label`.
//! Category, seed and part names ride along as header comments. The dataset
//! format is JSON lines, one [`PartLabeledCloud`] object per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::PartLabeledCloud;

pub const PLY_RECORD_BYTES: usize = 16;

/// Label palette used when no explicit colors are given.
pub fn label_color(label: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [166, 166, 166],
        [228, 26, 28],
        [55, 126, 184],
        [77, 175, 74],
        [152, 78, 163],
        [255, 127, 0],
        [255, 255, 51],
        [166, 86, 40],
    ];
    PALETTE[label % PALETTE.len()]
}

pub fn ply_header(cloud: &PartLabeledCloud) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("comment category {}\n", cloud.category));
    h.push_str(&format!("comment seed {}\n", cloud.seed));
    h.push_str(&format!("comment part_names {}\n", cloud.part_names.join(" ")));
    h.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in ["x", "y", "z"] {
        h.push_str(&format!("property float {p}\n"));
    }
    for p in ["red", "green", "blue", "label"] {
        h.push_str(&format!("property uchar {p}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn write_ply<W: Write>(mut w: W, cloud: &PartLabeledCloud, colors: Option<&[[u8; 3]]>) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::invalid(format!("{} colors for {} points", c.len(), cloud.len())));
        }
    }
    if let Some(name) = cloud.part_names.iter().find(|n| n.is_empty() || n.contains(char::is_whitespace)) {
        return Err(Error::invalid(format!("part name `{name}` cannot be stored in a PLY comment")));
    }
    if let Some(&l) = cloud.labels.iter().find(|&&l| l > u8::MAX as usize) {
        return Err(Error::invalid(format!("label {l} does not fit in a uchar")));
    }
    w.write_all(ply_header(cloud).as_bytes())?;
    let mut rec = [0u8; PLY_RECORD_BYTES];
    for (i, (p, &label)) in cloud.points.iter().zip(&cloud.labels).enumerate() {
        for k in 0..3 {
            rec[4 * k..4 * k + 4].copy_from_slice(&(p[k] as f32).to_le_bytes());
        }
        let rgb = colors.map_or_else(|| label_color(label), |c| c[i]);
        rec[12..15].copy_from_slice(&rgb);
        rec[15] = label as u8;
        w.write_all(&rec)?;
    }
    Ok(())
}

/// Parsed PLY contents; colors are kept alongside the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub cloud: PartLabeledCloud,
    pub colors: Vec<[u8; 3]>,
}

pub fn read_ply<R: Read>(r: R) -> Result<PlyCloud> {
    let mut r = BufReader::new(r);
    let mut offset: u64 = 0;
    let mut line = String::new();
    let next_line = |r: &mut BufReader<R>, offset: &mut u64, line: &mut String| -> Result<u64> {
        line.clear();
        let start = *offset;
        let n = r.read_line(line).map_err(|e| Error::parse(start, e.to_string()))?;
        if n == 0 {
            return Err(Error::parse(start, "unexpected end of header"));
        }
        *offset += n as u64;
        Ok(start)
    };

    let at = next_line(&mut r, &mut offset, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::parse(at, "missing `ply` magic"));
    }
    let at = next_line(&mut r, &mut offset, &mut line)?;
    if line.trim_end() != "format binary_little_endian 1.0" {
        return Err(Error::parse(at, format!("unsupported format line `{}`", line.trim_end())));
    }

    let expected_props = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
        ("uchar", "label"),
    ];
    let mut category = String::new();
    let mut seed = 0u64;
    let mut part_names: Vec<String> = Vec::new();
    let mut count: Option<usize> = None;
    let mut props = 0usize;
    loop {
        let at = next_line(&mut r, &mut offset, &mut line)?;
        let text = line.trim_end();
        let mut tok = text.split_whitespace();
        match tok.next() {
            Some("end_header") => break,
            Some("comment") => match tok.next() {
                Some("category") => category = tok.next().unwrap_or_default().to_string(),
                Some("seed") => {
                    seed = tok
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(at, "bad seed comment"))?
                }
                Some("part_names") => part_names = tok.map(str::to_string).collect(),
                _ => {}
            },
            Some("element") => {
                if tok.next() != Some("vertex") || count.is_some() {
                    return Err(Error::parse(at, format!("unexpected element line `{text}`")));
                }
                count = Some(
                    tok.next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(at, "bad vertex count"))?,
                );
            }
            Some("property") => {
                let ty = tok.next();
                let name = tok.next();
                match expected_props.get(props) {
                    Some(&(t, n)) if ty == Some(t) && name == Some(n) => props += 1,
                    _ => return Err(Error::parse(at, format!("unexpected property `{text}`"))),
                }
            }
            _ => return Err(Error::parse(at, format!("unrecognized header line `{text}`"))),
        }
    }
    let count = count.ok_or_else(|| Error::parse(offset, "header lacks `element vertex`"))?;
    if props != expected_props.len() {
        return Err(Error::parse(offset, "header lacks required vertex properties"));
    }

    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut rec = [0u8; PLY_RECORD_BYTES];
    for i in 0..count {
        r.read_exact(&mut rec).map_err(|_| {
            Error::parse(offset, format!("truncated vertex data: record {i} of {count}"))
        })?;
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(1), f(2)]);
        colors.push([rec[12], rec[13], rec[14]]);
        labels.push(rec[15] as usize);
        offset += PLY_RECORD_BYTES as u64;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::parse(offset, "trailing bytes after vertex data"));
    }
    if part_names.is_empty() {
        let max = labels.iter().copied().max().unwrap_or(0);
        part_names = (0..=max).map(|k| format!("part{k}")).collect();
    }
    let cloud = PartLabeledCloud {
        category,
        seed,
        points,
        labels,
        part_names,
    };
    cloud.validate().map_err(|e| Error::parse(offset, e.to_string()))?;
    Ok(PlyCloud { cloud, colors })
}

pub fn save_ply(path: &Path, cloud: &PartLabeledCloud, colors: Option<&[[u8; 3]]>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_ply(&mut w, cloud, colors)?;
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<PlyCloud> {
    read_ply(fs::File::open(path)?)
}

pub fn write_jsonl<W: Write>(w: W, clouds: &[PartLabeledCloud]) -> Result<()> {
    write_jsonl_records(w, clouds)
}

pub fn write_jsonl_records<T: serde::Serialize, W: Write>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: Read>(r: R) -> Result<Vec<PartLabeledCloud>> {
    read_jsonl_records(r)
}

/// Generic JSON-lines reader; errors carry the byte offset of the bad record.
pub fn read_jsonl_records<T: serde::de::DeserializeOwned, R: Read>(r: R) -> Result<Vec<T>> {
    let mut r = BufReader::new(r);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::parse(offset, e.to_string()))?;
        if n == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let rec: T = serde_json::from_str(&line).map_err(|e| {
                Error::parse(offset + e.column().saturating_sub(1) as u64, e.to_string())
            })?;
            out.push(rec);
        }
        offset += n as u64;
    }
    if out.is_empty() {
        return Err(Error::parse(0, "no records"));
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, clouds: &[PartLabeledCloud]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_jsonl(&mut w, clouds)?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<PartLabeledCloud>> {
    let clouds = read_jsonl(fs::File::open(path)?)?;
    for c in &clouds {
        c.validate()?;
    }
    Ok(clouds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_object, Category};

    #[test]
    fn ply_round_trip_within_f32() {
        let c = generate_object(Category::PotWithHandle, 5, 1024).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &c, None).unwrap();
        let back = read_ply(buf.as_slice()).unwrap().cloud;
        assert_eq!(back.labels, c.labels);
        assert_eq!(back.part_names, c.part_names);
        assert_eq!(back.category, c.category);
        assert_eq!(back.seed, c.seed);
        for (a, b) in c.points.iter().zip(&back.points) {
            for k in 0..3 {
                assert_eq!(b[k], a[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn ply_size_is_header_plus_fixed_records() {
        let c = generate_object(Category::BoxWithLid, 1, 1024).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &c, None).unwrap();
        assert_eq!(buf.len(), ply_header(&c).len() + 1024 * (12 + 3 + 1));
    }

    #[test]
    fn empty_and_truncated_inputs_fail_with_offsets() {
        assert!(matches!(read_ply(&b""[..]), Err(Error::Parse { offset: 0, .. })));
        let c = generate_object(Category::BoxWithLid, 1, 16).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &c, None).unwrap();
        buf.truncate(buf.len() - 5);
        let header = ply_header(&c).len() as u64;
        match read_ply(buf.as_slice()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, header + 15 * 16),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(read_jsonl(&b""[..]), Err(Error::Parse { .. })));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let clouds: Vec<_> = (0..3)
            .map(|s| generate_object(Category::BottleWithCap, s, 32).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &clouds).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), clouds);
    }

    #[test]
    fn jsonl_error_names_line_offset() {
        let c = generate_object(Category::BottleWithCap, 0, 8).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[c]).unwrap();
        let first = buf.len() as u64;
        buf.extend_from_slice(b"{\"category\": 3}\n");
        match read_jsonl(buf.as_slice()) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= first),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
