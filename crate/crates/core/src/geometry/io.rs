//! Point-cloud file formats: ASCII PLY, the compact `BPC1` binary layout,
//! and plain XYZ text.
//!
//! `BPC1` is `b"BPC1"`, a little-endian `u32` point count, then `count`
//! triples of little-endian `f32`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

const BPC_MAGIC: &[u8; 4] = b"BPC1";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Writes `element vertex` with `float` x/y/z properties. Coordinates are
/// rounded to `f32`, printed in shortest round-trip form.
pub fn write_ply<W: Write>(mut w: W, points: &[Point]) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    w.flush()
}

pub fn save_ply(path: &Path, points: &[Point]) -> Result<()> {
    let f = fs::File::create(path)?;
    write_ply(BufWriter::new(f), points)?;
    Ok(())
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, bool)>,
}

/// Reads the `vertex` element of an ASCII PLY file. Other elements are
/// skipped; extra vertex properties are ignored. `float` properties are
/// parsed at single precision.
pub fn read_ply<R: BufRead>(r: R, path: &Path) -> Result<PointCloud> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        match lines.next() {
            Some(l) => Ok(l?),
            None => Err(format_err(path, "unexpected end of file")),
        }
    };
    if next()?.trim() != "ply" {
        return Err(format_err(path, "missing ply magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = next()?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(format_err(path, "only ASCII PLY is supported"));
                }
            }
            Some("element") => {
                let name = tok.next().unwrap_or_default().to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| format_err(path, format!("bad element line: {line}")))?;
                elements.push(Element {
                    name,
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| format_err(path, "property before any element"))?;
                let words: Vec<&str> = tok.collect();
                let single = matches!(words.first(), Some(&"float") | Some(&"float32"));
                let name = words.last().copied().unwrap_or_default().to_string();
                el.props.push((name, single));
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let mut points = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                next()?;
            }
            continue;
        }
        let col = |axis: &str| {
            el.props
                .iter()
                .position(|(p, _)| p == axis)
                .ok_or_else(|| format_err(path, format!("vertex element lacks property {axis}")))
        };
        let cols = [col("x")?, col("y")?, col("z")?];
        points.reserve(el.count);
        for row in 0..el.count {
            let line = next()?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            let mut p = [0.0; 3];
            for (a, &c) in cols.iter().enumerate() {
                let parsed = vals.get(c).and_then(|v| {
                    if el.props[c].1 {
                        v.parse::<f32>().ok().map(f64::from)
                    } else {
                        v.parse::<f64>().ok()
                    }
                });
                p[a] = parsed.ok_or_else(|| format_err(path, format!("bad vertex row {row}")))?;
            }
            points.push(p);
        }
        break;
    }
    PointCloud::new(points)
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let f = fs::File::open(path)?;
    read_ply(BufReader::new(f), path)
}

pub fn write_bpc<W: Write>(mut w: W, points: &[Point]) -> std::io::Result<()> {
    w.write_all(BPC_MAGIC)?;
    w.write_all(&(points.len() as u32).to_le_bytes())?;
    for p in points {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_bpc<R: Read>(mut r: R, path: &Path) -> Result<PointCloud> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != BPC_MAGIC {
        return Err(format_err(path, "missing BPC1 header"));
    }
    let count = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    let body = &buf[8..];
    if body.len() != count * 12 {
        return Err(format_err(
            path,
            format!("expected {} payload bytes for {count} points, found {}", count * 12, body.len()),
        ));
    }
    let points = body
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    PointCloud::new(points)
}

pub fn save_bpc(path: &Path, points: &[Point]) -> Result<()> {
    let f = fs::File::create(path)?;
    write_bpc(BufWriter::new(f), points)?;
    Ok(())
}

pub fn load_bpc(path: &Path) -> Result<PointCloud> {
    read_bpc(fs::File::open(path)?, path)
}

pub fn save_xyz(path: &Path, points: &[Point]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(path, format!("bad number on line {}", i + 1)))?;
        if v.len() < 3 {
            return Err(format_err(path, format!("line {} has fewer than 3 values", i + 1)));
        }
        points.push([v[0], v[1], v[2]]);
    }
    PointCloud::new(points)
}

/// Dispatch on extension: `.ply`, `.bpc`, or `.xyz`.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => load_ply(path),
        Some("bpc") => load_bpc(path),
        Some("xyz") => load_xyz(path),
        _ => Err(format_err(path, "unknown point-cloud extension")),
    }
}

pub fn save_cloud(path: &Path, points: &[Point]) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => save_ply(path, points),
        Some("bpc") => save_bpc(path, points),
        Some("xyz") => save_xyz(path, points),
        _ => Err(format_err(path, "unknown point-cloud extension")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample() -> Vec<Point> {
        vec![[0.5, -0.25, 1.0], [-1.0, 0.125, 0.0], [0.1, 0.2, 0.3]]
    }

    #[test]
    fn ply_round_trip_is_f32_exact() {
        let mut buf = Vec::new();
        write_ply(&mut buf, &sample()).unwrap();
        let back = read_ply(Cursor::new(buf), Path::new("mem.ply")).unwrap();
        for (p, q) in sample().iter().zip(back.points()) {
            for a in 0..3 {
                assert_eq!(q[a], p[a] as f32 as f64);
            }
        }
    }

    #[test]
    fn ply_reader_skips_other_elements_and_props() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n";
        let c = read_ply(Cursor::new(text), Path::new("t.ply")).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn ply_rejects_binary() {
        let text = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(read_ply(Cursor::new(text), Path::new("b.ply")).is_err());
    }

    #[test]
    fn bpc_layout() {
        let mut buf = Vec::new();
        write_bpc(&mut buf, &[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(&buf[..4], b"BPC1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 20);
        let back = read_bpc(Cursor::new(buf.clone()), Path::new("x")).unwrap();
        assert_eq!(back.points(), &[[1.0, 2.0, 3.0]]);
        buf.pop();
        assert!(read_bpc(Cursor::new(buf), Path::new("x")).is_err());
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        save_cloud(&path, &sample()).unwrap();
        assert_eq!(load_cloud(&path).unwrap().points(), &sample()[..]);
    }
}
