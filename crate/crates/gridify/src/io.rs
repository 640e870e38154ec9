//! Point cloud files.
//!
//! * CSV: a header `D=<d>,F=<f>`, then one row per point with `d`
//!   coordinates followed by `f` features.
//! * `pcb`: magic `PCB1`, little-endian `u32` point count, dimension and
//!   feature count, then all coordinates and then all features as `f32`,
//!   row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use gridify_core::{EdgeSet, PointCloud};

use crate::error::{io_at, Error, Result};

pub const PCB_MAGIC: &[u8; 4] = b"PCB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Pcb,
}

impl Format {
    /// Picks the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(Format::Csv),
            Some("pcb") => Ok(Format::Pcb),
            _ => Err(Error::Format(format!(
                "{}: unknown point cloud format, expected a .csv or .pcb extension",
                path.display()
            ))),
        }
    }
}

pub fn read_cloud(path: &Path, format: Format) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    match format {
        Format::Csv => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{}: not UTF-8 text: {e}", path.display())))?;
            parse_csv(&text)
        }
        Format::Pcb => read_pcb(&mut bytes.as_slice()),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Csv => format_csv(cloud).into_bytes(),
        Format::Pcb => {
            let mut buf = Vec::new();
            write_pcb(cloud, &mut buf)?;
            buf
        }
    };
    fs::write(path, bytes).map_err(io_at(path))
}

/// Reads a cloud, choosing the format from the extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud(path, Format::from_path(path)?)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_cloud(cloud, path, Format::from_path(path)?)
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse {
        line: 1,
        msg: format!("expected header `D=<d>,F=<f>`, found `{line}`"),
    };
    let (d, f) = line.split_once(',').ok_or_else(bad)?;
    let value = |field: &str, key: &str| -> Result<usize> {
        let (k, v) = field.trim().split_once('=').ok_or_else(bad)?;
        if k.trim() != key {
            return Err(bad());
        }
        v.trim().parse().map_err(|_| bad())
    };
    Ok((value(d, "D")?, value(f, "F")?))
}

pub fn parse_csv(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let (dim, features) = match lines.next() {
        Some((_, header)) => parse_header(header.trim())?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let width = dim + features;
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!(
                    "expected {width} fields ({dim} coordinates, {features} features), found {}",
                    fields.len()
                ),
            });
        }
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("field {} is not a number: `{}`", col + 1, field.trim()),
            })?;
            if col < dim {
                coords.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    Ok(PointCloud::new(coords, feats, dim, features)?)
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_csv(cloud: &PointCloud) -> String {
    let mut out = format!("D={},F={}\n", cloud.dim(), cloud.features());
    for i in 0..cloud.len() {
        let row: Vec<String> = cloud.point(i).iter().chain(cloud.feature(i)).map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Values are narrowed to `f32`; anything outside the `f32` range is an
/// error rather than an infinity.
pub fn write_pcb<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    let header = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit the pcb header")))
    };
    w.write_all(PCB_MAGIC)?;
    for (v, what) in [(cloud.len(), "point count"), (cloud.dim(), "dimension"), (cloud.features(), "feature count")] {
        w.write_all(&header(v, what)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * (cloud.coords().len() + cloud.feats().len()));
    for &v in cloud.coords().iter().chain(cloud.feats()) {
        let x = v as f32;
        if v.is_finite() && !x.is_finite() {
            return Err(Error::Format(format!("value {v} overflows the pcb f32 range")));
        }
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pcb<R: Read>(r: &mut R) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != PCB_MAGIC {
        return Err(Error::Format("not a pcb file (missing PCB1 header)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, dim, features) = (word(0), word(1), word(2));
    let values = n
        .checked_mul(dim + features)
        .ok_or_else(|| Error::Format("pcb header sizes overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != 4 * values {
        return Err(Error::Format(format!(
            "pcb body has {} bytes, header promises {} ({n} points, D={dim}, F={features})",
            body.len(),
            4 * values
        )));
    }
    let floats: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let (coords, feats) = floats.split_at(n * dim);
    Ok(PointCloud::new(coords.to_vec(), feats.to_vec(), dim, features)?)
}

/// One `src,dst` row per edge, in edge-set order.
pub fn write_edges<W: Write>(edges: &EdgeSet, w: &mut W) -> Result<()> {
    for &(s, d) in edges.edges() {
        writeln!(w, "{s},{d}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_csv() {
        let c = parse_csv("D=3,F=1\n0,0,0,1\n1,0,0,2\n0,1,0,3\n").unwrap();
        assert_eq!((c.len(), c.dim(), c.features()), (3, 3, 1));
        assert_eq!(c.feats(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn short_row_names_its_line() {
        let err = parse_csv("D=3,F=1\n0,0,0,1\n1,0,2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_header_and_number() {
        assert!(matches!(parse_csv("3,1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_csv("D=1,F=0\nabc\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn truncated_pcb() {
        let c = PointCloud::new(vec![0.5, -0.25], vec![1.0], 2, 1).unwrap();
        let mut buf = Vec::new();
        write_pcb(&c, &mut buf).unwrap();
        buf.pop();
        assert!(read_pcb(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn f32_overflow_is_rejected() {
        let c = PointCloud::new(vec![1e300], vec![0.0], 1, 1).unwrap();
        assert!(write_pcb(&c, &mut Vec::new()).is_err());
    }
}
