//! On-disk formats: `.tns` tensors, ASCII PLY clouds, strict JSON documents,
//! JSON-lines and CSV.
//!
//! Readers only accept what the writers in this module produce. Decoders
//! check declared sizes against the bytes actually present before
//! allocating.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensorkit::{Element, Tensor};

pub const TNS_MAGIC: &[u8; 4] = b"FSAT";
pub const TNS_VERSION: u32 = 1;
const TNS_MAX_RANK: u32 = 4;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format("text", format!("{} is not UTF-8", path.display())))
}

// ---------------------------------------------------------------------------
// .tns
// ---------------------------------------------------------------------------

/// Serializes a tensor as `.tns`; values are stored as little-endian `f32`.
pub fn encode_tensor<S: Element>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TNS_MAGIC);
    out.extend_from_slice(&TNS_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::format("tns", format!("truncated while reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(buf, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != TNS_MAGIC {
        return Err(Error::format("tns", "bad magic"));
    }
    let version = take_u32(&mut buf, "version")?;
    if version != TNS_VERSION {
        return Err(Error::format("tns", format!("unsupported version {version}")));
    }
    let rank = take_u32(&mut buf, "rank")?;
    if rank == 0 || rank > TNS_MAX_RANK {
        return Err(Error::format("tns", format!("rank {rank} out of range 1..=4")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = take_u32(&mut buf, "extent")? as usize;
        if d == 0 {
            return Err(Error::format("tns", "zero extent"));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format("tns", "extent product overflows"))?;
        dims.push(d);
    }
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::format("tns", "payload size overflows"))?;
    if buf.len() != payload {
        return Err(Error::format(
            "tns",
            format!("payload is {} bytes, header declares {payload}", buf.len()),
        ));
    }
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::format("tns", e.to_string()))
}

pub fn write_tensor<S: Element>(path: &Path, t: &Tensor<S>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode_tensor(&read_bytes(path)?).map_err(|e| match e {
        Error::Format { format, message } => Error::Format {
            format,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

// ---------------------------------------------------------------------------
// ASCII PLY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

pub fn encode_ply(cloud: &PlyCloud) -> Result<String> {
    if let Some(n) = &cloud.normals {
        if n.len() != cloud.points.len() {
            return Err(Error::shape("normals and points differ in length"));
        }
    }
    let all = cloud
        .points
        .iter()
        .chain(cloud.normals.iter().flatten())
        .flatten();
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ply vertex"));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.points.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {p}");
    }
    if cloud.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            let _ = writeln!(s, "property double {p}");
        }
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(n) = &cloud.normals {
            let n = n[i];
            let _ = write!(s, " {} {} {}", n[0], n[1], n[2]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn decode_ply(text: &str) -> Result<PlyCloud> {
    let bad = |m: String| Error::format("ply", m);
    let mut lines = text.split('\n');
    for want in ["ply", "format ascii 1.0"] {
        match lines.next() {
            Some(l) if l == want => {}
            other => return Err(bad(format!("expected {want:?}, found {other:?}"))),
        }
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing or malformed vertex count".into()))?;
    let mut props = Vec::new();
    let mut header_done = false;
    for line in lines.by_ref() {
        if line == "end_header" {
            header_done = true;
            break;
        }
        let p = line
            .strip_prefix("property double ")
            .ok_or_else(|| bad(format!("unexpected header line {line:?}")))?;
        props.push(p);
    }
    if !header_done {
        return Err(bad("missing end_header".into()));
    }
    let with_normals = match props[..] {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "nx", "ny", "nz"] => true,
        _ => return Err(bad(format!("unsupported property list {props:?}"))),
    };
    let width = if with_normals { 6 } else { 3 };
    let body: Vec<&str> = lines.collect();
    // the writer terminates every vertex line with '\n', leaving one empty tail
    if body.last() != Some(&"") || body.len() != count + 1 {
        return Err(bad(format!(
            "declared {count} vertices, found {} lines",
            body.len().saturating_sub(1)
        )));
    }
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(if with_normals { count } else { 0 });
    for (i, line) in body[..count].iter().enumerate() {
        let vals: Vec<f64> = line
            .split(' ')
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("vertex {i}: unparsable number")))?;
        if vals.len() != width {
            return Err(bad(format!("vertex {i}: expected {width} values")));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("vertex {i}: non-finite value")));
        }
        points.push([vals[0], vals[1], vals[2]]);
        if with_normals {
            normals.push([vals[3], vals[4], vals[5]]);
        }
    }
    Ok(PlyCloud {
        points,
        normals: with_normals.then_some(normals),
    })
}

pub fn write_ply(path: &Path, cloud: &PlyCloud) -> Result<()> {
    write_atomic(path, encode_ply(cloud)?.as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    decode_ply(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => {
                let _ = write!(out, "{index}");
            }
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses a JSON document, reporting schema violations with a JSON pointer.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?).map_err(|e| match e {
        Error::Schema { pointer, message } => Error::Schema {
            pointer,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

/// One compact JSON document per line.
pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).map_err(|e| Error::format("json", e.to_string()))?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_json_lines(&read_text(path)?)
}

pub fn parse_json_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            parse_json(line).map_err(|e| match e {
                Error::Schema { pointer, message } => Error::Schema {
                    pointer,
                    message: format!("line {}: {message}", i + 1),
                },
                other => other,
            })
        })
        .collect()
}

/// Writes a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}
