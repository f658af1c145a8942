//! Point file formats.
//!
//! Text: one point per line, whitespace-separated `x y z [c1 c2 ...]`, `#`
//! starts a comment. Binary: magic `PCB1`, little-endian `u32` point count,
//! `u32` extra-channel count, then `count × (3 + channels)` little-endian
//! `f32` values.

use std::path::Path;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"PCB1";

/// Raw point rows before bounds are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRows {
    pub positions: Vec<[f64; 3]>,
    pub extras: Vec<f64>,
    pub channels: usize,
}

pub fn parse_text(src: &str) -> Result<PointRows> {
    let mut rows = PointRows {
        positions: Vec::new(),
        extras: Vec::new(),
        channels: 0,
    };
    let mut width: Option<usize> = None;
    for (lineno, line) in src.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: `{t}` is not a number", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if values.len() < 3 {
            return Err(Error::Parse(format!("line {}: need at least x y z", lineno + 1)));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse(format!(
                    "line {}: {} columns, earlier rows have {w}",
                    lineno + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("line {}: non-finite value", lineno + 1)));
        }
        rows.positions.push([values[0], values[1], values[2]]);
        rows.extras.extend_from_slice(&values[3..]);
    }
    rows.channels = width.map_or(0, |w| w - 3);
    Ok(rows)
}

pub fn parse_binary(bytes: &[u8]) -> Result<PointRows> {
    if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Parse("missing PCB1 header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = 3 + channels;
    let body = &bytes[12..];
    if body.len() != count * width * 4 {
        return Err(Error::Parse(format!(
            "PCB1 body has {} bytes, header implies {}",
            body.len(),
            count * width * 4
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("non-finite value in PCB1 body".into()));
    }
    let mut rows = PointRows {
        positions: Vec::with_capacity(count),
        extras: Vec::with_capacity(count * channels),
        channels,
    };
    for row in values.chunks_exact(width) {
        rows.positions.push([row[0], row[1], row[2]]);
        rows.extras.extend_from_slice(&row[3..]);
    }
    Ok(rows)
}

pub fn write_binary(rows: &PointRows) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + rows.positions.len() * (3 + rows.channels) * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(rows.positions.len() as u32).to_le_bytes());
    out.extend_from_slice(&(rows.channels as u32).to_le_bytes());
    for (i, p) in rows.positions.iter().enumerate() {
        let extra = &rows.extras[i * rows.channels..(i + 1) * rows.channels];
        for v in p.iter().chain(extra) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_text(rows: &PointRows) -> String {
    let mut out = String::new();
    for (i, p) in rows.positions.iter().enumerate() {
        let extra = &rows.extras[i * rows.channels..(i + 1) * rows.channels];
        let line: Vec<String> = p.iter().chain(extra).map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Reads either format, detected by the binary magic.
pub fn read_point_file(path: &Path) -> Result<PointRows> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse(format!("{} is neither PCB1 nor UTF-8 text", path.display())))?;
        parse_text(&text)
    }
}
