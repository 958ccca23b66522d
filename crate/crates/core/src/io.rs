//! File formats: binary PGM input, CSV grids, the `LGRD1` binary grid
//! container and `key=value` sidecars.
//!
//! `LGRD1` is an ASCII header line `LGRD1 <width> <height> <channels>\n`
//! followed by `width * height * channels` little-endian `f64` values, rows
//! top to bottom, channels interleaved per pixel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, Domain, GridGeometry, VectorFieldGrid};
use crate::potential::{BasisLayer, PotentialField};

const LGRD_MAGIC: &str = "LGRD1";

/// Multi-channel grid as stored in an `LGRD1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<f64>,
}

impl RawGrid {
    pub fn from_planes(width: usize, height: usize, planes: &[&[f64]]) -> Result<RawGrid> {
        let n = width * height;
        if planes.is_empty() || planes.iter().any(|p| p.len() != n) {
            return Err(Error::invalid("every channel must hold width*height values"));
        }
        let mut data = Vec::with_capacity(n * planes.len());
        for i in 0..n {
            data.extend(planes.iter().map(|p| p[i]));
        }
        Ok(RawGrid {
            width,
            height,
            channels: planes.len(),
            data,
        })
    }

    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{LGRD_MAGIC} {} {} {}\n",
            self.width, self.height, self.channels
        );
        let mut out = Vec::with_capacity(header.len() + 8 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RawGrid> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Format("LGRD1 header line missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("LGRD1 header is not ASCII".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(LGRD_MAGIC) {
            return Err(Error::Format("not an LGRD1 file".into()));
        }
        let mut dim = || -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad LGRD1 header `{header}`")))
        };
        let (width, height, channels) = (dim()?, dim()?, dim()?);
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Format("LGRD1 dimensions must be positive".into()));
        }
        let n = width * height * channels;
        let body = &bytes[nl + 1..];
        if body.len() != 8 * n {
            return Err(Error::Format(format!(
                "LGRD1 body has {} bytes, expected {}",
                body.len(),
                8 * n
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(RawGrid {
            width,
            height,
            channels,
            data,
        })
    }
}

pub fn density_to_lgrd(grid: &DensityGrid) -> RawGrid {
    RawGrid {
        width: grid.width(),
        height: grid.height(),
        channels: 1,
        data: grid.values().to_vec(),
    }
}

pub fn field_to_lgrd(field: &VectorFieldGrid) -> RawGrid {
    let (w, h) = field.dims();
    RawGrid::from_planes(w, h, &[&field.u, &field.v]).expect("field planes match geometry")
}

pub fn density_from_lgrd(raw: &RawGrid) -> Result<DensityGrid> {
    if raw.channels != 1 {
        return Err(Error::Format(format!(
            "expected a single-channel grid, found {} channels",
            raw.channels
        )));
    }
    DensityGrid::new(raw.width, raw.height, raw.data.clone())
}

pub fn field_from_lgrd(raw: &RawGrid, geometry: GridGeometry) -> Result<VectorFieldGrid> {
    if raw.channels != 2 || (raw.width, raw.height) != geometry.dims() {
        return Err(Error::Format("expected a 2-channel grid matching the geometry".into()));
    }
    VectorFieldGrid::new(geometry, raw.plane(0), raw.plane(1))
}

/// A potential as one coefficient channel per layer plus a `key=value`
/// sidecar holding the layer widths and the domain.
pub fn potential_to_lgrd(p: &PotentialField) -> (RawGrid, String) {
    let (w, h) = p.geometry().dims();
    let planes: Vec<&[f64]> = p.layers().iter().map(|l| l.coeffs.as_slice()).collect();
    let raw = RawGrid::from_planes(w, h, &planes).expect("layers match geometry");
    let d = p.geometry().domain;
    let sigmas: Vec<String> = p.layers().iter().map(|l| l.sigma.to_string()).collect();
    let meta = format_key_values([
        ("sigmas", sigmas.join(",")),
        ("domain", format!("{},{},{},{}", d.x0, d.y0, d.x1, d.y1)),
    ]);
    (raw, meta)
}

pub fn potential_from_lgrd(raw: &RawGrid, meta: &str) -> Result<PotentialField> {
    let kv = parse_key_values(meta)?;
    let floats = |key: &str| -> Result<Vec<f64>> {
        kv.get(key)
            .ok_or_else(|| Error::Format(format!("potential sidecar lacks `{key}`")))?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{s}` in `{key}`")))
            })
            .collect()
    };
    let sigmas = floats("sigmas")?;
    let d = floats("domain")?;
    if d.len() != 4 || sigmas.len() != raw.channels {
        return Err(Error::Format("potential sidecar does not match the grid".into()));
    }
    let geometry =
        GridGeometry::with_domain(raw.width, raw.height, Domain::new(d[0], d[1], d[2], d[3])?)?;
    let layers = sigmas
        .iter()
        .enumerate()
        .map(|(c, s)| BasisLayer {
            sigma: *s,
            coeffs: raw.plane(c),
        })
        .collect();
    PotentialField::from_layers(geometry, layers)
}

/// Parses a binary (P5) PGM with 8- or 16-bit samples. Values are returned
/// as raw intensities.
pub fn parse_pgm(bytes: &[u8]) -> Result<DensityGrid> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("only binary PGM (P5) is supported".into()));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
    };
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes
        .get(pos + 1..)
        .ok_or_else(|| Error::Format("PGM raster missing".into()))?;
    let n = width * height;
    let values: Vec<f64> = if maxval < 256 {
        if data.len() < n {
            return Err(Error::Format("PGM raster truncated".into()));
        }
        data[..n].iter().map(|b| *b as f64).collect()
    } else {
        if data.len() < 2 * n {
            return Err(Error::Format("PGM raster truncated".into()));
        }
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    DensityGrid::new(width, height, values)
}

/// Parses a CSV grid: one line per row, comma-separated decimals.
pub fn parse_csv_grid(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: bad number `{}`", lineno + 1, s.trim()))
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format(format!(
                    "line {}: expected {w} columns, found {}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Format("empty CSV grid".into()))?;
    Ok((width, height, values))
}

pub fn grid_to_csv(width: usize, values: &[f64]) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// Reads a density from `.pgm`, `.csv` or `.lgrd` (by extension).
pub fn read_density(path: &Path) -> Result<DensityGrid> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let bytes = fs::read(path)?;
    match ext.as_str() {
        "pgm" => parse_pgm(&bytes),
        "csv" => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Format("CSV grid is not UTF-8".into()))?;
            let (w, h, v) = parse_csv_grid(&text)?;
            DensityGrid::new(w, h, v)
        }
        "lgrd" => density_from_lgrd(&RawGrid::from_bytes(&bytes)?),
        other => Err(Error::Format(format!(
            "unsupported density format `.{other}` (expected pgm, csv or lgrd)"
        ))),
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("line {}: expected key=value", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn format_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        writeln!(out, "{k}={v}").expect("writing to a String");
    }
    out
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
