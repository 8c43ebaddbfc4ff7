//! Raster file I/O.
//!
//! A raster is stored as a text header `<name>.hdr`:
//!
//! ```text
//! width 3
//! height 2
//! spacing 1.5 1.5
//! dtype f32
//! data name.raw
//! ```
//!
//! followed by a raw row-major little-endian payload with no padding. The
//! `data` path is resolved relative to the header's directory. Label maps
//! use `dtype u8`. Binary PGM (P5) can be imported as an intensity image.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Grid, ImageGrid, LabelMap, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

struct Header {
    width: usize,
    height: usize,
    spacing: [f64; 2],
    dtype: Dtype,
    data: PathBuf,
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut width, mut height, mut spacing, mut dtype, mut data) = (None, None, None, None, None);
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let bad = |what: &str| Error::format(path, format!("bad {what} line: {line:?}"));
        match key {
            "width" => {
                width = Some(
                    rest.first()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| bad("width"))?,
                )
            }
            "height" => {
                height = Some(
                    rest.first()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| bad("height"))?,
                )
            }
            "spacing" => {
                let vals: Vec<f64> = rest.iter().filter_map(|v| v.parse().ok()).collect();
                if vals.len() != 2 || rest.len() != 2 {
                    return Err(bad("spacing"));
                }
                spacing = Some([vals[0], vals[1]]);
            }
            "dtype" => {
                dtype = Some(match rest.first().copied() {
                    Some("f32") => Dtype::F32,
                    Some("u8") => Dtype::U8,
                    _ => return Err(bad("dtype")),
                })
            }
            "data" => data = Some(rest.join(" ")),
            other => return Err(Error::format(path, format!("unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::format(path, format!("missing `{k}`"));
    let data = data
        .filter(|d| !d.is_empty())
        .ok_or_else(|| missing("data"))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(Header {
        width: width.ok_or_else(|| missing("width"))?,
        height: height.ok_or_else(|| missing("height"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        data: dir.join(data),
    })
}

fn payload_path(header_path: &Path) -> Result<(PathBuf, String)> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| {
            Error::InvalidArgument(format!("bad raster path {}", header_path.display()))
        })?;
    let name = format!("{stem}.raw");
    Ok((header_path.with_file_name(&name), name))
}

fn write_raster<T: Sample>(
    grid: &Grid<T>,
    path: &Path,
    dtype: Dtype,
    bytes: Vec<u8>,
) -> Result<()> {
    let (raw_path, raw_name) = payload_path(path)?;
    let header = format!(
        "width {}\nheight {}\nspacing {} {}\ndtype {}\ndata {}\n",
        grid.width(),
        grid.height(),
        grid.spacing()[0],
        grid.spacing()[1],
        dtype.name(),
        raw_name
    );
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))
}

fn read_payload(header: &Header) -> Result<Vec<u8>> {
    let bytes = fs::read(&header.data).map_err(|e| Error::io(&header.data, e))?;
    let expected = header.width * header.height;
    let size = header.dtype.size();
    if bytes.len() % size != 0 || bytes.len() / size != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() / size,
        });
    }
    Ok(bytes)
}

/// Writes an intensity image as `dtype f32`.
pub fn save_image(image: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let bytes = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raster(image, path.as_ref(), Dtype::F32, bytes)
}

/// Reads an intensity image; `u8` payloads are widened to f32.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    let bytes = read_payload(&header)?;
    let data: Vec<f32> = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    ImageGrid::new(header.width, header.height, header.spacing, data)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_raster(labels, path.as_ref(), Dtype::U8, labels.data().to_vec())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::format(path, "label maps must use dtype u8"));
    }
    let bytes = read_payload(&header)?;
    LabelMap::new(header.width, header.height, header.spacing, bytes)
}

/// Imports a binary (P5) PGM, 8- or 16-bit, with spacing (1, 1) mm.
pub fn import_pgm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|reason| match reason {
        PgmError::Unsupported(m) => Error::UnsupportedFormat(m),
        PgmError::Malformed(m) => Error::format(path, m),
        PgmError::Grid(e) => e,
    })
}

enum PgmError {
    Unsupported(String),
    Malformed(String),
    Grid(Error),
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<ImageGrid, PgmError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PgmError::Malformed("missing PGM magic".into()));
    }
    if bytes[1] != b'5' {
        return Err(PgmError::Unsupported(format!(
            "PGM variant P{} (only binary P5)",
            bytes[1] as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::Malformed("truncated header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Malformed("header value overflow".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Malformed(
            "expected whitespace after maxval".into(),
        ));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::Malformed(format!(
            "maxval {maxval} outside 1..=65535"
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w * h;
    let payload = &bytes[pos..];
    let data: Vec<f32> = if maxval < 256 {
        if payload.len() < n {
            return Err(PgmError::Malformed(format!(
                "payload holds {} of {n} samples",
                payload.len()
            )));
        }
        payload[..n].iter().map(|&b| b as f32).collect()
    } else {
        if payload.len() < 2 * n {
            return Err(PgmError::Malformed(format!(
                "payload holds {} of {n} samples",
                payload.len() / 2
            )));
        }
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    };
    ImageGrid::new(w, h, [1.0, 1.0], data).map_err(PgmError::Grid)
}
