//! Volume and slice file I/O.
//!
//! Volumes use a MetaImage-style pair: a small text header (`.mhd`) plus a
//! little-endian float32 raw file. Round-trips are bit-exact. 2D slices export
//! as 8- or 16-bit PGM (P5) or PNG with a JSON sidecar recording the intensity
//! window used for quantization.

use crate::error::{CoreError, Result};
use crate::volume::{FieldKind, Slice2D, VectorField3D, Volume3D};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

fn raw_path_for(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_header(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    channels: usize,
    raw_name: &str,
) -> Result<()> {
    let mut h = String::new();
    h.push_str("ObjectType = Image\n");
    h.push_str("NDims = 3\n");
    h.push_str(&format!("DimSize = {} {} {}\n", dims.0, dims.1, dims.2));
    h.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        spacing.0, spacing.1, spacing.2
    ));
    if channels > 1 {
        h.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    h.push_str("ElementType = MET_FLOAT\n");
    h.push_str("BinaryDataByteOrderMSB = False\n");
    h.push_str(&format!("ElementDataFile = {raw_name}\n"));
    fs::write(path, h)?;
    Ok(())
}

fn write_raw_f32(path: &Path, values: impl Iterator<Item = f32>, count: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(count * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Header {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    channels: usize,
    data_file: PathBuf,
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path)?;
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoreError::MalformedHeader(format!("line without '=' in {}: {line:?}", path.display()))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| CoreError::MalformedHeader(format!("missing key {k}")))
    };
    let ndims = get("NDims")?;
    if ndims != "3" {
        return Err(CoreError::UnsupportedFormat(format!("NDims = {ndims}, only 3 supported")));
    }
    let etype = get("ElementType")?;
    if etype != "MET_FLOAT" {
        return Err(CoreError::UnsupportedFormat(format!(
            "ElementType = {etype}, only MET_FLOAT supported"
        )));
    }
    if let Some(msb) = kv.get("BinaryDataByteOrderMSB") {
        if msb.eq_ignore_ascii_case("true") {
            return Err(CoreError::UnsupportedFormat(
                "big-endian raw data is not supported".into(),
            ));
        }
    }
    let parse3 = |s: &str, key: &str| -> Result<Vec<f64>> {
        let v: std::result::Result<Vec<f64>, _> =
            s.split_whitespace().map(str::parse::<f64>).collect();
        let v = v.map_err(|e| CoreError::MalformedHeader(format!("{key}: {e}")))?;
        if v.len() != 3 {
            return Err(CoreError::MalformedHeader(format!(
                "{key} must have 3 entries, got {}",
                v.len()
            )));
        }
        Ok(v)
    };
    let d = parse3(get("DimSize")?, "DimSize")?;
    if d.iter().any(|&x| x < 1.0 || x.fract() != 0.0) {
        return Err(CoreError::MalformedHeader("DimSize entries must be positive integers".into()));
    }
    let s = parse3(get("ElementSpacing")?, "ElementSpacing")?;
    if s.iter().any(|&x| x <= 0.0) {
        return Err(CoreError::MalformedHeader("ElementSpacing must be positive".into()));
    }
    let channels = match kv.get("ElementNumberOfChannels") {
        None => 1,
        Some(c) => c
            .parse::<usize>()
            .map_err(|e| CoreError::MalformedHeader(format!("ElementNumberOfChannels: {e}")))?,
    };
    let data_file = get("ElementDataFile")?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(Header {
        dims: (d[0] as usize, d[1] as usize, d[2] as usize),
        spacing: (s[0] as f32, s[1] as f32, s[2] as f32),
        channels,
        data_file: dir.join(data_file),
    })
}

fn read_raw_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(CoreError::TruncatedData {
            path: path.display().to_string(),
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = raw_path_for(path);
    let raw_name = raw
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CoreError::InvalidParam(format!("bad path {}", path.display())))?
        .to_string();
    write_header(path, vol.dims, vol.spacing, 1, &raw_name)?;
    write_raw_f32(&raw, vol.data.iter().copied(), vol.data.len())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let h = parse_header(path.as_ref())?;
    if h.channels != 1 {
        return Err(CoreError::UnsupportedFormat(format!(
            "expected scalar volume, header declares {} channels",
            h.channels
        )));
    }
    let n = h.dims.0 * h.dims.1 * h.dims.2;
    let data = read_raw_f32(&h.data_file, n)?;
    Volume3D::new(h.dims, h.spacing, data)
}

pub fn write_field(field: &VectorField3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = raw_path_for(path);
    let raw_name = raw
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CoreError::InvalidParam(format!("bad path {}", path.display())))?
        .to_string();
    write_header(path, field.dims, field.spacing, 3, &raw_name)?;
    write_raw_f32(
        &raw,
        field.data.iter().flat_map(|v| v.iter().copied()),
        field.data.len() * 3,
    )
}

pub fn read_field(path: impl AsRef<Path>, kind: FieldKind) -> Result<VectorField3D> {
    let h = parse_header(path.as_ref())?;
    if h.channels != 3 {
        return Err(CoreError::UnsupportedFormat(format!(
            "expected 3-channel field, header declares {} channels",
            h.channels
        )));
    }
    let n = h.dims.0 * h.dims.1 * h.dims.2;
    let flat = read_raw_f32(&h.data_file, n * 3)?;
    let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(VectorField3D {
        dims: h.dims,
        spacing: h.spacing,
        data,
        kind,
    })
}

/// Intensity window recorded next to every quantized slice export.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IntensityWindow {
    pub min: f32,
    pub max: f32,
    pub bits: u8,
}

fn quantize(s: &Slice2D, w: IntensityWindow) -> Vec<u16> {
    let levels = ((1u32 << w.bits) - 1) as f32;
    let span = (w.max - w.min).max(f32::MIN_POSITIVE);
    s.data
        .iter()
        .map(|&v| {
            let t = ((v - w.min) / span).clamp(0.0, 1.0);
            (t * levels).round() as u16
        })
        .collect()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".window.json");
    PathBuf::from(p)
}

fn write_sidecar(path: &Path, w: IntensityWindow) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&w)?)?;
    Ok(())
}

pub fn read_window_sidecar(image_path: impl AsRef<Path>) -> Result<IntensityWindow> {
    let text = fs::read_to_string(sidecar_path(image_path.as_ref()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write a slice as binary PGM (P5), 8 or 16 bit, plus a window sidecar.
pub fn write_slice_pgm(s: &Slice2D, path: impl AsRef<Path>, w: IntensityWindow) -> Result<()> {
    let path = path.as_ref();
    if w.bits != 8 && w.bits != 16 {
        return Err(CoreError::InvalidParam(format!("PGM bits must be 8 or 16, got {}", w.bits)));
    }
    let q = quantize(s, w);
    let maxval = (1u32 << w.bits) - 1;
    let mut out = Vec::new();
    out.extend_from_slice(format!("P5\n{} {}\n{}\n", s.dims.0, s.dims.1, maxval).as_bytes());
    if w.bits == 8 {
        out.extend(q.iter().map(|&v| v as u8));
    } else {
        for v in &q {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    fs::write(path, out)?;
    write_sidecar(path, w)
}

pub fn read_slice_pgm(path: impl AsRef<Path>) -> Result<(Slice2D, IntensityWindow)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut tokens = Vec::new();
    let mut pos = 0;
    // header: magic, width, height, maxval as whitespace-separated tokens
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(CoreError::MalformedHeader(format!("not a P5 PGM: {}", path.display())));
    }
    pos += 1; // single whitespace after maxval
    let nx: usize = tokens[1]
        .parse()
        .map_err(|e| CoreError::MalformedHeader(format!("PGM width: {e}")))?;
    let ny: usize = tokens[2]
        .parse()
        .map_err(|e| CoreError::MalformedHeader(format!("PGM height: {e}")))?;
    let maxval: u32 = tokens[3]
        .parse()
        .map_err(|e| CoreError::MalformedHeader(format!("PGM maxval: {e}")))?;
    let w = read_window_sidecar(path)?;
    let n = nx * ny;
    let levels = maxval as f32;
    let raw = &bytes[pos..];
    let vals: Vec<f32> = if maxval <= 255 {
        if raw.len() < n {
            return Err(CoreError::TruncatedData {
                path: path.display().to_string(),
                expected: n,
                found: raw.len(),
            });
        }
        raw[..n].iter().map(|&b| b as f32 / levels).collect()
    } else {
        if raw.len() < 2 * n {
            return Err(CoreError::TruncatedData {
                path: path.display().to_string(),
                expected: 2 * n,
                found: raw.len(),
            });
        }
        raw[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / levels)
            .collect()
    };
    let data = vals.iter().map(|t| w.min + t * (w.max - w.min)).collect();
    Ok((Slice2D::new((nx, ny), data)?, w))
}

/// Write a slice as grayscale PNG (8 or 16 bit) plus a window sidecar.
pub fn write_slice_png(s: &Slice2D, path: impl AsRef<Path>, w: IntensityWindow) -> Result<()> {
    let path = path.as_ref();
    let q = quantize(s, w);
    let (nx, ny) = (s.dims.0 as u32, s.dims.1 as u32);
    match w.bits {
        8 => {
            let buf: Vec<u8> = q.iter().map(|&v| v as u8).collect();
            let img = image::GrayImage::from_raw(nx, ny, buf)
                .ok_or_else(|| CoreError::InvalidParam("png buffer size".into()))?;
            img.save(path)
                .map_err(|e| CoreError::UnsupportedFormat(format!("png write: {e}")))?;
        }
        16 => {
            let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(nx, ny, q)
                .ok_or_else(|| CoreError::InvalidParam("png buffer size".into()))?;
            img.save(path)
                .map_err(|e| CoreError::UnsupportedFormat(format!("png write: {e}")))?;
        }
        b => return Err(CoreError::InvalidParam(format!("PNG bits must be 8 or 16, got {b}"))),
    }
    write_sidecar(path, w)
}

pub fn read_slice_png(path: impl AsRef<Path>) -> Result<(Slice2D, IntensityWindow)> {
    let path = path.as_ref();
    let w = read_window_sidecar(path)?;
    let img = image::open(path)
        .map_err(|e| CoreError::UnsupportedFormat(format!("png read: {e}")))?;
    let gray = img.into_luma16();
    let (nx, ny) = (gray.width() as usize, gray.height() as usize);
    let levels = if w.bits == 8 { 255.0 } else { 65535.0 };
    // image upsamples 8-bit to 16-bit by value * 257
    let data: Vec<f32> = gray
        .pixels()
        .map(|p| {
            let raw = if w.bits == 8 { (p.0[0] / 257) as f32 } else { p.0[0] as f32 };
            w.min + (raw / levels) * (w.max - w.min)
        })
        .collect();
    Ok((Slice2D::new((nx, ny), data)?, w))
}
