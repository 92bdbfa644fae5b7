//! Binary snapshots: a TOML header, a `---` line, then little-endian `f64`
//! payload.
//!
//! Field snapshots store `(re, im)` pairs component-major, wave vectors in
//! lexicographic order. Sampled volumes store, per grid point in
//! `(i₁, i₂, i₃)` lexicographic order, the three components as `(re, im)`.

use crate::bloch::SampledVolume;
use crate::error::{Error, Result};
use crate::field::{FieldKind, SpectralField};
use crate::C64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const SEPARATOR: &[u8] = b"\n---\n";

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    format: String,
    truncation: usize,
    kind: String,
    period_scale: f64,
    components: usize,
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    format: String,
    half_width: f64,
    spacing: f64,
    side: usize,
    components: usize,
}

fn split(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let pos = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::Format("missing header separator".into()))?;
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, &bytes[pos + SEPARATOR.len()..]))
}

fn encode(header: String, values: impl Iterator<Item = C64>) -> Vec<u8> {
    let mut out = header.into_bytes();
    while out.last() == Some(&b'\n') {
        out.pop();
    }
    out.extend_from_slice(SEPARATOR);
    for v in values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

fn decode_values(payload: &[u8], count: usize) -> Result<Vec<C64>> {
    if payload.len() != 16 * count {
        return Err(Error::Format(format!("expected {} payload bytes, found {}", 16 * count, payload.len())));
    }
    Ok(payload
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            C64::new(re, im)
        })
        .collect())
}

pub fn encode_field(f: &SpectralField) -> Vec<u8> {
    let header = FieldHeader {
        format: "spectral-field".into(),
        truncation: f.truncation(),
        kind: f.kind().as_str().into(),
        period_scale: f.period_scale(),
        components: 3,
    };
    encode(toml::to_string(&header).expect("plain header"), f.as_slice().iter().copied())
}

pub fn decode_field(bytes: &[u8]) -> Result<SpectralField> {
    let (text, payload) = split(bytes)?;
    let h: FieldHeader = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if h.format != "spectral-field" {
        return Err(Error::Format(format!("not a field snapshot: {:?}", h.format)));
    }
    if h.components != 3 {
        return Err(Error::Format(format!("expected 3 components, found {}", h.components)));
    }
    if h.truncation == 0 || h.truncation > 512 {
        return Err(Error::Format(format!("unsupported truncation {}", h.truncation)));
    }
    if !(h.period_scale > 0.0 && h.period_scale.is_finite()) {
        return Err(Error::Format(format!("invalid period scale {}", h.period_scale)));
    }
    let kind: FieldKind = h.kind.parse()?;
    let side = 2 * h.truncation + 1;
    let values = decode_values(payload, 3 * side * side * side)?;
    Ok(SpectralField::from_vec(h.truncation, kind, values)?.with_period_scale(h.period_scale))
}

pub fn encode_volume(v: &SampledVolume) -> Vec<u8> {
    let header = VolumeHeader {
        format: "sampled-volume".into(),
        half_width: v.half_width,
        spacing: v.h,
        side: v.side,
        components: 3,
    };
    encode(toml::to_string(&header).expect("plain header"), v.values.iter().flatten().copied())
}

pub fn decode_volume(bytes: &[u8]) -> Result<SampledVolume> {
    let (text, payload) = split(bytes)?;
    let h: VolumeHeader = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if h.format != "sampled-volume" || h.components != 3 {
        return Err(Error::Format("not a three-component sampled volume".into()));
    }
    if h.side % 2 == 0 || h.side > 4097 {
        return Err(Error::Format(format!("unsupported grid side {}", h.side)));
    }
    let flat = decode_values(payload, 3 * h.side.pow(3))?;
    let values = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let v = SampledVolume::new(h.half_width, h.spacing, values)?;
    if v.side != h.side {
        return Err(Error::Format("half-width and spacing disagree with the grid side".into()));
    }
    Ok(SampledVolume { half_width: h.half_width, ..v })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_field(path: &Path, f: &SpectralField) -> Result<()> {
    write_all(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<SpectralField> {
    decode_field(&read_all(path)?)
}

pub fn write_volume(path: &Path, v: &SampledVolume) -> Result<()> {
    write_all(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<SampledVolume> {
    decode_volume(&read_all(path)?)
}
