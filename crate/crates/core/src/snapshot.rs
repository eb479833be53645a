//! Binary field snapshots.
//!
//! A snapshot is the line `GLCELL1`, a single-line JSON header, then `n^2` samples of
//! little-endian `f64` pairs, row-major with `x` fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::energy::DiscreteField;
use crate::error::{GlError, Result};
use crate::grid::{quantized_side, Grid, WrapRule};
use crate::vortices::VorticityField;

pub const MAGIC: &str = "GLCELL1";
pub const VERSION: u32 = 1;
pub const LAYOUT: &str = "row-major";
pub const DTYPE: &str = "f64le";
pub const FIELD_CHANNELS: [&str; 2] = ["re", "im"];
pub const VORTICITY_CHANNELS: [&str; 2] = ["mu", "phase_vorticity"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    pub version: u32,
    #[serde(rename = "R")]
    pub side: f64,
    pub n: usize,
    pub b: f64,
    #[serde(rename = "N")]
    pub n_vortices: usize,
    pub layout: String,
    pub dtype: String,
    pub channels: Vec<String>,
    pub created: String,
}

impl SnapshotHeader {
    pub fn new(grid: &Grid, b: f64, channels: &[&str]) -> Self {
        Self {
            version: VERSION,
            side: grid.side,
            n: grid.n,
            b,
            n_vortices: grid.n_vortices,
            layout: LAYOUT.to_string(),
            dtype: DTYPE.to_string(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            n: self.n,
            h: self.side / self.n as f64,
            side: self.side,
            n_vortices: self.n_vortices,
        }
    }
}

/// Interleaved two-channel snapshot data.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    pub data: Vec<[f64; 2]>,
}

impl Snapshot {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 16 * self.data.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        serde_json::to_writer(&mut out, &self.header)?;
        out.push(b'\n');
        for [a, c] in &self.data {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&c| c == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(GlError::Snapshot("missing GLCELL1 magic line".into()));
        }
        let header_line = lines.next().ok_or_else(|| GlError::Snapshot("missing header".into()))?;
        let header: SnapshotHeader = serde_json::from_slice(header_line)?;
        if header.version != VERSION || header.dtype != DTYPE || header.layout != LAYOUT {
            return Err(GlError::Snapshot(format!(
                "unsupported format: version {}, dtype {}, layout {}",
                header.version, header.dtype, header.layout
            )));
        }
        if header.channels.len() != 2 {
            return Err(GlError::Snapshot(format!("expected 2 channels, got {}", header.channels.len())));
        }
        let payload = lines.next().unwrap_or_default();
        let expected = 16 * header.n * header.n;
        if payload.len() != expected {
            return Err(GlError::PayloadLength {
                expected,
                got: payload.len(),
            });
        }
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        let data = payload.chunks_exact(16).map(|c| [f(&c[..8]), f(&c[8..])]).collect();
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_field(field: &DiscreteField, b: f64) -> Self {
        Self {
            header: SnapshotHeader::new(&field.grid, b, &FIELD_CHANNELS),
            data: field.values.iter().map(|z| [z.re, z.im]).collect(),
        }
    }

    pub fn from_vorticity(vort: &VorticityField, b: f64) -> Self {
        Self {
            header: SnapshotHeader::new(&vort.grid, b, &VORTICITY_CHANNELS),
            data: vort.mu.iter().zip(&vort.phase_vorticity).map(|(m, p)| [*m, *p as f64]).collect(),
        }
    }

    /// Field on the magnetic-periodic cell. Rejects vorticity snapshots and sides
    /// violating flux quantization.
    pub fn to_field(&self) -> Result<DiscreteField> {
        if self.header.channels != FIELD_CHANNELS {
            return Err(GlError::Snapshot(format!("not a field snapshot: channels {:?}", self.header.channels)));
        }
        let expected = quantized_side(self.header.n_vortices);
        if (self.header.side - expected).abs() > 1e-12 * expected {
            return Err(GlError::Quantization(self.header.side * self.header.side / std::f64::consts::TAU));
        }
        let grid = self.header.grid();
        let values = self.data.iter().map(|[a, c]| Complex64::new(*a, *c)).collect();
        let field = DiscreteField::new(grid, WrapRule::magnetic(&grid), values);
        field.check_finite()?;
        Ok(field)
    }
}

pub fn write_field(path: &Path, field: &DiscreteField, b: f64) -> Result<()> {
    Snapshot::from_field(field, b).write(path)
}

/// Read a field snapshot, returning `b` from its header along with the field.
pub fn read_field(path: &Path) -> Result<(DiscreteField, f64)> {
    let snap = Snapshot::read(path)?;
    let field = snap.to_field()?;
    Ok((field, snap.header.b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DiscreteField {
        let g = Grid::unchecked(4, 16);
        let values = (0..g.sites())
            .map(|k| Complex64::new((k as f64 * 0.37).sin() * 1e-3, 1.0 / (k as f64 + 3.0)))
            .collect();
        DiscreteField::new(g, WrapRule::magnetic(&g), values)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let u = sample();
        let snap = Snapshot::from_field(&u, 0.1);
        let bytes = snap.to_bytes().unwrap();
        let header_len = bytes.iter().skip(MAGIC.len() + 1).position(|&c| c == b'\n').unwrap();
        assert_eq!(bytes.len(), MAGIC.len() + 1 + header_len + 1 + 16 * 256);
        let back = Snapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, snap.header);
        let v = back.to_field().unwrap();
        assert!(u.values.iter().zip(&v.values).all(|(a, c)| a.re.to_bits() == c.re.to_bits() && a.im.to_bits() == c.im.to_bits()));
        assert_eq!(back.header.b, 0.1);
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = Snapshot::from_field(&sample(), 0.1).to_bytes().unwrap();
        let err = Snapshot::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
        assert!(matches!(Snapshot::from_bytes(b"NOPE\n{}\n"), Err(GlError::Snapshot(_))));
    }

    #[test]
    fn vorticity_snapshot_is_not_a_field() {
        let u = sample();
        let snap = Snapshot::from_vorticity(&crate::vortices::vorticity(&u), 0.1);
        assert_eq!(snap.header.channels, VORTICITY_CHANNELS);
        let back = Snapshot::from_bytes(&snap.to_bytes().unwrap()).unwrap();
        assert!(back.to_field().is_err());
    }
}
