//! 16-bit binary PGM export of density maps.

use std::path::Path;

use crate::density::DensityMap;
use crate::error::{Error, Result};

/// Intensity mapping to `0..=65535`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PgmScale {
    /// Min-max over the map; a constant map exports as zeros.
    Auto,
    /// `value / cap`, clamped to one.
    Fixed(f64),
}

/// `P5` header, then big-endian 16-bit samples, row-major.
pub fn encode_pgm(dm: &DensityMap, scale: PgmScale) -> Result<Vec<u8>> {
    let (lo, span) = match scale {
        PgmScale::Auto => {
            let lo = dm.values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = dm.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi - lo)
        }
        PgmScale::Fixed(cap) if cap > 0.0 && cap.is_finite() => (0.0, cap),
        PgmScale::Fixed(cap) => {
            return Err(Error::Validation(format!("PGM cap must be positive and finite, got {cap}")))
        }
    };
    let mut out = format!("P5 {} {} 65535\n", dm.w(), dm.h()).into_bytes();
    out.reserve(2 * dm.values().len());
    for &v in dm.values() {
        let level = if span > 0.0 {
            (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}

pub fn export_pgm(dm: &DensityMap, path: impl AsRef<Path>, scale: PgmScale) -> Result<()> {
    std::fs::write(path, encode_pgm(dm, scale)?)?;
    Ok(())
}
