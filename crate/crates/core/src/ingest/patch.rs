use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};

use super::{Band, IngestError, IngestResult, BAND_COUNT, NODATA};

const MAGIC: &[u8; 4] = b"MGTP";
const VERSION: u16 = 1;

/// A square 7-band patch with its NoData mask.
///
/// Bands are stored band-major (`band × row × col`). Masked pixels carry
/// [`NODATA`] in every band.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    side: usize,
    bands: Vec<f32>,
    nodata_mask: Vec<bool>,
    pub resolution: f32,
    pub acquisition_date: NaiveDate,
    pub center: (f64, f64),
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

impl PatchTensor {
    pub fn new(
        side: usize,
        mut bands: Vec<f32>,
        nodata_mask: Vec<bool>,
        resolution: f32,
        acquisition_date: NaiveDate,
        center: (f64, f64),
    ) -> IngestResult<Self> {
        let px = side * side;
        if side == 0 || bands.len() != BAND_COUNT * px || nodata_mask.len() != px {
            return Err(IngestError::Format(format!(
                "patch of side {side} needs {} band values and {px} mask entries",
                BAND_COUNT * px
            )));
        }
        if !(resolution > 0.0) {
            return Err(IngestError::InvalidArgument("resolution must be positive".into()));
        }
        for (i, &masked) in nodata_mask.iter().enumerate() {
            if masked {
                for b in 0..BAND_COUNT {
                    bands[b * px + i] = NODATA;
                }
            }
        }
        Ok(Self {
            side,
            bands,
            nodata_mask,
            resolution,
            acquisition_date,
            center,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn bands(&self) -> &[f32] {
        &self.bands
    }

    pub fn band(&self, band: Band) -> &[f32] {
        let px = self.pixels();
        &self.bands[band.index() * px..(band.index() + 1) * px]
    }

    pub fn nodata_mask(&self) -> &[bool] {
        &self.nodata_mask
    }

    pub fn month(&self) -> u8 {
        self.acquisition_date.month() as u8
    }

    pub fn nodata_fraction(&self) -> f64 {
        let masked = self.nodata_mask.iter().filter(|&&m| m).count();
        masked as f64 / self.pixels() as f64
    }

    /// Mean of `band` over valid pixels, `None` when every pixel is masked.
    pub fn band_mean(&self, band: Band) -> Option<f64> {
        let (sum, n) = self
            .band(band)
            .iter()
            .zip(&self.nodata_mask)
            .filter(|(_, &m)| !m)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + f64::from(v), n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.bands.len() * 4 + self.pixels());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.side as u16).to_le_bytes());
        out.push(BAND_COUNT as u8);
        out.extend_from_slice(&self.resolution.to_le_bytes());
        let days = (self.acquisition_date - epoch()).num_days() as i32;
        out.extend_from_slice(&days.to_le_bytes());
        out.extend_from_slice(&self.center.0.to_le_bytes());
        out.extend_from_slice(&self.center.1.to_le_bytes());
        for v in &self.bands {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.nodata_mask.iter().map(|&m| u8::from(m)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> IngestResult<Self> {
        let bad = |m: &str| IngestError::Format(format!("patch file: {m}"));
        if bytes.len() < 33 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let side = usize::from(u16::from_le_bytes([bytes[6], bytes[7]]));
        if usize::from(bytes[8]) != BAND_COUNT {
            return Err(bad("band count must be 7"));
        }
        let resolution = f32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
        let days = i32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes"));
        let lat = f64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes"));
        let lon = f64::from_le_bytes(bytes[25..33].try_into().expect("8 bytes"));
        let px = side * side;
        let body = &bytes[33..];
        if body.len() != BAND_COUNT * px * 4 + px {
            return Err(bad("unexpected payload length"));
        }
        let bands = body[..BAND_COUNT * px * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = body[BAND_COUNT * px * 4..].iter().map(|&b| b != 0).collect();
        let date = epoch() + chrono::Duration::days(i64::from(days));
        Self::new(side, bands, mask, resolution, date, (lat, lon))
    }

    pub fn save(&self, path: &Path) -> IngestResult<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> IngestResult<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Validation {
    Accept,
    Reject(String),
}

/// Rejects a patch whose NoData fraction is strictly above `threshold`.
pub fn validate_patch(patch: &PatchTensor, threshold: f64) -> IngestResult<Validation> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(IngestError::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let fraction = patch.nodata_fraction();
    Ok(if fraction > threshold {
        Validation::Reject(format!(
            "NoData fraction {fraction:.4} exceeds threshold {threshold}"
        ))
    } else {
        Validation::Accept
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch_with_mask(side: usize, masked: usize, fill: f32) -> PatchTensor {
        let px = side * side;
        let mask = (0..px).map(|i| i < masked).collect();
        PatchTensor::new(
            side,
            vec![fill; BAND_COUNT * px],
            mask,
            20.0,
            NaiveDate::from_ymd_opt(2018, 7, 10).unwrap(),
            (41.9, 12.5),
        )
        .unwrap()
    }

    #[test]
    fn threshold_examples() {
        let ok = patch_with_mask(10, 0, 0.3);
        assert_eq!(validate_patch(&ok, 0.10).unwrap(), Validation::Accept);
        let over = patch_with_mask(10, 11, 0.3);
        assert!(matches!(validate_patch(&over, 0.10).unwrap(), Validation::Reject(_)));
        let edge = patch_with_mask(10, 10, 0.3);
        assert_eq!(edge.nodata_fraction(), 0.10);
        assert_eq!(validate_patch(&edge, 0.10).unwrap(), Validation::Accept);
        assert!(validate_patch(&edge, 1.5).is_err());
    }

    #[test]
    fn masked_pixels_carry_sentinel() {
        let p = patch_with_mask(4, 3, 0.5);
        for b in Band::ALL {
            assert_eq!(&p.band(b)[..3], &[NODATA; 3]);
            assert_eq!(p.band(b)[3], 0.5);
        }
        assert_eq!(p.band_mean(Band::B4), Some(0.5));
    }

    #[test]
    fn file_roundtrip() {
        let p = patch_with_mask(6, 5, 0.25);
        let back = PatchTensor::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        assert_eq!(p.to_bytes().len(), 33 + 7 * 36 * 4 + 36);
        assert!(PatchTensor::from_bytes(&p.to_bytes()[..50]).is_err());
    }

    proptest! {
        #[test]
        fn decision_depends_only_on_mask(
            masked in 0usize..64,
            a in 0.0f32..1.0,
            b in 0.0f32..1.0,
            threshold in 0.0f64..1.0,
        ) {
            let x = validate_patch(&patch_with_mask(8, masked, a), threshold).unwrap();
            let y = validate_patch(&patch_with_mask(8, masked, b), threshold).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
