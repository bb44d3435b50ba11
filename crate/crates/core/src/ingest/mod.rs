//! Patch-level data plane: band resampling, NoData validation, pairing of
//! patches with ground-truth site records, temporal splitting, the on-disk
//! formats, and the synthetic scene generator.

mod manifest;
mod patch;
mod records;
mod resample;
pub mod synth;

use std::fmt;

use thiserror::Error;

pub use manifest::{read_manifest, write_manifest, DatasetManifest, ManifestEntry, SplitTag};
pub use patch::{validate_patch, PatchTensor, Validation};
pub use records::{
    pair_with_ground_truth, read_sites, temporal_split, write_sites, Dated, LabeledSample,
    Pairing, DEFAULT_MAX_GAP_DAYS,
};
pub use resample::{resample_band, Raster};
pub use synth::{synth_scene, synth_sites, SynthConfig, SyntheticScene};

/// Value stored in every band at NoData pixels.
pub const NODATA: f32 = -1.0;
pub const BAND_COUNT: usize = 7;
/// Default ground resolution in metres per pixel.
pub const TARGET_RESOLUTION: f32 = 20.0;
pub const DEFAULT_NODATA_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("band is empty")]
    EmptyBand,
    #[error("band contains only NoData pixels")]
    AllNoData,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("region too small: cannot place {requested} sites (placed {placed})")]
    RegionTooSmall { requested: usize, placed: usize },
}

pub type IngestResult<T> = Result<T, IngestError>;

/// The seven bands shared by both sensors, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    B1,
    B2,
    B3,
    B4,
    B8A,
    B11,
    B12,
}

impl Band {
    pub const ALL: [Band; BAND_COUNT] = [
        Band::B1,
        Band::B2,
        Band::B3,
        Band::B4,
        Band::B8A,
        Band::B11,
        Band::B12,
    ];
    pub const RGB: [Band; 3] = [Band::B2, Band::B3, Band::B4];
    pub const SPECTRAL: [Band; 4] = [Band::B1, Band::B8A, Band::B11, Band::B12];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Native Sentinel-2 ground resolution in metres.
    pub fn native_resolution(self) -> f32 {
        match self {
            Band::B1 => 60.0,
            Band::B2 | Band::B3 | Band::B4 => 10.0,
            Band::B8A | Band::B11 | Band::B12 => 20.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::B1 => "B1",
            Band::B2 => "B2",
            Band::B3 => "B3",
            Band::B4 => "B4",
            Band::B8A => "B8A",
            Band::B11 => "B11",
            Band::B12 => "B12",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId(pub u32);

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    PseudoNegative,
    Positive,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::PseudoNegative => 0.0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Label::PseudoNegative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Positive => 1,
            Label::PseudoNegative => 0,
        }
    }
}

/// Ground-truth observation at a site with its environmental summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRecord {
    pub id: SiteId,
    pub lat: f64,
    pub lon: f64,
    pub observation_date: chrono::NaiveDate,
    pub label: Label,
    /// Daytime land-surface temperature, kelvin.
    pub lst_day: Option<f64>,
    /// Night-time land-surface temperature, kelvin.
    pub lst_night: Option<f64>,
    /// Surface soil moisture, percent.
    pub ssm: Option<f64>,
}

impl SiteRecord {
    pub fn validate(&self) -> IngestResult<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(IngestError::InvalidArgument(format!(
                "site {}: coordinates ({}, {}) out of range",
                self.id, self.lat, self.lon
            )));
        }
        if let Some(ssm) = self.ssm {
            if !(0.0..=100.0).contains(&ssm) {
                return Err(IngestError::InvalidArgument(format!(
                    "site {}: ssm {ssm} outside [0, 100]",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn coords(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

/// A patch tied to the site it was sampled around.
#[derive(Clone, Debug, PartialEq)]
pub struct SitePatch {
    pub site_id: SiteId,
    pub patch: PatchTensor,
}
