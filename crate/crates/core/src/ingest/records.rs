use std::collections::HashMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{IngestError, IngestResult, Label, SiteId, SitePatch, SiteRecord};

/// Largest accepted gap between a patch and its ground-truth record.
pub const DEFAULT_MAX_GAP_DAYS: i64 = 160;

#[derive(Debug, Serialize, Deserialize)]
struct SiteRow {
    id: u32,
    lat: f64,
    lon: f64,
    date: String,
    label: u8,
    lst_day: Option<f64>,
    lst_night: Option<f64>,
    ssm: Option<f64>,
}

pub fn write_sites(path: &Path, sites: &[SiteRecord]) -> IngestResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in sites {
        w.serialize(SiteRow {
            id: s.id.0,
            lat: s.lat,
            lon: s.lon,
            date: s.observation_date.format("%Y-%m-%d").to_string(),
            label: s.label.bit(),
            lst_day: s.lst_day,
            lst_night: s.lst_night,
            ssm: s.ssm,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sites(path: &Path) -> IngestResult<Vec<SiteRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expected = ["id", "lat", "lon", "date", "label", "lst_day", "lst_night", "ssm"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(IngestError::Format(format!(
            "site CSV header must be `{}`",
            expected.join(",")
        )));
    }
    r.deserialize::<SiteRow>()
        .map(|row| {
            let row = row?;
            let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
                .map_err(|e| IngestError::Format(format!("site {}: date: {e}", row.id)))?;
            let label = Label::from_bit(row.label)
                .ok_or_else(|| IngestError::Format(format!("site {}: label", row.id)))?;
            let rec = SiteRecord {
                id: SiteId(row.id),
                lat: row.lat,
                lon: row.lon,
                observation_date: date,
                label,
                lst_day: row.lst_day,
                lst_night: row.lst_night,
                ssm: row.ssm,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// A patch matched to its ground-truth record (both by index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub patch_index: usize,
    pub record_index: usize,
    pub site_id: SiteId,
    pub observation_date: NaiveDate,
    pub gap_days: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    pub samples: Vec<LabeledSample>,
    /// Patches without any record within the allowed gap.
    pub dropped: usize,
}

/// Matches each patch with the temporally closest record of the same site;
/// ties go to the earlier record. One record may serve many patches.
pub fn pair_with_ground_truth(
    patches: &[SitePatch],
    records: &[SiteRecord],
    max_gap_days: i64,
) -> IngestResult<Pairing> {
    if patches.is_empty() || records.is_empty() {
        return Err(IngestError::InvalidArgument(
            "pairing needs at least one patch and one record".into(),
        ));
    }
    let mut by_site: HashMap<SiteId, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_site.entry(r.id).or_default().push(i);
    }
    let mut samples = Vec::with_capacity(patches.len());
    let mut dropped = 0;
    for (pi, sp) in patches.iter().enumerate() {
        let date = sp.patch.acquisition_date;
        let best = by_site.get(&sp.site_id).and_then(|cands| {
            cands
                .iter()
                .map(|&ri| {
                    let rd = records[ri].observation_date;
                    ((date - rd).num_days().abs(), rd, ri)
                })
                .min()
        });
        match best {
            Some((gap, rd, ri)) if gap <= max_gap_days => samples.push(LabeledSample {
                patch_index: pi,
                record_index: ri,
                site_id: sp.site_id,
                observation_date: rd,
                gap_days: gap,
            }),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("pairing dropped {dropped} patches without a record within {max_gap_days} days");
    }
    Ok(Pairing { samples, dropped })
}

/// Anything carrying an observation year.
pub trait Dated {
    fn year(&self) -> i32;
}

impl Dated for LabeledSample {
    fn year(&self) -> i32 {
        self.observation_date.year()
    }
}

impl Dated for SiteRecord {
    fn year(&self) -> i32 {
        self.observation_date.year()
    }
}

/// Partitions samples by observation year; years in neither set are
/// excluded.
pub fn temporal_split<T: Dated + Clone>(
    samples: &[T],
    train_years: &[i32],
    test_years: &[i32],
) -> IngestResult<(Vec<T>, Vec<T>)> {
    if train_years.iter().any(|y| test_years.contains(y)) {
        return Err(IngestError::InvalidArgument(
            "train and test years overlap".into(),
        ));
    }
    let pick = |years: &[i32]| -> Vec<T> {
        samples
            .iter()
            .filter(|s| years.contains(&s.year()))
            .cloned()
            .collect()
    };
    let (train, test) = (pick(train_years), pick(test_years));
    if train.is_empty() {
        return Err(IngestError::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(IngestError::EmptySplit("test"));
    }
    Ok((train, test))
}
