//! Dataset manifest: `patch_path<TAB>site_id<TAB>split` lines, preceded by
//! `#`-prefixed `key = value` header lines for the generation seed and class
//! counts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{IngestError, IngestResult, SiteId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Test,
    Excluded,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            "excluded" => Some(SplitTag::Excluded),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub patch_path: PathBuf,
    pub site_id: SiteId,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
    pub positives: usize,
    pub negatives: usize,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> IngestResult<()> {
    let mut text = String::new();
    if let Some(seed) = manifest.seed {
        let _ = writeln!(text, "# seed = {seed}");
    }
    let _ = writeln!(text, "# positives = {}", manifest.positives);
    let _ = writeln!(text, "# negatives = {}", manifest.negatives);
    for e in &manifest.entries {
        let _ = writeln!(
            text,
            "{}\t{}\t{}",
            e.patch_path.display(),
            e.site_id,
            e.split.as_str()
        );
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> IngestResult<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let mut m = DatasetManifest::default();
    for (n, line) in text.lines().enumerate() {
        let bad = || IngestError::Format(format!("manifest line {}: `{line}`", n + 1));
        if let Some(header) = line.strip_prefix('#') {
            if let Some((k, v)) = header.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "seed" => m.seed = Some(v.parse().map_err(|_| bad())?),
                    "positives" => m.positives = v.parse().map_err(|_| bad())?,
                    "negatives" => m.negatives = v.parse().map_err(|_| bad())?,
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(p), Some(id), Some(split), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        m.entries.push(ManifestEntry {
            patch_path: PathBuf::from(p),
            site_id: SiteId(id.parse().map_err(|_| bad())?),
            split: SplitTag::parse(split).ok_or_else(bad)?,
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let m = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    patch_path: "patches/1.mgtp".into(),
                    site_id: SiteId(1),
                    split: SplitTag::Train,
                },
                ManifestEntry {
                    patch_path: "patches/2.mgtp".into(),
                    site_id: SiteId(2),
                    split: SplitTag::Test,
                },
            ],
            seed: Some(7),
            positives: 1,
            negatives: 1,
        };
        write_manifest(&path, &m).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("patches/1.mgtp\t1\ttrain\n"));
        assert_eq!(read_manifest(&path).unwrap(), m);
        fs::write(&path, "a\tb\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
