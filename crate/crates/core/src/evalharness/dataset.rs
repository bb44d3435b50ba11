//! Datasets on disk and their conversion into per-split neighbourhood
//! graphs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{EvalError, EvalResult};
use crate::gnn::GraphSample;
use crate::graphbuild::{knn_neighbourhood, neighbourhood_affinities, AffinityStack, GraphConfig, Relation};
use crate::ingest::{
    pair_with_ground_truth, read_manifest, read_sites, temporal_split, validate_patch, write_manifest, write_sites,
    DatasetManifest, Label, ManifestEntry, PatchTensor, SitePatch, SiteRecord, SplitTag, SyntheticScene, Validation,
    DEFAULT_MAX_GAP_DAYS, DEFAULT_NODATA_THRESHOLD,
};
use crate::numcore::DenseArray;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SITES_FILE: &str = "sites.csv";

/// Which relations feed the affinity stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Adjacency {
    /// A single all-equal slice.
    Uniform,
    Lst,
    Ssm,
    LstSsm,
    Haversine,
    All,
}

impl Adjacency {
    pub const ALL: [Adjacency; 6] = [
        Adjacency::Uniform,
        Adjacency::Lst,
        Adjacency::Ssm,
        Adjacency::LstSsm,
        Adjacency::Haversine,
        Adjacency::All,
    ];

    /// Relations in stack order; `None` for the uniform slice.
    pub fn relations(self) -> Option<Vec<Relation>> {
        match self {
            Adjacency::Uniform => None,
            Adjacency::Lst => Some(vec![Relation::Lst]),
            Adjacency::Ssm => Some(vec![Relation::Ssm]),
            Adjacency::LstSsm => Some(vec![Relation::Lst, Relation::Ssm]),
            Adjacency::Haversine => Some(vec![Relation::Geo]),
            Adjacency::All => Some(Relation::ALL.to_vec()),
        }
    }

    pub fn depth(self) -> usize {
        self.relations().map_or(1, |r| r.len())
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "uniform" => Some(Self::Uniform),
            "lst" => Some(Self::Lst),
            "ssm" => Some(Self::Ssm),
            "lst_ssm" => Some(Self::LstSsm),
            "haversine" | "geo" => Some(Self::Haversine),
            "all" => Some(Self::All),
            _ => None,
        }
    }
}

impl fmt::Display for Adjacency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adjacency::Uniform => "uniform",
            Adjacency::Lst => "lst",
            Adjacency::Ssm => "ssm",
            Adjacency::LstSsm => "lst+ssm",
            Adjacency::Haversine => "haversine",
            Adjacency::All => "all",
        })
    }
}

/// Patches and site records; patches refer to records by site id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patches: Vec<SitePatch>,
    pub records: Vec<SiteRecord>,
    pub seed: Option<u64>,
}

fn patch_file(sp: &SitePatch, k: usize) -> PathBuf {
    PathBuf::from("patches").join(format!("site_{:05}_{k}.mgtp", sp.site_id.0))
}

impl Dataset {
    pub fn from_scene(scene: SyntheticScene, seed: u64) -> Self {
        Self {
            patches: scene.patches,
            records: scene.records,
            seed: Some(seed),
        }
    }

    /// Writes `manifest.tsv`, `sites.csv` and one `.mgtp` file per patch
    /// under `dir`. Split tags follow the observation year; patches over
    /// the NoData threshold are tagged excluded.
    pub fn write(&self, dir: &Path, split: &SplitConfig) -> EvalResult<DatasetManifest> {
        fs::create_dir_all(dir.join("patches"))?;
        write_sites(&dir.join(SITES_FILE), &self.records)?;
        let by_id: HashMap<_, _> = self.records.iter().map(|r| (r.id, r)).collect();
        let mut seen: HashMap<_, usize> = HashMap::new();
        let mut entries = Vec::with_capacity(self.patches.len());
        for sp in &self.patches {
            let k = seen.entry(sp.site_id).or_default();
            let rel = patch_file(sp, *k);
            *k += 1;
            sp.patch.save(&dir.join(&rel))?;
            let rejected = matches!(validate_patch(&sp.patch, split.nodata_threshold)?, Validation::Reject(_));
            let year = by_id.get(&sp.site_id).map(|r| chrono::Datelike::year(&r.observation_date));
            let tag = match year {
                _ if rejected => SplitTag::Excluded,
                Some(y) if split.train_years.contains(&y) => SplitTag::Train,
                Some(y) if split.test_years.contains(&y) => SplitTag::Test,
                _ => SplitTag::Excluded,
            };
            entries.push(ManifestEntry {
                patch_path: rel,
                site_id: sp.site_id,
                split: tag,
            });
        }
        let positives = self.records.iter().filter(|r| r.label == Label::Positive).count();
        let manifest = DatasetManifest {
            entries,
            seed: self.seed,
            positives,
            negatives: self.records.len() - positives,
        };
        write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> EvalResult<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let records = read_sites(&dir.join(SITES_FILE))?;
        let patches = manifest
            .entries
            .par_iter()
            .map(|e| {
                Ok(SitePatch {
                    site_id: e.site_id,
                    patch: PatchTensor::load(&dir.join(&e.patch_path))?,
                })
            })
            .collect::<EvalResult<Vec<_>>>()?;
        Ok(Self {
            patches,
            records,
            seed: manifest.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub train_years: Vec<i32>,
    pub test_years: Vec<i32>,
    pub max_gap_days: i64,
    pub nodata_threshold: f64,
    pub k: usize,
    pub sigma: f64,
    pub adjacency: Adjacency,
    /// Iteration cap for the affinity Sinkhorn; tight geographic
    /// clusters need more than the operator default.
    pub sinkhorn_max_iter: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_years: vec![2017, 2018],
            test_years: vec![2019],
            max_gap_days: DEFAULT_MAX_GAP_DAYS,
            nodata_threshold: DEFAULT_NODATA_THRESHOLD,
            k: crate::graphbuild::DEFAULT_K,
            sigma: crate::graphbuild::DEFAULT_SIGMA,
            adjacency: Adjacency::All,
            sinkhorn_max_iter: 1000,
        }
    }
}

/// Neighbourhood graphs of both splits over a shared patch pool.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub pool: Vec<PatchTensor>,
    /// Split of the sample that owns each pool entry.
    pub pool_split: Vec<SplitTag>,
    pub train: Vec<GraphSample>,
    pub test: Vec<GraphSample>,
    /// Pivot records, aligned with `train` / `test`.
    pub train_records: Vec<SiteRecord>,
    pub test_records: Vec<SiteRecord>,
    pub adjacency: Adjacency,
    pub rejected: usize,
    pub unpaired: usize,
}

impl PreparedData {
    pub fn samples(&self, split: SplitTag) -> EvalResult<(&[GraphSample], &[SiteRecord])> {
        match split {
            SplitTag::Train => Ok((&self.train, &self.train_records)),
            SplitTag::Test => Ok((&self.test, &self.test_records)),
            SplitTag::Excluded => Err(EvalError::InvalidInput("excluded samples have no graphs".into())),
        }
    }
}

fn uniform_stack(n: usize) -> EvalResult<AffinityStack> {
    Ok(AffinityStack::new(vec![DenseArray::full(&[n, n], 1.0 / n as f64)], true)?)
}

/// One split's graphs: `members` are (pool index, record) pairs; neighbours
/// come from the same split only.
fn split_graphs(members: &[(usize, SiteRecord)], cfg: &SplitConfig) -> EvalResult<Vec<GraphSample>> {
    let mut first: HashMap<_, usize> = HashMap::new();
    let mut sites = Vec::new();
    for (pool_idx, rec) in members {
        if !first.contains_key(&rec.id) {
            first.insert(rec.id, *pool_idx);
            sites.push(rec.clone());
        }
    }
    let gcfg = GraphConfig {
        k: cfg.k,
        sigma: cfg.sigma,
        relations: cfg.adjacency.relations().unwrap_or_default(),
        max_iter: cfg.sinkhorn_max_iter,
        ..GraphConfig::default()
    };
    members
        .par_iter()
        .map(|(pool_idx, rec)| {
            let nodes = knn_neighbourhood(rec, &sites, cfg.k)?;
            let affinities = match cfg.adjacency {
                Adjacency::Uniform => uniform_stack(nodes.len())?,
                _ => neighbourhood_affinities(&nodes, &gcfg)?,
            };
            let node_idx = std::iter::once(*pool_idx)
                .chain(nodes[1..].iter().map(|s| first[&s.id]))
                .collect();
            Ok(GraphSample {
                site_id: rec.id,
                nodes: node_idx,
                affinities,
                label: rec.label.as_f64(),
            })
        })
        .collect()
}

/// Validates patches, pairs them with records, splits by year and builds
/// every pivot's neighbourhood graph within its split.
pub fn prepare(dataset: &Dataset, cfg: &SplitConfig) -> EvalResult<PreparedData> {
    let mut accepted = Vec::new();
    for sp in &dataset.patches {
        if validate_patch(&sp.patch, cfg.nodata_threshold)? == Validation::Accept {
            accepted.push(sp.clone());
        }
    }
    let rejected = dataset.patches.len() - accepted.len();
    if rejected > 0 {
        log::info!("{rejected} patches rejected for NoData");
    }
    let pairing = pair_with_ground_truth(&accepted, &dataset.records, cfg.max_gap_days)?;
    let (train, test) = temporal_split(&pairing.samples, &cfg.train_years, &cfg.test_years)?;

    let pool: Vec<PatchTensor> = accepted.into_iter().map(|sp| sp.patch).collect();
    let mut pool_split = vec![SplitTag::Excluded; pool.len()];
    let members = |samples: &[crate::ingest::LabeledSample], tag: SplitTag, split: &mut Vec<SplitTag>| {
        samples
            .iter()
            .map(|s| {
                split[s.patch_index] = tag;
                (s.patch_index, dataset.records[s.record_index].clone())
            })
            .collect::<Vec<_>>()
    };
    let train_members = members(&train, SplitTag::Train, &mut pool_split);
    let test_members = members(&test, SplitTag::Test, &mut pool_split);
    Ok(PreparedData {
        train: split_graphs(&train_members, cfg)?,
        test: split_graphs(&test_members, cfg)?,
        train_records: train_members.into_iter().map(|m| m.1).collect(),
        test_records: test_members.into_iter().map(|m| m.1).collect(),
        pool,
        pool_split,
        adjacency: cfg.adjacency,
        rejected,
        unpaired: pairing.dropped,
    })
}
