//! Synthetic sites and patches with a planted, spatially informative label.
//!
//! Three latent fields (temperature, moisture, vegetation) are smooth
//! Gaussian-bump mixtures over the region, and each site adds its own
//! idiosyncratic deviation. A site's label is drawn from a logistic function
//! of the similarity-weighted mean of temperature + moisture over the site
//! and its nearest neighbours, so neighbour content carries information the
//! pivot's own patch does not. Band values are linear in the latents, which
//! are shifted by a monthly seasonal term before rendering: the same site
//! looks different in July than in March while its label does not change.

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::resample::{resample_band, Raster};
use super::{
    Band, IngestError, IngestResult, Label, PatchTensor, SiteId, SitePatch, SiteRecord,
    BAND_COUNT, TARGET_RESOLUTION,
};
use crate::graphbuild::haversine;
use crate::numcore::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_sites: usize,
    pub positive_rate: f64,
    /// Slope of the planted logistic; 0 makes labels pure noise.
    pub signal_strength: f64,
    /// Patch side in pixels at the target resolution.
    pub patch_side: usize,
    pub years: Vec<i32>,
    /// (lat_min, lat_max, lon_min, lon_max) in degrees.
    pub region: (f64, f64, f64, f64),
    pub min_spacing_km: f64,
    /// Standard deviation of each site's own latent deviation.
    pub site_noise: f64,
    /// Neighbours entering the planted label.
    pub label_neighbours: usize,
    pub cloud_probability: f64,
    /// Amplitude of the monthly latent shift.
    pub seasonality: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_sites: 2264,
            positive_rate: 0.347,
            signal_strength: 3.0,
            patch_side: 32,
            years: vec![2017, 2018, 2019],
            region: (37.0, 46.0, 7.0, 18.5),
            min_spacing_km: 0.5,
            site_noise: 0.7,
            label_neighbours: 10,
            cloud_probability: 0.15,
            seasonality: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub patches: Vec<SitePatch>,
    pub records: Vec<SiteRecord>,
}

/// Per-site latent state: (temperature, moisture, vegetation).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Latent([f64; 3]);

struct Bump {
    x: f64,
    y: f64,
    radius: f64,
    amplitude: f64,
}

// stream tags for derive_seed
const PLACE: u64 = 1;
const FIELDS: u64 = 2;
const NOISE: u64 = 3;
const DATES: u64 = 4;
const LABELS: u64 = 5;
const COVARIATES: u64 = 6;
const RENDER: u64 = 1 << 32;

/// Months weighted toward the summer transmission season.
const MONTH_WEIGHTS: [f64; 12] = [1.0, 1.0, 2.0, 3.0, 5.0, 7.0, 9.0, 9.0, 7.0, 4.0, 2.0, 1.0];

/// Band loadings on (temperature, moisture, vegetation) and base level.
const LOADINGS: [([f64; 3], f64); BAND_COUNT] = [
    ([0.020, -0.010, 0.000], 0.12), // B1
    ([0.015, -0.020, -0.010], 0.10), // B2
    ([0.010, -0.015, 0.020], 0.12), // B3
    ([0.025, -0.020, -0.025], 0.14), // B4
    ([0.000, 0.015, 0.060], 0.30), // B8A
    ([0.030, -0.035, 0.010], 0.22), // B11
    ([0.035, -0.030, -0.015], 0.16), // B12
];

/// Seasonal shift of the latents per unit `season(month)`.
const SEASON_LOADING: [f64; 3] = [1.0, -0.6, 0.7];

fn season(month: u32) -> f64 {
    (2.0 * std::f64::consts::PI * (f64::from(month) - 8.0) / 12.0).cos()
}

fn validate(cfg: &SynthConfig) -> IngestResult<()> {
    let bad = |m: String| Err(IngestError::InvalidArgument(m));
    if cfg.n_sites < 20 {
        return bad(format!("need at least 20 sites, got {}", cfg.n_sites));
    }
    if !(cfg.positive_rate > 0.0 && cfg.positive_rate < 1.0) {
        return bad(format!("positive rate {} outside (0, 1)", cfg.positive_rate));
    }
    if cfg.years.is_empty() || cfg.patch_side < 2 {
        return bad("years must be nonempty and patch side at least 2".into());
    }
    if !(cfg.signal_strength >= 0.0 && cfg.site_noise >= 0.0) {
        return bad("signal strength and site noise must be non-negative".into());
    }
    let (a, b, c, d) = cfg.region;
    if !(a < b && c < d && a >= -90.0 && b <= 90.0 && c >= -180.0 && d <= 180.0) {
        return bad(format!("invalid region {:?}", cfg.region));
    }
    Ok(())
}

/// Local planar coordinates (km) relative to the region centre.
fn planar(region: (f64, f64, f64, f64), lat: f64, lon: f64) -> (f64, f64) {
    let lat0 = (region.0 + region.1) / 2.0;
    let lon0 = (region.2 + region.3) / 2.0;
    (
        (lon - lon0) * 111.32 * lat0.to_radians().cos(),
        (lat - lat0) * 110.57,
    )
}

fn place_sites(cfg: &SynthConfig) -> IngestResult<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PLACE));
    let (a, b, c, d) = cfg.region;
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(cfg.n_sites);
    let budget = 50 * cfg.n_sites;
    let mut attempts = 0;
    while placed.len() < cfg.n_sites {
        if attempts == budget {
            return Err(IngestError::RegionTooSmall {
                requested: cfg.n_sites,
                placed: placed.len(),
            });
        }
        attempts += 1;
        let p = (rng.random_range(a..b), rng.random_range(c..d));
        // coarse degree prefilter before the exact distance
        let deg = cfg.min_spacing_km / 100.0;
        let clash = placed.iter().any(|q| {
            (q.0 - p.0).abs() < deg
                && (q.1 - p.1).abs() < deg * 2.0
                && haversine(*q, p) < cfg.min_spacing_km
        });
        if !clash {
            placed.push(p);
        }
    }
    Ok(placed)
}

fn bump_fields(cfg: &SynthConfig) -> Vec<Vec<Bump>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, FIELDS));
    let (lo, hi) = (
        planar(cfg.region, cfg.region.0, cfg.region.2),
        planar(cfg.region, cfg.region.1, cfg.region.3),
    );
    (0..3)
        .map(|_| {
            (0..14)
                .map(|_| Bump {
                    x: rng.random_range(lo.0..hi.0),
                    y: rng.random_range(lo.1..hi.1),
                    radius: rng.random_range(60.0..220.0),
                    amplitude: rng.sample::<f64, _>(StandardNormal),
                })
                .collect()
        })
        .collect()
}

fn zscore(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

fn latents(cfg: &SynthConfig, coords: &[(f64, f64)]) -> Vec<Latent> {
    let fields = bump_fields(cfg);
    let mut cols: Vec<Vec<f64>> = fields
        .iter()
        .map(|bumps| {
            coords
                .iter()
                .map(|&(lat, lon)| {
                    let (x, y) = planar(cfg.region, lat, lon);
                    bumps
                        .iter()
                        .map(|b| {
                            let r2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                            b.amplitude * (-r2 / (2.0 * b.radius * b.radius)).exp()
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, NOISE));
    for col in &mut cols {
        zscore(col);
        for v in col.iter_mut() {
            *v += cfg.site_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (0..coords.len())
        .map(|i| Latent([cols[0][i], cols[1][i], cols[2][i]]))
        .collect()
}

/// Similarity-weighted mean of temperature + moisture over each site and
/// its nearest neighbours, z-scored across sites.
fn planted_scores(cfg: &SynthConfig, coords: &[(f64, f64)], lat: &[Latent]) -> Vec<f64> {
    let k = cfg.label_neighbours.min(coords.len() - 1);
    let mut scores: Vec<f64> = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &c)| (haversine(coords[i], c), j))
                .collect();
            if k < d.len() {
                d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            let own = lat[i].0;
            let (mut num, mut den) = (own[0] + own[1], 1.0);
            for (dist, j) in d {
                let other = lat[j].0;
                let env = (own[0] - other[0]).powi(2) + (own[1] - other[1]).powi(2);
                let w = (-(dist / 40.0).powi(2) / 2.0).exp() * (-env / 4.0).exp();
                num += w * (other[0] + other[1]);
                den += w;
            }
            num / den
        })
        .collect();
    zscore(&mut scores);
    scores
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offset `b` such that the mean of `sigmoid(s·z + b)` equals `rate`.
fn solve_offset(z: &[f64], s: f64, rate: f64) -> f64 {
    let mean_p = |b: f64| z.iter().map(|&v| sigmoid(s * v + b)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}

fn draw_dates(cfg: &SynthConfig) -> Vec<NaiveDate> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DATES));
    let months = WeightedIndex::new(MONTH_WEIGHTS).expect("positive weights");
    (0..cfg.n_sites)
        .map(|_| {
            let y = cfg.years[rng.random_range(0..cfg.years.len())];
            let m = months.sample(&mut rng) as u32 + 1;
            let d = rng.random_range(1..=28);
            NaiveDate::from_ymd_opt(y, m, d).expect("day ≤ 28 is always valid")
        })
        .collect()
}

struct Planted {
    records: Vec<SiteRecord>,
    latents: Vec<Latent>,
}

fn plant(cfg: &SynthConfig) -> IngestResult<Planted> {
    validate(cfg)?;
    let coords = place_sites(cfg)?;
    let latents = latents(cfg, &coords);
    let z = planted_scores(cfg, &coords, &latents);
    let b = solve_offset(&z, cfg.signal_strength, cfg.positive_rate);
    let dates = draw_dates(cfg);
    let mut label_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, LABELS));
    let mut cov_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, COVARIATES));
    let records = (0..cfg.n_sites)
        .map(|i| {
            let p = sigmoid(cfg.signal_strength * z[i] + b);
            let label = if label_rng.random::<f64>() < p {
                Label::Positive
            } else {
                Label::PseudoNegative
            };
            let [t, m, _] = latents[i].0;
            let s = season(chrono::Datelike::month(&dates[i]));
            let mut noise = || cov_rng.sample::<f64, _>(StandardNormal);
            SiteRecord {
                id: SiteId(i as u32),
                lat: coords[i].0,
                lon: coords[i].1,
                observation_date: dates[i],
                label,
                lst_day: Some(295.0 + 6.0 * t + 4.0 * s + 0.5 * noise()),
                lst_night: Some(283.0 + 4.0 * t + 3.0 * s + 0.5 * noise()),
                ssm: Some((25.0 + 8.0 * m - 3.0 * s + noise()).clamp(0.0, 100.0)),
            }
        })
        .collect();
    Ok(Planted { records, latents })
}

/// Site records only; much cheaper than [`synth_scene`].
pub fn synth_sites(cfg: &SynthConfig) -> IngestResult<Vec<SiteRecord>> {
    Ok(plant(cfg)?.records)
}

/// Sites plus one rendered patch per site.
pub fn synth_scene(cfg: &SynthConfig) -> IngestResult<SyntheticScene> {
    let Planted { records, latents } = plant(cfg)?;
    let patches = records
        .par_iter()
        .zip(&latents)
        .map(|(rec, lat)| render_patch(cfg, rec, lat))
        .collect::<IngestResult<Vec<_>>>()?;
    Ok(SyntheticScene { patches, records })
}

/// Smooth in-patch texture: a few random plane waves.
struct Texture(Vec<(f64, f64, f64, f64)>);

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self(
            (0..3)
                .map(|_| {
                    (
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.3..1.0),
                    )
                })
                .collect(),
        )
    }

    /// Value at fractional patch coordinates in [0, 1).
    fn at(&self, u: f64, v: f64) -> f64 {
        self.0
            .iter()
            .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
            .sum::<f64>()
            / 3.0
    }
}

fn render_patch(cfg: &SynthConfig, rec: &SiteRecord, lat: &Latent) -> IngestResult<SitePatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, RENDER + u64::from(rec.id.0)));
    let offset = rng.random_range(-6..=6);
    let date = rec.observation_date + Duration::days(offset);
    let month = chrono::Datelike::month(&date);
    let s = season(month) * cfg.seasonality;
    let gain = 1.0 + 0.15 * (2.0 * std::f64::consts::PI * (f64::from(month) - 6.0) / 12.0).cos();
    let eff: Vec<f64> = (0..3).map(|f| lat.0[f] + SEASON_LOADING[f] * s).collect();
    let texture = Texture::new(&mut rng);

    let side = cfg.patch_side;
    let px = side * side;
    let mut bands = vec![0.0f32; BAND_COUNT * px];
    for band in Band::ALL {
        let (load, base) = LOADINGS[band.index()];
        let level = base + load.iter().zip(&eff).map(|(l, e)| l * e).sum::<f64>();
        let tex_amp = 0.02 * (1.0 + load[2].abs() * 10.0);
        // visible bands are rendered at twice the resolution and averaged down
        let fine = if band.native_resolution() < TARGET_RESOLUTION { 2 } else { 1 };
        let n = side * fine;
        let values: Vec<f32> = (0..n * n)
            .map(|k| {
                let (y, x) = ((k / n) as f64 / n as f64, (k % n) as f64 / n as f64);
                let noise: f64 = rng.sample(StandardNormal);
                let v = gain * (level + tex_amp * texture.at(x, y)) + 0.005 * noise;
                v.max(0.0) as f32
            })
            .collect();
        let raster = if fine > 1 {
            let src = f64::from(TARGET_RESOLUTION) / fine as f64;
            resample_band(&Raster::new(n, values), src, f64::from(TARGET_RESOLUTION))?.values
        } else {
            values
        };
        bands[band.index() * px..(band.index() + 1) * px].copy_from_slice(&raster);
    }

    let mut mask = vec![false; px];
    if rng.random::<f64>() < cfg.cloud_probability {
        // a disc covering up to a fifth of the patch
        let frac = rng.random_range(0.0..0.2);
        let r = (frac * px as f64 / std::f64::consts::PI).sqrt();
        let (cy, cx) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
        for (k, m) in mask.iter_mut().enumerate() {
            let (y, x) = ((k / side) as f64 + 0.5, (k % side) as f64 + 0.5);
            *m = (y - cy).powi(2) + (x - cx).powi(2) < r * r;
        }
    }
    let patch = PatchTensor::new(side, bands, mask, TARGET_RESOLUTION, date, rec.coords())?;
    Ok(SitePatch {
        site_id: rec.id,
        patch,
    })
}
