//! Neighbourhood graphs around pivot sites: k-nearest neighbours by
//! great-circle distance, per-relation distance matrices (geographic, LST,
//! SSM), Gaussian similarities and Sinkhorn–Knopp normalisation.

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::ingest::{SiteId, SiteRecord};
use crate::numcore::DenseArray;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const SINKHORN_TOL: f64 = 1e-6;
pub const SINKHORN_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("need {needed} candidate sites, only {available} available")]
    NotEnoughSites { needed: usize, available: usize },
    #[error("site {site}: missing covariate {field}")]
    MissingCovariate { site: SiteId, field: &'static str },
    #[error("site {0}: no node features")]
    MissingFeatures(SiteId),
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("{kind} {index} has no positive entry")]
    ZeroLine { kind: &'static str, index: usize },
    #[error("Sinkhorn did not converge in {iterations} iterations (deviation {deviation:e})")]
    NotConverged { iterations: usize, deviation: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type GraphResult<T> = Result<T, GraphError>;

/// Edge relations in stack order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Geo,
    Lst,
    Ssm,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Geo, Relation::Lst, Relation::Ssm];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Geo => "geo",
            Relation::Lst => "lst",
            Relation::Ssm => "ssm",
        }
    }
}

/// Great-circle distance in kilometres between two (lat, lon) points in
/// degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Indices into `sites` of the `k` closest sites to `pivot`, ascending by
/// distance, ties broken by lower site id. Sites sharing the pivot's id are
/// never candidates.
pub fn knn_indices(pivot: &SiteRecord, sites: &[SiteRecord], k: usize) -> GraphResult<Vec<usize>> {
    let mut cand: Vec<(f64, SiteId, usize)> = sites
        .iter()
        .enumerate()
        .filter(|(_, s)| s.id != pivot.id)
        .map(|(i, s)| (haversine(pivot.coords(), s.coords()), s.id, i))
        .collect();
    if cand.len() < k {
        return Err(GraphError::NotEnoughSites {
            needed: k,
            available: cand.len(),
        });
    }
    let order = |a: &(f64, SiteId, usize), b: &(f64, SiteId, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    Ok(cand.into_iter().map(|c| c.2).collect())
}

/// The pivot followed by its `k` nearest sites.
pub fn knn_neighbourhood<'a>(
    pivot: &'a SiteRecord,
    sites: &'a [SiteRecord],
    k: usize,
) -> GraphResult<Vec<&'a SiteRecord>> {
    let idx = knn_indices(pivot, sites, k)?;
    Ok(std::iter::once(pivot).chain(idx.into_iter().map(|i| &sites[i])).collect())
}

/// Pairwise distance matrices for the three relations.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDistances {
    pub geo: DenseArray,
    pub lst: DenseArray,
    pub ssm: DenseArray,
}

impl EdgeDistances {
    pub fn get(&self, r: Relation) -> &DenseArray {
        match r {
            Relation::Geo => &self.geo,
            Relation::Lst => &self.lst,
            Relation::Ssm => &self.ssm,
        }
    }
}

pub fn edge_distances(nodes: &[&SiteRecord]) -> GraphResult<EdgeDistances> {
    let need = |s: &SiteRecord, v: Option<f64>, field| {
        v.ok_or(GraphError::MissingCovariate { site: s.id, field })
    };
    let mut cov = Vec::with_capacity(nodes.len());
    for s in nodes {
        cov.push((
            need(s, s.lst_day, "lst_day")?,
            need(s, s.lst_night, "lst_night")?,
            need(s, s.ssm, "ssm")?,
        ));
    }
    let n = nodes.len();
    if n == 0 {
        return Err(GraphError::InvalidArgument("no nodes".into()));
    }
    let mut geo = DenseArray::zeros(&[n, n]);
    let mut lst = DenseArray::zeros(&[n, n]);
    let mut ssm = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let g = haversine(nodes[i].coords(), nodes[j].coords());
            let l = ((cov[i].0 - cov[j].0).abs() + (cov[i].1 - cov[j].1).abs()) / 2.0;
            let s = (cov[i].2 - cov[j].2).abs();
            for (m, v) in [(&mut geo, g), (&mut lst, l), (&mut ssm, s)] {
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
    }
    Ok(EdgeDistances { geo, lst, ssm })
}

/// Divides `d` by the standard deviation of its off-diagonal entries. A
/// matrix whose off-diagonal entries are all equal is returned unchanged.
pub fn standardize_distances(d: &DenseArray) -> DenseArray {
    let n = d.rows();
    if n < 2 {
        return d.clone();
    }
    let off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d.at(i, j))
        .collect();
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    let std = (off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / off.len() as f64).sqrt();
    if std <= 1e-12 {
        d.clone()
    } else {
        d.map(|v| v / std)
    }
}

/// `exp(−d² / 2σ²)` elementwise.
pub fn gaussian_similarity(d: &DenseArray, sigma: f64) -> GraphResult<DenseArray> {
    if !(sigma > 0.0) {
        return Err(GraphError::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    if let Some(&neg) = d.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(GraphError::NegativeDistance(neg));
    }
    Ok(d.map(|v| (-(v * v) / (2.0 * sigma * sigma)).exp()))
}

pub fn max_row_deviation(m: &DenseArray) -> f64 {
    (0..m.rows())
        .map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn max_col_deviation(m: &DenseArray) -> f64 {
    let mut sums = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

/// Largest deviation of any row or column sum from 1.
pub fn stochastic_deviation(m: &DenseArray) -> f64 {
    max_row_deviation(m).max(max_col_deviation(m))
}

/// Checks that `m` is square, finite, non-negative, with a positive entry in
/// every row and column.
pub fn check_support(m: &DenseArray) -> GraphResult<()> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(GraphError::InvalidArgument(format!(
            "expected a square matrix, got {:?}",
            m.shape()
        )));
    }
    if m.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GraphError::InvalidArgument(
            "matrix entries must be finite and non-negative".into(),
        ));
    }
    let n = m.rows();
    for i in 0..n {
        if !m.row(i).iter().any(|&v| v > 0.0) {
            return Err(GraphError::ZeroLine { kind: "row", index: i });
        }
    }
    for j in 0..n {
        if !(0..n).any(|i| m.at(i, j) > 0.0) {
            return Err(GraphError::ZeroLine { kind: "column", index: j });
        }
    }
    Ok(())
}

/// Alternating row/column normalisation until every row and column sums to
/// 1 within `tol`. Zero entries stay exactly zero.
pub fn sinkhorn_normalize(m: &DenseArray, tol: f64, max_iter: usize) -> GraphResult<DenseArray> {
    check_support(m)?;
    let n = m.rows();
    let mut a = m.clone();
    let mut deviation = f64::INFINITY;
    for _ in 0..max_iter {
        for i in 0..n {
            let s: f64 = a.row(i).iter().sum();
            for j in 0..n {
                a.set(i, j, a.at(i, j) / s);
            }
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| a.at(i, j)).sum();
            for i in 0..n {
                a.set(i, j, a.at(i, j) / s);
            }
        }
        deviation = max_row_deviation(&a);
        if deviation < tol {
            return Ok(a);
        }
    }
    Err(GraphError::NotConverged {
        iterations: max_iter,
        deviation,
    })
}

/// N×N×G stack of affinity slices.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityStack {
    slices: Vec<DenseArray>,
    pub normalized: bool,
}

impl AffinityStack {
    pub fn new(slices: Vec<DenseArray>, normalized: bool) -> GraphResult<Self> {
        let Some(first) = slices.first() else {
            return Err(GraphError::InvalidArgument("empty affinity stack".into()));
        };
        let n = first.rows();
        if slices.iter().any(|s| s.shape() != [n, n]) {
            return Err(GraphError::InvalidArgument("affinity slices must be N×N".into()));
        }
        Ok(Self { slices, normalized })
    }

    pub fn nodes(&self) -> usize {
        self.slices[0].rows()
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, g: usize) -> &DenseArray {
        &self.slices[g]
    }

    pub fn slices(&self) -> &[DenseArray] {
        &self.slices
    }

    /// Applies the same node permutation to every slice.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            slices: self.slices.iter().map(|s| s.permute_square(perm)).collect(),
            normalized: self.normalized,
        }
    }

    /// Text dump: header `N G`, then one `i j g weight` line per nonzero
    /// entry.
    pub fn write_dump(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.nodes(), self.depth())?;
        for (g, s) in self.slices.iter().enumerate() {
            for i in 0..s.rows() {
                for j in 0..s.cols() {
                    let w = s.at(i, j);
                    if w != 0.0 {
                        writeln!(out, "{i} {j} {g} {w}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub sigma: f64,
    /// Scale each relation's distances to unit off-diagonal deviation.
    pub standardize: bool,
    /// Keep diagonal similarity 1; otherwise the diagonal is zeroed.
    pub self_loops: bool,
    pub relations: Vec<Relation>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            sigma: DEFAULT_SIGMA,
            standardize: true,
            self_loops: true,
            relations: Relation::ALL.to_vec(),
            tol: SINKHORN_TOL,
            max_iter: SINKHORN_MAX_ITER,
        }
    }
}

/// Sinkhorn-normalised similarity slices for an ordered node list.
pub fn neighbourhood_affinities(
    nodes: &[&SiteRecord],
    cfg: &GraphConfig,
) -> GraphResult<AffinityStack> {
    if cfg.relations.is_empty() {
        return Err(GraphError::InvalidArgument("no relations selected".into()));
    }
    let dist = edge_distances(nodes)?;
    let slices = cfg
        .relations
        .iter()
        .map(|&r| {
            let d = dist.get(r);
            let d = if cfg.standardize { standardize_distances(d) } else { d.clone() };
            let mut s = gaussian_similarity(&d, cfg.sigma)?;
            if !cfg.self_loops {
                for i in 0..s.rows() {
                    s.set(i, i, 0.0);
                }
            }
            sinkhorn_normalize(&s, cfg.tol, cfg.max_iter)
        })
        .collect::<GraphResult<Vec<_>>>()?;
    AffinityStack::new(slices, true)
}

/// Pivot-centred graph with node features; the pivot is node 0.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighbourhoodGraph {
    pub node_features: DenseArray,
    pub affinities: AffinityStack,
    pub pivot_index: usize,
    pub node_site_ids: Vec<SiteId>,
}

pub fn build_graph(
    pivot: &SiteRecord,
    sites: &[SiteRecord],
    features: &HashMap<SiteId, Vec<f64>>,
    cfg: &GraphConfig,
) -> GraphResult<NeighbourhoodGraph> {
    let nodes = knn_neighbourhood(pivot, sites, cfg.k)?;
    let affinities = neighbourhood_affinities(&nodes, cfg)?;
    let rows = nodes
        .iter()
        .map(|s| features.get(&s.id).cloned().ok_or(GraphError::MissingFeatures(s.id)))
        .collect::<GraphResult<Vec<_>>>()?;
    let node_features = DenseArray::from_rows(&rows)
        .map_err(|e| GraphError::InvalidArgument(e.to_string()))?;
    Ok(NeighbourhoodGraph {
        node_features,
        affinities,
        pivot_index: 0,
        node_site_ids: nodes.iter().map(|s| s.id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Label;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn site(id: u32, lat: f64, lon: f64, lst: (f64, f64), ssm: f64) -> SiteRecord {
        SiteRecord {
            id: SiteId(id),
            lat,
            lon,
            observation_date: NaiveDate::from_ymd_opt(2018, 7, 1).unwrap(),
            label: Label::Positive,
            lst_day: Some(lst.0),
            lst_night: Some(lst.1),
            ssm: Some(ssm),
        }
    }

    fn cosine_law(a: (f64, f64), b: (f64, f64)) -> f64 {
        let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
        let dl = (b.1 - a.1).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn haversine_examples() {
        assert_eq!(haversine((41.0, 12.0), (41.0, 12.0)), 0.0);
        let anti = haversine((0.0, 0.0), (0.0, 180.0));
        assert!((anti - std::f64::consts::PI * EARTH_RADIUS_KM).abs() / anti < 1e-12);
        let rome = (41.9028, 12.4964);
        let milan = (45.4642, 9.1900);
        let d = haversine(rome, milan);
        assert!((d - cosine_law(rome, milan)).abs() < 1.0);
        assert!((d - 477.0).abs() < 2.0, "{d}");
    }

    #[test]
    fn knn_exhaustive_and_ties() {
        let pivot = site(0, 0.0, 0.0, (300.0, 290.0), 20.0);
        let mut sites: Vec<_> = (1..=10).map(|i| site(i, i as f64, 50.0, (300.0, 290.0), 20.0)).collect();
        sites.push(pivot.clone());
        let nb = knn_neighbourhood(&pivot, &sites, 10).unwrap();
        assert_eq!(nb.len(), 11);
        assert_eq!(nb[0].id, SiteId(0));

        // two candidates mirrored across the equator are exactly equidistant
        let near: Vec<_> = (1..=9).map(|i| site(i, 0.0, 0.01 * i as f64, (300.0, 290.0), 20.0)).collect();
        for (a, b) in [(20u32, 21u32), (21, 20)] {
            let mut pool = near.clone();
            pool.push(site(a, 1.0, 0.0, (300.0, 290.0), 20.0));
            pool.push(site(b, -1.0, 0.0, (300.0, 290.0), 20.0));
            let idx = knn_indices(&pivot, &pool, 10).unwrap();
            assert_eq!(pool[idx[9]].id, SiteId(20));
        }
        assert!(matches!(
            knn_indices(&pivot, &near, 10),
            Err(GraphError::NotEnoughSites { needed: 10, available: 9 })
        ));
    }

    #[test]
    fn knn_matches_full_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sites: Vec<_> = (0..100)
            .map(|i| site(i, rng.random_range(40.0..45.0), rng.random_range(8.0..14.0), (300.0, 290.0), 10.0))
            .collect();
        for p in [0usize, 17, 99] {
            let mut all: Vec<(f64, u32)> = sites
                .iter()
                .filter(|s| s.id != sites[p].id)
                .map(|s| (haversine(sites[p].coords(), s.coords()), s.id.0))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let got: Vec<u32> = knn_indices(&sites[p], &sites, 10)
                .unwrap()
                .into_iter()
                .map(|i| sites[i].id.0)
                .collect();
            let want: Vec<u32> = all[..10].iter().map(|x| x.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn edge_distance_examples() {
        let a = site(1, 45.0, 10.0, (300.0, 290.0), 20.0);
        let b = site(2, 45.1, 10.0, (304.0, 288.0), 20.0);
        let d = edge_distances(&[&a, &b]).unwrap();
        assert_eq!(d.lst.at(0, 1), 3.0);
        assert_eq!(d.ssm.at(0, 1), 0.0);
        assert_eq!(d.geo.at(0, 0), 0.0);
        let mut c = b.clone();
        c.ssm = None;
        assert!(matches!(
            edge_distances(&[&a, &c]),
            Err(GraphError::MissingCovariate { field: "ssm", .. })
        ));
    }

    #[test]
    fn gaussian_examples() {
        let d = DenseArray::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = gaussian_similarity(&d, 1.0).unwrap();
        assert_eq!(s.at(0, 0), 1.0);
        assert!((s.at(0, 1) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((s.at(0, 1) - 0.6065).abs() < 1e-4);
        let neg = DenseArray::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(gaussian_similarity(&neg, 1.0).is_err());
        assert!(gaussian_similarity(&d, 0.0).is_err());
    }

    #[test]
    fn sinkhorn_closed_forms() {
        let u = DenseArray::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = sinkhorn_normalize(&u, 1e-6, 100).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let m = DenseArray::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let out = sinkhorn_normalize(&m, 1e-10, 100).unwrap();
        assert!((out.at(0, 0) - 2.0 / 3.0).abs() < 1e-9);
        assert!((out.at(0, 1) - 1.0 / 3.0).abs() < 1e-9);
        let uu = [1.0, 2.0, 0.5];
        let vv = [3.0, 0.2, 1.0];
        let r1 = DenseArray::from_rows(&uu.iter().map(|a| vv.iter().map(|b| a * b).collect()).collect::<Vec<_>>()).unwrap();
        let out = sinkhorn_normalize(&r1, 1e-10, 100).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-9));
    }

    #[test]
    fn sinkhorn_errors() {
        let z = DenseArray::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            sinkhorn_normalize(&z, 1e-6, 100),
            Err(GraphError::ZeroLine { kind: "row", index: 0 })
        ));
        // support without total support: converges only in the limit
        let tri = DenseArray::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            sinkhorn_normalize(&tri, 1e-12, 50),
            Err(GraphError::NotConverged { iterations: 50, .. })
        ));
    }

    #[test]
    fn identical_sites_give_uniform_graph() {
        let sites: Vec<_> = (0..11).map(|i| site(i, 44.0, 11.0, (300.0, 290.0), 30.0)).collect();
        let features: HashMap<_, _> = sites.iter().map(|s| (s.id, vec![s.id.0 as f64])).collect();
        let g = build_graph(&sites[0], &sites, &features, &GraphConfig::default()).unwrap();
        assert_eq!(g.affinities.nodes(), 11);
        assert_eq!(g.affinities.depth(), 3);
        assert_eq!(g.node_features.shape(), &[11, 1]);
        for s in g.affinities.slices() {
            assert!(s.data().iter().all(|&v| (v - 1.0 / 11.0).abs() < 1e-12));
        }
    }

    #[test]
    fn graph_dump_layout() {
        let s = AffinityStack::new(vec![DenseArray::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()], true).unwrap();
        let mut buf = Vec::new();
        s.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("2 1\n0 0 0 0.5\n"));
        assert_eq!(text.lines().count(), 5);
    }

    fn positive_matrix(n: usize) -> impl Strategy<Value = DenseArray> {
        proptest::collection::vec(0.01f64..5.0, n * n)
            .prop_map(move |v| DenseArray::new(vec![n, n], v).unwrap())
    }

    proptest! {
        #[test]
        fn sinkhorn_doubly_stochastic_and_zero_preserving(
            m in positive_matrix(6),
            zeros in proptest::collection::vec((0usize..6, 0usize..6), 0..6),
        ) {
            let mut m = m;
            for (i, j) in zeros {
                if i != j {
                    m.set(i, j, 0.0);
                }
            }
            let out = sinkhorn_normalize(&m, 1e-6, 1000).unwrap();
            prop_assert!(stochastic_deviation(&out) < 1e-6);
            for (a, b) in m.data().iter().zip(out.data()) {
                prop_assert_eq!(*a == 0.0, *b == 0.0);
            }
        }

        #[test]
        fn sinkhorn_permutation_equivariant(m in positive_matrix(5), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = sinkhorn_normalize(&m.permute_square(&perm), 1e-10, 1000).unwrap();
            let b = sinkhorn_normalize(&m, 1e-10, 1000).unwrap().permute_square(&perm);
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn haversine_metric_properties(
            a in (-90.0f64..90.0, -180.0f64..180.0),
            b in (-90.0f64..90.0, -180.0f64..180.0),
        ) {
            let d = haversine(a, b);
            prop_assert!(d >= 0.0);
            prop_assert!(d <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
            prop_assert!((d - haversine(b, a)).abs() < 1e-9);
        }

        #[test]
        fn similarity_range(d in proptest::collection::vec(0.0f64..10.0, 9)) {
            let mut m = DenseArray::new(vec![3, 3], d).unwrap();
            for i in 0..3 {
                m.set(i, i, 0.0);
            }
            let s = gaussian_similarity(&standardize_distances(&m), 1.0).unwrap();
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((0..3).all(|i| s.at(i, i) == 1.0));
        }
    }
}
