//! Heterogeneous region graph (spatial + flow edges) and per-node features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::city::City;
use crate::metro::MetroState;
use crate::{Error, Result};

/// Two undirected edge relations over the same region nodes: spatial
/// contiguity (`0 < dist <= t1`) and strong OD association
/// (`F_ij + F_ji >= t2`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    k: usize,
    pub t1: f64,
    pub t2: f64,
    spatial_pairs: Vec<(usize, usize)>,
    flow_pairs: Vec<(usize, usize)>,
    spatial_adj: Vec<Vec<usize>>,
    flow_adj: Vec<Vec<usize>>,
}

impl HeteroGraph {
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    /// Unordered spatial edges, each once with `i < j`.
    pub fn spatial_pairs(&self) -> &[(usize, usize)] {
        &self.spatial_pairs
    }

    pub fn flow_pairs(&self) -> &[(usize, usize)] {
        &self.flow_pairs
    }

    pub fn spatial_neighbors(&self, i: usize) -> &[usize] {
        &self.spatial_adj[i]
    }

    pub fn flow_neighbors(&self, i: usize) -> &[usize] {
        &self.flow_adj[i]
    }

    pub fn has_spatial_edge(&self, i: usize, j: usize) -> bool {
        self.spatial_adj[i].binary_search(&j).is_ok()
    }

    pub fn has_flow_edge(&self, i: usize, j: usize) -> bool {
        self.flow_adj[i].binary_search(&j).is_ok()
    }

    /// Directed (dst, src) list over spatial edges, both orientations,
    /// ready for segment-sum aggregation.
    pub fn spatial_directed(&self) -> Vec<(usize, usize)> {
        both_directions(&self.spatial_pairs)
    }

    pub fn flow_directed(&self) -> Vec<(usize, usize)> {
        both_directions(&self.flow_pairs)
    }
}

fn both_directions(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for &(i, j) in pairs {
        out.push((i, j));
        out.push((j, i));
    }
    out
}

/// Builds the two edge sets from thresholds `t1` (km, spatial) and `t2`
/// (trips/day, on the symmetrized flow, inclusive).
pub fn build_graph(city: &City, t1: f64, t2: f64) -> Result<HeteroGraph> {
    if !(t1 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spatial threshold t1 must be > 0, got {}",
            t1
        )));
    }
    if !(t2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "flow threshold t2 must be >= 0, got {}",
            t2
        )));
    }
    let k = city.len();
    let mut spatial_pairs = Vec::new();
    let mut flow_pairs = Vec::new();
    let mut spatial_adj = vec![Vec::new(); k];
    let mut flow_adj = vec![Vec::new(); k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = city.distance(i, j);
            if d > 0.0 && d <= t1 {
                spatial_pairs.push((i, j));
                spatial_adj[i].push(j);
                spatial_adj[j].push(i);
            }
            if city.sym_flow(i, j) >= t2 {
                flow_pairs.push((i, j));
                flow_adj[i].push(j);
                flow_adj[j].push(i);
            }
        }
    }
    // Adjacency lists are built in ascending order already; keep that as an
    // invariant for binary_search.
    Ok(HeteroGraph {
        k,
        t1,
        t2,
        spatial_pairs,
        flow_pairs,
        spatial_adj,
        flow_adj,
    })
}

/// Default flow threshold: the 90th percentile (nearest rank on the sorted
/// list) of nonzero symmetrized flows, or 0 when every flow is zero.
pub fn default_flow_threshold(city: &City) -> f64 {
    let mut vals = Vec::new();
    let k = city.len();
    for i in 0..k {
        for j in (i + 1)..k {
            let f = city.sym_flow(i, j);
            if f > 0.0 {
                vals.push(f);
            }
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = libm::round(0.9 * (vals.len() - 1) as f64) as usize;
    vals[idx]
}

/// Per-region input features, row-major, every column min-max normalized
/// to `[0, 1]` (constant columns map to 0).
///
/// Column layout: `[FD1, FD2, FD3, FA1, FA2 x P, FA4, FA5, FA6]` where
/// FD1 = total access flow, FD2 = flow to spatial neighbors, FD3 = flow to
/// station regions, FA1 = population, FA2 = POI counts, FA4/FA5 = spatial
/// and flow degree, FA6 = distance to the nearest station.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    k: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    /// Zero-row placeholder.
    pub fn empty() -> Self {
        FeatureMatrix {
            k: 0,
            dim: 0,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.dim + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column index of FD3 (flow towards current stations).
    pub const COL_FD3: usize = 2;

    /// Column index of FA6 (distance to nearest station); POI count needed
    /// because FA2 occupies a variable span.
    pub fn col_fa6(poi_categories: usize) -> usize {
        6 + poi_categories
    }
}

/// Feature vector width for a given POI category count.
pub fn feature_dim(poi_categories: usize) -> usize {
    7 + poi_categories
}

/// Computes the raw feature matrix for the current metro state and min-max
/// normalizes each column. FD3 and FA6 are the only columns that depend on
/// the metro state; with no stations both are zero.
pub fn node_features(city: &City, graph: &HeteroGraph, metro: &MetroState) -> FeatureMatrix {
    let k = city.len();
    let p = city.region(0).poi.len();
    let dim = feature_dim(p);
    let stations: Vec<usize> = metro.stations().into_iter().collect();
    let mut data = vec![0.0; k * dim];
    for i in 0..k {
        let row = &mut data[i * dim..(i + 1) * dim];
        let mut fd1 = 0.0;
        for j in 0..k {
            if j != i {
                fd1 += city.sym_flow(i, j);
            }
        }
        let fd2: f64 = graph
            .spatial_neighbors(i)
            .iter()
            .map(|&j| city.sym_flow(i, j))
            .sum();
        let fd3: f64 = stations
            .iter()
            .filter(|&&s| s != i)
            .map(|&s| city.sym_flow(i, s))
            .sum();
        let fa6 = if stations.is_empty() {
            0.0
        } else {
            stations
                .iter()
                .map(|&s| city.distance(i, s))
                .fold(f64::INFINITY, f64::min)
        };
        row[0] = fd1;
        row[1] = fd2;
        row[2] = fd3;
        row[3] = city.region(i).population;
        row[4..4 + p].copy_from_slice(&city.region(i).poi);
        row[4 + p] = graph.spatial_neighbors(i).len() as f64;
        row[5 + p] = graph.flow_neighbors(i).len() as f64;
        row[6 + p] = fa6;
    }
    // Min-max per column.
    for c in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..k {
            let v = data[i * dim + c];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for i in 0..k {
            let v = &mut data[i * dim + c];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
    FeatureMatrix { k, dim, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::city::{generate_city, GenParams, Region};
    use crate::metro::MetroState;
    use alloc::vec;
    use proptest::prelude::*;

    fn line_city() -> City {
        // Three regions on a line at x = 0, 1, 2.
        let regions = (0..3)
            .map(|i| Region {
                id: i,
                x: i as f64,
                y: 0.0,
                population: 100.0 * (i + 1) as f64,
                poi: vec![1.0],
            })
            .collect();
        let mut flows = vec![0.0; 9];
        flows[1] = 10.0; // 0 -> 1
        flows[5] = 4.0; // 1 -> 2
        flows[2] = 6.0; // 0 -> 2
        City::new(regions, flows).unwrap()
    }

    #[test]
    fn spatial_edge_within_threshold() {
        let city = line_city();
        let g = build_graph(&city, 2.0, 0.5).unwrap();
        assert!(g.has_spatial_edge(0, 1));
        assert!(g.has_spatial_edge(0, 2)); // distance exactly 2.0, inclusive
        assert!(g.has_spatial_edge(1, 0));
    }

    #[test]
    fn flow_edge_threshold_is_inclusive() {
        let city = line_city();
        // Symmetrized flow 0<->1 is exactly 10.
        let g = build_graph(&city, 0.5, 10.0).unwrap();
        assert!(g.has_flow_edge(0, 1));
        assert!(!g.has_flow_edge(1, 2));
    }

    #[test]
    fn tiny_t1_scrubs_spatial_edges() {
        let city = generate_city(100, 7, &GenParams::default()).unwrap();
        let g = build_graph(&city, 0.0001, 0.0).unwrap();
        // Oracle: brute-force distance scan.
        let mut expected = 0;
        for i in 0..city.len() {
            for j in (i + 1)..city.len() {
                let d = city.distance(i, j);
                if d > 0.0 && d <= 0.0001 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 0);
        assert_eq!(g.spatial_pairs().len(), expected);
    }

    #[test]
    fn features_empty_metro_zeroes_fd3() {
        let city = line_city();
        let g = build_graph(&city, 1.5, 5.0).unwrap();
        let f = node_features(&city, &g, &MetroState::empty(1000.0, 1));
        for i in 0..3 {
            assert_eq!(f.get(i, FeatureMatrix::COL_FD3), 0.0);
        }
    }

    #[test]
    fn features_isolated_node_zero_degrees() {
        // Region 3 far away and with no flow.
        let regions = vec![
            Region { id: 0, x: 0.0, y: 0.0, population: 10.0, poi: vec![0.0] },
            Region { id: 1, x: 1.0, y: 0.0, population: 20.0, poi: vec![0.0] },
            Region { id: 2, x: 2.0, y: 0.0, population: 30.0, poi: vec![0.0] },
            Region { id: 3, x: 50.0, y: 50.0, population: 40.0, poi: vec![0.0] },
        ];
        let mut flows = vec![0.0; 16];
        flows[1] = 8.0;
        let city = City::new(regions, flows).unwrap();
        let g = build_graph(&city, 1.5, 1.0).unwrap();
        let f = node_features(&city, &g, &MetroState::empty(1000.0, 1));
        let p = 1;
        // Raw FD2, FA4, FA5 of the isolated node are zero; after min-max
        // normalization a zero raw value stays at the column minimum 0.
        assert_eq!(f.get(3, 1), 0.0);
        assert_eq!(f.get(3, 4 + p), 0.0);
        assert_eq!(f.get(3, 5 + p), 0.0);
    }

    #[test]
    fn fa6_is_distance_to_nearest_station() {
        let city = line_city();
        let g = build_graph(&city, 1.5, 5.0).unwrap();
        let metro = MetroState::from_lines(vec![vec![1]], 1000.0, 1).unwrap();
        let f = node_features(&city, &g, &metro);
        let col = FeatureMatrix::col_fa6(1);
        // Raw distances: 1.0, 0.0, 1.0 -> normalized: 1, 0, 1.
        assert_eq!(f.get(0, col), 1.0);
        assert_eq!(f.get(1, col), 0.0);
        assert_eq!(f.get(2, col), 1.0);
    }

    #[test]
    fn metro_state_changes_only_fd3_and_fa6() {
        let city = generate_city(20, 4, &GenParams::default()).unwrap();
        let g = build_graph(&city, 4.0, default_flow_threshold(&city)).unwrap();
        let a = node_features(&city, &g, &MetroState::from_lines(vec![vec![0, 1]], 1e4, 2).unwrap());
        let b = node_features(&city, &g, &MetroState::from_lines(vec![vec![5, 6]], 1e4, 2).unwrap());
        let p = city.region(0).poi.len();
        let fa6 = FeatureMatrix::col_fa6(p);
        for i in 0..city.len() {
            for c in 0..f_dim(p) {
                if c == FeatureMatrix::COL_FD3 || c == fa6 {
                    continue;
                }
                assert_eq!(a.get(i, c), b.get(i, c), "column {} changed", c);
            }
        }
    }

    fn f_dim(p: usize) -> usize {
        feature_dim(p)
    }

    #[test]
    fn all_features_in_unit_interval() {
        let city = generate_city(30, 2, &GenParams::default()).unwrap();
        let g = build_graph(&city, 3.0, default_flow_threshold(&city)).unwrap();
        let f = node_features(&city, &g, &MetroState::from_lines(vec![vec![0, 1, 2]], 1e4, 2).unwrap());
        for v in f.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    proptest! {
        #[test]
        fn edges_symmetric_and_monotone(seed in 0u64..60, t1 in 0.5f64..6.0, t2 in 0.0f64..2000.0) {
            let city = generate_city(16, seed, &GenParams::default()).unwrap();
            let g = build_graph(&city, t1, t2).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    prop_assert_eq!(g.has_spatial_edge(i, j), g.has_spatial_edge(j, i));
                    prop_assert_eq!(g.has_flow_edge(i, j), g.has_flow_edge(j, i));
                }
            }
            // Raising thresholds never adds edges.
            let g2 = build_graph(&city, t1 * 1.5, t2 * 1.5 + 1.0).unwrap();
            prop_assert!(g2.spatial_pairs().len() >= g.spatial_pairs().len());
            for &(i, j) in g.flow_pairs() {
                if city.sym_flow(i, j) >= t2 * 1.5 + 1.0 {
                    prop_assert!(g2.has_flow_edge(i, j));
                }
            }
            for &(i, j) in g2.flow_pairs() {
                prop_assert!(g.has_flow_edge(i, j));
            }
        }
    }
}
