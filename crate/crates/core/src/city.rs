//! City data: regions, OD flows, the synthetic generator and the
//! small-region merge preprocessing step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{euc_dis, Error, Result};

/// One urban region: a planar centroid with demographic attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    /// Planar coordinates in km.
    pub x: f64,
    pub y: f64,
    pub population: f64,
    /// Point-of-interest counts, one entry per category.
    pub poi: Vec<f64>,
}

/// Immutable region set plus a dense k x k OD flow matrix (trips/day).
#[derive(Debug, Clone, PartialEq)]
pub struct City {
    regions: Vec<Region>,
    /// Row-major k x k matrix; diagonal is zero.
    flows: Vec<f64>,
    k: usize,
    /// Optional metro lines shipped with the city file (region id sequences).
    initial_lines: Vec<Vec<usize>>,
}

impl City {
    /// Validates the invariants and builds a city.
    ///
    /// Region ids must be dense `0..k-1` in order, coordinates finite,
    /// populations and POI counts nonnegative, POI vectors equal length,
    /// and `flows` a k x k nonnegative finite matrix with zero diagonal.
    pub fn new(regions: Vec<Region>, flows: Vec<f64>) -> Result<Self> {
        let k = regions.len();
        if k == 0 {
            return Err(Error::Validation("city has no regions".into()));
        }
        if flows.len() != k * k {
            return Err(Error::Validation(format!(
                "flow matrix has {} entries, expected {}x{}",
                flows.len(),
                k,
                k
            )));
        }
        let poi_len = regions[0].poi.len();
        for (i, r) in regions.iter().enumerate() {
            if r.id != i {
                return Err(Error::Validation(format!(
                    "region ids must be dense 0..{}, found id {} at position {}",
                    k - 1,
                    r.id,
                    i
                )));
            }
            if !r.x.is_finite() || !r.y.is_finite() {
                return Err(Error::Validation(format!(
                    "region {} has non-finite coordinates",
                    i
                )));
            }
            if r.population < 0.0 || !r.population.is_finite() {
                return Err(Error::Validation(format!(
                    "region {} has invalid population {}",
                    i, r.population
                )));
            }
            if r.poi.len() != poi_len {
                return Err(Error::Validation(format!(
                    "region {} has {} POI categories, expected {}",
                    i,
                    r.poi.len(),
                    poi_len
                )));
            }
            if r.poi.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(Error::Validation(format!(
                    "region {} has a negative or non-finite POI count",
                    i
                )));
            }
        }
        for i in 0..k {
            for j in 0..k {
                let f = flows[i * k + j];
                if f < 0.0 || !f.is_finite() {
                    return Err(Error::Validation(format!(
                        "flow[{},{}] = {} must be finite and >= 0",
                        i, j, f
                    )));
                }
                if i == j && f != 0.0 {
                    return Err(Error::Validation(format!(
                        "flow diagonal must be zero, flow[{},{}] = {}",
                        i, j, f
                    )));
                }
            }
        }
        Ok(City {
            regions,
            flows,
            k,
            initial_lines: Vec::new(),
        })
    }

    /// Attaches user-supplied initial metro lines (validated structurally:
    /// known region ids, no immediate repeats, no station shared between
    /// lines, each line nonempty).
    pub fn with_initial_lines(mut self, lines: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; self.k];
        for (li, line) in lines.iter().enumerate() {
            if line.is_empty() {
                return Err(Error::Validation(format!("initial line {} is empty", li)));
            }
            for w in line.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::Validation(format!(
                        "initial line {} repeats region {} consecutively",
                        li, w[0]
                    )));
                }
            }
            for &s in line {
                if s >= self.k {
                    return Err(Error::Validation(format!(
                        "initial line {} references unknown region {}",
                        li, s
                    )));
                }
                if seen[s] {
                    return Err(Error::Validation(format!(
                        "region {} appears on more than one initial line",
                        s
                    )));
                }
                seen[s] = true;
            }
        }
        self.initial_lines = lines;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, i: usize) -> &Region {
        &self.regions[i]
    }

    pub fn initial_lines(&self) -> &[Vec<usize>] {
        &self.initial_lines
    }

    /// Directed flow i -> j.
    #[inline]
    pub fn flow(&self, i: usize, j: usize) -> f64 {
        self.flows[i * self.k + j]
    }

    /// Symmetrized flow `F_ij + F_ji`; direction of the raw matrix never
    /// matters anywhere else in the crate.
    #[inline]
    pub fn sym_flow(&self, i: usize, j: usize) -> f64 {
        self.flows[i * self.k + j] + self.flows[j * self.k + i]
    }

    /// Total symmetrized flow over unordered region pairs.
    pub fn total_flow(&self) -> f64 {
        let mut t = 0.0;
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                t += self.sym_flow(i, j);
            }
        }
        t
    }

    pub fn total_population(&self) -> f64 {
        self.regions.iter().map(|r| r.population).sum()
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = &self.regions[i];
        let b = &self.regions[j];
        euc_dis(a.x, a.y, b.x, b.y)
    }

    /// Axis-aligned bounding box of all region centroids
    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for r in &self.regions {
            min_x = min_x.min(r.x);
            min_y = min_y.min(r.y);
            max_x = max_x.max(r.x);
            max_y = max_y.max(r.y);
        }
        (min_x, min_y, max_x, max_y)
    }
}

/// Settings for the synthetic city generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Number of radial Gaussian population clusters.
    pub clusters: usize,
    /// Distance exponent of the gravity model.
    pub gravity_exponent: f64,
    /// Side length of the square the regions are placed in (km).
    pub side_km: f64,
    /// POI categories per region.
    pub poi_categories: usize,
    /// Gravity model scale constant c in `c * pop_i * pop_j / dist^gamma`.
    pub gravity_scale: f64,
    /// Peak population of a cluster center.
    pub base_population: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            clusters: 3,
            gravity_exponent: 2.0,
            side_km: 20.0,
            poi_categories: 4,
            gravity_scale: 1e-4,
            base_population: 40_000.0,
        }
    }
}

/// Generates a synthetic city: jittered-grid region placement, population
/// from a mixture of radial Gaussians, OD flows from a gravity model
/// `F_ij = round(c * pop_i * pop_j / max(dist, 0.5)^gamma)` mirrored so the
/// matrix is symmetric. Deterministic for fixed `(k, seed, params)`.
pub fn generate_city(k: usize, seed: u64, params: &GenParams) -> Result<City> {
    if k < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 regions, got {}",
            k
        )));
    }
    if params.clusters == 0 || !(params.side_km > 0.0) || !(params.gravity_exponent > 0.0) {
        return Err(Error::InvalidArgument(
            "generator parameters must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = params.side_km;
    let grid = {
        let mut g = 1usize;
        while g * g < k {
            g += 1;
        }
        g
    };
    let cell = side / grid as f64;

    // Region centroids: one per grid cell, jittered inside the inner 80%
    // so no two regions coincide.
    let mut xs = Vec::with_capacity(k);
    let mut ys = Vec::with_capacity(k);
    for idx in 0..k {
        let row = idx / grid;
        let col = idx % grid;
        let jx: f64 = rng.gen();
        let jy: f64 = rng.gen();
        xs.push((col as f64 + 0.1 + 0.8 * jx) * cell);
        ys.push((row as f64 + 0.1 + 0.8 * jy) * cell);
    }

    // Population clusters.
    let mut centers = Vec::with_capacity(params.clusters);
    for _ in 0..params.clusters {
        let cx: f64 = rng.gen::<f64>() * side;
        let cy: f64 = rng.gen::<f64>() * side;
        let sigma = side * (0.12 + 0.18 * rng.gen::<f64>());
        let weight = 0.4 + 0.6 * rng.gen::<f64>();
        centers.push((cx, cy, sigma, weight));
    }

    let mut regions = Vec::with_capacity(k);
    for i in 0..k {
        let mut density = 0.0;
        for &(cx, cy, sigma, w) in &centers {
            let d = euc_dis(xs[i], ys[i], cx, cy);
            density += w * libm::exp(-d * d / (2.0 * sigma * sigma));
        }
        let population = libm::round(params.base_population * density).max(50.0);
        let mut poi = Vec::with_capacity(params.poi_categories);
        for _ in 0..params.poi_categories {
            let u: f64 = rng.gen();
            poi.push(libm::round(population * u / 500.0));
        }
        regions.push(Region {
            id: i,
            x: xs[i],
            y: ys[i],
            population,
            poi,
        });
    }

    let mut flows = vec![0.0; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = euc_dis(xs[i], ys[i], xs[j], ys[j]).max(0.5);
            let f = libm::round(
                params.gravity_scale * regions[i].population * regions[j].population
                    / libm::pow(d, params.gravity_exponent),
            );
            flows[i * k + j] = f;
            flows[j * k + i] = f;
        }
    }

    City::new(regions, flows)
}

/// Merges small, geographically close regions into their nearest neighbor.
///
/// A region is a merge candidate when its Voronoi cell area (clipped to the
/// bounding box of all centroids) is below `area_threshold` and its nearest
/// neighbor is closer than `dist_threshold`. Candidates are absorbed one at
/// a time (smallest cell first), populations and POIs summed, flow rows and
/// columns aggregated, and ids re-densified. The absorbed region's flows to
/// its target collapse onto the (zeroed) diagonal.
pub fn merge_small_regions(
    city: &City,
    area_threshold: f64,
    dist_threshold: f64,
) -> Result<City> {
    let mut regions = city.regions.clone();
    let mut flows = city.flows.clone();

    loop {
        let k = regions.len();
        let areas = voronoi_areas(&regions);
        // Nearest neighbor per region.
        let mut nearest = vec![(f64::INFINITY, usize::MAX); k];
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let d = euc_dis(regions[i].x, regions[i].y, regions[j].x, regions[j].y);
                if d < nearest[i].0 {
                    nearest[i] = (d, j);
                }
            }
        }
        let mut victim: Option<usize> = None;
        for i in 0..k {
            if areas[i] < area_threshold && nearest[i].0 < dist_threshold {
                let better = match victim {
                    None => true,
                    Some(v) => areas[i] < areas[v],
                };
                if better {
                    victim = Some(i);
                }
            }
        }
        let Some(v) = victim else {
            // Merged cities drop any attached initial lines; ids moved.
            return City::new(regions, flows);
        };
        if k <= 2 {
            return Err(Error::InvalidArgument(
                "merge would leave fewer than 2 regions".into(),
            ));
        }
        let target = nearest[v].1;

        // Fold the victim's attributes and flows into the target.
        regions[target].population += regions[v].population;
        let (tp, vp) = (regions[target].poi.len(), regions[v].poi.len());
        for c in 0..tp.min(vp) {
            let add = regions[v].poi[c];
            regions[target].poi[c] += add;
        }
        for j in 0..k {
            let add = flows[v * k + j];
            flows[target * k + j] += add;
            let add = flows[j * k + v];
            flows[j * k + target] += add;
        }
        flows[target * k + target] = 0.0;

        // Drop row/column v and the region itself; re-densify ids.
        let mut next_flows = Vec::with_capacity((k - 1) * (k - 1));
        for i in 0..k {
            if i == v {
                continue;
            }
            for j in 0..k {
                if j == v {
                    continue;
                }
                next_flows.push(flows[i * k + j]);
            }
        }
        regions.remove(v);
        for (i, r) in regions.iter_mut().enumerate() {
            r.id = i;
        }
        flows = next_flows;
    }
}

/// Exact Voronoi cell areas clipped to the bounding box of the centroids,
/// by half-plane clipping. Coincident points (distance < 1e-9) assign the
/// shared cell to the lower id; the higher id gets area 0.
fn voronoi_areas(regions: &[Region]) -> Vec<f64> {
    let k = regions.len();
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for r in regions {
        min_x = min_x.min(r.x);
        min_y = min_y.min(r.y);
        max_x = max_x.max(r.x);
        max_y = max_y.max(r.y);
    }
    let bbox = vec![
        (min_x, min_y),
        (max_x, min_y),
        (max_x, max_y),
        (min_x, max_y),
    ];
    let mut areas = Vec::with_capacity(k);
    'outer: for i in 0..k {
        let (ix, iy) = (regions[i].x, regions[i].y);
        let mut cell = bbox.clone();
        for j in 0..k {
            if i == j {
                continue;
            }
            let (jx, jy) = (regions[j].x, regions[j].y);
            let d = euc_dis(ix, iy, jx, jy);
            if d < 1e-9 {
                if j < i {
                    areas.push(0.0);
                    continue 'outer;
                }
                continue;
            }
            // Keep the half-plane of points at least as close to i as to j:
            // (p - mid) . (j - i) <= 0.
            let (mx, my) = ((ix + jx) / 2.0, (iy + jy) / 2.0);
            let (nx, ny) = (jx - ix, jy - iy);
            cell = clip_half_plane(&cell, mx, my, nx, ny);
            if cell.len() < 3 {
                break;
            }
        }
        areas.push(polygon_area(&cell));
    }
    areas
}

/// Sutherland-Hodgman clip of a convex polygon against
/// `(p - m) . n <= 0`.
fn clip_half_plane(poly: &[(f64, f64)], mx: f64, my: f64, nx: f64, ny: f64) -> Vec<(f64, f64)> {
    let side = |x: f64, y: f64| (x - mx) * nx + (y - my) * ny;
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for a in 0..n {
        let b = (a + 1) % n;
        let (ax, ay) = poly[a];
        let (bx, by) = poly[b];
        let sa = side(ax, ay);
        let sb = side(bx, by);
        if sa <= 0.0 {
            out.push((ax, ay));
        }
        if (sa < 0.0 && sb > 0.0) || (sa > 0.0 && sb < 0.0) {
            let t = sa / (sa - sb);
            out.push((ax + t * (bx - ax), ay + t * (by - ay)));
        }
    }
    out
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for a in 0..poly.len() {
        let b = (a + 1) % poly.len();
        s += poly[a].0 * poly[b].1 - poly[b].0 * poly[a].1;
    }
    (s / 2.0).abs()
}

/// Parse helper shared with the file loader: flow triples into a dense
/// matrix, rejecting duplicates and out-of-range ids.
pub fn flows_from_triples(k: usize, triples: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
    let mut flows = vec![0.0; k * k];
    let mut seen = vec![false; k * k];
    for &(i, j, f) in triples {
        if i >= k || j >= k {
            return Err(Error::Validation(format!(
                "flow triple references region ({}, {}) outside 0..{}",
                i, j, k
            )));
        }
        if i == j {
            if f != 0.0 {
                return Err(Error::Validation(format!(
                    "flow triple [{}, {}, {}] on the diagonal must be zero",
                    i, j, f
                )));
            }
            continue;
        }
        if seen[i * k + j] {
            return Err(Error::Validation(format!(
                "duplicate flow triple for pair ({}, {})",
                i, j
            )));
        }
        seen[i * k + j] = true;
        flows[i * k + j] = f;
    }
    Ok(flows)
}
