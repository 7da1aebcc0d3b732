//! Metro network state, cost model, the satisfied-OD objective and the
//! inequity metric.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::city::City;
use crate::{Error, Result};

/// Construction costs in million RMB.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub station_cost: f64,
    pub interchange_cost: f64,
    pub per_km_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            station_cost: 300.0,
            interchange_cost: 600.0,
            per_km_cost: 500.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.station_cost > 0.0 && self.interchange_cost > 0.0 && self.per_km_cost > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("all costs must be > 0".into()))
        }
    }

    /// Marginal station cost at `node`: a plain station normally, or the
    /// upgrade increment when the region already hosts a station of
    /// another line (it becomes an interchange).
    pub fn node_cost(&self, already_station: bool) -> f64 {
        if already_station {
            self.interchange_cost - self.station_cost
        } else {
            self.station_cost
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineId(pub u32);

/// Which end of a line an extension attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LineEnd {
    Front = 0,
    Back = 1,
}

impl LineEnd {
    pub const BOTH: [LineEnd; 2] = [LineEnd::Front, LineEnd::Back];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// An ordered sequence of station region ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MetroLine {
    pub id: LineId,
    stations: Vec<usize>,
}

impl MetroLine {
    pub fn stations(&self) -> &[usize] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.stations.contains(&node)
    }

    /// Terminal station at the given end.
    pub fn terminal(&self, end: LineEnd) -> usize {
        match end {
            LineEnd::Front => self.stations[0],
            LineEnd::Back => *self.stations.last().unwrap(),
        }
    }

    /// Station adjacent to the terminal, if the line has one.
    pub fn subterminal(&self, end: LineEnd) -> Option<usize> {
        if self.stations.len() < 2 {
            return None;
        }
        Some(match end {
            LineEnd::Front => self.stations[1],
            LineEnd::Back => self.stations[self.stations.len() - 2],
        })
    }
}

/// The whole network: lines, remaining budget and remaining new-line quota.
#[derive(Debug, Clone, PartialEq)]
pub struct MetroState {
    lines: Vec<MetroLine>,
    pub budget_remaining: f64,
    pub new_lines_remaining: u32,
    next_line_id: u32,
}

impl MetroState {
    pub fn empty(budget: f64, new_lines: u32) -> Self {
        MetroState {
            lines: Vec::new(),
            budget_remaining: budget,
            new_lines_remaining: new_lines,
            next_line_id: 0,
        }
    }

    /// Builds a state from explicit lines. Lines must be nonempty, free of
    /// immediate repeats and of repeated stations within one line.
    pub fn from_lines(lines: Vec<Vec<usize>>, budget: f64, new_lines: u32) -> Result<Self> {
        let mut out = Vec::with_capacity(lines.len());
        for (idx, stations) in lines.into_iter().enumerate() {
            if stations.is_empty() {
                return Err(Error::InvalidArgument(format!("line {} is empty", idx)));
            }
            let unique: BTreeSet<usize> = stations.iter().copied().collect();
            if unique.len() != stations.len() {
                return Err(Error::InvalidArgument(format!(
                    "line {} repeats a station",
                    idx
                )));
            }
            out.push(MetroLine {
                id: LineId(idx as u32),
                stations,
            });
        }
        let next = out.len() as u32;
        Ok(MetroState {
            lines: out,
            budget_remaining: budget,
            new_lines_remaining: new_lines,
            next_line_id: next,
        })
    }

    pub fn lines(&self) -> &[MetroLine] {
        &self.lines
    }

    pub fn line(&self, id: LineId) -> Option<&MetroLine> {
        self.lines.iter().find(|l| l.id == id)
    }

    /// Every region hosting at least one station.
    pub fn stations(&self) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        for line in &self.lines {
            s.extend(line.stations.iter().copied());
        }
        s
    }

    pub fn is_station(&self, node: usize) -> bool {
        self.lines.iter().any(|l| l.contains(node))
    }

    /// Regions appearing on two or more lines.
    pub fn interchanges(&self) -> BTreeSet<usize> {
        let mut count: BTreeMap<usize, u32> = BTreeMap::new();
        for line in &self.lines {
            for &s in &line.stations {
                *count.entry(s).or_insert(0) += 1;
            }
        }
        count
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn station_count(&self) -> usize {
        self.stations().len()
    }

    /// Appends `node` at the given end of a line. Structural checks only;
    /// spacing and angle rules are the environment's responsibility.
    pub(crate) fn extend_line(&mut self, id: LineId, end: LineEnd, node: usize) -> Result<()> {
        let line = self
            .lines
            .iter_mut()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown line id {}", id.0)))?;
        if line.contains(node) {
            return Err(Error::InvalidAction(format!(
                "region {} is already on line {}",
                node, id.0
            )));
        }
        match end {
            LineEnd::Front => line.stations.insert(0, node),
            LineEnd::Back => line.stations.push(node),
        }
        Ok(())
    }

    /// Opens a new single-station line and returns its id.
    pub(crate) fn add_line(&mut self, node: usize) -> LineId {
        let id = LineId(self.next_line_id);
        self.next_line_id += 1;
        self.lines.push(MetroLine {
            id,
            stations: vec![node],
        });
        id
    }
}

/// Which station pairs the satisfied-OD sum ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OdPairs {
    /// All pairs connected through the network (detour-factor weighted).
    #[default]
    Connected,
    /// Only consecutive stations of each line.
    Adjacent,
}

/// All-pairs shortest-path distances over the metro graph. Edge weights are
/// Euclidean distances between consecutive stations; lines interconnect at
/// shared region ids. Unreachable pairs are infinite.
#[derive(Debug, Clone)]
pub struct PathTable {
    stations: Vec<usize>,
    index: BTreeMap<usize, usize>,
    dist: Vec<f64>,
}

impl PathTable {
    pub fn stations(&self) -> &[usize] {
        &self.stations
    }

    /// Network path distance between two station regions; infinity when
    /// disconnected, `None` when either region hosts no station.
    pub fn path_dis(&self, a: usize, b: usize) -> Option<f64> {
        let &ia = self.index.get(&a)?;
        let &ib = self.index.get(&b)?;
        Some(self.dist[ia * self.stations.len() + ib])
    }
}

/// Computes the all-pairs path-distance table with Dijkstra from every
/// station (the metro graph is small and sparse).
pub fn path_distances(metro: &MetroState, city: &City) -> PathTable {
    let stations: Vec<usize> = metro.stations().into_iter().collect();
    let n = stations.len();
    let index: BTreeMap<usize, usize> = stations
        .iter()
        .enumerate()
        .map(|(pos, &region)| (region, pos))
        .collect();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for line in metro.lines() {
        for w in line.stations().windows(2) {
            let (a, b) = (index[&w[0]], index[&w[1]]);
            let d = city.distance(w[0], w[1]);
            adj[a].push((b, d));
            adj[b].push((a, d));
        }
    }
    let mut dist = vec![f64::INFINITY; n * n];
    let mut heap: BTreeSet<(OrdF64, usize)> = BTreeSet::new();
    for src in 0..n {
        let row = &mut dist[src * n..(src + 1) * n];
        heap.clear();
        row[src] = 0.0;
        heap.insert((OrdF64(0.0), src));
        while let Some(&(OrdF64(d), u)) = heap.iter().next() {
            heap.remove(&(OrdF64(d), u));
            if d > row[u] {
                continue;
            }
            for &(v, w) in &adj[u] {
                let nd = d + w;
                if nd < row[v] {
                    heap.remove(&(OrdF64(row[v]), v));
                    row[v] = nd;
                    heap.insert((OrdF64(nd), v));
                }
            }
        }
    }
    PathTable {
        stations,
        index,
        dist,
    }
}

/// f64 wrapper with total order for use as a priority-queue key; distances
/// here are always finite and non-NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.0.partial_cmp(&other.0).unwrap()
    }
}

/// Total satisfied OD flow: for every counted station pair, the symmetrized
/// flow weighted by the detour factor `EucDis / PathDis`. Pairs that are
/// unreachable or geometrically coincident contribute nothing.
pub fn satisfied_od(metro: &MetroState, city: &City, mode: OdPairs) -> f64 {
    let table = path_distances(metro, city);
    satisfied_od_with(metro, city, mode, &table)
}

/// Same as [`satisfied_od`] but reusing a precomputed path table.
pub fn satisfied_od_with(
    metro: &MetroState,
    city: &City,
    mode: OdPairs,
    table: &PathTable,
) -> f64 {
    let pairs: Vec<(usize, usize)> = match mode {
        OdPairs::Connected => {
            let st = table.stations();
            let mut v = Vec::new();
            for a in 0..st.len() {
                for b in (a + 1)..st.len() {
                    v.push((st[a], st[b]));
                }
            }
            v
        }
        OdPairs::Adjacent => {
            let mut set = BTreeSet::new();
            for line in metro.lines() {
                for w in line.stations().windows(2) {
                    let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
                    set.insert((a, b));
                }
            }
            set.into_iter().collect()
        }
    };
    let mut total = 0.0;
    for (a, b) in pairs {
        let euc = city.distance(a, b);
        if euc <= 0.0 {
            continue;
        }
        let path = table.path_dis(a, b).unwrap_or(f64::INFINITY);
        if !path.is_finite() {
            continue;
        }
        total += euc / path * city.sym_flow(a, b);
    }
    total
}

/// Inequity: population variance (divide by k) of each region's Euclidean
/// distance to its nearest station. Errors when the network has no station.
pub fn inequity(metro: &MetroState, city: &City) -> Result<f64> {
    let stations: Vec<usize> = metro.stations().into_iter().collect();
    if stations.is_empty() {
        return Err(Error::InvalidState(
            "inequity needs at least one station".into(),
        ));
    }
    let k = city.len();
    let mut dists = Vec::with_capacity(k);
    for i in 0..k {
        let d = stations
            .iter()
            .map(|&s| city.distance(i, s))
            .fold(f64::INFINITY, f64::min);
        dists.push(d);
    }
    let mean = dists.iter().sum::<f64>() / k as f64;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / k as f64;
    Ok(var)
}

/// Minimal cost of appending `node` to line `line_id` (cheaper of its two
/// ends): marginal station or interchange-upgrade cost plus track cost for
/// the new segment. Pure arithmetic; feasibility is not checked.
pub fn extension_cost(
    metro: &MetroState,
    line_id: LineId,
    node: usize,
    city: &City,
    cost: &CostModel,
) -> Result<f64> {
    let line = metro
        .line(line_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown line id {}", line_id.0)))?;
    let mut best = f64::INFINITY;
    for end in LineEnd::BOTH {
        if line.len() == 1 && end == LineEnd::Front {
            continue; // both ends coincide
        }
        best = best.min(extension_cost_at(metro, line, end, node, city, cost));
    }
    Ok(best)
}

/// Cost of appending `node` at one specific end of `line`.
pub(crate) fn extension_cost_at(
    metro: &MetroState,
    line: &MetroLine,
    end: LineEnd,
    node: usize,
    city: &City,
    cost: &CostModel,
) -> f64 {
    let terminal = line.terminal(end);
    let station = cost.node_cost(metro.is_station(node));
    station + cost.per_km_cost * city.distance(terminal, node)
}

/// Cost of opening a new line at `node`: the first station carries no
/// segment, so it is the marginal station (or upgrade) cost alone.
pub fn new_line_cost(metro: &MetroState, node: usize, cost: &CostModel) -> f64 {
    cost.node_cost(metro.is_station(node))
}
