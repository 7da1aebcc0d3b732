//! The expansion MDP: feasible-action sets, action mask with
//! extension-priority resolution, transition and reward, episode lifecycle,
//! and an exhaustive search oracle for small instances.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::city::City;
use crate::metro::{
    extension_cost_at, inequity, new_line_cost, satisfied_od, CostModel, LineEnd, LineId,
    MetroState, OdPairs,
};
use crate::{pow2_normalizer, Error, Result};

/// Environment settings. Budgets and costs are million RMB, distances km.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Expansion budget B.
    pub budget: f64,
    /// Number of initial lines to synthesize (ignored when the city file
    /// supplies its own lines).
    pub initial_lines: u32,
    /// New-line quota ML.
    pub max_new_lines: u32,
    /// Target station count of each synthesized initial line.
    pub init_line_len: usize,
    /// Station spacing bounds.
    pub t3: f64,
    pub t4: f64,
    /// Minimal angle at a terminal between the new segment and the last
    /// existing segment (degrees).
    pub angle_min_deg: f64,
    /// Reward weights for satisfied OD and equity; must sum to 1.
    pub alpha: f64,
    pub beta: f64,
    /// Restrict every action to regions with no existing station
    /// (disables interchange upgrades entirely).
    pub strict_appendix: bool,
    pub od_pairs: OdPairs,
    /// Require new-line starts within `t4` of some existing station; when
    /// false only the `t3` floor applies.
    pub new_start_within_t4: bool,
    pub cost: CostModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            budget: 50_000.0,
            initial_lines: 4,
            max_new_lines: 3,
            init_line_len: 8,
            t3: 0.5,
            t4: 3.0,
            angle_min_deg: 90.0,
            alpha: 1.0,
            beta: 0.0,
            strict_appendix: false,
            od_pairs: OdPairs::Connected,
            new_start_within_t4: true,
            cost: CostModel::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0) {
            return Err(Error::Config(format!("budget must be > 0, got {}", self.budget)));
        }
        if self.initial_lines < 1 {
            return Err(Error::Config("initial_lines must be >= 1".into()));
        }
        if !(self.t3 > 0.0 && self.t3 < self.t4) {
            return Err(Error::Config(format!(
                "need 0 < t3 < t4, got t3 = {}, t4 = {}",
                self.t3, self.t4
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "reward weights must sum to 1, got alpha + beta = {}",
                self.alpha + self.beta
            )));
        }
        if !(self.angle_min_deg > 0.0 && self.angle_min_deg <= 180.0) {
            return Err(Error::Config("angle_min_deg must be in (0, 180]".into()));
        }
        self.cost.validate()
    }
}

/// How a masked-in node will be executed when selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Extend { line: LineId, end: LineEnd },
    NewLine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedAction {
    pub node: usize,
    pub mode: ActionMode,
    pub cost: f64,
}

/// Boolean mask over regions plus the per-node execution plan. Extension is
/// preferred over a new line; among feasible extensions the least costly
/// wins, ties broken by lowest line id then lowest end index.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMask {
    pub mask: Vec<bool>,
    pub resolved: BTreeMap<usize, ResolvedAction>,
}

impl ActionMask {
    pub fn feasible_count(&self) -> usize {
        self.resolved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolved.is_empty()
    }
}

/// True when the bend at `terminal` between the existing segment towards
/// `subterminal` and the new segment towards `node` stays open enough:
/// angle in `[min_deg, 180]`.
fn angle_ok(city: &City, node: usize, terminal: usize, subterminal: usize, min_deg: f64) -> bool {
    let t = city.region(terminal);
    let n = city.region(node);
    let s = city.region(subterminal);
    let (ux, uy) = (n.x - t.x, n.y - t.y);
    let (vx, vy) = (s.x - t.x, s.y - t.y);
    let nu = libm::sqrt(ux * ux + uy * uy);
    let nv = libm::sqrt(vx * vx + vy * vy);
    if nu == 0.0 || nv == 0.0 {
        // Degenerate geometry (coincident regions); no bend direction exists.
        return true;
    }
    let cos_theta = (ux * vx + uy * vy) / (nu * nv);
    let cos_min = libm::cos(min_deg.to_radians());
    cos_theta <= cos_min + 1e-12
}

/// All feasible extension triples `(node, line, end, cost)`: node not on
/// the line (not anywhere in strict mode), spacing within `[t3, t4]` of the
/// terminal, bend angle within `[angle_min, 180]` when a subterminal
/// exists, and cost within the remaining budget.
pub fn feasible_extensions(
    state: &MetroState,
    city: &City,
    cfg: &EnvConfig,
) -> Vec<(usize, LineId, LineEnd, f64)> {
    let k = city.len();
    let mut out = Vec::new();
    for line in state.lines() {
        for end in LineEnd::BOTH {
            if line.len() == 1 && end == LineEnd::Front {
                continue; // single-station lines have one distinct end
            }
            let terminal = line.terminal(end);
            let sub = line.subterminal(end);
            for node in 0..k {
                if line.contains(node) {
                    continue;
                }
                if cfg.strict_appendix && state.is_station(node) {
                    continue;
                }
                let d = city.distance(node, terminal);
                if d < cfg.t3 || d > cfg.t4 {
                    continue;
                }
                if let Some(sub) = sub {
                    if !angle_ok(city, node, terminal, sub, cfg.angle_min_deg) {
                        continue;
                    }
                }
                let cost = extension_cost_at(state, line, end, node, city, &cfg.cost);
                if cost <= state.budget_remaining {
                    out.push((node, line.id, end, cost));
                }
            }
        }
    }
    out
}

/// All feasible new-line start nodes with their costs: at least `t3` from
/// every station (which excludes station regions themselves), within `t4`
/// of some station when `new_start_within_t4` is set, quota and budget
/// permitting.
pub fn feasible_new_starts(state: &MetroState, city: &City, cfg: &EnvConfig) -> Vec<(usize, f64)> {
    if state.new_lines_remaining == 0 {
        return Vec::new();
    }
    let stations: Vec<usize> = state.stations().into_iter().collect();
    let k = city.len();
    let mut out = Vec::new();
    for node in 0..k {
        if cfg.strict_appendix && state.is_station(node) {
            continue;
        }
        let mut min_d = f64::INFINITY;
        for &s in &stations {
            min_d = min_d.min(city.distance(node, s));
        }
        if min_d < cfg.t3 {
            continue;
        }
        if cfg.new_start_within_t4 && !(min_d <= cfg.t4) {
            continue;
        }
        let cost = new_line_cost(state, node, &cfg.cost);
        if cost <= state.budget_remaining {
            out.push((node, cost));
        }
    }
    out
}

/// Builds the action mask and the execution plan for every masked-in node.
pub fn action_mask(state: &MetroState, city: &City, cfg: &EnvConfig) -> ActionMask {
    let k = city.len();
    let mut resolved: BTreeMap<usize, ResolvedAction> = BTreeMap::new();
    for (node, line, end, cost) in feasible_extensions(state, city, cfg) {
        let better = match resolved.get(&node) {
            None => true,
            Some(prev) => match prev.mode {
                ActionMode::NewLine => true,
                ActionMode::Extend {
                    line: pl,
                    end: pe,
                } => {
                    cost < prev.cost
                        || (cost == prev.cost && (line, end.index()) < (pl, pe.index()))
                }
            },
        };
        if better {
            resolved.insert(
                node,
                ResolvedAction {
                    node,
                    mode: ActionMode::Extend { line, end },
                    cost,
                },
            );
        }
    }
    for (node, cost) in feasible_new_starts(state, city, cfg) {
        resolved.entry(node).or_insert(ResolvedAction {
            node,
            mode: ActionMode::NewLine,
            cost,
        });
    }
    let mut mask = vec![false; k];
    for &node in resolved.keys() {
        mask[node] = true;
    }
    ActionMask { mask, resolved }
}

/// Step result: the state snapshot after the action, the normalized reward,
/// the terminal flag, and raw accounting details.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: MetroState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub node: usize,
    pub mode: ActionMode,
    /// The line the station joined (the freshly opened one for new starts).
    pub line_id: LineId,
    pub cost: f64,
    pub delta_cod: f64,
    pub delta_ie: f64,
}

/// One expansion episode over a fixed city.
///
/// Rewards are `alpha * dCod / flow_norm + beta * -dIE / ie_norm` where the
/// normalizers are the total symmetrized flow and the initial inequity,
/// each rounded up to a power of two so that un-normalizing a reward is
/// bit-exact (`r * norm` recovers the raw delta).
#[derive(Debug, Clone)]
pub struct Env<'a> {
    city: &'a City,
    cfg: &'a EnvConfig,
    state: MetroState,
    cod: f64,
    ie: f64,
    cod0: f64,
    ie0: f64,
    flow_norm: f64,
    ie_norm: f64,
    spend: f64,
}

impl<'a> Env<'a> {
    /// Starts an episode: either adopts the city's supplied initial lines
    /// or synthesizes `cfg.initial_lines` deterministic greedy lines from
    /// the seed. Initial lines spend no episode budget.
    pub fn reset(city: &'a City, cfg: &'a EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let lines = if city.initial_lines().is_empty() {
            synthesize_initial_lines(city, cfg, seed)?
        } else {
            city.initial_lines().to_vec()
        };
        let state = MetroState::from_lines(lines, cfg.budget, cfg.max_new_lines)?;
        let cod = satisfied_od(&state, city, cfg.od_pairs);
        let ie = inequity(&state, city)?;
        Ok(Env {
            city,
            cfg,
            state,
            cod,
            ie,
            cod0: cod,
            ie0: ie,
            flow_norm: pow2_normalizer(city.total_flow()),
            ie_norm: pow2_normalizer(ie),
            spend: 0.0,
        })
    }

    pub fn city(&self) -> &'a City {
        self.city
    }

    pub fn config(&self) -> &'a EnvConfig {
        self.cfg
    }

    pub fn state(&self) -> &MetroState {
        &self.state
    }

    pub fn cod(&self) -> f64 {
        self.cod
    }

    pub fn ie(&self) -> f64 {
        self.ie
    }

    pub fn initial_cod(&self) -> f64 {
        self.cod0
    }

    pub fn initial_ie(&self) -> f64 {
        self.ie0
    }

    pub fn spend(&self) -> f64 {
        self.spend
    }

    /// Power-of-two normalizer applied to the OD term of the reward.
    pub fn flow_norm(&self) -> f64 {
        self.flow_norm
    }

    pub fn ie_norm(&self) -> f64 {
        self.ie_norm
    }

    pub fn action_mask(&self) -> ActionMask {
        action_mask(&self.state, self.city, self.cfg)
    }

    pub fn is_done(&self) -> bool {
        self.action_mask().is_empty()
    }

    /// Executes the resolved action for `node`. Selecting a masked-out node
    /// is an error, never a silent no-op.
    pub fn step(&mut self, node: usize) -> Result<StepOutcome> {
        let mask = self.action_mask();
        let Some(action) = mask.resolved.get(&node).copied() else {
            return Err(Error::InvalidAction(format!(
                "region {} is masked out in the current state",
                node
            )));
        };
        let line_id = match action.mode {
            ActionMode::Extend { line, end } => {
                self.state.extend_line(line, end, node)?;
                line
            }
            ActionMode::NewLine => {
                self.state.new_lines_remaining -= 1;
                self.state.add_line(node)
            }
        };
        self.state.budget_remaining -= action.cost;
        self.spend += action.cost;

        let cod_prev = self.cod;
        let ie_prev = self.ie;
        self.cod = satisfied_od(&self.state, self.city, self.cfg.od_pairs);
        self.ie = inequity(&self.state, self.city)?;
        let delta_cod = self.cod - cod_prev;
        let delta_ie = self.ie - ie_prev;
        let reward = self.cfg.alpha * (delta_cod / self.flow_norm)
            + self.cfg.beta * ((ie_prev - self.ie) / self.ie_norm);
        let done = self.action_mask().is_empty();
        Ok(StepOutcome {
            next_state: self.state.clone(),
            reward,
            done,
            info: StepInfo {
                node,
                mode: action.mode,
                line_id,
                cost: action.cost,
                delta_cod,
                delta_ie,
            },
        })
    }
}

/// Deterministic greedy synthesis of the initial network: starts are drawn
/// from the top-population quartile (seeded shuffle, keeping starts at
/// least `t4` apart, relaxing to `t3` only if needed), then each line grows
/// from its back end towards the unused region with the highest total
/// access flow under the spacing and angle rules, up to
/// `cfg.init_line_len` stations.
fn synthesize_initial_lines(city: &City, cfg: &EnvConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    let k = city.len();
    let il = cfg.initial_lines as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_pop: Vec<usize> = (0..k).collect();
    by_pop.sort_by(|&a, &b| {
        city.region(b)
            .population
            .partial_cmp(&city.region(a).population)
            .unwrap()
            .then(a.cmp(&b))
    });
    let pool_len = (k / 4).max(il).min(k);
    let mut pool: Vec<usize> = by_pop[..pool_len].to_vec();
    // Fisher-Yates with the seeded stream.
    for i in (1..pool.len()).rev() {
        let j = rng.gen_range(0..=i);
        pool.swap(i, j);
    }

    let mut starts: Vec<usize> = Vec::new();
    for min_sep in [cfg.t4, cfg.t3] {
        for &c in &pool {
            if starts.len() == il {
                break;
            }
            if starts.contains(&c) {
                continue;
            }
            if starts.iter().all(|&s| city.distance(s, c) >= min_sep) {
                starts.push(c);
            }
        }
    }
    if starts.len() < il {
        return Err(Error::Config(format!(
            "could not place {} initial line starts with spacing >= t3",
            il
        )));
    }

    // Total access flow FD1 guides the greedy growth.
    let fd1: Vec<f64> = (0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| city.sym_flow(i, j)).sum())
        .collect();

    let mut used = vec![false; k];
    for &s in &starts {
        used[s] = true;
    }
    let mut lines: Vec<Vec<usize>> = starts.iter().map(|&s| vec![s]).collect();
    // Round-robin growth: one station per line per round, back end first,
    // then front.
    loop {
        let mut progressed = false;
        for line in &mut lines {
            if line.len() >= cfg.init_line_len {
                continue;
            }
            let grown = grow_once(city, cfg, &fd1, &mut used, line, false)
                || grow_once(city, cfg, &fd1, &mut used, line, true);
            progressed |= grown;
        }
        if !progressed || lines.iter().all(|l| l.len() >= cfg.init_line_len) {
            break;
        }
    }
    for line in &lines {
        if line.len() < 2 {
            return Err(Error::Config(
                "initial line synthesis could not grow a line to 2 stations".into(),
            ));
        }
    }
    Ok(lines)
}

/// Appends (or prepends) the unused region with the highest total access
/// flow that satisfies the spacing and angle rules; returns false when no
/// candidate exists.
fn grow_once(
    city: &City,
    cfg: &EnvConfig,
    fd1: &[f64],
    used: &mut [bool],
    line: &mut Vec<usize>,
    front: bool,
) -> bool {
    let k = city.len();
    let (terminal, sub) = if front {
        (line[0], if line.len() >= 2 { Some(line[1]) } else { None })
    } else {
        (
            *line.last().unwrap(),
            if line.len() >= 2 {
                Some(line[line.len() - 2])
            } else {
                None
            },
        )
    };
    let mut best: Option<usize> = None;
    for node in 0..k {
        if used[node] {
            continue;
        }
        let d = city.distance(node, terminal);
        if d < cfg.t3 || d > cfg.t4 {
            continue;
        }
        if let Some(sub) = sub {
            if !angle_ok(city, node, terminal, sub, cfg.angle_min_deg) {
                continue;
            }
        }
        let better = match best {
            None => true,
            Some(b) => fd1[node] > fd1[b] || (fd1[node] == fd1[b] && node < b),
        };
        if better {
            best = Some(node);
        }
    }
    let Some(next) = best else { return false };
    used[next] = true;
    if front {
        line.insert(0, next);
    } else {
        line.push(next);
    }
    true
}

/// Result of the exhaustive oracle: the best final satisfied OD (the
/// alpha = 1 objective), the lexicographically smallest action sequence
/// achieving it, and search statistics.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub actions: Vec<usize>,
    pub value: f64,
    pub leaves: u64,
    pub expanded: u64,
}

/// Exhaustively enumerates every action sequence the mask admits (children
/// in ascending region order) and returns the argmax of final satisfied OD.
/// Refuses with a size estimate once more than `node_limit` tree nodes
/// (default 10^6) have been expanded.
pub fn enumerate_episodes(
    city: &City,
    cfg: &EnvConfig,
    seed: u64,
    depth_limit: usize,
    node_limit: Option<u64>,
) -> Result<OracleOutcome> {
    let limit = node_limit.unwrap_or(1_000_000);
    let env = Env::reset(city, cfg, seed)?;
    let mut best_value = env.cod();
    let mut best_actions: Vec<usize> = Vec::new();
    let mut leaves = 0u64;
    let mut expanded = 0u64;
    let mut prefix: Vec<usize> = Vec::new();

    fn dfs(
        env: &Env<'_>,
        depth_limit: usize,
        limit: u64,
        prefix: &mut Vec<usize>,
        best_value: &mut f64,
        best_actions: &mut Vec<usize>,
        leaves: &mut u64,
        expanded: &mut u64,
    ) -> Result<()> {
        *expanded += 1;
        if *expanded > limit {
            return Err(Error::Guard(format!(
                "search tree exceeds {} nodes (reached {} with best-so-far {})",
                limit, *expanded, *best_value
            )));
        }
        let mask = env.action_mask();
        if mask.is_empty() || prefix.len() >= depth_limit {
            *leaves += 1;
            if env.cod() > *best_value {
                *best_value = env.cod();
                *best_actions = prefix.clone();
            }
            return Ok(());
        }
        for &node in mask.resolved.keys() {
            let mut child = env.clone();
            child.step(node)?;
            prefix.push(node);
            dfs(
                &child,
                depth_limit,
                limit,
                prefix,
                best_value,
                best_actions,
                leaves,
                expanded,
            )?;
            prefix.pop();
        }
        Ok(())
    }

    dfs(
        &env,
        depth_limit,
        limit,
        &mut prefix,
        &mut best_value,
        &mut best_actions,
        &mut leaves,
        &mut expanded,
    )?;
    Ok(OracleOutcome {
        actions: best_actions,
        value: best_value,
        leaves,
        expanded,
    })
}
