//! Heuristic planners: greedy selection, simulated annealing, a genetic
//! algorithm and ant colony optimization. Every planner acts through the
//! environment's action mask, so any solution it emits replays feasibly.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::city::City;
use crate::env::{ActionMask, Env, EnvConfig};
use crate::{Error, Result};

/// A finished expansion: the action sequence and its final metrics.
/// `score` is the weighted objective
/// `alpha * cod / flow_norm + beta * (ie0 - ie) / ie_norm`; with the
/// default weights (alpha = 1) score ratios equal satisfied-OD ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub actions: Vec<usize>,
    pub cod: f64,
    pub ie: f64,
    pub spend: f64,
    pub score: f64,
}

fn score_of(env: &Env<'_>) -> f64 {
    let cfg = env.config();
    cfg.alpha * (env.cod() / env.flow_norm())
        + cfg.beta * ((env.initial_ie() - env.ie()) / env.ie_norm())
}

fn solution_of(env: &Env<'_>, actions: Vec<usize>) -> Solution {
    Solution {
        actions,
        cod: env.cod(),
        ie: env.ie(),
        spend: env.spend(),
        score: score_of(env),
    }
}

/// Replays an action sequence from the reset state; errors if any action is
/// masked out at its step.
pub fn replay(city: &City, cfg: &EnvConfig, env_seed: u64, actions: &[usize]) -> Result<Solution> {
    let mut env = Env::reset(city, cfg, env_seed)?;
    for &a in actions {
        env.step(a)?;
    }
    Ok(solution_of(&env, actions.to_vec()))
}

/// Symmetrized flow from `node` to the current station set (the greedy
/// heuristic and the ACO desirability).
fn flow_to_stations(city: &City, env: &Env<'_>, node: usize) -> f64 {
    env.state()
        .stations()
        .iter()
        .filter(|&&s| s != node)
        .map(|&s| city.sym_flow(node, s))
        .sum()
}

/// Greedy strategy: at every step take the masked-in region with the
/// largest symmetrized flow towards the already-selected stations, lowest
/// id on ties, until no action remains. Fully deterministic.
pub fn greedy(city: &City, cfg: &EnvConfig, env_seed: u64) -> Result<Solution> {
    let mut env = Env::reset(city, cfg, env_seed)?;
    let mut actions = Vec::new();
    loop {
        let mask = env.action_mask();
        if mask.is_empty() {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for &node in mask.resolved.keys() {
            let fd3 = flow_to_stations(city, &env, node);
            let better = match best {
                None => true,
                Some((_, bf)) => fd3 > bf,
            };
            if better {
                best = Some((node, fd3));
            }
        }
        let (node, _) = best.unwrap();
        env.step(node)?;
        actions.push(node);
    }
    Ok(solution_of(&env, actions))
}

fn uniform_pick<R: Rng>(mask: &ActionMask, rng: &mut R) -> usize {
    let keys: Vec<usize> = mask.resolved.keys().copied().collect();
    keys[rng.gen_range(0..keys.len())]
}

/// Replays `prefix`, then completes the episode with uniform-random
/// masked-in actions. Every return value is feasible by construction.
fn reroll_suffix<R: Rng>(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    prefix: &[usize],
    rng: &mut R,
) -> Result<Solution> {
    let mut env = Env::reset(city, cfg, env_seed)?;
    let mut actions = Vec::with_capacity(prefix.len());
    for &a in prefix {
        env.step(a)?;
        actions.push(a);
    }
    loop {
        let mask = env.action_mask();
        if mask.is_empty() {
            break;
        }
        let node = uniform_pick(&mask, rng);
        env.step(node)?;
        actions.push(node);
    }
    Ok(solution_of(&env, actions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaConfig {
    pub t0: f64,
    pub cooling: f64,
    pub t_min: f64,
    pub iters_per_temp: usize,
    /// Re-rolled suffixes shorter than this fraction of the replaced suffix
    /// are rejected outright.
    pub min_suffix_ratio: f64,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            t0: 1500.0,
            cooling: 0.98,
            t_min: 0.1,
            iters_per_temp: 200,
            min_suffix_ratio: 0.1,
        }
    }
}

/// Metropolis acceptance on the t0-relative temperature scale: a worse
/// candidate with normalized score delta `d < 0` is accepted with
/// probability `exp(d * t0 / t)`.
fn sa_accept<R: Rng>(delta_norm: f64, t: f64, t0: f64, rng: &mut R) -> bool {
    if delta_norm > 0.0 {
        return true;
    }
    let p = libm::exp(delta_norm * t0 / t);
    rng.gen::<f64>() < p
}

/// Simulated annealing from the greedy start. The neighbor move truncates
/// the action sequence at a random position and re-rolls the suffix through
/// the mask; deltas are normalized by the initial solution's score.
pub fn simulated_annealing(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    sa: &SaConfig,
    seed: u64,
) -> Result<Solution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = greedy(city, cfg, env_seed)?;
    let init_scale = current.score.abs().max(1e-12);
    let mut best = current.clone();
    let mut t = sa.t0;
    while t > sa.t_min {
        for _ in 0..sa.iters_per_temp {
            let cut = rng.gen_range(0..=current.actions.len());
            let replaced = current.actions.len() - cut;
            let candidate = reroll_suffix(city, cfg, env_seed, &current.actions[..cut], &mut rng)?;
            let new_suffix = candidate.actions.len() - cut;
            if replaced > 0 && (new_suffix as f64) < sa.min_suffix_ratio * replaced as f64 {
                continue;
            }
            let delta = (candidate.score - current.score) / init_scale;
            if sa_accept(delta, t, sa.t0, &mut rng) {
                current = candidate;
                if current.score > best.score {
                    best = current.clone();
                }
            }
        }
        t *= sa.cooling;
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    /// Total episode-evaluation budget across all generations.
    pub max_evaluations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub tournament: usize,
    pub elitism: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 200,
            max_evaluations: 2000,
            crossover_prob: 0.8,
            mutation_prob: 0.8,
            tournament: 4,
            elitism: 2,
        }
    }
}

/// Genetic algorithm over action sequences. Crossover keeps one parent's
/// prefix and replays the other parent's suffix gene by gene, substituting
/// a uniform masked action whenever a gene is infeasible, which keeps every
/// individual viable. Mutation is the annealing truncate-and-re-roll move.
pub fn genetic(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    ga: &GaConfig,
    seed: u64,
) -> Result<Solution> {
    if ga.population == 0 {
        return Err(Error::Config("GA population must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evals = 0usize;
    let mut population: Vec<Solution> = Vec::with_capacity(ga.population);
    for _ in 0..ga.population {
        population.push(reroll_suffix(city, cfg, env_seed, &[], &mut rng)?);
        evals += 1;
        if evals >= ga.max_evaluations {
            break;
        }
    }
    let mut best = population
        .iter()
        .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
        .unwrap()
        .clone();

    while evals < ga.max_evaluations {
        let mut ranked: Vec<usize> = (0..population.len()).collect();
        ranked.sort_by(|&a, &b| population[b].score.partial_cmp(&population[a].score).unwrap());
        let mut next: Vec<Solution> = ranked
            .iter()
            .take(ga.elitism.min(population.len()))
            .map(|&i| population[i].clone())
            .collect();
        let generation_start = evals;
        while next.len() < ga.population && evals < ga.max_evaluations {
            let a = tournament(&population, ga.tournament, &mut rng);
            let b = tournament(&population, ga.tournament, &mut rng);
            let mut child = if rng.gen::<f64>() < ga.crossover_prob {
                evals += 1;
                crossover(city, cfg, env_seed, &population[a], &population[b], &mut rng)?
            } else {
                population[a].clone()
            };
            if rng.gen::<f64>() < ga.mutation_prob && evals < ga.max_evaluations {
                let cut = rng.gen_range(0..=child.actions.len());
                child = reroll_suffix(city, cfg, env_seed, &child.actions[..cut], &mut rng)?;
                evals += 1;
            }
            if child.score > best.score {
                best = child.clone();
            }
            next.push(child);
        }
        population = next;
        if evals == generation_start {
            // Degenerate operators (both probabilities zero): the
            // population can no longer change.
            break;
        }
    }
    Ok(best)
}

fn tournament<R: Rng>(population: &[Solution], size: usize, rng: &mut R) -> usize {
    let mut best = rng.gen_range(0..population.len());
    for _ in 1..size.max(1) {
        let c = rng.gen_range(0..population.len());
        if population[c].score > population[best].score {
            best = c;
        }
    }
    best
}

fn crossover<R: Rng>(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    a: &Solution,
    b: &Solution,
    rng: &mut R,
) -> Result<Solution> {
    let cut = rng.gen_range(0..=a.actions.len().min(b.actions.len()));
    let mut env = Env::reset(city, cfg, env_seed)?;
    let mut actions = Vec::new();
    for &g in &a.actions[..cut] {
        env.step(g)?;
        actions.push(g);
    }
    for &g in &b.actions[cut.min(b.actions.len())..] {
        let mask = env.action_mask();
        if mask.is_empty() {
            break;
        }
        let node = if mask.resolved.contains_key(&g) {
            g
        } else {
            uniform_pick(&mask, rng)
        };
        env.step(node)?;
        actions.push(node);
    }
    loop {
        let mask = env.action_mask();
        if mask.is_empty() {
            break;
        }
        let node = uniform_pick(&mask, rng);
        env.step(node)?;
        actions.push(node);
    }
    Ok(solution_of(&env, actions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcoConfig {
    pub iterations: usize,
    pub ants: usize,
    /// Pheromone exponent.
    pub alpha: f64,
    /// Heuristic (desirability) exponent.
    pub beta: f64,
    pub evaporation: f64,
    pub pheromone_floor: f64,
    pub pheromone_init: f64,
}

impl Default for AcoConfig {
    fn default() -> Self {
        AcoConfig {
            iterations: 3000,
            ants: 128,
            alpha: 1.0,
            beta: 2.0,
            evaporation: 0.1,
            pheromone_floor: 1e-6,
            pheromone_init: 1.0,
        }
    }
}

/// Ant colony optimization over region ids. Each ant builds a feasible
/// sequence sampling masked-in nodes with log-domain weights
/// `alpha * ln(tau) + beta * ln(eta)` where `eta = flow_to_stations + 1`;
/// after every iteration pheromones evaporate (floored) and the global
/// best deposits `score_best / score_greedy` on its nodes.
pub fn ant_colony(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    aco: &AcoConfig,
    seed: u64,
) -> Result<Solution> {
    let k = city.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let greedy_sol = greedy(city, cfg, env_seed)?;
    let greedy_scale = greedy_sol.score.abs().max(1e-12);
    let mut tau = alloc::vec![aco.pheromone_init.max(aco.pheromone_floor); k];
    let mut best = greedy_sol.clone();

    for _ in 0..aco.iterations {
        for _ in 0..aco.ants {
            let sol = ant_walk(city, cfg, env_seed, &tau, aco, &mut rng)?;
            if sol.score > best.score {
                best = sol;
            }
        }
        for t in tau.iter_mut() {
            *t = ((1.0 - aco.evaporation) * *t).max(aco.pheromone_floor);
        }
        let deposit = (best.score / greedy_scale).max(0.0);
        for &node in &best.actions {
            tau[node] += deposit;
        }
    }
    Ok(best)
}

fn ant_walk<R: Rng>(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    tau: &[f64],
    aco: &AcoConfig,
    rng: &mut R,
) -> Result<Solution> {
    let mut env = Env::reset(city, cfg, env_seed)?;
    let mut actions = Vec::new();
    loop {
        let mask = env.action_mask();
        if mask.is_empty() {
            break;
        }
        let nodes: Vec<usize> = mask.resolved.keys().copied().collect();
        // Log-domain weights with max subtraction keep huge heuristic
        // exponents finite.
        let weights: Vec<f64> = nodes
            .iter()
            .map(|&n| {
                let eta = flow_to_stations(city, &env, n) + 1.0;
                aco.alpha * libm::log(tau[n]) + aco.beta * libm::log(eta)
            })
            .collect();
        let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = weights.iter().map(|w| libm::exp(w - m)).collect();
        let total: f64 = exps.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = nodes[nodes.len() - 1];
        for (i, &e) in exps.iter().enumerate() {
            if u < e {
                chosen = nodes[i];
                break;
            }
            u -= e;
        }
        env.step(chosen)?;
        actions.push(chosen);
    }
    Ok(solution_of(&env, actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::city::{generate_city, GenParams};

    fn setup() -> (City, EnvConfig) {
        let city = generate_city(14, 3, &GenParams { side_km: 7.0, ..GenParams::default() }).unwrap();
        let cfg = EnvConfig {
            budget: 3_000.0,
            initial_lines: 1,
            max_new_lines: 1,
            init_line_len: 3,
            ..EnvConfig::default()
        };
        (city, cfg)
    }

    #[test]
    fn greedy_is_deterministic_and_picks_argmax_fd3() {
        let (city, cfg) = setup();
        let a = greedy(&city, &cfg, 0).unwrap();
        let b = greedy(&city, &cfg, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_first_pick_matches_direct_scan() {
        let (city, cfg) = setup();
        let sol = greedy(&city, &cfg, 0).unwrap();
        let env = Env::reset(&city, &cfg, 0).unwrap();
        let mask = env.action_mask();
        let mut best: Option<(usize, f64)> = None;
        for &node in mask.resolved.keys() {
            let fd3: f64 = env
                .state()
                .stations()
                .iter()
                .filter(|&&s| s != node)
                .map(|&s| city.sym_flow(node, s))
                .sum();
            let better = match best {
                None => true,
                Some((_, bf)) => fd3 > bf,
            };
            if better {
                best = Some((node, fd3));
            }
        }
        assert_eq!(sol.actions.first().copied(), best.map(|(n, _)| n));
    }

    #[test]
    fn solutions_replay_feasibly() {
        let (city, cfg) = setup();
        let sols = [
            greedy(&city, &cfg, 0).unwrap(),
            simulated_annealing(
                &city,
                &cfg,
                0,
                &SaConfig {
                    t0: 10.0,
                    cooling: 0.5,
                    t_min: 1.0,
                    iters_per_temp: 5,
                    min_suffix_ratio: 0.1,
                },
                1,
            )
            .unwrap(),
            genetic(
                &city,
                &cfg,
                0,
                &GaConfig {
                    population: 8,
                    max_evaluations: 40,
                    ..GaConfig::default()
                },
                2,
            )
            .unwrap(),
            ant_colony(
                &city,
                &cfg,
                0,
                &AcoConfig {
                    iterations: 4,
                    ants: 6,
                    ..AcoConfig::default()
                },
                3,
            )
            .unwrap(),
        ];
        for sol in &sols {
            let replayed = replay(&city, &cfg, 0, &sol.actions).unwrap();
            assert_eq!(replayed.cod, sol.cod);
            assert_eq!(replayed.spend, sol.spend);
            assert!(sol.spend <= cfg.budget + 1e-9);
        }
    }

    #[test]
    fn sa_zero_temperature_never_accepts_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert!(!sa_accept(-0.01, 1e-9, 1500.0, &mut rng));
        }
        // And improvements always pass.
        assert!(sa_accept(0.5, 1e-9, 1500.0, &mut rng));
    }

    #[test]
    fn sa_beats_or_matches_greedy() {
        let (city, cfg) = setup();
        let g = greedy(&city, &cfg, 0).unwrap();
        let s = simulated_annealing(
            &city,
            &cfg,
            0,
            &SaConfig {
                t0: 1500.0,
                cooling: 0.9,
                t_min: 10.0,
                iters_per_temp: 10,
                min_suffix_ratio: 0.1,
            },
            7,
        )
        .unwrap();
        assert!(s.score >= g.score);
    }

    #[test]
    fn stochastic_baselines_are_seed_deterministic() {
        let (city, cfg) = setup();
        let sa_cfg = SaConfig {
            t0: 100.0,
            cooling: 0.7,
            t_min: 10.0,
            iters_per_temp: 4,
            min_suffix_ratio: 0.1,
        };
        let a = simulated_annealing(&city, &cfg, 0, &sa_cfg, 9).unwrap();
        let b = simulated_annealing(&city, &cfg, 0, &sa_cfg, 9).unwrap();
        assert_eq!(a, b);
        let ga_cfg = GaConfig {
            population: 6,
            max_evaluations: 30,
            ..GaConfig::default()
        };
        let a = genetic(&city, &cfg, 0, &ga_cfg, 9).unwrap();
        let b = genetic(&city, &cfg, 0, &ga_cfg, 9).unwrap();
        assert_eq!(a, b);
        let aco_cfg = AcoConfig {
            iterations: 3,
            ants: 4,
            ..AcoConfig::default()
        };
        let a = ant_colony(&city, &cfg, 0, &aco_cfg, 9).unwrap();
        let b = ant_colony(&city, &cfg, 0, &aco_cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ga_degenerate_operators_keep_best_initial() {
        let (city, cfg) = setup();
        let ga_cfg = GaConfig {
            population: 6,
            max_evaluations: 60,
            crossover_prob: 0.0,
            mutation_prob: 0.0,
            ..GaConfig::default()
        };
        // With no operators the best equals the best of the 6 initial
        // rollouts (re-derive them with the same seed stream).
        let best = genetic(&city, &cfg, 0, &ga_cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut expect: Option<Solution> = None;
        for _ in 0..6 {
            let s = reroll_suffix(&city, &cfg, 0, &[], &mut rng).unwrap();
            if expect.as_ref().map_or(true, |e| s.score > e.score) {
                expect = Some(s);
            }
        }
        assert_eq!(best, expect.unwrap());
    }

    #[test]
    fn ga_beats_or_matches_greedy_start_population() {
        let (city, cfg) = setup();
        let ga_cfg = GaConfig {
            population: 10,
            max_evaluations: 80,
            ..GaConfig::default()
        };
        let g = genetic(&city, &cfg, 0, &ga_cfg, 11).unwrap();
        let replayed = replay(&city, &cfg, 0, &g.actions).unwrap();
        assert_eq!(replayed.score, g.score);
    }

    #[test]
    fn aco_heuristic_only_limit_tracks_greedy() {
        // With pheromones ignored and a huge heuristic exponent, a single
        // ant walks the greedy path.
        let (city, cfg) = setup();
        let g = greedy(&city, &cfg, 0).unwrap();
        let aco_cfg = AcoConfig {
            iterations: 1,
            ants: 1,
            alpha: 0.0,
            beta: 400.0,
            ..AcoConfig::default()
        };
        let a = ant_colony(&city, &cfg, 0, &aco_cfg, 1).unwrap();
        assert!(a.score >= g.score);
        // The single ant's walk (before best-of selection with greedy)
        // must match greedy's picks when FD3 values are distinct.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tau = alloc::vec![1.0; city.len()];
        let walk = ant_walk(&city, &cfg, 0, &tau, &aco_cfg, &mut rng).unwrap();
        assert_eq!(walk.actions, g.actions);
    }

    #[test]
    fn aco_pheromones_stay_floored() {
        let (city, cfg) = setup();
        let aco_cfg = AcoConfig {
            iterations: 5,
            ants: 3,
            evaporation: 0.99,
            pheromone_floor: 1e-6,
            ..AcoConfig::default()
        };
        // Run the loop manually to inspect the pheromone table.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let greedy_sol = greedy(&city, &cfg, 0).unwrap();
        let mut tau = alloc::vec![1.0; city.len()];
        let mut best = greedy_sol.clone();
        for _ in 0..aco_cfg.iterations {
            for _ in 0..aco_cfg.ants {
                let sol = ant_walk(&city, &cfg, 0, &tau, &aco_cfg, &mut rng).unwrap();
                if sol.score > best.score {
                    best = sol;
                }
            }
            for t in tau.iter_mut() {
                *t = ((1.0 - aco_cfg.evaporation) * *t).max(aco_cfg.pheromone_floor);
            }
            for &node in &best.actions {
                tau[node] += 1.0;
            }
            for &t in &tau {
                assert!(t >= 1e-6);
            }
        }
    }
}
