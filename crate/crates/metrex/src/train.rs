//! Training orchestration: batch collection (parallel unless
//! `--deterministic`), PPO updates, line-delimited metrics, periodic
//! checkpoints and resume.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use metrex_core::agent::AgentParams;
use metrex_core::city::City;
use metrex_core::env::EnvConfig;
use metrex_core::graph::HeteroGraph;
use metrex_core::mix_seed;
use metrex_core::nn::{AdamConfig, AdamState};
use metrex_core::ppo::{
    collect_episode, update_iteration, IterationMetrics, PpoConfig, Trajectory,
};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::CliResult;

/// One metrics-log line, serialized as JSON.
#[derive(Debug, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub episodes: usize,
    pub steps: usize,
    pub mean_cod: f64,
    pub mean_ie: f64,
    pub mean_reward_sum: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

impl From<IterationMetrics> for MetricsRow {
    fn from(m: IterationMetrics) -> Self {
        MetricsRow {
            iteration: m.iteration,
            episodes: m.episodes,
            steps: m.steps,
            mean_cod: m.mean_cod,
            mean_ie: m.mean_ie,
            mean_reward_sum: m.mean_reward_sum,
            policy_loss: m.policy_loss,
            value_loss: m.value_loss,
            entropy: m.entropy,
        }
    }
}

/// Episode seeds depend only on `(seed, iteration, episode)`, so parallel
/// and serial collection produce identical batches; the flag only controls
/// scheduling.
pub fn collect_batch(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    env_seed: u64,
    params: &AgentParams,
    ppo: &PpoConfig,
    iteration: usize,
    deterministic: bool,
) -> CliResult<Vec<Trajectory>> {
    let episodes = ppo.episodes_per_iteration;
    if deterministic {
        let mut batch = Vec::with_capacity(episodes);
        for e in 0..episodes {
            let seed = mix_seed(ppo.seed, iteration as u64, e as u64);
            batch.push(collect_episode(city, graph, env_cfg, env_seed, params, seed)?);
        }
        Ok(batch)
    } else {
        let batch: Result<Vec<Trajectory>, metrex_core::Error> = (0..episodes)
            .into_par_iter()
            .map(|e| {
                let seed = mix_seed(ppo.seed, iteration as u64, e as u64);
                collect_episode(city, graph, env_cfg, env_seed, params, seed)
            })
            .collect();
        Ok(batch?)
    }
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub iterations_run: usize,
    pub final_mean_cod: f64,
}

/// Full training run into `out_dir`: echoes the resolved config, appends
/// one metrics row per iteration, checkpoints every `checkpoint_every`
/// iterations and at the end. `resume` continues from a checkpoint;
/// because episode seeds derive from the iteration index, the continuation
/// reproduces an uninterrupted run bit for bit.
pub fn train(
    cfg: &RunConfig,
    out_dir: &Path,
    deterministic: bool,
    resume: Option<&Path>,
) -> CliResult<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let (city, graph) = cfg.materialize_city()?;
    let env_cfg = cfg.env_config()?;
    let ppo = cfg.ppo_config();
    ppo.validate()?;
    let env_seed = cfg.env.seed;

    std::fs::write(out_dir.join("resolved_config.toml"), cfg.to_toml()?)?;

    let (mut params, mut adam, start_iteration) = match resume {
        Some(path) => checkpoint::load(path)?,
        None => {
            let params = AgentParams::init(cfg.agent_config(&city), cfg.agent.init_seed)?;
            let adam = AdamState::new(params.tensors(), AdamConfig::default());
            (params, adam, 0)
        }
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = File::create(&metrics_path)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let every = cfg.ppo.checkpoint_every.max(1);

    let mut final_mean_cod = 0.0;
    let mut ran = 0;
    for iteration in start_iteration..ppo.iterations {
        let batch = collect_batch(
            &city,
            &graph,
            &env_cfg,
            env_seed,
            &params,
            &ppo,
            iteration,
            deterministic,
        )?;
        let m = update_iteration(&batch, &graph, &mut params, &mut adam, &ppo, iteration)?;
        final_mean_cod = m.mean_cod;
        let row: MetricsRow = m.into();
        writeln!(metrics_file, "{}", serde_json::to_string(&row)?)?;
        ran += 1;
        let completed = iteration + 1;
        if completed % every == 0 {
            checkpoint::save(
                &out_dir.join(format!("checkpoint_{:04}.json", completed)),
                &params,
                &adam,
                completed,
            )?;
        }
        checkpoint::save(&checkpoint_path, &params, &adam, completed)?;
    }
    // A run that starts at its target iteration count still leaves a
    // loadable checkpoint behind.
    if ran == 0 {
        checkpoint::save(&checkpoint_path, &params, &adam, start_iteration)?;
    }
    Ok(TrainOutcome {
        checkpoint_path,
        metrics_path,
        iterations_run: ran,
        final_mean_cod,
    })
}

/// One row of the hyper-parameter sweep table.
#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub layers: usize,
    pub dim: usize,
    pub iterations: usize,
    pub untrained_greedy_cod: f64,
    pub trained_greedy_cod: f64,
    pub mean_cod_last_iteration: f64,
}

/// Runs the layers x dims grid with the configured iteration budget and
/// returns one comparison row per variant.
pub fn sweep(
    cfg: &RunConfig,
    layers_grid: &[usize],
    dims_grid: &[usize],
    deterministic: bool,
) -> CliResult<Vec<SweepRow>> {
    let (city, graph) = cfg.materialize_city()?;
    let env_cfg = cfg.env_config()?;
    let env_seed = cfg.env.seed;
    let ppo = cfg.ppo_config();
    ppo.validate()?;
    let mut rows = Vec::new();
    for &layers in layers_grid {
        for &dim in dims_grid {
            let mut agent_cfg = cfg.agent_config(&city);
            agent_cfg.layers = layers;
            agent_cfg.dim = dim;
            let mut params = AgentParams::init(agent_cfg, cfg.agent.init_seed)?;
            let mut adam = AdamState::new(params.tensors(), AdamConfig::default());
            let untrained =
                metrex_core::ppo::greedy_rollout(&city, &graph, &env_cfg, env_seed, &params)?
                    .final_cod;
            let mut last_mean = 0.0;
            for iteration in 0..ppo.iterations {
                let batch = collect_batch(
                    &city,
                    &graph,
                    &env_cfg,
                    env_seed,
                    &params,
                    &ppo,
                    iteration,
                    deterministic,
                )?;
                let m = update_iteration(&batch, &graph, &mut params, &mut adam, &ppo, iteration)?;
                last_mean = m.mean_cod;
            }
            let trained =
                metrex_core::ppo::greedy_rollout(&city, &graph, &env_cfg, env_seed, &params)?
                    .final_cod;
            rows.push(SweepRow {
                layers,
                dim,
                iterations: ppo.iterations,
                untrained_greedy_cod: untrained,
                trained_greedy_cod: trained,
                mean_cod_last_iteration: last_mean,
            });
        }
    }
    Ok(rows)
}

/// Renders the sweep table as aligned plain text.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    s.push_str("layers  dim  iterations  untrained_cod  trained_cod  mean_cod_last_iter\n");
    for r in rows {
        s.push_str(&format!(
            "{:>6}  {:>3}  {:>10}  {:>13.2}  {:>11.2}  {:>18.2}\n",
            r.layers, r.dim, r.iterations, r.untrained_greedy_cod, r.trained_greedy_cod,
            r.mean_cod_last_iteration
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.city.k = 12;
        cfg.city.side_km = 6.0;
        cfg.env.budget = 2_000.0;
        cfg.env.initial_lines = 1;
        cfg.env.init_line_len = 3;
        cfg.env.max_new_lines = 1;
        cfg.agent.dim = 8;
        cfg.agent.layers = 1;
        cfg.ppo.iterations = 2;
        cfg.ppo.episodes_per_iteration = 2;
        cfg.ppo.epochs_per_batch = 1;
        cfg.ppo.checkpoint_every = 1;
        cfg
    }

    #[test]
    fn parallel_and_serial_collection_agree() {
        let cfg = tiny_config();
        let (city, graph) = cfg.materialize_city().unwrap();
        let env_cfg = cfg.env_config().unwrap();
        let params =
            AgentParams::init(cfg.agent_config(&city), cfg.agent.init_seed).unwrap();
        let ppo = cfg.ppo_config();
        let a = collect_batch(&city, &graph, &env_cfg, 0, &params, &ppo, 0, true).unwrap();
        let b = collect_batch(&city, &graph, &env_cfg, 0, &params, &ppo, 0, false).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.final_cod, y.final_cod);
            let ax: Vec<usize> = x.steps.iter().map(|s| s.action).collect();
            let ay: Vec<usize> = y.steps.iter().map(|s| s.action).collect();
            assert_eq!(ax, ay);
        }
    }

    #[test]
    fn train_writes_metrics_and_checkpoints() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, dir.path(), true, None).unwrap();
        assert_eq!(out.iterations_run, 2);
        let metrics = std::fs::read_to_string(&out.metrics_path).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        for line in metrics.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["mean_cod"].as_f64().unwrap() >= 0.0);
        }
        assert!(out.checkpoint_path.exists());
        assert!(dir.path().join("checkpoint_0001.json").exists());
        assert!(dir.path().join("resolved_config.toml").exists());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let mut cfg = tiny_config();
        cfg.ppo.iterations = 3;

        let full_dir = tempfile::tempdir().unwrap();
        train(&cfg, full_dir.path(), true, None).unwrap();
        let full_metrics = std::fs::read_to_string(full_dir.path().join("metrics.jsonl")).unwrap();

        // Two iterations, then resume for the third.
        let mut cfg2 = cfg.clone();
        cfg2.ppo.iterations = 2;
        let part_dir = tempfile::tempdir().unwrap();
        let part = train(&cfg2, part_dir.path(), true, None).unwrap();
        let mut cfg3 = cfg.clone();
        cfg3.ppo.iterations = 3;
        let resume_dir = tempfile::tempdir().unwrap();
        train(&cfg3, resume_dir.path(), true, Some(&part.checkpoint_path)).unwrap();
        let resumed_metrics =
            std::fs::read_to_string(resume_dir.path().join("metrics.jsonl")).unwrap();

        let full_last = full_metrics.lines().last().unwrap();
        let resumed_only = resumed_metrics.lines().last().unwrap();
        assert_eq!(full_last, resumed_only);
        // And the final checkpoints agree byte for byte.
        let a = std::fs::read(full_dir.path().join("checkpoint.json")).unwrap();
        let b = std::fs::read(resume_dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_emits_one_row_per_variant() {
        let mut cfg = tiny_config();
        cfg.ppo.iterations = 1;
        let rows = sweep(&cfg, &[1, 2], &[8, 16], true).unwrap();
        assert_eq!(rows.len(), 4);
        let table = sweep_table(&rows);
        assert_eq!(table.lines().count(), 5);
    }
}
