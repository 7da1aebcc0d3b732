use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use metrex::checkpoint;
use metrex::cityfile;
use metrex::config::{self, Overrides, RunConfig};
use metrex::error::{CliError, CliResult};
use metrex::plan::{self, Plan};
use metrex::train;

use metrex_core::agent::AgentParams;
use metrex_core::baselines;
use metrex_core::city::generate_city;
use metrex_core::env::enumerate_episodes;
use metrex_core::ppo::{collect_episode, gradient_check, greedy_rollout};

/// Metro network expansion planner: synthetic cities, heterogeneous region
/// graphs, a trainable graph policy, heuristic baselines and an exhaustive
/// oracle.
///
/// Exit codes: 0 success, 2 configuration error, 3 validation error,
/// 4 numeric error, 5 search-guard refusal, 1 other failures.
#[derive(Parser)]
#[command(name = "metrex", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic city file.
    GenCity {
        /// Region count (overrides city.k).
        #[arg(long)]
        k: Option<usize>,
        /// Generator seed (overrides city.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output city file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the policy with PPO; writes checkpoints and a metrics log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Serial single-threaded collection for bit-exact reproducibility.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Roll out a trained policy into a plan.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Argmax actions instead of sampling.
        #[arg(long)]
        greedy: bool,
        /// Sampling seed (ignored with --greedy).
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a heuristic baseline into a plan.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Replay a plan, re-verify every constraint and print its metrics.
    Eval {
        #[arg(long)]
        plan: PathBuf,
        /// City file (overrides city.file).
        #[arg(long)]
        city: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Exhaustively search small instances for the optimal plan.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Abort after expanding this many search nodes.
        #[arg(long, default_value_t = 1_000_000)]
        depth_guard: u64,
        /// Maximum episode length to explore.
        #[arg(long, default_value_t = 64)]
        depth_limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Export a plan as GeoJSON or SVG.
    Export {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the GNN layers x dims grid and emit a comparison table.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3])]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64])]
        dims: Vec<usize>,
        #[arg(long)]
        deterministic: bool,
        /// Optional CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gs,
    Sa,
    Ga,
    Aco,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Gs => "gs",
            Method::Sa => "sa",
            Method::Ga => "ga",
            Method::Aco => "aco",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Geojson,
    Svg,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenCity {
            k,
            seed,
            out,
            config,
            overrides,
        } => {
            let mut cfg = config::resolve(config.as_deref(), &overrides)?;
            if let Some(k) = k {
                cfg.city.k = k;
            }
            if let Some(seed) = seed {
                cfg.city.seed = seed;
            }
            let mut city = generate_city(cfg.city.k, cfg.city.seed, &cfg.gen_params())?;
            if cfg.city.merge_area_km2 > 0.0 && cfg.city.merge_dist_km > 0.0 {
                city = metrex_core::city::merge_small_regions(
                    &city,
                    cfg.city.merge_area_km2,
                    cfg.city.merge_dist_km,
                )?;
            }
            cityfile::save_city(&city, &out)?;
            println!(
                "wrote {} regions, total flow {:.0} trips/day -> {}",
                city.len(),
                city.total_flow(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            out_dir,
            deterministic,
            resume,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            let outcome = train::train(&cfg, &out_dir, deterministic, resume.as_deref())?;
            println!(
                "trained {} iterations, final mean C_od {:.2}; checkpoint {}, metrics {}",
                outcome.iterations_run,
                outcome.final_mean_cod,
                outcome.checkpoint_path.display(),
                outcome.metrics_path.display()
            );
            Ok(())
        }
        Cmd::Rollout {
            checkpoint: ck_path,
            config,
            greedy,
            sample_seed,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            let (city, graph) = cfg.materialize_city()?;
            let env_cfg = cfg.env_config()?;
            let (params, _, _) = checkpoint::load(&ck_path)?;
            check_agent_matches(&params, &cfg, &city)?;
            let traj = if greedy {
                greedy_rollout(&city, &graph, &env_cfg, cfg.env.seed, &params)?
            } else {
                collect_episode(&city, &graph, &env_cfg, cfg.env.seed, &params, sample_seed)?
            };
            let actions: Vec<usize> = traj.steps.iter().map(|s| s.action).collect();
            let method = if greedy { "agent-greedy" } else { "agent-sample" };
            let p = plan::plan_from_actions(
                &city,
                &env_cfg,
                cfg.env.seed,
                &actions,
                method,
                sample_seed,
            )?;
            p.save(&out)?;
            println!(
                "{}: C_od {:.2}, IE {:.4}, spend {:.0} -> {}",
                method,
                p.c_od,
                p.ie,
                p.spend,
                out.display()
            );
            Ok(())
        }
        Cmd::Baseline {
            method,
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            let (city, _) = cfg.materialize_city()?;
            let env_cfg = cfg.env_config()?;
            let env_seed = cfg.env.seed;
            let sol = match method {
                Method::Gs => baselines::greedy(&city, &env_cfg, env_seed)?,
                Method::Sa => baselines::simulated_annealing(
                    &city,
                    &env_cfg,
                    env_seed,
                    &cfg.sa_config(),
                    seed,
                )?,
                Method::Ga => {
                    baselines::genetic(&city, &env_cfg, env_seed, &cfg.ga_config(), seed)?
                }
                Method::Aco => {
                    baselines::ant_colony(&city, &env_cfg, env_seed, &cfg.aco_config(), seed)?
                }
            };
            let p = plan::plan_from_actions(
                &city,
                &env_cfg,
                env_seed,
                &sol.actions,
                method.name(),
                seed,
            )?;
            p.save(&out)?;
            println!(
                "{}: C_od {:.2}, IE {:.4}, spend {:.0}, {} actions -> {}",
                method.name(),
                p.c_od,
                p.ie,
                p.spend,
                p.actions.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            plan: plan_path,
            city,
            config,
            overrides,
        } => {
            let mut cfg = config::resolve(config.as_deref(), &overrides)?;
            if let Some(city) = city {
                cfg.city.file = city.display().to_string();
            }
            let (city, _) = cfg.materialize_city()?;
            let env_cfg = cfg.env_config()?;
            let p = Plan::load(&plan_path)?;
            let report = plan::audit(&p, &city, &env_cfg)?;
            println!(
                "C_od {:.6}, IE {:.6}, spend {:.6} ({} actions, method {})",
                report.c_od,
                report.ie,
                report.spend,
                p.actions.len(),
                p.method
            );
            if report.passed() {
                println!("constraint audit: PASS");
                Ok(())
            } else {
                for f in &report.findings {
                    println!("constraint audit: FAIL step {}: {}", f.step, f.message);
                }
                Err(CliError::Validation(format!(
                    "audit failed with {} finding(s)",
                    report.findings.len()
                )))
            }
        }
        Cmd::Oracle {
            config,
            depth_guard,
            depth_limit,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            let (city, _) = cfg.materialize_city()?;
            let env_cfg = cfg.env_config()?;
            let outcome = enumerate_episodes(
                &city,
                &env_cfg,
                cfg.env.seed,
                depth_limit,
                Some(depth_guard),
            )?;
            println!(
                "oracle optimum C_od {:.6} with {} actions ({} leaves, {} nodes expanded)",
                outcome.value,
                outcome.actions.len(),
                outcome.leaves,
                outcome.expanded
            );
            if let Some(out) = out {
                let p = plan::plan_from_actions(
                    &city,
                    &env_cfg,
                    cfg.env.seed,
                    &outcome.actions,
                    "oracle",
                    0,
                )?;
                p.save(&out)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Cmd::Gradcheck {
            seed,
            config,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            let (city, graph) = cfg.materialize_city()?;
            let env_cfg = cfg.env_config()?;
            let params = AgentParams::init(cfg.agent_config(&city), seed)?;
            let report = gradient_check(&city, &graph, &env_cfg, &params, cfg.env.seed, 1e-5)?;
            println!(
                "max relative error {:.3e} over {} parameters (worst: {}[{}])",
                report.max_rel_err, report.params_checked, report.worst_param, report.worst_index
            );
            if report.max_rel_err > 1e-4 {
                return Err(CliError::Core(metrex_core::Error::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} > 1e-4",
                    report.max_rel_err
                ))));
            }
            println!("gradient check: PASS");
            Ok(())
        }
        Cmd::Export { plan, format, out } => {
            let p = Plan::load(&plan)?;
            let text = match format {
                ExportFormat::Geojson => plan::to_geojson(&p)?,
                ExportFormat::Svg => plan::to_svg(&p)?,
            };
            std::fs::write(&out, text)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Sweep {
            config,
            layers,
            dims,
            deterministic,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            let rows = train::sweep(&cfg, &layers, &dims, deterministic)?;
            print!("{}", train::sweep_table(&rows));
            if let Some(out) = out {
                let mut csv = String::from(
                    "layers,dim,iterations,untrained_greedy_cod,trained_greedy_cod,mean_cod_last_iteration\n",
                );
                for r in &rows {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.layers,
                        r.dim,
                        r.iterations,
                        r.untrained_greedy_cod,
                        r.trained_greedy_cod,
                        r.mean_cod_last_iteration
                    ));
                }
                std::fs::write(&out, csv)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
    }
}

fn check_agent_matches(
    params: &AgentParams,
    cfg: &RunConfig,
    city: &metrex_core::city::City,
) -> CliResult<()> {
    let expect = cfg.agent_config(city);
    let got = params.config();
    if got.feature_dim != expect.feature_dim {
        return Err(CliError::Validation(format!(
            "checkpoint was trained with feature_dim {}, this city needs {}",
            got.feature_dim, expect.feature_dim
        )));
    }
    Ok(())
}
