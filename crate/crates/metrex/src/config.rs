//! The run configuration file: one TOML document with `city`, `env`,
//! `agent`, `ppo` and `baselines` sections. Unknown keys are errors, every
//! key has a CLI override flag, and the resolved configuration is echoed
//! into every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use metrex_core::agent::AgentConfig;
use metrex_core::baselines::{AcoConfig, GaConfig, SaConfig};
use metrex_core::city::{generate_city, merge_small_regions, City, GenParams};
use metrex_core::env::EnvConfig;
use metrex_core::graph::{build_graph, default_flow_threshold, feature_dim, HeteroGraph};
use metrex_core::metro::{CostModel, OdPairs};
use metrex_core::ppo::PpoConfig;

use crate::cityfile;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format: u32,
    pub city: CitySection,
    pub env: EnvSection,
    pub agent: AgentSection,
    pub ppo: PpoSection,
    pub baselines: BaselinesSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format: 1,
            city: CitySection::default(),
            env: EnvSection::default(),
            agent: AgentSection::default(),
            ppo: PpoSection::default(),
            baselines: BaselinesSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CitySection {
    /// Path of a city file to load; empty means generate synthetically.
    pub file: String,
    pub k: usize,
    pub seed: u64,
    pub clusters: usize,
    pub gravity_exponent: f64,
    pub side_km: f64,
    pub poi_categories: usize,
    pub gravity_scale: f64,
    pub base_population: f64,
    /// Spatial edge threshold (km).
    pub t1: f64,
    /// Flow edge threshold (trips/day); negative means the 90th percentile
    /// of nonzero symmetrized flows.
    pub t2: f64,
    /// Small-region merge thresholds; zero disables the merge step.
    pub merge_area_km2: f64,
    pub merge_dist_km: f64,
}

impl Default for CitySection {
    fn default() -> Self {
        CitySection {
            file: String::new(),
            k: 20,
            seed: 0,
            clusters: 3,
            gravity_exponent: 2.0,
            side_km: 20.0,
            poi_categories: 4,
            gravity_scale: 1e-4,
            base_population: 40_000.0,
            t1: 2.0,
            t2: -1.0,
            merge_area_km2: 0.0,
            merge_dist_km: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub budget: f64,
    pub initial_lines: u32,
    pub max_new_lines: u32,
    pub init_line_len: usize,
    pub t3: f64,
    pub t4: f64,
    pub angle_min: f64,
    pub alpha: f64,
    pub beta: f64,
    pub strict_appendix: bool,
    /// "connected" or "adjacent".
    pub od_pairs: String,
    pub new_start_within_t4: bool,
    /// Seed of the deterministic initial-line synthesis.
    pub seed: u64,
    pub station_cost: f64,
    pub interchange_cost: f64,
    pub per_km_cost: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvConfig::default();
        EnvSection {
            budget: e.budget,
            initial_lines: e.initial_lines,
            max_new_lines: e.max_new_lines,
            init_line_len: e.init_line_len,
            t3: e.t3,
            t4: e.t4,
            angle_min: e.angle_min_deg,
            alpha: e.alpha,
            beta: e.beta,
            strict_appendix: e.strict_appendix,
            od_pairs: "connected".into(),
            new_start_within_t4: e.new_start_within_t4,
            seed: 0,
            station_cost: 300.0,
            interchange_cost: 600.0,
            per_km_cost: 500.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub init_seed: u64,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            dim: 32,
            layers: 2,
            heads: 2,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PpoSection {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_epsilon: f64,
    pub epochs_per_batch: usize,
    pub episodes_per_iteration: usize,
    pub iterations: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for PpoSection {
    fn default() -> Self {
        let p = PpoConfig::default();
        PpoSection {
            gamma: p.gamma,
            gae_lambda: p.gae_lambda,
            entropy_coef: p.entropy_coef,
            value_coef: p.value_coef,
            clip_epsilon: p.clip_epsilon,
            epochs_per_batch: p.epochs_per_batch,
            episodes_per_iteration: p.episodes_per_iteration,
            iterations: p.iterations,
            seed: p.seed,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesSection {
    pub sa: SaSection,
    pub ga: GaSection,
    pub aco: AcoSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SaSection {
    pub t0: f64,
    pub cooling: f64,
    pub t_min: f64,
    pub iters_per_temp: usize,
    pub min_suffix_ratio: f64,
}

impl Default for SaSection {
    fn default() -> Self {
        let s = SaConfig::default();
        SaSection {
            t0: s.t0,
            cooling: s.cooling,
            t_min: s.t_min,
            iters_per_temp: s.iters_per_temp,
            min_suffix_ratio: s.min_suffix_ratio,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GaSection {
    pub population: usize,
    pub max_evaluations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub tournament: usize,
    pub elitism: usize,
}

impl Default for GaSection {
    fn default() -> Self {
        let g = GaConfig::default();
        GaSection {
            population: g.population,
            max_evaluations: g.max_evaluations,
            crossover_prob: g.crossover_prob,
            mutation_prob: g.mutation_prob,
            tournament: g.tournament,
            elitism: g.elitism,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AcoSection {
    pub iterations: usize,
    pub ants: usize,
    pub alpha: f64,
    pub beta: f64,
    pub evaporation: f64,
    pub pheromone_floor: f64,
    pub pheromone_init: f64,
}

impl Default for AcoSection {
    fn default() -> Self {
        let a = AcoConfig::default();
        AcoSection {
            iterations: a.iterations,
            ants: a.ants,
            alpha: a.alpha,
            beta: a.beta,
            evaporation: a.evaporation,
            pheromone_floor: a.pheromone_floor,
            pheromone_init: a.pheromone_init,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Builds (or loads) the city and its graph per the `city` section.
    pub fn materialize_city(&self) -> CliResult<(City, HeteroGraph)> {
        let mut city = if self.city.file.is_empty() {
            generate_city(self.city.k, self.city.seed, &self.gen_params())?
        } else {
            cityfile::load_city(Path::new(&self.city.file))?
        };
        if self.city.merge_area_km2 > 0.0 && self.city.merge_dist_km > 0.0 {
            city = merge_small_regions(&city, self.city.merge_area_km2, self.city.merge_dist_km)?;
        }
        let t2 = if self.city.t2 < 0.0 {
            default_flow_threshold(&city)
        } else {
            self.city.t2
        };
        let graph = build_graph(&city, self.city.t1, t2)?;
        Ok((city, graph))
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            clusters: self.city.clusters,
            gravity_exponent: self.city.gravity_exponent,
            side_km: self.city.side_km,
            poi_categories: self.city.poi_categories,
            gravity_scale: self.city.gravity_scale,
            base_population: self.city.base_population,
        }
    }

    pub fn env_config(&self) -> CliResult<EnvConfig> {
        let od_pairs = match self.env.od_pairs.as_str() {
            "connected" => OdPairs::Connected,
            "adjacent" => OdPairs::Adjacent,
            other => {
                return Err(CliError::Config(format!(
                    "od_pairs must be \"connected\" or \"adjacent\", got {:?}",
                    other
                )))
            }
        };
        Ok(EnvConfig {
            budget: self.env.budget,
            initial_lines: self.env.initial_lines,
            max_new_lines: self.env.max_new_lines,
            init_line_len: self.env.init_line_len,
            t3: self.env.t3,
            t4: self.env.t4,
            angle_min_deg: self.env.angle_min,
            alpha: self.env.alpha,
            beta: self.env.beta,
            strict_appendix: self.env.strict_appendix,
            od_pairs,
            new_start_within_t4: self.env.new_start_within_t4,
            cost: CostModel {
                station_cost: self.env.station_cost,
                interchange_cost: self.env.interchange_cost,
                per_km_cost: self.env.per_km_cost,
            },
        })
    }

    pub fn agent_config(&self, city: &City) -> AgentConfig {
        AgentConfig {
            feature_dim: feature_dim(city.region(0).poi.len()),
            dim: self.agent.dim,
            layers: self.agent.layers,
            heads: self.agent.heads,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            gamma: self.ppo.gamma,
            gae_lambda: self.ppo.gae_lambda,
            entropy_coef: self.ppo.entropy_coef,
            value_coef: self.ppo.value_coef,
            clip_epsilon: self.ppo.clip_epsilon,
            epochs_per_batch: self.ppo.epochs_per_batch,
            episodes_per_iteration: self.ppo.episodes_per_iteration,
            iterations: self.ppo.iterations,
            seed: self.ppo.seed,
        }
    }

    pub fn sa_config(&self) -> SaConfig {
        let s = &self.baselines.sa;
        SaConfig {
            t0: s.t0,
            cooling: s.cooling,
            t_min: s.t_min,
            iters_per_temp: s.iters_per_temp,
            min_suffix_ratio: s.min_suffix_ratio,
        }
    }

    pub fn ga_config(&self) -> GaConfig {
        let g = &self.baselines.ga;
        GaConfig {
            population: g.population,
            max_evaluations: g.max_evaluations,
            crossover_prob: g.crossover_prob,
            mutation_prob: g.mutation_prob,
            tournament: g.tournament,
            elitism: g.elitism,
        }
    }

    pub fn aco_config(&self) -> AcoConfig {
        let a = &self.baselines.aco;
        AcoConfig {
            iterations: a.iterations,
            ants: a.ants,
            alpha: a.alpha,
            beta: a.beta,
            evaporation: a.evaporation,
            pheromone_floor: a.pheromone_floor,
            pheromone_init: a.pheromone_init,
        }
    }
}

/// CLI overrides: exactly one flag per configuration key, named
/// `--<section>-<key>` (with `baselines.sa` shortened to `sa-`, etc.).
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    // [city]
    #[arg(long = "city-file", help_heading = "Config overrides")]
    pub city_file: Option<String>,
    #[arg(long = "city-k", help_heading = "Config overrides")]
    pub city_k: Option<usize>,
    #[arg(long = "city-seed", help_heading = "Config overrides")]
    pub city_seed: Option<u64>,
    #[arg(long = "city-clusters", help_heading = "Config overrides")]
    pub city_clusters: Option<usize>,
    #[arg(long = "city-gravity-exponent", help_heading = "Config overrides")]
    pub city_gravity_exponent: Option<f64>,
    #[arg(long = "city-side-km", help_heading = "Config overrides")]
    pub city_side_km: Option<f64>,
    #[arg(long = "city-poi-categories", help_heading = "Config overrides")]
    pub city_poi_categories: Option<usize>,
    #[arg(long = "city-gravity-scale", help_heading = "Config overrides")]
    pub city_gravity_scale: Option<f64>,
    #[arg(long = "city-base-population", help_heading = "Config overrides")]
    pub city_base_population: Option<f64>,
    #[arg(long = "city-t1", help_heading = "Config overrides")]
    pub city_t1: Option<f64>,
    #[arg(long = "city-t2", help_heading = "Config overrides")]
    pub city_t2: Option<f64>,
    #[arg(long = "city-merge-area-km2", help_heading = "Config overrides")]
    pub city_merge_area_km2: Option<f64>,
    #[arg(long = "city-merge-dist-km", help_heading = "Config overrides")]
    pub city_merge_dist_km: Option<f64>,

    // [env]
    #[arg(long = "env-budget", help_heading = "Config overrides")]
    pub env_budget: Option<f64>,
    #[arg(long = "env-initial-lines", help_heading = "Config overrides")]
    pub env_initial_lines: Option<u32>,
    #[arg(long = "env-max-new-lines", help_heading = "Config overrides")]
    pub env_max_new_lines: Option<u32>,
    #[arg(long = "env-init-line-len", help_heading = "Config overrides")]
    pub env_init_line_len: Option<usize>,
    #[arg(long = "env-t3", help_heading = "Config overrides")]
    pub env_t3: Option<f64>,
    #[arg(long = "env-t4", help_heading = "Config overrides")]
    pub env_t4: Option<f64>,
    #[arg(long = "env-angle-min", help_heading = "Config overrides")]
    pub env_angle_min: Option<f64>,
    #[arg(long = "env-alpha", help_heading = "Config overrides")]
    pub env_alpha: Option<f64>,
    #[arg(long = "env-beta", help_heading = "Config overrides")]
    pub env_beta: Option<f64>,
    #[arg(long = "env-strict-appendix", help_heading = "Config overrides")]
    pub env_strict_appendix: Option<bool>,
    #[arg(long = "env-od-pairs", help_heading = "Config overrides")]
    pub env_od_pairs: Option<String>,
    #[arg(long = "env-new-start-within-t4", help_heading = "Config overrides")]
    pub env_new_start_within_t4: Option<bool>,
    #[arg(long = "env-seed", help_heading = "Config overrides")]
    pub env_seed: Option<u64>,
    #[arg(long = "env-station-cost", help_heading = "Config overrides")]
    pub env_station_cost: Option<f64>,
    #[arg(long = "env-interchange-cost", help_heading = "Config overrides")]
    pub env_interchange_cost: Option<f64>,
    #[arg(long = "env-per-km-cost", help_heading = "Config overrides")]
    pub env_per_km_cost: Option<f64>,

    // [agent]
    #[arg(long = "agent-dim", help_heading = "Config overrides")]
    pub agent_dim: Option<usize>,
    #[arg(long = "agent-layers", help_heading = "Config overrides")]
    pub agent_layers: Option<usize>,
    #[arg(long = "agent-heads", help_heading = "Config overrides")]
    pub agent_heads: Option<usize>,
    #[arg(long = "agent-init-seed", help_heading = "Config overrides")]
    pub agent_init_seed: Option<u64>,

    // [ppo]
    #[arg(long = "ppo-gamma", help_heading = "Config overrides")]
    pub ppo_gamma: Option<f64>,
    #[arg(long = "ppo-gae-lambda", help_heading = "Config overrides")]
    pub ppo_gae_lambda: Option<f64>,
    #[arg(long = "ppo-entropy-coef", help_heading = "Config overrides")]
    pub ppo_entropy_coef: Option<f64>,
    #[arg(long = "ppo-value-coef", help_heading = "Config overrides")]
    pub ppo_value_coef: Option<f64>,
    #[arg(long = "ppo-clip-epsilon", help_heading = "Config overrides")]
    pub ppo_clip_epsilon: Option<f64>,
    #[arg(long = "ppo-epochs-per-batch", help_heading = "Config overrides")]
    pub ppo_epochs_per_batch: Option<usize>,
    #[arg(long = "ppo-episodes-per-iteration", help_heading = "Config overrides")]
    pub ppo_episodes_per_iteration: Option<usize>,
    #[arg(long = "ppo-iterations", help_heading = "Config overrides")]
    pub ppo_iterations: Option<usize>,
    #[arg(long = "ppo-seed", help_heading = "Config overrides")]
    pub ppo_seed: Option<u64>,
    #[arg(long = "ppo-checkpoint-every", help_heading = "Config overrides")]
    pub ppo_checkpoint_every: Option<usize>,

    // [baselines.sa]
    #[arg(long = "sa-t0", help_heading = "Config overrides")]
    pub sa_t0: Option<f64>,
    #[arg(long = "sa-cooling", help_heading = "Config overrides")]
    pub sa_cooling: Option<f64>,
    #[arg(long = "sa-t-min", help_heading = "Config overrides")]
    pub sa_t_min: Option<f64>,
    #[arg(long = "sa-iters-per-temp", help_heading = "Config overrides")]
    pub sa_iters_per_temp: Option<usize>,
    #[arg(long = "sa-min-suffix-ratio", help_heading = "Config overrides")]
    pub sa_min_suffix_ratio: Option<f64>,

    // [baselines.ga]
    #[arg(long = "ga-population", help_heading = "Config overrides")]
    pub ga_population: Option<usize>,
    #[arg(long = "ga-max-evaluations", help_heading = "Config overrides")]
    pub ga_max_evaluations: Option<usize>,
    #[arg(long = "ga-crossover-prob", help_heading = "Config overrides")]
    pub ga_crossover_prob: Option<f64>,
    #[arg(long = "ga-mutation-prob", help_heading = "Config overrides")]
    pub ga_mutation_prob: Option<f64>,
    #[arg(long = "ga-tournament", help_heading = "Config overrides")]
    pub ga_tournament: Option<usize>,
    #[arg(long = "ga-elitism", help_heading = "Config overrides")]
    pub ga_elitism: Option<usize>,

    // [baselines.aco]
    #[arg(long = "aco-iterations", help_heading = "Config overrides")]
    pub aco_iterations: Option<usize>,
    #[arg(long = "aco-ants", help_heading = "Config overrides")]
    pub aco_ants: Option<usize>,
    #[arg(long = "aco-alpha", help_heading = "Config overrides")]
    pub aco_alpha: Option<f64>,
    #[arg(long = "aco-beta", help_heading = "Config overrides")]
    pub aco_beta: Option<f64>,
    #[arg(long = "aco-evaporation", help_heading = "Config overrides")]
    pub aco_evaporation: Option<f64>,
    #[arg(long = "aco-pheromone-floor", help_heading = "Config overrides")]
    pub aco_pheromone_floor: Option<f64>,
    #[arg(long = "aco-pheromone-init", help_heading = "Config overrides")]
    pub aco_pheromone_init: Option<f64>,
}

macro_rules! apply_overrides {
    ($cfg:expr, $self:expr; $($field:ident => $($path:ident).+),+ $(,)?) => {
        $(
            if let Some(v) = $self.$field.clone() {
                $cfg.$($path).+ = v;
            }
        )+
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        apply_overrides!(cfg, self;
            city_file => city.file,
            city_k => city.k,
            city_seed => city.seed,
            city_clusters => city.clusters,
            city_gravity_exponent => city.gravity_exponent,
            city_side_km => city.side_km,
            city_poi_categories => city.poi_categories,
            city_gravity_scale => city.gravity_scale,
            city_base_population => city.base_population,
            city_t1 => city.t1,
            city_t2 => city.t2,
            city_merge_area_km2 => city.merge_area_km2,
            city_merge_dist_km => city.merge_dist_km,
            env_budget => env.budget,
            env_initial_lines => env.initial_lines,
            env_max_new_lines => env.max_new_lines,
            env_init_line_len => env.init_line_len,
            env_t3 => env.t3,
            env_t4 => env.t4,
            env_angle_min => env.angle_min,
            env_alpha => env.alpha,
            env_beta => env.beta,
            env_strict_appendix => env.strict_appendix,
            env_od_pairs => env.od_pairs,
            env_new_start_within_t4 => env.new_start_within_t4,
            env_seed => env.seed,
            env_station_cost => env.station_cost,
            env_interchange_cost => env.interchange_cost,
            env_per_km_cost => env.per_km_cost,
            agent_dim => agent.dim,
            agent_layers => agent.layers,
            agent_heads => agent.heads,
            agent_init_seed => agent.init_seed,
            ppo_gamma => ppo.gamma,
            ppo_gae_lambda => ppo.gae_lambda,
            ppo_entropy_coef => ppo.entropy_coef,
            ppo_value_coef => ppo.value_coef,
            ppo_clip_epsilon => ppo.clip_epsilon,
            ppo_epochs_per_batch => ppo.epochs_per_batch,
            ppo_episodes_per_iteration => ppo.episodes_per_iteration,
            ppo_iterations => ppo.iterations,
            ppo_seed => ppo.seed,
            ppo_checkpoint_every => ppo.checkpoint_every,
            sa_t0 => baselines.sa.t0,
            sa_cooling => baselines.sa.cooling,
            sa_t_min => baselines.sa.t_min,
            sa_iters_per_temp => baselines.sa.iters_per_temp,
            sa_min_suffix_ratio => baselines.sa.min_suffix_ratio,
            ga_population => baselines.ga.population,
            ga_max_evaluations => baselines.ga.max_evaluations,
            ga_crossover_prob => baselines.ga.crossover_prob,
            ga_mutation_prob => baselines.ga.mutation_prob,
            ga_tournament => baselines.ga.tournament,
            ga_elitism => baselines.ga.elitism,
            aco_iterations => baselines.aco.iterations,
            aco_ants => baselines.aco.ants,
            aco_alpha => baselines.aco.alpha,
            aco_beta => baselines.aco.beta,
            aco_evaporation => baselines.aco.evaporation,
            aco_pheromone_floor => baselines.aco.pheromone_floor,
            aco_pheromone_init => baselines.aco.pheromone_init,
        );
    }
}

/// Loads the config (defaults when no path is given) and applies flag
/// overrides.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}
