//! Full-agent gradient check: tape gradients of the composite step loss
//! against central finite differences over every parameter.

use metrex_core::agent::{AgentConfig, AgentParams};
use metrex_core::city::{generate_city, GenParams};
use metrex_core::env::EnvConfig;
use metrex_core::graph::{build_graph, default_flow_threshold, feature_dim};
use metrex_core::ppo::gradient_check;

#[test]
fn full_agent_gradients_match_finite_differences() {
    let city = generate_city(
        10,
        2,
        &GenParams {
            side_km: 6.0,
            ..GenParams::default()
        },
    )
    .unwrap();
    let graph = build_graph(&city, 2.5, default_flow_threshold(&city)).unwrap();
    let env_cfg = EnvConfig {
        budget: 4_000.0,
        initial_lines: 1,
        max_new_lines: 1,
        init_line_len: 3,
        ..EnvConfig::default()
    };
    // Moderate dimensions keep this test quick; the acceptance suite runs
    // the full-size configuration.
    let params = AgentParams::init(
        AgentConfig {
            feature_dim: feature_dim(city.region(0).poi.len()),
            dim: 16,
            layers: 2,
            heads: 2,
        },
        11,
    )
    .unwrap();
    let report = gradient_check(&city, &graph, &env_cfg, &params, 0, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "max relative error {} at {}[{}]",
        report.max_rel_err,
        report.worst_param,
        report.worst_index
    );
    assert_eq!(report.params_checked, params.param_count());
}
