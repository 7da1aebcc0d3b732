//! Expansion plans: the persisted action log with final geometry and
//! metrics, replay-based auditing, and GeoJSON / SVG exports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use metrex_core::city::City;
use metrex_core::env::{ActionMode, Env, EnvConfig};
use metrex_core::metro::MetroState;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub format: u32,
    /// Producing method, e.g. "gs", "sa", "ga", "aco", "agent-greedy",
    /// "agent-sample", "oracle".
    pub method: String,
    /// Seed of the producing algorithm (0 for deterministic methods).
    pub seed: u64,
    /// Seed of the initial-network synthesis; needed to replay.
    pub env_seed: u64,
    pub actions: Vec<PlanAction>,
    pub final_lines: Vec<PlanLine>,
    pub c_od: f64,
    pub ie: f64,
    pub spend: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanAction {
    pub step: usize,
    pub region_id: usize,
    /// "extend" or "new_line".
    pub mode: String,
    pub line_id: u32,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanLine {
    pub line_id: u32,
    pub stations: Vec<PlanStation>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanStation {
    pub region_id: usize,
    pub x_km: f64,
    pub y_km: f64,
    pub interchange: bool,
}

impl Plan {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: Plan = serde_json::from_str(&text)?;
        if plan.format != 1 {
            return Err(CliError::Validation(format!(
                "unsupported plan format {}, expected 1",
                plan.format
            )));
        }
        Ok(plan)
    }
}

fn lines_snapshot(state: &MetroState, city: &City) -> Vec<PlanLine> {
    let interchanges: BTreeSet<usize> = state.interchanges();
    state
        .lines()
        .iter()
        .map(|line| PlanLine {
            line_id: line.id.0,
            stations: line
                .stations()
                .iter()
                .map(|&s| PlanStation {
                    region_id: s,
                    x_km: city.region(s).x,
                    y_km: city.region(s).y,
                    interchange: interchanges.contains(&s),
                })
                .collect(),
        })
        .collect()
}

/// Replays an action sequence from the reset state into a full plan
/// document.
pub fn plan_from_actions(
    city: &City,
    cfg: &EnvConfig,
    env_seed: u64,
    actions: &[usize],
    method: &str,
    seed: u64,
) -> CliResult<Plan> {
    let mut env = Env::reset(city, cfg, env_seed)?;
    let mut log = Vec::with_capacity(actions.len());
    for (step, &node) in actions.iter().enumerate() {
        let out = env.step(node)?;
        log.push(PlanAction {
            step,
            region_id: node,
            mode: match out.info.mode {
                ActionMode::Extend { .. } => "extend".into(),
                ActionMode::NewLine => "new_line".into(),
            },
            line_id: out.info.line_id.0,
            cost: out.info.cost,
        });
    }
    Ok(Plan {
        format: 1,
        method: method.into(),
        seed,
        env_seed,
        actions: log,
        final_lines: lines_snapshot(env.state(), city),
        c_od: env.cod(),
        ie: env.ie(),
        spend: env.spend(),
    })
}

/// One audited constraint violation.
#[derive(Debug, Clone)]
pub struct AuditFinding {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    pub c_od: f64,
    pub ie: f64,
    pub spend: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Replays the plan and re-verifies every constraint from raw geometry:
/// mask membership, station spacing, bend angle, budget and line quota,
/// plus the cached metric fields. The geometric checks are recomputed
/// directly (acos form) rather than through the mask code.
pub fn audit(plan: &Plan, city: &City, cfg: &EnvConfig) -> CliResult<AuditReport> {
    let mut env = Env::reset(city, cfg, plan.env_seed)?;
    let mut findings = Vec::new();
    for (step, act) in plan.actions.iter().enumerate() {
        let node = act.region_id;
        if node >= city.len() {
            findings.push(AuditFinding {
                step,
                message: format!("region {} does not exist", node),
            });
            break;
        }
        let mask = env.action_mask();
        if !mask.mask[node] {
            findings.push(AuditFinding {
                step,
                message: format!(
                    "region {} is masked out at step {}: {}",
                    node,
                    step,
                    diagnose_infeasible(city, cfg, &env, act)
                ),
            });
            break;
        }
        let before_budget = env.state().budget_remaining;
        let before_quota = env.state().new_lines_remaining;
        let stations_before: Vec<usize> = env.state().stations().into_iter().collect();
        let extension_feasible = mask
            .resolved
            .get(&node)
            .map(|r| matches!(r.mode, ActionMode::Extend { .. }))
            .unwrap_or(false);
        let out = env.step(node)?;

        if out.info.cost > before_budget + 1e-9 {
            findings.push(AuditFinding {
                step,
                message: format!(
                    "cost {} exceeds remaining budget {}",
                    out.info.cost, before_budget
                ),
            });
        }
        match out.info.mode {
            ActionMode::Extend { line, end } => {
                if act.mode != "extend" {
                    findings.push(AuditFinding {
                        step,
                        message: format!("logged mode {:?} but executed an extension", act.mode),
                    });
                }
                // The node joined at a line end; its neighbor on the line
                // is the old terminal.
                let line_ref = env.state().line(line).expect("line exists after step");
                let st = line_ref.stations();
                let (new_pos, terminal, sub) = match end {
                    metrex_core::metro::LineEnd::Front => {
                        (0, st[1], if st.len() >= 3 { Some(st[2]) } else { None })
                    }
                    metrex_core::metro::LineEnd::Back => (
                        st.len() - 1,
                        st[st.len() - 2],
                        if st.len() >= 3 {
                            Some(st[st.len() - 3])
                        } else {
                            None
                        },
                    ),
                };
                assert_eq!(st[new_pos], node);
                let d = city.distance(node, terminal);
                if d < cfg.t3 - 1e-9 || d > cfg.t4 + 1e-9 {
                    findings.push(AuditFinding {
                        step,
                        message: format!(
                            "segment {} -> {} spacing {:.4} km outside [{}, {}]",
                            terminal, node, d, cfg.t3, cfg.t4
                        ),
                    });
                }
                if let Some(sub) = sub {
                    let angle = bend_angle_deg(city, node, terminal, sub);
                    if angle < cfg.angle_min_deg - 1e-6 {
                        findings.push(AuditFinding {
                            step,
                            message: format!(
                                "bend at {} is {:.2} degrees, sharper than {}",
                                terminal, angle, cfg.angle_min_deg
                            ),
                        });
                    }
                }
            }
            ActionMode::NewLine => {
                if act.mode != "new_line" {
                    findings.push(AuditFinding {
                        step,
                        message: format!("logged mode {:?} but executed a new line", act.mode),
                    });
                }
                if extension_feasible {
                    findings.push(AuditFinding {
                        step,
                        message: format!(
                            "extension was feasible for region {} but a new line was opened",
                            node
                        ),
                    });
                }
                if before_quota == 0 {
                    findings.push(AuditFinding {
                        step,
                        message: "new line opened with exhausted quota".into(),
                    });
                }
                let min_d = stations_before
                    .iter()
                    .map(|&s| city.distance(node, s))
                    .fold(f64::INFINITY, f64::min);
                if min_d < cfg.t3 - 1e-9 {
                    findings.push(AuditFinding {
                        step,
                        message: format!(
                            "new start {} is {:.4} km from a station, below t3 = {}",
                            node, min_d, cfg.t3
                        ),
                    });
                }
                if cfg.new_start_within_t4 && min_d > cfg.t4 + 1e-9 {
                    findings.push(AuditFinding {
                        step,
                        message: format!(
                            "new start {} is {:.4} km from the network, beyond t4 = {}",
                            node, min_d, cfg.t4
                        ),
                    });
                }
            }
        }
        if (out.info.cost - act.cost).abs() > 1e-9 {
            findings.push(AuditFinding {
                step,
                message: format!("logged cost {} but executed cost {}", act.cost, out.info.cost),
            });
        }
    }
    if env.state().budget_remaining < -1e-9 {
        findings.push(AuditFinding {
            step: plan.actions.len(),
            message: "budget went negative".into(),
        });
    }
    // Cached metrics must match the replay exactly (both sides come from
    // the same arithmetic; JSON round-trips f64 losslessly).
    if env.cod() != plan.c_od {
        findings.push(AuditFinding {
            step: plan.actions.len(),
            message: format!("cached C_od {} differs from replayed {}", plan.c_od, env.cod()),
        });
    }
    if env.ie() != plan.ie {
        findings.push(AuditFinding {
            step: plan.actions.len(),
            message: format!("cached IE {} differs from replayed {}", plan.ie, env.ie()),
        });
    }
    if env.spend() != plan.spend {
        findings.push(AuditFinding {
            step: plan.actions.len(),
            message: format!(
                "cached spend {} differs from replayed {}",
                plan.spend,
                env.spend()
            ),
        });
    }
    Ok(AuditReport {
        findings,
        c_od: env.cod(),
        ie: env.ie(),
        spend: env.spend(),
    })
}

/// Explains why a logged action is infeasible in the current state, by
/// testing its constraints directly against the logged mode.
fn diagnose_infeasible(
    city: &City,
    cfg: &EnvConfig,
    env: &Env<'_>,
    act: &PlanAction,
) -> String {
    let node = act.region_id;
    let state = env.state();
    if act.mode == "extend" {
        let Some(line) = state.line(metrex_core::metro::LineId(act.line_id)) else {
            return format!("line {} does not exist", act.line_id);
        };
        if line.contains(node) {
            return format!("region {} is already on line {}", node, act.line_id);
        }
        let mut msgs = Vec::new();
        for end in metrex_core::metro::LineEnd::BOTH {
            if line.len() == 1 && end == metrex_core::metro::LineEnd::Front {
                continue;
            }
            let terminal = line.terminal(end);
            let d = city.distance(node, terminal);
            if d < cfg.t3 || d > cfg.t4 {
                msgs.push(format!(
                    "station spacing {:.3} km from terminal {} outside [{}, {}]",
                    d, terminal, cfg.t3, cfg.t4
                ));
                continue;
            }
            if let Some(sub) = line.subterminal(end) {
                let angle = bend_angle_deg(city, node, terminal, sub);
                if angle < cfg.angle_min_deg {
                    msgs.push(format!(
                        "bend of {:.1} degrees at terminal {} sharper than {}",
                        angle, terminal, cfg.angle_min_deg
                    ));
                    continue;
                }
            }
            msgs.push(format!(
                "cost exceeds remaining budget {:.0}",
                state.budget_remaining
            ));
        }
        msgs.join("; ")
    } else {
        if state.new_lines_remaining == 0 {
            return "new-line quota exhausted".into();
        }
        let min_d = state
            .stations()
            .iter()
            .map(|&s| city.distance(node, s))
            .fold(f64::INFINITY, f64::min);
        if min_d < cfg.t3 {
            return format!("new start {:.3} km from a station, below t3 = {}", min_d, cfg.t3);
        }
        if cfg.new_start_within_t4 && min_d > cfg.t4 {
            return format!("new start {:.3} km from the network, beyond t4 = {}", min_d, cfg.t4);
        }
        format!("cost exceeds remaining budget {:.0}", state.budget_remaining)
    }
}

/// Angle at `terminal` between the rays to `node` and to `sub`, degrees.
fn bend_angle_deg(city: &City, node: usize, terminal: usize, sub: usize) -> f64 {
    let t = city.region(terminal);
    let n = city.region(node);
    let s = city.region(sub);
    let (ux, uy) = (n.x - t.x, n.y - t.y);
    let (vx, vy) = (s.x - t.x, s.y - t.y);
    let nu = (ux * ux + uy * uy).sqrt();
    let nv = (vx * vx + vy * vy).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 180.0;
    }
    let c = ((ux * vx + uy * vy) / (nu * nv)).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// GeoJSON export: one LineString per line, one Point per station
/// (interchanges flagged). Coordinates are the plan's planar kilometers,
/// declared in a top-level `crs_note` foreign member.
pub fn to_geojson(plan: &Plan) -> CliResult<String> {
    let mut features = Vec::new();
    for line in &plan.final_lines {
        let coords: Vec<[f64; 2]> = line.stations.iter().map(|s| [s.x_km, s.y_km]).collect();
        features.push(serde_json::json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": {"kind": "line", "line_id": line.line_id},
        }));
    }
    // One point per distinct station region.
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    for line in &plan.final_lines {
        for s in &line.stations {
            if !seen.insert(s.region_id) {
                continue;
            }
            let lines: Vec<u32> = plan
                .final_lines
                .iter()
                .filter(|l| l.stations.iter().any(|x| x.region_id == s.region_id))
                .map(|l| l.line_id)
                .collect();
            features.push(serde_json::json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [s.x_km, s.y_km]},
                "properties": {
                    "kind": "station",
                    "region_id": s.region_id,
                    "interchange": s.interchange,
                    "lines": lines,
                },
            }));
        }
    }
    let doc = serde_json::json!({
        "type": "FeatureCollection",
        "crs_note": "planar kilometers in the city frame, not WGS84",
        "features": features,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

const LINE_COLORS: [&str; 8] = [
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf", "#17becf",
];

/// Self-contained SVG export (inline styles only): polylines for lines,
/// circles for stations, double rings for interchanges.
pub fn to_svg(plan: &Plan) -> CliResult<String> {
    let stations: Vec<&PlanStation> = plan
        .final_lines
        .iter()
        .flat_map(|l| l.stations.iter())
        .collect();
    if stations.is_empty() {
        return Err(CliError::Validation("plan has no stations to draw".into()));
    }
    let min_x = stations.iter().map(|s| s.x_km).fold(f64::INFINITY, f64::min);
    let max_x = stations.iter().map(|s| s.x_km).fold(f64::NEG_INFINITY, f64::max);
    let min_y = stations.iter().map(|s| s.y_km).fold(f64::INFINITY, f64::min);
    let max_y = stations.iter().map(|s| s.y_km).fold(f64::NEG_INFINITY, f64::max);
    let span_x = (max_x - min_x).max(1e-6);
    let span_y = (max_y - min_y).max(1e-6);
    let width = 800.0;
    let margin = 40.0;
    let scale = (width - 2.0 * margin) / span_x;
    let height = span_y * scale + 2.0 * margin;
    let px = |x: f64| margin + (x - min_x) * scale;
    // SVG y grows downward; flip so north stays up.
    let py = |y: f64| height - margin - (y - min_y) * scale;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">",
        width, height, width, height
    );
    let _ = writeln!(
        svg,
        "  <rect width=\"100%\" height=\"100%\" style=\"fill:#ffffff\"/>"
    );
    for (i, line) in plan.final_lines.iter().enumerate() {
        let color = LINE_COLORS[i % LINE_COLORS.len()];
        let pts: Vec<String> = line
            .stations
            .iter()
            .map(|s| format!("{:.2},{:.2}", px(s.x_km), py(s.y_km)))
            .collect();
        let _ = writeln!(
            svg,
            "  <polyline points=\"{}\" style=\"fill:none;stroke:{};stroke-width:3\"/>",
            pts.join(" "),
            color
        );
    }
    for line in &plan.final_lines {
        for s in &line.stations {
            if s.interchange {
                let _ = writeln!(
                    svg,
                    "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"7\" style=\"fill:#ffffff;stroke:#333333;stroke-width:2\"/>",
                    px(s.x_km),
                    py(s.y_km)
                );
            }
            let _ = writeln!(
                svg,
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" style=\"fill:#333333\"/>",
                px(s.x_km),
                py(s.y_km)
            );
        }
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}
