//! End-to-end CLI checks: round-trips between subcommands, the documented
//! exit codes, and determinism of greedy rollouts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metrex"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn metrex")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small-instance flags shared by most invocations.
fn small_env(args: &mut Vec<String>) {
    for a in [
        "--city-k",
        "14",
        "--city-seed",
        "3",
        "--city-side-km",
        "7",
        "--env-budget",
        "3000",
        "--env-initial-lines",
        "1",
        "--env-init-line-len",
        "3",
        "--env-max-new-lines",
        "1",
    ] {
        args.push(a.to_string());
    }
}

fn run_small(prefix: &[&str], extra: &[(&str, &str)]) -> Output {
    let mut args: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    small_env(&mut args);
    for (k, v) in extra {
        args.push(k.to_string());
        if !v.is_empty() {
            args.push(v.to_string());
        }
    }
    bin().args(&args).output().expect("spawn metrex")
}

#[test]
fn baseline_plan_evaluates_clean_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("gs.json");
    let out = run_small(&["baseline", "--method", "gs"], &[("--out", plan.to_str().unwrap())]);
    assert_code(&out, 0);

    let out = run_small(&["eval"], &[("--plan", plan.to_str().unwrap())]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("constraint audit: PASS"), "{}", stdout);

    for (fmt, probe) in [("geojson", "FeatureCollection"), ("svg", "<svg")] {
        let exported = dir.path().join(format!("plan.{}", fmt));
        let out = run(&[
            "export",
            "--plan",
            plan.to_str().unwrap(),
            "--format",
            fmt,
            "--out",
            exported.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        let text = std::fs::read_to_string(&exported).unwrap();
        assert!(text.contains(probe));
    }
}

#[test]
fn corrupted_plan_spacing_fails_eval_with_exit_3() {
    // A hand-built city with a 0.1 km gap: a plan produced under a
    // permissive spacing floor contains that segment, and auditing it
    // under the default t3 = 0.5 reports the spacing violation.
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("tight_city.json");
    std::fs::write(
        &city,
        r#"{"format":1,"regions":[
            {"id":0,"x_km":0.0,"y_km":0.0,"population":100,"poi":[1]},
            {"id":1,"x_km":1.0,"y_km":0.0,"population":100,"poi":[1]},
            {"id":2,"x_km":1.1,"y_km":0.0,"population":100,"poi":[1]},
            {"id":3,"x_km":2.5,"y_km":0.0,"population":100,"poi":[1]}],
            "flows":[[1,2,1000.0],[0,2,500.0],[0,1,200.0]],
            "initial_lines":[[0,1]]}"#,
    )
    .unwrap();
    let plan = dir.path().join("tight.json");
    let base = [
        "--city-file",
        city.to_str().unwrap(),
        "--env-budget",
        "2000",
        "--env-max-new-lines",
        "0",
    ];
    let mut args = vec!["baseline", "--method", "gs", "--env-t3", "0.05"];
    args.extend_from_slice(&base);
    args.extend_from_slice(&["--out", plan.to_str().unwrap()]);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 0);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    assert!(!doc["actions"].as_array().unwrap().is_empty());

    let mut args = vec!["eval", "--plan", plan.to_str().unwrap()];
    args.extend_from_slice(&base);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("constraint audit: FAIL"), "{}", stdout);
    assert!(stdout.contains("spacing"), "{}", stdout);
}

#[test]
fn cached_metric_corruption_fails_eval() {
    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("gs.json");
    let out = run_small(
        &["baseline", "--method", "gs"],
        &[("--out", plan_path.to_str().unwrap())],
    );
    assert_code(&out, 0);
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    doc["c_od"] = serde_json::json!(doc["c_od"].as_f64().unwrap() + 1.0);
    std::fs::write(&plan_path, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = run_small(&["eval"], &[("--plan", plan_path.to_str().unwrap())]);
    assert_code(&out, 3);
}

#[test]
fn greedy_rollout_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_dir = dir.path().join("run");
    let out = run_small(
        &["train", "--deterministic"],
        &[
            ("--out-dir", ckpt_dir.to_str().unwrap()),
            ("--agent-dim", "8"),
            ("--ppo-iterations", "1"),
            ("--ppo-episodes-per-iteration", "2"),
            ("--ppo-epochs-per-batch", "1"),
        ],
    );
    assert_code(&out, 0);
    let ckpt = ckpt_dir.join("checkpoint.json");
    let roll = |path: &Path| {
        let out = run_small(
            &["rollout", "--greedy"],
            &[
                ("--checkpoint", ckpt.to_str().unwrap()),
                ("--agent-dim", "8"),
                ("--out", path.to_str().unwrap()),
            ],
        );
        assert_code(&out, 0);
        std::fs::read(path).unwrap()
    };
    let a = roll(&dir.path().join("a.json"));
    let b = roll(&dir.path().join("b.json"));
    assert_eq!(a, b, "greedy rollouts differ");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[env]\nbudgett = 100.0\n").unwrap();
    let out = run(&["oracle", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 2);
}

#[test]
fn invalid_city_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("bad_city.json");
    std::fs::write(
        &city,
        r#"{"format":1,"regions":[
            {"id":0,"x_km":0,"y_km":0,"population":1,"poi":[]},
            {"id":1,"x_km":1,"y_km":0,"population":1,"poi":[]}],
            "flows":[[0,1,-5.0]]}"#,
    )
    .unwrap();
    let out = run(&["oracle", "--city-file", city.to_str().unwrap()]);
    assert_code(&out, 3);
}

#[test]
fn oracle_guard_refusal_exits_5() {
    let out = run(&[
        "oracle",
        "--city-k",
        "14",
        "--city-side-km",
        "7",
        "--env-budget",
        "50000",
        "--env-initial-lines",
        "1",
        "--env-init-line-len",
        "3",
        "--depth-guard",
        "50",
    ]);
    assert_code(&out, 5);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("guard"), "{}", stderr);
}

#[test]
fn gradcheck_passes_on_small_city() {
    let out = run_small(
        &["gradcheck", "--seed", "1"],
        &[("--agent-dim", "8"), ("--agent-layers", "1")],
    );
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradient check: PASS"), "{}", stdout);
}

#[test]
fn gen_city_roundtrips_through_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city.json");
    let out = run(&[
        "gen-city",
        "--k",
        "14",
        "--seed",
        "3",
        "--city-side-km",
        "7",
        "--out",
        city.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    // Plans built from the file match plans built from the same generator
    // settings (the file round-trip loses nothing).
    let dirp = dir.path().join("from_file.json");
    let out = bin()
        .args([
            "baseline",
            "--method",
            "gs",
            "--city-file",
            city.to_str().unwrap(),
            "--env-budget",
            "3000",
            "--env-initial-lines",
            "1",
            "--env-init-line-len",
            "3",
            "--env-max-new-lines",
            "1",
            "--out",
            dirp.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_code(&out, 0);
    let via_gen = dir.path().join("from_gen.json");
    let out = run_small(&["baseline", "--method", "gs"], &[("--out", via_gen.to_str().unwrap())]);
    assert_code(&out, 0);
    assert_eq!(
        std::fs::read(&dirp).unwrap(),
        std::fs::read(&via_gen).unwrap()
    );
}

#[test]
fn help_enumerates_override_flags() {
    let out = run(&["train", "--help"]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--city-k",
        "--env-budget",
        "--env-t3",
        "--env-od-pairs",
        "--agent-dim",
        "--ppo-iterations",
        "--sa-t0",
        "--ga-population",
        "--aco-ants",
    ] {
        assert!(text.contains(flag), "missing {} in --help", flag);
    }
}
