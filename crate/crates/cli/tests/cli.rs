use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use zdaguard::scenario::Scenario;
use zdaguard::switching::{brute_force_select, DEFAULT_SEQUENCE_CAP};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zdaguard"))
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn six_agent(noise: bool) -> Value {
    let mut v = json!({
        "model": {
            "plant": {"type": "double_integrator_network", "n": 6, "dims": 3, "measurement": "position",
                      "leader": 0, "sync": {"kp": 1.0, "kd": 1.5, "kl": 1.0}},
            "nominal": {"n": 6, "edges": [[0,1],[1,2],[2,3],[3,4],[4,5],[0,5]]}
        },
        "sampling": {"dt_u": "0.5", "dt_y": "1", "t_f": "4"},
        "attack": {"kind": "enforced", "tol": 1e-8},
        "sim": {"steps": 4, "noise": {"process_std": 0.0, "sensor_std": 0.0}},
        "seed": 3
    });
    if noise {
        v["sim"]["noise"] = json!({"process_std": 1e-4, "sensor_std": 5e-3});
    }
    v
}

fn three_topology() -> Value {
    json!({
        "model": {
            "plant": {"type": "double_integrator_network", "n": 3, "dims": 1, "measurement": "full_state", "leader": 0},
            "nominal": {"n": 3, "edges": [[0,1],[1,2]]}
        },
        "sampling": {"dt_u": "0.5", "dt_y": "1", "t_f": "2"},
        "topologies": {"steps": [[
            {"n": 3, "edges": [[0,1],[1,2]]},
            {"n": 3, "edges": [[0,1],[0,2]]},
            {"n": 3, "edges": [[0,2],[1,2]]}
        ]]},
        "gains": {"type": "consensus", "kp": 0.3, "kd": 0.4}
    })
}

fn csv_header(p: &Path) -> String {
    fs::read_to_string(p).unwrap().lines().next().unwrap().to_string()
}

fn csv_column(p: &Path, col: usize) -> Vec<f64> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean,"))
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn metrics_on_six_agent_fixture() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "s.json", &six_agent(false));
    let out = d.path().join("out");
    let o = run(&["metrics", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_header(&out.join("metrics.csv")), "window,k,ell,j_con,j_obs,j_rob,j_sen");
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.lines().last().unwrap().starts_with("mean,,,"));
    let j: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["j_con", "j_obs", "j_rob", "j_sen"] {
        assert!(j[0][key].as_f64().unwrap().is_finite());
    }
    assert!(out.join("manifest.json").exists());
    let entries = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").count();
    assert_eq!(entries, 1);
}

#[test]
fn empty_topology_has_zero_observability() {
    let d = TempDir::new().unwrap();
    let v = json!({
        "model": {"plant": {"type": "double_integrator_network", "n": 3, "dims": 1, "leader": 0},
                  "nominal": {"n": 3, "edges": []}},
        "sampling": {"dt_u": "1", "dt_y": "1", "t_f": "2"}
    });
    let cfg = write(d.path(), "s.json", &v);
    let out = d.path().join("out");
    let o = run(&["metrics", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_column(&out.join("metrics.csv"), 4), vec![0.0]);
}

#[test]
fn malformed_config_names_the_field() {
    let d = TempDir::new().unwrap();
    let mut v = six_agent(false);
    v["sampling"]["dt_y"] = json!("fast");
    let cfg = write(d.path(), "s.json", &v);
    let o = run(&["metrics", "--config", s(&cfg), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampling.dt_y"));

    let cfg = d.path().join("broken.json");
    fs::write(&cfg, "{\"model\": ").unwrap();
    let o = run(&["metrics", "--config", s(&cfg), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let mut v = six_agent(false);
    v["model"]["plant"]["n"] = json!(5);
    let cfg = write(d.path(), "n.json", &v);
    let o = run(&["metrics", "--config", s(&cfg), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model"));
}

#[test]
fn enforced_attack_plan_and_replay() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "s.json", &six_agent(false));
    let a = d.path().join("a");
    let o = run(&["attack", "--config", s(&cfg), "--out", s(&a), "--kind", "enforced"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plan: Value = serde_json::from_str(&fs::read_to_string(a.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["certificate"]["kind"], "nullspace");
    assert_eq!(csv_header(&a.join("deviation.csv")), "step,t,deviation");
    let synth = csv_column(&a.join("deviation.csv"), 2);
    assert!(synth.iter().all(|d| *d <= 1e-8));

    let sim = d.path().join("sim");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&sim), "--plan", s(&a.join("plan.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let replay = csv_column(&sim.join("deviation.csv"), 2);
    assert_eq!(replay.len(), synth.len());
    for (r, s) in replay.iter().zip(&synth) {
        assert!((r - s).abs() <= 1e-12, "{r} vs {s}");
    }
    assert_eq!(
        csv_header(&sim.join("trace.csv")),
        "step,t,edges,residual,threshold,detected,tracking_error,state_norm,estimate_error,attack_norm"
    );
}

#[test]
fn intrinsic_attack_without_zeros_is_infeasible() {
    let d = TempDir::new().unwrap();
    // C = I leaves no invariant zeros
    let v = json!({
        "model": {"plant": {"type": "fixed",
                            "a": [[0.0, -1.0, 1.0, -0.5], 2, 2],
                            "b": [[0.0, 1.0], 2, 1],
                            "c": [[1.0, 0.0, 0.0, 1.0], 2, 2]},
                  "nominal": {"n": 1, "edges": []}},
        "sampling": {"dt_u": "0.5", "dt_y": "0.5", "t_f": "1"}
    });
    let cfg = write(d.path(), "s.json", &v);
    let o = run(&["attack", "--config", s(&cfg), "--out", s(&d.path().join("o")), "--kind", "intrinsic"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no invariant zeros"));
}

#[test]
fn brute_optimize_matches_enumeration_and_shor_bounds_it() {
    let d = TempDir::new().unwrap();
    let v = three_topology();
    let cfg = write(d.path(), "s.json", &v);
    let b = d.path().join("b");
    let o = run(&["optimize", "--config", s(&cfg), "--out", s(&b), "--method", "brute", "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let res: Value = serde_json::from_str(&fs::read_to_string(b.join("result.json")).unwrap()).unwrap();
    let sc = Scenario::from_json_str(&v.to_string()).unwrap();
    let direct = brute_force_select(&sc.switch_spec(), DEFAULT_SEQUENCE_CAP).unwrap();
    let adj: Vec<Value> = direct.topologies.iter().map(|t| json!(t.adjacency)).collect();
    let got: Vec<Value> = res["result"]["topologies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["adjacency"].clone())
        .collect();
    assert_eq!(got, adj);
    let brute = res["result"]["metrics"]["j_rob"].as_f64().unwrap();

    let sh = d.path().join("shor");
    let o = run(&["optimize", "--config", s(&cfg), "--out", s(&sh), "--method", "shor"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let res: Value = serde_json::from_str(&fs::read_to_string(sh.join("result.json")).unwrap()).unwrap();
    let gamma = res["result"]["gamma_relax"].as_f64().unwrap();
    assert!(gamma <= brute + 1e-7, "{gamma} vs {brute}");

    // the chosen schedule feeds back into metrics
    let m = d.path().join("m");
    let o = run(&["metrics", "--config", s(&cfg), "--out", s(&m), "--schedule", s(&b.join("schedule.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let jr = csv_column(&m.join("metrics.csv"), 5)[0];
    assert!((jr - brute).abs() <= 1e-8 * (1.0 + brute));
}

#[test]
fn infeasible_thresholds_exit_three() {
    let d = TempDir::new().unwrap();
    let mut v = three_topology();
    v["thresholds"] = json!({"c_c": 1e-6, "c_o": 1e-8, "c_s": 1e3});
    let cfg = write(d.path(), "s.json", &v);
    for m in ["brute", "shor"] {
        let o = run(&["optimize", "--config", s(&cfg), "--out", s(&d.path().join(m)), "--method", m]);
        assert_eq!(o.status.code(), Some(3), "{m}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn topology_dependent_plant_rejects_lifted_methods() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "s.json", &six_agent(false));
    let o = run(&["optimize", "--config", s(&cfg), "--out", s(&d.path().join("o")), "--method", "shor"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("brute_force_select"));
}

#[test]
fn simulation_is_reproducible_from_the_same_inputs() {
    let d = TempDir::new().unwrap();
    let mut v = six_agent(true);
    v["sim"]["steps"] = json!(30);
    v["schedule"] = json!(vec![v["model"]["nominal"].clone(); 31]);
    let cfg = write(d.path(), "s.json", &v);
    let a = d.path().join("a");
    let b = d.path().join("b");
    for out in [&a, &b] {
        let o = run(&["simulate", "--config", s(&cfg), "--out", s(out), "--seed", "11"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read_to_string(a.join("trace.csv")).unwrap(),
        fs::read_to_string(b.join("trace.csv")).unwrap()
    );
    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["command"], "simulate");
    let c = d.path().join("c");
    run(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "12"]);
    assert_ne!(
        fs::read_to_string(a.join("trace.csv")).unwrap(),
        fs::read_to_string(c.join("trace.csv")).unwrap()
    );
}

#[test]
fn short_schedule_is_a_config_error() {
    let d = TempDir::new().unwrap();
    let mut v = six_agent(false);
    v["sim"]["steps"] = json!(10);
    // without a schedule the nominal topology covers the whole run
    let cfg = write(d.path(), "a.json", &v);
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&d.path().join("a"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ring = v["model"]["nominal"].clone();
    v["schedule"] = json!(vec![ring; 5]);
    let cfg = write(d.path(), "b.json", &v);
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&d.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule"));
}
