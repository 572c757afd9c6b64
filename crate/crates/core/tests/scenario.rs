use serde_json::{json, Value};

use zdaguard::scenario::{six_agent_topologies, Scenario};
use zdaguard::Error;

fn base() -> Value {
    json!({
        "model": {
            "plant": {"type": "double_integrator_network", "n": 4, "dims": 2, "measurement": "position", "leader": 0},
            "nominal": {"n": 4, "edges": [[0,1],[1,2],[2,3]]}
        },
        "sampling": {"dt_u": "0.5", "dt_y": "1", "t_f": "2"}
    })
}

fn load(v: &Value) -> Result<Scenario, Error> {
    Scenario::from_json_str(&v.to_string())
}

fn config_path(e: Error) -> String {
    match e {
        Error::Config { path, .. } => path,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn edge_list_and_adjacency_agree() {
    let a = load(&base()).unwrap();
    let mut v = base();
    v["model"]["nominal"] = json!({"n": 4, "adjacency": [[0,1,0,0],[1,0,1,0],[0,1,0,1],[0,0,1,0]]});
    let b = load(&v).unwrap();
    assert_eq!(a.model.nominal, b.model.nominal);
    assert_eq!(a.schedule.len(), 3);
}

#[test]
fn unknown_field_is_reported_by_name() {
    let mut v = base();
    v["horizon"] = json!(3);
    let e = load(&v).unwrap_err().to_string();
    assert!(e.contains("horizon"), "{e}");
}

#[test]
fn asymmetric_adjacency_names_its_path() {
    let mut v = base();
    v["schedule"] = json!([
        {"n": 4, "edges": [[0,1],[1,2],[2,3]]},
        {"n": 4, "adjacency": [[0,1,0,0],[0,0,1,0],[0,1,0,1],[0,0,1,0]]},
        {"n": 4, "edges": [[0,1],[1,2],[2,3]]}
    ]);
    assert_eq!(config_path(load(&v).unwrap_err()), "schedule[1]");
}

#[test]
fn generated_sets_respect_radius_and_cap() {
    let mut v = base();
    let pos = json!([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    v["topologies"] = json!({"positions": [pos], "radius": 1.2, "density_cap": 0.7});
    let s = load(&v).unwrap();
    let set = &s.topologies.steps[0];
    assert!(!set.is_empty());
    for t in set {
        assert!(t.is_connected());
        assert!(t.density() <= 0.7 + 1e-12);
        // diagonals are out of range
        assert!(!t.has_edge(0, 2) && !t.has_edge(1, 3));
    }
    // the four-cycle and its four spanning paths
    assert_eq!(set.len(), 5);
}

#[test]
fn unreachable_generated_set_is_a_config_error() {
    let mut v = base();
    v["topologies"] = json!({"positions": [[[0.0, 0.0], [5.0, 0.0], [10.0, 0.0], [15.0, 0.0]]], "radius": 1.0, "density_cap": 1.0});
    assert_eq!(config_path(load(&v).unwrap_err()), "topologies.positions[0]");
}

#[test]
fn stability_identity_and_range() {
    let mut v = base();
    v["stability"] = json!({"alpha": 0.9});
    let s = load(&v).unwrap();
    let st = s.stability.unwrap();
    assert_eq!(st.p.len(), 3);
    assert_eq!(st.p[0], nalgebra::DMatrix::identity(16, 16));
    v["stability"] = json!({"alpha": 1.5});
    assert_eq!(config_path(load(&v).unwrap_err()), "stability.alpha");
}

#[test]
fn short_schedule_and_wrong_x0_are_rejected() {
    let mut v = base();
    v["schedule"] = json!([{"n": 4, "edges": [[0,1],[1,2],[2,3]]}]);
    assert_eq!(config_path(load(&v).unwrap_err()), "schedule");
    let mut v = base();
    v["sim"] = json!({"steps": 2, "x0": [0.0, 1.0]});
    assert_eq!(config_path(load(&v).unwrap_err()), "sim.x0");
}

#[test]
fn six_agent_fixture_topologies_are_distinct_and_connected() {
    let (ring, chords) = six_agent_topologies();
    assert!(ring.is_connected() && chords.is_connected());
    assert_eq!(ring.edges().len(), 6);
    assert_ne!(ring, chords);
}
