mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use zdaguard::discretize::{assemble_stacked, SamplingConfig};
use zdaguard::model::{build_double_integrator_network_with, build_fixed, MeasurementKind, Topology};
use zdaguard::scenario::{six_agent_network, six_agent_topologies};
use zdaguard::sim::{
    metrics_over_time, run, run_cartpole_demo, stabilize_consensus, AttackMode, ControllerConfig, NoiseConfig,
    Reference, SimConfig,
};
use zdaguard::switching::GainPolicy;
use zdaguard::zda::{enforced_attack_max_growth, AttackKind, AttackPlan, Certificate};

fn six_setup() -> (zdaguard::model::SystemModel, Topology, Topology, SamplingConfig) {
    let (ring, chords) = six_agent_topologies();
    (six_agent_network(), ring, chords, SamplingConfig::new("0.5", "1", "4").unwrap())
}

fn path4() -> (zdaguard::model::SystemModel, Topology) {
    let t = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let m = build_double_integrator_network_with(4, 2, t.clone(), MeasurementKind::Position, Some(0), None).unwrap();
    (m, t)
}

#[test]
fn identical_seeds_give_identical_traces() {
    let (m, ring, _, s) = six_setup();
    let mut cfg = SimConfig::new(40);
    cfg.seed = 9;
    cfg.attack = AttackMode::Random {
        probability: 0.1,
        scale: 1.0,
    };
    let sched = vec![ring; 41];
    let a = run(&m, &s, &sched, &cfg).unwrap();
    let b = run(&m, &s, &sched, &cfg).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.residuals, b.residuals);
    assert_eq!(a.flags, b.flags);
    cfg.seed = 10;
    let c = run(&m, &s, &sched, &cfg).unwrap();
    assert_ne!(a.residuals, c.residuals);
}

#[test]
fn recursion_matches_stacked_prediction() {
    // asynchronous periods with holds straddling sensing instants
    let mut rng = common::rng(4);
    for seed in 0..5u64 {
        let a = common::random_stable(3 + seed as usize % 3, &mut rng);
        let p = a.nrows();
        let b = common::random_matrix(p, 2, &mut rng);
        let c = common::random_matrix(1, p, &mut rng);
        let m = build_fixed(a, b, c).unwrap();
        let s = SamplingConfig::new("0.3", "0.2", "1.2").unwrap();
        let sched = vec![m.nominal.clone(); s.k() + 1];
        let ops = assemble_stacked(&m, &s, &sched).unwrap();
        let x0 = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let a_seq = DMatrix::from_fn(2, s.ell() + 1, |_, _| rng.random_range(-1.0..1.0));
        let plan = AttackPlan {
            kind: AttackKind::Enforced,
            a_seq: a_seq.clone(),
            x_a0: DVector::zeros(p),
            certificate: Certificate::Nullspace {
                vector: DVector::zeros(1),
                residual: 0.0,
            },
            claimed_stealthy_until: 0.0,
            generator: None,
        };
        let mut cfg = SimConfig::new(s.k());
        cfg.noise = NoiseConfig::none();
        cfg.detector.threshold = Some(1.0);
        cfg.x0 = Some(x0.clone());
        cfg.attack = AttackMode::Plan { plan, start_step: 0 };
        let tr = run(&m, &s, &sched, &cfg).unwrap();
        let xs = ops.states(&x0, &DVector::from_column_slice(a_seq.as_slice()));
        for k in 0..=s.k() {
            let d = (&tr.states[k] - xs.rows(k * p, p)).amax();
            assert!(d < 1e-9, "seed {seed} step {k}: {d}");
        }
    }
}

#[test]
fn false_alarm_rate_is_controlled() {
    let (m, ring, _, s) = six_setup();
    let sched = vec![ring; 101];
    let alarms = (0..50u64)
        .filter(|&seed| {
            let mut cfg = SimConfig::new(100);
            cfg.seed = seed;
            let tr = run(&m, &s, &sched, &cfg).unwrap();
            tr.detected_at.is_some()
        })
        .count();
    assert!(alarms as f64 <= 0.05 * 50.0, "{alarms} of 50 noise-only runs raised an alarm");
}

#[test]
fn clean_run_tracks_constant_reference() {
    let (m, t) = path4();
    let s = SamplingConfig::new("0.5", "1", "2").unwrap();
    let (kp, kd, kl) = stabilize_consensus(&m, &s, &[t.clone()], 0.5, 1.0, 0.5).unwrap();
    let reference = Reference::Constant {
        positions: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
    };
    let (xr, _) = reference.at(&m, 0.0).unwrap();
    let mut cfg = SimConfig::new(400);
    cfg.noise = NoiseConfig::none();
    cfg.controller = ControllerConfig::Consensus { kp, kd, kl };
    cfg.reference = reference;
    cfg.x0 = Some(xr + DVector::from_fn(16, |i, _| 0.3 * (i as f64 * 1.7).sin()));
    let tr = run(&m, &s, &vec![t; 401], &cfg).unwrap();
    assert!(*tr.tracking_error.last().unwrap() < 1e-6, "{:?}", tr.tracking_error.last());
    assert!(tr.detected_at.is_none());
}

#[test]
fn stabilizer_returns_gains_with_contracting_map() {
    let (m, t) = path4();
    let s = SamplingConfig::new("0.5", "1", "2").unwrap();
    // (0.3, 0.5, 0.3) is unstable once sampled
    let (kp, kd, kl) = stabilize_consensus(&m, &s, &[t], 0.3, 0.5, 0.3).unwrap();
    assert!(kp < 0.3 && kl < 0.3);
    assert!(kd > 0.0);
}

#[test]
fn stealthy_attack_on_fixed_topology_stays_hidden_while_state_drifts() {
    let (m, ring, _, s) = six_setup();
    let kk = s.k();
    let sched = vec![ring; kk + 1];
    let ops = assemble_stacked(&m, &s, &sched).unwrap();
    let plan = enforced_attack_max_growth(&ops, &s, 1e-9, 0.1).unwrap();
    let mut cfg = SimConfig::new(kk);
    cfg.noise = NoiseConfig::none();
    let nominal = run(&m, &s, &sched, &cfg).unwrap();
    cfg.attack = AttackMode::Plan {
        plan: plan.clone(),
        start_step: 0,
    };
    let tr = run(&m, &s, &sched, &cfg).unwrap();
    assert!(tr.residuals.iter().all(|r| *r <= 1e-8), "{:?}", tr.residuals);
    assert!(tr.detected_at.is_none());
    let dev: Vec<f64> = tr.states.iter().zip(&nominal.states).map(|(a, b)| (a - b).norm()).collect();
    for w in dev.windows(2) {
        assert!(w[1] > w[0], "{dev:?}");
    }
    assert!(dev[kk] >= 10.0 * dev[0], "{dev:?}");
}

#[test]
fn switching_mid_run_reveals_the_attack() {
    let (m, ring, chords, s) = six_setup();
    let kk = s.k();
    let ops = assemble_stacked(&m, &s, &vec![ring.clone(); kk + 1]).unwrap();
    let plan = zdaguard::zda::enforced_attack(&ops, &s, 1e-8).unwrap().scaled(10.0);
    let switch_at = 2;
    let mut sched = vec![ring.clone(); switch_at];
    sched.extend(vec![chords; 300]);
    let mut cfg = SimConfig::new(kk);
    cfg.attack = AttackMode::Plan { plan, start_step: 0 };
    let tr = run(&m, &s, &sched, &cfg).unwrap();
    let det = tr.detected_at.expect("switch reveals the attack");
    assert!(det >= switch_at && det <= switch_at + 2, "detected at {det}");
    for k in 0..det {
        assert!(!tr.flags[k]);
    }
    // detection flag implies residual above threshold
    for (f, r) in tr.flags.iter().zip(&tr.residuals) {
        assert!(!f || *r > tr.threshold);
    }
}

#[test]
fn countermeasure_stops_the_attack_input() {
    let (m, ring, chords, s) = six_setup();
    let kk = s.k();
    let ops = assemble_stacked(&m, &s, &vec![ring.clone(); kk + 1]).unwrap();
    let plan = zdaguard::zda::enforced_attack(&ops, &s, 1e-8).unwrap().scaled(10.0);
    let mut sched = vec![ring; 2];
    sched.extend(vec![chords; 10]);
    let mut cfg = SimConfig::new(8);
    cfg.attack = AttackMode::Plan { plan, start_step: 0 };
    cfg.countermeasure = true;
    let tr = run(&m, &s, &sched, &cfg).unwrap();
    let det = tr.detected_at.unwrap();
    let first_blocked = s.hold_at(det).unwrap();
    for l in first_blocked..tr.attacks.len() {
        assert_eq!(tr.attacks[l].norm(), 0.0);
    }
}

#[test]
fn unaligned_attack_start_is_rejected() {
    let m = build_fixed(
        DMatrix::from_row_slice(1, 1, &[-1.0]),
        DMatrix::from_row_slice(1, 1, &[1.0]),
        DMatrix::from_row_slice(1, 1, &[1.0]),
    )
    .unwrap();
    let s = SamplingConfig::new("0.3", "0.2", "1.2").unwrap();
    let plan = AttackPlan {
        kind: AttackKind::Enforced,
        a_seq: DMatrix::zeros(1, 4),
        x_a0: DVector::zeros(1),
        certificate: Certificate::Nullspace {
            vector: DVector::zeros(1),
            residual: 0.0,
        },
        claimed_stealthy_until: 0.0,
        generator: None,
    };
    let mut cfg = SimConfig::new(4);
    cfg.attack = AttackMode::Plan { plan, start_step: 1 };
    assert!(run(&m, &s, &vec![m.nominal.clone(); 5], &cfg).is_err());
}

#[test]
fn short_schedule_is_rejected() {
    let (m, ring, _, s) = six_setup();
    let cfg = SimConfig::new(10);
    assert!(run(&m, &s, &vec![ring; 5], &cfg).is_err());
}

#[test]
fn cartpole_attack_splits_state_and_estimate() {
    let d = run_cartpole_demo(1, 0.01).unwrap();
    assert!(d.plan.generator.as_ref().unwrap().sigma > 0.0);
    assert!(d.max_output_deviation <= 1e-6);
    assert!(d.state_growth >= 10.0);
    assert!(d.estimate_ratio <= 10.0);
    // attack disabled: state and estimate stay bounded
    let nx = d.nominal.states.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let ne = d.nominal.estimates.iter().map(|x| x.norm()).fold(0.0, f64::max);
    assert!(nx < 10.0 && ne < 10.0);
}

#[test]
fn constant_schedule_gives_identical_window_metrics() {
    let (m, t) = path4();
    let s = SamplingConfig::new("0.5", "1", "2").unwrap();
    let r = metrics_over_time(&m, &s, &GainPolicy::Consensus { kp: 0.3, kd: 0.4 }, None, &vec![t; 9], 1).unwrap();
    assert_eq!(r.len(), 7);
    for x in &r[1..] {
        assert_eq!(x.j_rob, r[0].j_rob);
        assert_eq!(x.j_sen, r[0].j_sen);
    }
}
