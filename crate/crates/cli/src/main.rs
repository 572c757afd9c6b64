//! zdaguard command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 infeasible, 4 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use zdaguard::discretize::SamplingConfig;
use zdaguard::metrics::average;
use zdaguard::model::Topology;
use zdaguard::scenario::{synthesize_attack, Scenario, TopologyFile};
use zdaguard::sdp::SdpOptions;
use zdaguard::sim::{self, metrics_over_time, AttackMode, SimConfig};
use zdaguard::switching::{
    add_stability_constraint, brute_force_select, build_lifted_problem, solve_rank_iteration, solve_shor,
    RankIterOptions, SwitchResult, DEFAULT_SEQUENCE_CAP,
};
use zdaguard::zda::{output_deviation, AttackKind, AttackPlan};
use zdaguard::Error;

#[derive(Parser)]
#[command(name = "zdaguard", version, about = "ZDA metrics, attack synthesis, topology switching and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Serialize)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Shor,
    Rank,
    Brute,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum KindArg {
    Intrinsic,
    Sampling,
    Enforced,
}

#[derive(Subcommand)]
enum Command {
    /// Security metrics over the schedule's horizon windows.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// JSON list of topologies overriding the scenario schedule.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Synthesizes a ZDA and reports its output deviation.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Selects a topology sequence minimizing J_rob.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "brute")]
        method: MethodArg,
    },
    /// Runs the closed-loop simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Attack plan JSON to replay from the scenario's attack start step.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

/// Written once per output directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: PathBuf,
    seed: u64,
    version: String,
    out: PathBuf,
    wall_clock_secs: f64,
    args: serde_json::Value,
}

fn version() -> String {
    option_env!("ZDAGUARD_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
    w.write_record(header).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_schedule(path: &Path, n: usize) -> Result<Vec<Topology>, Error> {
    let text = fs::read_to_string(path)?;
    let files: Vec<TopologyFile> = serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let t = match f {
                TopologyFile::Edges { n, edges } => Topology::from_edges(*n, edges),
                TopologyFile::Adjacency { n, adjacency } => {
                    let t = Topology {
                        n: *n,
                        adjacency: adjacency.clone(),
                    };
                    t.validate(true).map(|_| t)
                }
            }
            .map_err(|e| Error::config(format!("schedule[{i}]"), e.to_string()))?;
            if t.n != n {
                return Err(Error::config(format!("schedule[{i}]"), format!("{} nodes, model has {n}", t.n)));
            }
            Ok(t)
        })
        .collect()
}

fn schedule_json(s: &[Topology]) -> Vec<TopologyFile> {
    s.iter()
        .map(|t| TopologyFile::Edges {
            n: t.n,
            edges: t.edges(),
        })
        .collect()
}

fn deviation_rows(dev: &[f64], sampling: &SamplingConfig) -> Vec<Vec<String>> {
    dev.iter()
        .enumerate()
        .map(|(k, d)| vec![k.to_string(), format!("{}", sampling.t_sense(k)), format!("{d:e}")])
        .collect()
}

const DEVIATION_HEADER: [&str; 3] = ["step", "t", "deviation"];

fn load(common: &Common) -> Result<Scenario, Error> {
    let mut sc = Scenario::load(&common.config).map_err(|e| match e {
        Error::Io(io) => Error::config(common.config.display().to_string(), io.to_string()),
        other => other,
    })?;
    if let Some(s) = common.seed {
        sc.seed = s;
        sc.sim.seed = s;
    }
    Ok(sc)
}

fn cmd_metrics(sc: &Scenario, out: &Path, schedule: Option<&Path>) -> Result<serde_json::Value, Error> {
    let sched = match schedule {
        Some(p) => read_schedule(p, sc.model.agents())?,
        None => sc.schedule.clone(),
    };
    let reports = metrics_over_time(&sc.model, &sc.sampling, &sc.gains, sc.q_rob.as_ref(), &sched, 1)?;
    if reports.is_empty() {
        return Err(Error::config("schedule", "shorter than one horizon"));
    }
    let mut header = vec!["window"];
    header.extend(zdaguard::metrics::MetricReport::CSV_HEADER);
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(w, r)| {
            let mut row = vec![w.to_string()];
            row.extend(r.csv_row());
            row
        })
        .collect();
    // time-averaged summary row; k and ell are left blank
    let mean = average(&reports).expect("non-empty");
    let mut row = vec!["mean".to_string(), String::new(), String::new()];
    row.extend(mean.csv_row().into_iter().skip(2));
    rows.push(row);
    write_csv(&out.join("metrics.csv"), &header, &rows)?;
    let json: Vec<serde_json::Value> = reports.iter().map(|r| r.to_flat_json()).collect();
    write_json(&out.join("metrics.json"), &json)?;
    Ok(serde_json::json!({ "windows": reports.len(), "mean": mean.to_flat_json() }))
}

fn cmd_attack(
    sc: &Scenario,
    out: &Path,
    kind: Option<KindArg>,
    schedule: Option<&Path>,
) -> Result<serde_json::Value, Error> {
    let mut spec = sc.attack;
    if let Some(k) = kind {
        spec.kind = match k {
            KindArg::Intrinsic => AttackKind::Intrinsic,
            KindArg::Sampling => AttackKind::Sampling,
            KindArg::Enforced => AttackKind::Enforced,
        };
    }
    let sched = match schedule {
        Some(p) => read_schedule(p, sc.model.agents())?,
        None => sc.schedule.clone(),
    };
    let kk = sc.sampling.k();
    if sched.len() < kk + 1 {
        return Err(Error::config("schedule", format!("horizon needs {} topologies", kk + 1)));
    }
    let horizon = &sched[..=kk];
    let plan = synthesize_attack(&sc.model, &sc.sampling, horizon, &spec)?;
    let dev = output_deviation(&sc.model, &sc.sampling, horizon, &plan)?;
    write_json(&out.join("plan.json"), &plan)?;
    write_csv(&out.join("deviation.csv"), &DEVIATION_HEADER, &deviation_rows(&dev, &sc.sampling))?;
    let max = dev.iter().cloned().fold(0.0, f64::max);
    let summary = serde_json::json!({
        "kind": plan.kind,
        "max_deviation": max,
        "x_a0_norm": plan.x_a0.norm(),
        "claimed_stealthy_until": plan.claimed_stealthy_until,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct OptimizeOutput {
    result: SwitchResult,
    rounds: Option<usize>,
    converged: Option<bool>,
    rank_ratios: Option<Vec<f64>>,
}

fn cmd_optimize(sc: &Scenario, out: &Path, method: MethodArg) -> Result<(serde_json::Value, bool), Error> {
    let spec = sc.switch_spec();
    let output = match method {
        MethodArg::Brute => {
            if sc.stability.is_some() {
                return Err(Error::config("stability", "the stability constraint needs --method shor or rank"));
            }
            OptimizeOutput {
                result: brute_force_select(&spec, DEFAULT_SEQUENCE_CAP)?,
                rounds: None,
                converged: None,
                rank_ratios: None,
            }
        }
        MethodArg::Shor | MethodArg::Rank => {
            let mut lp = build_lifted_problem(&spec)?;
            if let Some(st) = &sc.stability {
                add_stability_constraint(&mut lp, &st.p, st.alpha)?;
            }
            if let MethodArg::Shor = method {
                let r = solve_shor(&lp, &SdpOptions::default())?;
                OptimizeOutput {
                    rank_ratios: Some(vec![r.rank_ratio]),
                    result: r.result,
                    rounds: None,
                    converged: None,
                }
            } else {
                let r = solve_rank_iteration(&lp, &RankIterOptions::default())?;
                OptimizeOutput {
                    result: r.result,
                    rounds: Some(r.rounds),
                    converged: Some(r.converged),
                    rank_ratios: Some(r.ratios),
                }
            }
        }
    };
    output.result.audit(&spec)?;
    write_json(&out.join("result.json"), &output)?;
    write_json(&out.join("schedule.json"), &schedule_json(&output.result.topologies))?;
    let m = &output.result.metrics;
    let summary = serde_json::json!({
        "method": output.result.method,
        "feasible": output.result.feasible,
        "j_rob": m.j_rob,
        "gamma_relax": output.result.gamma_relax,
    });
    Ok((summary, output.result.feasible))
}

fn cmd_simulate(
    sc: &Scenario,
    out: &Path,
    schedule: Option<&Path>,
    plan: Option<&Path>,
) -> Result<serde_json::Value, Error> {
    let sched = match schedule {
        Some(p) => read_schedule(p, sc.model.agents())?,
        None => sc.schedule.clone(),
    };
    let mut cfg: SimConfig = sc.sim.clone();
    if let Some(p) = plan {
        let text = fs::read_to_string(p)?;
        let plan: AttackPlan =
            serde_json::from_str(&text).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?;
        cfg.attack = AttackMode::Plan {
            plan,
            start_step: sc.attack.start_step,
        };
    }
    if sched.len() < cfg.steps + 1 {
        return Err(Error::config(
            "schedule",
            format!("{} topologies for {} steps", sched.len(), cfg.steps),
        ));
    }
    let trace = sim::run(&sc.model, &sc.sampling, &sched, &cfg)?;
    write_csv(&out.join("trace.csv"), &sim::SimTrace::CSV_HEADER, &trace.csv_rows())?;
    let mut summary = trace.summary_json();
    if let AttackMode::Plan { .. } = cfg.attack {
        // same noise stream without the attack isolates its output effect
        let mut nominal = cfg.clone();
        nominal.attack = AttackMode::None;
        nominal.detector.threshold = Some(trace.threshold);
        let base = sim::run(&sc.model, &sc.sampling, &sched, &nominal)?;
        let dev: Vec<f64> = trace
            .outputs
            .iter()
            .zip(&base.outputs)
            .map(|(a, b)| (a - b).norm())
            .collect();
        write_csv(&out.join("deviation.csv"), &DEVIATION_HEADER, &deviation_rows(&dev, &sc.sampling))?;
        summary["max_deviation"] = serde_json::json!(dev.iter().cloned().fold(0.0, f64::max));
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run(cli: Cli) -> Result<u8, Error> {
    let started = Instant::now();
    let (name, common) = match &cli.command {
        Command::Metrics { common, .. } => ("metrics", common),
        Command::Attack { common, .. } => ("attack", common),
        Command::Optimize { common, .. } => ("optimize", common),
        Command::Simulate { common, .. } => ("simulate", common),
    };
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Error::Invalid("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let sc = load(common)?;
    fs::create_dir_all(&common.out)?;
    let mut code = 0;
    let (summary, args) = match &cli.command {
        Command::Metrics { schedule, .. } => (
            cmd_metrics(&sc, &common.out, schedule.as_deref())?,
            serde_json::json!({ "schedule": schedule }),
        ),
        Command::Attack { kind, schedule, .. } => (
            cmd_attack(&sc, &common.out, *kind, schedule.as_deref())?,
            serde_json::json!({ "kind": kind, "schedule": schedule }),
        ),
        Command::Optimize { method, .. } => {
            let (s, feasible) = cmd_optimize(&sc, &common.out, *method)?;
            if !feasible {
                code = 3;
            }
            (s, serde_json::json!({ "method": method }))
        }
        Command::Simulate { schedule, plan, .. } => (
            cmd_simulate(&sc, &common.out, schedule.as_deref(), plan.as_deref())?,
            serde_json::json!({ "schedule": schedule, "plan": plan }),
        ),
    };
    let manifest = RunManifest {
        command: name.into(),
        config: common.config.clone(),
        seed: sc.seed,
        version: version(),
        out: common.out.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        args: serde_json::json!({ "jobs": common.jobs, "command": args }),
    };
    write_json(&common.out.join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string(&summary).unwrap_or_default());
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZDAGUARD_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
