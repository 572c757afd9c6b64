//! JSON scenario files and the built-in fixtures.
//!
//! A scenario bundles a model, sampling periods, the admissible topology
//! sets, the switching options, an attack description and simulator
//! settings. Parsing errors name the offending JSON path.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discretize::{assemble_stacked, SamplingConfig};
use crate::metrics::{average, MetricReport};
use crate::model::{
    build_double_integrator_network_with, enumerate_feasible_topologies, sample_feasible_topologies, MeasurementKind,
    SyncGains, SystemModel, Topology, TopologySet,
};
use crate::sim::{metrics_over_time, SimConfig};
use crate::switching::{brute_force_select, GainPolicy, SwitchSpec, Thresholds, DEFAULT_SEQUENCE_CAP};
use crate::zda::{
    discrete_zeros, enforced_attack, intrinsic_attack_from, invariant_zeros, sampling_attack, AttackKind, AttackPlan,
};
use crate::{Error, Result};

/// Topology as written in a scenario: an edge list or an adjacency matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyFile {
    Edges { n: usize, edges: Vec<(usize, usize)> },
    Adjacency { n: usize, adjacency: Vec<Vec<u8>> },
}

impl TopologyFile {
    fn resolve(&self, path: &str) -> Result<Topology> {
        let t = match self {
            TopologyFile::Edges { n, edges } => Topology::from_edges(*n, edges),
            TopologyFile::Adjacency { n, adjacency } => {
                let t = Topology {
                    n: *n,
                    adjacency: adjacency.clone(),
                };
                t.validate(true).map(|_| t)
            }
        };
        t.map_err(|e| Error::config(path, e.to_string()))
    }
}

/// Admissible sets, either listed per step or generated from positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySetFile {
    Listed {
        steps: Vec<Vec<TopologyFile>>,
        #[serde(default = "one")]
        density_cap: f64,
    },
    Generated {
        /// One position list per step; the last repeats.
        positions: Vec<Vec<Vec<f64>>>,
        radius: f64,
        density_cap: f64,
        /// Sample this many per step instead of enumerating.
        #[serde(default)]
        sample: Option<usize>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub plant: crate::model::Plant,
    pub nominal: TopologyFile,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Stealth tolerance for enforced attacks.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub start_step: usize,
}

fn default_tol() -> f64 {
    1e-8
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::Enforced,
            tol: default_tol(),
            scale: 1.0,
            start_step: 0,
        }
    }
}

/// On-disk scenario layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub model: ModelFile,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub topologies: Option<TopologySetFile>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "zero_gains")]
    pub gains: GainPolicy,
    #[serde(default)]
    pub q_rob: Option<DMatrix<f64>>,
    /// Schedule for metrics, attacks and simulation; defaults to the nominal
    /// topology at every step of the horizon or the simulation, whichever
    /// is longer.
    #[serde(default)]
    pub schedule: Option<Vec<TopologyFile>>,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub stability: Option<StabilityFile>,
    #[serde(default)]
    pub seed: u64,
}

/// One-step stability constraint for the SDP methods.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityFile {
    pub alpha: f64,
    /// "identity", a path to a JSON list of K + 1 matrices, or the list itself.
    #[serde(default = "identity_source")]
    pub p: PSource,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PSource {
    Named(String),
    Inline(Vec<DMatrix<f64>>),
}

fn identity_source() -> PSource {
    PSource::Named("identity".into())
}

/// Resolved stability constraint.
#[derive(Clone, Debug)]
pub struct Stability {
    pub alpha: f64,
    pub p: Vec<DMatrix<f64>>,
}

fn zero_gains() -> GainPolicy {
    GainPolicy::Zero
}

/// A validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: SystemModel,
    pub sampling: SamplingConfig,
    pub topologies: TopologySet,
    pub thresholds: Thresholds,
    pub gains: GainPolicy,
    pub q_rob: Option<DMatrix<f64>>,
    pub schedule: Vec<Topology>,
    pub attack: AttackSpec,
    pub sim: SimConfig,
    pub stability: Option<Stability>,
    pub seed: u64,
}

impl Scenario {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        Self::resolve(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn resolve(f: ScenarioFile) -> Result<Self> {
        let nominal = f.model.nominal.resolve("model.nominal")?;
        let model = SystemModel {
            plant: f.model.plant,
            nominal,
        };
        model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        f.sampling.validate().map_err(|e| Error::config("sampling", e.to_string()))?;
        f.thresholds.validate().map_err(|e| Error::config("thresholds", e.to_string()))?;
        let n = model.agents();
        let check_n = |t: &Topology, path: &str| {
            if t.n != n {
                Err(Error::config(path, format!("topology has {} nodes, model has {n}", t.n)))
            } else {
                Ok(())
            }
        };
        let topologies = match &f.topologies {
            None => TopologySet {
                steps: vec![vec![model.nominal.clone()]],
                density_cap: 1.0,
            },
            Some(TopologySetFile::Listed { steps, density_cap }) => {
                let mut out = Vec::new();
                for (k, step) in steps.iter().enumerate() {
                    let mut row = Vec::new();
                    for (i, t) in step.iter().enumerate() {
                        let path = format!("topologies.steps[{k}][{i}]");
                        let t = t.resolve(&path)?;
                        check_n(&t, &path)?;
                        row.push(t);
                    }
                    out.push(row);
                }
                let set = TopologySet {
                    steps: out,
                    density_cap: *density_cap,
                };
                set.validate().map_err(|e| Error::config("topologies", e.to_string()))?;
                set
            }
            Some(TopologySetFile::Generated {
                positions,
                radius,
                density_cap,
                sample,
            }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
                let mut out = Vec::new();
                for (k, pos) in positions.iter().enumerate() {
                    let path = format!("topologies.positions[{k}]");
                    if pos.len() != n {
                        return Err(Error::config(path, format!("{} positions for {n} agents", pos.len())));
                    }
                    let set = match sample {
                        Some(c) => sample_feasible_topologies(pos, *radius, *density_cap, *c, &mut rng),
                        None => enumerate_feasible_topologies(pos, *radius, *density_cap),
                    }
                    .map_err(|e| Error::config(&path, e.to_string()))?;
                    if set.is_empty() {
                        return Err(Error::config(path, "no connected topology within the radius and density cap"));
                    }
                    out.push(set);
                }
                TopologySet {
                    steps: out,
                    density_cap: *density_cap,
                }
            }
        };
        let k = f.sampling.k();
        let sim_steps = f.sim.as_ref().map_or(0, |s| s.steps);
        let schedule = match &f.schedule {
            None => vec![model.nominal.clone(); k.max(sim_steps) + 1],
            Some(s) => {
                let mut out = Vec::new();
                for (i, t) in s.iter().enumerate() {
                    let path = format!("schedule[{i}]");
                    let t = t.resolve(&path)?;
                    check_n(&t, &path)?;
                    out.push(t);
                }
                if out.len() < k + 1 {
                    return Err(Error::config("schedule", format!("{} topologies, horizon needs {}", out.len(), k + 1)));
                }
                out
            }
        };
        if let Some(q) = &f.q_rob {
            let d = model.state_dim() * (k + 1);
            if q.shape() != (d, d) {
                return Err(Error::config("q_rob", format!("must be {d}x{d}")));
            }
        }
        if !(f.attack.tol >= 0.0) || !f.attack.scale.is_finite() {
            return Err(Error::config("attack", "tol must be non-negative and scale finite"));
        }
        let mut sim = f.sim.clone().unwrap_or_else(|| SimConfig::new(k));
        if f.sim.is_none() {
            sim.seed = f.seed;
        }
        sim.noise.validate().map_err(|e| Error::config("sim.noise", e.to_string()))?;
        if let Some(x0) = &sim.x0 {
            if x0.len() != model.state_dim() {
                return Err(Error::config("sim.x0", format!("need {} entries", model.state_dim())));
            }
        }
        let stability = match &f.stability {
            None => None,
            Some(st) => {
                if !(st.alpha > 0.0 && st.alpha < 1.0) {
                    return Err(Error::config("stability.alpha", format!("must lie in (0, 1), got {}", st.alpha)));
                }
                let pd = model.state_dim();
                let p = match &st.p {
                    PSource::Named(n) if n == "identity" => vec![DMatrix::identity(pd, pd); k + 1],
                    PSource::Named(path) => {
                        let text = std::fs::read_to_string(path)
                            .map_err(|e| Error::config("stability.p", format!("{path}: {e}")))?;
                        serde_json::from_str(&text).map_err(|e| Error::config("stability.p", format!("{path}: {e}")))?
                    }
                    PSource::Inline(v) => v.clone(),
                };
                if p.len() != k + 1 || p.iter().any(|m| m.shape() != (pd, pd)) {
                    return Err(Error::config("stability.p", format!("need {} matrices of size {pd}x{pd}", k + 1)));
                }
                Some(Stability { alpha: st.alpha, p })
            }
        };
        Ok(Scenario {
            stability,
            model,
            sampling: f.sampling,
            topologies,
            thresholds: f.thresholds,
            gains: f.gains,
            q_rob: f.q_rob,
            schedule,
            attack: f.attack,
            sim,
            seed: f.seed,
        })
    }

    pub fn switch_spec(&self) -> SwitchSpec {
        SwitchSpec {
            model: self.model.clone(),
            sampling: self.sampling,
            topologies: self.topologies.clone(),
            gains: self.gains.clone(),
            thresholds: self.thresholds,
            q_rob: self.q_rob.clone(),
        }
    }

    /// The first K + 1 entries of the schedule.
    pub fn horizon_schedule(&self) -> &[Topology] {
        &self.schedule[..=self.sampling.k()]
    }

    /// Synthesizes the configured attack against the horizon schedule.
    pub fn synthesize_attack(&self) -> Result<AttackPlan> {
        synthesize_attack(&self.model, &self.sampling, self.horizon_schedule(), &self.attack)
    }
}

/// Builds an attack of the requested kind. Intrinsic and sampling attacks
/// use the first topology of the schedule.
pub fn synthesize_attack(
    model: &SystemModel,
    sampling: &SamplingConfig,
    schedule: &[Topology],
    spec: &AttackSpec,
) -> Result<AttackPlan> {
    let plan = match spec.kind {
        AttackKind::Enforced => {
            let ops = assemble_stacked(model, sampling, schedule)?;
            enforced_attack(&ops, sampling, spec.tol)?
        }
        AttackKind::Intrinsic => {
            let lti = model.matrices(&schedule[0])?;
            intrinsic_attack_from(&invariant_zeros(&lti.a, &lti.b, &lti.c)?, sampling)?
        }
        AttackKind::Sampling => {
            let fixed = vec![schedule[0].clone(); schedule.len()];
            let ops = assemble_stacked(model, sampling, &fixed)?;
            let zeros = discrete_zeros(&ops)?;
            let z = zeros
                .zeros()
                .iter()
                .max_by(|a, b| a.z.norm().total_cmp(&b.z.norm()))
                .ok_or_else(|| Error::Infeasible("no discrete invariant zeros".into()))?;
            let per = (ops.ell + 1) / ops.k;
            sampling_attack(z, ops.q, per, ops.k, sampling.t_sense(ops.k))?
        }
    };
    Ok(plan.scaled(spec.scale))
}

/// Ring and chord topologies of the six-agent three-dimensional network.
pub fn six_agent_topologies() -> (Topology, Topology) {
    let ring = Topology::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]).expect("valid");
    let chords = Topology::from_edges(6, &[(0, 2), (0, 3), (1, 4), (1, 5), (2, 5), (3, 4)]).expect("valid");
    (ring, chords)
}

/// Six agents in three dimensions with position measurements and position
/// synchronization feedback folded into the plant, nominal topology the ring.
pub fn six_agent_network() -> SystemModel {
    let (ring, _) = six_agent_topologies();
    build_double_integrator_network_with(
        6,
        3,
        ring,
        MeasurementKind::Position,
        Some(0),
        Some(SyncGains {
            kp: 1.0,
            kd: 1.5,
            kl: 1.0,
        }),
    )
    .expect("valid")
}

/// Moving-swarm scenario: agents oscillate about a rectangular grid and the
/// admissible sets are drawn from the in-range graphs at each sensing step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub radius: f64,
    pub density_cap: f64,
    /// Sampled candidates per step, besides the baseline graph.
    pub samples: usize,
    pub windows: usize,
    pub dt_u: String,
    pub dt_y: String,
    pub horizon: usize,
    pub kp: f64,
    pub kd: f64,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            rows: 4,
            cols: 6,
            spacing: 1.0,
            amplitude: 0.25,
            omega: 0.3,
            radius: 1.5,
            density_cap: 0.4,
            samples: 3,
            windows: 15,
            dt_u: "0.5".into(),
            dt_y: "1".into(),
            horizon: 2,
            kp: 0.3,
            kd: 0.4,
            seed: 0,
        }
    }
}

/// Both schedules of a swarm run and their per-window metrics.
#[derive(Clone, Debug, Serialize)]
pub struct SwarmOutcome {
    pub model: SystemModel,
    pub sampling: SamplingConfig,
    pub switching: Vec<Topology>,
    pub baseline: Vec<Topology>,
    pub switching_metrics: Vec<MetricReport>,
    pub baseline_metrics: Vec<MetricReport>,
    pub switching_average: MetricReport,
    pub baseline_average: MetricReport,
    /// Windows whose thresholds held under switching.
    pub feasible_windows: usize,
}

impl SwarmConfig {
    pub fn agents(&self) -> usize {
        self.rows * self.cols
    }

    pub fn positions(&self, t: f64) -> Vec<Vec<f64>> {
        (0..self.agents())
            .map(|i| {
                let (r, c) = (i / self.cols, i % self.cols);
                let ph = self.omega * t + 0.7 * i as f64;
                vec![
                    c as f64 * self.spacing + self.amplitude * ph.sin(),
                    r as f64 * self.spacing + self.amplitude * ph.cos(),
                ]
            })
            .collect()
    }

    /// Nearest-neighbour grid graph, in range at all times when
    /// spacing + 2·amplitude ≤ radius.
    pub fn baseline(&self) -> Topology {
        let mut edges = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                if c + 1 < self.cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < self.rows {
                    edges.push((i, i + self.cols));
                }
            }
        }
        Topology::from_edges(self.agents(), &edges).expect("valid")
    }

    pub fn model(&self) -> Result<SystemModel> {
        build_double_integrator_network_with(
            self.agents(),
            2,
            self.baseline(),
            MeasurementKind::FullState,
            Some(0),
            None,
        )
    }

    pub fn sampling(&self) -> Result<SamplingConfig> {
        let t_f = self.horizon as f64 * self.dt_y.parse::<f64>().map_err(|_| Error::Invalid("dt_y".into()))?;
        let s = SamplingConfig::new(&self.dt_u, &self.dt_y, &format!("{t_f}"))?;
        if s.k() != self.horizon {
            return Err(Error::Invalid("horizon does not divide into sensing steps".into()));
        }
        Ok(s)
    }

    /// Admissible graphs at global sensing step k: the baseline when in
    /// range plus sampled in-range graphs.
    pub fn candidates(&self, k: usize, sampling: &SamplingConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Topology>> {
        let pos = self.positions(sampling.t_sense(k));
        let mut out = sample_feasible_topologies(&pos, self.radius, self.density_cap, self.samples, rng)?;
        let base = self.baseline();
        let in_range = base.edges().iter().all(|&(i, j)| {
            let d: f64 = pos[i].iter().zip(&pos[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.sqrt() <= self.radius
        });
        if in_range && base.density() <= self.density_cap && !out.contains(&base) {
            out.push(base);
        }
        if out.is_empty() {
            return Err(Error::Infeasible(format!("no admissible topology at step {k}")));
        }
        Ok(out)
    }

    /// Receding-horizon switching: each window of K steps is optimized by
    /// enumeration with its first topology pinned to the previous window's
    /// last. The baseline keeps the grid graph throughout.
    pub fn run(&self) -> Result<SwarmOutcome> {
        let model = self.model()?;
        let sampling = self.sampling()?;
        let kk = sampling.k();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let gains = GainPolicy::Consensus {
            kp: self.kp,
            kd: self.kd,
        };
        let mut schedule: Vec<Topology> = Vec::new();
        let mut feasible_windows = 0;
        for w in 0..self.windows {
            let mut steps = Vec::new();
            for j in 0..=kk {
                let g = w * kk + j;
                if j == 0 && w > 0 {
                    steps.push(vec![schedule[g].clone()]);
                } else {
                    steps.push(self.candidates(g, &sampling, &mut rng)?);
                }
            }
            let spec = SwitchSpec {
                model: model.clone(),
                sampling,
                topologies: TopologySet {
                    steps,
                    density_cap: self.density_cap,
                },
                gains: gains.clone(),
                thresholds: Thresholds::default(),
                q_rob: None,
            };
            let res = brute_force_select(&spec, DEFAULT_SEQUENCE_CAP)?;
            if res.feasible {
                feasible_windows += 1;
            }
            if w == 0 {
                schedule.extend(res.topologies);
            } else {
                schedule.extend(res.topologies.into_iter().skip(1));
            }
        }
        let baseline = vec![self.baseline(); schedule.len()];
        let switching_metrics = metrics_over_time(&model, &sampling, &gains, None, &schedule, kk)?;
        let baseline_metrics = metrics_over_time(&model, &sampling, &gains, None, &baseline, kk)?;
        Ok(SwarmOutcome {
            switching_average: average(&switching_metrics).expect("windows"),
            baseline_average: average(&baseline_metrics).expect("windows"),
            model,
            sampling,
            switching: schedule,
            baseline,
            switching_metrics,
            baseline_metrics,
            feasible_windows,
        })
    }
}
