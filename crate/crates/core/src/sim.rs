//! Discrete-time closed-loop simulator with a steady-state Kalman observer
//! and a windowed residual detector.
//!
//! The plant is propagated exactly between sensing instants: for interval k,
//! x_{k+1} = S_k x_k + Σ_ℓ H_{k,ℓ}B(u_ℓ + a_ℓ) + w_k, and y_k = C_k x_k + v_k.
//! Controls for holds starting in [t_k, t_{k+1}) use the filtered estimate
//! x̂_{k|k}.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discretize::{assemble_stacked, assemble_stacked_with, interval_hold, SamplingConfig};
use crate::feedback::closed_loop_map;
use crate::linalg::{dare, expm_t};
use crate::metrics::MetricReport;
use crate::model::{build_cartpole, Lti, Plant, SystemModel, Topology};
use crate::switching::GainPolicy;
use crate::zda::{enforced_attack, intrinsic_attack_from, invariant_zeros, AttackPlan, ExpGenerator};
use crate::{Error, Result};

/// Floor on the calibrated residual threshold.
pub const THRESHOLD_FLOOR: f64 = 1e-6;
// Covariance floors keeping the Riccati equation solvable for noise-free runs.
const Q_FLOOR: f64 = 1e-8;
const R_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the per-interval process noise.
    pub process_std: f64,
    /// Standard deviation of each measurement row.
    pub sensor_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            process_std: 1e-4,
            sensor_std: 5e-3,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            process_std: 0.0,
            sensor_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, n) in [(self.process_std, "process_std"), (self.sensor_std, "sensor_std")] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{n} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Flags step k when ‖r‖ exceeds the threshold at `window` consecutive steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Fixed threshold; None calibrates μ + sigmas·σ on an attack-free run.
    pub threshold: Option<f64>,
    pub sigmas: f64,
    pub window: usize,
    pub calibration_steps: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            threshold: None,
            sigmas: 5.0,
            window: 2,
            calibration_steps: 200,
        }
    }
}

/// Desired trajectory of a double-integrator network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reference {
    Zero,
    /// Agent-major target positions, n·dims entries.
    Constant { positions: Vec<f64> },
    /// q_{i,d}(t) = amplitude·sin(ωt + 2πi/n + dπ/2).
    Sinusoid { amplitude: f64, omega: f64 },
}

impl Default for Reference {
    fn default() -> Self {
        Reference::Zero
    }
}

impl Reference {
    /// Reference state in the model layout and the acceleration feedforward.
    pub fn at(&self, model: &SystemModel, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = model.state_dim();
        let q = model.input_dim();
        let mut x = DVector::zeros(p);
        let mut acc = DVector::zeros(q);
        if matches!(self, Reference::Zero) {
            return Ok((x, acc));
        }
        let (n, dims) = match &model.plant {
            Plant::DoubleIntegratorNetwork { n, dims, sync: None, .. } => (*n, *dims),
            _ => {
                return Err(Error::Invalid(
                    "non-zero references need a double-integrator network without sync feedback".into(),
                ))
            }
        };
        for i in 0..n {
            for d in 0..dims {
                let xi = i * 2 * dims + 2 * d;
                match self {
                    Reference::Constant { positions } => {
                        if positions.len() != n * dims {
                            return Err(Error::Dimension(format!(
                                "reference has {} positions, need {}",
                                positions.len(),
                                n * dims
                            )));
                        }
                        x[xi] = positions[i * dims + d];
                    }
                    Reference::Sinusoid { amplitude, omega } => {
                        let ph = omega * t
                            + 2.0 * std::f64::consts::PI * i as f64 / n as f64
                            + d as f64 * std::f64::consts::FRAC_PI_2;
                        x[xi] = amplitude * ph.sin();
                        x[xi + 1] = amplitude * omega * ph.cos();
                        acc[i * dims + d] = -amplitude * omega * omega * ph.sin();
                    }
                    Reference::Zero => unreachable!(),
                }
            }
        }
        Ok((x, acc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControllerConfig {
    /// Open loop (sync feedback folded into the plant still acts).
    None,
    /// Consensus tracking on estimated errors e = x̂ − x_ref:
    /// u_i = q̈_d,i − kp Σ_{j∈N(i)} (e_p,i − e_p,j) − kd e_v,i − kl e_p,i [i = leader].
    Consensus { kp: f64, kd: f64, kl: f64 },
    /// Discrete LQR per topology; needs Δt_u = Δt_y.
    Lqr { state_weight: f64, input_weight: f64 },
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig::None
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttackMode {
    None,
    /// Injects a plan from `start_step`; x_a0 is added to the true state then.
    Plan { plan: AttackPlan, start_step: usize },
    /// At each hold-aligned step, with the given probability, starts an
    /// enforced attack computed for the current topology held over the
    /// horizon and scaled to `scale`.
    Random { probability: f64, scale: f64 },
}

impl Default for AttackMode {
    fn default() -> Self {
        AttackMode::None
    }
}

/// Extra per-window metrics recorded along the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub gains: GainPolicy,
    pub stride: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of sensing intervals; steps k = 0..=steps are measured.
    pub steps: usize,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub attack: AttackMode,
    /// Zero the attack input once the detector fires.
    #[serde(default)]
    pub countermeasure: bool,
    #[serde(default)]
    pub seed: u64,
    /// Initial true state; defaults to the reference state at t = 0.
    /// Written as a plain list in JSON.
    #[serde(default, with = "plain_vec")]
    pub x0: Option<DVector<f64>>,
    #[serde(default)]
    pub metrics: Option<TraceMetrics>,
}

impl SimConfig {
    pub fn new(steps: usize) -> Self {
        SimConfig {
            steps,
            noise: NoiseConfig::default(),
            detector: DetectorConfig::default(),
            controller: ControllerConfig::None,
            reference: Reference::Zero,
            attack: AttackMode::None,
            countermeasure: false,
            seed: 0,
            x0: None,
            metrics: None,
        }
    }
}

/// Recorded run. Per-step vectors have steps + 1 entries, per-hold vectors
/// cover every hold that started during the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub schedule: Vec<Topology>,
    pub states: Vec<DVector<f64>>,
    /// Prior estimates x̂_k.
    pub estimates: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub residuals: Vec<f64>,
    pub flags: Vec<bool>,
    /// Position error against the reference (full state for other plants).
    pub tracking_error: Vec<f64>,
    /// Largest attack input norm applied during each interval.
    pub attack_norm: Vec<f64>,
    pub controls: Vec<DVector<f64>>,
    pub attacks: Vec<DVector<f64>>,
    pub threshold: f64,
    pub detected_at: Option<usize>,
    /// Steps at which attacks started.
    pub attack_starts: Vec<usize>,
    pub metrics: Vec<MetricReport>,
}

impl SimTrace {
    pub const CSV_HEADER: [&'static str; 10] = [
        "step",
        "t",
        "edges",
        "residual",
        "threshold",
        "detected",
        "tracking_error",
        "state_norm",
        "estimate_error",
        "attack_norm",
    ];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (0..self.times.len())
            .map(|k| {
                vec![
                    k.to_string(),
                    format!("{}", self.times[k]),
                    self.schedule[k].edges().len().to_string(),
                    format!("{:e}", self.residuals[k]),
                    format!("{:e}", self.threshold),
                    u8::from(self.flags[k]).to_string(),
                    format!("{:e}", self.tracking_error[k]),
                    format!("{:e}", self.states[k].norm()),
                    format!("{:e}", (&self.states[k] - &self.estimates[k]).norm()),
                    format!("{:e}", self.attack_norm.get(k).copied().unwrap_or(0.0)),
                ]
            })
            .collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        serde_json::json!({
            "steps": self.times.len().saturating_sub(1),
            "threshold": self.threshold,
            "detected_at": self.detected_at,
            "attack_starts": self.attack_starts,
            "false_alarms": self.false_alarm_steps().len(),
            "max_residual": max(&self.residuals),
            "max_tracking_error": max(&self.tracking_error),
            "final_tracking_error": self.tracking_error.last(),
        })
    }

    /// Flagged steps with no attack active so far.
    pub fn false_alarm_steps(&self) -> Vec<usize> {
        let first = self.attack_starts.first().copied().unwrap_or(usize::MAX);
        self.flags
            .iter()
            .enumerate()
            .filter(|(k, f)| **f && *k < first)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Per-topology discretization and filter cache.
struct Cache<'a> {
    model: &'a SystemModel,
    sampling: &'a SamplingConfig,
    ltis: HashMap<Topology, Lti>,
    s: HashMap<Topology, DMatrix<f64>>,
    holds: HashMap<(Topology, i64, i64), DMatrix<f64>>,
    filters: HashMap<Topology, DMatrix<f64>>,
    lqr: HashMap<Topology, DMatrix<f64>>,
    plans: HashMap<Topology, AttackPlan>,
    q_cov: f64,
    r_cov: f64,
}

impl<'a> Cache<'a> {
    fn new(model: &'a SystemModel, sampling: &'a SamplingConfig, noise: &NoiseConfig) -> Self {
        Cache {
            model,
            sampling,
            ltis: HashMap::new(),
            s: HashMap::new(),
            holds: HashMap::new(),
            filters: HashMap::new(),
            lqr: HashMap::new(),
            plans: HashMap::new(),
            q_cov: (noise.process_std * noise.process_std).max(Q_FLOOR),
            r_cov: (noise.sensor_std * noise.sensor_std).max(R_FLOOR),
        }
    }

    fn lti(&mut self, t: &Topology) -> Result<&Lti> {
        if !self.ltis.contains_key(t) {
            let l = self.model.matrices(t)?;
            self.ltis.insert(t.clone(), l);
        }
        Ok(&self.ltis[t])
    }

    fn s(&mut self, t: &Topology) -> Result<DMatrix<f64>> {
        if let Some(s) = self.s.get(t) {
            return Ok(s.clone());
        }
        let a = self.lti(t)?.a.clone();
        let s = expm_t(&a, self.sampling.dt_y.as_f64())?;
        self.s.insert(t.clone(), s.clone());
        Ok(s)
    }

    /// H_{k,ℓ}B, or None when hold ℓ misses interval k.
    fn hold_b(&mut self, t: &Topology, k: usize, l: usize) -> Result<Option<DMatrix<f64>>> {
        let Some((lo, hi)) = self.sampling.overlap(k, l) else {
            return Ok(None);
        };
        let tk = self.sampling.t_sense(k);
        let key = (t.clone(), ((lo - tk) * 1e9).round() as i64, ((hi - tk) * 1e9).round() as i64);
        if let Some(h) = self.holds.get(&key) {
            return Ok(Some(h.clone()));
        }
        let lti = self.lti(t)?.clone();
        let h = match interval_hold(&lti.a, self.sampling, k, l)? {
            Some(h) => h * &lti.b,
            None => return Ok(None),
        };
        self.holds.insert(key, h.clone());
        Ok(Some(h))
    }

    /// Steady-state filter gain M = PCᵀ(CPCᵀ + R)⁻¹.
    fn filter(&mut self, t: &Topology) -> Result<DMatrix<f64>> {
        if let Some(m) = self.filters.get(t) {
            return Ok(m.clone());
        }
        let s = self.s(t)?;
        let c = self.lti(t)?.c.clone();
        let (p, r) = (s.nrows(), c.nrows());
        let m = if r == 0 {
            DMatrix::zeros(p, 0)
        } else {
            let q = DMatrix::identity(p, p) * self.q_cov;
            let rr = DMatrix::identity(r, r) * self.r_cov;
            match dare(&s.transpose(), &c.transpose(), &q, &rr) {
                Ok(pp) => {
                    let inn = &c * &pp * c.transpose() + &rr;
                    let inv = inn
                        .cholesky()
                        .ok_or_else(|| Error::Numerical("innovation covariance not positive definite".into()))?
                        .inverse();
                    &pp * c.transpose() * inv
                }
                Err(e) => {
                    log::warn!("no steady-state filter for a topology ({e}); using the open-loop predictor");
                    DMatrix::zeros(p, r)
                }
            }
        };
        self.filters.insert(t.clone(), m.clone());
        Ok(m)
    }

    fn lqr(&mut self, t: &Topology, wq: f64, wr: f64) -> Result<DMatrix<f64>> {
        if let Some(g) = self.lqr.get(t) {
            return Ok(g.clone());
        }
        let s = self.s(t)?;
        let gam = self
            .hold_b(t, 0, 0)?
            .ok_or_else(|| Error::Invalid("LQR needs a hold in the first interval".into()))?;
        let (p, q) = (s.nrows(), gam.ncols());
        let qq = DMatrix::identity(p, p) * wq;
        let rr = DMatrix::identity(q, q) * wr;
        let pp = dare(&s, &gam, &qq, &rr)?;
        let g = (&rr + gam.transpose() * &pp * &gam)
            .cholesky()
            .ok_or_else(|| Error::Numerical("LQR gain system not positive definite".into()))?
            .solve(&(gam.transpose() * &pp * &s));
        self.lqr.insert(t.clone(), g.clone());
        Ok(g)
    }

    fn enforced_plan(&mut self, t: &Topology) -> Result<AttackPlan> {
        if let Some(p) = self.plans.get(t) {
            return Ok(p.clone());
        }
        let sched = vec![t.clone(); self.sampling.k() + 1];
        let ops = assemble_stacked(self.model, self.sampling, &sched)?;
        let plan = enforced_attack(&ops, self.sampling, f64::INFINITY)?;
        self.plans.insert(t.clone(), plan.clone());
        Ok(plan)
    }
}

/// Consensus feedback matrix G with u = acc − G e.
fn consensus_gain(model: &SystemModel, topo: &Topology, kp: f64, kd: f64, kl: f64) -> Result<DMatrix<f64>> {
    let (n, dims, leader) = match &model.plant {
        Plant::DoubleIntegratorNetwork { n, dims, leader, .. } => (*n, *dims, *leader),
        _ => return Err(Error::Invalid("consensus control needs a double-integrator network".into())),
    };
    let mut g = DMatrix::zeros(n * dims, 2 * n * dims);
    for i in 0..n {
        for d in 0..dims {
            let row = i * dims + d;
            let xi = i * 2 * dims + 2 * d;
            g[(row, xi + 1)] += kd;
            if leader == Some(i) {
                g[(row, xi)] += kl;
            }
            for j in 0..n {
                if j != i && topo.has_edge(i, j) {
                    g[(row, xi)] += kp;
                    g[(row, j * 2 * dims + 2 * d)] -= kp;
                }
            }
        }
    }
    Ok(g)
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Stabilizing heuristic for the consensus gains: halves the position gains
/// kp, kl (and, in an outer loop, the damping kd) until the first-interval
/// closed-loop map S − Σ_ℓ H_{0,ℓ}B G has spectral radius below one for
/// every topology. Position gains are cut first because sampled double
/// integrators lose stability when position feedback outweighs damping.
pub fn stabilize_consensus(
    model: &SystemModel,
    sampling: &SamplingConfig,
    topologies: &[Topology],
    kp: f64,
    kd: f64,
    kl: f64,
) -> Result<(f64, f64, f64)> {
    let noise = NoiseConfig::none();
    let mut cache = Cache::new(model, sampling, &noise);
    for outer in 0..10 {
        let d = kd * 0.5f64.powi(outer);
        for inner in 0..20 {
            let c = 0.5f64.powi(inner);
            let mut ok = true;
            for t in topologies {
                let g = consensus_gain(model, t, kp * c, d, kl * c)?;
                let mut phi = cache.s(t)?;
                for l in sampling.holds_starting_in(0) {
                    if let Some(h) = cache.hold_b(t, 0, l)? {
                        phi -= h * &g;
                    }
                }
                if spectral_radius(&phi) >= 1.0 {
                    ok = false;
                    break;
                }
            }
            if ok {
                return Ok((kp * c, d, kl * c));
            }
        }
    }
    Err(Error::Infeasible("no stabilizing consensus gain scale found".into()))
}

struct ActiveAttack {
    plan: AttackPlan,
    start_step: usize,
    start_hold: usize,
}

impl ActiveAttack {
    fn input(&self, l: usize, sampling: &SamplingConfig) -> DVector<f64> {
        match &self.plan.generator {
            Some(g) => g.eval(sampling.t_hold(l) - sampling.t_sense(self.start_step)),
            None => self.plan.sample(l - self.start_hold),
        }
    }

    fn finished(&self, k: usize, sampling: &SamplingConfig) -> bool {
        self.plan.generator.is_none() && sampling.holds_overlapping(k).start >= self.start_hold + self.plan.a_seq.ncols()
    }
}

/// Exact state increment of a(t) = g(t − t0) over [t_k, t_{k+1}] from zero.
fn generator_increment(g: &ExpGenerator, lti: &Lti, t_rel: f64, dt: f64) -> Result<DVector<f64>> {
    let e = (g.sigma * t_rel).exp();
    let shifted = ExpGenerator {
        sigma: g.sigma,
        omega: g.omega,
        u_re: g.eval(t_rel),
        u_im: (&g.u_re * (g.omega * t_rel).sin() + &g.u_im * (g.omega * t_rel).cos()) * e,
    };
    let x0 = DVector::zeros(lti.a.nrows());
    Ok(shifted.propagate(&lti.a, &lti.b, &x0, &[dt])?.remove(0))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> DVector<f64> {
    if std == 0.0 {
        return DVector::zeros(n);
    }
    DVector::from_fn(n, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn tracking_error(model: &SystemModel, x: &DVector<f64>, xr: &DVector<f64>) -> f64 {
    match &model.plant {
        Plant::DoubleIntegratorNetwork { n, dims, .. } => {
            let mut s = 0.0;
            for i in 0..*n {
                for d in 0..*dims {
                    let xi = i * 2 * dims + 2 * d;
                    s += (x[xi] - xr[xi]).powi(2);
                }
            }
            s.sqrt()
        }
        _ => (x - xr).norm(),
    }
}

/// Calibrates μ + sigmas·σ of the residual norm on an attack-free run with
/// an independent noise stream. Returns the floor for noise-free configs.
pub fn calibrate_threshold(
    model: &SystemModel,
    sampling: &SamplingConfig,
    schedule: &[Topology],
    cfg: &SimConfig,
) -> Result<f64> {
    let mut c = cfg.clone();
    c.attack = AttackMode::None;
    c.countermeasure = false;
    c.metrics = None;
    c.seed = cfg.seed ^ 0x5eed_5eed_5eed_5eed;
    c.steps = cfg.detector.calibration_steps.min(schedule.len().saturating_sub(1)).max(1);
    c.detector.threshold = Some(f64::INFINITY);
    let tr = run(model, sampling, schedule, &c)?;
    // skip the filter transient
    let skip = (tr.residuals.len() / 10).min(10);
    let r = &tr.residuals[skip..];
    let n = r.len() as f64;
    let mu = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    Ok((mu + cfg.detector.sigmas * var.sqrt()).max(THRESHOLD_FLOOR))
}

/// Runs the closed loop along `schedule` (at least steps + 1 topologies).
pub fn run(model: &SystemModel, sampling: &SamplingConfig, schedule: &[Topology], cfg: &SimConfig) -> Result<SimTrace> {
    model.validate()?;
    sampling.validate()?;
    cfg.noise.validate()?;
    let steps = cfg.steps;
    if schedule.len() < steps + 1 {
        return Err(Error::Dimension(format!(
            "schedule has {} topologies, {} steps need {}",
            schedule.len(),
            steps,
            steps + 1
        )));
    }
    if cfg.detector.window == 0 {
        return Err(Error::Invalid("detector window must be at least 1".into()));
    }
    for t in &schedule[..=steps] {
        if t.n != model.agents() {
            return Err(Error::Dimension(format!("topology has {} nodes, model has {}", t.n, model.agents())));
        }
    }
    if let ControllerConfig::Lqr { .. } = cfg.controller {
        if sampling.dt_u != sampling.dt_y {
            return Err(Error::Invalid("LQR control needs dt_u = dt_y".into()));
        }
    }
    let threshold = match cfg.detector.threshold {
        Some(t) => t,
        None => calibrate_threshold(model, sampling, schedule, cfg)?,
    };
    let p = model.state_dim();
    let q = model.input_dim();
    let mut cache = Cache::new(model, sampling, &cfg.noise);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (xr0, _) = cfg.reference.at(model, 0.0)?;
    let mut x: DVector<f64> = match &cfg.x0 {
        Some(x0) if x0.len() != p => return Err(Error::Dimension(format!("x0 has {} entries, need {p}", x0.len()))),
        Some(x0) => x0.clone(),
        None => xr0,
    };
    // the observer starts from the true initial state
    let mut xh = x.clone();

    let mut active: Option<ActiveAttack> = None;
    if let AttackMode::Plan { plan, start_step } = &cfg.attack {
        if plan.x_a0.len() != p || plan.a_seq.nrows() != q {
            return Err(Error::Dimension("attack plan does not match the model".into()));
        }
        if *start_step > steps {
            return Err(Error::Invalid(format!("attack starts at step {start_step} past the run")));
        }
        if sampling.hold_at(*start_step).is_none() {
            return Err(Error::Invalid(format!("attack start step {start_step} is not aligned with a hold instant")));
        }
    }
    let random_mode = match &cfg.attack {
        AttackMode::Random { probability, scale } => {
            if !(0.0..=1.0).contains(probability) || !scale.is_finite() {
                return Err(Error::Invalid("random attack needs probability in [0, 1] and finite scale".into()));
            }
            Some((*probability, *scale))
        }
        _ => None,
    };

    let mut tr = SimTrace {
        times: Vec::with_capacity(steps + 1),
        schedule: schedule[..=steps].to_vec(),
        states: Vec::with_capacity(steps + 1),
        estimates: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps + 1),
        residuals: Vec::with_capacity(steps + 1),
        flags: Vec::with_capacity(steps + 1),
        tracking_error: Vec::with_capacity(steps + 1),
        attack_norm: Vec::with_capacity(steps),
        controls: Vec::new(),
        attacks: Vec::new(),
        threshold,
        detected_at: None,
        attack_starts: Vec::new(),
        metrics: Vec::new(),
    };
    let mut streak = 0usize;
    let mut blocked = false;

    for k in 0..=steps {
        let topo = &schedule[k];
        let t_k = sampling.t_sense(k);
        // attack start
        let starting = match (&cfg.attack, &active) {
            (AttackMode::Plan { plan, start_step }, _) if *start_step == k => Some(plan.clone()),
            (AttackMode::Random { .. }, None) if k < steps && sampling.hold_at(k).is_some() => {
                let (prob, scale) = random_mode.expect("random mode");
                if rng.random::<f64>() < prob {
                    Some(cache.enforced_plan(topo)?.scaled(scale))
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some(plan) = starting {
            x += &plan.x_a0;
            active = Some(ActiveAttack {
                start_hold: sampling.hold_at(k).expect("aligned"),
                plan,
                start_step: k,
            });
            tr.attack_starts.push(k);
            blocked = false;
        }

        let lti_c = cache.lti(topo)?.c.clone();
        let y = &lti_c * &x + normal_vec(&mut rng, lti_c.nrows(), cfg.noise.sensor_std);
        let r = &y - &lti_c * &xh;
        let rn = r.norm();
        streak = if rn > threshold { streak + 1 } else { 0 };
        let flag = streak >= cfg.detector.window;
        if flag && tr.detected_at.is_none() {
            tr.detected_at = Some(k);
        }
        if flag && cfg.countermeasure && active.is_some() {
            blocked = true;
        }
        let (xr, _) = cfg.reference.at(model, t_k)?;
        tr.times.push(t_k);
        tr.states.push(x.clone());
        tr.estimates.push(xh.clone());
        tr.outputs.push(y);
        tr.residuals.push(rn);
        tr.flags.push(flag);
        tr.tracking_error.push(tracking_error(model, &x, &xr));
        if k == steps {
            break;
        }

        let m = cache.filter(topo)?;
        let xf = &xh + &m * &r;
        let e = &xf - &xr;
        for l in sampling.holds_starting_in(k) {
            debug_assert_eq!(l, tr.controls.len());
            let t_l = sampling.t_hold(l);
            let u = match &cfg.controller {
                ControllerConfig::None => DVector::zeros(q),
                ControllerConfig::Consensus { kp, kd, kl } => {
                    let (_, acc) = cfg.reference.at(model, t_l)?;
                    acc - consensus_gain(model, topo, *kp, *kd, *kl)? * &e
                }
                ControllerConfig::Lqr {
                    state_weight,
                    input_weight,
                } => -cache.lqr(topo, *state_weight, *input_weight)? * &e,
            };
            let a = match &active {
                Some(att) if !blocked && l >= att.start_hold => att.input(l, sampling),
                _ => DVector::zeros(q),
            };
            tr.controls.push(u);
            tr.attacks.push(a);
        }

        let s = cache.s(topo)?;
        let mut xn = &s * &x;
        let mut xhn = &s * &xf;
        let mut amax: f64 = 0.0;
        for l in sampling.holds_overlapping(k) {
            if let Some(h) = cache.hold_b(topo, k, l)? {
                let u = &tr.controls[l];
                xhn += &h * u;
                match active.as_ref().and_then(|a| a.plan.generator.as_ref()) {
                    Some(_) => xn += &h * u,
                    None => {
                        xn += &h * (u + &tr.attacks[l]);
                        amax = amax.max(tr.attacks[l].norm());
                    }
                }
            }
        }
        if let Some(att) = &active {
            if let (Some(g), false) = (&att.plan.generator, blocked) {
                let lti = cache.lti(topo)?.clone();
                xn += generator_increment(g, &lti, t_k - sampling.t_sense(att.start_step), sampling.dt_y.as_f64())?;
                amax = amax.max(att.input(sampling.holds_overlapping(k).start, sampling).norm());
            }
        }
        xn += normal_vec(&mut rng, p, cfg.noise.process_std);
        tr.attack_norm.push(amax);
        x = xn;
        xh = xhn;
        let done = active
            .as_ref()
            .map(|a| a.finished(k + 1, sampling) || (blocked && random_mode.is_some()))
            .unwrap_or(false);
        if done {
            active = None;
            blocked = false;
        }
    }

    if let Some(tm) = &cfg.metrics {
        tr.metrics = metrics_over_time(model, sampling, &tm.gains, None, &tr.schedule, tm.stride)?;
    }
    Ok(tr)
}

/// Metrics of the windows schedule[w..w+K+1] for w = 0, stride, 2·stride, …
/// J_rob is taken on the closed loop of `gains`.
pub fn metrics_over_time(
    model: &SystemModel,
    sampling: &SamplingConfig,
    gains: &GainPolicy,
    q_rob: Option<&DMatrix<f64>>,
    schedule: &[Topology],
    stride: usize,
) -> Result<Vec<MetricReport>> {
    if stride == 0 {
        return Err(Error::Invalid("metric stride must be positive".into()));
    }
    let h = sampling.k() + 1;
    let g = gains.gains(model, sampling)?;
    let mut out = Vec::new();
    let mut w = 0;
    while w + h <= schedule.len() {
        let ops = assemble_stacked_with(model, sampling, &schedule[w..w + h], true)?;
        let (_, l_inv) = closed_loop_map(&ops, &g)?;
        out.push(MetricReport::compute_closed(&ops, &l_inv, q_rob)?);
        w += stride;
    }
    Ok(out)
}

/// Nominal and intrinsically attacked runs of the stabilized cart-pole.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CartPoleDemo {
    pub nominal: SimTrace,
    pub attacked: SimTrace,
    pub plan: AttackPlan,
    /// max_k |y_k − y_{n,k}|.
    pub max_output_deviation: f64,
    /// ‖x(t_F) − x_n(t_F)‖ / ‖x_a0‖.
    pub state_growth: f64,
    /// max_k ‖x̂_k‖ under attack over the nominal max.
    pub estimate_ratio: f64,
}

/// Cart-pole under LQR and a Kalman observer, attacked through its unstable
/// invariant zero with ‖x_a0‖ = `x_a0_norm`. Both runs share the noise stream.
pub fn run_cartpole_demo(seed: u64, x_a0_norm: f64) -> Result<CartPoleDemo> {
    let model = build_cartpole();
    let sampling = SamplingConfig::new("0.02", "0.02", "1")?;
    let topo = model.nominal.clone();
    let lti = model.matrices(&topo)?;
    let zeros = invariant_zeros(&lti.a, &lti.b, &lti.c)?;
    let plan = intrinsic_attack_from(&zeros, &sampling)?;
    let nx = plan.x_a0.norm();
    if nx == 0.0 {
        return Err(Error::Numerical("intrinsic attack has no initial-state component".into()));
    }
    let plan = plan.scaled(x_a0_norm / nx);
    let steps = sampling.k();
    let schedule = vec![topo; steps + 1];
    let mut cfg = SimConfig::new(steps);
    cfg.controller = ControllerConfig::Lqr {
        state_weight: 1.0,
        input_weight: 0.1,
    };
    cfg.seed = seed;
    cfg.x0 = Some(DVector::from_vec(vec![0.0, 0.0, 0.05, 0.0]));
    let nominal = run(&model, &sampling, &schedule, &cfg)?;
    cfg.detector.threshold = Some(nominal.threshold);
    cfg.attack = AttackMode::Plan {
        plan: plan.clone(),
        start_step: 0,
    };
    let attacked = run(&model, &sampling, &schedule, &cfg)?;
    let max_output_deviation = nominal
        .outputs
        .iter()
        .zip(&attacked.outputs)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    let state_growth = (attacked.states[steps].clone() - &nominal.states[steps]).norm() / plan.x_a0.norm();
    let env = |t: &SimTrace| t.estimates.iter().map(|v| v.norm()).fold(0.0, f64::max);
    Ok(CartPoleDemo {
        estimate_ratio: env(&attacked) / env(&nominal),
        nominal,
        attacked,
        plan,
        max_output_deviation,
        state_growth,
    })
}

mod plain_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}
