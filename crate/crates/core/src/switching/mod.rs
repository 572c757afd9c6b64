//! Topology switching: the robustness-minimizing topology selection problem,
//! its lifted rank-constrained form, the Shor relaxation, convex iteration
//! and an exhaustive enumeration oracle.

mod brute;
mod lifted;
pub mod lifting;

pub use brute::{brute_force_select, DEFAULT_SEQUENCE_CAP};
pub use lifted::{
    add_stability_constraint, build_lifted_problem, solve_rank_iteration, solve_shor, LiftedProblem,
    RankIterOptions, RankIterResult, ShorResult, RANK_RATIO_TOL,
};
pub use lifting::{
    check_lifted, check_nonlinear, is_psd, schur_embed, ConcreteDesign, ConstraintCheck, Entries, LiftLayout,
    RankOneLiftings, VecEntries,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::discretize::{assemble_stacked_with, SamplingConfig, StackedOperators};
use crate::feedback::{assemble_gain, closed_loop_map, CausalGainStack};
use crate::metrics::MetricReport;
use crate::model::{Plant, SystemModel, Topology, TopologySet};
use crate::{Error, Result};

/// Lower bounds on J_con, J_obs and J_sen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub c_c: f64,
    pub c_o: f64,
    pub c_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            c_c: 1e-6,
            c_o: 1e-8,
            c_s: 1e-9,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (v, n) in [(self.c_c, "c_c"), (self.c_o, "c_o"), (self.c_s, "c_s")] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("threshold {n} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn admits(&self, r: &MetricReport) -> bool {
        r.j_con >= self.c_c && r.j_obs >= self.c_o && r.j_sen >= self.c_s
    }
}

/// How the causal output-feedback gain 𝓚 is chosen.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GainPolicy {
    Zero,
    /// A fixed stack conformal with the padded measurement rows.
    Fixed { gains: CausalGainStack },
    /// Consensus feedback on the live edge rows: each hold uses the most
    /// recent causal measurement, u_i = −kp Σ (p_i − p_j) − kd Σ (v_i − v_j)
    /// with leader rows acting as absolute terms.
    Consensus { kp: f64, kd: f64 },
}

impl GainPolicy {
    /// Gain stack for the padded measurement layout of `model`.
    pub fn gains(&self, model: &SystemModel, sampling: &SamplingConfig) -> Result<CausalGainStack> {
        let q = model.input_dim();
        let rk = model.padded_output_dim();
        let r = vec![rk; sampling.k() + 1];
        match self {
            GainPolicy::Zero => Ok(CausalGainStack::zeros(q, &r, sampling)),
            GainPolicy::Fixed { gains } => {
                if gains.q != q || gains.r != r || gains.ell() != sampling.ell() {
                    return Err(Error::Dimension(format!(
                        "fixed gains are {}x{:?} over {} holds, model needs {q}x{r:?} over {}",
                        gains.q,
                        gains.r,
                        gains.ell() + 1,
                        sampling.ell() + 1
                    )));
                }
                assemble_gain(gains.blocks.clone(), sampling)
            }
            GainPolicy::Consensus { kp, kd } => {
                let (n, dims) = match &model.plant {
                    Plant::DoubleIntegratorNetwork { n, dims, .. } => (*n, *dims),
                    _ => {
                        return Err(Error::Invalid(
                            "consensus gains need a double-integrator network".into(),
                        ))
                    }
                };
                let cu = model.matrices_padded(&Topology::complete(n))?.c;
                let mut tmpl = DMatrix::zeros(q, rk);
                for i in 0..n {
                    for d in 0..dims {
                        let x = i * 2 * dims + 2 * d;
                        for row in 0..rk {
                            tmpl[(i * dims + d, row)] = -(kp * cu[(row, x)] + kd * cu[(row, x + 1)]);
                        }
                    }
                }
                let kk = sampling.k();
                let blocks = (0..=sampling.ell())
                    .map(|l| {
                        let recent = (0..=kk).rev().find(|&k| sampling.causal(l, k));
                        (0..=kk)
                            .map(|k| {
                                if Some(k) == recent {
                                    tmpl.clone()
                                } else {
                                    DMatrix::zeros(q, rk)
                                }
                            })
                            .collect()
                    })
                    .collect();
                assemble_gain(blocks, sampling)
            }
        }
    }
}

/// Everything the selection problem needs.
#[derive(Clone, Debug)]
pub struct SwitchSpec {
    pub model: SystemModel,
    pub sampling: SamplingConfig,
    pub topologies: TopologySet,
    pub gains: GainPolicy,
    pub thresholds: Thresholds,
    /// None means Q_rob = I.
    pub q_rob: Option<DMatrix<f64>>,
}

impl SwitchSpec {
    /// Number of sensing instants K + 1.
    pub fn steps(&self) -> usize {
        self.sampling.k() + 1
    }

    /// Admissible topologies at step k; the last listed step repeats.
    pub fn candidates(&self, k: usize) -> &[Topology] {
        let s = &self.topologies.steps;
        &s[k.min(s.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampling.validate()?;
        self.thresholds.validate()?;
        if self.topologies.steps.is_empty() {
            return Err(Error::Invalid("topology set has no steps".into()));
        }
        self.topologies.validate()?;
        for k in 0..self.steps() {
            let c = self.candidates(k);
            if c.is_empty() {
                return Err(Error::Infeasible(format!("no admissible topology at step {k}")));
            }
            for t in c {
                if t.n != self.model.agents() {
                    return Err(Error::Dimension(format!(
                        "step {k}: topology has {} nodes, model has {}",
                        t.n,
                        self.model.agents()
                    )));
                }
            }
        }
        if let Some(q) = &self.q_rob {
            let n = self.model.state_dim() * self.steps();
            if q.shape() != (n, n) {
                return Err(Error::Dimension(format!("Q_rob must be {n}x{n}")));
            }
            if q.clone().cholesky().is_none() {
                return Err(Error::Invalid("Q_rob must be positive definite".into()));
            }
        }
        Ok(())
    }

    pub fn operators(&self, schedule: &[Topology]) -> Result<StackedOperators> {
        if schedule.len() != self.steps() {
            return Err(Error::Dimension(format!(
                "schedule has {} topologies, horizon needs {}",
                schedule.len(),
                self.steps()
            )));
        }
        assemble_stacked_with(&self.model, &self.sampling, schedule, true)
    }

    /// Metrics of a schedule: J_rob on the closed loop, the rest open loop.
    pub fn evaluate(&self, schedule: &[Topology], gains: &CausalGainStack) -> Result<MetricReport> {
        let ops = self.operators(schedule)?;
        let (_, l_inv) = closed_loop_map(&ops, gains)?;
        MetricReport::compute_closed(&ops, &l_inv, self.q_rob.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Shor,
    RankIter,
    BruteForce,
}

/// A chosen schedule with metrics recomputed from scratch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchResult {
    pub topologies: Vec<Topology>,
    pub gains: CausalGainStack,
    pub metrics: MetricReport,
    pub method: Method,
    /// Whether the thresholds hold at the chosen schedule.
    pub feasible: bool,
    /// Optimal value of the convex relaxation, when one was solved.
    pub gamma_relax: Option<f64>,
    /// Achieved J_rob minus `gamma_relax`.
    pub relaxation_gap: Option<f64>,
}

impl SwitchResult {
    /// Evaluates `topologies` and records the outcome.
    pub fn certify(spec: &SwitchSpec, topologies: Vec<Topology>, method: Method, gamma_relax: Option<f64>) -> Result<Self> {
        for (k, t) in topologies.iter().enumerate() {
            if !spec.candidates(k).contains(t) {
                return Err(Error::Invalid(format!("step {k}: topology is not admissible")));
            }
        }
        let gains = spec.gains.gains(&spec.model, &spec.sampling)?;
        let metrics = spec.evaluate(&topologies, &gains)?;
        Ok(SwitchResult {
            feasible: spec.thresholds.admits(&metrics),
            relaxation_gap: gamma_relax.map(|g| metrics.j_rob - g),
            topologies,
            gains,
            metrics,
            method,
            gamma_relax,
        })
    }

    /// Recomputes the metrics and checks they match within 1e-8 (relative
    /// to the metric magnitude).
    pub fn audit(&self, spec: &SwitchSpec) -> Result<()> {
        let m = spec.evaluate(&self.topologies, &self.gains)?;
        let pairs = [
            ("J_con", m.j_con, self.metrics.j_con),
            ("J_obs", m.j_obs, self.metrics.j_obs),
            ("J_rob", m.j_rob, self.metrics.j_rob),
            ("J_sen", m.j_sen, self.metrics.j_sen),
        ];
        for (name, a, b) in pairs {
            if (a - b).abs() > 1e-8 * (1.0 + a.abs()) {
                return Err(Error::Numerical(format!("{name} audit mismatch: {a} vs reported {b}")));
            }
        }
        Ok(())
    }
}
