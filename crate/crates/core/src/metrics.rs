//! Transient controllability, observability, robustness and sensitivity
//! metrics of the stacked operators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretize::StackedOperators;
use crate::linalg::{check_finite, sym_defect, sym_eig_sorted};
use crate::{Error, Result};

/// Relative factor of the zero threshold 1e-10·(1+‖M‖).
pub const ZERO_REL: f64 = 1e-10;
/// Pivot tolerance of the minimum-effort Cholesky solve.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extreme {
    Min,
    Max,
}

/// Extreme eigenpair of a symmetric matrix (symmetrized first).
pub fn symmetric_extreme_eigen(m: &DMatrix<f64>, which: Extreme) -> Result<(f64, DVector<f64>)> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    check_finite(m, "symmetric eigen input")?;
    let n = m.nrows();
    if n == 0 {
        return Ok((0.0, DVector::zeros(0)));
    }
    let scale = m.abs().max();
    if sym_defect(m) > 1e-9 * (1.0 + scale) {
        return Err(Error::Invalid(format!(
            "matrix not symmetric (defect {:e})",
            sym_defect(m)
        )));
    }
    let (vals, vecs) = sym_eig_sorted(m);
    let i = match which {
        Extreme::Min => 0,
        Extreme::Max => n - 1,
    };
    Ok((vals[i], vecs.column(i).into_owned()))
}

/// An extreme eigenvalue with the zero-threshold decision applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholded {
    pub value: f64,
    pub raw: f64,
    pub is_zero: bool,
}

fn thresholded(raw: f64, m: &DMatrix<f64>) -> Thresholded {
    let norm = crate::linalg::spectral_norm(m);
    let thr = ZERO_REL * (1.0 + norm);
    if raw <= thr {
        Thresholded {
            value: 0.0,
            raw,
            is_zero: true,
        }
    } else {
        Thresholded {
            value: raw,
            raw,
            is_zero: false,
        }
    }
}

/// λ_min((𝓑)_K (𝓑)_Kᵀ).
pub fn controllability_metric(ops: &StackedOperators) -> Thresholded {
    let bk = ops.b_last();
    let w = &bk * bk.transpose();
    let (v, _) = symmetric_extreme_eigen(&w, Extreme::Min).expect("gram is symmetric");
    thresholded(v, &w)
}

/// Minimum input energy Δᵀ((𝓑)_K(𝓑)_Kᵀ)⁻¹Δ, Δ = x_F − (𝓐)_K x_S, to steer
/// x_S to x_F over the horizon.
pub fn min_effort_cost(ops: &StackedOperators, x_s: &DVector<f64>, x_f: &DVector<f64>) -> Result<f64> {
    if x_s.len() != ops.p || x_f.len() != ops.p {
        return Err(Error::Dimension("state vectors must have length p".into()));
    }
    let bk = ops.b_last();
    let w = &bk * bk.transpose();
    let ak = ops.a_stack.rows(ops.k * ops.p, ops.p);
    let delta = x_f - ak * x_s;
    let chol = w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("controllability matrix is singular".into()))?;
    let l = chol.l();
    let dmax = (0..ops.p).map(|i| l[(i, i)] * l[(i, i)]).fold(0.0, f64::max);
    let dmin = (0..ops.p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if dmin <= PIVOT_TOL * dmax.max(1.0) {
        return Err(Error::Numerical("controllability matrix is singular".into()));
    }
    let sol = chol.solve(&delta);
    Ok(delta.dot(&sol))
}

/// The minimum-energy input itself: 𝐮 = (𝓑)_Kᵀ W⁻¹ Δ.
pub fn min_effort_input(ops: &StackedOperators, x_s: &DVector<f64>, x_f: &DVector<f64>) -> Result<DVector<f64>> {
    min_effort_cost(ops, x_s, x_f)?;
    let bk = ops.b_last();
    let w = &bk * bk.transpose();
    let ak = ops.a_stack.rows(ops.k * ops.p, ops.p);
    let delta = x_f - ak * x_s;
    let sol = w.cholesky().expect("checked above").solve(&delta);
    Ok(bk.transpose() * sol)
}

/// λ_min(𝓐ᵀ𝓒ᵀ𝓒𝓐).
pub fn observability_metric(ops: &StackedOperators) -> Thresholded {
    let ca = &ops.c_stack * &ops.a_stack;
    let g = ca.transpose() * &ca;
    let (v, _) = symmetric_extreme_eigen(&g, Extreme::Min).expect("gram is symmetric");
    thresholded(v, &g)
}

fn check_weight(q: &DMatrix<f64>, n: usize) -> Result<()> {
    if q.shape() != (n, n) {
        return Err(Error::Dimension(format!("Q_rob must be {n}x{n}, got {:?}", q.shape())));
    }
    let (lmin, _) = symmetric_extreme_eigen(q, Extreme::Min)?;
    if lmin < -1e-12 * (1.0 + q.abs().max()) {
        return Err(Error::Invalid(format!("Q_rob is not PSD (λ_min = {lmin:e})")));
    }
    Ok(())
}

/// λ_max(𝓔ᵀ Q 𝓔) with 𝓔 = [𝓐, 𝓑] and its maximizing unit vector.
pub fn robustness_metric(ops: &StackedOperators, q_rob: Option<&DMatrix<f64>>) -> Result<(f64, DVector<f64>)> {
    robustness_of(&ops.e_stack(), q_rob)
}

/// Closed-loop robustness λ_max(𝓔ᵀL⁻ᵀ Q L⁻¹𝓔).
pub fn robustness_metric_closed(
    ops: &StackedOperators,
    l_inv: &DMatrix<f64>,
    q_rob: Option<&DMatrix<f64>>,
) -> Result<(f64, DVector<f64>)> {
    robustness_of(&(l_inv * ops.e_stack()), q_rob)
}

fn robustness_of(e: &DMatrix<f64>, q_rob: Option<&DMatrix<f64>>) -> Result<(f64, DVector<f64>)> {
    let m = match q_rob {
        Some(q) => {
            check_weight(q, e.nrows())?;
            e.transpose() * q * e
        }
        None => e.transpose() * e,
    };
    let (v, vec) = symmetric_extreme_eigen(&m, Extreme::Max)?;
    Ok((v.max(0.0), vec))
}

/// λ_min(𝓔ᵀ𝓒ᵀ𝓒𝓔) with the zero decision and its minimizing unit vector.
pub fn sensitivity_metric(ops: &StackedOperators) -> (Thresholded, DVector<f64>) {
    sensitivity_of(&(&ops.c_stack * ops.e_stack()))
}

/// Closed-loop sensitivity λ_min(𝓔ᵀL⁻ᵀ𝓒ᵀ𝓒L⁻¹𝓔).
pub fn sensitivity_metric_closed(ops: &StackedOperators, l_inv: &DMatrix<f64>) -> (Thresholded, DVector<f64>) {
    sensitivity_of(&(&ops.c_stack * l_inv * ops.e_stack()))
}

fn sensitivity_of(ce: &DMatrix<f64>) -> (Thresholded, DVector<f64>) {
    let g = ce.transpose() * ce;
    let (v, vec) = symmetric_extreme_eigen(&g, Extreme::Min).expect("gram is symmetric");
    (thresholded(v, &g), vec)
}

/// The four metrics on one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub j_con: f64,
    pub j_obs: f64,
    pub j_rob: f64,
    pub j_sen: f64,
    /// `None` means Q_rob = I.
    pub q_rob: Option<DMatrix<f64>>,
    pub k: usize,
    pub ell: usize,
    pub con_zero: bool,
    pub obs_zero: bool,
    pub sen_zero: bool,
    /// Raw λ_min of the sensitivity matrix before zero clamping.
    pub j_sen_raw: f64,
}

impl MetricReport {
    pub fn compute(ops: &StackedOperators, q_rob: Option<&DMatrix<f64>>) -> Result<Self> {
        Self::compute_inner(ops, q_rob, None)
    }

    /// J_rob uses the closed loop L⁻¹; the other three are feedback-free.
    pub fn compute_closed(
        ops: &StackedOperators,
        l_inv: &DMatrix<f64>,
        q_rob: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        Self::compute_inner(ops, q_rob, Some(l_inv))
    }

    fn compute_inner(
        ops: &StackedOperators,
        q_rob: Option<&DMatrix<f64>>,
        l_inv: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let con = controllability_metric(ops);
        let obs = observability_metric(ops);
        let (rob, _) = match l_inv {
            Some(li) => robustness_metric_closed(ops, li, q_rob)?,
            None => robustness_metric(ops, q_rob)?,
        };
        let (sen, _) = sensitivity_metric(ops);
        Ok(MetricReport {
            j_con: con.value,
            j_obs: obs.value,
            j_rob: rob,
            j_sen: sen.value,
            q_rob: q_rob.cloned(),
            k: ops.k,
            ell: ops.ell,
            con_zero: con.is_zero,
            obs_zero: obs.is_zero,
            sen_zero: sen.is_zero,
            j_sen_raw: sen.raw,
        })
    }

    pub const CSV_HEADER: [&'static str; 6] = ["k", "ell", "j_con", "j_obs", "j_rob", "j_sen"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.k.to_string(),
            self.ell.to_string(),
            format!("{:e}", self.j_con),
            format!("{:e}", self.j_obs),
            format!("{:e}", self.j_rob),
            format!("{:e}", self.j_sen),
        ]
    }

    /// Flat JSON object of the scalar fields.
    pub fn to_flat_json(&self) -> serde_json::Value {
        serde_json::json!({
            "j_con": self.j_con,
            "j_obs": self.j_obs,
            "j_rob": self.j_rob,
            "j_sen": self.j_sen,
            "k": self.k,
            "ell": self.ell,
            "con_zero": self.con_zero,
            "obs_zero": self.obs_zero,
            "sen_zero": self.sen_zero,
        })
    }
}

/// Elementwise mean of a list of reports.
pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
    let n = reports.len();
    if n == 0 {
        return None;
    }
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let first = &reports[0];
    Some(MetricReport {
        j_con: mean(|r| r.j_con),
        j_obs: mean(|r| r.j_obs),
        j_rob: mean(|r| r.j_rob),
        j_sen: mean(|r| r.j_sen),
        q_rob: first.q_rob.clone(),
        k: first.k,
        ell: first.ell,
        con_zero: reports.iter().any(|r| r.con_zero),
        obs_zero: reports.iter().any(|r| r.obs_zero),
        sen_zero: reports.iter().any(|r| r.sen_zero),
        j_sen_raw: mean(|r| r.j_sen_raw),
    })
}
