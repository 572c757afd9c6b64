//! The lifted selection SDP for topology-independent 𝓐 and 𝓑 with a fixed
//! gain template.
//!
//! Each step k with candidates Θ_{k,0}, …, Θ_{k,T−1} gets binary selectors
//! σ_{k,t}, t ≥ 1, so C_k = C(Θ_{k,0}) + Σ_t σ_{k,t}(C(Θ_{k,t}) − C(Θ_{k,0}))
//! and 𝓒 is affine in σ. Every product of 𝓒 with itself in the lifted
//! constraints is then linear in the lifting Z = [[X, σ], [σᵀ, 1]] with
//! X ≈ σσᵀ; exactness is rank(Z) = 1.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lifting::is_psd;
use super::{Method, SwitchResult, SwitchSpec};
use crate::discretize::StackedOperators;
use crate::linalg::{lambda_min, sym_eig_sorted, symmetrize};
use crate::model::Topology;
use crate::sdp::{self, LmiBlock, SdpOptions, SdpProblem, SdpSolution, SdpStatus};
use crate::{Error, Result};

/// Rank-one test λ₂/λ₁ ≤ this on the lifting.
pub const RANK_RATIO_TOL: f64 = 1e-6;

/// M(σ) = c0 + Σ_s σ_s lin[s].
#[derive(Clone, Debug)]
struct Affine {
    c0: DMatrix<f64>,
    lin: Vec<DMatrix<f64>>,
}

impl Affine {
    /// Applies a linear map to every coefficient.
    fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Affine {
        Affine {
            c0: f(&self.c0),
            lin: self.lin.iter().map(&f).collect(),
        }
    }

    fn eval(&self, sigma: &[f64]) -> DMatrix<f64> {
        let mut m = self.c0.clone();
        for (s, l) in sigma.iter().zip(&self.lin) {
            m += l * *s;
        }
        m
    }
}

/// The lifted problem and its variable registry.
#[derive(Clone, Debug)]
pub struct LiftedProblem {
    pub sdp: SdpProblem,
    /// (step, candidate) of selector s; its variable index is 1 + s.
    /// Variable 0 is γ.
    pub sigma: Vec<(usize, usize)>,
    /// Cross-step products X_{s,s'} (s < s') and their variable indices.
    pub pairs: BTreeMap<(usize, usize), usize>,
    /// Block holding Z = [[X, σ], [σᵀ, 1]], the rank-constrained variable.
    pub lift_block: Option<usize>,
    pub spec: SwitchSpec,
    objective: DVector<f64>,
    c_aff: Affine,
    ops: StackedOperators,
    gain: DMatrix<f64>,
}

fn block_embed(rows: usize, cols: usize, r0: usize, c0: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    out.view_mut((r0, c0), m.shape()).copy_from(m);
    out
}

impl LiftedProblem {
    pub fn num_sigma(&self) -> usize {
        self.sigma.len()
    }

    fn pair_var(&self, s: usize, t: usize) -> Option<usize> {
        let key = if s < t { (s, t) } else { (t, s) };
        self.pairs.get(&key).copied()
    }

    /// Z(x); empty when no step offers a choice.
    pub fn lifting(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.num_sigma();
        let mut z = DMatrix::zeros(n + 1, n + 1);
        for s in 0..n {
            z[(s, s)] = x[1 + s];
            z[(s, n)] = x[1 + s];
            z[(n, s)] = x[1 + s];
            for t in (s + 1)..n {
                if let Some(v) = self.pair_var(s, t) {
                    z[(s, t)] = x[v];
                    z[(t, s)] = x[v];
                }
            }
        }
        z[(n, n)] = 1.0;
        z
    }

    /// Candidate index per step for the binary point σ.
    pub fn choice_of(&self, sigma: &[f64]) -> Vec<usize> {
        let mut out = vec![0; self.spec.steps()];
        for (s, &(k, t)) in self.sigma.iter().enumerate() {
            if sigma[s] > 0.5 {
                out[k] = t;
            }
        }
        out
    }

    /// The exact lifted point of a schedule given by candidate indices.
    pub fn point_for(&self, choice: &[usize], gamma: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.sdp.m);
        x[0] = gamma;
        let sig: Vec<f64> = self
            .sigma
            .iter()
            .map(|&(k, t)| if choice[k] == t { 1.0 } else { 0.0 })
            .collect();
        for (s, v) in sig.iter().enumerate() {
            x[1 + s] = *v;
        }
        for (&(s, t), &v) in &self.pairs {
            x[v] = sig[s] * sig[t];
        }
        x
    }

    /// 𝓒 at a (possibly fractional) selector vector.
    pub fn c_stack(&self, sigma: &[f64]) -> DMatrix<f64> {
        self.c_aff.eval(sigma)
    }

    /// Edge weights per step from full candidate weights.
    fn snap(&self, sigma: &[f64]) -> Vec<Topology> {
        let steps = self.spec.steps();
        let mut w: Vec<Vec<f64>> = (0..steps)
            .map(|k| {
                let mut v = vec![0.0; self.spec.candidates(k).len()];
                v[0] = 1.0;
                v
            })
            .collect();
        for (s, &(k, t)) in self.sigma.iter().enumerate() {
            let v = sigma[s].clamp(0.0, 1.0);
            w[k][t] = v;
            w[k][0] -= v;
        }
        (0..steps)
            .map(|k| {
                let cand = self.spec.candidates(k);
                let n = cand[0].n;
                let mut pattern = vec![vec![false; n]; n];
                for i in 0..n {
                    for j in (i + 1)..n {
                        let theta: f64 = cand
                            .iter()
                            .zip(&w[k])
                            .map(|(c, wt)| if c.has_edge(i, j) { *wt } else { 0.0 })
                            .sum();
                        pattern[i][j] = theta >= 0.5;
                    }
                }
                let dist = |c: &Topology| {
                    let mut d = 0usize;
                    for i in 0..n {
                        for j in (i + 1)..n {
                            if c.has_edge(i, j) != pattern[i][j] {
                                d += 1;
                            }
                        }
                    }
                    d
                };
                let best = (0..cand.len())
                    .min_by(|&a, &b| {
                        dist(&cand[a])
                            .cmp(&dist(&cand[b]))
                            .then(w[k][b].total_cmp(&w[k][a]))
                            .then(a.cmp(&b))
                    })
                    .expect("non-empty candidate set");
                cand[best].clone()
            })
            .collect()
    }
}

/// Quadratic form P(σ) W P(σ)ᵀ as per-variable coefficients.
fn quad_terms(lp_sigma: &[(usize, usize)], pairs: &BTreeMap<(usize, usize), usize>, p: &Affine, w: &DMatrix<f64>) -> Vec<(Option<usize>, DMatrix<f64>)> {
    let pw0 = &p.c0 * w;
    let pw: Vec<DMatrix<f64>> = p.lin.iter().map(|m| m * w).collect();
    let mut out = vec![(None, symmetrize(&(&pw0 * p.c0.transpose())))];
    for (s, ps) in p.lin.iter().enumerate() {
        let m = &pw0 * ps.transpose() + &pw[s] * p.c0.transpose() + &pw[s] * ps.transpose();
        out.push((Some(1 + s), symmetrize(&m)));
    }
    for (&(s, t), &v) in pairs {
        debug_assert_ne!(lp_sigma[s].0, lp_sigma[t].0);
        let m = &pw[s] * p.lin[t].transpose() + &pw[t] * p.lin[s].transpose();
        out.push((Some(v), symmetrize(&m)));
    }
    out
}

fn put_sym(blk: &mut LmiBlock, r0: usize, terms: &[(Option<usize>, DMatrix<f64>)]) {
    for (v, m) in terms {
        blk.add_matrix(*v, r0, r0, m);
    }
}

fn put_affine(blk: &mut LmiBlock, r0: usize, c0: usize, a: &Affine) {
    blk.add_matrix(None, r0, c0, &a.c0);
    for (s, m) in a.lin.iter().enumerate() {
        blk.add_matrix(Some(1 + s), r0, c0, m);
    }
}

fn put_identity(blk: &mut LmiBlock, var: Option<usize>, r0: usize, n: usize, v: f64) {
    for i in 0..n {
        blk.add(var, r0 + i, r0 + i, v);
    }
}

/// Adds the block, or checks it when it carries no variables: a constant
/// PSD block is redundant, a constant indefinite one is infeasible.
fn push_block(p: &mut SdpProblem, blk: LmiBlock, what: &str) -> Result<Option<usize>> {
    if blk.terms.keys().all(|k| k.0 == 0) {
        let m = blk.dense(None);
        if is_psd(&m, 1e-9) {
            return Ok(None);
        }
        return Err(Error::Infeasible(format!(
            "{what} fails for every admissible choice (λ_min = {:e})",
            lambda_min(&m)
        )));
    }
    Ok(Some(p.add_block(blk)))
}

/// Builds the lifted problem: min γ subject to the observability and
/// sensitivity LMIs, the Schur-form robustness LMI, the lifting block and
/// the product inequalities of the selectors.
pub fn build_lifted_problem(spec: &SwitchSpec) -> Result<LiftedProblem> {
    spec.validate()?;
    if !spec.model.a_fixed() {
        return Err(Error::Invalid(
            "A depends on the topology; the lifted problem needs a fixed A, use brute_force_select".into(),
        ));
    }
    let steps = spec.steps();
    let th = spec.thresholds;
    let reference: Vec<Topology> = (0..steps).map(|k| spec.candidates(k)[0].clone()).collect();
    let ops = spec.operators(&reference)?;
    let gains = spec.gains.gains(&spec.model, &spec.sampling)?;
    let gain = gains.dense.clone();
    let (p, bp, bq) = (ops.p, ops.b_stack.nrows(), ops.b_stack.ncols());
    let rk = spec.model.padded_output_dim();
    let cr = rk * steps;

    // controllability does not depend on the topology when B is fixed
    let bl = ops.b_last();
    let j_con = lambda_min(&(&bl * bl.transpose()));
    if j_con < th.c_c {
        return Err(Error::Infeasible(format!("J_con = {j_con:e} is below c_c = {:e}", th.c_c)));
    }

    let mut sigma = Vec::new();
    let mut c0 = DMatrix::zeros(cr, bp);
    let mut lin = Vec::new();
    for k in 0..steps {
        let cand = spec.candidates(k);
        let base = spec.model.matrices_padded(&cand[0])?.c;
        c0.view_mut((k * rk, k * p), (rk, p)).copy_from(&base);
        for (t, topo) in cand.iter().enumerate().skip(1) {
            let d = spec.model.matrices_padded(topo)?.c - &base;
            sigma.push((k, t));
            lin.push(block_embed(cr, bp, k * rk, k * p, &d));
        }
    }
    let ns = sigma.len();
    let mut pairs = BTreeMap::new();
    let mut next = 1 + ns;
    for s in 0..ns {
        for t in (s + 1)..ns {
            if sigma[s].0 != sigma[t].0 {
                pairs.insert((s, t), next);
                next += 1;
            }
        }
    }
    let m = next;
    let c_aff = Affine { c0, lin };
    let q_inv = match &spec.q_rob {
        Some(q) => symmetrize(&q.clone().try_inverse().ok_or_else(|| Error::Invalid("Q_rob is singular".into()))?),
        None => DMatrix::identity(bp, bp),
    };
    let e = ops.e_stack();
    let mut sdp = SdpProblem::new(m);
    sdp.c[0] = 1.0;

    // observability: 𝓐ᵀ𝓒ᵀ𝓒𝓐 ⪰ c_o I
    let at = ops.a_stack.transpose();
    let p_obs = c_aff.map(|c| &at * c.transpose());
    let eye_cr = DMatrix::identity(cr, cr);
    let mut blk = LmiBlock::new(p);
    put_sym(&mut blk, 0, &quad_terms(&sigma, &pairs, &p_obs, &eye_cr));
    put_identity(&mut blk, None, 0, p, -th.c_o);
    push_block(&mut sdp, blk, "observability")?;

    // sensitivity: 𝓔ᵀ𝓒ᵀ𝓒𝓔 ⪰ c_s I
    let et = e.transpose();
    let p_sen = c_aff.map(|c| &et * c.transpose());
    let ne = p + bq;
    let mut blk = LmiBlock::new(ne);
    put_sym(&mut blk, 0, &quad_terms(&sigma, &pairs, &p_sen, &eye_cr));
    put_identity(&mut blk, None, 0, ne, -th.c_s);
    push_block(&mut sdp, blk, "sensitivity")?;

    // robustness in Schur form
    let p_k1 = c_aff.map(|c| &q_inv * c.transpose() * gain.transpose());
    let bk = &ops.b_stack * &gain;
    let p_k2 = c_aff.map(|c| &bk * c);
    let n3 = bp + ne + bq;
    let mut blk = LmiBlock::new(n3);
    blk.add_matrix(None, 0, 0, &symmetrize(&(&q_inv + &ops.b_stack * ops.b_stack.transpose())));
    put_sym(&mut blk, 0, &quad_terms(&sigma, &pairs, &p_k1, &DMatrix::identity(bq, bq)));
    put_sym(&mut blk, 0, &quad_terms(&sigma, &pairs, &p_k2, &q_inv));
    blk.add_matrix(None, bp, 0, &et);
    let mut f = p_k1.clone();
    f.c0 += &ops.b_stack;
    put_affine(&mut blk, bp + ne, 0, &f.map(|m| m.transpose()));
    put_identity(&mut blk, Some(0), bp, ne, 1.0);
    put_identity(&mut blk, None, bp + ne, bq, 1.0);
    sdp.add_block(blk);

    let mut lift_block = None;
    if ns > 0 {
        let mut z = LmiBlock::new(ns + 1);
        for s in 0..ns {
            z.add(Some(1 + s), s, s, 1.0);
            z.add(Some(1 + s), ns, s, 1.0);
        }
        for (&(s, t), &v) in &pairs {
            z.add(Some(v), t, s, 1.0);
        }
        z.add(None, ns, ns, 1.0);
        lift_block = Some(sdp.add_block(z));

        // products of σ ≥ 0 and 1 − Σ_t σ_{k,t} ≥ 0 across steps
        let by_step: Vec<Vec<usize>> = (0..steps)
            .map(|k| (0..ns).filter(|&s| sigma[s].0 == k).collect())
            .collect();
        let pv = |s: usize, t: usize| pairs[&if s < t { (s, t) } else { (t, s) }];
        let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
        for &v in pairs.values() {
            rows.push((0.0, vec![(v, 1.0)]));
        }
        for (k, ss) in by_step.iter().enumerate() {
            if ss.is_empty() {
                continue;
            }
            rows.push((1.0, ss.iter().map(|&s| (1 + s, -1.0)).collect()));
            for t in 0..ns {
                if sigma[t].0 == k {
                    continue;
                }
                let mut r = vec![(1 + t, 1.0)];
                r.extend(ss.iter().map(|&s| (pv(s, t), -1.0)));
                rows.push((0.0, r));
            }
            for ss2 in by_step.iter().skip(k + 1) {
                if ss2.is_empty() {
                    continue;
                }
                let mut r: Vec<(usize, f64)> = ss.iter().chain(ss2).map(|&s| (1 + s, -1.0)).collect();
                for &s in ss {
                    for &t in ss2 {
                        r.push((pv(s, t), 1.0));
                    }
                }
                rows.push((1.0, r));
            }
        }
        let mut lin_blk = LmiBlock::new(rows.len());
        for (i, (c, terms)) in rows.iter().enumerate() {
            lin_blk.add(None, i, i, *c);
            for &(v, a) in terms {
                lin_blk.add(Some(v), i, i, a);
            }
        }
        sdp.add_block(lin_blk);
    }

    Ok(LiftedProblem {
        objective: sdp.c.clone(),
        sdp,
        sigma,
        pairs,
        lift_block,
        spec: spec.clone(),
        c_aff,
        ops,
        gain,
    })
}

/// Appends [[α E_kᵀP_kE_k, A_cl,kᵀ], [A_cl,k, P_{k+1}⁻¹]] ⪰ 0 for
/// k = 0..K−1 with the one-step closed loop A_cl,k = S_kE_k + 𝐁_k𝓚𝓒, so
/// that x_{k+1}ᵀP_{k+1}x_{k+1} ≤ α x_kᵀP_kx_k. Coordinates of 𝐱 that the
/// block does not touch are dropped.
pub fn add_stability_constraint(lp: &mut LiftedProblem, p_seq: &[DMatrix<f64>], alpha: f64) -> Result<()> {
    let ops = &lp.ops;
    let (p, kk) = (ops.p, ops.k);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("α must lie in (0,1), got {alpha}")));
    }
    if p_seq.len() != kk + 1 {
        return Err(Error::Dimension(format!("need {} Lyapunov matrices, got {}", kk + 1, p_seq.len())));
    }
    for (k, pk) in p_seq.iter().enumerate() {
        if pk.shape() != (p, p) {
            return Err(Error::Dimension(format!("P_{k} must be {p}x{p}")));
        }
        if !(lambda_min(pk) > 0.0) || crate::linalg::sym_defect(pk) > 1e-12 * (1.0 + pk.abs().max()) {
            return Err(Error::Invalid(format!("P_{k} is not symmetric positive definite")));
        }
    }
    let bp = ops.b_stack.nrows();
    for k in 0..kk {
        let bkc = ops.bb(k) * &lp.gain;
        let mut a_cl = lp.c_aff.map(|c| &bkc * c);
        {
            let mut v = a_cl.c0.view_mut((0, k * p), (p, p));
            v += &ops.s[k];
        }
        let cols: Vec<usize> = (0..bp)
            .filter(|&j| {
                j / p == k
                    || a_cl.c0.column(j).amax() > 0.0
                    || a_cl.lin.iter().any(|m| m.column(j).amax() > 0.0)
            })
            .collect();
        let nx = cols.len();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(p, nx, |i, j| m[(i, cols[j])]);
        let a_red = a_cl.map(pick);
        let mut lhs = DMatrix::zeros(nx, nx);
        for (i, &ci) in cols.iter().enumerate() {
            for (j, &cj) in cols.iter().enumerate() {
                if ci / p == k && cj / p == k {
                    lhs[(i, j)] = alpha * p_seq[k][(ci % p, cj % p)];
                }
            }
        }
        let p_next_inv = symmetrize(
            &p_seq[k + 1]
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Invalid(format!("P_{} is singular", k + 1)))?,
        );
        let mut blk = LmiBlock::new(nx + p);
        blk.add_matrix(None, 0, 0, &lhs);
        put_affine(&mut blk, nx, 0, &a_red);
        blk.add_matrix(None, nx, nx, &p_next_inv);
        push_block(&mut lp.sdp, blk, &format!("stability at step {k}"))?;
    }
    Ok(())
}

/// Relaxed optimum of the lifted problem without the rank constraint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShorResult {
    /// Lower bound on the optimal robustness (the dual objective).
    pub gamma_relax: f64,
    pub sigma: Vec<f64>,
    pub lifting: DMatrix<f64>,
    /// λ₂/λ₁ of the lifting.
    pub rank_ratio: f64,
    pub solution: SdpSolution,
    /// Schedule obtained by rounding the relaxed selectors.
    pub result: SwitchResult,
}

fn rank_ratio(z: &DMatrix<f64>) -> f64 {
    let n = z.nrows();
    if n < 2 {
        return 0.0;
    }
    let (v, _) = sym_eig_sorted(z);
    let l1 = v[n - 1];
    if l1 <= 0.0 {
        return f64::INFINITY;
    }
    v[n - 2].max(0.0) / l1
}

fn sdp_solve(lp: &LiftedProblem, c: &DVector<f64>, opts: &SdpOptions) -> Result<SdpSolution> {
    let mut prob = lp.sdp.clone();
    prob.c = c.clone();
    let sol = sdp::solve(&prob, opts)?;
    match sol.status {
        SdpStatus::Optimal => Ok(sol),
        SdpStatus::Infeasible => Err(Error::Infeasible("lifted problem is infeasible".into())),
        SdpStatus::Unbounded => Err(Error::Numerical("lifted problem reported unbounded".into())),
        SdpStatus::MaxIter => Err(Error::Numerical(format!(
            "SDP solver stopped after {} iterations",
            sol.iterations
        ))),
    }
}

fn sigma_of(lp: &LiftedProblem, x: &DVector<f64>) -> Vec<f64> {
    (0..lp.num_sigma()).map(|s| x[1 + s]).collect()
}

/// Solves the Shor relaxation and rounds its selectors.
pub fn solve_shor(lp: &LiftedProblem, opts: &SdpOptions) -> Result<ShorResult> {
    let sol = sdp_solve(lp, &lp.objective, opts)?;
    let sigma = sigma_of(lp, &sol.x);
    let z = lp.lifting(&sol.x);
    let gamma_relax = sol.dual_objective.min(sol.primal_objective);
    let result = SwitchResult::certify(&lp.spec, lp.snap(&sigma), Method::Shor, Some(gamma_relax))?;
    Ok(ShorResult {
        gamma_relax,
        sigma,
        rank_ratio: rank_ratio(&z),
        lifting: z,
        solution: sol,
        result,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RankIterOptions {
    pub max_rounds: usize,
    /// First penalty weight, relative to max(γ_relax, 1).
    pub initial_weight: f64,
    pub growth: f64,
    pub sdp: SdpOptions,
}

impl Default for RankIterOptions {
    fn default() -> Self {
        RankIterOptions {
            max_rounds: 30,
            initial_weight: 0.05,
            growth: 2.0,
            sdp: SdpOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankIterResult {
    pub result: SwitchResult,
    /// SDP solves including the Shor round.
    pub rounds: usize,
    pub converged: bool,
    /// λ₂/λ₁ after each round.
    pub ratios: Vec<f64>,
}

/// Leading-eigenvector selectors of Z ≈ λ v vᵀ.
fn leading_sigma(z: &DMatrix<f64>) -> Vec<f64> {
    let n = z.nrows() - 1;
    let (vals, vecs) = sym_eig_sorted(z);
    let l1 = vals[n];
    let v = vecs.column(n);
    (0..n).map(|s| l1 * v[s] * v[n]).collect()
}

/// Convex iteration: round r solves min γ + w_r⟨W_r, Z⟩ with W_r the
/// projector onto the trailing eigenvectors of the previous Z, until
/// λ₂/λ₁ ≤ [`RANK_RATIO_TOL`] or `max_rounds`. Each round's leading
/// eigenvector is snapped to admissible topologies and certified; the best
/// feasible candidate is returned.
pub fn solve_rank_iteration(lp: &LiftedProblem, opts: &RankIterOptions) -> Result<RankIterResult> {
    let shor = solve_shor(lp, &opts.sdp)?;
    let gamma_relax = shor.gamma_relax;
    let mut ratios = vec![shor.rank_ratio];
    let ns = lp.num_sigma();
    let mut best: Option<SwitchResult> = None;
    let consider = |cand: SwitchResult, best: &mut Option<SwitchResult>| {
        let better = match best {
            None => true,
            Some(b) => {
                (cand.feasible && !b.feasible)
                    || (cand.feasible == b.feasible && cand.metrics.j_rob < b.metrics.j_rob)
            }
        };
        if better {
            *best = Some(cand);
        }
    };
    let certify = |sigma: &[f64]| SwitchResult::certify(&lp.spec, lp.snap(sigma), Method::RankIter, Some(gamma_relax));
    if ns == 0 {
        let r = certify(&[])?;
        return Ok(RankIterResult {
            result: r,
            rounds: 1,
            converged: true,
            ratios,
        });
    }
    consider(certify(&leading_sigma(&shor.lifting))?, &mut best);
    let mut z = shor.lifting;
    let mut converged = shor.rank_ratio <= RANK_RATIO_TOL;
    let mut rounds = 1;
    let mut w = opts.initial_weight * gamma_relax.abs().max(1.0);
    while !converged && rounds < opts.max_rounds {
        let (_, vecs) = sym_eig_sorted(&z);
        let tail = vecs.columns(0, ns).into_owned();
        let wm = &tail * tail.transpose();
        let mut c = lp.objective.clone();
        for s in 0..ns {
            c[1 + s] += w * (wm[(s, s)] + 2.0 * wm[(s, ns)]);
        }
        for (&(s, t), &v) in &lp.pairs {
            c[v] += w * 2.0 * wm[(s, t)];
        }
        let sol = match sdp_solve(lp, &c, &opts.sdp) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("rank iteration round {rounds} failed: {e}");
                break;
            }
        };
        rounds += 1;
        z = lp.lifting(&sol.x);
        let ratio = rank_ratio(&z);
        ratios.push(ratio);
        consider(certify(&leading_sigma(&z))?, &mut best);
        converged = ratio <= RANK_RATIO_TOL;
        w *= opts.growth;
    }
    if !converged {
        log::warn!("rank iteration stopped after {rounds} rounds at λ₂/λ₁ = {:e}", ratios.last().copied().unwrap_or(f64::NAN));
    }
    Ok(RankIterResult {
        result: best.expect("at least one candidate"),
        rounds,
        converged,
        ratios,
    })
}
