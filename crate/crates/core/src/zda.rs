//! Zero dynamics attacks: invariant zeros, attack synthesis, stealthiness
//! checks and the output-nulling controlled invariant subspace.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::discretize::{assemble_stacked, SamplingConfig, StackedOperators};
use crate::linalg::{expm_t, hstack, null_space, orth_complement, rank, svd_full_v, vstack};
use crate::metrics::sensitivity_metric;
use crate::model::{Lti, SystemModel, Topology};
use crate::{Error, Result};

/// Default absolute stealth tolerance on per-step output deviation.
pub const STEALTH_TOL: f64 = 1e-8;

type CMat = DMatrix<Complex64>;
type CVec = DVector<Complex64>;

/// One finite invariant zero with a null vector of the Rosenbrock pencil:
/// (zI − A)x_a0 − B u_a0 = 0, C x_a0 = 0.
#[derive(Clone, Debug)]
pub struct InvariantZero {
    pub z: Complex64,
    pub x_a0: CVec,
    pub u_a0: CVec,
    pub multiplicity: usize,
    /// ‖P(z)[x; u]‖ / ‖[x; u]‖.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub enum ZerosResult {
    Finite(Vec<InvariantZero>),
    /// The pencil is rank deficient for every z.
    Degenerate,
}

impl ZerosResult {
    pub fn zeros(&self) -> &[InvariantZero] {
        match self {
            ZerosResult::Finite(z) => z,
            ZerosResult::Degenerate => &[],
        }
    }
}


/// [zI − A, −B; C, D].
pub fn rosenbrock(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, z: Complex64) -> CMat {
    let n = a.nrows();
    let m = b.ncols();
    let p = c.nrows();
    let mut out = CMat::zeros(n + p, n + m);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = -Complex64::new(a[(i, j)], 0.0);
        }
        out[(i, i)] += z;
        for j in 0..m {
            out[(i, n + j)] = Complex64::new(-b[(i, j)], 0.0);
        }
    }
    for i in 0..p {
        for j in 0..n {
            out[(n + i, j)] = Complex64::new(c[(i, j)], 0.0);
        }
    }
    out
}

struct Sys {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

/// Rank threshold for the structural reductions.
fn tol_for(s: &Sys) -> f64 {
    let scale = s.a.norm() + s.b.norm() + s.c.norm() + s.d.norm();
    1e-11 * (1.0 + scale)
}

/// Removes state directions forced to zero by C x + D u = 0 until D has
/// full row rank. Zeros of the pencil are preserved.
fn reduce_rows(mut s: Sys, tol: f64) -> Sys {
    loop {
        let n = s.a.nrows();
        let p = s.c.nrows();
        let m = s.b.ncols();
        if p == 0 || n == 0 {
            return s;
        }
        // Left basis of D: U = [range | left-null].
        let (sv, u) = if m == 0 {
            (vec![], DMatrix::<f64>::identity(p, p))
        } else {
            svd_full_v(&s.d.transpose())
        };
        let rho = sv.iter().filter(|&&x| x > tol).count();
        if rho == p {
            return s;
        }
        let u_r = u.columns(0, rho).into_owned();
        let u_0 = u.columns(rho, p - rho).into_owned();
        let c1 = u_0.transpose() * &s.c;
        let c2 = u_r.transpose() * &s.c;
        let d2 = u_r.transpose() * &s.d;
        let (csv, v) = svd_full_v(&c1);
        let mu = csv.iter().filter(|&&x| x > tol).count();
        if mu == 0 {
            // Rows that constrain nothing.
            s.c = c2;
            s.d = d2;
            continue;
        }
        // W = [null(C1) | row(C1)] so that C1 W = [0, Cμ].
        let w = hstack(&[&v.columns(mu, n - mu).into_owned(), &v.columns(0, mu).into_owned()]);
        let at = w.transpose() * &s.a * &w;
        let bt = w.transpose() * &s.b;
        let ct = &c2 * &w;
        let nr = n - mu;
        let a11 = at.view((0, 0), (nr, nr)).into_owned();
        let a21 = at.view((nr, 0), (mu, nr)).into_owned();
        let b1 = bt.rows(0, nr).into_owned();
        let b2 = bt.rows(nr, mu).into_owned();
        let c21 = ct.columns(0, nr).into_owned();
        s = Sys {
            a: a11,
            b: b1,
            c: vstack(&[&a21, &c21]),
            d: vstack(&[&b2, &d2]),
        };
    }
}

fn dual(s: Sys) -> Sys {
    Sys {
        a: s.a.transpose(),
        b: s.c.transpose(),
        c: s.b.transpose(),
        d: s.d.transpose(),
    }
}

fn pencil_null_vector(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, z: Complex64) -> (CVec, f64) {
    let p = rosenbrock(a, b, c, z);
    let (r, k) = p.shape();
    let padded = if r < k {
        let mut q = CMat::zeros(k, k);
        q.view_mut((0, 0), (r, k)).copy_from(&p);
        q
    } else {
        p.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nonempty");
    let v: CVec = vt.row(imin).adjoint();
    let res = (&p * &v).norm() / v.norm();
    (v, res)
}

/// Finite invariant zeros of (A, B, C) with pencil null vectors.
pub fn invariant_zeros(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<ZerosResult> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension(format!(
            "A {:?}, B {:?}, C {:?} are not conformal",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    for (mat, name) in [(a, "A"), (b, "B"), (c, "C")] {
        crate::linalg::check_finite(mat, name)?;
    }
    let m = b.ncols();
    let p = c.nrows();
    // Normal column rank at a generic point.
    let z0 = Complex64::new(0.618_033_988_7, std::f64::consts::SQRT_2) * (1.0 + a.norm());
    let pz = rosenbrock(a, b, c, z0);
    let sv = pz.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let nrank = sv.iter().filter(|&&s| s > 1e-10 * smax.max(1.0)).count();
    if nrank < n + m {
        return Ok(ZerosResult::Degenerate);
    }
    let s = Sys {
        a: a.clone(),
        b: b.clone(),
        c: c.clone(),
        d: DMatrix::zeros(p, m),
    };
    let tol = tol_for(&s);
    let s = reduce_rows(s, tol);
    let s = dual(reduce_rows(dual(s), tol));
    let nf = s.a.nrows();
    if nf == 0 {
        return Ok(ZerosResult::Finite(vec![]));
    }
    if s.d.nrows() != s.d.ncols() {
        return Err(Error::Numerical(format!(
            "reduced feedthrough is {}x{}; pencil structure not resolved",
            s.d.nrows(),
            s.d.ncols()
        )));
    }
    let dinv = s
        .d
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("reduced feedthrough is singular".into()))?;
    let closed = &s.a - &s.b * dinv * &s.c;
    let eigs = closed.complex_eigenvalues();
    let mut raw: Vec<Complex64> = eigs.iter().cloned().collect();
    raw.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    let mut out: Vec<InvariantZero> = Vec::new();
    for z in raw {
        if let Some(prev) = out
            .iter_mut()
            .find(|iz| (iz.z - z).norm() <= 1e-7 * (1.0 + z.norm()))
        {
            prev.multiplicity += 1;
            continue;
        }
        let (v, residual) = pencil_null_vector(a, b, c, z);
        out.push(InvariantZero {
            z,
            x_a0: v.rows(0, n).into_owned(),
            u_a0: v.rows(n, m).into_owned(),
            multiplicity: 1,
            residual,
        });
    }
    Ok(ZerosResult::Finite(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Intrinsic,
    Sampling,
    Enforced,
}

/// Exponential input generator a(t) = e^{σt}(cos ωt·u_re − sin ωt·u_im),
/// the real part of e^{zt}u_a0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpGenerator {
    pub sigma: f64,
    pub omega: f64,
    pub u_re: DVector<f64>,
    pub u_im: DVector<f64>,
}

impl ExpGenerator {
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let g = (self.sigma * t).exp();
        (&self.u_re * (self.omega * t).cos() - &self.u_im * (self.omega * t).sin()) * g
    }

    /// Ω with w(t) = e^{Ωt}[1, 0]ᵀ = e^{σt}[cos ωt, sin ωt]ᵀ.
    fn omega_block(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.sigma, -self.omega, self.omega, self.sigma])
    }

    fn u_mat(&self) -> DMatrix<f64> {
        let neg_im = -&self.u_im;
        hstack(&[
            &DMatrix::from_column_slice(self.u_re.len(), 1, self.u_re.as_slice()),
            &DMatrix::from_column_slice(neg_im.len(), 1, neg_im.as_slice()),
        ])
    }

    /// Exact state x(t) of ẋ = A x + B a(t), x(0) = x0, at each time in `ts`.
    pub fn propagate(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, x0: &DVector<f64>, ts: &[f64]) -> Result<Vec<DVector<f64>>> {
        let n = a.nrows();
        let mut aug = DMatrix::zeros(n + 2, n + 2);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, 2)).copy_from(&(b * self.u_mat()));
        aug.view_mut((n, n), (2, 2)).copy_from(&self.omega_block());
        let mut z0 = DVector::zeros(n + 2);
        z0.rows_mut(0, n).copy_from(x0);
        z0[n] = 1.0;
        ts.iter()
            .map(|&t| Ok((expm_t(&aug, t)? * &z0).rows(0, n).into_owned()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    InvariantZero {
        z_re: f64,
        z_im: f64,
        residual: f64,
    },
    Nullspace {
        vector: DVector<f64>,
        residual: f64,
    },
    SensitivityEigen {
        value: f64,
        vector: DVector<f64>,
    },
}

/// A synthesized attack and its stealthiness certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Held samples, q × (Ł+1), column ℓ applied on [t_ℓ, t_ℓ + Δt_u).
    pub a_seq: DMatrix<f64>,
    /// Initial-state perturbation.
    pub x_a0: DVector<f64>,
    pub certificate: Certificate,
    pub claimed_stealthy_until: f64,
    /// Exact continuous-time input used for replay of intrinsic attacks.
    pub generator: Option<ExpGenerator>,
}

impl AttackPlan {
    /// Stacked attack vector 𝐚_Ł.
    pub fn a_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(self.a_seq.as_slice())
    }

    pub fn scaled(&self, c: f64) -> AttackPlan {
        let mut out = self.clone();
        out.a_seq *= c;
        out.x_a0 *= c;
        if let Some(g) = out.generator.as_mut() {
            g.u_re *= c;
            g.u_im *= c;
        }
        out
    }

    /// Attack input held during [t_ℓ, t_ℓ + Δt_u); zero past the plan.
    pub fn sample(&self, l: usize) -> DVector<f64> {
        if l < self.a_seq.ncols() {
            self.a_seq.column(l).into_owned()
        } else {
            DVector::zeros(self.a_seq.nrows())
        }
    }
}

/// Rotates a complex vector so its largest entry is real, maximizing the
/// real part's share of the norm for well-separated entries.
fn realign(x: &CVec, u: &CVec) -> (CVec, CVec) {
    let (imax, _) = x
        .iter()
        .chain(u.iter())
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .expect("nonempty");
    let pivot = if imax < x.len() { x[imax] } else { u[imax - x.len()] };
    let rot = if pivot.norm() > 0.0 {
        pivot.conj() / pivot.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    (x * rot, u * rot)
}

/// Intrinsic ZDA from a continuous-time invariant zero: a(t) = Re(e^{zt}u_a0)
/// with x(0) perturbed by Re(x_a0).
pub fn intrinsic_attack(zero: &InvariantZero, sampling: &SamplingConfig) -> Result<AttackPlan> {
    let (x, u) = realign(&zero.x_a0, &zero.u_a0);
    let x_re = x.map(|c| c.re);
    let gen = ExpGenerator {
        sigma: zero.z.re,
        omega: zero.z.im,
        u_re: u.map(|c| c.re),
        u_im: u.map(|c| c.im),
    };
    let ell = sampling.ell();
    let q = u.len();
    let mut a_seq = DMatrix::zeros(q, ell + 1);
    for l in 0..=ell {
        a_seq.set_column(l, &gen.eval(sampling.t_hold(l)));
    }
    Ok(AttackPlan {
        kind: AttackKind::Intrinsic,
        a_seq,
        x_a0: x_re,
        certificate: Certificate::InvariantZero {
            z_re: zero.z.re,
            z_im: zero.z.im,
            residual: zero.residual,
        },
        claimed_stealthy_until: sampling.t_f.as_f64(),
        generator: Some(gen),
    })
}

/// Picks the zero with the largest real part (most destabilizing) and builds
/// its intrinsic attack.
pub fn intrinsic_attack_from(zeros: &ZerosResult, sampling: &SamplingConfig) -> Result<AttackPlan> {
    let z = zeros
        .zeros()
        .iter()
        .max_by(|a, b| a.z.re.total_cmp(&b.z.re))
        .ok_or_else(|| Error::Infeasible("no invariant zeros".into()))?;
    intrinsic_attack(z, sampling)
}

/// Lifted one-interval discrete system x_{k+1} = S x_k + Γ U_k where U_k
/// stacks the hold samples falling in one sensing interval. Requires a
/// topology-constant model and Δt_y an integer multiple of Δt_u.
pub fn lifted_discrete(ops: &StackedOperators) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, usize)> {
    if ops.k == 0 {
        return Err(Error::Invalid("horizon must contain a sensing interval".into()));
    }
    let per = (ops.ell + 1) / ops.k;
    if per * ops.k != ops.ell + 1 {
        return Err(Error::Invalid(
            "sampling attack needs Δt_y to be an integer multiple of Δt_u".into(),
        ));
    }
    let bb = ops.bb(0);
    let gamma = bb.columns(0, per * ops.q).into_owned();
    Ok((ops.s[0].clone(), gamma, ops.c[0].clone(), per))
}

/// Zeros of the discretized pencil (S, Γ, C).
pub fn discrete_zeros(ops: &StackedOperators) -> Result<ZerosResult> {
    let (s, g, c, _) = lifted_discrete(ops)?;
    invariant_zeros(&s, &g, &c)
}

/// Sampling ZDA a_k = z^k U_a0 over a horizon of K sensing intervals with
/// `per` hold samples each.
pub fn sampling_attack(zero: &InvariantZero, q: usize, per: usize, k: usize, t_k: f64) -> Result<AttackPlan> {
    if zero.u_a0.len() != q * per {
        return Err(Error::Dimension("zero input vector does not match q·per".into()));
    }
    let (x, u) = realign(&zero.x_a0, &zero.u_a0);
    let mut a_seq = DMatrix::zeros(q, per * k);
    let mut zk = Complex64::new(1.0, 0.0);
    for kk in 0..k {
        for j in 0..per {
            for i in 0..q {
                a_seq[(i, kk * per + j)] = (zk * u[j * q + i]).re;
            }
        }
        zk *= zero.z;
    }
    Ok(AttackPlan {
        kind: AttackKind::Sampling,
        a_seq,
        x_a0: x.map(|c| c.re),
        certificate: Certificate::InvariantZero {
            z_re: zero.z.re,
            z_im: zero.z.im,
            residual: zero.residual,
        },
        claimed_stealthy_until: t_k,
        generator: None,
    })
}

/// Enforced ZDA: the unit minimizer of ‖𝓒𝓔[x; 𝐚]‖ when J_sen is within
/// tolerance.
pub fn enforced_attack(ops: &StackedOperators, sampling: &SamplingConfig, tol: f64) -> Result<AttackPlan> {
    let (jsen, _) = sensitivity_metric(ops);
    let ce = &ops.c_stack * ops.e_stack();
    let (sv, v) = svd_full_v(&ce);
    let cols = ce.ncols();
    // σ_min over all columns, counting padded zeros for wide matrices.
    let smin = if ce.nrows() < cols { 0.0 } else { *sv.last().unwrap_or(&0.0) };
    if !jsen.is_zero && smin > tol {
        return Err(Error::Infeasible(format!(
            "no stealthy direction: J_sen = {:e}",
            jsen.value
        )));
    }
    let vec = v.column(cols - 1).into_owned();
    let residual = (&ce * &vec).norm();
    let x_a0 = vec.rows(0, ops.p).into_owned();
    let a = vec.rows(ops.p, cols - ops.p).into_owned();
    Ok(AttackPlan {
        kind: AttackKind::Enforced,
        a_seq: DMatrix::from_column_slice(ops.q, ops.ell + 1, a.as_slice()),
        x_a0,
        certificate: Certificate::Nullspace { vector: vec, residual },
        claimed_stealthy_until: sampling.t_sense(ops.k),
        generator: None,
    })
}

/// Enforced ZDA maximizing the terminal deviation ‖x_K‖² over
/// ‖x_a0‖² + δ‖[x_a0; 𝐚]‖² within ker 𝓒𝓔 (singular values below `tol`).
/// Returns a unit-norm [x_a0; 𝐚].
pub fn enforced_attack_max_growth(
    ops: &StackedOperators,
    sampling: &SamplingConfig,
    tol: f64,
    delta: f64,
) -> Result<AttackPlan> {
    if !(delta > 0.0) {
        return Err(Error::Invalid(format!("delta must be positive, got {delta}")));
    }
    let ce = &ops.c_stack * ops.e_stack();
    let n = null_space(&ce, 0.0, tol);
    if n.ncols() == 0 {
        return Err(Error::Infeasible("no stealthy direction within tolerance".into()));
    }
    let e = ops.e_stack();
    let term = e.rows(ops.k * ops.p, ops.p) * &n;
    let x = n.rows(0, ops.p);
    let a = term.transpose() * &term;
    let b = x.transpose() * x + DMatrix::identity(n.ncols(), n.ncols()) * delta;
    let l = b
        .cholesky()
        .ok_or_else(|| Error::Numerical("growth weight not positive definite".into()))?
        .l();
    let li = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular growth weight".into()))?;
    let (_, vecs) = crate::linalg::sym_eig_sorted(&(&li * a * li.transpose()));
    let w = li.transpose() * vecs.column(vecs.ncols() - 1);
    let mut v = &n * w;
    v /= v.norm();
    let residual = (&ce * &v).norm();
    let cols = v.len();
    Ok(AttackPlan {
        kind: AttackKind::Enforced,
        a_seq: DMatrix::from_column_slice(ops.q, ops.ell + 1, v.rows(ops.p, cols - ops.p).as_slice()),
        x_a0: v.rows(0, ops.p).into_owned(),
        certificate: Certificate::Nullspace { vector: v, residual },
        claimed_stealthy_until: sampling.t_sense(ops.k),
        generator: None,
    })
}

/// Output deviation ‖y_k − y_{n,k}‖ at each sensing instant caused by the
/// plan alone (the system is linear, so the nominal trajectory cancels).
pub fn output_deviation(
    model: &SystemModel,
    sampling: &SamplingConfig,
    schedule: &[Topology],
    plan: &AttackPlan,
) -> Result<Vec<f64>> {
    let ops = assemble_stacked(model, sampling, schedule)?;
    if plan.x_a0.len() != ops.p {
        return Err(Error::Dimension("plan state dimension".into()));
    }
    let states: Vec<DVector<f64>> = match &plan.generator {
        Some(g) => {
            let ltis = schedule
                .iter()
                .map(|t| model.matrices(t))
                .collect::<Result<Vec<Lti>>>()?;
            let mut x = plan.x_a0.clone();
            let mut out = vec![x.clone()];
            let dty = sampling.dt_y.as_f64();
            for k in 0..ops.k {
                // Shift the generator to the interval start.
                let t0 = sampling.t_sense(k);
                let shifted = ExpGenerator {
                    sigma: g.sigma,
                    omega: g.omega,
                    u_re: g.eval(t0),
                    u_im: {
                        let e = (g.sigma * t0).exp();
                        (&g.u_re * (g.omega * t0).sin() + &g.u_im * (g.omega * t0).cos()) * e
                    },
                };
                x = shifted.propagate(&ltis[k].a, &ltis[k].b, &x, &[dty])?.remove(0);
                out.push(x.clone());
            }
            out
        }
        None => {
            let a = plan.a_vec();
            if a.len() != ops.b_stack.ncols() {
                return Err(Error::Dimension(format!(
                    "plan has {} attack entries, horizon needs {}",
                    a.len(),
                    ops.b_stack.ncols()
                )));
            }
            let xs = ops.states(&plan.x_a0, &a);
            (0..=ops.k).map(|k| xs.rows(k * ops.p, ops.p).into_owned()).collect()
        }
    };
    Ok(states
        .iter()
        .enumerate()
        .map(|(k, x)| (&ops.c[k] * x).norm())
        .collect())
}

/// Stealthy iff max_k ‖y_k − y_{n,k}‖ ≤ tol.
pub fn stealthiness_check(
    model: &SystemModel,
    sampling: &SamplingConfig,
    schedule: &[Topology],
    plan: &AttackPlan,
    tol: f64,
) -> Result<(bool, f64)> {
    let dev = output_deviation(model, sampling, schedule, plan)?;
    let max = dev.iter().cloned().fold(0.0, f64::max);
    Ok((max <= tol, max))
}

/// Maximal output-nulling controlled invariant subspace with a friend F.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputNullingSubspace {
    pub basis: DMatrix<f64>,
    pub friend: DMatrix<f64>,
    pub iterations: usize,
}

impl OutputNullingSubspace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Eigenvalues of A + BF restricted to the subspace.
    pub fn restricted_eigenvalues(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Complex64> {
        if self.dim() == 0 {
            return vec![];
        }
        let y = self.basis.transpose() * (a + b * &self.friend) * &self.basis;
        y.complex_eigenvalues().iter().cloned().collect()
    }
}

const SUBSPACE_TOL: f64 = 1e-10;

/// 𝒱_0 = ker C, 𝒱_{i+1} = ker C ∩ A⁻¹(𝒱_i + Im B) to the fixpoint.
pub fn output_nulling_subspace(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<OutputNullingSubspace> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension("A, B, C not conformal".into()));
    }
    let scale = 1.0 + a.norm() + b.norm() + c.norm();
    let tol = SUBSPACE_TOL * scale;
    let mut v = null_space(c, 0.0, tol);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let span = hstack(&[&v, b]);
        let q = orth_complement(&span, n, 0.0, tol);
        let stacked = vstack(&[c, &(q.transpose() * a)]);
        let next = null_space(&stacked, 0.0, tol);
        let done = next.ncols() == v.ncols();
        v = next;
        if done || v.ncols() == 0 || iterations > n + 1 {
            break;
        }
    }
    let d = v.ncols();
    let m = b.ncols();
    let friend = if d == 0 || m == 0 {
        DMatrix::zeros(m, n)
    } else {
        // [V, −B][Y; G] = A V in the least-squares sense, F = G Vᵀ.
        let lhs = hstack(&[&v, &(-b)]);
        let rhs = a * &v;
        let sol = lhs
            .svd(true, true)
            .solve(&rhs, 1e-12 * scale)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let g = sol.rows(d, m).into_owned();
        g * v.transpose()
    };
    Ok(OutputNullingSubspace {
        basis: v,
        friend,
        iterations,
    })
}

fn trivially_intersects(m: &DMatrix<f64>) -> bool {
    // m = M·V; the intersection is {0} iff M V has full column rank.
    if m.ncols() == 0 {
        return true;
    }
    if m.nrows() < m.ncols() {
        return false;
    }
    let sv = m.singular_values();
    let thr = 1e-9 * sv.max().max(1.0);
    sv.iter().all(|&s| s > thr)
}

/// True iff 𝒱* ∩ ker(C̃) = {0}: a sensor change reveals the zero dynamics.
pub fn reveal_check_c(sub: &OutputNullingSubspace, c_new: &DMatrix<f64>) -> bool {
    sub.dim() > 0 && trivially_intersects(&(c_new * &sub.basis))
}

/// True iff 𝒱* ∩ ker((B̃ − B)F) = {0}: an actuation change reveals the
/// zero dynamics.
pub fn reveal_check_b(sub: &OutputNullingSubspace, b_old: &DMatrix<f64>, b_new: &DMatrix<f64>) -> bool {
    sub.dim() > 0 && trivially_intersects(&((b_new - b_old) * &sub.friend * &sub.basis))
}

/// Numerical rank of a real matrix with the crate's relative tolerance.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    rank(m, 1e-10, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_cartpole;

    #[test]
    fn full_state_output_has_no_zeros() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::identity(2, 2);
        assert!(invariant_zeros(&a, &b, &c).unwrap().zeros().is_empty());
    }

    #[test]
    fn double_integrator_position_has_no_zeros() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        match invariant_zeros(&a, &b, &c).unwrap() {
            ZerosResult::Finite(z) => assert!(z.is_empty()),
            ZerosResult::Degenerate => panic!("not degenerate"),
        }
    }

    #[test]
    fn known_siso_zero() {
        // G(s) = (s + 3) / ((s + 1)(s + 2)) in controllable form
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[3.0, 1.0]);
        let z = invariant_zeros(&a, &b, &c).unwrap();
        assert_eq!(z.zeros().len(), 1);
        assert!((z.zeros()[0].z - Complex64::new(-3.0, 0.0)).norm() < 1e-10);
        assert!(z.zeros()[0].residual < 1e-12);
    }

    #[test]
    fn zero_output_is_degenerate() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::zeros(1, 2);
        assert!(matches!(invariant_zeros(&a, &b, &c).unwrap(), ZerosResult::Degenerate));
    }

    #[test]
    fn cartpole_subspace_matches_zeros() {
        let m = build_cartpole();
        let l = m.matrices(&m.nominal).unwrap();
        let zs = invariant_zeros(&l.a, &l.b, &l.c).unwrap();
        let sub = output_nulling_subspace(&l.a, &l.b, &l.c).unwrap();
        assert_eq!(sub.dim(), 2);
        let mut ev = sub.restricted_eigenvalues(&l.a, &l.b);
        ev.sort_by(|x, y| x.re.total_cmp(&y.re));
        let mut zz: Vec<Complex64> = zs.zeros().iter().map(|z| z.z).collect();
        zz.sort_by(|x, y| x.re.total_cmp(&y.re));
        assert_eq!(ev.len(), zz.len());
        for (e, z) in ev.iter().zip(&zz) {
            assert!((e - z).norm() < 1e-6);
        }
    }
}
