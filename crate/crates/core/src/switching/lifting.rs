//! Lifting maps evaluated lazily on (possibly huge) lifted matrices, and a
//! plug-in verifier comparing the lifted constraints with the original
//! nonlinear ones at a concrete design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{hstack, lambda_max, lambda_min, symmetrize};
use crate::{Error, Result};

use super::Thresholds;

/// Entry access to a square matrix that may never be materialized.
pub trait Entries: Sync {
    fn dim(&self) -> usize;
    fn at(&self, i: usize, j: usize) -> f64;

    fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.at(i, j))
    }
}

/// Entry access to a vector.
pub trait VecEntries: Sync {
    fn len(&self) -> usize;
    fn at(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Entries for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self[(i, j)]
    }
}

impl VecEntries for DVector<f64> {
    fn len(&self) -> usize {
        self.nrows()
    }
    fn at(&self, i: usize) -> f64 {
        self[i]
    }
}

/// u uᵀ.
#[derive(Clone, Debug)]
pub struct Outer<V>(pub V);

impl<V: VecEntries> Entries for Outer<V> {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.0.at(i) * self.0.at(j)
    }
}

/// Column-major vec of a square matrix.
#[derive(Clone, Debug)]
pub struct VecOf<E>(pub E);

impl<E: Entries> VecEntries for VecOf<E> {
    fn len(&self) -> usize {
        self.0.dim() * self.0.dim()
    }
    fn at(&self, i: usize) -> f64 {
        let n = self.0.dim();
        self.0.at(i % n, i / n)
    }
}

/// [u; v].
#[derive(Clone, Debug)]
pub struct Concat<A, B>(pub A, pub B);

impl<A: VecEntries, B: VecEntries> VecEntries for Concat<A, B> {
    fn len(&self) -> usize {
        self.0.len() + self.1.len()
    }
    fn at(&self, i: usize) -> f64 {
        let n = self.0.len();
        if i < n {
            self.0.at(i)
        } else {
            self.1.at(i - n)
        }
    }
}

/// Shapes of 𝓑 (bp × bq), 𝓒 (cr × bp) and 𝓚 (bq × cr), plus the per-step
/// state dimension p. Indices follow vec(𝓑) and vec(𝓒, 𝓚) = [vec 𝓒; vec 𝓚],
/// both column-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftLayout {
    pub bp: usize,
    pub bq: usize,
    pub cr: usize,
    pub p: usize,
}

impl LiftLayout {
    pub fn nb(&self) -> usize {
        self.bp * self.bq
    }

    pub fn nc(&self) -> usize {
        self.cr * self.bp + self.bq * self.cr
    }

    #[inline]
    fn b(&self, i: usize, j: usize) -> usize {
        j * self.bp + i
    }

    #[inline]
    fn c(&self, i: usize, a: usize) -> usize {
        a * self.cr + i
    }

    #[inline]
    fn k(&self, l: usize, i: usize) -> usize {
        self.cr * self.bp + i * self.bq + l
    }

    fn check(&self, x: &dyn Entries, want: usize, name: &str) {
        assert_eq!(x.dim(), want, "{name} has dimension {}, layout needs {want}", x.dim());
    }

    /// φ_b(X_b) ≡ (𝓑)_K(𝓑)_Kᵀ.
    pub fn phi_b(&self, xb: &dyn Entries) -> DMatrix<f64> {
        self.check(xb, self.nb(), "X_b");
        let off = self.bp - self.p;
        DMatrix::from_fn(self.p, self.p, |a, b| {
            (0..self.bq).map(|j| xb.at(self.b(off + a, j), self.b(off + b, j))).sum()
        })
    }

    /// Φ_b(X_b) ≡ 𝓑𝓑ᵀ.
    pub fn big_phi_b(&self, xb: &dyn Entries) -> DMatrix<f64> {
        self.check(xb, self.nb(), "X_b");
        DMatrix::from_fn(self.bp, self.bp, |a, b| {
            (0..self.bq).map(|j| xb.at(self.b(a, j), self.b(b, j))).sum()
        })
    }

    /// Φ_c(X_c) ≡ 𝓒ᵀ𝓒.
    pub fn phi_c(&self, xc: &dyn Entries) -> DMatrix<f64> {
        self.check(xc, self.nc(), "X_c");
        DMatrix::from_fn(self.bp, self.bp, |a, b| {
            (0..self.cr).map(|i| xc.at(self.c(i, a), self.c(i, b))).sum()
        })
    }

    /// Ψ_ck(X_c) ≡ 𝓒ᵀ𝓚ᵀ.
    pub fn psi_ck(&self, xc: &dyn Entries) -> DMatrix<f64> {
        self.check(xc, self.nc(), "X_c");
        DMatrix::from_fn(self.bp, self.bq, |a, l| {
            (0..self.cr).map(|i| xc.at(self.c(i, a), self.k(l, i))).sum()
        })
    }

    /// Φ_k(X_k) ≡ Q⁻¹𝓒ᵀ𝓚ᵀ𝓚𝓒Q⁻¹.
    pub fn phi_k(&self, xk: &dyn Entries, q_inv: &DMatrix<f64>) -> DMatrix<f64> {
        let nc = self.nc();
        self.check(xk, nc * nc, "X_k");
        let v = |r: usize, c: usize| c * nc + r;
        let n = DMatrix::from_fn(self.bp, self.bp, |a, b| {
            let mut s = 0.0;
            for l in 0..self.bq {
                for i in 0..self.cr {
                    let u = v(self.k(l, i), self.c(i, a));
                    for i2 in 0..self.cr {
                        s += xk.at(u, v(self.k(l, i2), self.c(i2, b)));
                    }
                }
            }
            s
        });
        q_inv * n * q_inv
    }

    /// Ψ_bc(X_bc) ≡ 𝓑ᵀΦ_c(X_c)𝓑.
    pub fn psi_bc(&self, xbc: &dyn Entries) -> DMatrix<f64> {
        let (nb, nc) = (self.nb(), self.nc());
        self.check(xbc, nb * nb + nc * nc, "X_bc");
        DMatrix::from_fn(self.bq, self.bq, |a, b| {
            let mut s = 0.0;
            for i in 0..self.bp {
                for j in 0..self.bp {
                    let ub = self.b(j, b) * nb + self.b(i, a);
                    for m in 0..self.cr {
                        let uc = self.c(m, j) * nc + self.c(m, i);
                        s += xbc.at(ub, nb * nb + uc);
                    }
                }
            }
            s
        })
    }

    /// Π_bk(X_bk) ≡ 𝓑𝓚𝓒Q⁻¹𝓒ᵀ𝓚ᵀ𝓑ᵀ.
    pub fn pi_bk(&self, xbk: &dyn Entries, q_inv: &DMatrix<f64>) -> DMatrix<f64> {
        let (nb, nc) = (self.nb(), self.nc());
        let nk = nc * nc;
        self.check(xbk, nb * nb + nk * nk, "X_bk");
        let v = |r: usize, c: usize| c * nc + r;
        DMatrix::from_fn(self.bp, self.bp, |s, t| {
            let mut acc = 0.0;
            for l in 0..self.bq {
                for l2 in 0..self.bq {
                    let ub = self.b(t, l2) * nb + self.b(s, l);
                    for a in 0..self.bp {
                        for b in 0..self.bp {
                            let w = q_inv[(a, b)];
                            if w == 0.0 {
                                continue;
                            }
                            for i in 0..self.cr {
                                let r = v(self.k(l, i), self.c(i, a));
                                for i2 in 0..self.cr {
                                    let c = v(self.k(l2, i2), self.c(i2, b));
                                    acc += w * xbk.at(ub, nb * nb + c * nk + r);
                                }
                            }
                        }
                    }
                }
            }
            acc
        })
    }
}

/// A concrete design (𝓐, 𝓑, 𝓒, 𝓚) with robustness weight Q.
#[derive(Clone, Debug)]
pub struct ConcreteDesign {
    pub a_stack: DMatrix<f64>,
    pub b_stack: DMatrix<f64>,
    pub c_stack: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub q_rob: DMatrix<f64>,
    /// State dimension of one step.
    pub p: usize,
}

impl ConcreteDesign {
    pub fn layout(&self) -> LiftLayout {
        LiftLayout {
            bp: self.b_stack.nrows(),
            bq: self.b_stack.ncols(),
            cr: self.c_stack.nrows(),
            p: self.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (bp, bq) = self.b_stack.shape();
        let cr = self.c_stack.nrows();
        if self.a_stack.shape() != (bp, self.p)
            || self.c_stack.ncols() != bp
            || self.gain.shape() != (bq, cr)
            || self.q_rob.shape() != (bp, bp)
            || bp < self.p
        {
            return Err(Error::Dimension("concrete design blocks are not conformal".into()));
        }
        Ok(())
    }

    pub fn e_stack(&self) -> DMatrix<f64> {
        hstack(&[&self.a_stack, &self.b_stack])
    }

    pub fn q_inv(&self) -> Result<DMatrix<f64>> {
        self.q_rob
            .clone()
            .try_inverse()
            .map(|m| symmetrize(&m))
            .ok_or_else(|| Error::Invalid("Q_rob is singular".into()))
    }

    /// vec(𝓑).
    pub fn vec_b(&self) -> DVector<f64> {
        DVector::from_column_slice(self.b_stack.as_slice())
    }

    /// vec(𝓒, 𝓚) = [vec 𝓒; vec 𝓚].
    pub fn vec_ck(&self) -> DVector<f64> {
        let mut v = self.c_stack.as_slice().to_vec();
        v.extend_from_slice(self.gain.as_slice());
        DVector::from_vec(v)
    }

    /// L = I − 𝓑𝓚𝓒.
    pub fn loop_map(&self) -> DMatrix<f64> {
        let n = self.b_stack.nrows();
        DMatrix::identity(n, n) - &self.b_stack * &self.gain * &self.c_stack
    }

    /// M = 𝓔ᵀL⁻ᵀQL⁻¹𝓔, or None when L is singular.
    pub fn robustness_matrix(&self) -> Option<DMatrix<f64>> {
        let li = self.loop_map().try_inverse()?;
        let m = li * self.e_stack();
        Some(symmetrize(&(m.transpose() * &self.q_rob * m)))
    }

    /// 𝓨_bk and 𝓕 of the Schur form, computed directly from the matrices.
    pub fn schur_parts(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let qi = self.q_inv()?;
        let kc = &self.gain * &self.c_stack;
        let bkc = &self.b_stack * &kc;
        let y = &qi
            + &self.b_stack * self.b_stack.transpose()
            + &qi * kc.transpose() * &kc * &qi
            + &bkc * &qi * bkc.transpose();
        let f = &self.b_stack + &qi * kc.transpose();
        Ok((symmetrize(&y), f))
    }
}

/// [[𝓨, 𝓔, 𝓕], [𝓔ᵀ, γI, 0], [𝓕ᵀ, 0, I]].
pub fn schur_embed(y: &DMatrix<f64>, e: &DMatrix<f64>, f: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n0 = y.nrows();
    let n1 = e.ncols();
    let n2 = f.ncols();
    let n = n0 + n1 + n2;
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (n0, n0)).copy_from(y);
    m.view_mut((0, n0), (n0, n1)).copy_from(e);
    m.view_mut((n0, 0), (n1, n0)).copy_from(&e.transpose());
    m.view_mut((0, n0 + n1), (n0, n2)).copy_from(f);
    m.view_mut((n0 + n1, 0), (n2, n0)).copy_from(&f.transpose());
    for i in 0..n1 {
        m[(n0 + i, n0 + i)] = gamma;
    }
    for i in 0..n2 {
        m[(n0 + n1 + i, n0 + n1 + i)] = 1.0;
    }
    m
}

/// `m ⪰ 0` up to `tol` relative to the entry scale of `m`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    m.nrows() == 0 || lambda_min(m) >= -tol * (1.0 + m.abs().max())
}

/// Outcome of each constraint group at a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub controllability: bool,
    pub observability: bool,
    pub sensitivity: bool,
    pub robustness: bool,
    pub liftings: bool,
}

impl ConstraintCheck {
    pub fn all(&self) -> bool {
        self.controllability && self.observability && self.sensitivity && self.robustness && self.liftings
    }
}

/// Exact rank-one liftings of a concrete design.
pub struct RankOneLiftings {
    pub x_b: Outer<DVector<f64>>,
    pub x_c: Outer<DVector<f64>>,
    pub x_k: Outer<VecOf<Outer<DVector<f64>>>>,
    pub x_bc: Outer<Concat<VecOf<Outer<DVector<f64>>>, VecOf<Outer<DVector<f64>>>>>,
    #[allow(clippy::type_complexity)]
    pub x_bk: Outer<Concat<VecOf<Outer<DVector<f64>>>, VecOf<Outer<VecOf<Outer<DVector<f64>>>>>>>,
}

impl RankOneLiftings {
    pub fn new(d: &ConcreteDesign) -> Self {
        let vb = d.vec_b();
        let vc = d.vec_ck();
        RankOneLiftings {
            x_b: Outer(vb.clone()),
            x_c: Outer(vc.clone()),
            x_k: Outer(VecOf(Outer(vc.clone()))),
            x_bc: Outer(Concat(VecOf(Outer(vb.clone())), VecOf(Outer(vc.clone())))),
            x_bk: Outer(Concat(VecOf(Outer(vb)), VecOf(Outer(VecOf(Outer(vc)))))),
        }
    }
}

/// max |X_ij − ξ_i ξ_j| over all entries when small, else zero iff the
/// generator of X equals ξ.
fn lifting_defect<V: VecEntries, W: VecEntries>(x: &Outer<V>, xi: &W, tol: f64) -> bool {
    let n = x.dim();
    if n != xi.len() {
        return false;
    }
    if n <= 400 {
        let mut m = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = x.at(i, j);
            }
            m[(i, n)] = xi.at(i);
            m[(n, i)] = xi.at(i);
        }
        m[(n, n)] = 1.0;
        is_psd(&m, tol)
    } else {
        // X − ξξᵀ = uuᵀ − ξξᵀ is PSD iff u = ±ξ
        let same = (0..n).all(|i| (x.0.at(i) - xi.at(i)).abs() <= tol * (1.0 + xi.at(i).abs()));
        let flip = (0..n).all(|i| (x.0.at(i) + xi.at(i)).abs() <= tol * (1.0 + xi.at(i).abs()));
        same || flip
    }
}

/// Evaluates the lifted constraint set through the lifting maps at the
/// exact rank-one liftings of `d`.
pub fn check_lifted(d: &ConcreteDesign, th: &Thresholds, gamma: f64, tol: f64) -> Result<ConstraintCheck> {
    d.validate()?;
    let lay = d.layout();
    let qi = d.q_inv()?;
    let lift = RankOneLiftings::new(d);
    let phi_c = lay.phi_c(&lift.x_c);
    let at = d.a_stack.transpose();
    let obs = symmetrize(&(&at * &phi_c * &d.a_stack));

    // X − cI ⪰ 0 ⇔ λ_min(X) ≥ c, judged with the same slack as check_nonlinear
    let at_least = |x: &DMatrix<f64>, c: f64| {
        let l = lambda_min(x);
        l - c >= -tol * (1.0 + l.abs())
    };
    let controllability = at_least(&lay.phi_b(&lift.x_b), th.c_c);
    let observability = at_least(&obs, th.c_o);

    let ab = &at * &phi_c * &d.b_stack;
    let psi = lay.psi_bc(&lift.x_bc);
    let n = lay.p + lay.bq;
    let mut sen = DMatrix::zeros(n, n);
    sen.view_mut((0, 0), (lay.p, lay.p)).copy_from(&obs);
    sen.view_mut((0, lay.p), (lay.p, lay.bq)).copy_from(&ab);
    sen.view_mut((lay.p, 0), (lay.bq, lay.p)).copy_from(&ab.transpose());
    sen.view_mut((lay.p, lay.p), (lay.bq, lay.bq)).copy_from(&psi);
    let sensitivity = at_least(&symmetrize(&sen), th.c_s);

    let y = &qi + lay.big_phi_b(&lift.x_b) + lay.phi_k(&lift.x_k, &qi) + lay.pi_bk(&lift.x_bk, &qi);
    let f = &d.b_stack + &qi * lay.psi_ck(&lift.x_c);
    let robustness = is_psd(&schur_embed(&symmetrize(&y), &d.e_stack(), &f, gamma), tol);

    let liftings = lifting_defect(&lift.x_b, &d.vec_b(), tol)
        && lifting_defect(&lift.x_c, &d.vec_ck(), tol)
        && lifting_defect(&lift.x_k, &VecOf(lift.x_c.clone()), tol)
        && lifting_defect(&lift.x_bc, &Concat(VecOf(lift.x_b.clone()), VecOf(lift.x_c.clone())), tol)
        && lifting_defect(&lift.x_bk, &Concat(VecOf(lift.x_b.clone()), VecOf(lift.x_k.clone())), tol);

    Ok(ConstraintCheck {
        controllability,
        observability,
        sensitivity,
        robustness,
        liftings,
    })
}

/// The original constraints: metric thresholds and λ_max(M) ≤ γ.
pub fn check_nonlinear(d: &ConcreteDesign, th: &Thresholds, gamma: f64, tol: f64) -> Result<ConstraintCheck> {
    d.validate()?;
    let p = d.p;
    let bk = d.b_stack.rows(d.b_stack.nrows() - p, p).into_owned();
    let j_con = lambda_min(&(&bk * bk.transpose()));
    let ca = &d.c_stack * &d.a_stack;
    let j_obs = lambda_min(&(ca.transpose() * &ca));
    let ce = &d.c_stack * d.e_stack();
    let j_sen = lambda_min(&(ce.transpose() * &ce));
    let m = d
        .robustness_matrix()
        .ok_or_else(|| Error::Numerical("I − 𝓑𝓚𝓒 is singular".into()))?;
    let j_rob = lambda_max(&m);
    let ge = |j: f64, c: f64| j - c >= -tol * (1.0 + j.abs());
    Ok(ConstraintCheck {
        controllability: ge(j_con, th.c_c),
        observability: ge(j_obs, th.c_o),
        sensitivity: ge(j_sen, th.c_s),
        robustness: gamma - j_rob >= -tol * (1.0 + j_rob.abs()),
        liftings: true,
    })
}
