//! Small dense semidefinite programs
//!
//! ```text
//! minimize    cᵀx
//! subject to  F₀⁽ʲ⁾ + Σᵢ xᵢ Fᵢ⁽ʲ⁾ ⪰ 0   for every block j
//!             A x = b
//! ```
//!
//! solved by a primal-dual interior point method on the homogeneous
//! self-dual embedding with Nesterov-Todd scaling and Mehrotra
//! predictor-corrector steps.
//!
//! Symmetric matrices are exchanged in packed lower-triangular column-major
//! order with off-diagonal entries multiplied by √2 ([`svec`]), so that
//! ⟨X, Y⟩ = tr(XY) = svec(X)·svec(Y).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::sym_eig_sorted;
use crate::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Packed lower-triangular, column-major, off-diagonals scaled by √2.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in j..n {
            if i == j {
                out.push(m[(i, j)]);
            } else {
                out.push(0.5 * (m[(i, j)] + m[(j, i)]) * SQRT2);
            }
        }
    }
    DVector::from_vec(out)
}

/// Inverse of [`svec`].
pub fn smat(v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let len = v.len();
    let n = (((8 * len + 1) as f64).sqrt() as usize - 1) / 2;
    if n * (n + 1) / 2 != len {
        return Err(Error::Dimension(format!("{len} is not a triangular number")));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                m[(i, j)] = v[k] / SQRT2;
                m[(j, i)] = v[k] / SQRT2;
            }
            k += 1;
        }
    }
    Ok(m)
}

/// Index of entry (i, j), i ≥ j, inside [`svec`] of an n×n matrix.
pub fn svec_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * n - j * (j + 1) / 2 + i
}

/// One LMI block F₀ + Σ xᵢFᵢ ⪰ 0 with sparse symmetric coefficients.
///
/// Entries are keyed by (variable, row, col) with row ≥ col; variable 0 is
/// F₀ and variable i + 1 is the coefficient of xᵢ.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LmiBlock {
    pub dim: usize,
    pub terms: BTreeMap<(usize, usize, usize), f64>,
}

impl LmiBlock {
    pub fn new(dim: usize) -> Self {
        LmiBlock {
            dim,
            terms: BTreeMap::new(),
        }
    }

    /// Adds `v` at symmetric position (i, j) of F₀ (`var = None`) or of the
    /// coefficient of x_var.
    pub fn add(&mut self, var: Option<usize>, i: usize, j: usize, v: f64) {
        assert!(i < self.dim && j < self.dim, "entry ({i},{j}) outside block of dim {}", self.dim);
        if v == 0.0 {
            return;
        }
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let key = (var.map_or(0, |x| x + 1), i, j);
        *self.terms.entry(key).or_insert(0.0) += v;
    }

    /// Adds a dense symmetric matrix at offset (r0, c0) of F₀ or F_var.
    /// Off-diagonal placements (r0 ≠ c0) also write the mirrored block.
    pub fn add_matrix(&mut self, var: Option<usize>, r0: usize, c0: usize, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let (gi, gj) = (r0 + i, c0 + j);
                if gi >= gj || r0 != c0 {
                    if r0 == c0 && gi < gj {
                        continue;
                    }
                    self.add(var, gi, gj, m[(i, j)]);
                }
            }
        }
    }

    pub fn dense(&self, var: Option<usize>) -> DMatrix<f64> {
        let key = var.map_or(0, |x| x + 1);
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (&(k, i, j), &v) in self.terms.range((key, 0, 0)..(key + 1, 0, 0)) {
            debug_assert_eq!(k, key);
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    /// F₀ + Σ xᵢFᵢ.
    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (&(k, i, j), &v) in &self.terms {
            let w = if k == 0 { v } else { v * x[k - 1] };
            m[(i, j)] += w;
            if i != j {
                m[(j, i)] += w;
            }
        }
        m
    }

    fn max_var(&self) -> usize {
        self.terms.keys().map(|&(k, _, _)| k).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpProblem {
    pub m: usize,
    pub c: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
    /// Optional equalities A x = b.
    pub eq: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl SdpProblem {
    pub fn new(m: usize) -> Self {
        SdpProblem {
            m,
            c: DVector::zeros(m),
            blocks: vec![],
            eq: None,
        }
    }

    pub fn add_block(&mut self, b: LmiBlock) -> usize {
        self.blocks.push(b);
        self.blocks.len() - 1
    }

    /// Appends equality rows.
    pub fn add_equalities(&mut self, a: DMatrix<f64>, b: DVector<f64>) {
        self.eq = Some(match self.eq.take() {
            None => (a, b),
            Some((a0, b0)) => (
                crate::linalg::vstack(&[&a0, &a]),
                DVector::from_iterator(b0.len() + b.len(), b0.iter().chain(b.iter()).cloned()),
            ),
        });
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.len() != self.m {
            return Err(Error::Dimension(format!("c has {} entries, m = {}", self.c.len(), self.m)));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            if b.max_var() > self.m {
                return Err(Error::Dimension(format!("block {j} references variable beyond m")));
            }
            for (&(_, i, jj), v) in &b.terms {
                if i >= b.dim || jj >= b.dim || !v.is_finite() {
                    return Err(Error::Invalid(format!("block {j}: bad entry ({i},{jj})")));
                }
            }
        }
        if let Some((a, b)) = &self.eq {
            if a.ncols() != self.m || a.nrows() != b.len() {
                return Err(Error::Dimension("equality system shape".into()));
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of each block at x.
    pub fn block_min_eigs(&self, x: &DVector<f64>) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                if b.dim == 0 {
                    0.0
                } else {
                    sym_eig_sorted(&b.eval(x)).0[0]
                }
            })
            .collect()
    }

    /// max(−λ_min over blocks, ‖Ax − b‖∞, 0).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut v = self
            .block_min_eigs(x)
            .into_iter()
            .map(|l| -l)
            .fold(0.0, f64::max);
        if let Some((a, b)) = &self.eq {
            v = v.max((a * x - b).amax());
        }
        v
    }

    /// Sparse text export. Lines:
    /// `m <m>`, `blocks <d1> <d2> …`, `c <c1> … <cm>`,
    /// `eq <row> <var> <value>` / `eqrhs <row> <value>` (1-based rows and
    /// variables), and one line per nonzero coefficient
    /// `<block> <row> <col> <var> <value>` with 1-based block/row/col,
    /// row ≥ col, var 0 meaning F₀. The constraint is F₀ + Σ xᵢFᵢ ⪰ 0.
    pub fn to_sparse_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# zdaguard sdp v1").ok();
        writeln!(s, "m {}", self.m).ok();
        let dims: Vec<String> = self.blocks.iter().map(|b| b.dim.to_string()).collect();
        writeln!(s, "blocks {}", dims.join(" ")).ok();
        let cs: Vec<String> = self.c.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "c {}", cs.join(" ")).ok();
        if let Some((a, b)) = &self.eq {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    if a[(i, j)] != 0.0 {
                        writeln!(s, "eq {} {} {:e}", i + 1, j + 1, a[(i, j)]).ok();
                    }
                }
                writeln!(s, "eqrhs {} {:e}", i + 1, b[i]).ok();
            }
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            for (&(k, i, j), &v) in &b.terms {
                writeln!(s, "{} {} {} {} {:e}", bi + 1, i + 1, j + 1, k, v).ok();
            }
        }
        s
    }

    pub fn from_sparse_text(text: &str) -> Result<Self> {
        let bad = |ln: usize, msg: &str| Error::config(format!("line {}", ln + 1), msg.to_string());
        let mut m = None;
        let mut dims: Vec<usize> = vec![];
        let mut c: Option<Vec<f64>> = None;
        let mut eq_entries: Vec<(usize, usize, f64)> = vec![];
        let mut eq_rhs: BTreeMap<usize, f64> = BTreeMap::new();
        let mut entries: Vec<(usize, usize, usize, usize, f64)> = vec![];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |t: &str| t.parse::<f64>().map_err(|_| bad(ln, "expected a number"));
            let int = |t: &str| t.parse::<usize>().map_err(|_| bad(ln, "expected an index"));
            match tok[0] {
                "m" => m = Some(int(tok.get(1).ok_or_else(|| bad(ln, "missing m"))?)?),
                "blocks" => dims = tok[1..].iter().map(|t| int(t)).collect::<Result<_>>()?,
                "c" => c = Some(tok[1..].iter().map(|t| num(t)).collect::<Result<_>>()?),
                "eq" if tok.len() == 4 => eq_entries.push((int(tok[1])?, int(tok[2])?, num(tok[3])?)),
                "eqrhs" if tok.len() == 3 => {
                    eq_rhs.insert(int(tok[1])?, num(tok[2])?);
                }
                _ if tok.len() == 5 => entries.push((
                    int(tok[0])?,
                    int(tok[1])?,
                    int(tok[2])?,
                    int(tok[3])?,
                    num(tok[4])?,
                )),
                _ => return Err(bad(ln, "unrecognized line")),
            }
        }
        let m = m.ok_or_else(|| Error::config("m", "missing"))?;
        let c = c.ok_or_else(|| Error::config("c", "missing"))?;
        if c.len() != m {
            return Err(Error::config("c", format!("expected {m} entries")));
        }
        let mut p = SdpProblem::new(m);
        p.c = DVector::from_vec(c);
        p.blocks = dims.iter().map(|&d| LmiBlock::new(d)).collect();
        for (b, i, j, k, v) in entries {
            if b == 0 || b > p.blocks.len() || i == 0 || j == 0 || k > m {
                return Err(Error::config("entries", format!("bad index ({b},{i},{j},{k})")));
            }
            let blk = &mut p.blocks[b - 1];
            if i > blk.dim || j > blk.dim {
                return Err(Error::config("entries", format!("({i},{j}) outside block {b}")));
            }
            blk.add(if k == 0 { None } else { Some(k - 1) }, i - 1, j - 1, v);
        }
        if !eq_rhs.is_empty() || !eq_entries.is_empty() {
            let rows = eq_rhs.keys().cloned().chain(eq_entries.iter().map(|e| e.0)).max().unwrap_or(0);
            let mut a = DMatrix::zeros(rows, m);
            let mut b = DVector::zeros(rows);
            for (i, j, v) in eq_entries {
                if i == 0 || j == 0 || j > m {
                    return Err(Error::config("eq", format!("bad index ({i},{j})")));
                }
                a[(i - 1, j - 1)] = v;
            }
            for (i, v) in eq_rhs {
                b[i - 1] = v;
            }
            p.eq = Some((a, b));
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    /// The LMIs and equalities admit no point.
    Infeasible,
    /// The objective is unbounded below on the feasible set.
    Unbounded,
    MaxIter,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub pcost: f64,
    pub dcost: f64,
    pub gap: f64,
    pub pres: f64,
    pub dres: f64,
    pub tau: f64,
    pub kappa: f64,
    pub step: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpSolution {
    pub x: DVector<f64>,
    /// Dual matrices Z_j ⪰ 0 paired with each block.
    pub z: Vec<DMatrix<f64>>,
    /// Multipliers of A x = b.
    pub y: DVector<f64>,
    pub status: SdpStatus,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub duality_gap: f64,
    pub violation: f64,
    pub iterations: usize,
    pub trace: Vec<IterationLog>,
}

/// KKT residuals at a returned point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KktResiduals {
    /// max(−λ_min(F(x)), ‖Ax − b‖∞).
    pub primal: f64,
    /// ‖c − Σ_j F_i(Z_j) − Aᵀy‖∞ together with −λ_min(Z).
    pub dual: f64,
    /// Σ_j ⟨F(x)_j, Z_j⟩.
    pub complementarity: f64,
}

impl SdpSolution {
    pub fn kkt(&self, p: &SdpProblem) -> KktResiduals {
        let primal = p.violation(&self.x);
        let mut grad = p.c.clone();
        let mut zmin: f64 = 0.0;
        let mut comp = 0.0;
        for (b, z) in p.blocks.iter().zip(&self.z) {
            for (&(k, i, j), &v) in &b.terms {
                if k > 0 {
                    let w = if i == j { z[(i, j)] } else { 2.0 * z[(i, j)] };
                    grad[k - 1] -= v * w;
                }
            }
            if b.dim > 0 {
                zmin = zmin.min(sym_eig_sorted(z).0[0]);
            }
            comp += (b.eval(&self.x).component_mul(z)).sum();
        }
        if let Some((a, _)) = &p.eq {
            grad -= a.transpose() * &self.y;
        }
        KktResiduals {
            primal,
            dual: grad.amax().max(-zmin),
            complementarity: comp.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SdpOptions {
    pub max_iter: usize,
    pub feas_tol: f64,
    pub gap_tol: f64,
    /// Looser tolerance accepted when progress stalls.
    pub fallback_tol: f64,
    pub step_fraction: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_iter: 100,
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            fallback_tol: 1e-7,
            step_fraction: 0.99,
        }
    }
}

/// Cone-side vector: one symmetric matrix per block.
type Mats = Vec<DMatrix<f64>>;

fn mats_dot(a: &Mats, b: &Mats) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.component_mul(y).sum()).sum()
}

fn mats_norm(a: &Mats) -> f64 {
    mats_dot(a, a).sqrt()
}

fn mats_axpy(alpha: f64, x: &Mats, y: &mut Mats) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi * alpha;
    }
}

struct Op<'a> {
    p: &'a SdpProblem,
    /// Per block, per variable: sparse entries (row, col, value), row ≥ col.
    coef: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>>,
    h: Mats,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl<'a> Op<'a> {
    fn new(p: &'a SdpProblem) -> Self {
        let mut coef = Vec::with_capacity(p.blocks.len());
        let mut h = Vec::with_capacity(p.blocks.len());
        for blk in &p.blocks {
            let mut per: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
            for (&(k, i, j), &v) in &blk.terms {
                if k > 0 {
                    per.entry(k - 1).or_default().push((i, j, v));
                }
            }
            coef.push(per.into_iter().collect());
            h.push(blk.dense(None));
        }
        let (a, b) = match &p.eq {
            Some((a, b)) => (a.clone(), b.clone()),
            None => (DMatrix::zeros(0, p.m), DVector::zeros(0)),
        };
        Op { p, coef, h, a, b }
    }

    /// G x = −Σ xᵢ Fᵢ.
    fn g(&self, x: &DVector<f64>) -> Mats {
        self.coef
            .iter()
            .zip(&self.p.blocks)
            .map(|(per, blk)| {
                let mut m = DMatrix::zeros(blk.dim, blk.dim);
                for (var, ents) in per {
                    let xv = x[*var];
                    if xv == 0.0 {
                        continue;
                    }
                    for &(i, j, v) in ents {
                        m[(i, j)] -= v * xv;
                        if i != j {
                            m[(j, i)] -= v * xv;
                        }
                    }
                }
                m
            })
            .collect()
    }

    /// Gᵀ Z = −(⟨Fᵢ, Z⟩)ᵢ.
    fn gt(&self, z: &Mats) -> DVector<f64> {
        let mut out = DVector::zeros(self.p.m);
        for (per, zj) in self.coef.iter().zip(z) {
            for (var, ents) in per {
                let mut s = 0.0;
                for &(i, j, v) in ents {
                    s += if i == j { v * zj[(i, j)] } else { 2.0 * v * zj[(i, j)] };
                }
                out[*var] -= s;
            }
        }
        out
    }
}

/// Nesterov-Todd scaling of one block: R with R⁻¹SR⁻ᵀ = RᵀZR = Λ.
struct Nt {
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn nt_scaling(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<Nt> {
    let ls = s.clone().cholesky()?.l();
    let lz = z.clone().cholesky()?.l();
    let m = lz.transpose() * &ls;
    let svd = m.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let lam = svd.singular_values;
    if lam.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return None;
    }
    let isq = lam.map(|l| 1.0 / l.sqrt());
    let r = &ls * vt.transpose() * DMatrix::from_diagonal(&isq);
    let rinv = DMatrix::from_diagonal(&isq) * u.transpose() * lz.transpose();
    Some(Nt {
        r,
        rinv,
        lambda: lam,
    })
}

/// Largest α ≤ cap with X + αΔX ⪰ 0 (X ≻ 0).
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    if x.nrows() == 0 {
        return f64::INFINITY;
    }
    let l = match x.clone().cholesky() {
        Some(c) => c.l(),
        None => return 0.0,
    };
    let li = match l.clone().try_inverse() {
        Some(v) => v,
        None => return 0.0,
    };
    let m = &li * dx * li.transpose();
    let lmin = sym_eig_sorted(&m).0[0];
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn shift_into_cone(m: &mut DMatrix<f64>) {
    if m.nrows() == 0 {
        return;
    }
    let lmin = sym_eig_sorted(m).0[0];
    // Eigenvalues at rounding level count as zero: Cholesky would fail on them.
    if lmin <= 1e-10 * (1.0 + m.abs().max()) {
        let shift = 1.0 - lmin;
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
    }
}

/// Factorized KKT system for the current scaling, held in scaled
/// coordinates z̃ = Rᵀ z R where the system reads G̃x − z̃ = R⁻¹ b_z R⁻ᵀ.
struct Kkt {
    /// Upper-triangular factor of [Ã; A] with Ã_i = svec(R⁻¹FᵢR⁻ᵀ).
    rq: DMatrix<f64>,
    /// Cholesky of A M⁻¹ Aᵀ, M = rqᵀrq (absent without equalities).
    chol_s: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// Ã, stacked over blocks.
    at: DMatrix<f64>,
    r: Vec<DMatrix<f64>>,
    rinv: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
}

fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            out[k] = if i == j { m[(i, j)] } else { 0.5 * (m[(i, j)] + m[(j, i)]) * SQRT2 };
            k += 1;
        }
    }
}

impl Kkt {
    fn factor(op: &Op, scal: Option<&[Nt]>) -> Option<Kkt> {
        let m = op.p.m;
        let (r, rinv): (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) = match scal {
            Some(s) => s.iter().map(|w| (w.r.clone(), w.rinv.clone())).unzip(),
            None => op
                .p
                .blocks
                .iter()
                .map(|b| (DMatrix::identity(b.dim, b.dim), DMatrix::identity(b.dim, b.dim)))
                .unzip(),
        };
        let mut offsets = Vec::with_capacity(r.len() + 1);
        let mut tot = 0;
        for b in &op.p.blocks {
            offsets.push(tot);
            tot += b.dim * (b.dim + 1) / 2;
        }
        offsets.push(tot);
        let neq = op.a.nrows();
        let mut at = DMatrix::<f64>::zeros(tot, m);
        for (j, per) in op.coef.iter().enumerate() {
            let n = op.p.blocks[j].dim;
            let ri = &rinv[j];
            let mut buf = vec![0.0; n * (n + 1) / 2];
            for (var, ents) in per {
                let scaled = if ents.len() > 2 * n {
                    let mut f = DMatrix::zeros(n, n);
                    for &(a, b, v) in ents {
                        f[(a, b)] += v;
                        if a != b {
                            f[(b, a)] += v;
                        }
                    }
                    ri * f * ri.transpose()
                } else {
                    let mut out = DMatrix::zeros(n, n);
                    for &(a, b, v) in ents {
                        let ca = ri.column(a);
                        let cb = ri.column(b);
                        out.ger(v, &ca, &cb, 1.0);
                        if a != b {
                            out.ger(v, &cb, &ca, 1.0);
                        }
                    }
                    out
                };
                svec_into(&scaled, &mut buf);
                for (k, v) in buf.iter().enumerate() {
                    at[(offsets[j] + k, *var)] = *v;
                }
            }
        }
        let stacked = if neq > 0 { crate::linalg::vstack(&[&at, &op.a]) } else { at.clone() };
        let mut rq = if stacked.nrows() >= m {
            stacked.qr().r()
        } else {
            // Fewer rows than variables: pad so the factor is square.
            let pad = DMatrix::zeros(m - stacked.nrows(), m);
            crate::linalg::vstack(&[&stacked, &pad]).qr().r()
        };
        let dmax = rq.diagonal().amax();
        if !(dmax > 0.0) || !dmax.is_finite() {
            return None;
        }
        for i in 0..m {
            if rq[(i, i)].abs() < 1e-14 * dmax {
                // rank deficient: regularize the factor
                rq[(i, i)] = if rq[(i, i)] < 0.0 { -1e-14 * dmax } else { 1e-14 * dmax };
            }
        }
        let mut kkt = Kkt {
            rq,
            chol_s: None,
            at,
            r,
            rinv,
            offsets,
        };
        if neq > 0 {
            let mia = kkt.msolve_mat(&op.a.transpose());
            let s = &op.a * mia;
            kkt.chol_s = Some(s.cholesky()?);
        }
        Some(kkt)
    }

    fn msolve(&self, v: &DVector<f64>) -> DVector<f64> {
        let t = self
            .rq
            .transpose()
            .solve_lower_triangular(v)
            .expect("nonzero diagonal");
        self.rq.solve_upper_triangular(&t).expect("nonzero diagonal")
    }

    fn msolve_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let t = self
            .rq
            .transpose()
            .solve_lower_triangular(v)
            .expect("nonzero diagonal");
        self.rq.solve_upper_triangular(&t).expect("nonzero diagonal")
    }

    fn svec_blocks(&self, ms: &Mats) -> DVector<f64> {
        let mut out = DVector::zeros(*self.offsets.last().unwrap());
        for (j, m) in ms.iter().enumerate() {
            svec_into(m, &mut out.as_mut_slice()[self.offsets[j]..self.offsets[j + 1]]);
        }
        out
    }

    fn smat_blocks(&self, v: &DVector<f64>) -> Mats {
        (0..self.r.len())
            .map(|j| smat(&v.rows(self.offsets[j], self.offsets[j + 1] - self.offsets[j]).into_owned()).expect("triangular"))
            .collect()
    }

    /// Solves [0 Aᵀ Gᵀ; A 0 0; G 0 −𝒲][x; y; z] = [bx; by; bz] with
    /// 𝒲(M) = R Rᵀ M R Rᵀ, followed by iterative refinement.
    fn solve(&self, op: &Op, bx: &DVector<f64>, by: &DVector<f64>, bz: &Mats) -> (DVector<f64>, DVector<f64>, Mats) {
        let (mut x, mut y, mut zt) = self.solve_scaled(op, bx, by, bz);
        for _ in 0..2 {
            let z = self.unscale(&zt);
            let mut ex = bx - op.gt(&z);
            if op.a.nrows() > 0 {
                ex -= op.a.transpose() * &y;
            }
            let ey = by - &op.a * &x;
            let gx = op.g(&x);
            let ez: Mats = (0..bz.len())
                .map(|j| {
                    let wz = &self.r[j] * &zt[j] * self.r[j].transpose();
                    &bz[j] - (&gx[j] - wz)
                })
                .collect();
            let (cx, cy, czt) = self.solve_scaled(op, &ex, &ey, &ez);
            x += cx;
            y += cy;
            for (a, b) in zt.iter_mut().zip(&czt) {
                *a += b;
            }
        }
        let z = self.unscale(&zt);
        (x, y, z)
    }

    fn unscale(&self, zt: &Mats) -> Mats {
        zt.iter()
            .zip(&self.rinv)
            .map(|(m, ri)| crate::linalg::symmetrize(&(ri.transpose() * m * ri)))
            .collect()
    }

    /// Returns x, y and the scaled z̃.
    fn solve_scaled(&self, op: &Op, bx: &DVector<f64>, by: &DVector<f64>, bz: &Mats) -> (DVector<f64>, DVector<f64>, Mats) {
        let bzt: Mats = bz
            .iter()
            .zip(&self.rinv)
            .map(|(b, ri)| crate::linalg::symmetrize(&(ri * b * ri.transpose())))
            .collect();
        let bzv = self.svec_blocks(&bzt);
        // G̃ = −Ã, so G̃ᵀb̃ = −Ãᵀb̃.
        let mut r1 = bx - self.at.transpose() * &bzv;
        if op.a.nrows() > 0 {
            r1 += op.a.transpose() * by;
        }
        let (x, y) = match &self.chol_s {
            Some(cs) => {
                let mr1 = self.msolve(&r1);
                let y = cs.solve(&(&op.a * &mr1 - by));
                let x = self.msolve(&(r1 - op.a.transpose() * &y));
                (x, y)
            }
            None => (self.msolve(&r1), DVector::zeros(0)),
        };
        let ztv = -(&self.at * &x) - bzv;
        (x, y, self.smat_blocks(&ztv))
    }
}

/// Solves the SDP. Returns an error only on numerical breakdown; infeasible
/// and unbounded problems are reported through the status.
pub fn solve(problem: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    problem.validate()?;
    let op = Op::new(problem);
    let c = &problem.c;
    let nb = problem.blocks.len();
    let deg: usize = problem.blocks.iter().map(|b| b.dim).sum();
    let nu = deg as f64 + 1.0;
    let neq = op.a.nrows();

    let resx0 = c.norm().max(1.0);
    let resy0 = op.b.norm().max(1.0);
    let resz0 = mats_norm(&op.h).max(1.0);

    let k0 = Kkt::factor(&op, None).ok_or_else(|| {
        Error::Numerical("initial KKT system singular: constraint map lacks full column rank".into())
    })?;
    let zero_m: Mats = problem.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect();
    let (mut x, _, zp) = k0.solve(&op, &DVector::zeros(problem.m), &op.b, &op.h);
    let mut s: Mats = zp.iter().map(|z| -z).collect();
    let (_, mut y, mut z) = k0.solve(&op, &(-c), &DVector::zeros(neq), &zero_m);
    for m in s.iter_mut().chain(z.iter_mut()) {
        shift_into_cone(m);
    }
    let mut tau = 1.0;
    let mut kappa = 1.0;
    let mut trace = Vec::new();
    let mut last_step = 1.0;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, Mats, f64, usize)> = None;

    let finish = |x: &DVector<f64>, y: &DVector<f64>, z: &Mats, tau: f64, status: SdpStatus, iters: usize, trace: Vec<IterationLog>| {
        let (xs, ys, zs): (DVector<f64>, DVector<f64>, Mats) = match status {
            SdpStatus::Infeasible | SdpStatus::Unbounded => (x.clone(), y.clone(), z.clone()),
            _ => (x / tau, y / tau, z.iter().map(|m| m / tau).collect()),
        };
        let pobj = c.dot(&xs);
        let dobj = -(op.b.dot(&ys) + mats_dot(&op.h, &zs));
        let viol = problem.violation(&xs);
        let gap = {
            let fx: Mats = problem.blocks.iter().map(|b| b.eval(&xs)).collect();
            mats_dot(&fx, &zs)
        };
        SdpSolution {
            x: xs,
            z: zs,
            y: ys,
            status,
            primal_objective: pobj,
            dual_objective: dobj,
            duality_gap: gap,
            violation: viol,
            iterations: iters,
            trace,
        }
    };

    for iter in 0..=opts.max_iter {
        let gx = op.g(&x);
        let gtz = op.gt(&z);
        let mut rx = &gtz + c * tau;
        if neq > 0 {
            rx += op.a.transpose() * &y;
        }
        let ry = &op.a * &x - &op.b * tau;
        let rz: Mats = (0..nb).map(|j| &gx[j] + &s[j] - &op.h[j] * tau).collect();
        let hz = mats_dot(&op.h, &z);
        let by = op.b.dot(&y);
        let cx = c.dot(&x);
        let rt = kappa + cx + by + hz;
        let sz = mats_dot(&s, &z);
        let mu = (sz + tau * kappa) / nu;

        let pcost = cx / tau;
        let dcost = -(by + hz) / tau;
        let gap = sz / (tau * tau);
        let pres = (ry.norm() / resy0).max(mats_norm(&rz) / resz0) / tau;
        let dres = rx.norm() / resx0 / tau;
        trace.push(IterationLog {
            iter,
            pcost,
            dcost,
            gap,
            pres,
            dres,
            tau,
            kappa,
            step: last_step,
        });
        log::trace!("sdp it {iter}: p {pcost:.6e} d {dcost:.6e} gap {gap:.2e} pres {pres:.2e} dres {dres:.2e} tau {tau:.2e} kappa {kappa:.2e}");

        if pres <= opts.feas_tol && dres <= opts.feas_tol && gap <= opts.gap_tol * (1.0 + pcost.abs()) {
            return Ok(finish(&x, &y, &z, tau, SdpStatus::Optimal, iter, trace));
        }
        let merit = pres.max(dres).max(gap / (1.0 + pcost.abs()));
        if merit.is_finite() && best.as_ref().is_none_or(|b: &(f64, _, _, _, _, _)| merit < b.0) {
            best = Some((merit, x.clone(), y.clone(), z.clone(), tau, iter));
        }
        // Infeasibility certificates.
        let pinf_den = -(hz + by);
        if pinf_den > 0.0 {
            let mut aty_gtz = gtz.clone();
            if neq > 0 {
                aty_gtz += op.a.transpose() * &y;
            }
            let pinfres = aty_gtz.norm() / resx0 / pinf_den;
            if pinfres <= opts.fallback_tol && tau < 1e-7 * kappa.max(1.0) {
                let scale = 1.0 / pinf_den;
                let zs: Mats = z.iter().map(|m| m * scale).collect();
                return Ok(finish(&x, &(&y * scale), &zs, 1.0, SdpStatus::Infeasible, iter, trace));
            }
        }
        if cx < 0.0 {
            let mut gxs = gx.clone();
            mats_axpy(1.0, &s, &mut gxs);
            let dinfres = ((&op.a * &x).norm() / resy0).max(mats_norm(&gxs) / resz0) / (-cx);
            if dinfres <= opts.fallback_tol && tau < 1e-7 * kappa.max(1.0) {
                let xs = &x / (-cx);
                return Ok(finish(&xs, &y, &z, 1.0, SdpStatus::Unbounded, iter, trace));
            }
        }
        if iter == opts.max_iter {
            break;
        }

        let scal: Vec<Nt> = match (0..nb).map(|j| nt_scaling(&s[j], &z[j])).collect::<Option<Vec<_>>>() {
            Some(v) => v,
            None => break,
        };
        let kkt = match Kkt::factor(&op, Some(&scal)) {
            Some(k) => k,
            None => break,
        };
        // Direction for the τ column: K v2 = [−c; b; h].
        let (x2, y2, z2) = kkt.solve(&op, &(-c), &op.b, &op.h);
        let t2 = c.dot(&x2) + op.b.dot(&y2) + mats_dot(&op.h, &z2);

        let mut dirs: Option<(DVector<f64>, DVector<f64>, Mats, Mats, f64, f64)> = None;
        let mut sigma = 0.0;
        let mut corr: Option<(Mats, f64)> = None;
        for phase in 0..2 {
            // Complementarity right-hand side in scaled space.
            let ds: Mats = (0..nb)
                .map(|j| {
                    let l = &scal[j].lambda;
                    let n = l.len();
                    let mut d = DMatrix::zeros(n, n);
                    for i in 0..n {
                        d[(i, i)] = -l[i] * l[i] + sigma * mu;
                    }
                    if let Some((cm, _)) = &corr {
                        d -= &cm[j];
                    }
                    d
                })
                .collect();
            let dk = -tau * kappa + sigma * mu - corr.as_ref().map_or(0.0, |c| c.1);
            let eta = 1.0 - sigma;
            // T = Λ ⊘ ds; unscaled R T Rᵀ.
            let rtr: Mats = (0..nb)
                .map(|j| {
                    let l = &scal[j].lambda;
                    let n = l.len();
                    let t = DMatrix::from_fn(n, n, |a, b| 2.0 * ds[j][(a, b)] / (l[a] + l[b]));
                    &scal[j].r * t * scal[j].r.transpose()
                })
                .collect();
            let bx = -&rx * eta;
            let by_ = -&ry * eta;
            let bz: Mats = (0..nb).map(|j| -&rz[j] * eta - &rtr[j]).collect();
            let (x1, y1, z1) = kkt.solve(&op, &bx, &by_, &bz);
            let num = -eta * rt - dk / tau - c.dot(&x1) - op.b.dot(&y1) - mats_dot(&op.h, &z1);
            let den = -kappa / tau + t2;
            let dtau = num / den;
            let dx = &x1 + &x2 * dtau;
            let dy = &y1 + &y2 * dtau;
            let mut dz = z1.clone();
            mats_axpy(dtau, &z2, &mut dz);
            // ΔS from the primal equation; equal to R T Rᵀ − 𝒲(ΔZ) in exact
            // arithmetic without the cancellation.
            let gdx = op.g(&dx);
            let dsm: Mats = (0..nb)
                .map(|j| crate::linalg::symmetrize(&(&op.h[j] * dtau - &rz[j] * eta - &gdx[j])))
                .collect();
            let dkappa = (dk - kappa * dtau) / tau;
            let mut alpha = f64::INFINITY;
            for j in 0..nb {
                alpha = alpha.min(max_step(&s[j], &dsm[j])).min(max_step(&z[j], &dz[j]));
            }
            if dtau < 0.0 {
                alpha = alpha.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                alpha = alpha.min(-kappa / dkappa);
            }
            if phase == 0 {
                let a_aff = alpha.min(1.0);
                sigma = (1.0 - a_aff).powi(3);
                // Mehrotra corrector: scaled ΔS̃ ∘ ΔZ̃.
                let cm: Mats = (0..nb)
                    .map(|j| {
                        let dst = &scal[j].rinv * &dsm[j] * scal[j].rinv.transpose();
                        let dzt = scal[j].r.transpose() * &dz[j] * &scal[j].r;
                        (&dst * &dzt + &dzt * &dst) * 0.5
                    })
                    .collect();
                corr = Some((cm, dtau * dkappa));
            } else {
                let step = (opts.step_fraction * alpha).min(1.0);
                dirs = Some((dx, dy, dz, dsm, dtau, dkappa));
                last_step = step;
            }
        }
        let (dx, dy, dz, dsm, dtau, dkappa) = dirs.expect("combined step computed");
        let step = last_step;
        x += &dx * step;
        y += &dy * step;
        mats_axpy(step, &dz, &mut z);
        mats_axpy(step, &dsm, &mut s);
        tau += step * dtau;
        kappa += step * dkappa;
        for m in s.iter_mut().chain(z.iter_mut()) {
            *m = crate::linalg::symmetrize(m);
        }
        if !(tau > 0.0) || !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }

    // Stalled or out of iterations: fall back to the best iterate if it
    // meets the looser tolerance.
    if let Some((merit, bx, by, bz, btau, biter)) = best {
        if merit <= opts.fallback_tol && btau > 1e-8 {
            return Ok(finish(&bx, &by, &bz, btau, SdpStatus::Optimal, biter, trace));
        }
    }
    let iters = trace.len();
    Ok(finish(&x, &y, &z, tau, SdpStatus::MaxIter, iters, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svec_roundtrip_and_inner_product() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 3, &[0.5, -1.0, 0.0, -1.0, 2.0, 1.0, 0.0, 1.0, -3.0]);
        assert_eq!(smat(&svec(&a)).unwrap(), a);
        let tr = (&a * &b).trace();
        assert!((svec(&a).dot(&svec(&b)) - tr).abs() < 1e-12);
        assert_eq!(svec_index(3, 2, 1), 4);
        assert_eq!(svec(&a)[svec_index(3, 2, 1)], 5.0 * SQRT2);
    }

    #[test]
    fn two_by_two_epigraph() {
        // minimize t s.t. [[t, 1], [1, t]] ⪰ 0
        let mut p = SdpProblem::new(1);
        p.c[0] = 1.0;
        let mut b = LmiBlock::new(2);
        b.add(Some(0), 0, 0, 1.0);
        b.add(Some(0), 1, 1, 1.0);
        b.add(None, 1, 0, 1.0);
        p.add_block(b);
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-7, "{}", sol.x[0]);
    }

    #[test]
    fn diagonal_lp() {
        let mut p = SdpProblem::new(2);
        p.c = DVector::from_vec(vec![1.0, 1.0]);
        for (v, lb) in [(0usize, 1.0), (1, 2.0)] {
            let mut b = LmiBlock::new(1);
            b.add(Some(v), 0, 0, 1.0);
            b.add(None, 0, 0, -lb);
            p.add_block(b);
        }
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-7 && (sol.x[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn infeasible_detected() {
        // x ≥ 1 and x ≤ 0
        let mut p = SdpProblem::new(1);
        p.c[0] = 1.0;
        let mut b1 = LmiBlock::new(1);
        b1.add(Some(0), 0, 0, 1.0);
        b1.add(None, 0, 0, -1.0);
        let mut b2 = LmiBlock::new(1);
        b2.add(Some(0), 0, 0, -1.0);
        p.add_block(b1);
        p.add_block(b2);
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn equality_constrained() {
        // minimize x0 + 2 x1 s.t. x0 + x1 = 1, x ≥ 0
        let mut p = SdpProblem::new(2);
        p.c = DVector::from_vec(vec![1.0, 2.0]);
        for v in 0..2 {
            let mut b = LmiBlock::new(1);
            b.add(Some(v), 0, 0, 1.0);
            p.add_block(b);
        }
        p.add_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![1.0]));
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!(sol.x[1].abs() < 1e-7);
    }

    #[test]
    fn text_roundtrip() {
        let mut p = SdpProblem::new(1);
        p.c[0] = 1.0;
        let mut b = LmiBlock::new(2);
        b.add(Some(0), 0, 0, 1.0);
        b.add(Some(0), 1, 1, 1.0);
        b.add(None, 1, 0, 1.0);
        p.add_block(b);
        p.add_equalities(DMatrix::from_row_slice(1, 1, &[2.0]), DVector::from_vec(vec![3.0]));
        let q = SdpProblem::from_sparse_text(&p.to_sparse_text()).unwrap();
        assert_eq!(q.blocks[0].terms, p.blocks[0].terms);
        assert_eq!(q.eq.as_ref().unwrap().0, p.eq.as_ref().unwrap().0);
    }
}
