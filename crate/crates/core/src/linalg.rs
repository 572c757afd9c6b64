//! Dense linear algebra helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

pub fn norm1(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn check_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut pow = id.clone();
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    let m = b.len() - 1;
    for k in (0..=m).step_by(2) {
        if k > 0 {
            pow = &pow * &a2;
        }
        v += &pow * b[k];
        if k + 1 <= m {
            u += &pow * b[k + 1];
        }
    }
    (a * u, v)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// exp(A) by scaling and squaring with a diagonal Padé approximant.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "expm needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a, "matrix exponential argument")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let nrm = norm1(a);
    let mut s = 0i32;
    let (u, v) = match THETA.iter().find(|(_, th)| nrm <= *th) {
        Some((3, _)) => pade_low(a, &PADE3),
        Some((5, _)) => pade_low(a, &PADE5),
        Some((7, _)) => pade_low(a, &PADE7),
        Some(_) => pade_low(a, &PADE9),
        None => {
            if nrm > THETA13 {
                s = (nrm / THETA13).log2().ceil() as i32;
            }
            let scaled = a * 2f64.powi(-s);
            pade13(&scaled)
        }
    };
    let p = &v + &u;
    let q = &v - &u;
    let lu = q.lu();
    let mut r = lu
        .solve(&p)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// exp(A t).
pub fn expm_t(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !t.is_finite() {
        return Err(Error::NonFinite("time argument".into()));
    }
    expm(&(a * t))
}

/// Returns (exp(A t), ∫_0^t exp(A s) ds) from one augmented exponential.
pub fn expm_and_integral(a: &DMatrix<f64>, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut aug = DMatrix::<f64>::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, n)).fill_with_identity();
    let e = expm_t(&aug, t)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, n)).into_owned(),
    ))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn sym_defect(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eig_sorted(m).0[0]
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (v, _) = sym_eig_sorted(m);
    v[v.len() - 1]
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Singular values (descending) and a full right-singular basis.
///
/// Wide inputs are padded with zero rows so that the returned `V` is square
/// and its trailing columns span the null space.
pub fn svd_full_v(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    if c == 0 {
        return (vec![], DMatrix::zeros(0, 0));
    }
    let padded = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::zeros(c, c);
    for (k, &i) in idx.iter().enumerate() {
        v.set_column(k, &vt.row(i).transpose());
    }
    (sv, v)
}

/// Numerical rank with threshold `rel_tol * σ_max` (absolute floor `abs_tol`).
pub fn rank(m: &DMatrix<f64>, rel_tol: f64, abs_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    let thr = (rel_tol * smax).max(abs_tol);
    sv.iter().filter(|&&s| s > thr).count()
}

/// Orthonormal basis of ker(M) as columns.
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64, abs_tol: f64) -> DMatrix<f64> {
    let c = m.ncols();
    if c == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m.nrows() == 0 {
        return DMatrix::identity(c, c);
    }
    let (sv, v) = svd_full_v(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    let thr = (rel_tol * smax).max(abs_tol);
    let r = sv.iter().filter(|&&s| s > thr).count();
    v.columns(r, c - r).into_owned()
}

/// Orthonormal basis of the column space of M.
pub fn orth(m: &DMatrix<f64>, rel_tol: f64, abs_tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(r, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    let thr = (rel_tol * smax).max(abs_tol);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > thr)
        .collect();
    let mut out = DMatrix::zeros(r, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        out.set_column(k, &u.column(i));
    }
    out
}

/// Orthonormal basis of the orthogonal complement of span(M) in R^n.
pub fn orth_complement(m: &DMatrix<f64>, n: usize, rel_tol: f64, abs_tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::identity(n, n);
    }
    null_space(&m.transpose(), rel_tol, abs_tol)
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut off = 0;
    for b in blocks {
        assert_eq!(b.nrows(), r, "hstack row mismatch");
        out.view_mut((0, off), (r, b.ncols())).copy_from(*b);
        off += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let c = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut off = 0;
    for b in blocks {
        assert_eq!(b.ncols(), c, "vstack column mismatch");
        out.view_mut((off, 0), (b.nrows(), c)).copy_from(*b);
        off += b.nrows();
    }
    out
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut ro, mut co) = (0, 0);
    for b in blocks {
        out.view_mut((ro, co), b.shape()).copy_from(b);
        ro += b.nrows();
        co += b.ncols();
    }
    out
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(r, c, v.as_slice())
}

/// Solves the discrete algebraic Riccati equation
/// P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q by fixed-point iteration.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let s = r + b.transpose() * &p * b;
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("DARE: R + BᵀPB not positive definite".into()))?;
        let gain = chol.solve(&(b.transpose() * &p * a));
        let pn = symmetrize(&(a.transpose() * &p * a - a.transpose() * &p * b * gain + q));
        let diff = (&pn - &p).abs().max();
        p = pn;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("DARE diverged".into()));
        }
        if diff <= 1e-13 * (1.0 + p.abs().max()) {
            return Ok(p);
        }
    }
    Err(Error::Numerical("DARE did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..terms {
            term = &term * a / (k as f64);
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_zero_is_identity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e = expm_t(&a, 0.0).unwrap();
        assert_eq!(e, DMatrix::identity(2, 2));
    }

    #[test]
    fn expm_diag() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2f64.ln(), 0.0]));
        let e = expm(&a).unwrap();
        assert!((e[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((e[(1, 1)] - 1.0).abs() < 1e-14);
        assert!(e[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn expm_every_pade_branch_matches_taylor() {
        let base = DMatrix::from_row_slice(
            3,
            3,
            &[0.1, -0.4, 0.2, 0.3, -0.2, 0.5, -0.1, 0.25, 0.05],
        );
        for scale in [0.01, 0.2, 0.8, 1.7, 4.0, 12.0] {
            let a = &base * scale;
            let e = expm(&a).unwrap();
            let t = taylor(&a, 400);
            let err = (&e - &t).abs().max() / t.abs().max();
            assert!(err < 1e-12, "scale {scale}: rel err {err}");
        }
    }

    #[test]
    fn expm_rejects_nan() {
        let a = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(expm(&a).is_err());
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let n = null_space(&m, 1e-12, 0.0);
        assert_eq!(n.ncols(), 2);
        assert!((&m * &n).abs().max() < 1e-14);
    }

    #[test]
    fn dare_scalar() {
        // p = a²p − a²p²/(r + p) + q with a=b=q=r=1 gives p = (1+√5)/2
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = dare(&one, &one, &one, &one).unwrap();
        assert!((p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-10);
    }
}
