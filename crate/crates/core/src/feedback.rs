//! Causal output feedback over the stacked horizon.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discretize::{SamplingConfig, StackedOperators};
use crate::linalg::rank;
use crate::{Error, Result};

/// Relative singular-value threshold for rank decisions.
pub const RANK_REL_TOL: f64 = 1e-9;

/// Gain blocks κ_{ℓ,k} (q × r_k) with the causality mask applied.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CausalGainStack {
    /// `blocks[ℓ][k]`.
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    /// `mask[ℓ][k]` = f_s(t_ℓ − t_k).
    pub mask: Vec<Vec<bool>>,
    pub q: usize,
    pub r: Vec<usize>,
    /// Dense 𝓚_{Ł,K}, q(Ł+1) × Σ r_k.
    pub dense: DMatrix<f64>,
}

impl CausalGainStack {
    pub fn zeros(q: usize, r: &[usize], sampling: &SamplingConfig) -> Self {
        let blocks = (0..=sampling.ell())
            .map(|_| r.iter().map(|&rk| DMatrix::zeros(q, rk)).collect())
            .collect();
        assemble_gain(blocks, sampling).expect("zero blocks are conformal")
    }

    pub fn ell(&self) -> usize {
        self.blocks.len() - 1
    }
}

/// Zeroes acausal blocks and forms the dense gain.
pub fn assemble_gain(mut blocks: Vec<Vec<DMatrix<f64>>>, sampling: &SamplingConfig) -> Result<CausalGainStack> {
    let ell = sampling.ell();
    let kk = sampling.k();
    if blocks.len() != ell + 1 || blocks.iter().any(|row| row.len() != kk + 1) {
        return Err(Error::Dimension(format!(
            "gain stack must be {}x{} blocks",
            ell + 1,
            kk + 1
        )));
    }
    let q = blocks[0][0].nrows();
    let r: Vec<usize> = blocks[0].iter().map(|b| b.ncols()).collect();
    for (l, row) in blocks.iter().enumerate() {
        for (k, b) in row.iter().enumerate() {
            if b.nrows() != q || b.ncols() != r[k] {
                return Err(Error::Dimension(format!(
                    "block ({l},{k}) is {}x{}, expected {q}x{}",
                    b.nrows(),
                    b.ncols(),
                    r[k]
                )));
            }
        }
    }
    let mut mask = vec![vec![false; kk + 1]; ell + 1];
    let rtot: usize = r.iter().sum();
    let mut dense = DMatrix::zeros(q * (ell + 1), rtot);
    for l in 0..=ell {
        let mut off = 0;
        for k in 0..=kk {
            mask[l][k] = sampling.causal(l, k);
            if mask[l][k] {
                dense.view_mut((l * q, off), (q, r[k])).copy_from(&blocks[l][k]);
            } else {
                blocks[l][k].fill(0.0);
            }
            off += r[k];
        }
    }
    Ok(CausalGainStack {
        blocks,
        mask,
        q,
        r,
        dense,
    })
}

/// Random Gaussian causal gains with entries of standard deviation `scale`.
pub fn random_gains(
    q: usize,
    r: &[usize],
    sampling: &SamplingConfig,
    scale: f64,
    rng: &mut impl rand::Rng,
) -> CausalGainStack {
    let blocks = (0..=sampling.ell())
        .map(|_| {
            r.iter()
                .map(|&rk| {
                    DMatrix::from_fn(q, rk, |_, _| {
                        let z: f64 = StandardNormal.sample(rng);
                        scale * z
                    })
                })
                .collect()
        })
        .collect();
    assemble_gain(blocks, sampling).expect("conformal by construction")
}

/// L = I − 𝓑𝓚𝓒 and its inverse by block forward substitution.
pub fn closed_loop_map(ops: &StackedOperators, gains: &CausalGainStack) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if gains.dense.nrows() != ops.b_stack.ncols() || gains.dense.ncols() != ops.c_stack.nrows() {
        return Err(Error::Dimension(format!(
            "gain is {:?}, stacked operators need {}x{}",
            gains.dense.shape(),
            ops.b_stack.ncols(),
            ops.c_stack.nrows()
        )));
    }
    let p = ops.p;
    let nb = ops.k + 1;
    let g = &ops.b_stack * &gains.dense * &ops.c_stack;
    let scale = 1.0 + g.abs().max();
    for i in 0..nb {
        for j in i..nb {
            let blk = g.view((i * p, j * p), (p, p));
            if blk.abs().max() > 1e-12 * scale {
                return Err(Error::Numerical(format!(
                    "𝓑𝓚𝓒 block ({i},{j}) is nonzero; gain stack is not causal"
                )));
            }
        }
    }
    let n = p * nb;
    let l = DMatrix::<f64>::identity(n, n) - &g;
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for i in 0..nb {
        let mut row = DMatrix::<f64>::zeros(p, n);
        row.view_mut((0, i * p), (p, p)).fill_with_identity();
        for j in 0..i {
            let gij = g.view((i * p, j * p), (p, p));
            row += gij * inv.rows(j * p, p);
        }
        inv.rows_mut(i * p, p).copy_from(&row);
    }
    Ok((l, inv))
}

/// 𝐱_K = L⁻¹(𝓐 x_S + 𝓑(𝐯 + 𝐚)).
pub fn closed_loop_state(
    ops: &StackedOperators,
    gains: &CausalGainStack,
    x_s: &DVector<f64>,
    v_seq: &DVector<f64>,
    a_seq: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x_s.len() != ops.p || v_seq.len() != ops.b_stack.ncols() || a_seq.len() != ops.b_stack.ncols() {
        return Err(Error::Dimension("closed_loop_state: vector lengths".into()));
    }
    let (_, inv) = closed_loop_map(ops, gains)?;
    Ok(inv * (&ops.a_stack * x_s + &ops.b_stack * (v_seq + a_seq)))
}

/// Dimension of ker(M) with σ ≤ 1e-9·σ_max counted as zero.
pub fn nullity(m: &DMatrix<f64>) -> usize {
    m.ncols() - rank(m, RANK_REL_TOL, 0.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceTrial {
    pub trial: usize,
    pub nullity_open: usize,
    pub nullity_closed: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub trials: Vec<InvarianceTrial>,
}

impl InvarianceReport {
    pub fn mismatches(&self) -> usize {
        self.trials.iter().filter(|t| !t.pass).count()
    }
}

/// Compares nullity of 𝓒L⁻¹𝓔 with that of 𝓒𝓔 for random causal gains.
/// Trial 0 uses zero gains; trial i ≥ 1 draws from stream i of `seed`.
pub fn sensitivity_invariance_check(
    ops: &StackedOperators,
    sampling: &SamplingConfig,
    trials: usize,
    seed: u64,
    gain_scale: f64,
) -> Result<InvarianceReport> {
    let e = ops.e_stack();
    let open = nullity(&(&ops.c_stack * &e));
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let gains = if t == 0 {
            CausalGainStack::zeros(ops.q, &ops.r, sampling)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            random_gains(ops.q, &ops.r, sampling, gain_scale, &mut rng)
        };
        let (_, inv) = closed_loop_map(ops, &gains)?;
        let closed = nullity(&(&ops.c_stack * inv * &e));
        out.push(InvarianceTrial {
            trial: t,
            nullity_open: open,
            nullity_closed: closed,
            pass: open == closed,
        });
    }
    Ok(InvarianceReport { trials: out })
}
