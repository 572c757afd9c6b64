//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zdaguard::discretize::{assemble_stacked, SamplingConfig};
use zdaguard::feedback::random_gains;
use zdaguard::sdp::{LmiBlock, SdpProblem};
use zdaguard::model::{
    build_double_integrator_network_with, build_fixed, enumerate_feasible_topologies, MeasurementKind, Topology,
    TopologySet,
};
use zdaguard::switching::{ConcreteDesign, GainPolicy, SwitchSpec, Thresholds};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random A with spectrum shifted into the open left half plane.
pub fn random_stable(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = random_matrix(p, p, rng);
    let shift = m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::MIN, f64::max) + 0.2;
    m - DMatrix::identity(p, p) * shift.max(0.0)
}

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = random_matrix(n, n, rng);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

/// A concrete design on a random p=2, q=1, r=2 system with K = Ł = 1
/// (two holds per sensing interval) and causal Gaussian gains.
pub fn random_design(seed: u64) -> ConcreteDesign {
    let mut rng = rng(seed);
    let a = random_stable(2, &mut rng);
    let b = random_matrix(2, 1, &mut rng);
    let c = random_matrix(2, 2, &mut rng);
    let model = build_fixed(a, b, c).unwrap();
    let sampling = SamplingConfig::new("0.5", "1", "1").unwrap();
    let sched = vec![model.nominal.clone(); sampling.k() + 1];
    let ops = assemble_stacked(&model, &sampling, &sched).unwrap();
    let gains = random_gains(ops.q, &ops.r, &sampling, 1.0, &mut rng);
    let n = ops.b_stack.nrows();
    ConcreteDesign {
        a_stack: ops.a_stack,
        b_stack: ops.b_stack,
        c_stack: ops.c_stack,
        gain: gains.dense,
        q_rob: random_spd(n, &mut rng),
        p: ops.p,
    }
}

/// Three random connected topologies on four agents in the unit square,
/// offered at every step of a K = 2 horizon, full relative-state
/// measurements and consensus gains.
pub fn four_agent_instance(seed: u64) -> SwitchSpec {
    let mut rng = rng(seed);
    let pos: Vec<Vec<f64>> = (0..4)
        .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let mut all = enumerate_feasible_topologies(&pos, 2.0, 1.0).unwrap();
    all.shuffle(&mut rng);
    let mut three: Vec<Topology> = all.into_iter().take(3).collect();
    three.sort();
    let model =
        build_double_integrator_network_with(4, 1, three[0].clone(), MeasurementKind::FullState, Some(0), None)
            .unwrap();
    SwitchSpec {
        model,
        sampling: SamplingConfig::new("0.5", "1", "2").unwrap(),
        topologies: TopologySet {
            steps: vec![three],
            density_cap: 1.0,
        },
        gains: GainPolicy::Consensus { kp: 0.3, kd: 0.4 },
        thresholds: Thresholds::default(),
        q_rob: None,
    }
}

pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

pub fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * 0.5
}

/// Builds an SDP whose optimum x* is known: F(x*) = U diag(s, 0) Uᵀ and
/// Z* = U diag(0, z) Uᵀ are strictly complementary and c_i = ⟨F_i, Z*⟩.
pub fn planted(seed: u64, m: usize, dims: &[usize]) -> (SdpProblem, DVector<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let mut p = SdpProblem::new(m);
    let mut c = DVector::zeros(m);
    for &n in dims {
        let u = random_orthogonal(n, &mut rng);
        let r = n / 2;
        let sd = DVector::from_fn(n, |i, _| if i < r { rng.random_range(0.5..2.0) } else { 0.0 });
        let zd = DVector::from_fn(n, |i, _| if i >= r { rng.random_range(0.5..2.0) } else { 0.0 });
        let s = &u * DMatrix::from_diagonal(&sd) * u.transpose();
        let z = &u * DMatrix::from_diagonal(&zd) * u.transpose();
        let mut f0 = s.clone();
        let mut blk = LmiBlock::new(n);
        for i in 0..m {
            let fi = random_sym(n, &mut rng);
            f0 -= &fi * xs[i];
            c[i] += fi.component_mul(&z).sum();
            blk.add_matrix(Some(i), 0, 0, &fi);
        }
        blk.add_matrix(None, 0, 0, &f0);
        p.add_block(blk);
    }
    let opt = c.dot(&xs);
    p.c = c;
    (p, xs, opt)
}

/// Scaling-and-squaring Taylor exponential, kept apart from the library's Padé.
pub fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a / 2f64.powi(s);
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}
