//! Continuous-time networked plants, communication topologies and builders.

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Binary adjacency matrix of an N-agent network, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Topology {
    pub n: usize,
    pub adjacency: Vec<Vec<u8>>,
}

impl Topology {
    pub fn empty(n: usize) -> Self {
        Topology {
            n,
            adjacency: vec![vec![0; n]; n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut t = Topology::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t.adjacency[i][j] = 1;
                }
            }
        }
        t
    }

    /// Undirected graph from an edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut t = Topology::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Dimension(format!("edge ({i},{j}) out of range for {n} agents")));
            }
            if i == j {
                return Err(Error::Invalid(format!("self loop at agent {i}")));
            }
            t.adjacency[i][j] = 1;
            t.adjacency[j][i] = 1;
        }
        Ok(t)
    }

    pub fn validate(&self, undirected: bool) -> Result<()> {
        if self.adjacency.len() != self.n || self.adjacency.iter().any(|r| r.len() != self.n) {
            return Err(Error::Dimension(format!("adjacency is not {}x{}", self.n, self.n)));
        }
        for i in 0..self.n {
            if self.adjacency[i][i] != 0 {
                return Err(Error::Invalid(format!("nonzero diagonal at {i}")));
            }
            for j in 0..self.n {
                let v = self.adjacency[i][j];
                if v > 1 {
                    return Err(Error::Invalid(format!("entry ({i},{j}) = {v} is not binary")));
                }
                if undirected && v != self.adjacency[j][i] {
                    return Err(Error::Invalid(format!("asymmetric entry ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j] != 0 || self.adjacency[j][i] != 0
    }

    /// Undirected edges (i < j), sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn density(&self) -> f64 {
        let max = self.n * self.n.saturating_sub(1) / 2;
        if max == 0 {
            return 0.0;
        }
        self.edges().len() as f64 / max as f64
    }

    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut uf = UnionFind::<usize>::new(self.n);
        for (i, j) in self.edges() {
            uf.union(i, j);
        }
        let root = uf.find(0);
        (1..self.n).all(|i| uf.find(i) == root)
    }

    /// Agents in the same connected component as `agent`.
    pub fn component_of(&self, agent: usize) -> Vec<usize> {
        let mut uf = UnionFind::<usize>::new(self.n);
        for (i, j) in self.edges() {
            uf.union(i, j);
        }
        let root = uf.find(agent);
        (0..self.n).filter(|&i| uf.find(i) == root).collect()
    }

    fn flat(&self) -> Vec<u8> {
        self.adjacency.iter().flatten().copied().collect()
    }
}

/// Admissible topologies per sensing step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologySet {
    pub steps: Vec<Vec<Topology>>,
    pub density_cap: f64,
}

impl TopologySet {
    pub fn validate(&self) -> Result<()> {
        if !(self.density_cap > 0.0 && self.density_cap <= 1.0) {
            return Err(Error::Invalid(format!("density cap {} not in (0,1]", self.density_cap)));
        }
        for (k, step) in self.steps.iter().enumerate() {
            for t in step {
                t.validate(true)?;
                if t.density() > self.density_cap + 1e-12 {
                    return Err(Error::Invalid(format!(
                        "step {k}: density {} above cap {}",
                        t.density(),
                        self.density_cap
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, k: usize, t: &Topology) -> bool {
        self.steps.get(k).map(|s| s.contains(t)).unwrap_or(false)
    }

    pub fn sequence_count(&self) -> f64 {
        self.steps.iter().map(|s| s.len() as f64).product()
    }
}

/// What an edge and the leader measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    /// Relative positions on edges, absolute leader position.
    #[default]
    Position,
    /// Relative positions and velocities on edges, absolute leader state.
    FullState,
}

/// Continuous-time synchronization feedback folded into the plant:
/// u_i = −kp Σ_{j∈N(i)} (p_i − p_j) − kd v_i − kl p_i [i = leader].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncGains {
    pub kp: f64,
    pub kd: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub friction: f64,
    pub inertia: f64,
    pub gravity: f64,
    pub half_length: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 0.5,
            pole_mass: 0.2,
            friction: 0.1,
            inertia: 0.006,
            gravity: 9.8,
            half_length: 0.3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Plant {
    DoubleIntegratorNetwork {
        n: usize,
        dims: usize,
        #[serde(default)]
        measurement: MeasurementKind,
        #[serde(default = "default_leader")]
        leader: Option<usize>,
        #[serde(default)]
        sync: Option<SyncGains>,
    },
    CartPole {
        #[serde(default)]
        params: CartPoleParams,
    },
    /// Topology-independent (A, B, C).
    Fixed {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    },
}

fn default_leader() -> Option<usize> {
    Some(0)
}

/// Continuous-time triple for one topology.
#[derive(Clone, Debug)]
pub struct Lti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// Maps a topology to (A, B, C) with declared dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemModel {
    pub plant: Plant,
    pub nominal: Topology,
}

impl SystemModel {
    pub fn agents(&self) -> usize {
        self.nominal.n
    }

    pub fn state_dim(&self) -> usize {
        match &self.plant {
            Plant::DoubleIntegratorNetwork { n, dims, .. } => 2 * n * dims,
            Plant::CartPole { .. } => 4,
            Plant::Fixed { a, .. } => a.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.plant {
            Plant::DoubleIntegratorNetwork { n, dims, .. } => n * dims,
            Plant::CartPole { .. } => 1,
            Plant::Fixed { b, .. } => b.ncols(),
        }
    }

    pub fn output_dim(&self, topo: &Topology) -> usize {
        match &self.plant {
            Plant::DoubleIntegratorNetwork {
                dims,
                measurement,
                leader,
                ..
            } => {
                let per = match measurement {
                    MeasurementKind::Position => *dims,
                    MeasurementKind::FullState => 2 * dims,
                };
                per * (topo.edges().len() + usize::from(leader.is_some()))
            }
            Plant::CartPole { .. } => 1,
            Plant::Fixed { c, .. } => c.nrows(),
        }
    }

    /// Output dimension when every potential edge carries a row block.
    pub fn padded_output_dim(&self) -> usize {
        self.output_dim(&Topology::complete(self.agents()))
    }

    /// True when A does not depend on the topology.
    pub fn a_fixed(&self) -> bool {
        match &self.plant {
            Plant::DoubleIntegratorNetwork { sync, .. } => sync.is_none(),
            _ => true,
        }
    }

    /// True when B does not depend on the topology.
    pub fn b_fixed(&self) -> bool {
        true
    }

    pub fn matrices(&self, topo: &Topology) -> Result<Lti> {
        self.matrices_impl(topo, false)
    }

    /// Like [`SystemModel::matrices`] but C keeps a row block for every
    /// potential edge, zeroed when the edge is absent.
    pub fn matrices_padded(&self, topo: &Topology) -> Result<Lti> {
        self.matrices_impl(topo, true)
    }

    fn matrices_impl(&self, topo: &Topology, padded: bool) -> Result<Lti> {
        if topo.n != self.agents() {
            return Err(Error::Dimension(format!(
                "topology has {} nodes, model has {} agents",
                topo.n,
                self.agents()
            )));
        }
        match &self.plant {
            Plant::DoubleIntegratorNetwork {
                n,
                dims,
                measurement,
                leader,
                sync,
            } => Ok(double_integrator_matrices(
                *n,
                *dims,
                *measurement,
                *leader,
                sync.as_ref(),
                topo,
                padded,
            )),
            Plant::CartPole { params } => Ok(cartpole_matrices(params)),
            Plant::Fixed { a, b, c } => Ok(Lti {
                a: a.clone(),
                b: b.clone(),
                c: c.clone(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.plant {
            Plant::DoubleIntegratorNetwork { n, dims, leader, .. } => {
                if *n < 2 {
                    return Err(Error::Invalid(format!("need at least 2 agents, got {n}")));
                }
                if !(1..=3).contains(dims) {
                    return Err(Error::Invalid(format!("dims must be 1, 2 or 3, got {dims}")));
                }
                if let Some(l) = leader {
                    if *l >= *n {
                        return Err(Error::Invalid(format!("leader {l} out of range")));
                    }
                }
                if *n != self.nominal.n {
                    return Err(Error::Dimension(format!(
                        "nominal topology has {} nodes, plant has {n} agents",
                        self.nominal.n
                    )));
                }
            }
            Plant::CartPole { .. } => {}
            Plant::Fixed { a, b, c } => {
                if a.nrows() != a.ncols() || b.nrows() != a.nrows() || c.ncols() != a.nrows() {
                    return Err(Error::Dimension(format!(
                        "A {:?}, B {:?}, C {:?} are not conformal",
                        a.shape(),
                        b.shape(),
                        c.shape()
                    )));
                }
            }
        }
        self.nominal.validate(true)
    }
}

#[inline]
fn pos_idx(agent: usize, axis: usize, dims: usize) -> usize {
    agent * 2 * dims + 2 * axis
}

fn double_integrator_matrices(
    n: usize,
    dims: usize,
    measurement: MeasurementKind,
    leader: Option<usize>,
    sync: Option<&SyncGains>,
    topo: &Topology,
    padded: bool,
) -> Lti {
    let p = 2 * n * dims;
    let q = n * dims;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DMatrix::zeros(p, q);
    for i in 0..n {
        for d in 0..dims {
            let x = pos_idx(i, d, dims);
            a[(x, x + 1)] = 1.0;
            b[(x + 1, i * dims + d)] = 1.0;
        }
    }
    if let Some(g) = sync {
        for i in 0..n {
            for d in 0..dims {
                let xi = pos_idx(i, d, dims);
                a[(xi + 1, xi + 1)] -= g.kd;
                if leader == Some(i) {
                    a[(xi + 1, xi)] -= g.kl;
                }
                for j in 0..n {
                    if j != i && topo.has_edge(i, j) {
                        let xj = pos_idx(j, d, dims);
                        a[(xi + 1, xi)] -= g.kp;
                        a[(xi + 1, xj)] += g.kp;
                    }
                }
            }
        }
    }
    let comps: Vec<usize> = match measurement {
        MeasurementKind::Position => vec![0],
        MeasurementKind::FullState => vec![0, 1],
    };
    let per = dims * comps.len();
    let pairs: Vec<(usize, usize)> = if padded {
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
    } else {
        topo.edges()
    };
    let rows = per * (pairs.len() + usize::from(leader.is_some()));
    let mut c = DMatrix::zeros(rows, p);
    let mut r = 0;
    for &(i, j) in &pairs {
        let live = topo.has_edge(i, j);
        for d in 0..dims {
            for &s in &comps {
                if live {
                    c[(r, pos_idx(i, d, dims) + s)] = 1.0;
                    c[(r, pos_idx(j, d, dims) + s)] = -1.0;
                }
                r += 1;
            }
        }
    }
    if let Some(l) = leader {
        for d in 0..dims {
            for &s in &comps {
                c[(r, pos_idx(l, d, dims) + s)] = 1.0;
                r += 1;
            }
        }
    }
    Lti { a, b, c }
}

fn cartpole_matrices(cp: &CartPoleParams) -> Lti {
    let (mc, m, bf, inn, g, l) = (
        cp.cart_mass,
        cp.pole_mass,
        cp.friction,
        cp.inertia,
        cp.gravity,
        cp.half_length,
    );
    let den = inn * (mc + m) + mc * m * l * l;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            -(inn + m * l * l) * bf / den,
            m * m * g * l * l / den,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            -m * l * bf / den,
            m * g * l * (mc + m) / den,
            0.0,
        ],
    );
    let b = DMatrix::from_column_slice(4, 1, &[0.0, (inn + m * l * l) / den, 0.0, m * l / den]);
    let c = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
    Lti { a, b, c }
}

/// Network of `n` double integrators in `dims` spatial dimensions with
/// relative position measurements and leader agent 0.
pub fn build_double_integrator_network(n: usize, dims: usize, topo: Topology) -> Result<SystemModel> {
    build_double_integrator_network_with(n, dims, topo, MeasurementKind::Position, Some(0), None)
}

pub fn build_double_integrator_network_with(
    n: usize,
    dims: usize,
    topo: Topology,
    measurement: MeasurementKind,
    leader: Option<usize>,
    sync: Option<SyncGains>,
) -> Result<SystemModel> {
    if topo.n != n {
        return Err(Error::Dimension(format!("topology has {} nodes, expected {n}", topo.n)));
    }
    let model = SystemModel {
        plant: Plant::DoubleIntegratorNetwork {
            n,
            dims,
            measurement,
            leader,
            sync,
        },
        nominal: topo,
    };
    model.validate()?;
    Ok(model)
}

/// Linearized cart-pole about the upright equilibrium, cart position output.
pub fn build_cartpole() -> SystemModel {
    SystemModel {
        plant: Plant::CartPole {
            params: CartPoleParams::default(),
        },
        nominal: Topology::empty(1),
    }
}

pub fn build_fixed(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<SystemModel> {
    let m = SystemModel {
        plant: Plant::Fixed { a, b, c },
        nominal: Topology::empty(1),
    };
    m.validate()?;
    Ok(m)
}

fn within_radius(positions: &[Vec<f64>], i: usize, j: usize, radius: f64) -> bool {
    let d2: f64 = positions[i]
        .iter()
        .zip(&positions[j])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    d2.sqrt() <= radius
}

fn radius_pairs(positions: &[Vec<f64>], radius: f64) -> Vec<(usize, usize)> {
    let n = positions.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if within_radius(positions, i, j, radius) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Upper bound on candidate edges for exhaustive enumeration.
pub const MAX_ENUM_EDGES: usize = 24;

/// All connected undirected graphs whose edges join agents within `radius`
/// and whose density does not exceed `density_cap`, in lexicographic order of
/// the flattened adjacency. An empty result means no admissible graph exists.
pub fn enumerate_feasible_topologies(
    positions: &[Vec<f64>],
    radius: f64,
    density_cap: f64,
) -> Result<Vec<Topology>> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("radius must be positive, got {radius}")));
    }
    let n = positions.len();
    let cand = radius_pairs(positions, radius);
    if cand.len() > MAX_ENUM_EDGES {
        return Err(Error::Invalid(format!(
            "{} candidate edges exceed the enumeration limit {MAX_ENUM_EDGES}; use sampling",
            cand.len()
        )));
    }
    let max_edges = n * n.saturating_sub(1) / 2;
    let cap_edges = (density_cap * max_edges as f64 + 1e-9).floor() as usize;
    let mut out = Vec::new();
    for mask in 1u64..(1u64 << cand.len()) {
        if mask.count_ones() as usize > cap_edges {
            continue;
        }
        let edges: Vec<(usize, usize)> = cand
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, e)| *e)
            .collect();
        let t = Topology::from_edges(n, &edges)?;
        if t.is_connected() {
            out.push(t);
        }
    }
    if n == 1 {
        out.push(Topology::empty(1));
    }
    out.sort_by_key(|t| t.flat());
    if out.is_empty() {
        log::warn!("no connected admissible topology within radius {radius}");
    }
    Ok(out)
}

/// Random admissible topologies for networks too large to enumerate: a random
/// spanning tree of the radius graph plus random extra in-range edges up to
/// the density cap. Returns an empty list when the radius graph is
/// disconnected or the cap cannot hold a spanning tree.
pub fn sample_feasible_topologies<R: Rng>(
    positions: &[Vec<f64>],
    radius: f64,
    density_cap: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Topology>> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("radius must be positive, got {radius}")));
    }
    let n = positions.len();
    let cand = radius_pairs(positions, radius);
    let max_edges = n * n.saturating_sub(1) / 2;
    let cap_edges = (density_cap * max_edges as f64 + 1e-9).floor() as usize;
    if n < 2 || cap_edges + 1 < n {
        return Ok(vec![]);
    }
    let mut out: Vec<Topology> = Vec::new();
    let mut attempts = 0;
    while out.len() < count && attempts < 20 * count.max(1) {
        attempts += 1;
        let mut order = cand.clone();
        order.shuffle(rng);
        let mut uf = UnionFind::<usize>::new(n);
        let mut tree = Vec::new();
        let mut rest = Vec::new();
        for e in order {
            if uf.union(e.0, e.1) {
                tree.push(e);
            } else {
                rest.push(e);
            }
        }
        if tree.len() + 1 != n {
            return Ok(vec![]);
        }
        let room = cap_edges - tree.len();
        let extra = if room == 0 || rest.is_empty() {
            0
        } else {
            rng.random_range(0..=room.min(rest.len()))
        };
        tree.extend(rest.into_iter().take(extra));
        let t = Topology::from_edges(n, &tree)?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out.sort_by_key(|t| t.flat());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_agent_1d_matrices() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let m = build_double_integrator_network(2, 1, t.clone()).unwrap();
        let l = m.matrices(&t).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0.],
        );
        assert_eq!(l.a, expect);
        assert_eq!(l.b.shape(), (4, 2));
        assert_eq!(l.c.nrows(), 2);
    }

    #[test]
    fn edgeless_without_leader_has_no_outputs() {
        let t = Topology::empty(3);
        let m = build_double_integrator_network_with(3, 2, t.clone(), MeasurementKind::Position, None, None)
            .unwrap();
        assert_eq!(m.matrices(&t).unwrap().c.nrows(), 0);
    }

    #[test]
    fn cartpole_shapes_and_instability() {
        let m = build_cartpole();
        let l = m.matrices(&m.nominal).unwrap();
        assert_eq!((l.a.nrows(), l.b.ncols(), l.c.nrows()), (4, 1, 1));
        let unstable = l.a.complex_eigenvalues().iter().any(|z| z.re > 0.0);
        assert!(unstable);
    }

    #[test]
    fn enumerate_two_and_three_agents() {
        let two = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(enumerate_feasible_topologies(&two, 2.0, 1.0).unwrap().len(), 1);
        assert!(enumerate_feasible_topologies(&two, 0.5, 1.0).unwrap().is_empty());
        let three = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.8]];
        assert_eq!(enumerate_feasible_topologies(&three, 2.0, 1.0).unwrap().len(), 4);
    }

    #[test]
    fn padded_c_has_zero_rows_for_absent_edges() {
        let t = Topology::from_edges(3, &[(0, 1)]).unwrap();
        let m = build_double_integrator_network(3, 1, t.clone()).unwrap();
        let c = m.matrices_padded(&t).unwrap().c;
        assert_eq!(c.nrows(), 4);
        assert_eq!(c.row(1).abs().sum(), 0.0);
        assert_eq!(c.row(2).abs().sum(), 0.0);
    }
}
