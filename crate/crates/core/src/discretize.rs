//! Asynchronous zero-order-hold discretization and horizon-stacked operators.
//!
//! Times are held as exact decimals so that the comparison of a hold
//! instant ℓ·Δt_u with a sensing instant k·Δt_y never depends on rounding.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::{check_finite, expm_and_integral, expm_t};
use crate::model::{Lti, SystemModel, Topology};
use crate::{Error, Result};

/// Exact nonnegative decimal: `num / 10^scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dec {
    num: i128,
    scale: u32,
}

impl Dec {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / 10f64.powi(self.scale as i32)
    }

    pub fn is_positive(self) -> bool {
        self.num > 0
    }

    fn ticks(self, scale: u32) -> i128 {
        self.num * 10i128.pow(scale - self.scale)
    }
}

impl FromStr for Dec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("`{s}` is not a plain decimal duration"));
        let s = s.trim();
        let (mant, exp) = match s.find(['e', 'E']) {
            Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| bad())?),
            None => (s, 0),
        };
        let (int, frac) = match mant.find('.') {
            Some(i) => (&mant[..i], &mant[i + 1..]),
            None => (mant, ""),
        };
        if int.starts_with('-') || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.chars().all(|c| c.is_ascii_digit()) || digits.len() > 30 {
            return Err(bad());
        }
        let mut num: i128 = digits.parse().map_err(|_| bad())?;
        let mut scale = frac.len() as i32 - exp;
        if scale < 0 {
            num *= 10i128.pow((-scale) as u32);
            scale = 0;
        }
        if scale > 18 {
            return Err(bad());
        }
        Ok(Dec {
            num,
            scale: scale as u32,
        })
    }
}

impl TryFrom<f64> for Dec {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Invalid(format!("duration {v} must be finite and nonnegative")));
        }
        // Display prints the shortest decimal that round-trips.
        format!("{v}").parse()
    }
}

impl fmt::Display for Dec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.num);
        }
        let p = 10i128.pow(self.scale);
        write!(
            f,
            "{}.{:0width$}",
            self.num / p,
            self.num % p,
            width = self.scale as usize
        )
    }
}

impl Serialize for Dec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Dec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            S(String),
            F(f64),
        }
        match Raw::deserialize(d)? {
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::F(v) => Dec::try_from(v).map_err(serde::de::Error::custom),
        }
    }
}

/// Actuation period, sensing period and terminal time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub dt_u: Dec,
    pub dt_y: Dec,
    pub t_f: Dec,
}

impl SamplingConfig {
    pub fn new(dt_u: &str, dt_y: &str, t_f: &str) -> Result<Self> {
        let s = SamplingConfig {
            dt_u: dt_u.parse()?,
            dt_y: dt_y.parse()?,
            t_f: t_f.parse()?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_f64(dt_u: f64, dt_y: f64, t_f: f64) -> Result<Self> {
        let s = SamplingConfig {
            dt_u: Dec::try_from(dt_u)?,
            dt_y: Dec::try_from(dt_y)?,
            t_f: Dec::try_from(t_f)?,
        };
        s.validate()?;
        Ok(s)
    }

    fn common_scale(&self) -> u32 {
        self.dt_u.scale.max(self.dt_y.scale).max(self.t_f.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dt_u.is_positive() || !self.dt_y.is_positive() {
            return Err(Error::Invalid("sampling periods must be positive".into()));
        }
        let sc = self.common_scale();
        let (u, y, f) = (self.dt_u.ticks(sc), self.dt_y.ticks(sc), self.t_f.ticks(sc));
        if f < u.max(y) {
            return Err(Error::Invalid(format!(
                "t_F = {} is shorter than max(dt_u, dt_y)",
                self.t_f
            )));
        }
        Ok(())
    }

    /// Number of sensing intervals K = floor(t_F / Δt_y).
    pub fn k(&self) -> usize {
        let sc = self.common_scale();
        (self.t_f.ticks(sc) / self.dt_y.ticks(sc)) as usize
    }

    /// Last hold index Ł: hold instants ℓ·Δt_u strictly before t_K = K·Δt_y.
    pub fn ell(&self) -> usize {
        let sc = self.common_scale();
        let tk = self.k() as i128 * self.dt_y.ticks(sc);
        let u = self.dt_u.ticks(sc);
        ((tk + u - 1) / u - 1) as usize
    }

    pub fn t_sense(&self, k: usize) -> f64 {
        k as f64 * self.dt_y.as_f64()
    }

    pub fn t_hold(&self, l: usize) -> f64 {
        l as f64 * self.dt_u.as_f64()
    }

    /// Exact overlap of hold window ℓ with sensing interval k, as
    /// (start, end) in seconds, or None when empty.
    pub fn overlap(&self, k: usize, l: usize) -> Option<(f64, f64)> {
        let sc = self.common_scale();
        let (u, y) = (self.dt_u.ticks(sc), self.dt_y.ticks(sc));
        let (a0, a1) = (k as i128 * y, (k as i128 + 1) * y);
        let (b0, b1) = (l as i128 * u, (l as i128 + 1) * u);
        let lo = a0.max(b0);
        let hi = a1.min(b1);
        if lo >= hi {
            return None;
        }
        let d = 10f64.powi(sc as i32);
        Some((lo as f64 / d, hi as f64 / d))
    }

    /// The hold index ℓ with ℓ·Δt_u = k·Δt_y exactly, if any.
    pub fn hold_at(&self, k: usize) -> Option<usize> {
        let sc = self.common_scale();
        let t = k as i128 * self.dt_y.ticks(sc);
        let u = self.dt_u.ticks(sc);
        (t % u == 0).then_some((t / u) as usize)
    }

    /// Hold indices whose instant falls in [t_k, t_{k+1}).
    pub fn holds_starting_in(&self, k: usize) -> std::ops::Range<usize> {
        let sc = self.common_scale();
        let (u, y) = (self.dt_u.ticks(sc), self.dt_y.ticks(sc));
        let first = |t: i128| ((t + u - 1) / u) as usize;
        first(k as i128 * y)..first((k as i128 + 1) * y)
    }

    /// Hold indices whose window overlaps [t_k, t_{k+1}).
    pub fn holds_overlapping(&self, k: usize) -> std::ops::Range<usize> {
        let sc = self.common_scale();
        let (u, y) = (self.dt_u.ticks(sc), self.dt_y.ticks(sc));
        let lo = (k as i128 * y) / u;
        let hi = ((k as i128 + 1) * y + u - 1) / u;
        lo as usize..hi as usize
    }

    /// Causality step f_s(t_ℓ − t_k): 1 when the hold instant is not before
    /// the sensing instant.
    pub fn causal(&self, l: usize, k: usize) -> bool {
        let sc = self.common_scale();
        l as i128 * self.dt_u.ticks(sc) >= k as i128 * self.dt_y.ticks(sc)
    }
}

/// ∫_{t_k}^{t_k1} e^{A(t_k1−τ)} h(τ−t_ℓ) dτ with h the unit hold pulse on
/// [0, Δt_u).
pub fn hold_integral(a: &DMatrix<f64>, t_k: f64, t_k1: f64, t_l: f64, dt_u: f64) -> Result<DMatrix<f64>> {
    for (v, n) in [(t_k, "t_k"), (t_k1, "t_k1"), (t_l, "t_l"), (dt_u, "dt_u")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(n.into()));
        }
    }
    if t_k1 <= t_k {
        return Err(Error::Invalid("hold_integral needs t_k1 > t_k".into()));
    }
    let lo = t_k.max(t_l);
    let hi = t_k1.min(t_l + dt_u);
    if lo >= hi {
        return Ok(DMatrix::zeros(a.nrows(), a.ncols()));
    }
    overlap_integral(a, t_k1, lo, hi)
}

/// H_{k,ℓ} on the exact overlap of hold ℓ with sensing interval k, or None
/// when they do not overlap. Valid for any k, not only inside the horizon.
pub fn interval_hold(a: &DMatrix<f64>, sampling: &SamplingConfig, k: usize, l: usize) -> Result<Option<DMatrix<f64>>> {
    match sampling.overlap(k, l) {
        Some((lo, hi)) => overlap_integral(a, sampling.t_sense(k + 1), lo, hi).map(Some),
        None => Ok(None),
    }
}

fn overlap_integral(a: &DMatrix<f64>, t_end: f64, lo: f64, hi: f64) -> Result<DMatrix<f64>> {
    let (_, int) = expm_and_integral(a, hi - lo)?;
    if t_end > hi {
        Ok(expm_t(a, t_end - hi)? * int)
    } else {
        Ok(int)
    }
}

/// Horizon-stacked maps from (x_S, held inputs) to states and measurements.
#[derive(Clone, Debug)]
pub struct StackedOperators {
    /// 𝓐_K, p(K+1) × p.
    pub a_stack: DMatrix<f64>,
    /// 𝓑_{K,Ł}, p(K+1) × q(Ł+1).
    pub b_stack: DMatrix<f64>,
    /// 𝓒_K = blkdiag(C_0, …, C_K).
    pub c_stack: DMatrix<f64>,
    pub k: usize,
    pub ell: usize,
    pub p: usize,
    pub q: usize,
    /// Row counts of C_0..C_K.
    pub r: Vec<usize>,
    /// S_k = e^{A_k Δt_y}, k = 0..K−1.
    pub s: Vec<DMatrix<f64>>,
    /// H_{k,ℓ}, k = 0..K−1, ℓ = 0..Ł.
    pub h: Vec<Vec<DMatrix<f64>>>,
    /// B_k, k = 0..K−1.
    pub b: Vec<DMatrix<f64>>,
    /// C_k, k = 0..K.
    pub c: Vec<DMatrix<f64>>,
}

impl StackedOperators {
    /// E_k with x_k = E_k 𝐱_K.
    pub fn selector(&self, k: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.p, self.p * (self.k + 1));
        e.view_mut((0, k * self.p), (self.p, self.p)).fill_with_identity();
        e
    }

    pub fn selectors(&self) -> Vec<DMatrix<f64>> {
        (0..=self.k).map(|k| self.selector(k)).collect()
    }

    /// Held-input block 𝐁_{k,Ł} = [H_{k,0}B_k, …, H_{k,Ł}B_k].
    pub fn bb(&self, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p, self.q * (self.ell + 1));
        for l in 0..=self.ell {
            out.view_mut((0, l * self.q), (self.p, self.q))
                .copy_from(&(&self.h[k][l] * &self.b[k]));
        }
        out
    }

    /// (𝓑)_K, the last block row of 𝓑.
    pub fn b_last(&self) -> DMatrix<f64> {
        self.b_stack
            .rows(self.k * self.p, self.p)
            .into_owned()
    }

    /// [𝓐_K, 𝓑_{K,Ł}].
    pub fn e_stack(&self) -> DMatrix<f64> {
        crate::linalg::hstack(&[&self.a_stack, &self.b_stack])
    }

    pub fn c_offset(&self, k: usize) -> usize {
        self.r[..k].iter().sum()
    }

    pub fn states(&self, x_s: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_stack * x_s + &self.b_stack * u
    }

    pub fn outputs(&self, x_s: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c_stack * self.states(x_s, u)
    }
}

/// Stacks the per-interval continuous-time triples `ltis[k]` (k = 0..K,
/// only C is used from the last) under `sampling`.
pub fn assemble_from_lti(ltis: &[Lti], sampling: &SamplingConfig) -> Result<StackedOperators> {
    let kk = sampling.k();
    let ell = sampling.ell();
    if ltis.len() != kk + 1 {
        return Err(Error::Dimension(format!(
            "schedule has {} entries, horizon needs K+1 = {}",
            ltis.len(),
            kk + 1
        )));
    }
    let p = ltis[0].a.nrows();
    let q = ltis[0].b.ncols();
    for (k, l) in ltis.iter().enumerate() {
        if l.a.shape() != (p, p) || l.b.shape() != (p, q) || l.c.ncols() != p {
            return Err(Error::Dimension(format!("step {k}: matrices not conformal")));
        }
        check_finite(&l.a, "A")?;
        check_finite(&l.b, "B")?;
        check_finite(&l.c, "C")?;
    }
    let dty = sampling.dt_y.as_f64();
    let mut s = Vec::with_capacity(kk);
    let mut h = Vec::with_capacity(kk);
    for k in 0..kk {
        let a = &ltis[k].a;
        s.push(expm_t(a, dty)?);
        let t_end = sampling.t_sense(k + 1);
        let mut row = Vec::with_capacity(ell + 1);
        for l in 0..=ell {
            row.push(match sampling.overlap(k, l) {
                Some((lo, hi)) => overlap_integral(a, t_end, lo, hi)?,
                None => DMatrix::zeros(p, p),
            });
        }
        h.push(row);
    }
    let nu = q * (ell + 1);
    let mut a_stack = DMatrix::zeros(p * (kk + 1), p);
    let mut b_stack = DMatrix::zeros(p * (kk + 1), nu);
    a_stack.view_mut((0, 0), (p, p)).fill_with_identity();
    let b: Vec<DMatrix<f64>> = ltis[..kk].iter().map(|l| l.b.clone()).collect();
    let c: Vec<DMatrix<f64>> = ltis.iter().map(|l| l.c.clone()).collect();
    let mut ops = StackedOperators {
        a_stack: DMatrix::zeros(0, 0),
        b_stack: DMatrix::zeros(0, 0),
        c_stack: crate::linalg::block_diag(&c),
        k: kk,
        ell,
        p,
        q,
        r: c.iter().map(|m| m.nrows()).collect(),
        s,
        h,
        b,
        c,
    };
    for k in 0..kk {
        let prev_a = a_stack.rows(k * p, p).into_owned();
        let prev_b = b_stack.rows(k * p, p).into_owned();
        let bb = ops.bb(k);
        a_stack
            .rows_mut((k + 1) * p, p)
            .copy_from(&(&ops.s[k] * prev_a));
        b_stack
            .rows_mut((k + 1) * p, p)
            .copy_from(&(&ops.s[k] * prev_b + bb));
    }
    ops.a_stack = a_stack;
    ops.b_stack = b_stack;
    Ok(ops)
}

/// Stacked operators of `model` along a per-step topology schedule of
/// length K+1.
pub fn assemble_stacked(
    model: &SystemModel,
    sampling: &SamplingConfig,
    schedule: &[Topology],
) -> Result<StackedOperators> {
    assemble_stacked_with(model, sampling, schedule, false)
}

pub fn assemble_stacked_with(
    model: &SystemModel,
    sampling: &SamplingConfig,
    schedule: &[Topology],
    padded: bool,
) -> Result<StackedOperators> {
    let ltis = schedule
        .iter()
        .map(|t| {
            if padded {
                model.matrices_padded(t)
            } else {
                model.matrices(t)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_from_lti(&ltis, sampling)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_parsing() {
        let d: Dec = "0.5".parse().unwrap();
        assert_eq!(d.as_f64(), 0.5);
        let e: Dec = "1e-1".parse().unwrap();
        assert_eq!(e.to_string(), "0.1");
        assert!("-1".parse::<Dec>().is_err());
        assert!("abc".parse::<Dec>().is_err());
        assert_eq!(Dec::try_from(0.1).unwrap().to_string(), "0.1");
    }

    #[test]
    fn horizons() {
        let s = SamplingConfig::new("0.5", "1", "2").unwrap();
        assert_eq!((s.k(), s.ell()), (2, 3));
        let s = SamplingConfig::new("1", "1", "3").unwrap();
        assert_eq!((s.k(), s.ell()), (3, 2));
        let s = SamplingConfig::new("0.3", "0.2", "1").unwrap();
        assert_eq!(s.k(), 5);
        // hold instants 0, .3, .6, .9 precede t_K = 1.0
        assert_eq!(s.ell(), 3);
        assert!(SamplingConfig::new("0.5", "1", "0.7").is_err());
    }

    #[test]
    fn causal_mask() {
        let s = SamplingConfig::new("0.5", "1", "2").unwrap();
        assert!(!s.causal(1, 1));
        assert!(s.causal(2, 1));
    }

    #[test]
    fn hold_ranges() {
        let s = SamplingConfig::new("0.5", "1", "2").unwrap();
        assert_eq!(s.hold_at(3), Some(6));
        assert_eq!(s.holds_starting_in(1), 2..4);
        let s = SamplingConfig::new("0.3", "0.2", "1").unwrap();
        assert_eq!(s.hold_at(1), None);
        assert_eq!(s.hold_at(3), Some(2));
        // [0.2, 0.4) meets holds [0, 0.3) and [0.3, 0.6)
        assert_eq!(s.holds_overlapping(1), 0..2);
        assert_eq!(s.holds_starting_in(1), 1..2);
        assert_eq!(s.holds_starting_in(0), 0..1);
    }

    #[test]
    fn overlap_is_exact_at_window_edges() {
        let s = SamplingConfig::new("0.1", "0.3", "0.9").unwrap();
        // hold window [0.3, 0.4) starts exactly at t_1 = 0.3
        assert!(s.overlap(0, 3).is_none());
        assert_eq!(s.overlap(1, 3), Some((0.3, 0.4)));
    }
}
