//! Exhaustive search over admissible topology sequences.

use rayon::prelude::*;

use super::{Method, SwitchResult, SwitchSpec};
use crate::model::Topology;
use crate::{Error, Result};

pub const DEFAULT_SEQUENCE_CAP: usize = 10_000;

/// Sequence number `idx` in lexicographic order, step 0 most significant.
fn decode(idx: usize, radix: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radix.len()];
    let mut rest = idx;
    for k in (0..radix.len()).rev() {
        out[k] = rest % radix[k];
        rest /= radix[k];
    }
    out
}

/// Minimizes J_rob over every admissible per-step sequence subject to the
/// thresholds. Ties go to the lexicographically smallest sequence.
pub fn brute_force_select(spec: &SwitchSpec, cap: usize) -> Result<SwitchResult> {
    spec.validate()?;
    let radix: Vec<usize> = (0..spec.steps()).map(|k| spec.candidates(k).len()).collect();
    let total = radix
        .iter()
        .try_fold(1usize, |acc, &r| acc.checked_mul(r))
        .filter(|&t| t <= cap)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "{} topology sequences exceed the cap {cap}",
                radix.iter().map(|&r| r as f64).product::<f64>()
            ))
        })?;
    let gains = spec.gains.gains(&spec.model, &spec.sampling)?;
    let schedule = |idx: usize| -> Vec<Topology> {
        decode(idx, &radix)
            .into_iter()
            .enumerate()
            .map(|(k, t)| spec.candidates(k)[t].clone())
            .collect()
    };
    let scored: Vec<Result<Option<(f64, usize)>>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let m = spec.evaluate(&schedule(idx), &gains)?;
            Ok(spec.thresholds.admits(&m).then_some((m.j_rob, idx)))
        })
        .collect();
    let mut best: Option<(f64, usize)> = None;
    for s in scored {
        if let Some((j, idx)) = s? {
            if best.is_none_or(|(bj, _)| j < bj) {
                best = Some((j, idx));
            }
        }
    }
    let (_, idx) = best.ok_or_else(|| {
        Error::Infeasible(format!("no feasible sequence among {total} candidates"))
    })?;
    SwitchResult::certify(spec, schedule(idx), Method::BruteForce, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_is_lexicographic() {
        let r = [2, 3];
        let seqs: Vec<Vec<usize>> = (0..6).map(|i| decode(i, &r)).collect();
        assert_eq!(seqs[0], vec![0, 0]);
        assert_eq!(seqs[1], vec![0, 1]);
        assert_eq!(seqs[3], vec![1, 0]);
        assert_eq!(seqs[5], vec![1, 2]);
    }
}
