//! Analysis of correlation matrices and trajectories: greedy maximum selection,
//! recovery classification, sequential-elimination detection and related
//! statistics.
//!
//! Indices are 0-based throughout; pair `(i, j)` refers to `m_ij = ⟨v_i, x_j⟩`.
//! Persistence is only checked on recorded snapshots, so the record stride of a
//! trajectory bounds the time resolution of every detection here.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sgd::Trajectory;

/// Largest r for which [`classify_recovery`] enumerates all assignments.
pub const MAX_EXHAUSTIVE_R: usize = 8;

/// `λ_iλ_j m_ij^{p−2}`, with entries where `m_ij^{p−2} < 0` set to zero.
pub fn init_matrix(m0: &DMatrix<f64>, lambdas: &[f64], p: u32) -> DMatrix<f64> {
    DMatrix::from_fn(m0.nrows(), m0.ncols(), |i, j| {
        let w = m0[(i, j)].powi(p as i32 - 2);
        if w >= 0.0 {
            lambdas[i] * lambdas[j] * w
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedySelection {
    pub pairs: Vec<(usize, usize)>,
}

/// Repeatedly takes the entry of largest absolute value among the rows and
/// columns not yet used. Ties go to the smallest row, then the smallest column.
pub fn greedy_max_selection(a: &DMatrix<f64>) -> Result<GreedySelection> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("greedy selection needs a square matrix, got {:?}", a.shape())));
    }
    let r = a.nrows();
    let mut row_used = vec![false; r];
    let mut col_used = vec![false; r];
    let mut pairs = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..r).filter(|&i| !row_used[i]) {
            for j in (0..r).filter(|&j| !col_used[j]) {
                if best.is_none_or(|(bi, bj)| a[(i, j)].abs() > a[(bi, bj)].abs()) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("a free row and column remain");
        row_used[i] = true;
        col_used[j] = true;
        pairs.push((i, j));
    }
    Ok(GreedySelection { pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryKind {
    Exact,
    Permutation,
    Subspace,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub kind: RecoveryKind,
    /// `sigma[j]` is the spike recovered by column j, for exact and permutation outcomes.
    pub sigma: Option<Vec<usize>>,
    /// `|m_{σ(j) j}|` along the best assignment, or the eigenvalues of G for a
    /// subspace outcome.
    pub margins: Vec<f64>,
    /// Every entry outside the best assignment is at most `small_bound` in absolute value.
    pub eliminated_ok: bool,
}

fn permutations(r: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                prefix.push(k);
                go(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(r), &mut vec![false; r], &mut out);
    out
}

/// Best assignment `σ` maximizing `Σ_j |m_{σ(j) j}|`; the lexicographically
/// first one wins ties, so the identity is preferred.
pub fn best_assignment(m: &DMatrix<f64>) -> Result<Vec<usize>> {
    let r = m.nrows();
    if !m.is_square() || r == 0 {
        return Err(Error::Dimension(format!("assignment needs a non-empty square matrix, got {:?}", m.shape())));
    }
    if r > MAX_EXHAUSTIVE_R {
        return Err(Error::InvalidParams(format!("exhaustive assignment is limited to r ≤ {MAX_EXHAUSTIVE_R}, got {r}")));
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for sigma in permutations(r) {
        let score: f64 = sigma.iter().enumerate().map(|(j, &i)| m[(i, j)].abs()).sum();
        if score > best.0 {
            best = (score, sigma);
        }
    }
    Ok(best.1)
}

pub fn classify_recovery(m: &DMatrix<f64>, eps: f64, small_bound: f64) -> Result<RecoveryOutcome> {
    let sigma = best_assignment(m)?;
    let r = m.nrows();
    let margins: Vec<f64> = sigma.iter().enumerate().map(|(j, &i)| m[(i, j)].abs()).collect();
    let eliminated_ok = (0..r).all(|j| (0..r).all(|i| i == sigma[j] || m[(i, j)].abs() <= small_bound));
    let qualifies = margins.iter().all(|&x| x >= 1.0 - eps);
    let identity = sigma.iter().enumerate().all(|(j, &i)| i == j);
    let outcome = if qualifies {
        RecoveryOutcome {
            kind: if identity { RecoveryKind::Exact } else { RecoveryKind::Permutation },
            sigma: Some(sigma),
            margins,
            eliminated_ok,
        }
    } else {
        let theta = eigenvalues_g(m);
        if theta.iter().all(|&t| t >= 1.0 - eps) {
            RecoveryOutcome { kind: RecoveryKind::Subspace, sigma: None, margins: theta, eliminated_ok }
        } else {
            RecoveryOutcome { kind: RecoveryKind::None, sigma: None, margins, eliminated_ok }
        }
    };
    Ok(outcome)
}

/// Condition that made an elimination report invalid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EliminationViolation {
    /// Fewer than r pairs end up persistently above `1 − eps`.
    Incomplete { found: usize },
    /// An entry sharing a row or column with an eliminated pair exceeded `eps_prime`.
    Competitor { pair: (usize, usize), entry: (usize, usize), step: u64, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminationReport {
    /// Pairs ordered by the time they became persistently macroscopic.
    pub ordering: Vec<(usize, usize)>,
    /// Recorded step at which each pair crossed, aligned with `ordering`.
    pub stopping_times: Vec<u64>,
    pub valid: bool,
    pub violation: Option<EliminationViolation>,
}

/// Index of the first snapshot from which `|m_ij| ≥ level` holds to the end.
fn persistent_crossing(traj: &Trajectory, i: usize, j: usize, level: f64) -> Option<usize> {
    let mut first = None;
    for (k, m) in traj.corr.iter().enumerate().rev() {
        if m.matrix()[(i, j)].abs() >= level {
            first = Some(k);
        } else {
            break;
        }
    }
    first
}

pub fn detect_sequential_elimination(traj: &Trajectory, eps: f64, eps_prime: f64) -> Result<EliminationReport> {
    let last = traj.last().ok_or_else(|| Error::InvalidParams("empty trajectory".into()))?;
    let r = last.r();
    let level = 1.0 - eps;
    let mut found: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..r {
        for j in 0..r {
            if let Some(k) = persistent_crossing(traj, i, j, level) {
                found.push((k, i, j));
            }
        }
    }
    // sort by crossing index, then lexicographically
    found.sort();
    let ordering: Vec<(usize, usize)> = found.iter().map(|&(_, i, j)| (i, j)).collect();
    let stopping_times: Vec<u64> = found.iter().map(|&(k, _, _)| traj.steps[k]).collect();

    let mut violation = None;
    'outer: for &(k0, i, j) in &found {
        for (k, m) in traj.corr.iter().enumerate().skip(k0) {
            let mm = m.matrix();
            for l in 0..r {
                for entry in [(i, l), (l, j)] {
                    if entry != (i, j) && mm[entry].abs() > eps_prime {
                        violation = Some(EliminationViolation::Competitor { pair: (i, j), entry, step: traj.steps[k], value: mm[entry] });
                        break 'outer;
                    }
                }
            }
        }
    }
    if violation.is_none() && found.len() != r {
        violation = Some(EliminationViolation::Incomplete { found: found.len() });
    }
    Ok(EliminationReport { ordering, stopping_times, valid: violation.is_none(), violation })
}

/// `‖XXᵀ − VVᵀ‖_F = √(2(r − Tr MMᵀ))`.
pub fn subspace_distance(m: &DMatrix<f64>) -> Result<f64> {
    let radicand = 2.0 * (m.nrows() as f64 - m.norm_squared());
    if radicand < -1e-9 {
        return Err(Error::NegativeRadicand(radicand));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// Eigenvalues of `G = MMᵀ`, descending.
pub fn eigenvalues_g(m: &DMatrix<f64>) -> Vec<f64> {
    linalg::sym_eigenvalues_desc(&(m * m.transpose()))
}

/// First recorded step at which `|m_ij| ≥ level`, per pair (row-major).
pub fn hitting_times(traj: &Trajectory, level: f64) -> Vec<Option<u64>> {
    let Some(first) = traj.corr.first() else { return Vec::new() };
    let r = first.r();
    let mut out = vec![None; r * r];
    for (k, m) in traj.corr.iter().enumerate() {
        for i in 0..r {
            for j in 0..r {
                if out[i * r + j].is_none() && m.matrix()[(i, j)].abs() >= level {
                    out[i * r + j] = Some(traj.steps[k]);
                }
            }
        }
    }
    out
}

/// Largest fall of `|m_ij|` below its running maximum after it first reaches
/// `level`; `None` if it never does.
pub fn drawdown_after_crossing(traj: &Trajectory, i: usize, j: usize, level: f64) -> Option<f64> {
    let series = traj.corr.iter().map(|m| m.matrix()[(i, j)].abs());
    let mut peak: Option<f64> = None;
    let mut worst: f64 = 0.0;
    for v in series {
        match peak {
            None if v >= level => peak = Some(v),
            None => {}
            Some(pk) => {
                worst = worst.max(pk - v);
                peak = Some(pk.max(v));
            }
        }
    }
    peak.map(|_| worst)
}
