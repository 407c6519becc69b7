//! Core domain types and the reactive-power alignment solver.
//!
//! The sensitivity model is the linear map from generator terminal voltages
//! to the pilot-point voltage (row vector `c_v`) and to per-generator
//! reactive powers (matrix `c_q`). The alignment solver inverts that map at
//! steady state: given a pilot reference it returns per-generator reactive
//! references proportional to the participation factors, `q_ref_i = c·pf_i`,
//! with a single scalar `c` shared by every participating generator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default residual bound for linear-solve self-checks.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;
/// Default threshold below which the alignment dot product counts as zero.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-12;

/// Linear sensitivity model of the zone: `v_pp = c_v · v_t`, `q = c_q · v_t`.
///
/// Invariants, enforced at construction: dimensions agree with `n`, all
/// entries finite, and `c_q` is invertible (a linear solve must succeed with
/// residual below [`DEFAULT_RESIDUAL_TOL`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct SensitivityModel {
    c_v: DVector<f64>,
    c_q: DMatrix<f64>,
    n: usize,
}

/// Serialized form: matrices as row-major nested numeric arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawModel {
    c_v: Vec<f64>,
    c_q: Vec<Vec<f64>>,
}

impl TryFrom<RawModel> for SensitivityModel {
    type Error = Error;
    fn try_from(raw: RawModel) -> Result<Self> {
        SensitivityModel::new(raw.c_v, raw.c_q)
    }
}

impl From<SensitivityModel> for RawModel {
    fn from(m: SensitivityModel) -> Self {
        let n = m.n;
        RawModel {
            c_v: m.c_v.iter().copied().collect(),
            c_q: (0..n)
                .map(|i| (0..n).map(|j| m.c_q[(i, j)]).collect())
                .collect(),
        }
    }
}

impl SensitivityModel {
    /// Builds and validates a model from row-major data.
    pub fn new(c_v: Vec<f64>, c_q: Vec<Vec<f64>>) -> Result<Self> {
        let n = c_v.len();
        if n == 0 {
            return Err(Error::validation("c_v", "must have at least one entry"));
        }
        if c_q.len() != n {
            return Err(Error::validation(
                "c_q",
                format!("dimension mismatch: {} rows for {n} generators", c_q.len()),
            ));
        }
        for (i, row) in c_q.iter().enumerate() {
            if row.len() != n {
                return Err(Error::validation(
                    "c_q",
                    format!(
                        "dimension mismatch: row {i} has {} entries, expected {n}",
                        row.len()
                    ),
                ));
            }
        }
        if !c_v.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("c_v", "entries must be finite"));
        }
        if !c_q.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::validation("c_q", "entries must be finite"));
        }
        let c_v = DVector::from_vec(c_v);
        let c_q = DMatrix::from_fn(n, n, |i, j| c_q[i][j]);
        check_invertible(&c_q, DEFAULT_RESIDUAL_TOL)?;
        Ok(SensitivityModel { c_v, c_q, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c_v(&self) -> &DVector<f64> {
        &self.c_v
    }

    pub fn c_q(&self) -> &DMatrix<f64> {
        &self.c_q
    }
}

/// Probes invertibility by solving against the all-ones right-hand side and
/// checking the back-substituted residual.
fn check_invertible(c_q: &DMatrix<f64>, tol: f64) -> Result<()> {
    let n = c_q.nrows();
    let rhs = DVector::from_element(n, 1.0);
    let lu = c_q.clone().lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularModel("LU solve failed".into()))?;
    let residual = (c_q * &x - &rhs).amax();
    let scale = 1.0_f64.max(x.amax());
    if !residual.is_finite() || residual > tol * scale {
        return Err(Error::SingularModel(format!(
            "solve residual {residual:e} exceeds {tol:e}"
        )));
    }
    Ok(())
}

/// Strictly positive per-generator weights fixing each generator's share of
/// the zone's reactive power at steady state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParticipationFactors {
    pf: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ParticipationFactors {
    type Error = Error;
    fn try_from(pf: Vec<f64>) -> Result<Self> {
        ParticipationFactors::new(pf)
    }
}

impl From<ParticipationFactors> for Vec<f64> {
    fn from(p: ParticipationFactors) -> Vec<f64> {
        p.pf
    }
}

impl ParticipationFactors {
    pub fn new(pf: Vec<f64>) -> Result<Self> {
        if pf.is_empty() {
            return Err(Error::validation("pf", "must have at least one entry"));
        }
        if !pf.iter().all(|x| x.is_finite() && *x > 0.0) {
            return Err(Error::validation("pf", "entries must be finite and > 0"));
        }
        Ok(ParticipationFactors { pf })
    }

    /// Uniform weights for `n` generators.
    pub fn uniform(n: usize) -> Result<Self> {
        ParticipationFactors::new(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.pf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pf.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.pf
    }
}

impl std::ops::Index<usize> for ParticipationFactors {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.pf[i]
    }
}

/// Which generators are electrically present and which participate in SVC.
///
/// Invariant: participation implies connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct ActiveMask {
    connected: Vec<bool>,
    svc_active: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMask {
    connected: Vec<bool>,
    svc_active: Vec<bool>,
}

impl TryFrom<RawMask> for ActiveMask {
    type Error = Error;
    fn try_from(raw: RawMask) -> Result<Self> {
        ActiveMask::new(raw.connected, raw.svc_active)
    }
}

impl From<ActiveMask> for RawMask {
    fn from(m: ActiveMask) -> Self {
        RawMask {
            connected: m.connected,
            svc_active: m.svc_active,
        }
    }
}

impl ActiveMask {
    pub fn new(connected: Vec<bool>, svc_active: Vec<bool>) -> Result<Self> {
        if connected.len() != svc_active.len() {
            return Err(Error::DimensionMismatch {
                expected: connected.len(),
                got: svc_active.len(),
            });
        }
        if connected.is_empty() {
            return Err(Error::validation("mask", "must cover at least one generator"));
        }
        for i in 0..connected.len() {
            if svc_active[i] && !connected[i] {
                return Err(Error::validation(
                    "svc_active",
                    format!("generator {i} participates in SVC but is not connected"),
                ));
            }
        }
        Ok(ActiveMask {
            connected,
            svc_active,
        })
    }

    /// All generators connected and participating.
    pub fn all_active(n: usize) -> Result<Self> {
        ActiveMask::new(vec![true; n], vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.connected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.connected.is_empty()
    }

    pub fn connected(&self) -> &[bool] {
        &self.connected
    }

    pub fn svc_active(&self) -> &[bool] {
        &self.svc_active
    }

    pub fn is_connected(&self, i: usize) -> bool {
        self.connected[i]
    }

    pub fn is_svc_active(&self, i: usize) -> bool {
        self.svc_active[i]
    }

    /// Indices of connected generators, in ascending order.
    pub fn connected_indices(&self) -> Vec<usize> {
        (0..self.connected.len())
            .filter(|&i| self.connected[i])
            .collect()
    }

    /// Returns a copy with generator `i` disconnected (and therefore out of
    /// SVC as well).
    pub fn with_disconnected(&self, i: usize) -> Result<Self> {
        self.check_index(i)?;
        let mut connected = self.connected.clone();
        let mut svc = self.svc_active.clone();
        connected[i] = false;
        svc[i] = false;
        ActiveMask::new(connected, svc)
    }

    /// Returns a copy with generator `i`'s SVC participation set to `active`.
    /// Joining requires the generator to be connected.
    pub fn with_participation(&self, i: usize, active: bool) -> Result<Self> {
        self.check_index(i)?;
        if active && !self.connected[i] {
            return Err(Error::validation(
                "svc_active",
                format!("generator {i} cannot join SVC while disconnected"),
            ));
        }
        let mut svc = self.svc_active.clone();
        svc[i] = active;
        ActiveMask::new(self.connected.clone(), svc)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.connected.len() {
            return Err(Error::DimensionMismatch {
                expected: self.connected.len(),
                got: i,
            });
        }
        Ok(())
    }
}

/// Output of the alignment solver: full-length reference vector plus the
/// shared alignment constant. Non-participating generators carry exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSolution {
    pub q_ref: Vec<f64>,
    pub c: f64,
}

/// Tolerances for the alignment solver's self-checks.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentTolerances {
    /// Bound on the back-substituted residual of the steady-state equation.
    pub residual: f64,
    /// Threshold below which |s·pf| counts as zero.
    pub degeneracy: f64,
}

impl Default for AlignmentTolerances {
    fn default() -> Self {
        AlignmentTolerances {
            residual: DEFAULT_RESIDUAL_TOL,
            degeneracy: DEFAULT_DEGENERACY_TOL,
        }
    }
}

/// Solves the steady-state alignment system with default tolerances.
///
/// See [`solve_alignment_with`].
pub fn solve_alignment(
    model: &SensitivityModel,
    pf: &ParticipationFactors,
    v_pp_ref: f64,
    mask: &ActiveMask,
) -> Result<AlignmentSolution> {
    solve_alignment_with(model, pf, v_pp_ref, mask, AlignmentTolerances::default())
}

/// Solves the steady-state alignment system.
///
/// Closed form: with `s = c_v_reduced · c_q_reduced⁻¹` over connected
/// generators, the constant is `c = v_pp_ref / Σ_active s_i·pf_i` and
/// `q_ref_i = c·pf_i` on participating generators, 0 elsewhere. The
/// returned pair is verified to reproduce `v_pp_ref` through an independent
/// back-substitution within `tol.residual`.
pub fn solve_alignment_with(
    model: &SensitivityModel,
    pf: &ParticipationFactors,
    v_pp_ref: f64,
    mask: &ActiveMask,
    tol: AlignmentTolerances,
) -> Result<AlignmentSolution> {
    let n = model.n();
    if pf.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: pf.len(),
        });
    }
    if mask.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: mask.len(),
        });
    }
    if !v_pp_ref.is_finite() {
        return Err(Error::NonFiniteInput(v_pp_ref));
    }
    let idx = mask.connected_indices();
    if !mask.svc_active().iter().any(|&a| a) {
        return Err(Error::NoActiveGenerator);
    }

    let m = idx.len();
    let c_q_red = DMatrix::from_fn(m, m, |r, c| model.c_q()[(idx[r], idx[c])]);
    let c_v_red = DVector::from_fn(m, |r, _| model.c_v()[idx[r]]);

    // s solves s·c_q_red = c_v_red, i.e. c_q_redᵀ·sᵀ = c_vᵀ.
    let s = c_q_red
        .transpose()
        .lu()
        .solve(&c_v_red)
        .ok_or_else(|| Error::SingularModel("reduced c_q is not invertible".into()))?;

    let mut s_dot_pf = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        if mask.is_svc_active(i) {
            s_dot_pf += s[r] * pf[i];
        }
    }
    if !s_dot_pf.is_finite() || s_dot_pf.abs() <= tol.degeneracy {
        return Err(Error::DegenerateAlignment(s_dot_pf));
    }

    let c = v_pp_ref / s_dot_pf;
    let mut q_ref = vec![0.0; n];
    for i in 0..n {
        if mask.is_svc_active(i) {
            q_ref[i] = c * pf[i];
        }
    }

    // Independent self-check: solve c_q_red·y = q_ref_red and back-substitute
    // into c_v_red. This exercises the factorization in the other direction.
    let q_red = DVector::from_fn(m, |r, _| q_ref[idx[r]]);
    let y = c_q_red
        .clone()
        .lu()
        .solve(&q_red)
        .ok_or_else(|| Error::SingularModel("reduced c_q is not invertible".into()))?;
    let residual = (v_pp_ref - c_v_red.dot(&y)).abs();
    if residual > tol.residual * 1.0_f64.max(v_pp_ref.abs()) {
        return Err(Error::SingularModel(format!(
            "alignment residual {residual:e} exceeds {:e}",
            tol.residual
        )));
    }

    Ok(AlignmentSolution { q_ref, c })
}

/// Deletes rows/columns of disconnected generators from the model.
pub fn reduce_model(model: &SensitivityModel, mask: &ActiveMask) -> Result<SensitivityModel> {
    if mask.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: mask.len(),
        });
    }
    let idx = mask.connected_indices();
    if idx.is_empty() {
        return Err(Error::NoActiveGenerator);
    }
    let c_v = idx.iter().map(|&i| model.c_v()[i]).collect();
    let c_q = idx
        .iter()
        .map(|&i| idx.iter().map(|&j| model.c_q()[(i, j)]).collect())
        .collect();
    SensitivityModel::new(c_v, c_q)
}
