//! Pass/fail evaluation of a desk-case run against the pinned performance
//! envelope. Tolerances live here, in code, so a regression shows up as a
//! failing criterion and not as a silently drifting report.

use super::cases::CaseId;
use super::metrics::{recovery_time, settling_time, RECOVERY_TOL, SETTLING_BAND};
use super::RunResult;
use crate::error::Result;

/// Reference steps must enter the 2% band within this many seconds.
pub const STEP_SETTLE_LIMIT: f64 = 200.0;
/// Disturbances and topology events must be rejected within this many
/// seconds, to 1e-3 pu.
pub const RECOVERY_LIMIT: f64 = 250.0;
/// Final tracking error and alignment spread ceiling.
pub const FINAL_TOL: f64 = 1e-3;
/// A run is declared divergent when the pilot voltage leaves this band
/// around its reference at any instant.
pub const STABILITY_ENVELOPE: f64 = 0.5;
/// Largest admissible pilot-voltage dip when a generator joins mid-run.
pub const JOIN_DIP_LIMIT: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CriterionOutcome {
    CriterionOutcome {
        name,
        passed,
        detail,
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.3} s"),
        None => "never".to_string(),
    }
}

/// Settling time of the suffix t ≥ from, as an offset from `from`.
fn settle_after(t: &[f64], y: &[f64], from: f64, reference: f64) -> Result<Option<f64>> {
    let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= from).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let ts: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    Ok(settling_time(&ts, &ys, reference, SETTLING_BAND)?.map(|abs| abs - from))
}

struct Series {
    t: Vec<f64>,
    v_pp: Vec<f64>,
    refs: Vec<f64>,
}

fn series(result: &RunResult) -> Result<Series> {
    Ok(Series {
        t: result.column("t")?,
        v_pp: result.column("v_pp")?,
        refs: result.column("v_pp_ref")?,
    })
}

fn spread_criterion(result: &RunResult, out: &mut Vec<CriterionOutcome>) {
    let spread = result.metrics.final_alignment_spread;
    out.push(outcome(
        "final reactive ratios agree to 1e-3",
        spread.map_or(false, |s| s < FINAL_TOL),
        match spread {
            Some(s) => format!("spread {s:.3e}"),
            None => "no participating generator".to_string(),
        },
    ));
}

fn bounded_criterion(s: &Series, out: &mut Vec<CriterionOutcome>) {
    let mut worst = 0.0f64;
    let mut finite = true;
    for (v, r) in s.v_pp.iter().zip(&s.refs) {
        if !v.is_finite() {
            finite = false;
            break;
        }
        worst = worst.max((v - r).abs());
    }
    out.push(outcome(
        "pilot voltage stays bounded for the whole run",
        finite && worst < STABILITY_ENVELOPE,
        if finite {
            format!("max |v_pp - ref| {worst:.4} pu")
        } else {
            "non-finite sample".to_string()
        },
    ));
}

fn case1(result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    let s = series(result)?;
    let mut out = Vec::new();
    let settle = settle_after(&s.t, &s.v_pp, 500.0, 1.0)?;
    out.push(outcome(
        "step settles into the 2% band within 200 s",
        settle.map_or(false, |x| x <= STEP_SETTLE_LIMIT),
        format!("settled {}", fmt_opt(settle)),
    ));
    let err = result.metrics.final_v_pp_error;
    out.push(outcome(
        "final tracking error below 1e-3",
        err < FINAL_TOL,
        format!("error {err:.3e}"),
    ));
    spread_criterion(result, &mut out);
    Ok(out)
}

fn case2(result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    let s = series(result)?;
    let mut out = Vec::new();
    let settle = settle_after(&s.t, &s.v_pp, 280.0, 1.0)?;
    out.push(outcome(
        "delayed step settles into the 2% band within 200 s",
        settle.map_or(false, |x| x <= STEP_SETTLE_LIMIT),
        format!("settled {}", fmt_opt(settle)),
    ));
    bounded_criterion(&s, &mut out);
    Ok(out)
}

fn case3(result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    let s = series(result)?;
    let mut out = Vec::new();
    let rec = recovery_time(&s.t, &s.v_pp, 0.98, RECOVERY_TOL, 500.0, f64::INFINITY)?;
    out.push(outcome(
        "load disturbance rejected to 1e-3 within 250 s",
        rec.map_or(false, |x| x <= RECOVERY_LIMIT),
        format!("recovered {}", fmt_opt(rec)),
    ));
    spread_criterion(result, &mut out);
    Ok(out)
}

fn case4(result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    let s = series(result)?;
    let mut out = Vec::new();
    let first = recovery_time(&s.t, &s.v_pp, 0.98, RECOVERY_TOL, 500.0, 650.0)?;
    out.push(outcome(
        "coupling perturbation rejected within 250 s",
        first.map_or(false, |x| x <= RECOVERY_LIMIT),
        format!("recovered {}", fmt_opt(first)),
    ));
    let second = recovery_time(&s.t, &s.v_pp, 0.98, RECOVERY_TOL, 650.0, f64::INFINITY)?;
    out.push(outcome(
        "coupling restoration rejected within 250 s",
        second.map_or(false, |x| x <= RECOVERY_LIMIT),
        format!("recovered {}", fmt_opt(second)),
    ));
    Ok(out)
}

fn case5(result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    let s = series(result)?;
    let mut out = Vec::new();
    let rec = recovery_time(&s.t, &s.v_pp, 0.98, RECOVERY_TOL, 350.0, f64::INFINITY)?;
    out.push(outcome(
        "generator loss rejected to 1e-3 within 250 s",
        rec.map_or(false, |x| x <= RECOVERY_LIMIT),
        format!("recovered {}", fmt_opt(rec)),
    ));
    spread_criterion(result, &mut out);
    Ok(out)
}

fn case6(result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    let s = series(result)?;
    let mut out = Vec::new();
    let mut dip = 0.0f64;
    for (i, &tt) in s.t.iter().enumerate() {
        if tt >= 500.0 {
            dip = dip.max(1.0 - s.v_pp[i]);
        }
    }
    out.push(outcome(
        "pilot dip after the join stays below 0.005 pu",
        dip < JOIN_DIP_LIMIT,
        format!("max dip {dip:.5} pu"),
    ));

    // The joining unit must take load off the incumbents: strictly lower
    // final reactive power than just before the join for each of them.
    let q_idx = result.column_index("q_1")?;
    let svc_idx = result.column_index("svc_active_1")?;
    let pre_row = (0..s.t.len()).rev().find(|&i| s.t[i] < 500.0);
    let last = result.last_row()?;
    let mut relieved = true;
    let mut detail = String::new();
    match pre_row {
        None => {
            relieved = false;
            detail = "no pre-join row".to_string();
        }
        Some(p) => {
            let pre = &result.rows[p];
            for g in 0..result.n_generators {
                if pre[svc_idx + g] == 0.0 {
                    continue;
                }
                let before = pre[q_idx + g];
                let after = last[q_idx + g];
                if !(after < before) {
                    relieved = false;
                }
                detail.push_str(&format!("q_{} {before:.4}->{after:.4} ", g + 1));
            }
        }
    }
    out.push(outcome(
        "incumbent reactive outputs end strictly below their pre-join values",
        relieved,
        detail.trim_end().to_string(),
    ));
    Ok(out)
}

/// Evaluates a finished desk-case run. Returns one outcome per criterion;
/// the caller decides how to render and whether to fail the process.
pub fn evaluate_case(id: CaseId, result: &RunResult) -> Result<Vec<CriterionOutcome>> {
    match id {
        CaseId::Case1 => case1(result),
        CaseId::Case2 => case2(result),
        CaseId::Case3 => case3(result),
        CaseId::Case4 => case4(result),
        CaseId::Case5 => case5(result),
        CaseId::Case6 => case6(result),
    }
}
