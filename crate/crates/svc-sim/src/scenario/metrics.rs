//! Post-run summary metrics: settling, recovery, alignment spread and
//! overshoot, plus reconstruction of reference/topology events from a bare
//! time series when the originating scenario is not at hand.

use serde::{Deserialize, Serialize};

use super::{EventKind, RunResult, TimedEvent};
use crate::error::{Error, Result};
use crate::model::{ActiveMask, ParticipationFactors};

/// Settling band as a fraction of the reference.
pub const SETTLING_BAND: f64 = 0.02;
/// Absolute recovery tolerance in pu for per-event recovery times.
pub const RECOVERY_TOL: f64 = 1e-3;

/// Summary written to `metrics.json`. `None` serializes as `null` and means
/// "not settled / not recovered within the run".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub final_v_pp_error: f64,
    pub final_alignment_spread: Option<f64>,
    /// Earliest instant after which v_pp stays within 2% of the final
    /// reference, in absolute run time.
    pub v_pp_settling_time_2pct: Option<f64>,
    pub max_overshoot: f64,
    pub events: Vec<EventMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMetric {
    pub at: f64,
    pub kind: String,
    /// Seconds from the event until v_pp stays within 1e-3 pu of the
    /// reference for the rest of the event's window (up to the next event).
    pub recovery_time_1e3: Option<f64>,
}

/// Earliest t* such that |y − reference| ≤ band·|reference| for every
/// sample at t ≥ t*; `None` when even the final sample violates the band.
pub fn settling_time(t: &[f64], y: &[f64], reference: f64, band: f64) -> Result<Option<f64>> {
    if t.is_empty() || y.is_empty() {
        return Err(Error::EmptySeries);
    }
    if t.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: y.len(),
        });
    }
    if !(band.is_finite() && band > 0.0) {
        return Err(Error::validation("band", "must be finite and > 0"));
    }
    if !reference.is_finite() {
        return Err(Error::NonFiniteInput(reference));
    }
    let tol = band * reference.abs();
    let mut last_violation = None;
    for (i, &v) in y.iter().enumerate() {
        if !((v - reference).abs() <= tol) {
            last_violation = Some(i);
        }
    }
    Ok(match last_violation {
        None => Some(t[0]),
        Some(i) if i + 1 == t.len() => None,
        Some(i) => Some(t[i + 1]),
    })
}

/// Seconds from `from` until y stays within `tol` of `reference` for every
/// remaining sample in [from, until). `None` when the window is empty or the
/// last windowed sample still violates.
pub fn recovery_time(
    t: &[f64],
    y: &[f64],
    reference: f64,
    tol: f64,
    from: f64,
    until: f64,
) -> Result<Option<f64>> {
    if t.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: y.len(),
        });
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::validation("tol", "must be finite and > 0"));
    }
    if !reference.is_finite() {
        return Err(Error::NonFiniteInput(reference));
    }
    let window: Vec<usize> = (0..t.len())
        .filter(|&i| t[i] >= from && t[i] < until)
        .collect();
    if window.is_empty() {
        return Ok(None);
    }
    let mut last_violation = None;
    for (pos, &i) in window.iter().enumerate() {
        if !((y[i] - reference).abs() <= tol) {
            last_violation = Some(pos);
        }
    }
    Ok(match last_violation {
        None => Some(t[window[0]] - from),
        Some(p) if p + 1 == window.len() => None,
        Some(p) => Some(t[window[p + 1]] - from),
    })
}

/// max(q_i/pf_i) − min(q_i/pf_i) over SVC-participating generators.
pub fn alignment_spread(
    q: &[f64],
    pf: &ParticipationFactors,
    mask: &ActiveMask,
) -> Result<f64> {
    if q.len() != pf.len() {
        return Err(Error::DimensionMismatch {
            expected: pf.len(),
            got: q.len(),
        });
    }
    if mask.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            got: mask.len(),
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for i in 0..q.len() {
        if mask.is_svc_active(i) {
            let ratio = q[i] / pf[i];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
            any = true;
        }
    }
    if !any {
        return Err(Error::NoActiveGenerator);
    }
    Ok(hi - lo)
}

/// Largest excursion of y above its instantaneous reference; 0 when y never
/// exceeds it.
pub fn max_overshoot(y: &[f64], reference: &[f64]) -> f64 {
    y.iter()
        .zip(reference)
        .fold(0.0, |acc, (&v, &r)| acc.max(v - r))
}

/// Reconstructs reference and topology events from the logged series by
/// change-point detection. Load disturbances and model swaps leave no
/// columns behind and are not recoverable; with row decimation the detected
/// time is the first logged row showing the change.
pub fn detect_events(result: &RunResult) -> Result<Vec<TimedEvent>> {
    let t = result.column("t")?;
    let refs = result.column("v_pp_ref")?;
    let n = result.n_generators;
    let conn_idx = result.column_index("connected_1")?;
    let svc_idx = result.column_index("svc_active_1")?;
    let mut events = Vec::new();
    for r in 1..result.rows.len() {
        let prev = &result.rows[r - 1];
        let cur = &result.rows[r];
        if refs[r] != refs[r - 1] {
            events.push(TimedEvent::new(
                t[r],
                EventKind::SetpointStep { v_pp_ref: refs[r] },
            ));
        }
        for g in 0..n {
            let was_connected = prev[conn_idx + g] != 0.0;
            let is_connected = cur[conn_idx + g] != 0.0;
            let was_active = prev[svc_idx + g] != 0.0;
            let is_active = cur[svc_idx + g] != 0.0;
            if was_connected && !is_connected {
                events.push(TimedEvent::new(t[r], EventKind::Disconnect { gen: g }));
            } else if !was_active && is_active {
                events.push(TimedEvent::new(t[r], EventKind::JoinSvc { gen: g }));
            } else if was_active && !is_active {
                events.push(TimedEvent::new(t[r], EventKind::LeaveSvc { gen: g }));
            }
        }
    }
    Ok(events)
}

/// Builds the run summary. `events` drive the per-event recovery windows
/// (each window ends at the next distinct event time); `pf` is needed
/// because participation factors are not part of the logged series.
pub fn compute_metrics(
    result: &RunResult,
    events: &[TimedEvent],
    pf: &[f64],
) -> Result<Metrics> {
    let t = result.column("t")?;
    let v_pp = result.column("v_pp")?;
    let refs = result.column("v_pp_ref")?;
    if t.is_empty() {
        return Err(Error::EmptySeries);
    }
    if pf.len() != result.n_generators {
        return Err(Error::DimensionMismatch {
            expected: result.n_generators,
            got: pf.len(),
        });
    }
    let final_ref = *refs.last().unwrap();
    let final_v_pp_error = (v_pp.last().unwrap() - final_ref).abs();
    let final_alignment_spread = final_spread(result, pf)?;
    let v_pp_settling_time_2pct = settling_time(&t, &v_pp, final_ref, SETTLING_BAND)?;
    let max_overshoot = max_overshoot(&v_pp, &refs);

    let mut ordered: Vec<&TimedEvent> = events.iter().collect();
    ordered.sort_by(|a, b| a.at.total_cmp(&b.at));
    let mut event_metrics = Vec::with_capacity(ordered.len());
    for (i, ev) in ordered.iter().enumerate() {
        let until = ordered[i + 1..]
            .iter()
            .map(|e| e.at)
            .find(|&a| a > ev.at)
            .unwrap_or(f64::INFINITY);
        let window_rows: Vec<usize> = (0..t.len())
            .filter(|&r| t[r] >= ev.at && t[r] < until)
            .collect();
        let recovery_time_1e3 = match window_rows.last() {
            None => None,
            Some(&last) => recovery_time(&t, &v_pp, refs[last], RECOVERY_TOL, ev.at, until)?,
        };
        event_metrics.push(EventMetric {
            at: ev.at,
            kind: ev.kind.name().to_string(),
            recovery_time_1e3,
        });
    }

    Ok(Metrics {
        final_v_pp_error,
        final_alignment_spread,
        v_pp_settling_time_2pct,
        max_overshoot,
        events: event_metrics,
    })
}

/// Alignment spread at the final row; `None` when no generator participates.
fn final_spread(result: &RunResult, pf: &[f64]) -> Result<Option<f64>> {
    let row = result.last_row()?;
    let n = result.n_generators;
    let q_idx = result.column_index("q_1")?;
    let conn_idx = result.column_index("connected_1")?;
    let svc_idx = result.column_index("svc_active_1")?;
    let q: Vec<f64> = (0..n).map(|i| row[q_idx + i]).collect();
    let connected: Vec<bool> = (0..n).map(|i| row[conn_idx + i] != 0.0).collect();
    let svc: Vec<bool> = (0..n).map(|i| row[svc_idx + i] != 0.0).collect();
    let mask = ActiveMask::new(connected, svc)?;
    let pf = ParticipationFactors::new(pf.to_vec())?;
    match alignment_spread(&q, &pf, &mask) {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoActiveGenerator) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::column_names;
    use approx::assert_abs_diff_eq;

    #[test]
    fn already_settled_series_settles_at_the_first_sample() {
        let t = vec![0.0, 1.0, 2.0];
        let y = vec![1.0, 1.0, 1.0];
        assert_eq!(settling_time(&t, &y, 1.0, 0.02).unwrap(), Some(0.0));
    }

    #[test]
    fn exponential_decay_settles_at_the_analytic_instant() {
        let reference = 1.0;
        let delta = 0.5;
        let tau = 30.0;
        let dt = 0.5;
        let samples = 801;
        let t: Vec<f64> = (0..samples).map(|k| k as f64 * dt).collect();
        let y: Vec<f64> = t.iter().map(|&x| reference + delta * (-x / tau).exp()).collect();
        let expected = tau * (delta / (0.02 * reference)).ln();
        let measured = settling_time(&t, &y, reference, 0.02).unwrap().unwrap();
        assert!(
            (measured - expected).abs() <= dt + 1e-9,
            "measured {measured}, expected {expected}"
        );
    }

    #[test]
    fn diverging_series_reports_not_settled() {
        let t: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let y: Vec<f64> = t.iter().map(|&x| 1.0 + 0.1 * x).collect();
        assert_eq!(settling_time(&t, &y, 1.0, 0.02).unwrap(), None);
    }

    #[test]
    fn settling_time_validates_inputs() {
        assert!(matches!(
            settling_time(&[], &[], 1.0, 0.02),
            Err(Error::EmptySeries)
        ));
        assert!(settling_time(&[0.0], &[1.0], 1.0, 0.0).is_err());
        assert!(settling_time(&[0.0], &[1.0], f64::NAN, 0.02).is_err());
        assert!(settling_time(&[0.0, 1.0], &[1.0], 1.0, 0.02).is_err());
    }

    #[test]
    fn recovery_ignores_samples_outside_the_window() {
        let t: Vec<f64> = (0..11).map(|k| k as f64).collect();
        //              0    1    2    3     4     5    6    7    8    9    10
        let y = vec![1.0, 1.0, 1.0, 1.3, 1.2, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0];
        // Window [3, 9): the excursion ends at t = 5; later garbage excluded.
        let r = recovery_time(&t, &y, 1.0, 1e-3, 3.0, 9.0).unwrap();
        assert_eq!(r, Some(2.0));
        // Whole tail: the series never recovers.
        assert_eq!(
            recovery_time(&t, &y, 1.0, 1e-3, 3.0, f64::INFINITY).unwrap(),
            None
        );
        // Quiet window: recovered immediately.
        assert_eq!(recovery_time(&t, &y, 1.0, 1e-3, 5.0, 9.0).unwrap(), Some(0.0));
        // Empty window.
        assert_eq!(recovery_time(&t, &y, 1.0, 1e-3, 50.0, 60.0).unwrap(), None);
    }

    #[test]
    fn perfectly_aligned_ratios_have_zero_spread() {
        let pf = ParticipationFactors::new(vec![1.0, 2.0, 4.0]).unwrap();
        let q = vec![0.7, 1.4, 2.8];
        let mask = ActiveMask::all_active(3).unwrap();
        assert_abs_diff_eq!(
            alignment_spread(&q, &pf, &mask).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn spread_is_the_ratio_range() {
        let pf = ParticipationFactors::new(vec![1.0, 1.0]).unwrap();
        let mask = ActiveMask::all_active(2).unwrap();
        assert_abs_diff_eq!(
            alignment_spread(&[1.0, 2.0], &pf, &mask).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn spread_skips_non_participating_generators() {
        let pf = ParticipationFactors::new(vec![1.0, 1.0, 1.0]).unwrap();
        let mask = ActiveMask::new(vec![true, true, true], vec![true, false, true]).unwrap();
        // The wild middle value is not participating.
        assert_abs_diff_eq!(
            alignment_spread(&[1.0, 50.0, 1.0], &pf, &mask).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let none = ActiveMask::new(vec![true; 3], vec![false; 3]).unwrap();
        assert!(matches!(
            alignment_spread(&[1.0, 1.0, 1.0], &pf, &none),
            Err(Error::NoActiveGenerator)
        ));
    }

    #[test]
    fn overshoot_is_zero_from_below_and_positive_above() {
        assert_eq!(max_overshoot(&[0.9, 0.95], &[1.0, 1.0]), 0.0);
        assert_abs_diff_eq!(
            max_overshoot(&[0.9, 1.07, 1.01], &[1.0, 1.0, 1.0]),
            0.07,
            epsilon = 1e-15
        );
    }

    /// Builds a two-generator result row: scalars plus per-generator groups.
    fn row(t: f64, v_ref: f64, connected: [f64; 2], svc: [f64; 2]) -> Vec<f64> {
        let mut r = vec![t, v_ref, v_ref, v_ref, 0.0];
        r.extend([1.0, 1.0]); // v_t
        r.extend([1.0, 1.0]); // v_set
        r.extend([0.5, 0.5]); // q
        r.extend([0.5, 0.5]); // q_ref
        r.extend([0.5, 0.5]); // q_ref_prime
        r.extend([0.0, 0.0]); // u1
        r.extend(connected);
        r.extend(svc);
        r
    }

    #[test]
    fn change_points_reconstruct_reference_and_membership_events() {
        let result = RunResult {
            columns: column_names(2),
            rows: vec![
                row(0.0, 0.98, [1.0, 1.0], [1.0, 1.0]),
                row(1.0, 1.00, [1.0, 1.0], [1.0, 1.0]),
                row(2.0, 1.00, [1.0, 0.0], [1.0, 0.0]),
                row(3.0, 1.00, [1.0, 0.0], [1.0, 0.0]),
            ],
            n_generators: 2,
            inner_firings: 0,
            outer_firings: 0,
            metrics: Metrics::default(),
        };
        let events = detect_events(&result).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(
            events[0],
            TimedEvent::new(1.0, EventKind::SetpointStep { v_pp_ref: 1.0 })
        );
        assert_eq!(events[1], TimedEvent::new(2.0, EventKind::Disconnect { gen: 1 }));
    }

    #[test]
    fn metrics_windows_end_at_the_next_event() {
        let mut rows = Vec::new();
        for k in 0..=40 {
            let t = k as f64;
            let v_ref = if t < 10.0 { 0.98 } else { 1.0 };
            let mut r = row(t, v_ref, [1.0, 1.0], [1.0, 1.0]);
            // v_pp: tracks, with an excursion for 3 samples after each event.
            let since = if t < 10.0 {
                t
            } else if t < 20.0 {
                t - 10.0
            } else {
                t - 20.0
            };
            r[2] = if since < 3.0 { v_ref - 0.05 } else { v_ref };
            rows.push(r);
        }
        let result = RunResult {
            columns: column_names(2),
            rows,
            n_generators: 2,
            inner_firings: 0,
            outer_firings: 0,
            metrics: Metrics::default(),
        };
        let events = vec![
            TimedEvent::new(10.0, EventKind::SetpointStep { v_pp_ref: 1.0 }),
            TimedEvent::new(
                20.0,
                EventKind::LoadDisturbance {
                    d_v: -0.005,
                    d_q: None,
                },
            ),
        ];
        let metrics = compute_metrics(&result, &events, &[1.0, 1.0]).unwrap();
        assert_eq!(metrics.events.len(), 2);
        assert_eq!(metrics.events[0].kind, "setpoint_step");
        assert_eq!(metrics.events[0].recovery_time_1e3, Some(3.0));
        assert_eq!(metrics.events[1].recovery_time_1e3, Some(3.0));
        assert_eq!(metrics.final_v_pp_error, 0.0);
        assert_eq!(metrics.final_alignment_spread, Some(0.0));
    }
}
