//! Decentralised SVC control layer.
//!
//! Both loop levels run the same discrete-time intelligent proportional
//! (DTiP) law on an ultra-local model `ẏ = F + α·u`: estimate the lumped
//! disturbance F from the measured derivative and a delayed control input,
//! then cancel it while pushing the tracking error down proportionally.
//! Inner agents regulate per-generator reactive power; the outer controller
//! regulates the pilot-point voltage and its output shifts every inner
//! reference by a common offset.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::estimation::{estimate_f, Differentiator, DifferentiatorConfig, UltraLocalEstimate};

/// Gains of one DTiP loop.
///
/// `h_d` is the age, in controller periods, of the stored control input used
/// by the disturbance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtipGains {
    pub alpha: f64,
    pub k_p: f64,
    pub h_d: usize,
}

impl DtipGains {
    pub fn new(alpha: f64, k_p: f64, h_d: usize) -> Result<Self> {
        if !alpha.is_finite() || alpha == 0.0 {
            return Err(Error::validation("alpha", "must be finite and non-zero"));
        }
        if !k_p.is_finite() || k_p <= 0.0 {
            return Err(Error::validation("k_p", "must be finite and > 0"));
        }
        if h_d < 1 {
            return Err(Error::validation("h_d", "must be at least 1"));
        }
        Ok(DtipGains { alpha, k_p, h_d })
    }
}

/// The DTiP control law: `u = −(f_bar − y_ref_dot + k_p·e)/alpha`.
pub fn dtip_law(f_bar: f64, y_ref_dot: f64, e: f64, gains: &DtipGains) -> Result<f64> {
    for v in [f_bar, y_ref_dot, e] {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(v));
        }
    }
    Ok(-(f_bar - y_ref_dot + gains.k_p * e) / gains.alpha)
}

/// Shifts one generator's steady-state reactive reference by the outer
/// loop's correction; the same scalar is added to every generator.
pub fn compose_reference(q_ref: f64, u2: f64) -> f64 {
    q_ref + u2
}

/// Shared state machine of one DTiP loop instance.
///
/// Emits 0 during differentiator warm-up. The control history has length
/// exactly `h_d` at all times, seeded with zeros, so the disturbance
/// estimate is always defined.
#[derive(Debug, Clone)]
struct DtipCore {
    gains: DtipGains,
    differentiator: Differentiator,
    u_history: VecDeque<f64>,
    period: f64,
    u_min: f64,
    u_max: f64,
}

impl DtipCore {
    fn new(
        gains: DtipGains,
        diff_config: DifferentiatorConfig,
        period: f64,
        limits: (f64, f64),
    ) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::validation("period", "must be finite and > 0"));
        }
        let (u_min, u_max) = limits;
        if u_min.is_nan() || u_max.is_nan() || u_min >= u_max {
            return Err(Error::validation("limits", "require u_min < u_max"));
        }
        // The derivative window must stay short against the closed-loop
        // time constant 1/k_p, or the estimate lags the loop it serves.
        let window = diff_config.window_duration();
        if window > 1.0 / gains.k_p + 1e-12 {
            return Err(Error::validation(
                "n_ndf/t_ndf",
                format!(
                    "differentiator window {window} s exceeds the closed-loop time constant {} s",
                    1.0 / gains.k_p
                ),
            ));
        }
        Ok(DtipCore {
            gains,
            differentiator: Differentiator::new(diff_config),
            u_history: VecDeque::from(vec![0.0; gains.h_d]),
            period,
            u_min,
            u_max,
        })
    }

    fn step(&mut self, y: f64, y_ref: f64) -> Result<f64> {
        if !y_ref.is_finite() {
            return Err(Error::NonFiniteInput(y_ref));
        }
        let u = match self.differentiator.push_and_differentiate(y) {
            Ok(y_dot) => {
                let u_delayed = *self.u_history.front().expect("history is never empty");
                let f_bar = estimate_f(y_dot, self.gains.alpha, u_delayed)?;
                let est = UltraLocalEstimate::new(f_bar, y_dot)?;
                // References are piecewise-constant between events, so the
                // reference derivative is 0.
                let raw = dtip_law(est.f_bar, 0.0, y - y_ref, &self.gains)?;
                raw.clamp(self.u_min, self.u_max)
            }
            Err(Error::NotReady) => 0.0,
            Err(e) => return Err(e),
        };
        self.u_history.pop_front();
        self.u_history.push_back(u);
        Ok(u)
    }

    fn reset(&mut self) {
        self.differentiator.reset();
        for u in self.u_history.iter_mut() {
            *u = 0.0;
        }
    }

    fn rebase(&mut self, delta: f64) -> Result<()> {
        if !delta.is_finite() {
            return Err(Error::NonFiniteInput(delta));
        }
        for u in self.u_history.iter_mut() {
            *u += delta;
        }
        Ok(())
    }
}

/// Per-generator reactive-power loop (the inner, faster loop).
///
/// Emits `u1 = 0` while disabled or during warm-up. Disabled steps do not
/// touch any internal state.
#[derive(Debug, Clone)]
pub struct InnerAgent {
    core: DtipCore,
    enabled: bool,
}

impl InnerAgent {
    /// `u_limits` clamp the emitted setpoint correction so the AVR setpoint
    /// stays inside the generator's allowed band.
    pub fn new(
        gains: DtipGains,
        diff_config: DifferentiatorConfig,
        period: f64,
        u_limits: (f64, f64),
    ) -> Result<Self> {
        Ok(InnerAgent {
            core: DtipCore::new(gains, diff_config, period, u_limits)?,
            enabled: true,
        })
    }

    pub fn period(&self) -> f64 {
        self.core.period
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// One controller period: push the measurement, estimate F from the
    /// control stored `h_d` periods ago, and emit the clamped DTiP output.
    pub fn inner_step(&mut self, q_meas: f64, q_ref_prime: f64) -> Result<f64> {
        if !self.enabled {
            return Ok(0.0);
        }
        self.core.step(q_meas, q_ref_prime)
    }

    /// Gates SVC participation. Turning an agent off zeroes its output and
    /// resets differentiator and history; re-enabling re-enters warm-up, so
    /// the agent behaves exactly like a freshly constructed one.
    pub fn gate_participation(&mut self, active: bool) {
        if active == self.enabled {
            return;
        }
        if !active {
            self.core.reset();
        }
        self.enabled = active;
    }
}

/// Pilot-point voltage loop (the outer, slower loop).
///
/// Constructor-enforced time decoupling: the outer period must be 5 to 10
/// times the inner period.
#[derive(Debug, Clone)]
pub struct OuterController {
    core: DtipCore,
    period_inner: f64,
}

impl OuterController {
    pub fn new(
        gains: DtipGains,
        diff_config: DifferentiatorConfig,
        period_outer: f64,
        period_inner: f64,
    ) -> Result<Self> {
        if !(period_inner.is_finite() && period_inner > 0.0) {
            return Err(Error::validation("period_inner", "must be finite and > 0"));
        }
        let ratio = period_outer / period_inner;
        if !(5.0 - 1e-9..=10.0 + 1e-9).contains(&ratio) {
            return Err(Error::validation(
                "period_outer",
                format!("outer/inner period ratio {ratio} must lie in [5, 10]"),
            ));
        }
        Ok(OuterController {
            core: DtipCore::new(
                gains,
                diff_config,
                period_outer,
                (f64::NEG_INFINITY, f64::INFINITY),
            )?,
            period_inner,
        })
    }

    pub fn period(&self) -> f64 {
        self.core.period
    }

    pub fn period_inner(&self) -> f64 {
        self.period_inner
    }

    /// One outer period: same law as the inner loop, driven by the
    /// (possibly delayed) pilot-point measurement.
    pub fn outer_step(&mut self, v_pp_meas_delayed: f64, v_pp_ref: f64) -> Result<f64> {
        self.core.step(v_pp_meas_delayed, v_pp_ref)
    }

    /// Shifts the stored control history by `delta`.
    ///
    /// Bumpless transfer for commanded SVC membership changes: when the
    /// participation set changes, the alignment constant jumps from c_old to
    /// c_new while the plant hasn't moved; shifting the outer state by
    /// (c_old − c_new) keeps every composed reference continuous instead of
    /// slewing the pilot voltage through a large transient.
    pub fn rebase(&mut self, delta: f64) -> Result<()> {
        self.core.rebase(delta)
    }
}

/// Timestamped pilot-voltage samples with a configurable read-back delay.
///
/// `read(t)` returns the nearest-earlier sample at `t − delay`; before
/// enough history exists it returns the oldest sample.
#[derive(Debug, Clone)]
pub struct DelayBuffer {
    delay: f64,
    queue: VecDeque<(f64, f64)>,
}

impl DelayBuffer {
    pub fn new(delay: f64) -> Result<Self> {
        check_delay(delay)?;
        Ok(DelayBuffer {
            delay,
            queue: VecDeque::new(),
        })
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn set_delay(&mut self, delay: f64) -> Result<()> {
        check_delay(delay)?;
        self.delay = delay;
        Ok(())
    }

    /// Appends a sample; timestamps must be non-decreasing.
    pub fn push(&mut self, t: f64, v_pp: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFiniteInput(t));
        }
        if !v_pp.is_finite() {
            return Err(Error::NonFiniteSample(v_pp));
        }
        if let Some(&(last, _)) = self.queue.back() {
            if t < last {
                return Err(Error::validation(
                    "t",
                    format!("timestamps must be non-decreasing, got {t} after {last}"),
                ));
            }
        }
        self.queue.push_back((t, v_pp));
        // Keep exactly one sample at or before the current read target so
        // nearest-earlier reads stay answerable as time advances.
        let target = t - self.delay;
        while self.queue.len() > 1 && self.queue[1].0 <= target {
            self.queue.pop_front();
        }
        Ok(())
    }

    /// Nearest-earlier sample at `t − delay`; oldest retained sample when
    /// the requested time predates the recorded history. `None` only before
    /// any push. Read times must not decrease: each push discards samples
    /// strictly older than its own read target.
    pub fn read(&self, t: f64) -> Option<f64> {
        if self.queue.is_empty() {
            return None;
        }
        let target = t - self.delay;
        let n_earlier = self.queue.partition_point(|&(ts, _)| ts <= target);
        let idx = n_earlier.saturating_sub(1);
        Some(self.queue[idx].1)
    }
}

fn check_delay(delay: f64) -> Result<()> {
    if !delay.is_finite() || delay < 0.0 {
        return Err(Error::validation("delay", "must be finite and >= 0"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gains(alpha: f64, k_p: f64, h_d: usize) -> DtipGains {
        DtipGains::new(alpha, k_p, h_d).unwrap()
    }

    fn diff_cfg(t: f64, n: usize) -> DifferentiatorConfig {
        DifferentiatorConfig::new(t, n).unwrap()
    }

    fn desk_agent() -> InnerAgent {
        InnerAgent::new(gains(26.0, 2.0, 1), diff_cfg(0.1, 5), 0.1, (-0.5, 1.0)).unwrap()
    }

    #[test]
    fn law_is_zero_at_equilibrium() {
        let u = dtip_law(0.0, 0.0, 0.0, &gains(4.0, 2.0, 1)).unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn law_evaluates_directly() {
        let u = dtip_law(1.0, 0.0, 0.5, &gains(1.0, 2.0, 1)).unwrap();
        assert_eq!(u, -2.0);
    }

    #[test]
    fn law_rejects_non_finite_inputs() {
        let g = gains(1.0, 1.0, 1);
        assert!(matches!(
            dtip_law(f64::NAN, 0.0, 0.0, &g),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(
            dtip_law(0.0, f64::INFINITY, 0.0, &g),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn law_is_linear_and_scales_inversely_with_alpha() {
        let g1 = gains(2.0, 3.0, 1);
        let g2 = gains(4.0, 3.0, 1);
        let u_a = dtip_law(1.0, 0.5, 0.2, &g1).unwrap();
        let u_b = dtip_law(2.0, 1.0, 0.4, &g1).unwrap();
        assert_abs_diff_eq!(u_b, 2.0 * u_a, epsilon = 1e-15);
        let u_half = dtip_law(1.0, 0.5, 0.2, &g2).unwrap();
        assert_abs_diff_eq!(u_half, u_a / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn gains_validation_rejects_bad_values() {
        assert!(DtipGains::new(0.0, 1.0, 1).is_err());
        assert!(DtipGains::new(f64::NAN, 1.0, 1).is_err());
        assert!(DtipGains::new(1.0, 0.0, 1).is_err());
        assert!(DtipGains::new(1.0, -1.0, 1).is_err());
        assert!(DtipGains::new(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn compose_reference_adds_the_shared_offset() {
        assert_eq!(compose_reference(0.2, 0.0), 0.2);
        assert_eq!(compose_reference(0.2, 0.05), 0.25);
    }

    #[test]
    fn scalar_plant_error_decays_at_the_proportional_rate() {
        // Plant ẏ = 3u with F ≡ 0, so the exact disturbance estimate is 0
        // and the closed loop obeys ė = −k_p·e.
        let g = gains(3.0, 2.0, 1);
        let dt = 1e-3;
        let mut y = 0.0;
        let y_ref = 1.0;
        let e0: f64 = y - y_ref;
        let steps = (1.0 / g.k_p / dt).round() as usize;
        for _ in 0..steps {
            let u = dtip_law(0.0, 0.0, y - y_ref, &g).unwrap();
            y += 3.0 * u * dt;
        }
        let expected = e0.abs() * (-1.0f64).exp();
        let actual = (y - y_ref).abs();
        assert!(
            (actual - expected).abs() <= 0.05 * expected,
            "error {actual} vs analytic {expected}"
        );
    }

    #[test]
    fn agent_emits_zero_during_warm_up() {
        let mut agent = desk_agent();
        for _ in 0..4 {
            assert_eq!(agent.inner_step(0.5, 0.7).unwrap(), 0.0);
        }
        // Fifth sample fills the window; output becomes active.
        let u = agent.inner_step(0.5, 0.7).unwrap();
        assert!(u != 0.0);
    }

    #[test]
    fn steady_tracking_holds_the_control() {
        // Drive the agent away from zero output, then feed an exactly
        // constant on-reference signal; once the window is constant the
        // emitted control must hold.
        let mut agent =
            InnerAgent::new(gains(5.0, 1.0, 2), diff_cfg(0.1, 3), 0.1, (-10.0, 10.0)).unwrap();
        for _ in 0..10 {
            agent.inner_step(0.8, 1.0).unwrap();
        }
        let mut us = Vec::new();
        for _ in 0..8 {
            us.push(agent.inner_step(1.0, 1.0).unwrap());
        }
        // After the window (3) plus history depth (2) refill with constant
        // data, consecutive outputs agree with the one h_d periods earlier.
        for w in us[5..].windows(2) {
            assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(us[7], us[5], epsilon = 1e-12);
        assert!(us[7] != 0.0, "hold value should be away from zero");
    }

    #[test]
    fn disabled_agent_emits_zero_and_keeps_no_state() {
        let mut agent = desk_agent();
        agent.gate_participation(false);
        for _ in 0..10 {
            assert_eq!(agent.inner_step(0.9, 0.5).unwrap(), 0.0);
        }
        // Re-enable: warm-up starts from scratch.
        agent.gate_participation(true);
        for _ in 0..4 {
            assert_eq!(agent.inner_step(0.9, 0.5).unwrap(), 0.0);
        }
        assert!(agent.inner_step(0.9, 0.5).unwrap() != 0.0);
    }

    #[test]
    fn gating_off_and_on_matches_a_fresh_agent_bitwise() {
        let inputs: Vec<(f64, f64)> = (0..40)
            .map(|k| (0.9 + 0.01 * (k as f64 * 0.3).sin(), 1.0))
            .collect();

        let mut recycled = desk_agent();
        for &(y, r) in &inputs {
            recycled.inner_step(y, r).unwrap();
        }
        recycled.gate_participation(false);
        recycled.inner_step(0.1, 0.2).unwrap();
        recycled.gate_participation(true);

        let mut fresh = desk_agent();
        for &(y, r) in &inputs {
            let a = recycled.inner_step(y, r).unwrap();
            let b = fresh.inner_step(y, r).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn agent_output_ignores_other_agents_entirely() {
        let inputs: Vec<(f64, f64)> = (0..30)
            .map(|k| ((k as f64 * 0.17).cos(), 0.5))
            .collect();

        let mut alone = desk_agent();
        let solo: Vec<u64> = inputs
            .iter()
            .map(|&(y, r)| alone.inner_step(y, r).unwrap().to_bits())
            .collect();

        let mut observed = desk_agent();
        let mut noisy_neighbor = desk_agent();
        let interleaved: Vec<u64> = inputs
            .iter()
            .enumerate()
            .map(|(k, &(y, r))| {
                noisy_neighbor.inner_step(1e6 * (k as f64), -3.0).unwrap();
                observed.inner_step(y, r).unwrap().to_bits()
            })
            .collect();

        assert_eq!(solo, interleaved);
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_outputs() {
        let inputs: Vec<f64> = (0..50).map(|k| (k as f64 * 0.11).sin()).collect();
        let run = || -> Vec<u64> {
            let mut agent = desk_agent();
            inputs
                .iter()
                .map(|&y| agent.inner_step(y, 0.3).unwrap().to_bits())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn setpoint_correction_is_clamped_to_the_avr_band() {
        let mut agent =
            InnerAgent::new(gains(0.1, 2.0, 1), diff_cfg(0.1, 5), 0.1, (-0.1, 0.1)).unwrap();
        for _ in 0..5 {
            agent.inner_step(5.0, -5.0).unwrap();
        }
        // Tiny alpha and a huge error would demand a massive correction.
        let u = agent.inner_step(5.0, -5.0).unwrap();
        assert_eq!(u, -0.1);
    }

    #[test]
    fn outer_period_ratio_is_constructor_enforced() {
        let g = gains(2.75, 0.1, 1);
        let d = diff_cfg(1.0, 5);
        assert!(OuterController::new(g, d, 1.0, 0.1).is_ok()); // ratio 10
        assert!(OuterController::new(g, d, 0.5, 0.1).is_ok()); // ratio 5
        assert!(OuterController::new(g, d, 0.45, 0.1).is_err()); // ratio 4.5
        assert!(OuterController::new(g, d, 1.1, 0.1).is_err()); // ratio 11
    }

    #[test]
    fn differentiator_window_must_fit_the_loop_time_constant() {
        // k_p = 5 gives a 0.2 s closed-loop constant; a 0.4 s window is too
        // slow to serve it.
        let err = InnerAgent::new(gains(26.0, 5.0, 1), diff_cfg(0.1, 5), 0.1, (-0.5, 1.0));
        assert!(err.is_err());
    }

    #[test]
    fn outer_warm_up_emits_zero_then_tracks() {
        let mut outer =
            OuterController::new(gains(2.75, 0.1, 1), diff_cfg(1.0, 5), 1.0, 0.1).unwrap();
        for _ in 0..4 {
            assert_eq!(outer.outer_step(0.9, 1.0).unwrap(), 0.0);
        }
        assert!(outer.outer_step(0.9, 1.0).unwrap() != 0.0);
    }

    #[test]
    fn outer_fixed_point_holds_previous_value() {
        let mut outer =
            OuterController::new(gains(2.75, 0.1, 1), diff_cfg(1.0, 5), 1.0, 0.1).unwrap();
        for _ in 0..10 {
            outer.outer_step(0.95, 1.0).unwrap();
        }
        let mut us = Vec::new();
        for _ in 0..8 {
            us.push(outer.outer_step(1.0, 1.0).unwrap());
        }
        for w in us[5..].windows(2) {
            assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn rebase_shifts_the_next_emitted_control() {
        let mk = || OuterController::new(gains(2.75, 0.1, 1), diff_cfg(1.0, 5), 1.0, 0.1).unwrap();
        let drive = |c: &mut OuterController| {
            for _ in 0..12 {
                c.outer_step(0.95, 1.0).unwrap();
            }
        };
        let mut plain = mk();
        drive(&mut plain);
        let mut shifted = mk();
        drive(&mut shifted);
        shifted.rebase(0.25).unwrap();
        // Same next measurement: the rebased controller emits exactly the
        // plain output plus the shift (the law is affine in the history).
        let a = plain.outer_step(0.95, 1.0).unwrap();
        let b = shifted.outer_step(0.95, 1.0).unwrap();
        assert_abs_diff_eq!(b, a + 0.25, epsilon = 1e-12);
    }

    #[test]
    fn delay_buffer_reads_nearest_earlier_sample() {
        // Power-of-two times keep the target arithmetic exact.
        let mut buf = DelayBuffer::new(0.25).unwrap();
        for k in 0..=6 {
            let t = k as f64 * 0.125;
            buf.push(t, 100.0 + k as f64).unwrap();
        }
        // Exact hit: t = 0.75, delay 0.25 → target 0.5.
        assert_eq!(buf.read(0.75).unwrap(), 104.0);
        // t = 0.8 → target 0.55 → nearest earlier is still t = 0.5.
        buf.push(0.8, 200.0).unwrap();
        assert_eq!(buf.read(0.8).unwrap(), 104.0);
        // The sample at 0.75 survives the trims and answers target 0.75.
        buf.push(0.875, 300.0).unwrap();
        buf.push(1.0, 400.0).unwrap();
        assert_eq!(buf.read(1.0).unwrap(), 106.0);
    }

    #[test]
    fn delay_buffer_returns_oldest_before_history_exists() {
        let mut buf = DelayBuffer::new(5.0).unwrap();
        buf.push(0.0, 1.0).unwrap();
        buf.push(1.0, 2.0).unwrap();
        assert_eq!(buf.read(1.0).unwrap(), 1.0);
        assert_eq!(buf.read(4.9).unwrap(), 1.0);
    }

    #[test]
    fn zero_delay_reads_the_current_sample() {
        let mut buf = DelayBuffer::new(0.0).unwrap();
        buf.push(0.0, 1.0).unwrap();
        buf.push(0.5, 2.0).unwrap();
        assert_eq!(buf.read(0.5).unwrap(), 2.0);
    }

    #[test]
    fn delay_buffer_validates_inputs() {
        assert!(DelayBuffer::new(-1.0).is_err());
        assert!(DelayBuffer::new(f64::NAN).is_err());
        let mut buf = DelayBuffer::new(1.0).unwrap();
        assert!(buf.read(0.0).is_none());
        buf.push(1.0, 1.0).unwrap();
        assert!(buf.push(0.5, 1.0).is_err());
        assert!(buf.push(1.5, f64::NAN).is_err());
        assert!(buf.set_delay(-0.1).is_err());
        buf.set_delay(2.0).unwrap();
        assert_eq!(buf.delay(), 2.0);
    }
}
