//! Scenario configuration and the closed-loop run engine.
//!
//! A [`Scenario`] bundles the plant description, controller tuning and a
//! time-ordered event list. [`run`] advances the plant at `dt_plant`, fires
//! the inner agents and the outer controller at their decoupled periods, and
//! re-solves the alignment dispatch whenever the reference, the membership
//! masks or the sensitivity model change.
//!
//! Generator indices in event payloads are 0-based; time-series column
//! suffixes (`v_t_1` ...) are 1-based display labels.

pub mod cases;
pub mod criteria;
pub mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{compose_reference, DelayBuffer, DtipGains, InnerAgent, OuterController};
use crate::error::{Error, Result};
use crate::estimation::DifferentiatorConfig;
use crate::model::{
    solve_alignment, ActiveMask, ParticipationFactors, SensitivityModel,
};
use crate::plant::{
    apply_disturbance, apply_topology, plant_step, GeneratorParams, GridState, PlantConfig,
    TopologyChange,
};
use metrics::Metrics;

/// Multiplier applied by `line_perturb` events that give no factor.
pub const DEFAULT_LINE_PERTURB_FACTOR: f64 = 1.15;
/// Generator whose couplings `line_perturb` scales when none is given.
pub const DEFAULT_LINE_PERTURB_GEN: usize = 1;

fn default_load_d_v() -> f64 {
    -0.005
}

/// One scheduled event. `at` snaps to the nearest plant tick when the run
/// executes; events timed past the scenario duration never fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl TimedEvent {
    pub fn new(at: f64, kind: EventKind) -> Self {
        TimedEvent { at, kind }
    }
}

/// Event payloads. All `gen` fields are 0-based generator indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Steps the pilot-point voltage reference.
    SetpointStep { v_pp_ref: f64 },
    /// Changes the pilot measurement delay seen by the outer controller.
    SetDelay { delay: f64 },
    /// Sets (replaces, does not accumulate) the additive disturbances.
    LoadDisturbance {
        #[serde(default = "default_load_d_v")]
        d_v: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d_q: Option<Vec<f64>>,
    },
    /// Swaps the sensitivity model: either an explicit replacement, or the
    /// built-in coupling perturbation applied to the scenario's pristine
    /// base model (so repeated events do not compound).
    LinePerturb {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        factor: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gen: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<SensitivityModel>,
    },
    /// Electrically removes a generator. It also leaves the SVC; its
    /// terminal voltage freezes and its reactive power reads zero.
    Disconnect { gen: usize },
    /// Adds a connected generator to the SVC participation set.
    JoinSvc { gen: usize },
    /// Removes a generator from the SVC participation set (stays connected,
    /// its AVR holds the base setpoint from the next inner tick on).
    LeaveSvc { gen: usize },
}

impl EventKind {
    /// The serialized tag, used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SetpointStep { .. } => "setpoint_step",
            EventKind::SetDelay { .. } => "set_delay",
            EventKind::LoadDisturbance { .. } => "load_disturbance",
            EventKind::LinePerturb { .. } => "line_perturb",
            EventKind::Disconnect { .. } => "disconnect",
            EventKind::JoinSvc { .. } => "join_svc",
            EventKind::LeaveSvc { .. } => "leave_svc",
        }
    }
}

/// Per-generator gain given either once for all generators or per generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainSpec {
    Uniform(f64),
    PerGenerator(Vec<f64>),
}

impl GainSpec {
    pub fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            GainSpec::Uniform(a) => Ok(vec![*a; n]),
            GainSpec::PerGenerator(v) => {
                if v.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: v.len(),
                    });
                }
                Ok(v.clone())
            }
        }
    }
}

/// Generator parameters given either once for all generators or per
/// generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorSpec {
    Uniform(GeneratorParams),
    PerGenerator(Vec<GeneratorParams>),
}

impl GeneratorSpec {
    pub fn resolve(&self, n: usize) -> Result<Vec<GeneratorParams>> {
        match self {
            GeneratorSpec::Uniform(p) => Ok(vec![*p; n]),
            GeneratorSpec::PerGenerator(v) => {
                if v.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: v.len(),
                    });
                }
                Ok(v.clone())
            }
        }
    }
}

/// Tuning of the per-generator reactive-power loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerLoopSpec {
    pub period: f64,
    pub alpha: GainSpec,
    pub k_p: f64,
    pub h_d: usize,
    /// Differentiator sample spacing; the controller period when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_ndf: Option<f64>,
    pub n_ndf: usize,
}

impl Default for InnerLoopSpec {
    fn default() -> Self {
        InnerLoopSpec {
            period: 0.1,
            alpha: GainSpec::Uniform(26.0),
            k_p: 2.0,
            h_d: 1,
            t_ndf: None,
            n_ndf: 5,
        }
    }
}

/// Tuning of the pilot-point voltage loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterLoopSpec {
    pub period: f64,
    pub alpha: f64,
    pub k_p: f64,
    pub h_d: usize,
    /// Differentiator sample spacing; the controller period when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_ndf: Option<f64>,
    pub n_ndf: usize,
}

impl Default for OuterLoopSpec {
    fn default() -> Self {
        OuterLoopSpec {
            period: 1.0,
            alpha: 2.75,
            k_p: 0.1,
            h_d: 1,
            t_ndf: None,
            n_ndf: 5,
        }
    }
}

/// How the outer correction u2 enters the composed references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum U2Distribution {
    /// The same scalar u2 is added to every participating reference.
    #[default]
    Uniform,
    /// u2 is scaled by each generator's participation factor before being
    /// added, so the correction is shared in dispatch proportion.
    PfWeighted,
}

/// A complete simulation description. Deserializes from JSON with every
/// field optional; [`crate::cli::parse_scenario`] validates on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    pub v_pp_ref: f64,
    pub model: SensitivityModel,
    /// Participation factors; uniform weights over the model's generators
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pf: Option<ParticipationFactors>,
    pub generators: GeneratorSpec,
    pub inner: InnerLoopSpec,
    pub outer: OuterLoopSpec,
    pub plant: PlantConfig,
    /// SVC participation at t = 0; every generator participates when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_svc_active: Option<Vec<bool>>,
    pub u2_distribution: U2Distribution,
    /// Row decimation: log every k-th plant tick. The final instant is
    /// always logged.
    pub log_every: usize,
    pub events: Vec<TimedEvent>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            duration: 1000.0,
            v_pp_ref: 0.98,
            model: cases::benchmark_model(),
            pf: None,
            generators: GeneratorSpec::Uniform(cases::benchmark_generator()),
            inner: InnerLoopSpec::default(),
            outer: OuterLoopSpec::default(),
            plant: PlantConfig::default(),
            initial_svc_active: None,
            u2_distribution: U2Distribution::default(),
            log_every: 1,
            events: Vec::new(),
        }
    }
}

impl Scenario {
    /// Participation factors with the uniform default applied.
    pub fn effective_pf(&self) -> Result<ParticipationFactors> {
        match &self.pf {
            Some(pf) => {
                if pf.len() != self.model.n() {
                    return Err(Error::DimensionMismatch {
                        expected: self.model.n(),
                        got: pf.len(),
                    });
                }
                Ok(pf.clone())
            }
            None => ParticipationFactors::uniform(self.model.n()),
        }
    }

    /// Sorts events by time (stable, so same-time events keep list order).
    pub fn normalize(&mut self) {
        self.events.sort_by(|a, b| a.at.total_cmp(&b.at));
    }

    /// Checks every cross-field invariant the run loop relies on, including
    /// a static replay of membership events against the initial masks.
    pub fn validate(&self) -> Result<()> {
        Engine::new(self).map(|_| ())
    }
}

/// How the inner agents are evaluated within one tick. Both schedules are
/// bitwise-identical; `Parallel` fans the independent agents out to a thread
/// pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Column labels of the time series: five scalars, then eight per-generator
/// groups with 1-based suffixes. Stable, documented output contract.
pub fn column_names(n: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(5 + 8 * n);
    for name in ["t", "v_pp_ref", "v_pp", "v_pp_meas_delayed", "u2"] {
        cols.push(name.to_string());
    }
    for prefix in [
        "v_t",
        "v_set",
        "q",
        "q_ref",
        "q_ref_prime",
        "u1",
        "connected",
        "svc_active",
    ] {
        for i in 1..=n {
            cols.push(format!("{prefix}_{i}"));
        }
    }
    cols
}

/// Completed run: the logged time series (masks as 0/1), controller firing
/// counts and the post-run metrics summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub n_generators: usize,
    pub inner_firings: u64,
    pub outer_firings: u64,
    pub metrics: Metrics,
}

impl RunResult {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::validation("column", format!("no column named {name}")))
    }

    /// Copies one column out of the row-major series.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn last_row(&self) -> Result<&[f64]> {
        self.rows
            .last()
            .map(|r| r.as_slice())
            .ok_or(Error::EmptySeries)
    }
}

/// Runs a scenario sequentially.
pub fn run(scenario: &Scenario) -> Result<RunResult> {
    run_with(scenario, Execution::Sequential)
}

/// Runs a scenario with the chosen agent-evaluation schedule.
///
/// Per tick: due events fire first (snapped to the nearest tick), the pilot
/// measurement enters the delay line, then the outer controller and the
/// inner agents fire if the tick lies on their period, the row is logged,
/// and finally the plant advances. Controls are held zero-order between
/// their loop ticks.
pub fn run_with(scenario: &Scenario, execution: Execution) -> Result<RunResult> {
    let mut eng = Engine::new(scenario)?;
    let mut rows: Vec<Vec<f64>> =
        Vec::with_capacity((eng.n_ticks / eng.log_every + 2) as usize);
    let mut inner_firings = 0u64;
    let mut outer_firings = 0u64;
    let mut cursor = 0usize;

    for k in 0..=eng.n_ticks {
        let t = k as f64 * eng.dt;
        while cursor < eng.event_order.len() {
            let ev = &scenario.events[eng.event_order[cursor]];
            if tick_of(ev.at, eng.dt) > k {
                break;
            }
            log::debug!("t={t}: applying {} event", ev.kind.name());
            eng.apply_event(ev).map_err(|e| Error::at_time(t, e))?;
            cursor += 1;
        }
        eng.buffer
            .push(t, eng.state.v_pp())
            .map_err(|e| Error::at_time(t, e))?;
        if k < eng.n_ticks {
            if k % eng.outer_every == 0 {
                eng.outer_tick(t).map_err(|e| Error::at_time(t, e))?;
                outer_firings += 1;
            }
            if k % eng.inner_every == 0 {
                eng.inner_tick(execution).map_err(|e| Error::at_time(t, e))?;
                inner_firings += 1;
            }
        }
        if k % eng.log_every == 0 || k == eng.n_ticks {
            rows.push(eng.log_row(t));
        }
        if k < eng.n_ticks {
            plant_step(&mut eng.state, &eng.params, &eng.u1, eng.dt)
                .map_err(|e| Error::at_time(t, e))?;
        }
    }

    let mut result = RunResult {
        columns: column_names(eng.n),
        rows,
        n_generators: eng.n,
        inner_firings,
        outer_firings,
        metrics: Metrics::default(),
    };
    result.metrics = metrics::compute_metrics(&result, &scenario.events, eng.pf.values())?;
    Ok(result)
}

fn tick_of(at: f64, dt: f64) -> u64 {
    (at / dt).round().max(0.0) as u64
}

/// Builds the perturbed sensitivity model: scales the off-diagonal
/// couplings of `gen`'s row and column in c_q and its c_v entry by
/// `factor`, leaving the self-sensitivity untouched.
pub fn perturb_line_coupling(
    base: &SensitivityModel,
    gen: usize,
    factor: f64,
) -> Result<SensitivityModel> {
    let n = base.n();
    if gen >= n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: gen,
        });
    }
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::validation("factor", "must be finite and > 0"));
    }
    let mut c_v: Vec<f64> = base.c_v().iter().copied().collect();
    c_v[gen] *= factor;
    let mut c_q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| base.c_q()[(i, j)]).collect())
        .collect();
    for j in 0..n {
        if j != gen {
            c_q[gen][j] *= factor;
            c_q[j][gen] *= factor;
        }
    }
    SensitivityModel::new(c_v, c_q)
}

struct Engine<'s> {
    sc: &'s Scenario,
    n: usize,
    dt: f64,
    n_ticks: u64,
    inner_every: u64,
    outer_every: u64,
    log_every: u64,
    /// Event indices in stable time order; the scenario list itself is
    /// not required to be pre-sorted.
    event_order: Vec<usize>,
    pf: ParticipationFactors,
    params: Vec<GeneratorParams>,
    state: GridState,
    agents: Vec<InnerAgent>,
    outer: OuterController,
    buffer: DelayBuffer,
    v_ref: f64,
    q_ref: Vec<f64>,
    c: f64,
    u1: Vec<f64>,
    u2: f64,
}

impl<'s> Engine<'s> {
    fn new(sc: &'s Scenario) -> Result<Self> {
        let n = sc.model.n();
        if !(sc.duration.is_finite() && sc.duration > 0.0) {
            return Err(Error::validation("duration", "must be finite and > 0"));
        }
        if !(sc.v_pp_ref.is_finite() && sc.v_pp_ref > 0.0) {
            return Err(Error::validation("v_pp_ref", "must be finite and > 0"));
        }
        if sc.log_every == 0 {
            return Err(Error::validation("log_every", "must be at least 1"));
        }
        let dt = sc.plant.dt_plant();
        let n_ticks = (sc.duration / dt).round() as u64;
        if n_ticks == 0 {
            return Err(Error::validation(
                "duration",
                "must cover at least one plant tick",
            ));
        }
        let inner_every = period_ticks(sc.inner.period, dt, "inner.period")?;
        let outer_every = period_ticks(sc.outer.period, dt, "outer.period")?;

        let params = sc.generators.resolve(n)?;
        for p in &params {
            if dt > p.tau_avr() / 10.0 + 1e-12 {
                return Err(Error::validation(
                    "plant.dt_plant",
                    format!(
                        "step {dt} s exceeds a tenth of the fastest AVR time constant {} s",
                        p.tau_avr()
                    ),
                ));
            }
        }
        let pf = sc.effective_pf()?;

        let mask = match &sc.initial_svc_active {
            Some(svc) => {
                if svc.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: svc.len(),
                    });
                }
                ActiveMask::new(vec![true; n], svc.clone())?
            }
            None => ActiveMask::all_active(n)?,
        };

        let mut event_order: Vec<usize> = (0..sc.events.len()).collect();
        event_order.sort_by(|&a, &b| sc.events[a].at.total_cmp(&sc.events[b].at));
        validate_events(sc, &event_order, &mask)?;

        let inner_alpha = sc.inner.alpha.resolve(n)?;
        let inner_diff =
            DifferentiatorConfig::new(sc.inner.t_ndf.unwrap_or(sc.inner.period), sc.inner.n_ndf)?;
        let mut agents = Vec::with_capacity(n);
        for i in 0..n {
            agents.push(InnerAgent::new(
                DtipGains::new(inner_alpha[i], sc.inner.k_p, sc.inner.h_d)?,
                inner_diff,
                sc.inner.period,
                params[i].u_limits(),
            )?);
        }
        let outer = OuterController::new(
            DtipGains::new(sc.outer.alpha, sc.outer.k_p, sc.outer.h_d)?,
            DifferentiatorConfig::new(sc.outer.t_ndf.unwrap_or(sc.outer.period), sc.outer.n_ndf)?,
            sc.outer.period,
            sc.inner.period,
        )?;

        let v_t0 = params.iter().map(|p| p.v_base()).collect();
        let state = GridState::new(sc.model.clone(), mask, v_t0)?;
        let sol = solve_alignment(state.model(), &pf, sc.v_pp_ref, state.mask())
            .map_err(|e| Error::at_time(0.0, e))?;

        Ok(Engine {
            sc,
            n,
            dt,
            n_ticks,
            inner_every,
            outer_every,
            log_every: sc.log_every as u64,
            event_order,
            pf,
            params,
            state,
            agents,
            outer,
            buffer: DelayBuffer::new(0.0)?,
            v_ref: sc.v_pp_ref,
            q_ref: sol.q_ref,
            c: sol.c,
            u1: vec![0.0; n],
            u2: 0.0,
        })
    }

    fn resolve_alignment(&mut self) -> Result<()> {
        let sol = solve_alignment(self.state.model(), &self.pf, self.v_ref, self.state.mask())?;
        self.q_ref = sol.q_ref;
        self.c = sol.c;
        Ok(())
    }

    /// The reference commanded to agent `i`'s loop.
    fn composite_reference(&self, i: usize) -> f64 {
        let w = match self.sc.u2_distribution {
            U2Distribution::Uniform => 1.0,
            U2Distribution::PfWeighted => self.pf[i],
        };
        compose_reference(self.q_ref[i], w * self.u2)
    }

    fn apply_event(&mut self, ev: &TimedEvent) -> Result<()> {
        match &ev.kind {
            EventKind::SetpointStep { v_pp_ref } => {
                self.v_ref = *v_pp_ref;
                self.resolve_alignment()?;
            }
            EventKind::SetDelay { delay } => self.buffer.set_delay(*delay)?,
            EventKind::LoadDisturbance { d_v, d_q } => {
                let zeros;
                let d_q = match d_q {
                    Some(d) => d.as_slice(),
                    None => {
                        zeros = vec![0.0; self.n];
                        zeros.as_slice()
                    }
                };
                apply_disturbance(&mut self.state, *d_v, d_q)?;
            }
            EventKind::LinePerturb { factor, gen, model } => {
                let next = match model {
                    Some(m) => m.clone(),
                    None => perturb_line_coupling(
                        &self.sc.model,
                        gen.unwrap_or(DEFAULT_LINE_PERTURB_GEN),
                        factor.unwrap_or(DEFAULT_LINE_PERTURB_FACTOR),
                    )?,
                };
                apply_topology(&mut self.state, TopologyChange::Model(next))?;
                self.resolve_alignment()?;
            }
            EventKind::Disconnect { gen } => {
                let mask = self.state.mask().with_disconnected(*gen)?;
                apply_topology(&mut self.state, TopologyChange::Mask(mask))?;
                // A fault, not a command: the controllers must recover from
                // the resulting transient on their own, so no rebase here.
                self.resolve_alignment()?;
            }
            EventKind::JoinSvc { gen } => self.set_participation(*gen, true)?,
            EventKind::LeaveSvc { gen } => self.set_participation(*gen, false)?,
        }
        Ok(())
    }

    /// Commanded membership change with bumpless transfer: the alignment
    /// constant jumps from c_old to c_new while the plant has not moved, so
    /// both the held u2 and the outer controller's stored history shift by
    /// (c_old − c_new), keeping every composed reference continuous.
    /// Changing to the current state is a no-op (no reset, no rebase).
    fn set_participation(&mut self, gen: usize, active: bool) -> Result<()> {
        if gen >= self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: gen,
            });
        }
        if self.state.mask().is_svc_active(gen) == active {
            return Ok(());
        }
        let c_old = self.c;
        let mask = self.state.mask().with_participation(gen, active)?;
        apply_topology(&mut self.state, TopologyChange::Mask(mask))?;
        self.resolve_alignment()?;
        let delta = c_old - self.c;
        self.outer.rebase(delta)?;
        self.u2 += delta;
        Ok(())
    }

    fn outer_tick(&mut self, t: f64) -> Result<()> {
        let y = self
            .buffer
            .read(t)
            .unwrap_or_else(|| self.state.v_pp());
        self.u2 = self.outer.outer_step(y, self.v_ref)?;
        Ok(())
    }

    fn inner_tick(&mut self, execution: Execution) -> Result<()> {
        // (participates, q measurement, commanded reference) per agent,
        // captured before the agents borrow &mut self.
        let inputs: Vec<(bool, f64, f64)> = (0..self.n)
            .map(|i| {
                let on = self.state.mask().is_connected(i) && self.state.mask().is_svc_active(i);
                let target = if on { self.composite_reference(i) } else { 0.0 };
                (on, self.state.q()[i], target)
            })
            .collect();
        match execution {
            Execution::Sequential => {
                for (i, &(on, q, target)) in inputs.iter().enumerate() {
                    self.agents[i].gate_participation(on);
                    self.u1[i] = self.agents[i].inner_step(q, target)?;
                }
            }
            Execution::Parallel => {
                let outputs: Vec<Result<f64>> = self
                    .agents
                    .par_iter_mut()
                    .zip(inputs.par_iter())
                    .map(|(agent, &(on, q, target))| {
                        agent.gate_participation(on);
                        agent.inner_step(q, target)
                    })
                    .collect();
                for (i, out) in outputs.into_iter().enumerate() {
                    self.u1[i] = out?;
                }
            }
        }
        Ok(())
    }

    fn log_row(&self, t: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(5 + 8 * self.n);
        row.push(t);
        row.push(self.v_ref);
        row.push(self.state.v_pp());
        row.push(self.buffer.read(t).unwrap_or_else(|| self.state.v_pp()));
        row.push(self.u2);
        for i in 0..self.n {
            row.push(self.state.v_t()[i]);
        }
        for i in 0..self.n {
            row.push(self.params[i].setpoint(self.u1[i]));
        }
        for i in 0..self.n {
            row.push(self.state.q()[i]);
        }
        for i in 0..self.n {
            row.push(self.q_ref[i]);
        }
        for i in 0..self.n {
            // Commanded reference; gated agents carry 0.
            row.push(if self.state.mask().is_svc_active(i) {
                self.composite_reference(i)
            } else {
                0.0
            });
        }
        for i in 0..self.n {
            row.push(self.u1[i]);
        }
        for i in 0..self.n {
            row.push(if self.state.mask().is_connected(i) { 1.0 } else { 0.0 });
        }
        for i in 0..self.n {
            row.push(if self.state.mask().is_svc_active(i) { 1.0 } else { 0.0 });
        }
        row
    }
}

fn period_ticks(period: f64, dt: f64, field: &str) -> Result<u64> {
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::validation(field, "must be finite and > 0"));
    }
    let ratio = period / dt;
    let ticks = ratio.round();
    if ticks < 1.0 || (ratio - ticks).abs() > 1e-6 * ratio.max(1.0) {
        return Err(Error::validation(
            field,
            format!("{period} s is not an integer multiple of dt_plant {dt} s"),
        ));
    }
    Ok(ticks as u64)
}

/// Static validation of the event list: payload checks plus a replay of the
/// membership events against the initial masks, so invalid joins, repeated
/// disconnections emptying the zone, or an emptied participation set are
/// rejected before the run starts.
fn validate_events(sc: &Scenario, order: &[usize], initial_mask: &ActiveMask) -> Result<()> {
    let n = sc.model.n();
    if !initial_mask.svc_active().iter().any(|&a| a) {
        return Err(Error::validation(
            "initial_svc_active",
            "at least one generator must participate in SVC",
        ));
    }
    let mut mask = initial_mask.clone();
    for &idx in order {
        let ev = &sc.events[idx];
        if !(ev.at.is_finite() && ev.at >= 0.0) {
            return Err(Error::validation(
                "events",
                format!("event time {} must be finite and nonnegative", ev.at),
            ));
        }
        match &ev.kind {
            EventKind::SetpointStep { v_pp_ref } => {
                if !(v_pp_ref.is_finite() && *v_pp_ref > 0.0) {
                    return Err(Error::validation(
                        "events",
                        format!("setpoint_step at {} s needs a positive finite v_pp_ref", ev.at),
                    ));
                }
            }
            EventKind::SetDelay { delay } => {
                DelayBuffer::new(*delay)?;
            }
            EventKind::LoadDisturbance { d_v, d_q } => {
                if !d_v.is_finite() {
                    return Err(Error::NonFiniteInput(*d_v));
                }
                if let Some(d) = d_q {
                    if d.len() != n {
                        return Err(Error::DimensionMismatch {
                            expected: n,
                            got: d.len(),
                        });
                    }
                    if let Some(&bad) = d.iter().find(|x| !x.is_finite()) {
                        return Err(Error::NonFiniteInput(bad));
                    }
                }
            }
            EventKind::LinePerturb { factor, gen, model } => {
                if model.is_some() && (factor.is_some() || gen.is_some()) {
                    return Err(Error::validation(
                        "events",
                        format!(
                            "line_perturb at {} s takes either an explicit model or factor/gen, not both",
                            ev.at
                        ),
                    ));
                }
                match model {
                    Some(m) => {
                        if m.n() != n {
                            return Err(Error::DimensionMismatch {
                                expected: n,
                                got: m.n(),
                            });
                        }
                    }
                    None => {
                        perturb_line_coupling(
                            &sc.model,
                            gen.unwrap_or(DEFAULT_LINE_PERTURB_GEN),
                            factor.unwrap_or(DEFAULT_LINE_PERTURB_FACTOR),
                        )?;
                    }
                }
            }
            EventKind::Disconnect { gen } => {
                mask = mask.with_disconnected(*gen)?;
                if !mask.connected().iter().any(|&c| c) {
                    return Err(Error::validation(
                        "events",
                        format!("no generator stays connected after the event at {} s", ev.at),
                    ));
                }
                if !mask.svc_active().iter().any(|&a| a) {
                    return Err(Error::validation(
                        "events",
                        format!(
                            "no participating generator remains after the event at {} s",
                            ev.at
                        ),
                    ));
                }
            }
            EventKind::JoinSvc { gen } => {
                mask = mask.with_participation(*gen, true)?;
            }
            EventKind::LeaveSvc { gen } => {
                mask = mask.with_participation(*gen, false)?;
                if !mask.svc_active().iter().any(|&a| a) {
                    return Err(Error::validation(
                        "events",
                        format!(
                            "no participating generator remains after the event at {} s",
                            ev.at
                        ),
                    ));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// A scenario that is an exact fixed point from t = 0: pf equal to the
    /// row sums of c_q makes the flat terminal profile realize the dispatch,
    /// and v_pp_ref equal to the c_v sum makes the alignment constant 1.
    fn equilibrium_scenario(duration: f64) -> Scenario {
        let model = cases::benchmark_model();
        let n = model.n();
        let pf: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| model.c_q()[(i, j)]).sum())
            .collect();
        let v_pp_ref: f64 = model.c_v().iter().sum();
        Scenario {
            duration,
            v_pp_ref,
            pf: Some(ParticipationFactors::new(pf).unwrap()),
            log_every: 1,
            ..Scenario::default()
        }
    }

    #[test]
    fn equilibrium_run_keeps_every_series_constant() {
        let sc = equilibrium_scenario(30.0);
        let result = run(&sc).unwrap();
        let v_pp = result.column("v_pp").unwrap();
        for &v in &v_pp {
            assert_abs_diff_eq!(v, sc.v_pp_ref, epsilon = 1e-9);
        }
        let last = result.last_row().unwrap().to_vec();
        let q_idx = result.column_index("q_1").unwrap();
        let q_ref_idx = result.column_index("q_ref_1").unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(last[q_idx + i], last[q_ref_idx + i], epsilon = 1e-9);
        }
        assert_eq!(result.metrics.v_pp_settling_time_2pct, Some(0.0));
        assert!(result.metrics.final_v_pp_error < 1e-9);
        assert!(result.metrics.max_overshoot < 1e-9);
        assert_eq!(result.metrics.events.len(), 0);
    }

    #[test]
    fn controllers_fire_at_the_contracted_rates() {
        let sc = Scenario {
            duration: 10.0,
            ..Scenario::default()
        };
        let result = run(&sc).unwrap();
        assert_eq!(result.inner_firings, 100);
        assert_eq!(result.outer_firings, 10);
        assert_eq!(result.columns.len(), 5 + 8 * 4);
        assert_eq!(result.rows.len(), 1001);
        let t = result.column("t").unwrap();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn log_decimation_keeps_the_final_instant() {
        let sc = Scenario {
            duration: 10.0,
            log_every: 7,
            ..Scenario::default()
        };
        let result = run(&sc).unwrap();
        let t = result.column("t").unwrap();
        assert_abs_diff_eq!(*t.last().unwrap(), 10.0, epsilon = 1e-12);
        // k = 0, 7, ..., 994 plus the final tick 1000.
        assert_eq!(result.rows.len(), 144);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn repeated_runs_are_identical() {
        let mut sc = Scenario {
            duration: 25.0,
            ..Scenario::default()
        };
        sc.events.push(TimedEvent::new(
            5.0,
            EventKind::SetpointStep { v_pp_ref: 1.0 },
        ));
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_agents_reproduce_the_sequential_run_bitwise() {
        let mut sc = Scenario {
            duration: 25.0,
            ..Scenario::default()
        };
        sc.events.push(TimedEvent::new(
            5.0,
            EventKind::SetpointStep { v_pp_ref: 1.0 },
        ));
        let seq = run_with(&sc, Execution::Sequential).unwrap();
        let par = run_with(&sc, Execution::Parallel).unwrap();
        assert_eq!(seq.rows.len(), par.rows.len());
        for (ra, rb) in seq.rows.iter().zip(&par.rows) {
            for (a, b) in ra.iter().zip(rb) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn permuting_distinct_time_events_does_not_change_the_result() {
        let forward = Scenario {
            duration: 20.0,
            events: vec![
                TimedEvent::new(3.0, EventKind::SetDelay { delay: 2.0 }),
                TimedEvent::new(
                    6.0,
                    EventKind::LoadDisturbance {
                        d_v: -0.005,
                        d_q: None,
                    },
                ),
            ],
            ..Scenario::default()
        };
        let mut reversed = forward.clone();
        reversed.events.reverse();
        let a = run(&forward).unwrap();
        let b = run(&reversed).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn alignment_is_resolved_in_the_first_row_after_a_disconnect() {
        let sc = Scenario {
            duration: 12.0,
            events: vec![TimedEvent::new(5.0, EventKind::Disconnect { gen: 1 })],
            ..Scenario::default()
        };
        let result = run(&sc).unwrap();
        let t = result.column("t").unwrap();
        let row = &result.rows[t.iter().position(|&x| x >= 5.0).unwrap()];
        let q_ref_idx = result.column_index("q_ref_1").unwrap();
        let q_ref: Vec<f64> = (0..4).map(|i| row[q_ref_idx + i]).collect();
        assert_eq!(q_ref[1], 0.0);

        // The reduced steady-state equation must reproduce the reference.
        let model = cases::benchmark_model();
        let keep = [0usize, 2, 3];
        let c_q_red = nalgebra::DMatrix::from_fn(3, 3, |r, c| model.c_q()[(keep[r], keep[c])]);
        let c_v_red = nalgebra::DVector::from_fn(3, |r, _| model.c_v()[keep[r]]);
        let q_red = nalgebra::DVector::from_fn(3, |r, _| q_ref[keep[r]]);
        let y = c_q_red.lu().solve(&q_red).unwrap();
        assert_abs_diff_eq!(c_v_red.dot(&y), 0.98, epsilon = 1e-10);

        // Alignment ratios of the remaining participants coincide.
        assert_abs_diff_eq!(q_ref[0], q_ref[2], epsilon = 1e-12);
        assert_abs_diff_eq!(q_ref[0], q_ref[3], epsilon = 1e-12);
    }

    #[test]
    fn pf_weighted_u2_scales_the_composed_references() {
        let sc = Scenario {
            duration: 30.0,
            v_pp_ref: 1.0,
            pf: Some(ParticipationFactors::new(vec![1.0, 2.0, 1.0, 0.5]).unwrap()),
            u2_distribution: U2Distribution::PfWeighted,
            ..Scenario::default()
        };
        let result = run(&sc).unwrap();
        let row = result.last_row().unwrap();
        let u2 = row[result.column_index("u2").unwrap()];
        assert!(u2.abs() > 0.0, "outer correction should be active");
        let q_ref_idx = result.column_index("q_ref_1").unwrap();
        let prime_idx = result.column_index("q_ref_prime_1").unwrap();
        let pf = [1.0, 2.0, 1.0, 0.5];
        for i in 0..4 {
            assert_abs_diff_eq!(
                row[prime_idx + i] - row[q_ref_idx + i],
                pf[i] * u2,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn scenarios_round_trip_through_json() {
        for id in cases::CaseId::ALL {
            let sc = cases::scenario(id);
            let json = serde_json::to_string_pretty(&sc).unwrap();
            let back: Scenario = serde_json::from_str(&json).unwrap();
            assert_eq!(back, sc, "round trip for {id}");
        }
    }

    #[test]
    fn event_payloads_serialize_with_snake_case_tags() {
        let ev = TimedEvent::new(500.0, EventKind::SetpointStep { v_pp_ref: 1.0 });
        let json = serde_json::to_value(&ev).unwrap();
        assert_eq!(json["kind"], "setpoint_step");
        assert_eq!(json["at"], 500.0);
        let back: TimedEvent = serde_json::from_value(json).unwrap();
        assert_eq!(back, ev);

        let load: TimedEvent =
            serde_json::from_str(r#"{"at": 7.5, "kind": "load_disturbance"}"#).unwrap();
        assert_eq!(
            load.kind,
            EventKind::LoadDisturbance {
                d_v: -0.005,
                d_q: None
            }
        );
    }

    #[test]
    fn validation_rejects_inconsistent_scenarios() {
        // Empty initial participation set.
        let sc = Scenario {
            initial_svc_active: Some(vec![false; 4]),
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());

        // Inner period not a multiple of the plant step.
        let sc = Scenario {
            inner: InnerLoopSpec {
                period: 0.025,
                ..InnerLoopSpec::default()
            },
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());

        // Decoupling ratio out of range.
        let sc = Scenario {
            outer: OuterLoopSpec {
                period: 2.0,
                ..OuterLoopSpec::default()
            },
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());

        // Joining a disconnected generator.
        let sc = Scenario {
            events: vec![
                TimedEvent::new(5.0, EventKind::Disconnect { gen: 1 }),
                TimedEvent::new(10.0, EventKind::JoinSvc { gen: 1 }),
            ],
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());

        // Emptying the participation set.
        let sc = Scenario {
            events: (0..4)
                .map(|g| TimedEvent::new(5.0 + g as f64, EventKind::LeaveSvc { gen: g as usize }))
                .collect(),
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());

        // Plant step too coarse for the AVR.
        let sc = Scenario {
            plant: PlantConfig::new(0.1, 1e-5, 1e-4).unwrap(),
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());

        // line_perturb with both an explicit model and a factor.
        let sc = Scenario {
            events: vec![TimedEvent::new(
                5.0,
                EventKind::LinePerturb {
                    factor: Some(1.15),
                    gen: None,
                    model: Some(cases::benchmark_model()),
                },
            )],
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());
    }

    #[test]
    fn minimal_single_generator_document_fills_defaults() {
        let doc = r#"{"model": {"c_v": [1.0], "c_q": [[1.0]]}, "duration": 5.0}"#;
        let sc: Scenario = serde_json::from_str(doc).unwrap();
        assert_eq!(sc.model.n(), 1);
        assert_eq!(sc.v_pp_ref, 0.98);
        sc.validate().unwrap();
        let result = run(&sc).unwrap();
        assert_eq!(result.columns.len(), 5 + 8);
    }

    #[test]
    fn perturb_line_coupling_scales_the_chosen_row_column_and_entry() {
        let base = cases::benchmark_model();
        let out = perturb_line_coupling(&base, 1, 1.15).unwrap();
        assert_abs_diff_eq!(out.c_v()[1], 0.0989 * 1.15, epsilon = 1e-15);
        assert_abs_diff_eq!(out.c_v()[0], 0.2715, epsilon = 1e-15);
        assert_abs_diff_eq!(out.c_q()[(1, 1)], 2.8570, epsilon = 1e-15);
        assert_abs_diff_eq!(out.c_q()[(1, 0)], -0.2729 * 1.15, epsilon = 1e-15);
        assert_abs_diff_eq!(out.c_q()[(0, 1)], -0.3528 * 1.15, epsilon = 1e-15);
        assert_abs_diff_eq!(out.c_q()[(2, 3)], -0.3680, epsilon = 1e-15);
        // Unit factor reproduces the base model.
        assert_eq!(perturb_line_coupling(&base, 1, 1.0).unwrap(), base);
    }

    #[test]
    fn events_past_the_duration_never_fire() {
        let sc = Scenario {
            duration: 10.0,
            events: vec![TimedEvent::new(
                50.0,
                EventKind::SetpointStep { v_pp_ref: 1.5 },
            )],
            ..Scenario::default()
        };
        let result = run(&sc).unwrap();
        let refs = result.column("v_pp_ref").unwrap();
        assert!(refs.iter().all(|&r| r == 0.98));
    }
}
