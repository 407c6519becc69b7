//! Discrete-time surrogate of the zone grid.
//!
//! Each connected generator's terminal voltage tracks its (clamped) AVR
//! setpoint through a first-order lag advanced by exact discretization, so
//! stepping is substep-invariant. Everything electrical above that is
//! algebraic: the sensitivity model maps terminal voltages to the pilot
//! voltage and reactive powers at every instant, plus additive disturbance
//! terms. Disconnected generators are frozen and contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reduce_model, ActiveMask, SensitivityModel};

/// Consistency bound for the algebraic outputs stored on [`GridState`].
pub const CONSISTENCY_TOL: f64 = 1e-12;

/// Per-generator AVR surrogate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeneratorParams", into = "RawGeneratorParams")]
pub struct GeneratorParams {
    tau_avr: f64,
    v_base: f64,
    v_min: f64,
    v_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct RawGeneratorParams {
    tau_avr: f64,
    v_base: f64,
    v_min: f64,
    v_max: f64,
}

impl Default for RawGeneratorParams {
    fn default() -> Self {
        RawGeneratorParams {
            tau_avr: 0.5,
            v_base: 1.0,
            v_min: 0.9,
            v_max: 1.1,
        }
    }
}

impl TryFrom<RawGeneratorParams> for GeneratorParams {
    type Error = Error;
    fn try_from(raw: RawGeneratorParams) -> Result<Self> {
        GeneratorParams::new(raw.tau_avr, raw.v_base, raw.v_min, raw.v_max)
    }
}

impl From<GeneratorParams> for RawGeneratorParams {
    fn from(p: GeneratorParams) -> Self {
        RawGeneratorParams {
            tau_avr: p.tau_avr,
            v_base: p.v_base,
            v_min: p.v_min,
            v_max: p.v_max,
        }
    }
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams::try_from(RawGeneratorParams::default()).expect("defaults are valid")
    }
}

impl GeneratorParams {
    /// AVRs settle in under a second, so `tau_avr` must lie in (0, 1) s.
    /// The setpoint band must bracket the base setpoint strictly.
    pub fn new(tau_avr: f64, v_base: f64, v_min: f64, v_max: f64) -> Result<Self> {
        if !(tau_avr.is_finite() && tau_avr > 0.0 && tau_avr < 1.0) {
            return Err(Error::validation("tau_avr", "must lie in (0, 1) seconds"));
        }
        for (name, v) in [("v_base", v_base), ("v_min", v_min), ("v_max", v_max)] {
            if !v.is_finite() {
                return Err(Error::validation(name, "must be finite"));
            }
        }
        if !(v_min < v_base && v_base < v_max) {
            return Err(Error::validation(
                "v_min/v_base/v_max",
                "require v_min < v_base < v_max",
            ));
        }
        Ok(GeneratorParams {
            tau_avr,
            v_base,
            v_min,
            v_max,
        })
    }

    pub fn tau_avr(&self) -> f64 {
        self.tau_avr
    }

    pub fn v_base(&self) -> f64 {
        self.v_base
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// The AVR setpoint actually applied for a correction `u1`.
    pub fn setpoint(&self, u1: f64) -> f64 {
        (self.v_base + u1).clamp(self.v_min, self.v_max)
    }

    /// Correction bounds that keep the setpoint inside the band.
    pub fn u_limits(&self) -> (f64, f64) {
        (self.v_min - self.v_base, self.v_max - self.v_base)
    }
}

/// Simulation step size plus the benchmark's recorded sampling metadata.
///
/// `dt_plant` must also be at most a tenth of the fastest AVR time constant
/// and divide both controller periods; those cross-field checks live with
/// scenario validation, where the other values are known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlantConfig", into = "RawPlantConfig")]
pub struct PlantConfig {
    dt_plant: f64,
    t_power: f64,
    t_control: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct RawPlantConfig {
    dt_plant: f64,
    t_power: f64,
    t_control: f64,
}

impl Default for RawPlantConfig {
    fn default() -> Self {
        RawPlantConfig {
            dt_plant: 0.01,
            // Original benchmark sampling rates, kept as metadata only.
            t_power: 1e-5,
            t_control: 1e-4,
        }
    }
}

impl TryFrom<RawPlantConfig> for PlantConfig {
    type Error = Error;
    fn try_from(raw: RawPlantConfig) -> Result<Self> {
        PlantConfig::new(raw.dt_plant, raw.t_power, raw.t_control)
    }
}

impl From<PlantConfig> for RawPlantConfig {
    fn from(c: PlantConfig) -> Self {
        RawPlantConfig {
            dt_plant: c.dt_plant,
            t_power: c.t_power,
            t_control: c.t_control,
        }
    }
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig::try_from(RawPlantConfig::default()).expect("defaults are valid")
    }
}

impl PlantConfig {
    pub fn new(dt_plant: f64, t_power: f64, t_control: f64) -> Result<Self> {
        for (name, v) in [
            ("dt_plant", dt_plant),
            ("t_power", t_power),
            ("t_control", t_control),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, "must be finite and > 0"));
            }
        }
        Ok(PlantConfig {
            dt_plant,
            t_power,
            t_control,
        })
    }

    pub fn dt_plant(&self) -> f64 {
        self.dt_plant
    }

    pub fn t_power(&self) -> f64 {
        self.t_power
    }

    pub fn t_control(&self) -> f64 {
        self.t_control
    }
}

/// Full plant state at one instant.
///
/// Invariant (checked to [`CONSISTENCY_TOL`]): `v_pp` equals the reduced
/// pilot row dotted with connected terminal voltages plus `d_v`, and `q`
/// equals the reduced sensitivity rows plus `d_q` on connected generators,
/// exactly 0 on disconnected ones.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    t: f64,
    v_t: Vec<f64>,
    q: Vec<f64>,
    v_pp: f64,
    d_v: f64,
    d_q: Vec<f64>,
    mask: ActiveMask,
    model: SensitivityModel,
}

impl GridState {
    pub fn new(model: SensitivityModel, mask: ActiveMask, v_t: Vec<f64>) -> Result<Self> {
        let n = model.n();
        if mask.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: mask.len(),
            });
        }
        if v_t.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v_t.len(),
            });
        }
        if !v_t.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("v_t", "entries must be finite"));
        }
        let mut state = GridState {
            t: 0.0,
            v_t,
            q: vec![0.0; n],
            v_pp: 0.0,
            d_v: 0.0,
            d_q: vec![0.0; n],
            mask,
            model,
        };
        state.recompute();
        Ok(state)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn v_t(&self) -> &[f64] {
        &self.v_t
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn v_pp(&self) -> f64 {
        self.v_pp
    }

    pub fn d_v(&self) -> f64 {
        self.d_v
    }

    pub fn d_q(&self) -> &[f64] {
        &self.d_q
    }

    pub fn mask(&self) -> &ActiveMask {
        &self.mask
    }

    pub fn model(&self) -> &SensitivityModel {
        &self.model
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    /// Recomputes the algebraic outputs from terminal voltages, masks and
    /// disturbances. The single writer of `v_pp` and `q`.
    fn recompute(&mut self) {
        let n = self.n();
        let mut v_pp = 0.0;
        for i in 0..n {
            if self.mask.is_connected(i) {
                v_pp += self.model.c_v()[i] * self.v_t[i];
            }
        }
        self.v_pp = v_pp + self.d_v;
        for i in 0..n {
            if self.mask.is_connected(i) {
                let mut qi = 0.0;
                for j in 0..n {
                    if self.mask.is_connected(j) {
                        qi += self.model.c_q()[(i, j)] * self.v_t[j];
                    }
                }
                self.q[i] = qi + self.d_q[i];
            } else {
                self.q[i] = 0.0;
            }
        }
    }

    /// Verifies the algebraic-consistency invariant.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let mut probe = self.clone();
        probe.recompute();
        if (probe.v_pp - self.v_pp).abs() > tol {
            return Err(Error::validation(
                "v_pp",
                format!("inconsistent by {:e}", (probe.v_pp - self.v_pp).abs()),
            ));
        }
        for i in 0..self.n() {
            if (probe.q[i] - self.q[i]).abs() > tol {
                return Err(Error::validation(
                    "q",
                    format!("entry {i} inconsistent by {:e}", (probe.q[i] - self.q[i]).abs()),
                ));
            }
        }
        Ok(())
    }
}

/// Advances every connected generator's terminal voltage by `dt` through the
/// exact discretization of `τ·v̇ = v_set − v_t`, then refreshes the
/// algebraic outputs and the clock. Disconnected generators stay frozen.
pub fn plant_step(
    state: &mut GridState,
    params: &[GeneratorParams],
    setpoint_corrections: &[f64],
    dt: f64,
) -> Result<()> {
    let n = state.n();
    if params.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: params.len(),
        });
    }
    if setpoint_corrections.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: setpoint_corrections.len(),
        });
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation("dt", "must be finite and > 0"));
    }
    for &u in setpoint_corrections {
        if !u.is_finite() {
            return Err(Error::NonFiniteInput(u));
        }
    }
    for i in 0..n {
        if !state.mask.is_connected(i) {
            continue;
        }
        let v_set = params[i].setpoint(setpoint_corrections[i]);
        let decay = (-dt / params[i].tau_avr()).exp();
        state.v_t[i] = v_set + (state.v_t[i] - v_set) * decay;
    }
    state.t += dt;
    state.recompute();
    debug_assert!(state.check_consistency(CONSISTENCY_TOL).is_ok());
    Ok(())
}

/// Sets (does not accumulate) the additive disturbance terms and refreshes
/// the algebraic outputs.
pub fn apply_disturbance(state: &mut GridState, d_v: f64, d_q: &[f64]) -> Result<()> {
    if !d_v.is_finite() {
        return Err(Error::NonFiniteInput(d_v));
    }
    if d_q.len() != state.n() {
        return Err(Error::DimensionMismatch {
            expected: state.n(),
            got: d_q.len(),
        });
    }
    for &d in d_q {
        if !d.is_finite() {
            return Err(Error::NonFiniteInput(d));
        }
    }
    state.d_v = d_v;
    state.d_q.copy_from_slice(d_q);
    state.recompute();
    debug_assert!(state.check_consistency(CONSISTENCY_TOL).is_ok());
    Ok(())
}

/// A topology event payload: swap the sensitivity model, the mask, or both.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyChange {
    Model(SensitivityModel),
    Mask(ActiveMask),
}

/// Swaps the sensitivity model and/or connection mask, freezing newly
/// disconnected generators, and refreshes the algebraic outputs. The reduced
/// sensitivity block is probed for invertibility before the swap is applied.
pub fn apply_topology(state: &mut GridState, change: TopologyChange) -> Result<()> {
    match change {
        TopologyChange::Model(model) => {
            if model.n() != state.n() {
                return Err(Error::DimensionMismatch {
                    expected: state.n(),
                    got: model.n(),
                });
            }
            // Rejects models whose connected block cannot be solved against.
            reduce_model(&model, &state.mask)?;
            state.model = model;
        }
        TopologyChange::Mask(mask) => {
            if mask.len() != state.n() {
                return Err(Error::DimensionMismatch {
                    expected: state.n(),
                    got: mask.len(),
                });
            }
            reduce_model(&state.model, &mask)?;
            state.mask = mask;
        }
    }
    state.recompute();
    debug_assert!(state.check_consistency(CONSISTENCY_TOL).is_ok());
    Ok(())
}
