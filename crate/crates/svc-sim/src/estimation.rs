//! Sliding-window numerical differentiation and the ultra-local-model
//! disturbance estimate.
//!
//! The differentiator is the discrete realization of a first-order algebraic
//! derivative estimator: the slope of the least-squares affine fit over the
//! last `n_ndf` samples spaced `t_ndf` apart. It is exact on affine
//! sequences and attenuates zero-mean noise, which is what the control loops
//! need from it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window geometry for a [`Differentiator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct DifferentiatorConfig {
    t_ndf: f64,
    n_ndf: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawConfig {
    t_ndf: f64,
    n_ndf: usize,
}

impl TryFrom<RawConfig> for DifferentiatorConfig {
    type Error = Error;
    fn try_from(raw: RawConfig) -> Result<Self> {
        DifferentiatorConfig::new(raw.t_ndf, raw.n_ndf)
    }
}

impl From<DifferentiatorConfig> for RawConfig {
    fn from(c: DifferentiatorConfig) -> Self {
        RawConfig {
            t_ndf: c.t_ndf,
            n_ndf: c.n_ndf,
        }
    }
}

impl DifferentiatorConfig {
    pub fn new(t_ndf: f64, n_ndf: usize) -> Result<Self> {
        if !(t_ndf.is_finite() && t_ndf > 0.0) {
            return Err(Error::validation("t_ndf", "must be finite and > 0"));
        }
        if n_ndf < 3 {
            return Err(Error::validation("n_ndf", "must be at least 3"));
        }
        Ok(DifferentiatorConfig { t_ndf, n_ndf })
    }

    pub fn t_ndf(&self) -> f64 {
        self.t_ndf
    }

    pub fn n_ndf(&self) -> usize {
        self.n_ndf
    }

    /// Window duration T = (n_ndf − 1)·t_ndf.
    ///
    /// The window must stay short against the closed-loop time constant of
    /// whichever loop consumes the estimate; the controller constructors in
    /// [`crate::control`] enforce T ≤ 1/k_p.
    pub fn window_duration(&self) -> f64 {
        (self.n_ndf as f64 - 1.0) * self.t_ndf
    }
}

/// Slope estimator over a ring buffer of the most recent samples.
///
/// Emits estimates only once the window is full; until then
/// [`Differentiator::push_and_differentiate`] reports `NotReady`.
#[derive(Debug, Clone)]
pub struct Differentiator {
    config: DifferentiatorConfig,
    weights: Vec<f64>,
    window: VecDeque<f64>,
}

impl Differentiator {
    pub fn new(config: DifferentiatorConfig) -> Self {
        let n = config.n_ndf;
        let nf = n as f64;
        // Least-squares slope over samples at t_k = k·t_ndf reduces to a
        // fixed dot product: w_k = (k − (n−1)/2)·12/(t_ndf·n·(n²−1)).
        let scale = 12.0 / (config.t_ndf * nf * (nf * nf - 1.0));
        let mid = (nf - 1.0) / 2.0;
        let weights = (0..n).map(|k| (k as f64 - mid) * scale).collect();
        Differentiator {
            config,
            weights,
            window: VecDeque::with_capacity(n),
        }
    }

    pub fn config(&self) -> &DifferentiatorConfig {
        &self.config
    }

    /// True once the window holds n_ndf samples.
    pub fn is_ready(&self) -> bool {
        self.window.len() == self.config.n_ndf
    }

    /// Discards all buffered samples; the next estimates report `NotReady`
    /// until the window refills.
    pub fn reset(&mut self) {
        self.window.clear();
    }

    /// Pushes a sample and, once the window is full, returns the slope of
    /// the least-squares affine fit over the current window.
    ///
    /// A non-finite sample is rejected without touching the window.
    pub fn push_and_differentiate(&mut self, sample: f64) -> Result<f64> {
        if !sample.is_finite() {
            return Err(Error::NonFiniteSample(sample));
        }
        if self.window.len() == self.config.n_ndf {
            self.window.pop_front();
        }
        self.window.push_back(sample);
        if self.window.len() < self.config.n_ndf {
            return Err(Error::NotReady);
        }
        let mut slope = 0.0;
        for (w, y) in self.weights.iter().zip(self.window.iter()) {
            slope += w * y;
        }
        Ok(slope)
    }
}

/// One step's worth of ultra-local-model estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UltraLocalEstimate {
    pub f_bar: f64,
    pub y_dot: f64,
}

impl UltraLocalEstimate {
    pub fn new(f_bar: f64, y_dot: f64) -> Result<Self> {
        if !f_bar.is_finite() {
            return Err(Error::NonFiniteInput(f_bar));
        }
        if !y_dot.is_finite() {
            return Err(Error::NonFiniteInput(y_dot));
        }
        Ok(UltraLocalEstimate { f_bar, y_dot })
    }
}

/// Disturbance estimate of the ultra-local model `ẏ = F + α·u`:
/// `f_bar = y_dot − alpha·u_delayed`, using the control input applied a
/// small, fixed number of periods earlier.
pub fn estimate_f(y_dot: f64, alpha: f64, u_delayed: f64) -> Result<f64> {
    for v in [y_dot, alpha, u_delayed] {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(v));
        }
    }
    Ok(y_dot - alpha * u_delayed)
}
