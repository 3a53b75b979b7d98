use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every scalar knob of the depth objectives and their solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveParams {
    /// Spatial smoothness weight.
    pub alpha: f64,
    /// Database prior weight.
    pub beta: f64,
    /// Weight of the candidate depth-gradient rows.
    pub gamma: f64,
    /// Temporal coherence weight.
    pub nu: f64,
    /// Motion (floor contact) weight.
    pub eta: f64,
    /// Smoothing constant of the robust norm.
    pub epsilon: f64,
    pub sigmoid_midpoint: f64,
    pub sigmoid_slope: f64,
    /// Threshold of the relative-difference motion statistic.
    pub tau: f64,
    /// Number of candidates retrieved per image or frame.
    pub k: usize,
    pub max_outer_iterations: usize,
    pub inner_tolerance: f64,
    pub max_inner_iterations: usize,
    pub outer_tolerance: f64,
    /// Frames per jointly solved video window.
    pub window: usize,
    pub window_overlap: usize,
    pub depth_floor: f64,
    /// Enables the temporal coherence rows of the video objective.
    pub temporal: bool,
    /// Enables motion segmentation and the second, motion-aware pass.
    pub motion: bool,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            alpha: 10.0,
            beta: 0.5,
            gamma: 10.0,
            nu: 100.0,
            eta: 5.0,
            epsilon: 1e-4,
            sigmoid_midpoint: 0.05,
            sigmoid_slope: 0.01,
            tau: 0.01,
            k: 7,
            max_outer_iterations: 25,
            inner_tolerance: 1e-6,
            max_inner_iterations: 400,
            outer_tolerance: 1e-5,
            window: 30,
            window_overlap: 5,
            depth_floor: 0.01,
            temporal: true,
            motion: true,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("nu", self.nu),
            ("eta", self.eta),
            ("inner_tolerance", self.inner_tolerance),
            ("outer_tolerance", self.outer_tolerance),
            ("depth_floor", self.depth_floor),
            ("tau", self.tau),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.sigmoid_slope.is_finite() && self.sigmoid_slope > 0.0) {
            return Err(Error::Config("sigmoid_slope must be > 0".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.window == 0 || self.window_overlap >= self.window {
            return Err(Error::Config(format!(
                "window ({}) must be >= 1 and exceed the overlap ({})",
                self.window, self.window_overlap
            )));
        }
        Ok(())
    }
}
