//! Global descriptors for retrieval and dense descriptors for alignment.
//!
//! The flow histogram is a stand-in for a motion feature whose exact form is
//! not published: 8 orientation octants times a `< 1 px` / `>= 1 px`
//! magnitude split, L1-normalized over valid pixels.

mod gist;
mod sift;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;

pub use gist::{compute_gist, gabor_response, gist_energies, scale_frequency, GistDescriptor, GIST_LEN};
pub use sift::{compute_dense_sift, dense_sift_gray, normalize_sift, DescriptorGrid, DEFAULT_CELL, SIFT_DIM};

pub const FLOW_HIST_LEN: usize = 16;
/// Weight of the flow-histogram distance relative to the GIST distance.
pub const FLOW_FEATURE_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowHistogram(Vec<f32>);

impl FlowHistogram {
    pub fn from_vec(v: Vec<f32>) -> Result<Self> {
        if v.len() != FLOW_HIST_LEN {
            return Err(Error::Dimensions(format!("flow histogram length {} != {FLOW_HIST_LEN}", v.len())));
        }
        Ok(FlowHistogram(v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Bin index of `(octant, large)`.
    pub fn bin(octant: usize, large: bool) -> usize {
        octant * 2 + large as usize
    }
}

pub fn compute_flow_histogram(flow: &FlowField) -> FlowHistogram {
    let mut hist = [0f64; FLOW_HIST_LEN];
    let mut n = 0usize;
    for i in 0..flow.len() {
        if !flow.valid()[i] {
            continue;
        }
        let (u, v) = flow.at(i);
        // atan2(0, 0) == 0, so zero flow lands in octant 0
        let angle = v.atan2(u).rem_euclid(2.0 * PI);
        let octant = ((angle / (PI / 4.0)).floor() as usize) % 8;
        hist[FlowHistogram::bin(octant, u.hypot(v) >= 1.0)] += 1.0;
        n += 1;
    }
    if n > 0 {
        hist.iter_mut().for_each(|h| *h /= n as f64);
    }
    FlowHistogram(hist.iter().map(|h| *h as f32).collect())
}

/// Retrieval features of one image or frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub gist: GistDescriptor,
    pub flow: Option<FlowHistogram>,
}

fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Squared GIST distance plus the weighted squared flow-histogram distance
/// when both sides carry one.
pub fn match_distance(a: &FeatureSet, b: &FeatureSet) -> f64 {
    let mut d = squared_l2(a.gist.as_slice(), b.gist.as_slice());
    if let (Some(fa), Some(fb)) = (&a.flow, &b.flow) {
        d += FLOW_FEATURE_WEIGHT * squared_l2(fa.as_slice(), fb.as_slice());
    }
    d
}
