//! End-to-end inference: retrieval, alignment, objective assembly and solve.

use rayon::prelude::*;

use crate::align::{align, warp_confidence, warp_depth, AlignParams, WarpField};
use crate::database::{image_features, Candidate, Database};
use crate::error::{Error, Result};
use crate::features::{compute_dense_sift, compute_flow_histogram, compute_gist, FeatureSet, DEFAULT_CELL};
use crate::flow::{estimate_flow_with, flow_confidence_with, FlowField, FlowParams};
use crate::motionseg::{detect_motion, floor_contact, FloorContactDepth, MotionMask, RansacParams, SegmentParams};
use crate::raster::{resize, resize_depth, to_grayscale, DepthMap, GrayImage, ImageRGB, ScalarField};

use super::params::ObjectiveParams;
use super::problem::{
    assemble_single, assemble_video, initial_depth, CandidateSet, VideoTerms, WarpedCandidate,
};
use super::solve::{irls_solve, SolveResult};

/// Parameters of every stage of the pipeline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineParams {
    pub objective: ObjectiveParams,
    pub align: AlignParams,
    pub flow: FlowParams,
    pub ransac: RansacParams,
    pub segment: SegmentParams,
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.align.validate()
    }

    fn segment_params(&self) -> SegmentParams {
        SegmentParams { tau: self.objective.tau, ..self.segment.clone() }
    }
}

/// One aligned candidate, kept for inspection.
#[derive(Clone, Debug)]
pub struct AlignedCandidate {
    pub candidate: Candidate,
    pub warp: WarpField,
    pub depth: DepthMap,
    pub confidence: ScalarField,
}

/// Retrieves the top-K entries for an image at canonical resolution and
/// warps their depths into it.
pub fn warped_candidates(
    db: &Database,
    image: &ImageRGB,
    features: &FeatureSet,
    p: &PipelineParams,
) -> Result<Vec<AlignedCandidate>> {
    if image.dims() != db.canonical_size() {
        return Err(Error::SizeMismatch(format!("query {:?} vs database {:?}", image.dims(), db.canonical_size())));
    }
    let ranked = db.query_candidates(features, p.objective.k)?;
    let query = compute_dense_sift(image, DEFAULT_CELL)?;
    ranked
        .into_par_iter()
        .map(|c| {
            let (_, depth) = db.load(c.index)?;
            let cand = db.descriptors(c.index)?;
            let warp = align(&query, &cand, &p.align)?;
            let confidence = warp_confidence(&query, &cand, &warp)?;
            Ok(AlignedCandidate {
                candidate: c,
                depth: warp_depth(&depth, &warp),
                warp,
                confidence,
            })
        })
        .collect()
}

fn candidate_set(aligned: &[AlignedCandidate]) -> CandidateSet {
    CandidateSet::new(
        aligned
            .iter()
            .map(|a| WarpedCandidate {
                depth: a.depth.clone(),
                confidence: Some(a.confidence.clone()),
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct ImageInference {
    /// Depth at the input's resolution.
    pub depth: DepthMap,
    /// Depth at the database's canonical resolution.
    pub canonical_depth: DepthMap,
    pub candidates: Vec<AlignedCandidate>,
    pub solve: SolveResult,
}

pub fn infer_image(db: &Database, image: &ImageRGB, p: &PipelineParams) -> Result<ImageInference> {
    p.validate()?;
    let (cw, ch) = db.canonical_size();
    let canonical = resize(image, cw, ch);
    let candidates = warped_candidates(db, &canonical, &image_features(&canonical, None)?, p)?;
    let set = candidate_set(&candidates);
    let prob = assemble_single(&canonical, &set, db.prior(), &p.objective)?;
    let init = initial_depth(std::slice::from_ref(&set), db.prior());
    let solve = irls_solve(&prob, &init, &p.objective)?;
    let canonical_depth = solve.frames(cw, ch).remove(0);
    let (w, h) = image.dims();
    Ok(ImageInference { depth: resize_depth(&canonical_depth, w, h), canonical_depth, candidates, solve })
}

/// Frame ranges `[start, end)` of the jointly solved windows.
pub fn window_ranges(frames: usize, window: usize, overlap: usize) -> Vec<(usize, usize)> {
    let window = window.max(1);
    let step = window.saturating_sub(overlap).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(frames);
        out.push((start, end));
        if end >= frames {
            break;
        }
        start += step;
    }
    out
}

/// Blend weight of frame `t` inside window `[start, end)`: linear ramps across
/// the overlaps with the previous and next windows.
fn blend_weight(t: usize, (start, end): (usize, usize), overlap: usize, frames: usize) -> f64 {
    let ramp = (overlap + 1) as f64;
    let rise = if start == 0 { 1.0 } else { ((t - start + 1) as f64 / ramp).min(1.0) };
    let fall = if end >= frames { 1.0 } else { ((end - t) as f64 / ramp).min(1.0) };
    rise.min(fall)
}

/// Temporal inputs of a frame sequence at canonical resolution.
#[derive(Clone, Debug)]
pub struct TemporalInputs {
    /// `flows[t]` is the flow from frame t to t+1.
    pub flows: Vec<FlowField>,
    pub confidence: Vec<ScalarField>,
}

pub fn temporal_inputs(frames: &[ImageRGB], p: &PipelineParams) -> Result<TemporalInputs> {
    let gray: Vec<GrayImage> = frames.iter().map(to_grayscale).collect();
    let pairs: Vec<(FlowField, ScalarField)> = (0..gray.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| {
            let f = estimate_flow_with(&gray[t], &gray[t + 1], &p.flow)?;
            let s = flow_confidence_with(&gray[t], &gray[t + 1], &f, p.objective.sigmoid_midpoint, p.objective.sigmoid_slope)?;
            Ok((f, s))
        })
        .collect::<Result<_>>()?;
    let (flows, confidence) = pairs.into_iter().unzip();
    Ok(TemporalInputs { flows, confidence })
}

#[derive(Clone, Debug)]
pub struct VideoInference {
    /// Per-frame depth at the input resolution.
    pub depths: Vec<DepthMap>,
    pub canonical_depths: Vec<DepthMap>,
    /// Per-frame motion masks at canonical resolution, when motion is enabled.
    pub masks: Option<Vec<MotionMask>>,
    /// Floor contact depths of the moving components, when a second pass ran.
    pub floor: Option<Vec<FloorContactDepth>>,
    /// Objective traces of the windows of the final pass.
    pub traces: Vec<Vec<f64>>,
}

/// Retrieval and alignment for every frame of a canonical-resolution sequence.
pub fn video_candidates(
    db: &Database,
    frames: &[ImageRGB],
    temporal: &TemporalInputs,
    p: &PipelineParams,
) -> Result<Vec<CandidateSet>> {
    let n = frames.len();
    (0..n)
        .map(|t| {
            // the last frame has no forward flow and uses the backward one
            let flow = match n {
                1 => None,
                _ if t + 1 < n => Some(temporal.flows[t].clone()),
                _ => Some(estimate_flow_with(&to_grayscale(&frames[t]), &to_grayscale(&frames[t - 1]), &p.flow)?),
            };
            let features = FeatureSet { gist: compute_gist(&frames[t])?, flow: flow.as_ref().map(compute_flow_histogram) };
            Ok(candidate_set(&warped_candidates(db, &frames[t], &features, p)?))
        })
        .collect()
}

/// Solves the windows of a sequence and blends them into per-frame depth.
pub fn solve_windows(
    frames: &[ImageRGB],
    candidates: &[CandidateSet],
    prior: &DepthMap,
    temporal: &TemporalInputs,
    motion: Option<(&[MotionMask], &[FloorContactDepth])>,
    p: &ObjectiveParams,
) -> Result<(Vec<DepthMap>, Vec<Vec<f64>>)> {
    let n = frames.len();
    if n == 0 {
        return Err(Error::InvalidValue("video has no frames".into()));
    }
    let (w, h) = frames[0].dims();
    let ranges = window_ranges(n, p.window, p.window_overlap);
    let mut sum = vec![vec![0.0; w * h]; n];
    let mut weight = vec![0.0; n];
    let mut traces = Vec::new();
    for &(a, b) in &ranges {
        let terms = VideoTerms {
            frames: &frames[a..b],
            candidates: &candidates[a..b],
            prior,
            flows: &temporal.flows[a..b - 1],
            flow_weights: &temporal.confidence[a..b - 1],
            motion: motion.map(|(m, f)| (&m[a..b], &f[a..b])),
        };
        let prob = assemble_video(&terms, p)?;
        let init = initial_depth(&candidates[a..b], prior);
        let res = irls_solve(&prob, &init, p)?;
        for (k, d) in res.frames(w, h).iter().enumerate() {
            let t = a + k;
            let bw = blend_weight(t, (a, b), p.window_overlap, n);
            for (s, v) in sum[t].iter_mut().zip(d.values()) {
                *s += bw * v;
            }
            weight[t] += bw;
        }
        traces.push(res.trace);
    }
    let depths = sum
        .into_iter()
        .zip(weight)
        .map(|(s, wt)| DepthMap::new(w, h, s.into_iter().map(|v| (v / wt).max(p.depth_floor)).collect()))
        .collect::<Result<_>>()?;
    Ok((depths, traces))
}

/// Video inference: a first pass without motion rows, then, when motion is
/// enabled and anything moves, a second pass pulling moving objects to the
/// depth of the floor they stand on.
pub fn infer_video(db: &Database, frames: &[ImageRGB], p: &PipelineParams) -> Result<VideoInference> {
    p.validate()?;
    let first = frames.first().ok_or_else(|| Error::InvalidValue("video has no frames".into()))?;
    if frames.iter().any(|f| f.dims() != first.dims()) {
        return Err(Error::SizeMismatch("frames differ in size".into()));
    }
    let (cw, ch) = db.canonical_size();
    let canonical: Vec<ImageRGB> = frames.iter().map(|f| resize(f, cw, ch)).collect();
    let temporal = temporal_inputs(&canonical, p)?;
    let candidates = video_candidates(db, &canonical, &temporal, p)?;
    let (mut depths, mut traces) = solve_windows(&canonical, &candidates, db.prior(), &temporal, None, &p.objective)?;

    let mut masks = None;
    let mut floor_out = None;
    if p.objective.motion && canonical.len() >= 2 {
        let analysis = detect_motion(&canonical, &p.ransac, &p.flow, &p.segment_params())?;
        if analysis.masks.iter().any(|m| m.moving_pixels() > 0) {
            let floor: Vec<FloorContactDepth> =
                analysis.masks.iter().zip(&depths).map(|(m, d)| floor_contact(m, d)).collect::<Result<_>>()?;
            let second =
                solve_windows(&canonical, &candidates, db.prior(), &temporal, Some((&analysis.masks, &floor)), &p.objective)?;
            depths = second.0;
            traces = second.1;
            floor_out = Some(floor);
        }
        masks = Some(analysis.masks);
    }
    let (w, h) = first.dims();
    Ok(VideoInference {
        depths: depths.iter().map(|d| resize_depth(d, w, h)).collect(),
        canonical_depths: depths,
        masks,
        floor: floor_out,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_frame_with_overlap() {
        assert_eq!(window_ranges(10, 30, 5), vec![(0, 10)]);
        assert_eq!(window_ranges(60, 30, 5), vec![(0, 30), (25, 55), (50, 60)]);
        for n in 1..80 {
            let r = window_ranges(n, 30, 5);
            assert_eq!(r[0].0, 0);
            assert_eq!(r.last().unwrap().1, n);
            for pair in r.windows(2) {
                assert_eq!(pair[0].1 - pair[1].0, 5);
            }
        }
    }

    #[test]
    fn blend_weights_partition_unity_on_overlaps() {
        let n = 60;
        let r = window_ranges(n, 30, 5);
        for t in 0..n {
            let total: f64 = r.iter().filter(|(a, b)| (*a..*b).contains(&t)).map(|w| blend_weight(t, *w, 5, n)).sum();
            let inside = r.iter().filter(|(a, b)| (*a..*b).contains(&t)).count();
            assert!(total > 0.0);
            if inside == 2 {
                assert!((total - 1.0).abs() < 1e-12, "frame {t}: {total}");
            }
        }
    }
}
