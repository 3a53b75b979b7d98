use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::motionseg::{FloorContactDepth, MotionMask};
use crate::optimizer::params::ObjectiveParams;
use crate::optimizer::penalty::{robust_norm, smoothness_weights};
use crate::raster::{DepthMap, ImageRGB, ScalarField};

/// One warped candidate depth with its per-pixel confidence.
#[derive(Clone, Debug)]
pub struct WarpedCandidate {
    pub depth: DepthMap,
    pub confidence: Option<ScalarField>,
}

/// The K warped candidates of one image or frame.
#[derive(Clone, Debug, Default)]
pub struct CandidateSet {
    pub candidates: Vec<WarpedCandidate>,
}

impl CandidateSet {
    pub fn new(candidates: Vec<WarpedCandidate>) -> Self {
        CandidateSet { candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        for (j, c) in self.candidates.iter().enumerate() {
            if c.depth.dims() != dims {
                return Err(Error::SizeMismatch(format!("candidate {j} is {:?}, expected {dims:?}", c.depth.dims())));
            }
            match &c.confidence {
                None => return Err(Error::MissingConfidence(j)),
                Some(w) if w.dims() != dims => return Err(Error::SizeMismatch(format!("confidence of candidate {j}"))),
                Some(w) if w.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                    return Err(Error::InvalidValue(format!("confidence of candidate {j} must be finite and >= 0")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Per-pixel confidence-weighted median of the valid candidates, falling
    /// back to `fallback` where no candidate carries weight.
    pub fn weighted_median(&self, fallback: &DepthMap) -> Vec<f64> {
        let mut samples: Vec<(f64, f64)> = Vec::with_capacity(self.len());
        (0..fallback.len())
            .map(|i| {
                samples.clear();
                for c in &self.candidates {
                    let w = c.confidence.as_ref().map_or(1.0, |w| w.data()[i]);
                    if let Some(d) = c.depth.get(i).filter(|_| w > 0.0) {
                        samples.push((d, w));
                    }
                }
                if samples.is_empty() {
                    return fallback.values()[i];
                }
                samples.sort_by(|a, b| a.0.total_cmp(&b.0));
                let half = 0.5 * samples.iter().map(|s| s.1).sum::<f64>();
                let mut acc = 0.0;
                for (d, w) in &samples {
                    acc += w;
                    if acc >= half {
                        return *d;
                    }
                }
                samples[samples.len() - 1].0
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Data,
    DataGradX,
    DataGradY,
    SmoothX,
    SmoothY,
    Prior,
    Coherence,
    Motion,
}

/// Linear operator of a residual block. The stencil forms cover every pixel
/// of one frame whose unknowns start at `offset`; forward differences are
/// zero on the last column (row).
#[derive(Clone, Debug)]
pub enum Operator {
    Identity { offset: usize },
    ForwardX { offset: usize, width: usize },
    ForwardY { offset: usize, width: usize },
    Sparse { row_ptr: Vec<usize>, cols: Vec<u32>, coefs: Vec<f64> },
}

/// Rows `weight · φ(A·D − target)` of one term.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub term: Term,
    pub frame: usize,
    pub candidate: Option<usize>,
    pub op: Operator,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl fmt::Display for ResidualBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}[frame {}", self.term, self.frame)?;
        if let Some(c) = self.candidate {
            write!(f, ", candidate {c}")?;
        }
        write!(f, "]")
    }
}

impl ResidualBlock {
    pub fn rows(&self) -> usize {
        self.target.len()
    }

    /// `A·x` for row `r`.
    #[inline]
    pub fn apply_row(&self, r: usize, x: &[f64]) -> f64 {
        match &self.op {
            Operator::Identity { offset } => x[offset + r],
            Operator::ForwardX { offset, width } => {
                if (r + 1) % width == 0 {
                    0.0
                } else {
                    x[offset + r + 1] - x[offset + r]
                }
            }
            Operator::ForwardY { offset, width } => {
                if r + width >= self.target.len() {
                    0.0
                } else {
                    x[offset + r + width] - x[offset + r]
                }
            }
            Operator::Sparse { row_ptr, cols, coefs } => {
                (row_ptr[r]..row_ptr[r + 1]).map(|k| coefs[k] * x[cols[k] as usize]).sum()
            }
        }
    }

    #[inline]
    pub fn residual(&self, r: usize, x: &[f64]) -> f64 {
        self.apply_row(r, x) - self.target[r]
    }

    /// Nonzero `(column, coefficient)` pairs of row `r`.
    pub fn row_entries(&self, r: usize) -> Vec<(usize, f64)> {
        match &self.op {
            Operator::Identity { offset } => vec![(offset + r, 1.0)],
            Operator::ForwardX { offset, width } => {
                if (r + 1) % width == 0 {
                    vec![]
                } else {
                    vec![(offset + r + 1, 1.0), (offset + r, -1.0)]
                }
            }
            Operator::ForwardY { offset, width } => {
                if r + width >= self.target.len() {
                    vec![]
                } else {
                    vec![(offset + r + width, 1.0), (offset + r, -1.0)]
                }
            }
            Operator::Sparse { row_ptr, cols, coefs } => {
                (row_ptr[r]..row_ptr[r + 1]).map(|k| (cols[k] as usize, coefs[k])).collect()
            }
        }
    }

    pub fn objective(&self, x: &[f64], epsilon: f64) -> f64 {
        crate::optimizer::solve::chunked_sum(self.rows(), |r| self.weight[r] * robust_norm(self.residual(r, x), epsilon))
    }
}

struct SparseBuilder {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    coefs: Vec<f64>,
    target: Vec<f64>,
    weight: Vec<f64>,
}

impl SparseBuilder {
    fn new() -> Self {
        SparseBuilder { row_ptr: vec![0], cols: Vec::new(), coefs: Vec::new(), target: Vec::new(), weight: Vec::new() }
    }

    fn push(&mut self, entries: &[(usize, f64)], target: f64, weight: f64) {
        for (c, v) in entries {
            self.cols.push(*c as u32);
            self.coefs.push(*v);
        }
        self.row_ptr.push(self.cols.len());
        self.target.push(target);
        self.weight.push(weight);
    }

    fn finish(self, term: Term, frame: usize) -> ResidualBlock {
        ResidualBlock {
            term,
            frame,
            candidate: None,
            op: Operator::Sparse { row_ptr: self.row_ptr, cols: self.cols, coefs: self.coefs },
            target: self.target,
            weight: self.weight,
        }
    }
}

/// Robust least-squares problem over the stacked depth unknowns of one or more frames.
#[derive(Clone, Debug)]
pub struct AssembledProblem {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub blocks: Vec<ResidualBlock>,
}

impl AssembledProblem {
    pub fn unknowns(&self) -> usize {
        self.width * self.height * self.frames
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows()).sum()
    }

    pub fn rows_of(&self, term: Term) -> usize {
        self.blocks.iter().filter(|b| b.term == term).map(|b| b.rows()).sum()
    }

    /// Objective value, without the normalization constant.
    pub fn objective(&self, x: &[f64], epsilon: f64) -> f64 {
        self.blocks.iter().map(|b| b.objective(x, epsilon)).sum()
    }
}

fn push_frame_blocks(
    blocks: &mut Vec<ResidualBlock>,
    frame: usize,
    image: &ImageRGB,
    candidates: &CandidateSet,
    prior: &DepthMap,
    p: &ObjectiveParams,
) -> Result<()> {
    let (w, h) = image.dims();
    let n = w * h;
    let offset = frame * n;
    if prior.dims() != (w, h) {
        return Err(Error::SizeMismatch(format!("prior {:?} vs image {:?}", prior.dims(), (w, h))));
    }
    if let Some(i) = (0..n).find(|i| prior.get(*i).is_none()) {
        return Err(Error::InvalidValue(format!("prior has an invalid pixel at {i}")));
    }
    candidates.check((w, h))?;

    let block = |term, candidate, op, target, weight| ResidualBlock { term, frame, candidate, op, target, weight };
    let per_candidate: Vec<[ResidualBlock; 3]> = candidates
        .candidates
        .par_iter()
        .enumerate()
        .map(|(j, c)| {
            let conf = c.confidence.as_ref().expect("checked above").data();
            let d = c.depth.values();
            let valid = c.depth.valid();
            let wi: Vec<f64> = (0..n).map(|i| if valid[i] { conf[i] } else { 0.0 }).collect();
            // gradients of the warped candidate, usable only where both ends are valid
            let grad = |step: usize, last: &dyn Fn(usize) -> bool| -> (Vec<f64>, Vec<f64>) {
                (0..n)
                    .map(|i| {
                        if last(i) {
                            (0.0, p.gamma * wi[i])
                        } else if valid[i] && valid[i + step] {
                            (d[i + step] - d[i], p.gamma * wi[i])
                        } else {
                            (0.0, 0.0)
                        }
                    })
                    .unzip()
            };
            let (tx, wx) = grad(1, &|i| (i + 1) % w == 0);
            let (ty, wy) = grad(w, &|i| i + w >= n);
            [
                block(Term::Data, Some(j), Operator::Identity { offset }, d.to_vec(), wi),
                block(Term::DataGradX, Some(j), Operator::ForwardX { offset, width: w }, tx, wx),
                block(Term::DataGradY, Some(j), Operator::ForwardY { offset, width: w }, ty, wy),
            ]
        })
        .collect();
    blocks.extend(per_candidate.into_iter().flatten());

    let (sx, sy) = smoothness_weights(image, p.sigmoid_midpoint, p.sigmoid_slope)?;
    let scale = |s: &ScalarField| s.data().iter().map(|v| p.alpha * v).collect::<Vec<_>>();
    blocks.push(block(Term::SmoothX, None, Operator::ForwardX { offset, width: w }, vec![0.0; n], scale(&sx)));
    blocks.push(block(Term::SmoothY, None, Operator::ForwardY { offset, width: w }, vec![0.0; n], scale(&sy)));
    blocks.push(block(Term::Prior, None, Operator::Identity { offset }, prior.values().to_vec(), vec![p.beta; n]));
    Ok(())
}

/// Data, smoothness and prior rows of a single image.
pub fn assemble_single(
    image: &ImageRGB,
    candidates: &CandidateSet,
    prior: &DepthMap,
    p: &ObjectiveParams,
) -> Result<AssembledProblem> {
    let mut blocks = Vec::new();
    push_frame_blocks(&mut blocks, 0, image, candidates, prior, p)?;
    Ok(AssembledProblem { width: image.width(), height: image.height(), frames: 1, blocks })
}

/// Inputs of the video objective. `flows[t]` and `flow_weights[t]` describe
/// frame t to t+1; `motion` pairs each frame's mask with its floor contact depth.
#[derive(Clone, Copy, Debug)]
pub struct VideoTerms<'a> {
    pub frames: &'a [ImageRGB],
    pub candidates: &'a [CandidateSet],
    pub prior: &'a DepthMap,
    pub flows: &'a [FlowField],
    pub flow_weights: &'a [ScalarField],
    pub motion: Option<(&'a [MotionMask], &'a [FloorContactDepth])>,
}

/// All single-image rows per frame, plus coherence rows coupling consecutive
/// frames along the flow and motion rows pulling moving pixels to their floor
/// contact depth.
pub fn assemble_video(terms: &VideoTerms<'_>, p: &ObjectiveParams) -> Result<AssembledProblem> {
    let t_len = terms.frames.len();
    if t_len == 0 {
        return Err(Error::InvalidValue("video has no frames".into()));
    }
    let check = |what: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::SizeMismatch(format!("{got} {what} for {t_len} frames (expected {want})")))
        }
    };
    check("candidate sets", terms.candidates.len(), t_len)?;
    check("flows", terms.flows.len(), t_len - 1)?;
    check("flow weights", terms.flow_weights.len(), t_len - 1)?;
    if let Some((masks, floor)) = terms.motion {
        check("motion masks", masks.len(), t_len)?;
        check("floor contact maps", floor.len(), t_len)?;
    }
    let (w, h) = terms.frames[0].dims();
    let n = w * h;
    if terms.frames.iter().any(|f| f.dims() != (w, h)) {
        return Err(Error::SizeMismatch("frames differ in size".into()));
    }

    let mut blocks = Vec::new();
    for t in 0..t_len {
        push_frame_blocks(&mut blocks, t, &terms.frames[t], &terms.candidates[t], terms.prior, p)?;
    }

    if p.temporal {
        for t in 0..t_len - 1 {
            let flow = &terms.flows[t];
            let s = &terms.flow_weights[t];
            if flow.dims() != (w, h) || s.dims() != (w, h) {
                return Err(Error::SizeMismatch(format!("flow {t} is not {w}x{h}")));
            }
            let mut rows = SparseBuilder::new();
            let next = (t + 1) * n;
            for i in 0..n {
                if !flow.valid()[i] {
                    continue;
                }
                let (u, v) = flow.at(i);
                let tx = ((i % w) as f64 + u).clamp(0.0, (w - 1) as f64);
                let ty = ((i / w) as f64 + v).clamp(0.0, (h - 1) as f64);
                let x0 = tx.floor() as usize;
                let y0 = ty.floor() as usize;
                let fx = tx - x0 as f64;
                let fy = ty - y0 as f64;
                let mut entries: Vec<(usize, f64)> = Vec::with_capacity(5);
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        if wx * wy > 0.0 {
                            entries.push((next + (y0 + dy) * w + x0 + dx, wx * wy));
                        }
                    }
                }
                entries.push((t * n + i, -1.0));
                rows.push(&entries, 0.0, p.nu * s.data()[i]);
            }
            blocks.push(rows.finish(Term::Coherence, t));
        }
    }

    if let Some((masks, floor)) = terms.motion {
        for t in 0..t_len {
            let (mask, m) = (&masks[t], &floor[t]);
            if mask.mask.dims() != (w, h) || m.depth.dims() != (w, h) {
                return Err(Error::SizeMismatch(format!("motion inputs of frame {t}")));
            }
            let mut rows = SparseBuilder::new();
            for i in 0..n {
                if mask.mask.data()[i] && m.defined[i] {
                    rows.push(&[(t * n + i, 1.0)], m.depth.data()[i], p.eta);
                }
            }
            blocks.push(rows.finish(Term::Motion, t));
        }
    }

    Ok(AssembledProblem { width: w, height: h, frames: t_len, blocks })
}

/// Per-frame confidence-weighted median of the candidates, prior where none is usable.
pub fn initial_depth(candidates: &[CandidateSet], prior: &DepthMap) -> Vec<f64> {
    candidates.iter().flat_map(|c| c.weighted_median(prior)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn candidate(depth: DepthMap, w: f64) -> WarpedCandidate {
        let (width, height) = depth.dims();
        WarpedCandidate { depth, confidence: Some(ScalarField::filled(width, height, w)) }
    }

    fn ramp_image(w: usize, h: usize) -> ImageRGB {
        ImageRGB::from_fn(w, h, |x, y| [(x + y) as f64 / (w + h) as f64; 3])
    }

    #[test]
    fn row_counts() {
        let (w, h) = (6, 5);
        let cands = CandidateSet::new((0..3).map(|k| candidate(DepthMap::constant(w, h, 1.0 + k as f64), 1.0)).collect());
        let prob = assemble_single(&ramp_image(w, h), &cands, &DepthMap::constant(w, h, 2.0), &ObjectiveParams::default())
            .unwrap();
        let n = w * h;
        assert_eq!(prob.rows_of(Term::Data) + prob.rows_of(Term::DataGradX) + prob.rows_of(Term::DataGradY), 3 * 3 * n);
        assert_eq!(prob.rows_of(Term::SmoothX) + prob.rows_of(Term::SmoothY), 2 * n);
        assert_eq!(prob.rows_of(Term::Prior), n);
        assert_eq!(prob.total_rows(), 3 * 3 * n + 3 * n);
    }

    #[test]
    fn rows_reference_in_bounds_unknowns() {
        let (w, h) = (5, 4);
        let frames = vec![ramp_image(w, h); 3];
        let cands: Vec<CandidateSet> =
            (0..3).map(|_| CandidateSet::new(vec![candidate(DepthMap::constant(w, h, 3.0), 1.0)])).collect();
        let flows = vec![FlowField::uniform(w, h, 0.7, -0.4); 2];
        let s = vec![ScalarField::filled(w, h, 1.0); 2];
        let prior = DepthMap::constant(w, h, 3.0);
        let terms = VideoTerms { frames: &frames, candidates: &cands, prior: &prior, flows: &flows, flow_weights: &s, motion: None };
        let prob = assemble_video(&terms, &ObjectiveParams::default()).unwrap();
        for b in &prob.blocks {
            assert!(b.weight.iter().all(|v| *v >= 0.0));
            for r in 0..b.rows() {
                assert!(b.row_entries(r).iter().all(|(c, _)| *c < prob.unknowns()), "{b}");
            }
        }
        assert!(prob.rows_of(Term::Coherence) > 0);
    }

    #[test]
    fn structured_rows_match_entries() {
        let (w, h) = (4, 3);
        let cands = CandidateSet::new(vec![candidate(DepthMap::constant(w, h, 1.0), 1.0)]);
        let prob = assemble_single(&ramp_image(w, h), &cands, &DepthMap::constant(w, h, 2.0), &ObjectiveParams::default())
            .unwrap();
        let x: Vec<f64> = (0..w * h).map(|i| (i * i) as f64 * 0.1).collect();
        for b in &prob.blocks {
            for r in 0..b.rows() {
                let direct: f64 = b.row_entries(r).iter().map(|(c, v)| v * x[*c]).sum();
                assert_eq!(direct, b.apply_row(r, &x));
            }
        }
    }

    #[test]
    fn single_frame_video_equals_single_image() {
        let (w, h) = (5, 5);
        let img = ramp_image(w, h);
        let cands = CandidateSet::new(vec![candidate(DepthMap::constant(w, h, 4.0), 0.5)]);
        let prior = DepthMap::constant(w, h, 2.0);
        let p = ObjectiveParams::default();
        let single = assemble_single(&img, &cands, &prior, &p).unwrap();
        let frames = [img];
        let sets = [cands];
        let terms = VideoTerms { frames: &frames, candidates: &sets, prior: &prior, flows: &[], flow_weights: &[], motion: None };
        let video = assemble_video(&terms, &p).unwrap();
        assert_eq!(single.total_rows(), video.total_rows());
        let x: Vec<f64> = (0..w * h).map(|i| 1.0 + i as f64 * 0.3).collect();
        assert_eq!(single.objective(&x, p.epsilon), video.objective(&x, p.epsilon));
    }

    #[test]
    fn empty_motion_mask_adds_no_rows() {
        let (w, h) = (4, 4);
        let frames = vec![ramp_image(w, h); 2];
        let cands: Vec<CandidateSet> =
            (0..2).map(|_| CandidateSet::new(vec![candidate(DepthMap::constant(w, h, 3.0), 1.0)])).collect();
        let flows = vec![FlowField::zero(w, h)];
        let s = vec![ScalarField::filled(w, h, 1.0)];
        let prior = DepthMap::constant(w, h, 3.0);
        let masks = vec![MotionMask::from_mask(Raster::filled(w, h, false)); 2];
        let floor = vec![FloorContactDepth { depth: ScalarField::filled(w, h, 7.0), defined: vec![true; w * h] }; 2];
        let terms = VideoTerms {
            frames: &frames,
            candidates: &cands,
            prior: &prior,
            flows: &flows,
            flow_weights: &s,
            motion: Some((&masks, &floor)),
        };
        assert_eq!(assemble_video(&terms, &ObjectiveParams::default()).unwrap().rows_of(Term::Motion), 0);
    }

    #[test]
    fn missing_confidence_is_an_error() {
        let (w, h) = (4, 4);
        let cands = CandidateSet::new(vec![WarpedCandidate { depth: DepthMap::constant(w, h, 1.0), confidence: None }]);
        let r = assemble_single(&ramp_image(w, h), &cands, &DepthMap::constant(w, h, 1.0), &ObjectiveParams::default());
        assert!(matches!(r, Err(Error::MissingConfidence(0))));
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let (w, h) = (4, 4);
        let frames = vec![ramp_image(w, h); 2];
        let cands = vec![CandidateSet::new(vec![candidate(DepthMap::constant(w, h, 1.0), 1.0)])];
        let prior = DepthMap::constant(w, h, 1.0);
        let terms = VideoTerms { frames: &frames, candidates: &cands, prior: &prior, flows: &[], flow_weights: &[], motion: None };
        assert!(matches!(assemble_video(&terms, &ObjectiveParams::default()), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn weighted_median_prefers_heavy_candidates() {
        let (w, h) = (2, 2);
        let set = CandidateSet::new(vec![
            candidate(DepthMap::constant(w, h, 1.0), 0.1),
            candidate(DepthMap::constant(w, h, 5.0), 1.0),
            candidate(DepthMap::constant(w, h, 9.0), 0.2),
        ]);
        assert!(set.weighted_median(&DepthMap::constant(w, h, 3.0)).iter().all(|v| *v == 5.0));
        let zero = CandidateSet::new(vec![candidate(DepthMap::constant(w, h, 1.0), 0.0)]);
        assert!(zero.weighted_median(&DepthMap::constant(w, h, 3.0)).iter().all(|v| *v == 3.0));
    }
}
