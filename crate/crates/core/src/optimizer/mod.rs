//! Robust depth objectives for single images and videos, and their IRLS solver.

mod infer;
mod params;
mod penalty;
mod problem;
mod solve;

pub use params::ObjectiveParams;
pub use penalty::{irls_weight, robust_norm, smoothness_weights, soft_threshold, ROBUST_EPSILON};
pub use problem::{
    assemble_single, assemble_video, initial_depth, AssembledProblem, CandidateSet, Operator, ResidualBlock, Term,
    VideoTerms, WarpedCandidate,
};
pub use solve::{irls_solve, SolveResult};
pub use infer::{
    infer_image, infer_video, solve_windows, temporal_inputs, video_candidates, warped_candidates, window_ranges, AlignedCandidate,
    ImageInference, PipelineParams, TemporalInputs, VideoInference,
};
