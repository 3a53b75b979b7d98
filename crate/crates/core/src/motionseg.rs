//! Moving-object segmentation for videos shot from a rotating (non-translating)
//! camera: exposure normalization, homography stabilization, median background
//! and relative differencing, plus the floor-contact depth of each mover.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{estimate_flow_with, FlowField, FlowParams};
use crate::raster::{
    gaussian_blur, histogram_match, to_grayscale, warp_bilinear, DepthMap, GrayImage, Homography, ImageRGB, Raster,
    ScalarField,
};

/// A 4-connected region of moving pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub label: u32,
    pub area: usize,
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
}

/// Binary motion mask of one frame with its 4-connected component labels (0 = static).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask {
    pub mask: Raster<bool>,
    pub labels: Raster<u32>,
    pub components: Vec<Component>,
}

impl MotionMask {
    pub fn from_mask(mask: Raster<bool>) -> Self {
        let (labels, components) = label_components(&mask);
        MotionMask { mask, labels, components }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        MotionMask::from_mask(Raster::filled(width, height, false))
    }

    pub fn moving_pixels(&self) -> usize {
        self.mask.data().iter().filter(|m| **m).count()
    }
}

/// Per-frame floor contact depth `M`, defined on moving pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FloorContactDepth {
    pub depth: ScalarField,
    pub defined: Vec<bool>,
}

fn label_components(mask: &Raster<bool>) -> (Raster<u32>, Vec<Component>) {
    let (w, h) = mask.dims();
    let mut labels = Raster::filled(w, h, 0u32);
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data()[start] || labels.data()[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        let mut c = Component { label, area: 0, x_min: w, x_max: 0, y_min: h, y_max: 0 };
        labels.data_mut()[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            c.area += 1;
            c.x_min = c.x_min.min(x);
            c.x_max = c.x_max.max(x);
            c.y_min = c.y_min.min(y);
            c.y_max = c.y_max.max(y);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if mask.data()[j] && labels.data()[j] == 0 {
                    labels.data_mut()[j] = label;
                    queue.push_back(j);
                }
            }
        }
        components.push(c);
    }
    (labels, components)
}

/// Histogram-matches every frame, channel by channel, to the frame with the
/// lowest mean luminance.
pub fn normalize_exposure(frames: &[ImageRGB]) -> Vec<ImageRGB> {
    if frames.len() < 2 {
        return frames.to_vec();
    }
    let mean_luma = |f: &ImageRGB| to_grayscale(f).data().iter().sum::<f64>() / f.len() as f64;
    let reference = (0..frames.len())
        .min_by(|a, b| mean_luma(&frames[*a]).total_cmp(&mean_luma(&frames[*b])))
        .expect("non-empty");
    let channel = |f: &ImageRGB, c: usize| f.map(|p| p[c]);
    let ref_channels: Vec<GrayImage> = (0..3).map(|c| channel(&frames[reference], c)).collect();
    frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            if t == reference {
                return f.clone();
            }
            let matched: Vec<GrayImage> = (0..3).map(|c| histogram_match(&channel(f, c), &ref_channels[c])).collect();
            ImageRGB::from_fn(f.width(), f.height(), |x, y| [matched[0].get(x, y), matched[1].get(x, y), matched[2].get(x, y)])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacParams {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams { threshold: 2.0, max_iterations: 1000, confidence: 0.995, seed: 0 }
    }
}

/// Harris corner with a subpixel position.
#[derive(Clone, Copy, Debug)]
struct Corner {
    x: f64,
    y: f64,
    xi: usize,
    yi: usize,
}

const PATCH_RADIUS: usize = 5;
const CORNER_MARGIN: usize = 8;
const MAX_CORNERS: usize = 400;
const SEARCH_RADIUS: f64 = 40.0;
const MIN_NCC: f64 = 0.8;
const MIN_CORRESPONDENCES: usize = 8;

fn harris_corners(img: &GrayImage) -> Vec<Corner> {
    let (w, h) = img.dims();
    if w < 2 * CORNER_MARGIN + 3 || h < 2 * CORNER_MARGIN + 3 {
        return Vec::new();
    }
    let g = gaussian_blur(img, 1.0);
    let mut ixx = Raster::filled(w, h, 0.0);
    let mut iyy = Raster::filled(w, h, 0.0);
    let mut ixy = Raster::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let dx = 0.5 * (g.get_clamped(xi + 1, yi) - g.get_clamped(xi - 1, yi));
            let dy = 0.5 * (g.get_clamped(xi, yi + 1) - g.get_clamped(xi, yi - 1));
            ixx.set(x, y, dx * dx);
            iyy.set(x, y, dy * dy);
            ixy.set(x, y, dx * dy);
        }
    }
    let (ixx, iyy, ixy) = (gaussian_blur(&ixx, 1.5), gaussian_blur(&iyy, 1.5), gaussian_blur(&ixy, 1.5));
    let response = Raster::from_fn(w, h, |x, y| {
        let (a, b, c) = (ixx.get(x, y), iyy.get(x, y), ixy.get(x, y));
        a * b - c * c - 0.04 * (a + b) * (a + b)
    });
    let max_r = response.data().iter().cloned().fold(0.0, f64::max);
    if max_r <= 0.0 {
        return Vec::new();
    }
    let nms = 3isize;
    let mut found: Vec<(f64, Corner)> = Vec::new();
    for y in CORNER_MARGIN..h - CORNER_MARGIN {
        for x in CORNER_MARGIN..w - CORNER_MARGIN {
            let r = response.get(x, y);
            if r < 0.01 * max_r {
                continue;
            }
            let mut is_max = true;
            'scan: for dy in -nms..=nms {
                for dx in -nms..=nms {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    let o = response.get_clamped(x as isize + dx, y as isize + dy);
                    // strict on one side so plateaus keep exactly one point
                    if o > r || (o == r && (dy, dx) < (0, 0)) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let offset = |m: f64, c: f64, p: f64| {
                let denom = m - 2.0 * c + p;
                if denom < 0.0 {
                    (0.5 * (m - p) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            let ox = offset(response.get(x - 1, y), r, response.get(x + 1, y));
            let oy = offset(response.get(x, y - 1), r, response.get(x, y + 1));
            found.push((r, Corner { x: x as f64 + ox, y: y as f64 + oy, xi: x, yi: y }));
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    found.truncate(MAX_CORNERS);
    found.into_iter().map(|(_, c)| c).collect()
}

/// Zero-mean, unit-norm patch around a corner; `None` for flat patches.
fn patch_descriptor(img: &GrayImage, c: &Corner) -> Option<Vec<f64>> {
    let r = PATCH_RADIUS as isize;
    let mut p: Vec<f64> = Vec::with_capacity((2 * PATCH_RADIUS + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            p.push(img.get_clamped(c.xi as isize + dx, c.yi as isize + dy));
        }
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    p.iter_mut().for_each(|v| *v -= mean);
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 1e-6).then(|| p.into_iter().map(|v| v / norm).collect())
}

/// Mutual-best NCC matches between the corners of two frames.
fn match_corners(a: &GrayImage, b: &GrayImage) -> Vec<((f64, f64), (f64, f64))> {
    let describe = |img: &GrayImage| -> Vec<(Corner, Vec<f64>)> {
        harris_corners(img).into_iter().filter_map(|c| patch_descriptor(img, &c).map(|d| (c, d))).collect()
    };
    let (ca, cb) = (describe(a), describe(b));
    let ncc = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).sum::<f64>();
    let best = |from: &[(Corner, Vec<f64>)], to: &[(Corner, Vec<f64>)]| -> Vec<Option<usize>> {
        from.iter()
            .map(|(c, d)| {
                to.iter()
                    .enumerate()
                    .filter(|(_, (o, _))| (o.x - c.x).hypot(o.y - c.y) <= SEARCH_RADIUS)
                    .map(|(j, (_, e))| (j, ncc(d, e)))
                    .filter(|(_, s)| *s >= MIN_NCC)
                    .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
                    .map(|(j, _)| j)
            })
            .collect()
    };
    let (ab, ba) = (best(&ca, &cb), best(&cb, &ca));
    ab.iter()
        .enumerate()
        .filter_map(|(i, j)| j.filter(|j| ba[*j] == Some(i)).map(|j| ((ca[i].0.x, ca[i].0.y), (cb[j].0.x, cb[j].0.y))))
        .collect()
}

/// Normalized DLT fit of `dst ~ H src`.
pub fn fit_homography(pairs: &[((f64, f64), (f64, f64))]) -> Option<Homography> {
    if pairs.len() < 4 {
        return None;
    }
    let normalizer = |pts: &mut dyn Iterator<Item = (f64, f64)>| -> Matrix3<f64> {
        let pts: Vec<(f64, f64)> = pts.collect();
        let n = pts.len() as f64;
        let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let mean_dist = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
        let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
        Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
    };
    let ts = normalizer(&mut pairs.iter().map(|p| p.0));
    let td = normalizer(&mut pairs.iter().map(|p| p.1));
    let apply = |m: &Matrix3<f64>, p: (f64, f64)| (m[(0, 0)] * p.0 + m[(0, 2)], m[(1, 1)] * p.1 + m[(1, 2)]);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in pairs {
        let (x, y) = apply(&ts, *s);
        let (u, v) = apply(&td, *d);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for row in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += row[i] * row[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let k = eig.eigenvalues.imin();
    let e = eig.eigenvectors.column(k);
    let hn = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let h = td.try_inverse()? * hn * ts;
    Homography::new(h).ok()
}

fn reprojection_error(h: &Homography, pair: &((f64, f64), (f64, f64))) -> f64 {
    let (x, y) = h.apply(pair.0 .0, pair.0 .1);
    (x - pair.1 .0).hypot(y - pair.1 .1)
}

/// RANSAC homography with adaptive stopping, refit on the inliers. Returns the
/// model and its inlier flags.
pub fn ransac_homography(pairs: &[((f64, f64), (f64, f64))], p: &RansacParams) -> Option<(Homography, Vec<bool>)> {
    if pairs.len() < 4 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Option<(usize, Homography)> = None;
    let mut needed = p.max_iterations;
    let mut it = 0;
    while it < needed.min(p.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, pairs.len(), 4);
        let subset: Vec<_> = idx.iter().map(|i| pairs[i]).collect();
        let Some(h) = fit_homography(&subset) else { continue };
        let inliers = pairs.iter().filter(|q| reprojection_error(&h, q) < p.threshold).count();
        if best.as_ref().is_none_or(|(n, _)| inliers > *n) {
            best = Some((inliers, h));
            let ratio = inliers as f64 / pairs.len() as f64;
            let miss = 1.0 - ratio.powi(4);
            needed = if miss <= 1e-12 {
                0
            } else {
                ((1.0 - p.confidence).ln() / miss.ln()).ceil().max(0.0) as usize
            };
        }
    }
    let (_, mut h) = best?;
    // refit twice so the inlier set settles on the refined model
    let mut flags = Vec::new();
    for _ in 0..2 {
        flags = pairs.iter().map(|q| reprojection_error(&h, q) < p.threshold).collect::<Vec<_>>();
        let inliers: Vec<_> = pairs.iter().zip(&flags).filter(|(_, f)| **f).map(|(q, _)| *q).collect();
        match fit_homography(&inliers) {
            Some(refit) => h = refit,
            None => break,
        }
    }
    Some((h, flags))
}

/// Frames registered to a middle reference frame.
#[derive(Clone, Debug)]
pub struct Stabilization {
    /// `homographies[t]` maps frame-t pixel coordinates to reference coordinates.
    pub homographies: Vec<Homography>,
    pub warped: Vec<GrayImage>,
    pub coverage: Vec<Vec<bool>>,
    pub reference: usize,
    /// `warnings[t]` is set when the pair (t, t+1) had too few correspondences
    /// and identity was used.
    pub warnings: Vec<bool>,
}

pub fn stabilize(frames: &[GrayImage], p: &RansacParams) -> Result<Stabilization> {
    if frames.is_empty() {
        return Err(Error::InvalidValue("stabilization needs at least one frame".into()));
    }
    let dims = frames[0].dims();
    if frames.iter().any(|f| f.dims() != dims) {
        return Err(Error::SizeMismatch("frames differ in size".into()));
    }
    // pair[t] maps frame t to frame t+1
    let pairs: Vec<(Homography, bool)> = (0..frames.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| {
            let matches = match_corners(&frames[t], &frames[t + 1]);
            if matches.len() < MIN_CORRESPONDENCES {
                return (Homography::identity(), true);
            }
            match ransac_homography(&matches, p) {
                Some((h, _)) => (h, false),
                None => (Homography::identity(), true),
            }
        })
        .collect();
    let reference = (frames.len() - 1) / 2;
    let mut homographies = vec![Homography::identity(); frames.len()];
    for t in (0..reference).rev() {
        homographies[t] = homographies[t + 1].compose(&pairs[t].0)?;
    }
    for t in reference + 1..frames.len() {
        homographies[t] = homographies[t - 1].compose(&pairs[t - 1].0.inverse()?)?;
    }
    let warped: Vec<(GrayImage, Vec<bool>)> =
        frames.par_iter().zip(&homographies).map(|(f, h)| warp_bilinear(f, h)).collect::<Result<_>>()?;
    let (warped, coverage) = warped.into_iter().unzip();
    Ok(Stabilization { homographies, warped, coverage, reference, warnings: pairs.iter().map(|p| p.1).collect() })
}

/// Lower temporal median (`sorted[(n - 1) / 2]`) of the covered samples.
pub fn extract_background(warped: &[GrayImage], coverage: &[Vec<bool>]) -> Result<(GrayImage, Vec<bool>)> {
    let (w, h) = warped.first().ok_or_else(|| Error::InvalidValue("no frames".into()))?.dims();
    if coverage.len() != warped.len() || warped.iter().any(|f| f.dims() != (w, h)) {
        return Err(Error::SizeMismatch("background inputs".into()));
    }
    let (data, valid): (Vec<f64>, Vec<bool>) = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let mut s: Vec<f64> =
                warped.iter().zip(coverage).filter(|(_, c)| c[i]).map(|(f, _)| f.data()[i]).collect();
            if s.is_empty() {
                return (0.0, false);
            }
            s.sort_by(f64::total_cmp);
            (s[(s.len() - 1) / 2], true)
        })
        .unzip();
    Ok((GrayImage::new(w, h, data)?, valid))
}

/// Per-channel lower temporal median of covered color samples.
pub fn extract_background_rgb(warped: &[ImageRGB], coverage: &[Vec<bool>]) -> Result<(ImageRGB, Vec<bool>)> {
    let channels: Vec<(GrayImage, Vec<bool>)> = (0..3)
        .map(|c| extract_background(&warped.iter().map(|f| f.map(|p| p[c])).collect::<Vec<_>>(), coverage))
        .collect::<Result<_>>()?;
    let (w, h) = channels[0].0.dims();
    let img = ImageRGB::from_fn(w, h, |x, y| [channels[0].0.get(x, y), channels[1].0.get(x, y), channels[2].0.get(x, y)]);
    Ok((img, channels[0].1.clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentParams {
    pub tau: f64,
    /// Lower bound on the background intensity in the relative difference.
    pub background_floor: f64,
    pub open_radius: usize,
    pub close_radius: usize,
    pub min_component: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams { tau: 0.01, background_floor: 0.01, open_radius: 1, close_radius: 2, min_component: 25 }
    }
}

/// `‖flow‖ · (W − B)² / max(B, floor)`.
#[inline]
pub fn relative_difference(flow_magnitude: f64, frame: f64, background: f64, floor: f64) -> f64 {
    flow_magnitude * (frame - background).powi(2) / background.max(floor)
}

fn morph(mask: &Raster<bool>, radius: usize, dilate: bool) -> Raster<bool> {
    let (w, h) = mask.dims();
    let r = radius as isize;
    let pass = |src: &Raster<bool>, horizontal: bool| {
        Raster::from_fn(w, h, |x, y| {
            let mut acc = !dilate;
            for d in -r..=r {
                let (xx, yy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let v = src.get(xx as usize, yy as usize);
                if dilate {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
            acc
        })
    };
    pass(&pass(mask, true), false)
}

/// Square-element opening then closing, then removal of small components.
pub fn clean_mask(mask: &Raster<bool>, p: &SegmentParams) -> MotionMask {
    let opened = morph(&morph(mask, p.open_radius, false), p.open_radius, true);
    let closed = morph(&morph(&opened, p.close_radius, true), p.close_radius, false);
    let (labels, components) = label_components(&closed);
    let keep: Vec<bool> =
        std::iter::once(false).chain(components.iter().map(|c| c.area >= p.min_component)).collect();
    let cleaned = labels.map(|l| keep[*l as usize]);
    MotionMask::from_mask(cleaned)
}

/// Thresholds the relative difference of each stabilized frame against the
/// background and maps the mask back to the original frame.
///
/// `flows[t]` is the flow of stabilized frame t (forward, or backward for the
/// last frame).
pub fn segment(
    stab: &Stabilization,
    flows: &[FlowField],
    background: &GrayImage,
    background_valid: &[bool],
    p: &SegmentParams,
) -> Result<Vec<MotionMask>> {
    let t_len = stab.warped.len();
    if flows.len() != t_len {
        return Err(Error::SizeMismatch(format!("{} flows for {t_len} frames", flows.len())));
    }
    let dims = background.dims();
    (0..t_len)
        .into_par_iter()
        .map(|t| {
            let frame = &stab.warped[t];
            if frame.dims() != dims || flows[t].dims() != dims {
                return Err(Error::SizeMismatch(format!("segmentation inputs of frame {t}")));
            }
            let mag = flows[t].magnitude();
            let raw = Raster::from_fn(dims.0, dims.1, |x, y| {
                let i = y * dims.0 + x;
                background_valid[i]
                    && stab.coverage[t][i]
                    && relative_difference(mag.data()[i], frame.data()[i], background.data()[i], p.background_floor)
                        > p.tau
            });
            // back to the original frame: output(x) = raw(H_t x)
            let as_float = raw.map(|m| if *m { 1.0 } else { 0.0 });
            let (back, covered) = warp_bilinear(&as_float, &stab.homographies[t].inverse()?)?;
            let unwarped = Raster::from_fn(dims.0, dims.1, |x, y| {
                let i = y * dims.0 + x;
                covered[i] && back.data()[i] >= 0.5
            });
            Ok(clean_mask(&unwarped, p))
        })
        .collect()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Rows below the contact row searched for floor depth.
pub const FLOOR_BAND: usize = 5;

/// Assigns each component the median first-pass depth of the static pixels
/// in a band just below its lowest row, across its horizontal extent.
pub fn floor_contact(mask: &MotionMask, first_pass: &DepthMap) -> Result<FloorContactDepth> {
    let (w, h) = mask.mask.dims();
    if first_pass.dims() != (w, h) {
        return Err(Error::SizeMismatch("floor contact depth and mask".into()));
    }
    let mut depth = ScalarField::filled(w, h, 0.0);
    let mut defined = vec![false; w * h];
    for c in &mask.components {
        let mut band: Vec<f64> = Vec::new();
        for y in c.y_max + 1..(c.y_max + 1 + FLOOR_BAND).min(h) {
            for x in c.x_min..=c.x_max {
                let i = y * w + x;
                if !mask.mask.data()[i] {
                    band.extend(first_pass.get(i));
                }
            }
        }
        let m = median(&mut band).or_else(|| {
            let mut row: Vec<f64> = (c.x_min..=c.x_max).filter_map(|x| first_pass.get(c.y_max * w + x)).collect();
            median(&mut row)
        });
        let Some(m) = m.filter(|m| *m > 0.0) else { continue };
        for (i, l) in mask.labels.data().iter().enumerate() {
            if *l == c.label {
                depth.data_mut()[i] = m;
                defined[i] = true;
            }
        }
    }
    Ok(FloorContactDepth { depth, defined })
}

/// Stabilized flows: forward for every frame but the last, which gets the
/// backward flow to its predecessor.
pub fn stabilized_flows(warped: &[GrayImage], p: &FlowParams) -> Result<Vec<FlowField>> {
    let t_len = warped.len();
    if t_len < 2 {
        return Ok(warped.iter().map(|f| FlowField::zero(f.width(), f.height())).collect());
    }
    (0..t_len)
        .into_par_iter()
        .map(|t| if t + 1 < t_len { estimate_flow_with(&warped[t], &warped[t + 1], p) } else { estimate_flow_with(&warped[t], &warped[t - 1], p) })
        .collect()
}

/// Full pipeline from raw frames to per-frame motion masks.
#[derive(Clone, Debug)]
pub struct MotionAnalysis {
    pub masks: Vec<MotionMask>,
    pub stabilization: Stabilization,
    pub background: GrayImage,
    pub background_valid: Vec<bool>,
}

pub fn detect_motion(
    frames: &[ImageRGB],
    ransac: &RansacParams,
    flow: &FlowParams,
    seg: &SegmentParams,
) -> Result<MotionAnalysis> {
    let normalized = normalize_exposure(frames);
    let gray: Vec<GrayImage> = normalized.iter().map(to_grayscale).collect();
    let stabilization = stabilize(&gray, ransac)?;
    let (background, background_valid) = extract_background(&stabilization.warped, &stabilization.coverage)?;
    let flows = stabilized_flows(&stabilization.warped, flow)?;
    let masks = segment(&stabilization, &flows, &background, &background_valid, seg)?;
    Ok(MotionAnalysis { masks, stabilization, background, background_valid })
}
