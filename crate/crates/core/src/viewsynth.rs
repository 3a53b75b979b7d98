//! Stereoscopic view synthesis: depth to disparity, forward-warped second
//! view with hole filling, anaglyph and side-by-side composition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::raster::{sample_bilinear, DepthMap, ImageRGB, Raster, ScalarField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StereoParams {
    /// Largest disparity in pixels; controls the amount of pop-out.
    pub max_disparity: f64,
    /// Percentile of the depth distribution placed at zero disparity.
    pub convergence_percentile: f64,
}

impl Default for StereoParams {
    fn default() -> Self {
        StereoParams { max_disparity: 20.0, convergence_percentile: 50.0 }
    }
}

impl StereoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_disparity.is_finite() && self.max_disparity >= 0.0) {
            return Err(Error::InvalidValue(format!("max_disparity must be >= 0, got {}", self.max_disparity)));
        }
        if !(0.0..=100.0).contains(&self.convergence_percentile) {
            return Err(Error::InvalidValue(format!(
                "convergence_percentile must lie in [0, 100], got {}",
                self.convergence_percentile
            )));
        }
        Ok(())
    }
}

/// Signed horizontal disparity in pixels. Positive disparity moves a pixel
/// to the left in the synthesized right view, i.e. towards the viewer.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap(ScalarField);

impl DisparityMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite disparity {v}")));
        }
        Ok(DisparityMap(Raster::new(width, height, data)?))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DisparityMap(Raster::filled(width, height, 0.0))
    }

    pub fn constant(width: usize, height: usize, d: f64) -> Self {
        DisparityMap(Raster::filled(width, height, d))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn raster(&self) -> &ScalarField {
        &self.0
    }
}

/// Linear-interpolated percentile (`q` in [0, 100]) of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Inverse-depth disparity: `max · (1/d − 1/d_c) / (1/d_near − 1/d_far)` with
/// `d_near`, `d_far` the 1st and 99th depth percentiles and `d_c` the
/// convergence percentile, clamped to `±max`.
pub fn depth_to_disparity(d: &DepthMap, sp: &StereoParams) -> Result<DisparityMap> {
    sp.validate()?;
    let (w, h) = d.dims();
    let mut valid: Vec<f64> = (0..d.len()).filter_map(|i| d.get(i)).collect();
    if valid.is_empty() {
        return Err(Error::InvalidValue("depth map has no valid pixel".into()));
    }
    valid.sort_by(f64::total_cmp);
    let near = percentile(&valid, 1.0);
    let far = percentile(&valid, 99.0);
    let conv = percentile(&valid, sp.convergence_percentile);
    let span = 1.0 / near - 1.0 / far;
    if !(span > 0.0) {
        return Ok(DisparityMap::zeros(w, h));
    }
    let max = sp.max_disparity;
    let data = (0..d.len())
        .map(|i| match d.get(i) {
            Some(v) => (max * (1.0 / v - 1.0 / conv) / span).clamp(-max, max),
            None => 0.0,
        })
        .collect();
    DisparityMap::new(w, h, data)
}

/// Right view by forward splatting of the left view at `x − round(disparity)`.
/// Where pixels collide the larger disparity (nearer surface) wins, ties keep
/// the leftmost source. Holes take the neighbouring pixel on the side with the
/// smaller disparity (background extension), then a 3x3 median smooths the
/// filled pixels only. Returns the view and its hole mask.
pub fn render_view(img: &ImageRGB, disp: &DisparityMap) -> Result<(ImageRGB, Vec<bool>)> {
    if img.dims() != disp.dims() {
        return Err(Error::SizeMismatch(format!("image {:?} vs disparity {:?}", img.dims(), disp.dims())));
    }
    let (w, h) = img.dims();
    let rows: Vec<(Vec<[f64; 3]>, Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color = vec![[0.0; 3]; w];
            let mut depth = vec![f64::NEG_INFINITY; w];
            let mut hole = vec![true; w];
            for x in 0..w {
                let d = disp.data()[y * w + x];
                let tx = x as i64 - d.round() as i64;
                if tx < 0 || tx >= w as i64 {
                    continue;
                }
                let tx = tx as usize;
                if d > depth[tx] {
                    depth[tx] = d;
                    color[tx] = img.data()[y * w + x];
                    hole[tx] = false;
                }
            }
            fill_row(&mut color, &mut depth, &hole);
            (color, depth, hole)
        })
        .collect();
    let mut out = Vec::with_capacity(w * h);
    let mut holes = Vec::with_capacity(w * h);
    for (c, _, hl) in &rows {
        out.extend_from_slice(c);
        holes.extend_from_slice(hl);
    }
    let filled = Raster::new(w, h, out)?;
    let smoothed = median_on_mask(&filled, &holes);
    Ok((smoothed, holes))
}

/// Background extension along one row.
fn fill_row(color: &mut [[f64; 3]], depth: &mut [f64], hole: &[bool]) {
    let w = color.len();
    let mut x = 0;
    while x < w {
        if !hole[x] {
            x += 1;
            continue;
        }
        let start = x;
        while x < w && hole[x] {
            x += 1;
        }
        let left = start.checked_sub(1);
        let right = (x < w).then_some(x);
        let src = match (left, right) {
            (Some(l), Some(r)) => Some(if depth[l] <= depth[r] { l } else { r }),
            (Some(l), None) => Some(l),
            (None, Some(r)) => Some(r),
            (None, None) => None,
        };
        if let Some(s) = src {
            let (c, d) = (color[s], depth[s]);
            for k in start..x {
                color[k] = c;
                depth[k] = d;
            }
        }
    }
}

fn median_on_mask(img: &ImageRGB, mask: &[bool]) -> ImageRGB {
    let (w, h) = img.dims();
    ImageRGB::from_fn(w, h, |x, y| {
        if !mask[y * w + x] {
            return img.get(x, y);
        }
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut v = [0.0; 9];
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    v[k] = img.get_clamped(x as isize + dx, y as isize + dy)[c];
                    k += 1;
                }
            }
            v.sort_by(f64::total_cmp);
            *o = v[4];
        }
        out
    })
}

/// Red from the left view, green and blue from the right.
pub fn compose_anaglyph(left: &ImageRGB, right: &ImageRGB) -> Result<ImageRGB> {
    if !left.same_dims(right) {
        return Err(Error::SizeMismatch(format!("left {:?} vs right {:?}", left.dims(), right.dims())));
    }
    let data = left.data().iter().zip(right.data()).map(|(l, r)| [l[0], r[1], r[2]]).collect();
    Raster::new(left.width(), left.height(), data)
}

/// Left and right views next to each other.
pub fn compose_side_by_side(left: &ImageRGB, right: &ImageRGB) -> Result<ImageRGB> {
    if !left.same_dims(right) {
        return Err(Error::SizeMismatch(format!("left {:?} vs right {:?}", left.dims(), right.dims())));
    }
    let (w, h) = left.dims();
    Ok(ImageRGB::from_fn(2 * w, h, |x, y| if x < w { left.get(x, y) } else { right.get(x - w, y) }))
}

/// Three-tap temporal smoothing along the flow: weights 0.25 / 0.5 / 0.25 on
/// the previous, current and next frame, each neighbour gated by its flow
/// confidence and renormalized. `flows[t]` maps frame t to t+1; the previous
/// frame is read at `i − flows[t−1](i)`.
pub fn temporal_filter_disparity(
    disps: &[DisparityMap],
    flows: &[FlowField],
    confidence: Option<&[ScalarField]>,
) -> Result<Vec<DisparityMap>> {
    let n = disps.len();
    if n <= 1 {
        return Ok(disps.to_vec());
    }
    if flows.len() != n - 1 {
        return Err(Error::SizeMismatch(format!("{} flows for {n} disparity maps", flows.len())));
    }
    if confidence.is_some_and(|c| c.len() != n - 1) {
        return Err(Error::SizeMismatch("one confidence map per flow expected".into()));
    }
    let dims = disps[0].dims();
    if disps.iter().any(|d| d.dims() != dims) || flows.iter().any(|f| f.dims() != dims) {
        return Err(Error::SizeMismatch("disparities and flows differ in size".into()));
    }
    let (w, h) = dims;
    let gate = |t: usize, i: usize| confidence.map_or(1.0, |c| c[t].data()[i]);
    (0..n)
        .into_par_iter()
        .map(|t| {
            let data = (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    let mut acc = 0.5 * disps[t].data()[i];
                    let mut wsum = 0.5;
                    if t + 1 < n && flows[t].valid()[i] {
                        let (u, v) = flows[t].at(i);
                        if let Some(s) = sample_bilinear(disps[t + 1].raster(), x + u, y + v) {
                            let g = 0.25 * gate(t, i);
                            acc += g * s;
                            wsum += g;
                        }
                    }
                    if t > 0 && flows[t - 1].valid()[i] {
                        let (u, v) = flows[t - 1].at(i);
                        if let Some(s) = sample_bilinear(disps[t - 1].raster(), x - u, y - v) {
                            let g = 0.25 * gate(t - 1, i);
                            acc += g * s;
                            wsum += g;
                        }
                    }
                    acc / wsum
                })
                .collect();
            DisparityMap::new(w, h, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::quantize_rgb;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        quantize_rgb(&ImageRGB::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn constant_depth_gives_zero_disparity() {
        let d = depth_to_disparity(&DepthMap::constant(8, 6, 3.0), &StereoParams::default()).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn near_pixel_with_far_convergence_gets_max() {
        let mut v = vec![10.0; 100];
        v[0] = 1.0;
        v[1] = 1.0;
        let d = DepthMap::new(10, 10, v).unwrap();
        let sp = StereoParams { max_disparity: 20.0, convergence_percentile: 99.0 };
        let disp = depth_to_disparity(&d, &sp).unwrap();
        assert!((disp.data()[0] - 20.0).abs() < 1e-9);
        assert!(disp.data()[50].abs() < 1e-9);
    }

    #[test]
    fn disparity_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..20 * 15).map(|_| rng.random_range(1.0..30.0)).collect();
        let d = DepthMap::new(20, 15, vals.clone()).unwrap();
        let sp = StereoParams::default();
        let got = depth_to_disparity(&d, &sp).unwrap();
        let mut s = vals.clone();
        s.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            let pos = q / 100.0 * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] * (1.0 - (pos - lo as f64)) + s[hi] * (pos - lo as f64)
        };
        let (near, far, conv) = (pct(1.0), pct(99.0), pct(50.0));
        for (g, v) in got.data().iter().zip(&vals) {
            let want = (20.0 * (1.0 / v - 1.0 / conv) / (1.0 / near - 1.0 / far)).clamp(-20.0, 20.0);
            assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_disparity_is_bitwise_identity() {
        let img = random_image(17, 9, 1);
        let (out, holes) = render_view(&img, &DisparityMap::zeros(17, 9)).unwrap();
        assert_eq!(out, img);
        assert!(holes.iter().all(|h| !h));
    }

    #[test]
    fn constant_shift_moves_image_and_fills_border() {
        let img = random_image(20, 4, 2);
        let (out, holes) = render_view(&img, &DisparityMap::constant(20, 4, 5.0)).unwrap();
        for y in 0..4 {
            for x in 0..20 {
                if x < 15 {
                    assert_eq!(out.get(x, y), img.get(x + 5, y));
                    assert!(!holes[y * 20 + x]);
                } else {
                    assert!(holes[y * 20 + x]);
                }
            }
        }
    }

    /// For every target pixel, scan the whole row for the nearest source landing on it.
    fn zbuffer_oracle(img: &ImageRGB, disp: &DisparityMap) -> (ImageRGB, Vec<bool>) {
        let (w, h) = img.dims();
        let mut holes = vec![true; w * h];
        let out = ImageRGB::from_fn(w, h, |tx, y| {
            let mut best: Option<(f64, usize)> = None;
            for x in 0..w {
                let d = disp.data()[y * w + x];
                if x as i64 - d.round() as i64 == tx as i64 && best.is_none_or(|(bd, _)| d > bd) {
                    best = Some((d, x));
                }
            }
            match best {
                Some((_, x)) => img.get(x, y),
                None => [0.0; 3],
            }
        });
        for y in 0..h {
            for tx in 0..w {
                holes[y * w + tx] = (0..w).all(|x| x as i64 - disp.data()[y * w + x].round() as i64 != tx as i64);
            }
        }
        (out, holes)
    }

    #[test]
    fn random_disparity_matches_zbuffer_oracle_off_holes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(24, 10, 3);
        let disp = DisparityMap::new(24, 10, (0..240).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let (out, holes) = render_view(&img, &disp).unwrap();
        let (oracle, oracle_holes) = zbuffer_oracle(&img, &disp);
        assert_eq!(holes, oracle_holes);
        for i in 0..240 {
            if !holes[i] {
                assert_eq!(out.data()[i], oracle.data()[i]);
            }
        }
    }

    #[test]
    fn holes_take_the_background_side() {
        // foreground (disparity 3) in the middle of a background at 0
        let img = ImageRGB::from_fn(12, 1, |x, _| [x as f64 / 12.0; 3]);
        let disp = DisparityMap::new(12, 1, (0..12).map(|x| if (5..8).contains(&x) { 3.0 } else { 0.0 }).collect()).unwrap();
        let (out, holes) = render_view(&img, &disp).unwrap();
        // foreground lands on 2..5, columns 5..8 are uncovered background
        assert_eq!(holes.iter().filter(|h| **h).count(), 3);
        assert!(holes[5] && holes[6] && holes[7]);
        // filled from column 8 (background) rather than the foreground at 4
        assert_eq!(out.get(6, 0), img.get(8, 0));
    }

    #[test]
    fn anaglyph_examples() {
        let img = random_image(6, 5, 7);
        assert_eq!(compose_anaglyph(&img, &img).unwrap(), img);
        let red = ImageRGB::filled(3, 3, [1.0, 0.0, 0.0]);
        let cyan = ImageRGB::filled(3, 3, [0.0, 1.0, 1.0]);
        assert!(compose_anaglyph(&red, &cyan).unwrap().data().iter().all(|p| *p == [1.0; 3]));
        assert!(compose_anaglyph(&red, &ImageRGB::filled(2, 3, [0.0; 3])).is_err());
        let other = random_image(6, 5, 8);
        let a = compose_anaglyph(&img, &other).unwrap();
        for ((p, l), r) in a.data().iter().zip(img.data()).zip(other.data()) {
            assert_eq!(*p, [l[0], r[1], r[2]]);
        }
    }

    #[test]
    fn side_by_side_places_views() {
        let l = random_image(4, 3, 1);
        let r = random_image(4, 3, 2);
        let s = compose_side_by_side(&l, &r).unwrap();
        assert_eq!(s.dims(), (8, 3));
        assert_eq!(s.get(1, 2), l.get(1, 2));
        assert_eq!(s.get(5, 2), r.get(1, 2));
    }

    #[test]
    fn temporal_filter_cases() {
        let flows = vec![FlowField::zero(3, 3); 3];
        let constant = vec![DisparityMap::constant(3, 3, 2.5); 4];
        for d in temporal_filter_disparity(&constant, &flows, None).unwrap() {
            assert!(d.data().iter().all(|v| (*v - 2.5).abs() < 1e-12));
        }
        let single = vec![DisparityMap::constant(3, 3, 1.0)];
        assert_eq!(temporal_filter_disparity(&single, &[], None).unwrap(), single);
        let alternating: Vec<DisparityMap> =
            (0..4).map(|t| DisparityMap::constant(3, 3, if t % 2 == 0 { 1.0 } else { -1.0 })).collect();
        let conf = vec![ScalarField::filled(3, 3, 1.0); 3];
        for d in temporal_filter_disparity(&alternating, &flows, Some(&conf)).unwrap() {
            assert!(d.data().iter().all(|v| v.abs() <= 0.5));
        }
    }

    proptest! {
        #[test]
        fn disparity_is_bounded(vals in proptest::collection::vec(0.05f64..100.0, 16), max in 0.0f64..40.0, q in 0.0f64..100.0) {
            let d = DepthMap::new(4, 4, vals).unwrap();
            let disp = depth_to_disparity(&d, &StereoParams { max_disparity: max, convergence_percentile: q }).unwrap();
            prop_assert!(disp.data().iter().all(|v| v.abs() <= max + 1e-12));
        }

        #[test]
        fn anaglyph_of_identical_views_is_identity(seed in 0u64..1000) {
            let img = random_image(5, 4, seed);
            prop_assert_eq!(compose_anaglyph(&img, &img).unwrap(), img);
        }
    }
}
