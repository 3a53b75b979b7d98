//! Coarse-to-fine variational optical flow with Charbonnier penalties, the
//! flow-difference operator and the flow confidence weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::soft_threshold;
use crate::raster::{build_pyramid, gaussian_blur, max_pyramid_levels, resize, sample_bilinear, GrayImage, Raster, ScalarField};

/// Per-pixel motion from frame t to frame t+1.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    valid: Vec<bool>,
}

impl FlowField {
    /// Validity is derived from whether the target lands inside the frame.
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || u.len() != width * height || v.len() != width * height {
            return Err(Error::Dimensions(format!("flow {width}x{height}")));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("non-finite flow".into()));
        }
        let valid = (0..width * height)
            .map(|i| {
                let tx = (i % width) as f64 + u[i];
                let ty = (i / width) as f64 + v[i];
                tx >= 0.0 && ty >= 0.0 && tx <= (width - 1) as f64 && ty <= (height - 1) as f64
            })
            .collect();
        Ok(FlowField { width, height, u, v, valid })
    }

    pub fn with_validity(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let mut f = Self::new(width, height, u, v)?;
        if valid.len() != f.valid.len() {
            return Err(Error::Dimensions("flow validity length".into()));
        }
        for (a, b) in f.valid.iter_mut().zip(valid) {
            *a &= b;
        }
        Ok(f)
    }

    pub fn zero(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height], vec![0.0; width * height]).expect("non-empty")
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self::new(width, height, vec![u; width * height], vec![v; width * height]).expect("non-empty")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn at(&self, i: usize) -> (f64, f64) {
        (self.u[i], self.v[i])
    }

    pub fn magnitude(&self) -> ScalarField {
        Raster::new(self.width, self.height, self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).collect())
            .expect("flow dims")
    }

    pub fn interleaved_f32(&self) -> Vec<(f32, f32)> {
        self.u.iter().zip(&self.v).map(|(u, v)| (*u as f32, *v as f32)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    /// Smoothness weight relative to the data term (luminance in [0, 1]).
    pub smoothness: f64,
    pub levels: usize,
    pub factor: f64,
    pub warps: usize,
    pub sweeps: usize,
    /// Charbonnier epsilon.
    pub epsilon: f64,
    /// Pre-smoothing of the input frames.
    pub presmooth_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { smoothness: 0.02, levels: 5, factor: 0.5, warps: 3, sweeps: 30, epsilon: 1e-3, presmooth_sigma: 0.7 }
    }
}

/// Central 5-tap derivative with clamped borders.
fn derivative(img: &GrayImage, horizontal: bool) -> GrayImage {
    let k = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
    Raster::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let o = j as isize - 2;
            let v = if horizontal {
                img.get_clamped(x as isize + o, y as isize)
            } else {
                img.get_clamped(x as isize, y as isize + o)
            };
            acc += kv * v;
        }
        acc
    })
}

fn warp_by_flow(img: &GrayImage, u: &[f64], v: &[f64]) -> GrayImage {
    let (w, h) = img.dims();
    Raster::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let sx = (x as f64 + u[i]).clamp(0.0, (w - 1) as f64);
        let sy = (y as f64 + v[i]).clamp(0.0, (h - 1) as f64);
        sample_bilinear(img, sx, sy).expect("clamped coordinates")
    })
}

/// One pyramid level: `warps` linearizations, each solved by lagged-weight
/// block Gauss-Seidel over the per-pixel (du, dv) system.
fn refine_level(i1: &GrayImage, i2: &GrayImage, u: &mut [f64], v: &mut [f64], p: &FlowParams) {
    let (w, h) = i1.dims();
    let n = w * h;
    let alpha = p.smoothness;
    let eps2 = p.epsilon * p.epsilon;
    let i1x = derivative(i1, true);
    let i1y = derivative(i1, false);
    let reweights = 3usize.min(p.sweeps.max(1));
    let sweeps_per = p.sweeps.div_ceil(reweights).max(1);
    for _ in 0..p.warps {
        let i2w = warp_by_flow(i2, u, v);
        let i2x = derivative(&i2w, true);
        let i2y = derivative(&i2w, false);
        let ix: Vec<f64> = (0..n).map(|k| 0.5 * (i1x.data()[k] + i2x.data()[k])).collect();
        let iy: Vec<f64> = (0..n).map(|k| 0.5 * (i1y.data()[k] + i2y.data()[k])).collect();
        let it: Vec<f64> = (0..n).map(|k| i2w.data()[k] - i1.data()[k]).collect();
        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut psi_d = vec![0.0; n];
        let mut psi_s = vec![0.0; n];
        for _ in 0..reweights {
            psi_d.par_iter_mut().enumerate().for_each(|(k, pd)| {
                let r = it[k] + ix[k] * du[k] + iy[k] * dv[k];
                *pd = 1.0 / (r * r + eps2).sqrt();
            });
            psi_s.par_iter_mut().enumerate().for_each(|(k, ps)| {
                let (x, y) = (k % w, k / w);
                let uk = u[k] + du[k];
                let vk = v[k] + dv[k];
                let (mut ux, mut vx, mut uy, mut vy) = (0.0, 0.0, 0.0, 0.0);
                if x + 1 < w {
                    ux = u[k + 1] + du[k + 1] - uk;
                    vx = v[k + 1] + dv[k + 1] - vk;
                }
                if y + 1 < h {
                    uy = u[k + w] + du[k + w] - uk;
                    vy = v[k + w] + dv[k + w] - vk;
                }
                *ps = 1.0 / (ux * ux + vx * vx + uy * uy + vy * vy + eps2).sqrt();
            });
            for _ in 0..sweeps_per {
                for y in 0..h {
                    for x in 0..w {
                        let k = y * w + x;
                        let mut wsum = 0.0;
                        let mut bu = 0.0;
                        let mut bv = 0.0;
                        let mut neigh = |m: usize| {
                            let wt = alpha * 0.5 * (psi_s[k] + psi_s[m]);
                            wsum += wt;
                            bu += wt * (u[m] + du[m] - u[k]);
                            bv += wt * (v[m] + dv[m] - v[k]);
                        };
                        if x > 0 {
                            neigh(k - 1);
                        }
                        if x + 1 < w {
                            neigh(k + 1);
                        }
                        if y > 0 {
                            neigh(k - w);
                        }
                        if y + 1 < h {
                            neigh(k + w);
                        }
                        let pd = psi_d[k];
                        let a11 = pd * ix[k] * ix[k] + wsum;
                        let a12 = pd * ix[k] * iy[k];
                        let a22 = pd * iy[k] * iy[k] + wsum;
                        let b1 = bu - pd * ix[k] * it[k];
                        let b2 = bv - pd * iy[k] * it[k];
                        let det = a11 * a22 - a12 * a12;
                        if det.abs() > 1e-18 {
                            du[k] = (a22 * b1 - a12 * b2) / det;
                            dv[k] = (a11 * b2 - a12 * b1) / det;
                        }
                    }
                }
            }
        }
        for k in 0..n {
            u[k] += du[k];
            v[k] += dv[k];
        }
    }
}

/// Flow from `a` to `b`: `b(x + flow(x)) ≈ a(x)`.
pub fn estimate_flow(a: &GrayImage, b: &GrayImage) -> Result<FlowField> {
    estimate_flow_with(a, b, &FlowParams::default())
}

pub fn estimate_flow_with(a: &GrayImage, b: &GrayImage, p: &FlowParams) -> Result<FlowField> {
    if !a.same_dims(b) {
        return Err(Error::SizeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (w, h) = a.dims();
    if w < 16 || h < 16 {
        return Err(Error::Dimensions(format!("flow needs at least 16x16, got {w}x{h}")));
    }
    let levels = p.levels.clamp(1, max_pyramid_levels(w, h, p.factor, 8));
    let a = gaussian_blur(a, p.presmooth_sigma);
    let b = gaussian_blur(b, p.presmooth_sigma);
    let pa = build_pyramid(&a, levels, p.factor)?;
    let pb = build_pyramid(&b, levels, p.factor)?;

    let coarsest = &pa[levels - 1];
    let mut u = vec![0.0; coarsest.len()];
    let mut v = vec![0.0; coarsest.len()];
    let mut dims = coarsest.dims();
    for level in (0..levels).rev() {
        let (lw, lh) = pa[level].dims();
        if (lw, lh) != dims {
            let su = Raster::new(dims.0, dims.1, u).expect("flow dims");
            let sv = Raster::new(dims.0, dims.1, v).expect("flow dims");
            let sx = lw as f64 / dims.0 as f64;
            let sy = lh as f64 / dims.1 as f64;
            u = resize(&su, lw, lh).into_data().into_iter().map(|x| x * sx).collect();
            v = resize(&sv, lw, lh).into_data().into_iter().map(|x| x * sy).collect();
            dims = (lw, lh);
        }
        refine_level(&pa[level], &pb[level], &mut u, &mut v, p);
    }
    FlowField::new(w, h, u, v)
}

/// `field[t+1](i + flow_t(i)) - field[t](i)` with validity.
pub fn flow_difference(field: &[ScalarField], flows: &[FlowField], t: usize) -> Result<(ScalarField, Vec<bool>)> {
    if t >= flows.len() {
        return Err(Error::IndexOutOfRange { index: t, len: flows.len() });
    }
    if t + 1 >= field.len() {
        return Err(Error::IndexOutOfRange { index: t + 1, len: field.len() });
    }
    let (cur, next, flow) = (&field[t], &field[t + 1], &flows[t]);
    if !cur.same_dims(next) || cur.dims() != flow.dims() {
        return Err(Error::SizeMismatch("field and flow dimensions differ".into()));
    }
    let w = cur.width();
    let mut valid = vec![false; cur.len()];
    let mut out = vec![0.0; cur.len()];
    for i in 0..cur.len() {
        if !flow.valid[i] {
            continue;
        }
        let (fu, fv) = flow.at(i);
        if let Some(s) = sample_bilinear(next, (i % w) as f64 + fu, (i / w) as f64 + fv) {
            out[i] = s - cur.data()[i];
            valid[i] = true;
        }
    }
    Ok((Raster::new(cur.width(), cur.height(), out)?, valid))
}

pub const FLOW_CONFIDENCE_MIDPOINT: f64 = 0.05;
pub const FLOW_CONFIDENCE_SLOPE: f64 = 0.01;

/// Temporal confidence: near 1 where the flow reprojects luminance well, near 0
/// where the reprojection error is large; 0 on invalid flow.
pub fn flow_confidence(a: &GrayImage, b: &GrayImage, f: &FlowField) -> Result<ScalarField> {
    flow_confidence_with(a, b, f, FLOW_CONFIDENCE_MIDPOINT, FLOW_CONFIDENCE_SLOPE)
}

pub fn flow_confidence_with(a: &GrayImage, b: &GrayImage, f: &FlowField, midpoint: f64, slope: f64) -> Result<ScalarField> {
    let frames = [a.clone(), b.clone()];
    let (diff, valid) = flow_difference(&frames, std::slice::from_ref(f), 0)?;
    let data = diff
        .data()
        .iter()
        .zip(&valid)
        .map(|(r, ok)| if *ok { soft_threshold(r.abs(), midpoint, slope) } else { 0.0 })
        .collect();
    Raster::new(a.width(), a.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn smooth_texture(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = GrayImage::from_fn(w, h, |_, _| rng.random::<f64>());
        let t = gaussian_blur(&noise, 2.0);
        let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        t.map(|v| 0.1 + 0.8 * (v - lo) / (hi - lo))
    }

    fn shifted(base: &GrayImage, dx: isize, dy: isize, w: usize, h: usize, margin: usize) -> (GrayImage, GrayImage) {
        let m = margin as isize;
        let a = GrayImage::from_fn(w, h, |x, y| base.get((x as isize + m) as usize, (y as isize + m) as usize));
        let b = GrayImage::from_fn(w, h, |x, y| base.get((x as isize + m - dx) as usize, (y as isize + m - dy) as usize));
        (a, b)
    }

    fn mean_interior(f: &FlowField, border: usize) -> (f64, f64) {
        let (w, h) = f.dims();
        let mut acc = (0.0, 0.0, 0usize);
        for y in border..h - border {
            for x in border..w - border {
                let (u, v) = f.at(y * w + x);
                acc = (acc.0 + u, acc.1 + v, acc.2 + 1);
            }
        }
        (acc.0 / acc.2 as f64, acc.1 / acc.2 as f64)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = smooth_texture(32, 32, 1);
        let f = estimate_flow(&a, &a).unwrap();
        assert!(f.u().iter().chain(f.v()).all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn recovers_horizontal_shift() {
        let base = smooth_texture(80, 80, 2);
        let (a, b) = shifted(&base, 2, 0, 64, 64, 8);
        let f = estimate_flow(&a, &b).unwrap();
        let (mu, mv) = mean_interior(&f, 8);
        assert!((mu - 2.0).abs() < 0.25 && mv.abs() < 0.25, "({mu}, {mv})");
    }

    #[test]
    fn recovers_vertical_shift() {
        let base = smooth_texture(80, 80, 3);
        let (a, b) = shifted(&base, 0, -3, 64, 64, 8);
        let f = estimate_flow(&a, &b).unwrap();
        let (mu, mv) = mean_interior(&f, 8);
        assert!(mu.abs() < 0.25 && (mv + 3.0).abs() < 0.25, "({mu}, {mv})");
    }

    #[test]
    fn approximately_antisymmetric() {
        let base = smooth_texture(80, 80, 4);
        let (a, b) = shifted(&base, 3, 1, 64, 64, 8);
        let fwd = estimate_flow(&a, &b).unwrap();
        let bwd = estimate_flow(&b, &a).unwrap();
        let mut sums: Vec<f64> = (0..fwd.len())
            .filter(|i| {
                let (x, y) = (i % 64, i / 64);
                (8..56).contains(&x) && (8..56).contains(&y)
            })
            .map(|i| (fwd.u()[i] + bwd.u()[i]).hypot(fwd.v()[i] + bwd.v()[i]))
            .collect();
        sums.sort_by(f64::total_cmp);
        assert!(sums[sums.len() / 2] < 0.5);
    }

    #[test]
    fn rejects_mismatch_and_small() {
        let a = GrayImage::filled(20, 20, 0.0);
        let b = GrayImage::filled(21, 20, 0.0);
        assert!(estimate_flow(&a, &b).is_err());
        let s = GrayImage::filled(15, 20, 0.0);
        assert!(estimate_flow(&s, &s).is_err());
    }

    #[test]
    fn flow_difference_basics() {
        let c = vec![ScalarField::filled(6, 5, 2.5); 2];
        let f = FlowField::uniform(6, 5, 1.0, 0.5);
        let (d, valid) = flow_difference(&c, &[f], 0).unwrap();
        assert!(d.data().iter().zip(&valid).filter(|(_, v)| **v).all(|(x, _)| x.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = ScalarField::from_fn(6, 5, |_, _| rng.random());
        let b = ScalarField::from_fn(6, 5, |_, _| rng.random());
        let (d, valid) = flow_difference(&[a.clone(), b.clone()], &[FlowField::zero(6, 5)], 0).unwrap();
        assert!(valid.iter().all(|v| *v));
        for k in 0..30 {
            assert_eq!(d.data()[k], b.data()[k] - a.data()[k]);
        }
        assert!(flow_difference(&[a.clone(), b], &[FlowField::zero(6, 5)], 1).is_err());
    }

    /// Sampling oracle: explicit four-neighbour bilinear weights.
    #[test]
    fn flow_difference_matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (w, h) = (9, 7);
        let a = ScalarField::from_fn(w, h, |_, _| rng.random());
        let b = ScalarField::from_fn(w, h, |_, _| rng.random());
        let u: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.5..1.5)).collect();
        let v: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.5..1.5)).collect();
        let f = FlowField::new(w, h, u.clone(), v.clone()).unwrap();
        let (d, valid) = flow_difference(&[a.clone(), b.clone()], &[f], 0).unwrap();
        for i in 0..w * h {
            let tx = (i % w) as f64 + u[i];
            let ty = (i / w) as f64 + v[i];
            let inside = tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
            assert_eq!(valid[i], inside);
            if inside {
                let (x0, y0) = (tx.floor(), ty.floor());
                let mut s = 0.0;
                for (xx, yy) in [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)] {
                    let wt = (1.0 - (tx - xx).abs()) * (1.0 - (ty - yy).abs());
                    if wt > 0.0 {
                        s += wt * b.get(xx as usize, yy as usize);
                    }
                }
                assert!((d.data()[i] - (s - a.data()[i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flow_difference_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng| ScalarField::from_fn(8, 8, |_, _| rng.random());
        let (a0, a1, b0, b1) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let u: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = [FlowField::new(8, 8, u, v).unwrap()];
        let comb = |p: &ScalarField, q: &ScalarField| ScalarField::from_fn(8, 8, |x, y| 2.0 * p.get(x, y) - 0.5 * q.get(x, y));
        let (da, va) = flow_difference(&[a0.clone(), a1.clone()], &f, 0).unwrap();
        let (db, _) = flow_difference(&[b0.clone(), b1.clone()], &f, 0).unwrap();
        let (dc, _) = flow_difference(&[comb(&a0, &b0), comb(&a1, &b1)], &f, 0).unwrap();
        for k in 0..64 {
            if va[k] {
                assert!((dc.data()[k] - (2.0 * da.data()[k] - 0.5 * db.data()[k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn confidence_closed_forms() {
        let a = GrayImage::filled(4, 4, 0.5);
        let f = FlowField::zero(4, 4);
        for (r, expected) in [(0.0, 1.0 / (1.0 + (-5f64).exp())), (0.05, 0.5), (0.1, 1.0 / (1.0 + 5f64.exp()))] {
            let b = GrayImage::filled(4, 4, 0.5 + r);
            let s = flow_confidence(&a, &b, &f).unwrap();
            assert!(s.data().iter().all(|x| (x - expected).abs() < 1e-9));
        }
        let s = flow_confidence(&a, &a, &f).unwrap();
        assert!((s.data()[0] - 0.9933).abs() < 1e-4);
        let out = FlowField::uniform(4, 4, 10.0, 0.0);
        assert!(flow_confidence(&a, &a, &out).unwrap().data().iter().all(|x| *x == 0.0));
    }
}
