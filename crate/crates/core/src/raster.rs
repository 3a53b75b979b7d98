//! Raster types and the small set of image operations the pipeline needs.
//!
//! Every raster is row-major, `width * height` samples, and immutable once a
//! stage hands it on. Scalar rasters use `f64`; colour images store RGB
//! triplets in `[0, 1]`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pixel types that can be interpolated.
pub trait Pixel: Copy + Send + Sync + 'static {
    fn zero() -> Self;
    fn add(self, other: Self) -> Self;
    fn scale(self, s: f64) -> Self;
}

impl Pixel for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

impl Pixel for f32 {
    fn zero() -> Self {
        0.0
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn scale(self, s: f64) -> Self {
        (self as f64 * s) as f32
    }
}

impl Pixel for [f64; 3] {
    fn zero() -> Self {
        [0.0; 3]
    }
    fn add(self, o: Self) -> Self {
        [self[0] + o[0], self[1] + o[1], self[2] + o[2]]
    }
    fn scale(self, s: f64) -> Self {
        [self[0] * s, self[1] * s, self[2] * s]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Colour image, channels in `[0, 1]`.
pub type ImageRGB = Raster<[f64; 3]>;
/// Luminance image in `[0, 1]`.
pub type GrayImage = Raster<f64>;
/// Generic real-valued field (gradients, weights, disparities).
pub type ScalarField = Raster<f64>;

impl<T> Raster<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimensions(format!("{width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Dimensions(format!(
                "{width}x{height} raster with {} samples",
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        Raster { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = y * self.width + x;
        self.data[i] = v;
    }

    /// Sample with coordinates clamped to the raster.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }
}

impl ImageRGB {
    /// Builds a colour image, rejecting channel values outside `[0, 1]`.
    pub fn rgb(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(bad) = data.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("channel value {bad} outside [0,1]")));
        }
        Raster::new(width, height, data)
    }
}

/// Per-pixel depth in meters with an explicit validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Raster<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Pixels whose depth is not finite and positive are marked invalid.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let valid = data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::with_mask(width, height, data, valid)
    }

    pub fn with_mask(width: usize, height: usize, mut data: Vec<f64>, mut valid: Vec<bool>) -> Result<Self> {
        if valid.len() != data.len() {
            return Err(Error::Dimensions("depth mask length differs from data".into()));
        }
        for (d, v) in data.iter_mut().zip(valid.iter_mut()) {
            if *v && !(d.is_finite() && *d > 0.0) {
                *v = false;
            }
            if !*v {
                *d = 0.0;
            }
        }
        Ok(DepthMap { values: Raster::new(width, height, data)?, valid })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        DepthMap::new(width, height, vec![depth; width * height]).expect("positive constant depth")
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw depth values; invalid pixels hold 0 and must be checked via [`Self::valid`].
    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn raster(&self) -> &Raster<f64> {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.valid[i].then(|| self.values.data()[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn mean_valid(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| {
            self.values.data().iter().zip(&self.valid).filter(|(_, v)| **v).map(|(d, _)| *d).sum::<f64>()
                / n as f64
        })
    }

    pub fn min_max_valid(&self) -> Option<(f64, f64)> {
        self.values
            .data()
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .fold(None, |acc, (d, _)| match acc {
                None => Some((*d, *d)),
                Some((lo, hi)) => Some((lo.min(*d), hi.max(*d))),
            })
    }
}

/// Planar projective transform with `h[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) || m[(2, 2)].abs() < 1e-12 {
            return Err(Error::SingularHomography);
        }
        let m = m / m[(2, 2)];
        let det = m.determinant();
        let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        if !det.is_finite() || det.abs() < 1e-12 * scale.powi(3) {
            return Err(Error::SingularHomography);
        }
        Ok(Homography(m))
    }

    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or(Error::SingularHomography)?;
        Homography::new(inv)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Homography::new(self.0 * first.0)
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    /// Largest absolute entry difference to the identity.
    pub fn distance_to_identity(&self) -> f64 {
        (self.0 - Matrix3::identity()).iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

pub fn to_grayscale(img: &ImageRGB) -> GrayImage {
    img.map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
}

/// Forward differences with a zero last column (x) and last row (y).
pub fn gradients(img: &Raster<f64>) -> Result<(ScalarField, ScalarField)> {
    let (w, h) = img.dims();
    if w < 2 || h < 2 {
        return Err(Error::Dimensions(format!("gradients need at least 2x2, got {w}x{h}")));
    }
    let gx = Raster::from_fn(w, h, |x, y| if x + 1 < w { img.get(x + 1, y) - img.get(x, y) } else { 0.0 });
    let gy = Raster::from_fn(w, h, |x, y| if y + 1 < h { img.get(x, y + 1) - img.get(x, y) } else { 0.0 });
    Ok((gx, gy))
}

/// Bilinear sample; `None` when `(x, y)` falls outside `[0, w-1] x [0, h-1]`.
#[inline]
pub fn sample_bilinear<T: Pixel>(img: &Raster<T>, x: f64, y: f64) -> Option<T> {
    const EPS: f64 = 1e-9;
    let (w, h) = img.dims();
    if !(x >= -EPS && y >= -EPS && x <= (w - 1) as f64 + EPS && y <= (h - 1) as f64 + EPS) {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.get(x0, y0).scale(1.0 - fx).add(img.get(x1, y0).scale(fx));
    let bottom = img.get(x0, y1).scale(1.0 - fx).add(img.get(x1, y1).scale(fx));
    Some(top.scale(1.0 - fy).add(bottom.scale(fy)))
}

/// Bilinear sample that also reports which integer neighbours carry weight.
///
/// Returns the interpolated value only when every neighbour with non-zero
/// weight is valid according to `valid`.
pub fn sample_bilinear_masked(img: &Raster<f64>, valid: &[bool], x: f64, y: f64) -> Option<f64> {
    const EPS: f64 = 1e-9;
    let (w, h) = img.dims();
    if !(x >= -EPS && y >= -EPS && x <= (w - 1) as f64 + EPS && y <= (h - 1) as f64 + EPS) {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut acc = 0.0;
    for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            let wgt = wx * wy;
            if wgt <= 0.0 {
                continue;
            }
            let xi = (x0 + dx).min(w - 1);
            let yi = (y0 + dy).min(h - 1);
            let i = yi * w + xi;
            if !valid[i] {
                return None;
            }
            acc += wgt * img.data()[i];
        }
    }
    Some(acc)
}

/// Warps `img` so that `output(x, y) = img(h⁻¹(x, y))`.
///
/// Pixels whose source location leaves the image are zero and flagged
/// uncovered in the returned mask.
pub fn warp_bilinear<T: Pixel>(img: &Raster<T>, h: &Homography) -> Result<(Raster<T>, Vec<bool>)> {
    let inv = h.inverse()?;
    let (w, ht) = img.dims();
    let mut out = Vec::with_capacity(w * ht);
    let mut coverage = Vec::with_capacity(w * ht);
    for y in 0..ht {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            match sample_bilinear(img, sx, sy) {
                Some(v) => {
                    out.push(v);
                    coverage.push(true);
                }
                None => {
                    out.push(T::zero());
                    coverage.push(false);
                }
            }
        }
    }
    Ok((Raster { width: w, height: ht, data: out }, coverage))
}

fn histogram_bin(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// 256-bin histogram specification of `src` onto the distribution of `reference`.
///
/// Each source bin is sent to the first reference bin whose CDF reaches the
/// mid-rank quantile of that source bin, so a constant source lands on the
/// reference median and `src == reference` is a fixed point.
pub fn histogram_match(src: &GrayImage, reference: &GrayImage) -> GrayImage {
    let cdf = |img: &GrayImage| {
        let mut hist = [0usize; 256];
        for v in img.data() {
            hist[histogram_bin(*v)] += 1;
        }
        let n = img.len() as f64;
        let mut acc = 0usize;
        let mut cdf = [0f64; 256];
        for (c, h) in cdf.iter_mut().zip(hist.iter()) {
            acc += h;
            *c = acc as f64 / n;
        }
        cdf
    };
    let src_cdf = cdf(src);
    let ref_cdf = cdf(reference);
    let mut lut = [0f64; 256];
    for b in 0..256 {
        let below = if b == 0 { 0.0 } else { src_cdf[b - 1] };
        let q = 0.5 * (below + src_cdf[b]);
        let r = ref_cdf.iter().position(|c| *c >= q - 1e-12).unwrap_or(255);
        lut[b] = r as f64 / 255.0;
    }
    src.map(|v| lut[histogram_bin(*v)])
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur<T: Pixel>(img: &Raster<T>, sigma: f64) -> Raster<T> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (w, h) = img.dims();
    let horiz = Raster::from_fn(w, h, |x, y| {
        kernel.iter().enumerate().fold(T::zero(), |acc, (k, kv)| {
            acc.add(img.get_clamped(x as isize + k as isize - radius, y as isize).scale(*kv))
        })
    });
    Raster::from_fn(w, h, |x, y| {
        kernel.iter().enumerate().fold(T::zero(), |acc, (k, kv)| {
            acc.add(horiz.get_clamped(x as isize, y as isize + k as isize - radius).scale(*kv))
        })
    })
}

/// Per-axis resampling taps: bilinear when enlarging, area-weighted when shrinking.
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if scale <= 1.0 {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let s0 = s.floor() as usize;
                let s1 = (s0 + 1).min(src - 1);
                let f = s - s0 as f64;
                if s1 == s0 || f == 0.0 {
                    vec![(s0, 1.0)]
                } else {
                    vec![(s0, 1.0 - f), (s1, f)]
                }
            } else {
                let lo = i as f64 * scale;
                let hi = (i + 1) as f64 * scale;
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < src {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((j, overlap / scale));
                    }
                    j += 1;
                }
                taps
            }
        })
        .collect()
}

/// Resizes a raster; area-averaging when shrinking, bilinear when enlarging.
pub fn resize<T: Pixel>(img: &Raster<T>, width: usize, height: usize) -> Raster<T> {
    assert!(width > 0 && height > 0, "empty resize target");
    if img.dims() == (width, height) {
        return img.clone();
    }
    let tx = axis_taps(img.width(), width);
    let ty = axis_taps(img.height(), height);
    let horiz = Raster::from_fn(width, img.height(), |x, y| {
        tx[x].iter().fold(T::zero(), |acc, (sx, wt)| acc.add(img.get(*sx, y).scale(*wt)))
    });
    Raster::from_fn(width, height, |x, y| {
        ty[y].iter().fold(T::zero(), |acc, (sy, wt)| acc.add(horiz.get(x, *sy).scale(*wt)))
    })
}

/// Resizes a depth map, averaging only valid samples.
pub fn resize_depth(depth: &DepthMap, width: usize, height: usize) -> DepthMap {
    if depth.dims() == (width, height) {
        return depth.clone();
    }
    let weighted = depth.raster().map(|_| 0.0);
    let mut num = weighted.clone();
    let mut den = weighted;
    for i in 0..depth.len() {
        if depth.is_valid(i) {
            num.data_mut()[i] = depth.values()[i];
            den.data_mut()[i] = 1.0;
        }
    }
    let num = resize(&num, width, height);
    let den = resize(&den, width, height);
    let valid: Vec<bool> = den.data().iter().map(|d| *d > 1e-9).collect();
    let data = num.data().iter().zip(den.data()).map(|(n, d)| if *d > 1e-9 { n / d } else { 0.0 }).collect();
    DepthMap::with_mask(width, height, data, valid).expect("consistent resize dims")
}

/// Number of levels a pyramid can have before dropping under `min_side`.
pub fn max_pyramid_levels(width: usize, height: usize, factor: f64, min_side: usize) -> usize {
    let mut levels = 1;
    let (mut w, mut h) = (width as f64, height as f64);
    loop {
        w = (w * factor).round();
        h = (h * factor).round();
        if (w as usize) < min_side || (h as usize) < min_side {
            return levels;
        }
        levels += 1;
    }
}

/// Gaussian pyramid; level 0 is the input. Levels never go below 8x8.
pub fn build_pyramid<T: Pixel>(img: &Raster<T>, levels: usize, factor: f64) -> Result<Vec<Raster<T>>> {
    if levels == 0 {
        return Err(Error::InvalidValue("pyramid needs at least one level".into()));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidValue(format!("pyramid factor {factor} outside (0,1)")));
    }
    if img.width() < 8 || img.height() < 8 || levels > max_pyramid_levels(img.width(), img.height(), factor, 8) {
        return Err(Error::Dimensions(format!(
            "{} levels at factor {factor} take {}x{} below 8x8",
            levels,
            img.width(),
            img.height()
        )));
    }
    let sigma = 0.5 * (1.0 / (factor * factor) - 1.0).sqrt();
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let w = ((prev.width() as f64) * factor).round() as usize;
        let h = ((prev.height() as f64) * factor).round() as usize;
        let blurred = gaussian_blur(prev, sigma);
        out.push(resize(&blurred, w, h));
    }
    Ok(out)
}
